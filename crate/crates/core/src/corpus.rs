//! Records, embedding tables and the row-aligned matrix view that every
//! downstream stage works on.
//!
//! Two on-disk embedding formats are supported:
//!
//! * binary: a 16-byte header (`b"AE"`, version `u16`, `n: u64`, `d: u32`, all
//!   little-endian) followed by `n * d` little-endian `f32`, plus a sidecar
//!   file (same path, `.ids` extension) holding one record id per line;
//! * line-delimited JSON: `{"id": "...", "embedding": [..]}` per line.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: [u8; 2] = *b"AE";
pub const EMBEDDING_VERSION: u16 = 1;
const HEADER_LEN: usize = 16;

/// One supervised `{instruction, input, output}` triple and where it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub source: String,
    pub instruction: String,
    pub input: String,
    pub output: String,
}

impl Record {
    /// The text that gets embedded and used as a generation prompt:
    /// instruction, newline, input. An empty input contributes nothing.
    pub fn embed_text(&self) -> String {
        if self.input.is_empty() {
            self.instruction.clone()
        } else {
            format!("{}\n{}", self.instruction, self.input)
        }
    }
}

fn string_field(obj: &serde_json::Map<String, Value>, key: &str, line: usize) -> Result<Option<String>> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(Error::Parse {
            line,
            message: format!("field {key:?} must be a string"),
        }),
    }
}

/// Parse a line-delimited JSON corpus. Blank lines are skipped but still
/// counted for line numbers.
pub fn read_corpus<R: BufRead>(reader: R) -> Result<Vec<Record>> {
    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let Value::Object(obj) = value else {
            return Err(Error::Parse {
                line: line_no,
                message: "expected a JSON object".into(),
            });
        };
        let instruction = match string_field(&obj, "instruction", line_no)? {
            Some(s) if !s.is_empty() => s,
            Some(_) => {
                return Err(Error::Parse {
                    line: line_no,
                    message: "empty instruction".into(),
                })
            }
            None => {
                return Err(Error::Parse {
                    line: line_no,
                    message: "missing instruction".into(),
                })
            }
        };
        let output = string_field(&obj, "output", line_no)?.ok_or_else(|| Error::Parse {
            line: line_no,
            message: "missing output".into(),
        })?;
        let input = string_field(&obj, "input", line_no)?.unwrap_or_default();
        let source = string_field(&obj, "source", line_no)?.unwrap_or_else(|| "unknown".into());
        let id = match string_field(&obj, "id", line_no)? {
            Some(id) => id,
            None => format!("{source}:{line_no}"),
        };
        if id.is_empty() || id.contains('\n') {
            return Err(Error::Parse {
                line: line_no,
                message: format!("invalid id {id:?}"),
            });
        }
        if let Some(&first) = seen.get(&id) {
            return Err(Error::DuplicateId {
                id,
                first,
                second: line_no,
            });
        }
        seen.insert(id.clone(), line_no);
        records.push(Record {
            id,
            source,
            instruction,
            input,
            output,
        });
    }
    Ok(records)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus(BufReader::new(file))
}

pub fn write_corpus<W: Write>(mut writer: W, records: &[Record]) -> Result<()> {
    for record in records {
        serde_json::to_writer(&mut writer, record)?;
        writer.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

pub fn save_corpus(path: impl AsRef<Path>, records: &[Record]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    write_corpus(&mut writer, records)?;
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Embedding vectors keyed by record id, in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingTable {
    ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add a vector; fails if the id is already present.
    pub fn insert(&mut self, id: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        let id = id.into();
        if let Some(&first) = self.index.get(&id) {
            return Err(Error::DuplicateId {
                id,
                first: first + 1,
                second: self.ids.len() + 1,
            });
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.vectors.push(vector);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index.get(id).map(|&i| self.vectors[i].as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.ids
            .iter()
            .zip(&self.vectors)
            .map(|(id, v)| (id.as_str(), v.as_slice()))
    }

    /// Reads the binary format if the file starts with the magic bytes,
    /// line-delimited JSON otherwise.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut magic = [0u8; 2];
        let is_binary = matches!(file.read(&mut magic), Ok(2)) && magic == EMBEDDING_MAGIC;
        if is_binary {
            Self::load_binary(path)
        } else {
            Self::load_jsonl(path)
        }
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        #[derive(Deserialize)]
        struct Line {
            id: String,
            embedding: Vec<f64>,
        }
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut table = Self::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
            if parsed.embedding.iter().any(|x| !x.is_finite()) {
                return Err(Error::Parse {
                    line: idx + 1,
                    message: format!("non-finite component in embedding for {:?}", parsed.id),
                });
            }
            table.insert(parsed.id, parsed.embedding)?;
        }
        Ok(table)
    }

    pub fn load_binary(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (n, d, values) = decode_vectors(&bytes)?;
        let ids_path = ids_path(path);
        let ids_text = std::fs::read_to_string(&ids_path).map_err(|e| Error::io(&ids_path, e))?;
        let ids: Vec<&str> = ids_text.lines().collect();
        if ids.len() != n {
            return Err(Error::Format(format!(
                "{} holds {} ids but the vector file holds {n} rows",
                ids_path.display(),
                ids.len()
            )));
        }
        let mut table = Self::new();
        for (row, id) in ids.into_iter().enumerate() {
            let vector = values[row * d..(row + 1) * d]
                .iter()
                .map(|&x| f64::from(x))
                .collect();
            table.insert(id, vector)?;
        }
        Ok(table)
    }

    /// Writes the binary format and its `.ids` sidecar. All vectors must
    /// share one dimension.
    pub fn save_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let d = self.vectors.first().map_or(0, Vec::len);
        for (id, v) in self.iter() {
            if v.len() != d {
                return Err(Error::DimensionMismatch {
                    id: id.to_string(),
                    expected: d,
                    actual: v.len(),
                });
            }
        }
        let rows: Vec<&[f64]> = self.vectors.iter().map(Vec::as_slice).collect();
        write_vectors(path.as_ref(), &self.ids, &rows, d)
    }
}

/// Sidecar id list for a binary vector file.
pub fn ids_path(path: &Path) -> PathBuf {
    path.with_extension("ids")
}

pub fn encode_vectors(rows: &[&[f64]], d: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + rows.len() * d * 4);
    out.extend_from_slice(&EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows.len() as u64).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for row in rows {
        for &x in row.iter() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_vectors(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format("truncated header".into()));
    }
    if bytes[0..2] != EMBEDDING_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[2], bytes[3]]);
    if version != EMBEDDING_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let expected = n
        .checked_mul(d)
        .and_then(|x| x.checked_mul(4))
        .and_then(|x| x.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Format("header sizes overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "expected {expected} bytes for {n}x{d}, found {}",
            bytes.len()
        )));
    }
    let values: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if values.iter().any(|x| !x.is_finite()) {
        return Err(Error::Format("non-finite component".into()));
    }
    Ok((n, d, values))
}

pub fn write_vectors(path: &Path, ids: &[String], rows: &[&[f64]], d: usize) -> Result<()> {
    if ids.iter().any(|id| id.contains('\n')) {
        return Err(Error::invalid("ids written to a sidecar file cannot contain newlines"));
    }
    std::fs::write(path, encode_vectors(rows, d)).map_err(|e| Error::io(path, e))?;
    let mut sidecar = String::new();
    for id in ids {
        sidecar.push_str(id);
        sidecar.push('\n');
    }
    let ids_path = ids_path(path);
    std::fs::write(&ids_path, sidecar).map_err(|e| Error::io(&ids_path, e))
}

/// Dense row-major embedding matrix aligned with a record list.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusMatrix {
    dim: usize,
    data: Vec<f64>,
    ids: Vec<String>,
    row_index: HashMap<String, usize>,
}

impl CorpusMatrix {
    /// Builds a matrix from explicit rows. Rows must share one dimension and
    /// be finite; ids must be unique.
    pub fn from_rows(ids: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(Error::invalid(format!(
                "{} ids for {} rows",
                ids.len(),
                rows.len()
            )));
        }
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        let mut row_index = HashMap::with_capacity(ids.len());
        for (i, (id, row)) in ids.iter().zip(&rows).enumerate() {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    id: id.clone(),
                    expected: dim,
                    actual: row.len(),
                });
            }
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("non-finite component in row {id:?}")));
            }
            if let Some(first) = row_index.insert(id.clone(), i) {
                return Err(Error::DuplicateId {
                    id: id.clone(),
                    first: first + 1,
                    second: i + 1,
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            dim,
            data,
            ids,
            row_index,
        })
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.n()).map(move |i| self.row(i))
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, row: usize) -> &str {
        &self.ids[row]
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.row_index.get(id).copied()
    }

    pub fn vector(&self, id: &str) -> Option<&[f64]> {
        self.row_of(id).map(|i| self.row(i))
    }

    /// Divides every row by its L2 norm.
    pub fn normalize(mut self) -> Result<Self> {
        let dim = self.dim;
        if dim == 0 {
            return Ok(self);
        }
        for (i, row) in self.data.chunks_exact_mut(dim).enumerate() {
            let norm = l2_norm(row);
            if norm == 0.0 {
                return Err(Error::ZeroNorm(self.ids[i].clone()));
            }
            for x in row.iter_mut() {
                *x /= norm;
            }
        }
        Ok(self)
    }

    pub fn save_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let rows: Vec<&[f64]> = self.rows().collect();
        write_vectors(path.as_ref(), &self.ids, &rows, self.dim)
    }
}

/// Normalizes a matrix (free-function form of [`CorpusMatrix::normalize`]).
pub fn normalize(matrix: CorpusMatrix) -> Result<CorpusMatrix> {
    matrix.normalize()
}

/// Aligns embedding vectors with `records`: row `i` is the vector for `records[i]`.
pub fn attach_embeddings(records: &[Record], table: &EmbeddingTable) -> Result<CorpusMatrix> {
    let missing: Vec<String> = records
        .iter()
        .filter(|r| table.get(&r.id).is_none())
        .map(|r| r.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingEmbeddings(missing));
    }
    let mut rows = Vec::with_capacity(records.len());
    let mut dim = None;
    for record in records {
        let v = table.get(&record.id).expect("checked above");
        let expected = *dim.get_or_insert(v.len());
        if v.len() != expected {
            return Err(Error::DimensionMismatch {
                id: record.id.clone(),
                expected,
                actual: v.len(),
            });
        }
        rows.push(v.to_vec());
    }
    CorpusMatrix::from_rows(records.iter().map(|r| r.id.clone()).collect(), rows)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let t = x - y;
            t * t
        })
        .sum()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let denom = l2_norm(a) * l2_norm(b);
    if denom == 0.0 {
        0.0
    } else {
        dot(a, b) / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: &str) -> Record {
        Record {
            id: id.into(),
            source: "s".into(),
            instruction: format!("do {id}"),
            input: String::new(),
            output: "ok".into(),
        }
    }

    #[test]
    fn reads_well_formed_lines_in_order() {
        let text = r#"{"id":"a","instruction":"x","output":"1"}
{"instruction":"y","input":"in","output":"2","source":"fin"}
{"id":"c","instruction":"z","input":"","output":"3"}
"#;
        let records = read_corpus(text.as_bytes()).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(records[0].id, "a");
        assert_eq!(records[1].id, "fin:2");
        assert_eq!(records[1].input, "in");
        assert_eq!(records[2].input, "");
        assert_eq!(records[0].source, "unknown");
    }

    #[test]
    fn missing_instruction_names_line() {
        let text = "{\"instruction\":\"x\",\"output\":\"1\"}\n{\"output\":\"2\"}\n";
        let err = read_corpus(text.as_bytes()).unwrap_err();
        assert_eq!(err.to_string(), "line 2: missing instruction");
    }

    #[test]
    fn duplicate_id_names_both_lines() {
        let text = "{\"id\":\"a\",\"instruction\":\"x\",\"output\":\"1\"}\n{\"id\":\"a\",\"instruction\":\"y\",\"output\":\"2\"}\n";
        match read_corpus(text.as_bytes()).unwrap_err() {
            Error::DuplicateId { id, first, second } => {
                assert_eq!((id.as_str(), first, second), ("a", 1, 2));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn malformed_json_names_line() {
        let text = "{\"instruction\":\"x\",\"output\":\"1\"}\n\n{oops\n";
        let err = read_corpus(text.as_bytes()).unwrap_err();
        assert!(err.to_string().starts_with("line 3:"), "{err}");
    }

    #[test]
    fn embed_text_joins_with_newline() {
        let mut r = rec("a");
        assert_eq!(r.embed_text(), "do a");
        r.input = "ctx".into();
        assert_eq!(r.embed_text(), "do a\nctx");
    }

    #[test]
    fn attach_orders_rows_by_records() {
        let records = vec![rec("b"), rec("a")];
        let mut table = EmbeddingTable::new();
        table.insert("a", vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        table.insert("b", vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let m = attach_embeddings(&records, &table).unwrap();
        assert_eq!((m.n(), m.dim()), (2, 4));
        assert_eq!(m.row(0), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(m.row_of("a"), Some(1));
        assert_eq!(m.id(0), "b");
    }

    #[test]
    fn attach_reports_missing_ids() {
        let records = vec![rec("a"), rec("x")];
        let mut table = EmbeddingTable::new();
        table.insert("a", vec![1.0]).unwrap();
        match attach_embeddings(&records, &table).unwrap_err() {
            Error::MissingEmbeddings(ids) => assert_eq!(ids, vec!["x".to_string()]),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn attach_reports_dimension_mismatch() {
        let records = vec![rec("a"), rec("b")];
        let mut table = EmbeddingTable::new();
        table.insert("a", vec![1.0; 4]).unwrap();
        table.insert("b", vec![1.0; 5]).unwrap();
        match attach_embeddings(&records, &table).unwrap_err() {
            Error::DimensionMismatch {
                id,
                expected,
                actual,
            } => assert_eq!((id.as_str(), expected, actual), ("b", 4, 5)),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn normalize_examples() {
        let m = CorpusMatrix::from_rows(vec!["a".into()], vec![vec![3.0, 4.0]])
            .unwrap()
            .normalize()
            .unwrap();
        assert!((m.row(0)[0] - 0.6).abs() < 1e-15);
        assert!((m.row(0)[1] - 0.8).abs() < 1e-15);

        let unit = CorpusMatrix::from_rows(vec!["u".into()], vec![vec![0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(unit.clone().normalize().unwrap(), unit);

        let zero = CorpusMatrix::from_rows(vec!["z".into()], vec![vec![0.0, 0.0]]).unwrap();
        assert!(matches!(zero.normalize(), Err(Error::ZeroNorm(id)) if id == "z"));
    }

    #[test]
    fn binary_roundtrip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let mut table = EmbeddingTable::new();
        table.insert("r1", vec![0.5, -1.25, 3.0]).unwrap();
        table.insert("r2", vec![0.0, 2.0, -0.125]).unwrap();
        table.save_binary(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 16 + 2 * 3 * 4);
        assert_eq!(&bytes[0..2], b"AE");
        assert_eq!(u64::from_le_bytes(bytes[4..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(EmbeddingTable::load(&path).unwrap(), table);
    }

    #[test]
    fn jsonl_embeddings_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.jsonl");
        std::fs::write(&path, "{\"id\":\"a\",\"embedding\":[1,2]}\n{\"id\":\"b\",\"embedding\":[3,4]}\n").unwrap();
        let t = EmbeddingTable::load(&path).unwrap();
        assert_eq!(t.get("b"), Some(&[3.0, 4.0][..]));
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn truncated_binary_is_rejected() {
        let rows = [&[1.0, 2.0][..]];
        let mut bytes = encode_vectors(&rows, 2);
        bytes.pop();
        assert!(matches!(decode_vectors(&bytes), Err(Error::Format(_))));
    }

    fn arb_record() -> impl Strategy<Value = (String, String, String, String)> {
        (
            "[a-z]{1,6}",
            "\\PC{1,20}",
            "\\PC{0,20}",
            "\\PC{0,20}",
        )
    }

    proptest! {
        #[test]
        fn save_load_roundtrip(raw in proptest::collection::vec(arb_record(), 0..12)) {
            let records: Vec<Record> = raw
                .into_iter()
                .enumerate()
                .map(|(i, (source, instruction, input, output))| Record {
                    id: format!("{source}-{i}"),
                    source,
                    instruction,
                    input,
                    output,
                })
                .collect();
            let mut first = Vec::new();
            write_corpus(&mut first, &records).unwrap();
            let loaded = read_corpus(first.as_slice()).unwrap();
            prop_assert_eq!(&loaded, &records);
            let mut second = Vec::new();
            write_corpus(&mut second, &loaded).unwrap();
            prop_assert_eq!(first, second);
        }

        #[test]
        fn normalize_is_idempotent(rows in proptest::collection::vec(
            proptest::collection::vec(-100.0f64..100.0, 5), 1..20)) {
            prop_assume!(rows.iter().all(|r| l2_norm(r) > 1e-6));
            let ids = (0..rows.len()).map(|i| i.to_string()).collect();
            let once = CorpusMatrix::from_rows(ids, rows).unwrap().normalize().unwrap();
            let twice = once.clone().normalize().unwrap();
            for (a, b) in once.rows().zip(twice.rows()) {
                prop_assert!((l2_norm(a) - 1.0).abs() < 1e-9);
                for (x, y) in a.iter().zip(b) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
