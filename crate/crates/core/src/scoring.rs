//! Model-feedback value scores.
//!
//! For a record `x` with reference output `y`, the raw model and the
//! stage-1 fine-tuned model each produce an answer; both are scored against
//! `y` with Rouge, and combined as
//!
//! ```text
//! diff = raw - lora
//! prop = -lora / (raw + 1)
//! llm  = diff + prop
//! ```
//!
//! so records the fine-tuned model still handles poorly (or got worse at)
//! score high.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::Generation;
use crate::corpus::Record;
use crate::error::{Error, Result};

/// Which Rouge F1 to use for model scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RougeVariant {
    #[default]
    RougeL,
    Rouge1,
    Rouge2,
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF      // hiragana, katakana
        | 0x3400..=0x4DBF    // CJK extension A
        | 0x4E00..=0x9FFF    // CJK unified ideographs
        | 0xAC00..=0xD7AF    // hangul syllables
        | 0xF900..=0xFAFF    // compatibility ideographs
        | 0x20000..=0x2FA1F) // extensions B onwards
}

/// Lowercased letter/digit runs are words; each CJK character is its own
/// token; everything else separates.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if is_cjk(c) {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            tokens.push(c.to_string());
        } else if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Length of the longest common subsequence (two-row dynamic program).
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn f1(overlap: usize, candidate_len: usize, reference_len: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / candidate_len as f64;
    let r = overlap as f64 / reference_len as f64;
    2.0 * p * r / (p + r)
}

pub fn rouge_l_tokens<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    f1(lcs_len(candidate, reference), candidate.len(), reference.len())
}

fn ngram_overlap(candidate: &[String], reference: &[String], n: usize) -> (usize, usize, usize) {
    let grams = |t: &[String]| -> HashMap<Vec<String>, usize> {
        let mut m = HashMap::new();
        if t.len() >= n {
            for w in t.windows(n) {
                *m.entry(w.to_vec()).or_insert(0) += 1;
            }
        }
        m
    };
    let c = grams(candidate);
    let r = grams(reference);
    let overlap = c
        .iter()
        .map(|(g, &cnt)| cnt.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (
        overlap,
        candidate.len().saturating_sub(n - 1),
        reference.len().saturating_sub(n - 1),
    )
}

/// Rouge F1 of `candidate` against `reference`.
pub fn rouge(candidate: &str, reference: &str, variant: RougeVariant) -> Result<f64> {
    let reference = tokenize(reference);
    if reference.is_empty() {
        return Err(Error::invalid("reference has no tokens"));
    }
    let candidate = tokenize(candidate);
    if candidate.is_empty() {
        return Ok(0.0);
    }
    Ok(match variant {
        RougeVariant::RougeL => rouge_l_tokens(&candidate, &reference),
        RougeVariant::Rouge1 | RougeVariant::Rouge2 => {
            let n = if variant == RougeVariant::Rouge1 { 1 } else { 2 };
            let (overlap, cl, rl) = ngram_overlap(&candidate, &reference, n);
            if rl == 0 {
                return Err(Error::invalid(format!("reference shorter than {n} tokens")));
            }
            f1(overlap, cl.max(1), rl)
        }
    })
}

/// Rouge-L F1 over [`tokenize`]d text.
pub fn rouge_l(candidate: &str, reference: &str) -> Result<f64> {
    rouge(candidate, reference, RougeVariant::RougeL)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTriple {
    pub id: String,
    pub raw: f64,
    pub lora: f64,
    pub diff: f64,
    pub prop: f64,
    pub llm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub diff: f64,
    pub prop: f64,
    pub llm: f64,
}

pub fn score_record(raw: f64, lora: f64) -> Result<Scores> {
    for (name, v) in [("raw", raw), ("lora", lora)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("{name} score {v} outside [0, 1]")));
        }
    }
    let diff = raw - lora;
    let prop = -lora / (raw + 1.0);
    Ok(Scores {
        diff,
        prop,
        llm: diff + prop,
    })
}

#[derive(Debug, Clone, Default)]
pub struct ScoredPool {
    pub triples: Vec<ScoreTriple>,
    /// Records that cannot be scored, with the reason.
    pub excluded: Vec<(String, String)>,
}

impl ScoredPool {
    pub fn llm_scores(&self) -> HashMap<String, f64> {
        self.triples.iter().map(|t| (t.id.clone(), t.llm)).collect()
    }
}

fn generated<'a>(table: &'a HashMap<String, Generation>, id: &str) -> std::result::Result<&'a str, String> {
    match table.get(id) {
        Some(Generation::Text(t)) => Ok(t),
        Some(Generation::Failed(e)) => Err(e.clone()),
        None => Err("no generation".into()),
    }
}

/// Scores every record against its two generations. A record is excluded
/// when either generation failed or its reference has no tokens.
pub fn score_pool(
    records: &[&Record],
    raw_outputs: &HashMap<String, Generation>,
    lora_outputs: &HashMap<String, Generation>,
    variant: RougeVariant,
) -> ScoredPool {
    let results: Vec<std::result::Result<ScoreTriple, (String, String)>> = records
        .par_iter()
        .map(|record| {
            let id = record.id.clone();
            let raw_text = generated(raw_outputs, &id);
            let lora_text = generated(lora_outputs, &id);
            let (raw_text, lora_text) = match (raw_text, lora_text) {
                (Ok(r), Ok(l)) => (r, l),
                (Err(e), Ok(_)) => return Err((id, format!("raw generation failed: {e}"))),
                (Ok(_), Err(e)) => return Err((id, format!("lora generation failed: {e}"))),
                (Err(a), Err(b)) => {
                    return Err((id, format!("both generations failed: {a}; {b}")))
                }
            };
            let raw = rouge(raw_text, &record.output, variant).map_err(|e| (id.clone(), e.to_string()))?;
            let lora = rouge(lora_text, &record.output, variant).map_err(|e| (id.clone(), e.to_string()))?;
            let s = score_record(raw, lora).map_err(|e| (id.clone(), e.to_string()))?;
            Ok(ScoreTriple {
                id,
                raw,
                lora,
                diff: s.diff,
                prop: s.prop,
                llm: s.llm,
            })
        })
        .collect();
    let mut pool = ScoredPool::default();
    for r in results {
        match r {
            Ok(t) => pool.triples.push(t),
            Err((id, reason)) => {
                log::warn!("excluding {id} from scoring: {reason}");
                pool.excluded.push((id, reason));
            }
        }
    }
    pool
}

pub fn write_scores(path: &Path, triples: &[ScoreTriple]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for t in triples {
        w.serialize(t)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreTriple>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Exhaustive subsequence search; only for very short inputs.
    fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
        let mut best = 0;
        for mask in 0u32..(1 << a.len()) {
            let sub: Vec<u8> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
            let mut it = b.iter();
            if sub.iter().all(|x| it.any(|y| y == x)) {
                best = best.max(sub.len());
            }
        }
        best
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l("the cat sat", "the cat sat").unwrap(), 1.0);
        assert_eq!(rouge_l("alpha beta", "gamma delta").unwrap(), 0.0);
        let f = rouge_l("a c d", "a b c d").unwrap();
        assert!((f - 6.0 / 7.0).abs() < 1e-15);
        assert_eq!(rouge_l("", "ref").unwrap(), 0.0);
        assert!(rouge_l("x", "  ...  ").is_err());
    }

    #[test]
    fn tokenizer_splits_cjk_and_folds_case() {
        assert_eq!(tokenize("Hello, World42!"), vec!["hello", "world42"]);
        assert_eq!(tokenize("股票abc上涨"), vec!["股", "票", "abc", "上", "涨"]);
    }

    #[test]
    fn rouge_n_variants() {
        assert_eq!(rouge("a b c", "a b c", RougeVariant::Rouge1).unwrap(), 1.0);
        let r2 = rouge("a b x", "a b c", RougeVariant::Rouge2).unwrap();
        assert!((r2 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn score_record_examples() {
        let s = score_record(0.8, 0.3).unwrap();
        assert!((s.diff - 0.5).abs() < 1e-12);
        assert!((s.prop + 1.0 / 6.0).abs() < 1e-12);
        assert!((s.llm - 1.0 / 3.0).abs() < 1e-12);
        let s = score_record(0.0, 0.0).unwrap();
        assert_eq!((s.diff, s.prop, s.llm), (0.0, 0.0, 0.0));
        let s = score_record(1.0, 1.0).unwrap();
        assert_eq!((s.diff, s.prop, s.llm), (0.0, -0.5, -0.5));
        assert!(score_record(1.1, 0.0).is_err());
        assert!(score_record(0.5, -0.1).is_err());
    }

    fn record(id: &str, output: &str) -> Record {
        Record {
            id: id.into(),
            source: "s".into(),
            instruction: "q".into(),
            input: String::new(),
            output: output.into(),
        }
    }

    #[test]
    fn score_pool_composition_and_exclusions() {
        let recs = [
            record("learned", "net income rose"),
            record("regressed", "net income rose"),
            record("half", "net income rose"),
            record("both", "x"),
        ];
        let refs: Vec<&Record> = recs.iter().collect();
        let text = |s: &str| Generation::Text(s.into());
        let raw: HashMap<String, Generation> = [
            ("learned", text("zzz")),
            ("regressed", text("net income rose")),
            ("half", Generation::Failed("timeout".into())),
            ("both", Generation::Failed("500".into())),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let lora: HashMap<String, Generation> = [
            ("learned", text("net income rose")),
            ("regressed", text("zzz")),
            ("half", text("net income rose")),
            ("both", Generation::Failed("500".into())),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let pool = score_pool(&refs, &raw, &lora, RougeVariant::RougeL);
        assert_eq!(pool.triples.len(), 2);
        assert_eq!(pool.triples[0].llm, -2.0);
        assert_eq!(pool.triples[1].llm, 1.0);
        let excluded: Vec<&str> = pool.excluded.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(excluded, vec!["half", "both"]);
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        let s = score_record(0.8, 0.3).unwrap();
        let t = vec![ScoreTriple {
            id: "a".into(),
            raw: 0.8,
            lora: 0.3,
            diff: s.diff,
            prop: s.prop,
            llm: s.llm,
        }];
        write_scores(&path, &t).unwrap();
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("id,raw,lora,diff,prop,llm\n"));
        assert_eq!(read_scores(&path).unwrap(), t);
    }

    proptest! {
        #[test]
        fn lcs_matches_exhaustive(a in proptest::collection::vec(0u8..4, 0..9), b in proptest::collection::vec(0u8..4, 0..9)) {
            prop_assert_eq!(lcs_len(&a, &b), brute_lcs(&a, &b));
        }

        #[test]
        fn f1_is_swap_invariant(a in "[a-d ]{1,30}", b in "[a-d ]{1,30}") {
            prop_assume!(!tokenize(&a).is_empty() && !tokenize(&b).is_empty());
            prop_assert_eq!(rouge_l(&a, &b).unwrap(), rouge_l(&b, &a).unwrap());
        }

        #[test]
        fn llm_monotone_and_bounded(raw in 0.0f64..=1.0, lora in 0.0f64..=1.0, step in 1e-3f64..0.5) {
            let s = score_record(raw, lora).unwrap();
            prop_assert!((-2.0..=1.0).contains(&s.llm));
            if lora + step <= 1.0 {
                prop_assert!(score_record(raw, lora + step).unwrap().llm < s.llm);
            }
            if raw + step <= 1.0 {
                prop_assert!(score_record(raw + step, lora).unwrap().llm > s.llm);
            }
        }
    }
}
