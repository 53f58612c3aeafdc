//! Shared test fixtures: an HTTP stub for the embedding/completion services.
#![allow(dead_code)]

pub mod synth;

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde_json::Value;
use tiny_http::{Header, Response, Server};

type Handler = dyn Fn(&str, &Value) -> (u16, Value) + Send + Sync;

/// Serves POST requests on localhost; the handler gets the URL path and the
/// JSON body and returns a status and a JSON reply.
pub struct Stub {
    pub url: String,
    hits: Arc<AtomicUsize>,
    stop: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
}

impl Stub {
    pub fn start(handler: impl Fn(&str, &Value) -> (u16, Value) + Send + Sync + 'static) -> Self {
        let server = Arc::new(Server::http("127.0.0.1:0").expect("bind"));
        let port = server.server_addr().to_ip().expect("ip").port();
        let handler: Arc<Handler> = Arc::new(handler);
        let hits = Arc::new(AtomicUsize::new(0));
        let stop = Arc::new(AtomicBool::new(false));
        let workers = (0..8)
            .map(|_| {
                let (server, handler, hits, stop) = (server.clone(), handler.clone(), hits.clone(), stop.clone());
                std::thread::spawn(move || {
                    while !stop.load(Ordering::Relaxed) {
                        let Ok(Some(mut req)) = server.recv_timeout(Duration::from_millis(50)) else {
                            continue;
                        };
                        hits.fetch_add(1, Ordering::SeqCst);
                        let mut body = String::new();
                        let _ = req.as_reader().read_to_string(&mut body);
                        let json: Value = serde_json::from_str(&body).unwrap_or(Value::Null);
                        let (status, reply) = handler(req.url(), &json);
                        let header = Header::from_bytes("Content-Type", "application/json").unwrap();
                        let _ = req.respond(
                            Response::from_string(reply.to_string())
                                .with_status_code(status)
                                .with_header(header),
                        );
                    }
                })
            })
            .collect();
        Self {
            url: format!("http://127.0.0.1:{port}"),
            hits,
            stop,
            workers,
        }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

impl Drop for Stub {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}
