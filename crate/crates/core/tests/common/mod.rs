#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use latte_core::embed::stub_embed_tokens;

/// Minimal hidden-states endpoint. Each token of the prompt gets a
/// deterministic vector; the first `fail_first` requests answer 503.
pub struct MockServer {
    pub url: String,
    requests: Arc<AtomicUsize>,
    layers: Arc<Mutex<Vec<i64>>>,
}

impl MockServer {
    pub fn start(dim: usize, fail_first: usize) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind mock server");
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(AtomicUsize::new(0));
        let layers = Arc::new(Mutex::new(Vec::new()));
        let (r, l) = (requests.clone(), layers.clone());
        std::thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                let n = r.fetch_add(1, Ordering::SeqCst);
                let _ = serve(stream, dim, n < fail_first, &l);
            }
        });
        MockServer { url, requests, layers }
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn layers(&self) -> Vec<i64> {
        self.layers.lock().unwrap().clone()
    }
}

fn serve(stream: TcpStream, dim: usize, fail: bool, layers: &Mutex<Vec<i64>>) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut length = 0usize;
    let mut line = String::new();
    loop {
        line.clear();
        reader.read_line(&mut line)?;
        let trimmed = line.trim_end();
        if trimmed.is_empty() {
            break;
        }
        if let Some((k, v)) = trimmed.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                length = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; length];
    reader.read_exact(&mut body)?;
    let (status, payload) = if fail {
        ("503 Service Unavailable", "{\"error\":\"warming up\"}".to_string())
    } else {
        let request: serde_json::Value = serde_json::from_slice(&body).unwrap_or_default();
        let prompt = request["prompt"].as_str().unwrap_or_default();
        layers.lock().unwrap().push(request["layer"].as_i64().unwrap_or(i64::MIN));
        let states = stub_embed_tokens(prompt, dim, 99);
        let payload = serde_json::json!({
            "dim": dim,
            "tokens": states.len(),
            "hidden_states": states,
        });
        ("200 OK", payload.to_string())
    };
    let mut stream = stream;
    write!(
        stream,
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    )?;
    stream.flush()
}
