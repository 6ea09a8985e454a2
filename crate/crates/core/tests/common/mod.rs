//! Minimal HTTP/1.1 server standing in for a local generation endpoint.

#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;

type Responder = dyn Fn(usize, &str) -> (u16, String) + Send + Sync;

pub struct Stub {
    pub endpoint: String,
    bodies: Arc<Mutex<Vec<String>>>,
}

impl Stub {
    /// Serves until the process exits. `respond` receives the zero-based
    /// request index and the raw request body.
    pub fn start(respond: impl Fn(usize, &str) -> (u16, String) + Send + Sync + 'static) -> Stub {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub");
        let endpoint = format!("http://{}", listener.local_addr().unwrap());
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let respond: Arc<Responder> = Arc::new(respond);
        let shared = bodies.clone();
        thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                let (bodies, respond) = (shared.clone(), respond.clone());
                thread::spawn(move || {
                    let _ = handle(stream, &bodies, &*respond);
                });
            }
        });
        Stub { endpoint, bodies }
    }

    pub fn bodies(&self) -> Vec<String> {
        self.bodies.lock().unwrap().clone()
    }

    pub fn requests(&self) -> usize {
        self.bodies.lock().unwrap().len()
    }
}

fn handle(
    stream: TcpStream,
    bodies: &Mutex<Vec<String>>,
    respond: &Responder,
) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut len = 0usize;
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        if let Some((k, v)) = l.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body)?;
    let body = String::from_utf8_lossy(&body).into_owned();
    let index = {
        let mut b = bodies.lock().unwrap();
        b.push(body.clone());
        b.len() - 1
    };
    let (status, text) = respond(index, &body);
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        500 => "Internal Server Error",
        503 => "Service Unavailable",
        _ => "Status",
    };
    let mut out = stream;
    write!(
        out,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
        text.len()
    )?;
    out.flush()
}

/// A well-formed completion body carrying `text`.
pub fn completion(text: &str) -> String {
    serde_json::json!({ "model": "stub", "response": text, "done": true }).to_string()
}
