//! A tiny HTTP server answering POSTs from a closure, for backend tests.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

pub type Handler = dyn Fn(usize, &str, &serde_json::Value) -> (u16, String) + Send + Sync;

pub struct Stub {
    pub url: String,
    hits: Arc<AtomicUsize>,
    auth: Arc<Mutex<Vec<String>>>,
}

impl Stub {
    /// The handler gets the zero-based hit number, the path and the JSON body.
    pub fn start(handler: impl Fn(usize, &str, &serde_json::Value) -> (u16, String) + Send + Sync + 'static) -> Stub {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let handler: Arc<Handler> = Arc::new(handler);
        let auth = Arc::new(Mutex::new(Vec::new()));
        let (h, a) = (hits.clone(), auth.clone());
        thread::spawn(move || {
            for conn in listener.incoming() {
                let Ok(conn) = conn else { continue };
                let (h, a, handler) = (h.clone(), a.clone(), handler.clone());
                thread::spawn(move || {
                    let _ = serve(conn, &h, &a, handler.as_ref());
                });
            }
        });
        Stub { url, hits, auth }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    /// `Authorization` header values seen so far.
    pub fn auth(&self) -> Vec<String> {
        self.auth.lock().unwrap().clone()
    }
}

fn serve(conn: TcpStream, hits: &AtomicUsize, auth: &Mutex<Vec<String>>, handler: &Handler) -> std::io::Result<()> {
    let mut reader = BufReader::new(conn.try_clone()?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let path = line.split_whitespace().nth(1).unwrap_or("/").to_string();
    let mut len = 0usize;
    loop {
        let mut h = String::new();
        if reader.read_line(&mut h)? == 0 {
            break;
        }
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().unwrap_or(0);
            } else if k.eq_ignore_ascii_case("authorization") {
                auth.lock().unwrap().push(v.trim().to_string());
            }
        }
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body)?;
    let json: serde_json::Value = serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null);
    let n = hits.fetch_add(1, Ordering::SeqCst);
    let (status, text) = handler(n, &path, &json);
    let mut w = &conn;
    write!(
        w,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
        text.len()
    )?;
    w.flush()
}
