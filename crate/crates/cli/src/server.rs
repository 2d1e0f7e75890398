//! Line-delimited JSON over TCP. One request per line; every request gets
//! exactly one final line, preceded by any progress events it produced.
//! Requests on one connection run in order; connections run concurrently.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::thread;

use serde_json::{json, Map, Value};

use crate::service::{ErrorCode, Service, ServiceError};

pub const DEFAULT_ADDR: &str = "127.0.0.1:7878";

pub struct Server {
    listener: TcpListener,
    service: Arc<Service>,
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, service: Arc<Service>) -> std::io::Result<Self> {
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            service,
        })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accepts connections until the listener fails.
    pub fn run(self) -> std::io::Result<()> {
        for stream in self.listener.incoming() {
            let stream = stream?;
            let service = self.service.clone();
            thread::spawn(move || {
                // A dropped client is not an error of the server.
                let _ = serve_connection(stream, &service);
            });
        }
        Ok(())
    }

    /// Runs [`Server::run`] on a background thread.
    pub fn spawn(self) -> std::io::Result<SocketAddr> {
        let addr = self.local_addr()?;
        thread::spawn(move || self.run());
        Ok(addr)
    }
}

fn serve_connection(stream: TcpStream, service: &Service) -> std::io::Result<()> {
    let reader = BufReader::new(stream.try_clone()?);
    let mut writer = stream;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut write_err = None;
        let reply = {
            // Progress goes out as it happens.
            let mut emit = |event: Value| {
                if write_err.is_none() {
                    write_err = write_line(&mut writer, &event).err();
                }
            };
            handle_line(service, &line, &mut emit)
        };
        if let Some(err) = write_err {
            return Err(err);
        }
        write_line(&mut writer, &reply)?;
    }
    Ok(())
}

fn write_line(w: &mut impl Write, v: &Value) -> std::io::Result<()> {
    let mut text = v.to_string();
    text.push('\n');
    w.write_all(text.as_bytes())?;
    w.flush()
}

/// Runs one protocol line. Events are wrapped as
/// `{"id", "event": "progress", "data"}`; the reply is
/// `{"id", "ok": true, "result"}` or `{"id", "ok": false, "error"}`.
pub fn handle_line(service: &Service, line: &str, emit: &mut dyn FnMut(Value)) -> Value {
    let parsed: Result<Value, _> = serde_json::from_str(line);
    let mut request = match parsed {
        Ok(Value::Object(m)) => m,
        Ok(_) => return error_reply(Value::Null, &ServiceError::new(ErrorCode::BadRequest, "request must be a JSON object")),
        Err(e) => return error_reply(Value::Null, &ServiceError::new(ErrorCode::BadRequest, format!("invalid JSON: {e}"))),
    };
    let id = request.remove("id").unwrap_or(Value::Null);
    let mut wrap = |data: Value| emit(json!({ "id": id.clone(), "event": "progress", "data": data }));
    match service.handle_value(Value::Object(request), &mut wrap) {
        Ok(result) => {
            let mut m = Map::new();
            m.insert("id".into(), id);
            m.insert("ok".into(), Value::Bool(true));
            m.insert("result".into(), result);
            Value::Object(m)
        }
        Err(e) => error_reply(id, &e),
    }
}

fn error_reply(id: Value, e: &ServiceError) -> Value {
    json!({ "id": id, "ok": false, "error": e })
}
