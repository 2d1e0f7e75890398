mod common;

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;

use serde_json::{json, Value};

use outview_cli::server::Server;
use outview_cli::service::{Request, Service};

struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    fn connect(addr: SocketAddr) -> Self {
        let stream = TcpStream::connect(addr).unwrap();
        Self {
            reader: BufReader::new(stream.try_clone().unwrap()),
            writer: stream,
        }
    }

    fn send_raw(&mut self, line: &str) {
        self.writer.write_all(line.as_bytes()).unwrap();
        self.writer.write_all(b"\n").unwrap();
    }

    fn read(&mut self) -> Value {
        let mut line = String::new();
        self.reader.read_line(&mut line).unwrap();
        serde_json::from_str(&line).unwrap()
    }

    /// Sends `request` and returns (progress events, final reply).
    fn call(&mut self, request: Value) -> (Vec<Value>, Value) {
        self.send_raw(&request.to_string());
        let mut events = Vec::new();
        loop {
            let v = self.read();
            if v.get("ok").is_some() {
                return (events, v);
            }
            events.push(v);
        }
    }
}

fn start(dir: &std::path::Path) -> SocketAddr {
    let service = Arc::new(Service::new(dir, 4, Some(common::generator())).unwrap());
    Server::bind("127.0.0.1:0", service).unwrap().spawn().unwrap()
}

fn protocol_doc() -> Value {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/protocol.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn scripted_steering_sees_needs_support_then_frames() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = Client::connect(start(dir.path()));
    let (_, created) = c.call(json!({ "id": "c", "op": "create_session", "fixture": 1, "config": { "samples": 2 } }));
    assert_eq!(created["id"], "c");
    let session = created["result"]["session"].as_str().unwrap().to_string();

    let mut last_revision = 0;
    let mut needs_support = Vec::new();
    for k in 1..=4 {
        let (_, r) = c.call(json!({ "id": k, "op": "look", "session": session, "yaw": 10 * k }));
        assert_eq!(r["id"], k);
        if r["ok"] == true {
            let rev = r["result"]["revision"].as_u64().unwrap();
            assert!(rev > last_revision);
            last_revision = rev;
        } else {
            assert_eq!(r["error"]["code"], "needs_support");
            needs_support.push(r["error"]["nearest_direction"].as_str().unwrap().to_string());
        }
    }
    assert!(!needs_support.is_empty());
    assert!(needs_support.iter().all(|d| d == "right"), "{needs_support:?}");

    let (events, pano) = c.call(json!({ "id": "p", "op": "panorama", "session": session }));
    assert_eq!(pano["ok"], true);
    assert_eq!(events.len(), 8);
    for (i, e) in events.iter().enumerate() {
        assert_eq!(e["id"], "p");
        assert_eq!(e["event"], "progress");
        assert_eq!(e["data"]["completed"], i + 1);
        assert_eq!(e["data"]["total"], 8);
    }
    for k in 1..=4 {
        let (_, r) = c.call(json!({ "op": "look", "session": session, "yaw": 10 * k }));
        assert_eq!(r["ok"], true, "{r}");
        assert_eq!(r["id"], Value::Null);
        let rev = r["result"]["revision"].as_u64().unwrap();
        assert!(rev > last_revision);
        last_revision = rev;
    }
    let (_, stats) = c.call(json!({ "op": "stats", "session": session }));
    assert_eq!(stats["result"]["frames"].as_u64().unwrap(), last_revision);
}

#[test]
fn malformed_lines_get_error_replies() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = Client::connect(start(dir.path()));
    c.send_raw("{not json");
    let r = c.read();
    assert_eq!(r["ok"], false);
    assert_eq!(r["error"]["code"], "bad_request");
    c.send_raw("[1, 2]");
    assert_eq!(c.read()["error"]["code"], "bad_request");
    c.send_raw("");
    let (_, r) = c.call(json!({ "id": 9, "op": "look", "session": "s123456" }));
    assert_eq!(r["id"], 9);
    assert_eq!(r["error"]["code"], "no_session");
    assert!(r["error"].get("nearest_direction").is_none());
}

#[test]
fn other_sessions_proceed_during_a_panorama() {
    let dir = tempfile::tempdir().unwrap();
    let addr = start(dir.path());
    let mut a = Client::connect(addr);
    let mut b = Client::connect(addr);
    let (_, ra) = a.call(json!({ "op": "create_session", "fixture": 3, "config": { "samples": 8 } }));
    let (_, rb) = b.call(json!({ "op": "create_session", "fixture": 4 }));
    let sa = ra["result"]["session"].as_str().unwrap().to_string();
    let sb = rb["result"]["session"].as_str().unwrap().to_string();

    a.send_raw(&json!({ "op": "panorama", "session": sa }).to_string());
    let first = a.read();
    assert_eq!(first["event"], "progress");
    let done = Arc::new(AtomicBool::new(false));
    let flag = done.clone();
    let reader = thread::spawn(move || {
        let mut n = 1;
        loop {
            let v = a.read();
            if v.get("ok").is_some() {
                flag.store(true, Ordering::SeqCst);
                return (n, v);
            }
            n += 1;
        }
    });
    let (_, look) = b.call(json!({ "op": "look", "session": sb }));
    assert_eq!(look["ok"], true);
    assert!(!done.load(Ordering::SeqCst), "look waited for another session's panorama");
    let (events, reply) = reader.join().unwrap();
    assert_eq!(events, 8);
    assert_eq!(reply["ok"], true);
}

#[test]
fn documented_examples_parse_and_cover_every_operation() {
    let doc = protocol_doc();
    let ops = doc["operations"].as_object().unwrap();
    let mut documented = BTreeSet::new();
    for (name, op) in ops {
        let mut example = op["example"].clone();
        assert_eq!(example["op"], name.as_str());
        example.as_object_mut().unwrap().remove("id");
        serde_json::from_value::<Request>(example.clone()).unwrap_or_else(|e| panic!("{name}: {e}"));
        documented.insert(name.clone());
    }
    let expected: BTreeSet<String> = [
        "create_session",
        "look",
        "panorama",
        "support",
        "set_strategy",
        "save",
        "load",
        "stats",
        "close_session",
        "list_sessions",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    assert_eq!(documented, expected);
    let codes: BTreeSet<&str> = doc["error_codes"].as_object().unwrap().keys().map(|s| s.as_str()).collect();
    for code in ["no_session", "needs_support", "no_generator", "bad_request", "internal"] {
        assert!(codes.contains(code), "{code}");
    }
}

#[test]
fn documented_result_fields_match_replies() {
    let doc = protocol_doc();
    let dir = tempfile::tempdir().unwrap();
    let mut c = Client::connect(start(dir.path()));
    let keys = |v: &Value| -> BTreeSet<String> { v.as_object().unwrap().keys().cloned().collect() };

    let (_, created) = c.call(json!({ "op": "create_session", "fixture": 0 }));
    assert_eq!(keys(&created["result"]), keys(&doc["types"]["session_info"]));
    let session = created["result"]["session"].clone();
    let (_, look) = c.call(json!({ "op": "look", "session": session }));
    assert_eq!(keys(&look["result"]), keys(&doc["operations"]["look"]["result"]));
    assert_eq!(
        keys(&look["result"]["coverage"]),
        keys(&doc["operations"]["look"]["result"]["coverage"])
    );
    let (_, stats) = c.call(json!({ "op": "stats", "session": session }));
    assert_eq!(keys(&stats["result"]), keys(&doc["operations"]["stats"]["result"]));
    let (_, saved) = c.call(json!({ "op": "save", "session": session }));
    assert_eq!(keys(&saved["result"]), keys(&doc["operations"]["save"]["result"]));
    let (_, list) = c.call(json!({ "op": "list_sessions" }));
    assert_eq!(list["result"]["sessions"], json!([session]));
    let (_, closed) = c.call(json!({ "op": "close_session", "session": session }));
    assert_eq!(keys(&closed["result"]), keys(&doc["operations"]["close_session"]["result"]));
}
