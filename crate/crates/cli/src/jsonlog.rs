//! JSON-lines log sink behind the `log` facade.

use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use log::{Level, LevelFilter, Log, Metadata, Record};
use serde_json::{json, Value};

struct JsonLogger {
    file: Option<Mutex<File>>,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

impl JsonLogger {
    fn write(&self, line: &Value) {
        if let Some(f) = &self.file {
            let mut f = f.lock().unwrap_or_else(|p| p.into_inner());
            let _ = writeln!(f, "{line}");
            let _ = f.flush();
        }
    }
}

impl Log for JsonLogger {
    fn enabled(&self, m: &Metadata) -> bool {
        self.file.is_some() || m.level() <= Level::Warn
    }

    fn log(&self, r: &Record) {
        if !self.enabled(r.metadata()) {
            return;
        }
        if self.file.is_none() {
            eprintln!("{}: {}", r.level().as_str().to_lowercase(), r.args());
            return;
        }
        if r.target() == EVENT_TARGET {
            if let Ok(v) = serde_json::from_str::<Value>(&r.args().to_string()) {
                self.write(&v);
                return;
            }
        }
        self.write(&json!({
            "ts_ms": now_ms(),
            "level": r.level().as_str().to_lowercase(),
            "target": r.target(),
            "msg": r.args().to_string(),
        }));
    }

    fn flush(&self) {}
}

const EVENT_TARGET: &str = "duplex::event";

/// Routes `log` records to `path` as JSON lines; without a path only
/// warnings and errors reach stderr.
pub fn init(path: Option<&Path>) -> std::io::Result<()> {
    let file = match path {
        Some(p) => Some(Mutex::new(File::create(p)?)),
        None => None,
    };
    let level = if file.is_some() { LevelFilter::Info } else { LevelFilter::Warn };
    if log::set_logger(Box::leak(Box::new(JsonLogger { file }))).is_ok() {
        log::set_max_level(level);
    }
    Ok(())
}

/// One structured line: `{"ts_ms", "event", ...fields}`.
pub fn event(name: &str, fields: Value) {
    let mut v = json!({ "ts_ms": now_ms(), "event": name });
    if let (Value::Object(dst), Value::Object(src)) = (&mut v, fields) {
        dst.extend(src);
    }
    log::info!(target: EVENT_TARGET, "{v}");
}
