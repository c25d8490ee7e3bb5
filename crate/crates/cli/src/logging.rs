//! Logger that writes to stderr and, once a run directory exists, to its
//! `logs.txt`.

use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, OnceLock};

use log::{Level, LevelFilter, Log, Metadata, Record};

struct TeeLogger {
    file: Mutex<Option<File>>,
}

static LOGGER: OnceLock<TeeLogger> = OnceLock::new();

fn logger() -> &'static TeeLogger {
    LOGGER.get_or_init(|| TeeLogger { file: Mutex::new(None) })
}

impl Log for TeeLogger {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= Level::Info
    }

    fn log(&self, record: &Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let line = format!("[{}] {}", record.level(), record.args());
        eprintln!("{line}");
        if let Some(f) = self.file.lock().expect("log lock").as_mut() {
            let _ = writeln!(f, "{line}");
        }
    }

    fn flush(&self) {
        if let Some(f) = self.file.lock().expect("log lock").as_mut() {
            let _ = f.flush();
        }
    }
}

/// Installs the logger once per process; later calls are no-ops.
pub fn init() {
    if log::set_logger(logger()).is_ok() {
        log::set_max_level(LevelFilter::Info);
    }
}

/// Redirects the file half of the log to `path`.
pub fn set_log_file(path: &Path) -> std::io::Result<()> {
    let f = File::create(path)?;
    *logger().file.lock().expect("log lock") = Some(f);
    Ok(())
}

pub fn close_log_file() {
    log::logger().flush();
    *logger().file.lock().expect("log lock") = None;
}
