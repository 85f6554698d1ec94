//! Minimal stderr logger gated by the `SDPS_LOG` env var
//! (`error`, `warn`, `info`, `debug`; default `warn`).

use std::sync::OnceLock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Level {
    Error,
    Warn,
    Info,
    Debug,
}

fn threshold() -> Level {
    static LEVEL: OnceLock<Level> = OnceLock::new();
    *LEVEL.get_or_init(|| match std::env::var("SDPS_LOG").as_deref() {
        Ok("error") => Level::Error,
        Ok("info") => Level::Info,
        Ok("debug") => Level::Debug,
        _ => Level::Warn,
    })
}

pub fn log(level: Level, who: &str, text: &str) {
    if level <= threshold() {
        let tag = match level {
            Level::Error => "ERROR",
            Level::Warn => "WARN",
            Level::Info => "INFO",
            Level::Debug => "DEBUG",
        };
        eprintln!("[{tag} {who}] {text}");
    }
}

pub fn error(who: &str, text: &str) {
    log(Level::Error, who, text);
}

pub fn warn(who: &str, text: &str) {
    log(Level::Warn, who, text);
}

pub fn info(who: &str, text: &str) {
    log(Level::Info, who, text);
}

pub fn debug(who: &str, text: &str) {
    log(Level::Debug, who, text);
}
