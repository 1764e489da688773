//! Process-global recording of file reads.
//!
//! Every read in this crate funnels through [`read_bytes`], so a test can
//! capture exactly which files an operation opened. Used to assert the
//! source-free contract: adaptation must read zero source-domain files.
//!
//! Captures are process-global; do not nest or run them concurrently.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

static RECORDER: Mutex<Option<Vec<PathBuf>>> = Mutex::new(None);

fn record(path: &Path) {
    let mut guard = RECORDER.lock().unwrap_or_else(|e| e.into_inner());
    if let Some(log) = guard.as_mut() {
        log.push(path.to_path_buf());
    }
}

/// Read a whole file, recording the access when a capture is active.
pub fn read_bytes(path: &Path) -> std::io::Result<Vec<u8>> {
    record(path);
    std::fs::read(path)
}

/// List a directory, recording the access when a capture is active.
pub fn read_dir_sorted(path: &Path) -> std::io::Result<Vec<PathBuf>> {
    record(path);
    let mut entries: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    Ok(entries)
}

/// Run `f` while recording reads; returns its result and every path read.
pub fn capture<T>(f: impl FnOnce() -> T) -> (T, Vec<PathBuf>) {
    {
        let mut guard = RECORDER.lock().unwrap_or_else(|e| e.into_inner());
        *guard = Some(Vec::new());
    }
    let out = f();
    let paths = {
        let mut guard = RECORDER.lock().unwrap_or_else(|e| e.into_inner());
        guard.take().unwrap_or_default()
    };
    (out, paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capture_records_reads() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("probe.txt");
        std::fs::write(&file, b"x").unwrap();

        let (res, paths) = capture(|| read_bytes(&file));
        assert_eq!(res.unwrap(), b"x");
        assert_eq!(paths, vec![file.clone()]);

        // Outside a capture nothing is recorded.
        let (_, paths) = capture(|| ());
        assert!(paths.is_empty());
    }
}
