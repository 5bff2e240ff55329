use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::Serialize;
use thiserror::Error;

use crate::model::{parse_reading, serialize_reading, NormalizedReading};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("reading log is full ({limit} bytes)")]
    StorageFull { limit: u64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A log line that did not parse back into a reading.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CorruptLine {
    /// 1-based.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct QueryResult {
    pub readings: Vec<NormalizedReading>,
    pub corrupt_lines: Vec<CorruptLine>,
}

enum Backend {
    File { path: PathBuf, file: File },
    Memory(Vec<u8>),
}

struct Inner {
    backend: Backend,
    size: u64,
    count: u64,
}

/// Append-only reading log: one canonical reading JSON object per line.
pub struct ReadingStore {
    inner: Mutex<Inner>,
    max_bytes: Option<u64>,
}

impl ReadingStore {
    /// Opens (creating if needed) a log file; existing lines are kept.
    pub fn open(path: impl AsRef<Path>, max_bytes: Option<u64>) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).read(true).open(&path)?;
        let size = file.metadata()?.len();
        Ok(Self { inner: Mutex::new(Inner { backend: Backend::File { path, file }, size, count: 0 }), max_bytes })
    }

    pub fn in_memory(max_bytes: Option<u64>) -> Self {
        Self { inner: Mutex::new(Inner { backend: Backend::Memory(Vec::new()), size: 0, count: 0 }), max_bytes }
    }

    pub fn path(&self) -> Option<PathBuf> {
        match &self.inner.lock().unwrap().backend {
            Backend::File { path, .. } => Some(path.clone()),
            Backend::Memory(_) => None,
        }
    }

    /// Readings appended through this handle.
    pub fn appended(&self) -> u64 {
        self.inner.lock().unwrap().count
    }

    pub fn append(&self, r: &NormalizedReading) -> Result<(), StoreError> {
        let mut line = serialize_reading(r);
        line.push(b'\n');
        let mut inner = self.inner.lock().unwrap();
        if let Some(limit) = self.max_bytes {
            if inner.size + line.len() as u64 > limit {
                return Err(StoreError::StorageFull { limit });
            }
        }
        match &mut inner.backend {
            Backend::File { file, .. } => {
                file.write_all(&line)?;
                file.flush()?;
            }
            Backend::Memory(buf) => buf.extend_from_slice(&line),
        }
        inner.size += line.len() as u64;
        inner.count += 1;
        Ok(())
    }

    /// Readings with `date >= since` (and matching ids when given), in
    /// append order. Unparseable lines are skipped and reported.
    pub fn query(&self, since: Option<DateTime<Utc>>, node_id: Option<&str>, sensor_id: Option<&str>) -> Result<QueryResult, StoreError> {
        let inner = self.inner.lock().unwrap();
        let mut out = QueryResult::default();
        let mut visit = |idx: usize, line: &[u8]| {
            if line.iter().all(u8::is_ascii_whitespace) {
                return;
            }
            match parse_reading(line) {
                Ok(r) => {
                    if since.is_none_or(|s| r.date() >= s)
                        && node_id.is_none_or(|n| r.node_id() == n)
                        && sensor_id.is_none_or(|s| r.sensor_id() == s)
                    {
                        out.readings.push(r);
                    }
                }
                Err(e) => out.corrupt_lines.push(CorruptLine { line: idx + 1, reason: e.to_string() }),
            }
        };
        match &inner.backend {
            Backend::File { path, .. } => {
                let reader = BufReader::new(File::open(path)?);
                for (idx, line) in reader.split(b'\n').enumerate() {
                    visit(idx, &line?);
                }
            }
            Backend::Memory(buf) => {
                for (idx, line) in buf.split(|b| *b == b'\n').enumerate() {
                    visit(idx, line);
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GatewayIdentity, GpsCoordinate, Magnitude, ProtocolId};
    use chrono::TimeZone;

    fn reading(sensor: &str, sec: u32, value: f64) -> NormalizedReading {
        NormalizedReading::new(
            "n1",
            GpsCoordinate::new(4.7, -74.03).unwrap(),
            ProtocolId::Wifi,
            Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, sec).unwrap(),
            sensor,
            value,
            if sensor == "temp" { Magnitude::Celsius } else { Magnitude::PercentRh },
            &GatewayIdentity::new("gw1", "net1").unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn append_then_query_filters_in_order() {
        let store = ReadingStore::in_memory(None);
        store.append(&reading("temp", 0, 20.0)).unwrap();
        store.append(&reading("hum", 0, 60.0)).unwrap();
        store.append(&reading("temp", 6, 21.0)).unwrap();

        let all = store.query(None, None, None).unwrap();
        assert_eq!(all.readings.len(), 3);
        let temp = store.query(None, Some("n1"), Some("temp")).unwrap();
        assert_eq!(temp.readings.iter().map(|r| r.value()).collect::<Vec<_>>(), [20.0, 21.0]);
        let since = store.query(Some(reading("temp", 6, 0.0).date()), None, None).unwrap();
        assert_eq!(since.readings, vec![reading("temp", 6, 21.0)]);
        assert!(store.query(None, Some("n2"), None).unwrap().readings.is_empty());
    }

    #[test]
    fn truncated_line_is_reported_and_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log/readings.jsonl");
        let store = ReadingStore::open(&path, None).unwrap();
        store.append(&reading("temp", 0, 20.0)).unwrap();
        {
            let mut f = OpenOptions::new().append(true).open(&path).unwrap();
            f.write_all(b"{\"node-id\":\"n1\",\"gps\":\n").unwrap();
        }
        store.append(&reading("temp", 6, 21.0)).unwrap();

        let q = store.query(None, None, None).unwrap();
        assert_eq!(q.readings.len(), 2);
        assert_eq!(q.corrupt_lines.len(), 1);
        assert_eq!(q.corrupt_lines[0].line, 2);

        // reopening keeps history
        drop(store);
        let again = ReadingStore::open(&path, None).unwrap();
        assert_eq!(again.query(None, None, None).unwrap().readings.len(), 2);
    }

    #[test]
    fn size_limit_is_enforced() {
        let one = serialize_reading(&reading("temp", 0, 20.0)).len() as u64 + 1;
        let store = ReadingStore::in_memory(Some(one + one / 2));
        store.append(&reading("temp", 0, 20.0)).unwrap();
        assert!(matches!(store.append(&reading("temp", 6, 20.0)), Err(StoreError::StorageFull { .. })));
        assert_eq!(store.appended(), 1);
    }
}
