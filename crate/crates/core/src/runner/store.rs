//! Append-only JSON Lines files for trials and results.
//!
//! A process killed mid-write can leave a partial last line. Loading drops
//! such a tail (with a warning) and truncates the file back to the last
//! complete record; a malformed line anywhere else is an error.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: corrupt record: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads every record, repairing a torn final line.
pub fn load<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;

    let mut records = Vec::new();
    let mut offset = 0usize;
    let mut good_end = 0usize;
    let mut line_no = 0usize;
    while offset < bytes.len() {
        line_no += 1;
        let (line, next, terminated) = match bytes[offset..].iter().position(|b| *b == b'\n') {
            Some(nl) => (&bytes[offset..offset + nl], offset + nl + 1, true),
            None => (&bytes[offset..], bytes.len(), false),
        };
        let is_last = next >= bytes.len();
        if line.iter().all(u8::is_ascii_whitespace) {
            offset = next;
            good_end = next;
            continue;
        }
        match serde_json::from_slice::<T>(line) {
            Ok(record) if terminated || !is_last => {
                records.push(record);
                good_end = next;
            }
            parsed => {
                if !is_last {
                    let message = parsed.err().map_or_else(|| "unterminated".into(), |e| e.to_string());
                    return Err(StoreError::Corrupt {
                        path: path.to_path_buf(),
                        line: line_no,
                        message,
                    });
                }
                tracing::warn!(path = %path.display(), line = line_no, "dropping torn trailing record");
                let file = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
                file.set_len(good_end as u64).map_err(io_err(path))?;
                file.sync_all().map_err(io_err(path))?;
                break;
            }
        }
        offset = next;
    }
    Ok(records)
}

/// Appending writer; each record is flushed as one complete line.
pub struct JsonlWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        Ok(JsonlWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<(), StoreError> {
        let mut line = serde_json::to_vec(record).expect("records serialize");
        line.push(b'\n');
        self.out.write_all(&line).map_err(io_err(&self.path))?;
        self.out.flush().map_err(io_err(&self.path))
    }

    pub fn sync(&mut self) -> Result<(), StoreError> {
        self.out.flush().map_err(io_err(&self.path))?;
        self.out.get_ref().sync_data().map_err(io_err(&self.path))
    }
}

/// Rewrites a file atomically via a temporary sibling.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Rec {
        n: u32,
    }

    #[test]
    fn append_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        let mut w = JsonlWriter::open(&p).unwrap();
        for n in 0..3 {
            w.append(&Rec { n }).unwrap();
        }
        w.sync().unwrap();
        assert_eq!(load::<Rec>(&p).unwrap(), vec![Rec { n: 0 }, Rec { n: 1 }, Rec { n: 2 }]);
        assert!(load::<Rec>(&dir.path().join("missing.jsonl")).unwrap().is_empty());
    }

    #[test]
    fn torn_tail_is_dropped_and_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        std::fs::write(&p, "{\"n\":1}\n{\"n\":2}\n{\"n\":").unwrap();
        assert_eq!(load::<Rec>(&p).unwrap(), vec![Rec { n: 1 }, Rec { n: 2 }]);
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "{\"n\":1}\n{\"n\":2}\n");
        let mut w = JsonlWriter::open(&p).unwrap();
        w.append(&Rec { n: 3 }).unwrap();
        assert_eq!(load::<Rec>(&p).unwrap().len(), 3);
    }

    #[test]
    fn unterminated_but_valid_tail_is_also_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        std::fs::write(&p, "{\"n\":1}\n{\"n\":2}").unwrap();
        assert_eq!(load::<Rec>(&p).unwrap(), vec![Rec { n: 1 }]);
    }

    #[test]
    fn corruption_in_the_middle_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        std::fs::write(&p, "{\"n\":1}\ngarbage\n{\"n\":2}\n").unwrap();
        assert!(matches!(load::<Rec>(&p), Err(StoreError::Corrupt { line: 2, .. })));
    }
}
