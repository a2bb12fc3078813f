//! Append-only journal of the node's own votes.
//!
//! `votes.log`, one record per line: `<40 hex info_hash>,<+1|-1>,<unix seconds>`.
//! Loading keeps the first record per info-hash; duplicates and malformed
//! lines are reported as warnings and skipped.

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::id::InfoHash;
use crate::vote_store::Polarity;

pub const JOURNAL_FILE: &str = "votes.log";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalVote {
    pub info_hash: InfoHash,
    pub polarity: Polarity,
    pub created_at: u64,
}

impl LocalVote {
    pub fn to_record(&self) -> String {
        let sign = match self.polarity {
            Polarity::Positive => "+1",
            Polarity::Negative => "-1",
        };
        format!("{},{},{}\n", self.info_hash.to_hex(), sign, self.created_at)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JournalWarning {
    Malformed { line: usize, reason: &'static str },
    Duplicate { line: usize, info_hash: InfoHash },
}

impl fmt::Display for JournalWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            JournalWarning::Malformed { line, reason } => {
                write!(f, "{JOURNAL_FILE}:{line}: skipped malformed record ({reason})")
            }
            JournalWarning::Duplicate { line, info_hash } => {
                write!(f, "{JOURNAL_FILE}:{line}: skipped duplicate vote for {info_hash}")
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("journal {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct JournalContents {
    pub votes: Vec<LocalVote>,
    pub warnings: Vec<JournalWarning>,
}

fn parse_record(line: &str) -> Result<LocalVote, &'static str> {
    let mut parts = line.split(',');
    let (Some(hash), Some(sign), Some(ts), None) = (parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return Err("expected three comma-separated fields");
    };
    if hash.len() != 40 {
        return Err("info-hash must be 40 hex characters");
    }
    let info_hash: InfoHash = hash.parse().map_err(|_| "info-hash is not hex")?;
    let polarity = match sign {
        "+1" => Polarity::Positive,
        "-1" => Polarity::Negative,
        _ => return Err("polarity must be +1 or -1"),
    };
    if ts.is_empty() || !ts.bytes().all(|b| b.is_ascii_digit()) {
        return Err("timestamp must be unsigned decimal seconds");
    }
    let created_at = ts.parse().map_err(|_| "timestamp out of range")?;
    Ok(LocalVote {
        info_hash,
        polarity,
        created_at,
    })
}

pub fn parse_journal(text: &str) -> JournalContents {
    let mut out = JournalContents::default();
    for (i, line) in text.split('\n').enumerate() {
        let line_no = i + 1;
        if line.is_empty() {
            continue;
        }
        match parse_record(line) {
            Ok(vote) => {
                if out.votes.iter().any(|v| v.info_hash == vote.info_hash) {
                    out.warnings.push(JournalWarning::Duplicate {
                        line: line_no,
                        info_hash: vote.info_hash,
                    });
                } else {
                    out.votes.push(vote);
                }
            }
            Err(reason) => out.warnings.push(JournalWarning::Malformed {
                line: line_no,
                reason,
            }),
        }
    }
    out
}

#[derive(Debug, Clone)]
enum Backend {
    File(PathBuf),
    Memory(Arc<Mutex<Vec<u8>>>),
}

/// Journal handle. The in-memory backend shares its buffer between clones,
/// so a simulated node can be dropped and rebuilt from the same journal.
#[derive(Debug, Clone)]
pub struct Journal {
    backend: Backend,
}

impl Journal {
    /// Journal at `<dir>/votes.log`; creates `dir` if needed.
    pub fn open_dir(dir: &Path) -> Result<Journal, JournalError> {
        fs::create_dir_all(dir).map_err(|source| JournalError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        Ok(Journal {
            backend: Backend::File(dir.join(JOURNAL_FILE)),
        })
    }

    pub fn in_memory() -> Journal {
        Journal {
            backend: Backend::Memory(Arc::default()),
        }
    }

    pub fn path(&self) -> Option<&Path> {
        match &self.backend {
            Backend::File(p) => Some(p),
            Backend::Memory(_) => None,
        }
    }

    pub fn append(&self, vote: &LocalVote) -> Result<(), JournalError> {
        let record = vote.to_record();
        match &self.backend {
            Backend::File(path) => {
                let io_err = |source| JournalError::Io {
                    path: path.display().to_string(),
                    source,
                };
                let mut f = OpenOptions::new()
                    .read(true)
                    .append(true)
                    .create(true)
                    .open(path)
                    .map_err(io_err)?;
                // A torn final line from a crash must not swallow this record.
                let len = f.metadata().map_err(io_err)?.len();
                let mut prefix = "";
                if len > 0 {
                    let mut last = [0u8; 1];
                    f.seek(SeekFrom::Start(len - 1)).map_err(io_err)?;
                    f.read_exact(&mut last).map_err(io_err)?;
                    if last[0] != b'\n' {
                        prefix = "\n";
                    }
                }
                f.write_all(format!("{prefix}{record}").as_bytes()).map_err(io_err)?;
                f.sync_data().map_err(io_err)?;
            }
            Backend::Memory(buf) => {
                buf.lock().expect("journal buffer poisoned").extend_from_slice(record.as_bytes());
            }
        }
        Ok(())
    }

    pub fn load(&self) -> Result<JournalContents, JournalError> {
        let text = match &self.backend {
            Backend::File(path) => match fs::read(path) {
                Ok(bytes) => String::from_utf8_lossy(&bytes).into_owned(),
                Err(e) if e.kind() == io::ErrorKind::NotFound => String::new(),
                Err(source) => {
                    return Err(JournalError::Io {
                        path: path.display().to_string(),
                        source,
                    })
                }
            },
            Backend::Memory(buf) => {
                String::from_utf8_lossy(&buf.lock().expect("journal buffer poisoned")).into_owned()
            }
        };
        Ok(parse_journal(&text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vote(b: u8, polarity: Polarity, at: u64) -> LocalVote {
        LocalVote {
            info_hash: InfoHash([b; 20]),
            polarity,
            created_at: at,
        }
    }

    #[test]
    fn record_format_is_exact() {
        let v = vote(0xab, Polarity::Negative, 1_700_000_000);
        assert_eq!(
            v.to_record(),
            "abababababababababababababababababababab,-1,1700000000\n"
        );
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let j = Journal::open_dir(dir.path()).unwrap();
        assert_eq!(j.load().unwrap(), JournalContents::default());
        let votes = vec![vote(1, Polarity::Positive, 10), vote(2, Polarity::Negative, 20)];
        for v in &votes {
            j.append(v).unwrap();
        }
        let loaded = j.load().unwrap();
        assert_eq!(loaded.votes, votes);
        assert!(loaded.warnings.is_empty());
        assert_eq!(
            fs::read_to_string(dir.path().join(JOURNAL_FILE)).unwrap().lines().count(),
            2
        );
    }

    #[test]
    fn first_duplicate_wins_and_bad_lines_are_skipped() {
        let text = "\
0101010101010101010101010101010101010101,+1,5
0101010101010101010101010101010101010101,-1,6
010101010101010101010101010101010101010,+1,7
0202020202020202020202020202020202020202,+2,8
0303030303030303030303030303030303030303,-1,9
";
        let c = parse_journal(text);
        assert_eq!(
            c.votes,
            vec![vote(1, Polarity::Positive, 5), vote(3, Polarity::Negative, 9)]
        );
        assert_eq!(c.warnings.len(), 3);
        assert!(matches!(c.warnings[0], JournalWarning::Duplicate { line: 2, .. }));
        assert!(matches!(c.warnings[1], JournalWarning::Malformed { line: 3, .. }));
        assert!(matches!(c.warnings[2], JournalWarning::Malformed { line: 4, .. }));
    }

    #[test]
    fn torn_tail_does_not_corrupt_next_append() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(JOURNAL_FILE), "0101010101").unwrap();
        let j = Journal::open_dir(dir.path()).unwrap();
        j.append(&vote(4, Polarity::Positive, 1)).unwrap();
        let c = j.load().unwrap();
        assert_eq!(c.votes, vec![vote(4, Polarity::Positive, 1)]);
        assert_eq!(c.warnings.len(), 1);
    }

    #[test]
    fn memory_journal_is_shared_between_clones() {
        let j = Journal::in_memory();
        let k = j.clone();
        j.append(&vote(5, Polarity::Positive, 3)).unwrap();
        assert_eq!(k.load().unwrap().votes, vec![vote(5, Polarity::Positive, 3)]);
    }
}
