use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::seqset::RawSubject;
use crate::error::{NestError, Result};

/// Reads a JSON-lines dataset, one subject per line.
pub fn read_dataset(path: &Path) -> Result<Vec<RawSubject>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let subject: RawSubject = serde_json::from_str(&line)
            .map_err(|e| NestError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(subject);
    }
    Ok(out)
}

fn write_lines<W: Write>(w: &mut W, subjects: &[RawSubject]) -> Result<()> {
    for s in subjects {
        serde_json::to_writer(&mut *w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_dataset(path: &Path, subjects: &[RawSubject]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_lines(&mut w, subjects)?;
    w.flush()?;
    Ok(())
}

/// Content hash of the JSON-lines form of `subjects`; equals [`file_hash`]
/// of the file [`write_dataset`] produces.
pub fn dataset_hash(subjects: &[RawSubject]) -> Result<String> {
    let mut bytes = Vec::new();
    write_lines(&mut bytes, subjects)?;
    Ok(content_hash(&bytes))
}

/// Content hash in the style of a git blob id, over SHA-256.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(content_hash(&std::fs::read(path)?))
}

/// Uniform value in `[0, 1)` derived from a salted hash of `key`.
pub(crate) fn hash_unit(salt: &str, key: &str) -> f64 {
    let digest = Sha256::digest(format!("{salt}:{key}").as_bytes());
    let x = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    (x >> 11) as f64 / (1u64 << 53) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Deterministic 80/10/10 subject-level split.
pub fn split_of(subject_id: &str) -> Split {
    let u = hash_unit("split", subject_id);
    if u < 0.8 {
        Split::Train
    } else if u < 0.9 {
        Split::Valid
    } else {
        Split::Test
    }
}
