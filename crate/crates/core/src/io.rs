//! Shared file plumbing: atomic writes, JSONL streams and little-endian
//! framing with a trailing CRC32.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{NpdError, Result};

pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_sibling(path);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        NpdError::io(path, e)
    })
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| NpdError::io(path, e))
}

pub fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)
            .map_err(|e| NpdError::Format(format!("serializing {}: {e}", path.display())))?;
        buf.push(b'\n');
    }
    atomic_write(path, &buf)
}

/// Reads one JSON object per line. A final line without a trailing newline
/// is rejected as truncated even if it happens to parse.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| NpdError::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut line = String::new();
    let mut lineno = 0;
    loop {
        line.clear();
        let n = reader
            .read_line(&mut line)
            .map_err(|e| NpdError::io(path, e))?;
        if n == 0 {
            break;
        }
        lineno += 1;
        let parse_err = |message: String| NpdError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        if !line.ends_with('\n') {
            return Err(parse_err("truncated line (missing newline)".into()));
        }
        let trimmed = line.trim_end();
        if trimmed.is_empty() {
            return Err(parse_err("empty line".into()));
        }
        let item = serde_json::from_str(trimmed).map_err(|e| parse_err(e.to_string()))?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut buf = serde_json::to_vec_pretty(value)
        .map_err(|e| NpdError::Format(format!("serializing {}: {e}", path.display())))?;
    buf.push(b'\n');
    atomic_write(path, &buf)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| NpdError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Little-endian byte sink used by the binary formats.
#[derive(Default)]
pub(crate) struct LeWriter {
    pub buf: Vec<u8>,
}

impl LeWriter {
    pub fn with_magic(magic: &[u8; 8]) -> Self {
        let mut w = LeWriter::default();
        w.buf.extend_from_slice(magic);
        w
    }
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    /// Appends the CRC32 of everything written so far and returns the bytes.
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32(&self.buf);
        self.u32(crc);
        self.buf
    }
}

/// Cursor over a CRC-framed little-endian buffer.
pub(crate) struct LeReader<'a> {
    body: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> LeReader<'a> {
    /// Checks magic and trailing CRC, returning a reader positioned after the magic.
    pub fn open(bytes: &'a [u8], magic: &[u8; 8], what: &'static str) -> Result<Self> {
        if bytes.len() < magic.len() + 4 {
            return Err(NpdError::Format(format!("{what}: file too short")));
        }
        if &bytes[..8] != magic {
            return Err(NpdError::Format(format!("{what}: bad magic")));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let actual = crc32(body);
        if stored != actual {
            return Err(NpdError::Format(format!(
                "{what}: CRC mismatch (stored {stored:08x}, computed {actual:08x})"
            )));
        }
        Ok(LeReader {
            body,
            pos: 8,
            what,
        })
    }

    pub fn stored_crc(bytes: &[u8]) -> u32 {
        u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap())
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.body.len() {
            return Err(NpdError::Format(format!("{}: unexpected end of data", self.what)));
        }
        let s = &self.body[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn expect_end(&self) -> Result<()> {
        if self.pos != self.body.len() {
            return Err(NpdError::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.body.len() - self.pos
            )));
        }
        Ok(())
    }
    /// Bytes still unread, used to bound allocations from untrusted headers.
    pub fn remaining(&self) -> usize {
        self.body.len() - self.pos
    }
}
