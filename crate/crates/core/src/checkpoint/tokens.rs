//! Pre-tokenized evaluation data.
//!
//! Token streams come either as JSON lines (`{"ids":[...]}` per line,
//! concatenated in file order) or as a binary file: the 8-byte magic
//! `TOKSTRM1`, a little-endian `u64` count, then that many little-endian
//! `u32` ids.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::write_atomic;
use crate::error::{Error, Result};

pub const TOKEN_MAGIC: &[u8; 8] = b"TOKSTRM1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    pub ids: Vec<u32>,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenFormat {
    Jsonl,
    Binary,
}

#[derive(Deserialize)]
struct IdsRecord {
    ids: Vec<u32>,
}

fn check(ids: &[u32], offset: usize, vocab: usize) -> Result<()> {
    match ids.iter().position(|&id| id as usize >= vocab) {
        Some(i) => Err(Error::TokenOutOfRange {
            position: offset + i,
            id: ids[i],
            vocab,
        }),
        None => Ok(()),
    }
}

/// Parses a stream from bytes and validates every id against `vocab`.
pub fn parse_token_stream(bytes: &[u8], vocab: usize) -> Result<TokenStream> {
    let ids = if bytes.starts_with(TOKEN_MAGIC) {
        if bytes.len() < 16 {
            return Err(Error::Input(
                "binary token stream shorter than its 16-byte header".into(),
            ));
        }
        let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() != count.saturating_mul(4) {
            return Err(Error::Input(format!(
                "binary token stream declares {count} ids but carries {} bytes",
                body.len()
            )));
        }
        body.chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    } else {
        let text = std::str::from_utf8(bytes).map_err(|e| Error::Input(format!("token stream is not UTF-8: {e}")))?;
        let mut ids = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: IdsRecord = serde_json::from_str(line)
                .map_err(|e| Error::Input(format!("line {}: expected {{\"ids\": [...]}}: {e}", lineno + 1)))?;
            ids.extend(rec.ids);
        }
        ids
    };
    check(&ids, 0, vocab)?;
    Ok(TokenStream { ids })
}

pub fn load_token_stream(path: impl AsRef<Path>, vocab: usize) -> Result<TokenStream> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_token_stream(&bytes, vocab)
}

pub fn write_token_stream(path: impl AsRef<Path>, ids: &[u32], format: TokenFormat) -> Result<()> {
    let bytes = match format {
        TokenFormat::Binary => {
            let mut out = Vec::with_capacity(16 + 4 * ids.len());
            out.extend_from_slice(TOKEN_MAGIC);
            out.extend_from_slice(&(ids.len() as u64).to_le_bytes());
            for id in ids {
                out.extend_from_slice(&id.to_le_bytes());
            }
            out
        }
        TokenFormat::Jsonl => {
            let mut s = serde_json::to_string(&serde_json::json!({ "ids": ids }))?;
            s.push('\n');
            s.into_bytes()
        }
    };
    write_atomic(path.as_ref(), &bytes)
}

/// One multiple-choice item: a context, candidate continuations and the
/// index of the correct one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McItem {
    pub context: Vec<u32>,
    pub options: Vec<Vec<u32>>,
    pub gold: usize,
}

/// Reads JSON-lines multiple-choice items, validating ids against `vocab`.
pub fn load_mc_items(path: impl AsRef<Path>, vocab: usize) -> Result<Vec<McItem>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut items = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: McItem =
            serde_json::from_str(line).map_err(|e| Error::Input(format!("item line {}: {e}", lineno + 1)))?;
        if item.gold >= item.options.len() {
            return Err(Error::Input(format!(
                "item line {}: gold {} but only {} options",
                lineno + 1,
                item.gold,
                item.options.len()
            )));
        }
        check(&item.context, 0, vocab)?;
        for o in &item.options {
            check(o, item.context.len(), vocab)?;
        }
        items.push(item);
    }
    Ok(items)
}
