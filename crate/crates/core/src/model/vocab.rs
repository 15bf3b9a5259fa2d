//! Byte-level vocabulary: 256 bytes, three control ids, sixteen sentinels.

use crate::objectives::{sentinel, sentinel_index, NUM_SENTINELS};

pub const PAD: usize = 256;
pub const BOS: usize = 257;
pub const EOS: usize = 258;
pub const SENTINEL_0: usize = 259;
pub const VOCAB_SIZE: usize = SENTINEL_0 + NUM_SENTINELS;
pub const SPACE: usize = b' ' as usize;

/// UTF-8 bytes, with sentinel characters mapped to their reserved ids.
pub fn encode_text(s: &str) -> Vec<usize> {
    let mut out = Vec::with_capacity(s.len());
    let mut buf = [0u8; 4];
    for c in s.chars() {
        match sentinel_index(c) {
            Some(i) => out.push(SENTINEL_0 + i),
            None => out.extend(c.encode_utf8(&mut buf).bytes().map(usize::from)),
        }
    }
    out
}

/// Inverse of [`encode_text`]; stops at `EOS`, skips `PAD`/`BOS`, repairs invalid UTF-8 lossily.
pub fn decode_ids(ids: &[usize]) -> String {
    let mut out = String::new();
    let mut bytes = Vec::new();
    let flush = |bytes: &mut Vec<u8>, out: &mut String| {
        out.push_str(&String::from_utf8_lossy(bytes));
        bytes.clear();
    };
    for &id in ids {
        match id {
            EOS => break,
            0..=255 => bytes.push(id as u8),
            id if (SENTINEL_0..VOCAB_SIZE).contains(&id) => {
                flush(&mut bytes, &mut out);
                out.push(sentinel(id - SENTINEL_0));
            }
            _ => {}
        }
    }
    flush(&mut bytes, &mut out);
    out
}
