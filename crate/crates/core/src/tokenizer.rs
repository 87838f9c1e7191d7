//! Byte-level tokenizer. Every byte maps to `byte + N_SPECIAL`; the ids
//! below `N_SPECIAL` are reserved and never produced for ordinary text.

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const SUMMARY: u32 = 2;
pub const N_SPECIAL: u32 = 3;
pub const VOCAB_SIZE: usize = 256 + N_SPECIAL as usize;

pub fn tokenize(text: &str) -> Vec<u32> {
    encode_bytes(text.as_bytes())
}

pub fn encode_bytes(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32 + N_SPECIAL).collect()
}

/// Bytes of the non-special ids; specials are dropped.
pub fn decode_bytes(ids: &[u32]) -> Vec<u8> {
    ids.iter()
        .filter(|&&id| (N_SPECIAL..N_SPECIAL + 256).contains(&id))
        .map(|&id| (id - N_SPECIAL) as u8)
        .collect()
}

/// Lossy only where generated ids do not form valid UTF-8.
pub fn detokenize(ids: &[u32]) -> String {
    String::from_utf8_lossy(&decode_bytes(ids)).into_owned()
}
