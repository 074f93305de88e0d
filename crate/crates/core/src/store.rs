//! Keyed embedding store and its binary file layout.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "APTE" | u32 version = 1 | u32 dim | u32 count
//! count × ( u16 key_len | key bytes (UTF-8) | dim × f32 )
//! ```
//!
//! Key conventions: `prompt:<category>`, `img:<image_id>:<element_index>`,
//! `ocr:<normalized text>`, and the empty key `""` for the empty word.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"APTE";
pub const VERSION: u32 = 1;
pub const EMPTY_WORD_KEY: &str = "";

/// NFC-normalized, whitespace-trimmed text used for OCR keys.
pub fn normalize_text(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    String::from(nfc.trim())
}

pub fn prompt_key(category: &str) -> String {
    format!("prompt:{category}")
}

pub fn image_key(image_id: &str, element_index: usize) -> String {
    format!("img:{image_id}:{element_index}")
}

/// Key of an OCR description; empty text maps to the empty-word key.
pub fn ocr_key(text: &str) -> String {
    let norm = normalize_text(text);
    if norm.is_empty() {
        String::from(EMPTY_WORD_KEY)
    } else {
        format!("ocr:{norm}")
    }
}

/// How several linked OCR phrases become one text embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DescriptionMode {
    /// Look up the space-joined description as one key.
    #[default]
    Concat,
    /// Average the per-phrase embeddings.
    Average,
}

impl DescriptionMode {
    pub fn name(self) -> &'static str {
        match self {
            DescriptionMode::Concat => "concat",
            DescriptionMode::Average => "average",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [Self::Concat, Self::Average].into_iter().find(|m| m.name() == s)
    }
}

/// Insertion-ordered map from keys to `dim`-length `f32` vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    keys: Vec<String>,
    values: Vec<Vec<f32>>,
    index: BTreeMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("embedding dim must be positive".into()));
        }
        Ok(Self { dim, keys: Vec::new(), values: Vec::new(), index: BTreeMap::new() })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn insert(&mut self, key: impl Into<String>, value: Vec<f32>) -> Result<()> {
        let key = key.into();
        if value.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: value.len() });
        }
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(key));
        }
        if key.len() > u16::MAX as usize {
            return Err(Error::KeyTooLong(key.len()));
        }
        if self.index.contains_key(&key) {
            return Err(Error::DuplicateKey(key));
        }
        self.index.insert(key.clone(), self.keys.len());
        self.keys.push(key);
        self.values.push(value);
        Ok(())
    }

    /// Converts an `f64` vector to the stored `f32` precision and inserts it.
    pub fn insert_f64(&mut self, key: impl Into<String>, value: &[f64]) -> Result<()> {
        self.insert(key, value.iter().map(|&v| v as f32).collect())
    }

    pub fn get(&self, key: &str) -> Option<&[f32]> {
        self.index.get(key).map(|&i| self.values[i].as_slice())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.index.contains_key(key)
    }

    /// Looks up `key` widened to `f64`, naming the key when absent.
    pub fn vector(&self, key: &str) -> Result<Vec<f64>> {
        self.get(key)
            .map(|v| v.iter().map(|&x| f64::from(x)).collect())
            .ok_or_else(|| Error::MissingKey(String::from(key)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.keys.iter().map(String::as_str).zip(self.values.iter().map(Vec::as_slice))
    }

    pub fn has_empty_word(&self) -> bool {
        self.contains(EMPTY_WORD_KEY)
    }

    /// Serialized size in bytes.
    pub fn encoded_len(&self) -> usize {
        16 + self.keys.iter().map(|k| 2 + k.len() + 4 * self.dim).sum::<usize>()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.keys.len() as u32).to_le_bytes());
        for (k, v) in self.keys.iter().zip(&self.values) {
            out.extend_from_slice(&(k.len() as u16).to_le_bytes());
            out.extend_from_slice(k.as_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut store = EmbeddingStore::new(dim)?;
        for _ in 0..count {
            let klen = r.u16()? as usize;
            let key = core::str::from_utf8(r.take(klen)?).map_err(|_| Error::InvalidUtf8)?;
            let raw = r.take(4 * dim)?;
            let value =
                raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            store.insert(key, value)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(store)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(Error::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Text embedding for an element's linked OCR phrases.
///
/// `Concat` joins the phrases with single spaces and looks up that text;
/// `Average` takes the component-wise mean of the phrase embeddings. No
/// phrases (or only blank ones) resolve to the empty-word vector.
pub fn resolve_description_embedding<S: AsRef<str>>(
    store: &EmbeddingStore,
    phrases: &[S],
    mode: DescriptionMode,
) -> Result<Vec<f64>> {
    let phrases: Vec<String> = phrases
        .iter()
        .map(|p| normalize_text(p.as_ref()))
        .filter(|p| !p.is_empty())
        .collect();
    if phrases.is_empty() {
        return store.vector(EMPTY_WORD_KEY);
    }
    match mode {
        DescriptionMode::Concat => store.vector(&ocr_key(&phrases.join(" "))),
        DescriptionMode::Average => {
            let mut acc = vec![0.0; store.dim()];
            for p in &phrases {
                for (a, v) in acc.iter_mut().zip(store.vector(&ocr_key(p))?) {
                    *a += v;
                }
            }
            let n = phrases.len() as f64;
            acc.iter_mut().for_each(|a| *a /= n);
            Ok(acc)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_key_store() -> EmbeddingStore {
        let mut s = EmbeddingStore::new(4).unwrap();
        s.insert("", vec![0.0; 4]).unwrap();
        s.insert("prompt:icon", vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE]).unwrap();
        s
    }

    #[test]
    fn encoded_size_matches_layout() {
        let s = two_key_store();
        // header 16 + ("" : 2 + 0 + 16) + ("prompt:icon" : 2 + 11 + 16)
        assert_eq!(s.encode().len(), 16 + 18 + 29);
        assert_eq!(s.encoded_len(), s.encode().len());
    }

    #[test]
    fn header_bytes_are_exact() {
        let bytes = two_key_store().encode();
        assert_eq!(&bytes[..16], b"APTE\x01\x00\x00\x00\x04\x00\x00\x00\x02\x00\x00\x00");
        assert_eq!(&bytes[16..18], &[0, 0]);
    }

    #[test]
    fn decode_errors() {
        let good = two_key_store().encode();
        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert_eq!(EmbeddingStore::decode(&bad), Err(Error::BadMagic));
        let mut v2 = good.clone();
        v2[4] = 2;
        assert_eq!(EmbeddingStore::decode(&v2), Err(Error::UnsupportedVersion(2)));
        assert_eq!(EmbeddingStore::decode(&good[..good.len() - 1]), Err(Error::Truncated));
        assert_eq!(EmbeddingStore::decode(&good[..10]), Err(Error::Truncated));
        let mut extra = good.clone();
        extra.push(0);
        assert_eq!(EmbeddingStore::decode(&extra), Err(Error::TrailingBytes(1)));
        let mut nan = good.clone();
        let at = good.len() - 4;
        nan[at..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(EmbeddingStore::decode(&nan), Err(Error::NonFiniteValue(_))));
    }

    #[test]
    fn duplicate_keys_are_rejected_on_decode() {
        let mut s = EmbeddingStore::new(1).unwrap();
        s.insert("a", vec![1.0]).unwrap();
        s.insert("b", vec![2.0]).unwrap();
        let mut bytes = s.encode();
        let pos = bytes.iter().rposition(|&c| c == b'b').unwrap();
        bytes[pos] = b'a';
        assert_eq!(EmbeddingStore::decode(&bytes), Err(Error::DuplicateKey("a".into())));
    }

    #[test]
    fn insert_validates() {
        let mut s = EmbeddingStore::new(2).unwrap();
        assert!(matches!(s.insert("k", vec![1.0]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(s.insert("k", vec![1.0, f32::INFINITY]), Err(Error::NonFiniteValue(_))));
        s.insert("k", vec![1.0, 2.0]).unwrap();
        assert_eq!(s.insert("k", vec![1.0, 2.0]), Err(Error::DuplicateKey("k".into())));
    }

    #[test]
    fn key_normalization() {
        // "e" + combining acute composes to U+00E9 under NFC.
        assert_eq!(ocr_key("  caf\u{0065}\u{0301} "), ocr_key("café"));
        assert_eq!(ocr_key("   "), "");
        assert_eq!(image_key("s1", 3), "img:s1:3");
        assert_eq!(prompt_key("icon"), "prompt:icon");
    }

    #[test]
    fn resolve_descriptions() {
        let mut s = EmbeddingStore::new(2).unwrap();
        s.insert("", vec![0.25, -0.5]).unwrap();
        s.insert("ocr:a", vec![1.0, 0.0]).unwrap();
        s.insert("ocr:b", vec![0.0, 1.0]).unwrap();
        s.insert("ocr:a b", vec![3.0, 3.0]).unwrap();
        let none: [&str; 0] = [];
        assert_eq!(resolve_description_embedding(&s, &none, DescriptionMode::Concat).unwrap(), [0.25, -0.5]);
        assert_eq!(resolve_description_embedding(&s, &[""], DescriptionMode::Average).unwrap(), [0.25, -0.5]);
        assert_eq!(resolve_description_embedding(&s, &["a", "b"], DescriptionMode::Concat).unwrap(), [3.0, 3.0]);
        assert_eq!(resolve_description_embedding(&s, &["a", "b"], DescriptionMode::Average).unwrap(), [0.5, 0.5]);
        assert_eq!(resolve_description_embedding(&s, &["a", "a"], DescriptionMode::Average).unwrap(), [1.0, 0.0]);
        assert_eq!(
            resolve_description_embedding(&s, &["zz"], DescriptionMode::Concat),
            Err(Error::MissingKey("ocr:zz".into()))
        );
    }
}
