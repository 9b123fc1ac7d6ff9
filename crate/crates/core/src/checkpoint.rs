//! Bit-exact named-tensor checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "CSTNCKPT"
//! version  u32
//! count    u64
//! entries  count x { name_len u32, name utf-8, rank u32, extents u64 x rank, values f32 x prod }
//! digest   u64      FNV-1a 64 over every preceding byte
//! ```
//!
//! Entries are sorted by name, so saving is a pure function of the values.

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"CSTNCKPT";
pub const FORMAT_VERSION: u32 = 1;
/// Parameter-name prefix of every fusion-module tensor.
pub const FUSION_PREFIX: &str = "fusion.";

#[derive(Clone, Copy, Debug)]
pub struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

impl Fnv1a {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    pub fn new() -> Self {
        Self(Self::OFFSET)
    }

    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(Self::PRIME);
        }
    }

    pub fn finish(self) -> u64 {
        self.0
    }

    pub fn hash(bytes: &[u8]) -> u64 {
        let mut h = Self::new();
        h.update(bytes);
        h.finish()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn new(mut entries: Vec<Entry>) -> Result<Self> {
        entries.sort_by(|a, b| a.name.cmp(&b.name));
        if let Some(w) = entries.windows(2).find(|w| w[0].name == w[1].name) {
            return Err(Error::Checkpoint(format!("duplicate entry {}", w[0].name)));
        }
        for e in &entries {
            if e.shape.is_empty() || e.shape.iter().product::<usize>() != e.data.len() {
                return Err(Error::Checkpoint(format!("entry {} has inconsistent shape {:?}", e.name, e.shape)));
            }
        }
        Ok(Self {
            version: FORMAT_VERSION,
            entries,
        })
    }

    /// Snapshot of every tensor in a store, including buffers.
    pub fn from_store<T: Scalar>(store: &ParamStore<T>) -> Self {
        let entries = store
            .iter()
            .map(|(name, e)| Entry {
                name: name.to_string(),
                shape: e.value.shape().to_vec(),
                data: e.value.data().iter().map(|v| v.f64() as f32).collect(),
            })
            .collect();
        Self::new(entries).expect("parameter store names are unique")
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries
            .binary_search_by(|e| e.name.as_str().cmp(name))
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn has_fusion(&self) -> bool {
        self.names().any(|n| n.starts_with(FUSION_PREFIX))
    }

    /// Keeps entries whose name satisfies `keep`.
    pub fn filter(&self, keep: impl Fn(&str) -> bool) -> Self {
        Self {
            version: self.version,
            entries: self.entries.iter().filter(|e| keep(&e.name)).cloned().collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Fnv1a::hash(&out);
        out.extend_from_slice(&digest.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 4 + 8 + 8 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic or truncated header"));
        }
        let (payload, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        let actual = Fnv1a::hash(payload);
        if stored != actual {
            return Err(Error::Checkpoint(format!(
                "digest mismatch: stored {stored:016x}, computed {actual:016x}"
            )));
        }
        let mut r = Reader { buf: payload, pos: 8 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let count = r.u64()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| bad("entry name is not utf-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| bad("entry too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push(Entry { name, shape, data });
        }
        if r.pos != payload.len() {
            return Err(bad("trailing bytes after last entry"));
        }
        let ck = Self::new(entries)?;
        if ck.to_bytes() != bytes {
            return Err(bad("entries are not in canonical order"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Copies entries into `store`. In strict mode the name sets and shapes
    /// must agree exactly; otherwise unknown entries are skipped.
    pub fn apply_to<T: Scalar>(&self, store: &mut ParamStore<T>, strict: bool) -> Result<()> {
        let mut missing = Vec::new();
        let mut unexpected = Vec::new();
        let mut mismatched = Vec::new();
        for name in store.names() {
            if self.get(name).is_none() {
                missing.push(name.to_string());
            }
        }
        for e in &self.entries {
            match store.entry(&e.name) {
                None => unexpected.push(e.name.clone()),
                Some(p) if p.value.shape() != e.shape.as_slice() => mismatched.push(e.name.clone()),
                Some(_) => {}
            }
        }
        if strict && !(missing.is_empty() && unexpected.is_empty() && mismatched.is_empty()) {
            return Err(Error::StrictLoad {
                missing,
                unexpected,
                mismatched,
            });
        }
        if !mismatched.is_empty() {
            return Err(Error::StrictLoad {
                missing: vec![],
                unexpected: vec![],
                mismatched,
            });
        }
        for e in &self.entries {
            if store.contains(&e.name) {
                let t = Tensor::new(e.shape.clone(), e.data.iter().map(|&v| T::of(v as f64)).collect())?;
                store.set(&e.name, t)?;
            }
        }
        Ok(())
    }

    /// Total stored values, buffers included.
    pub fn numel(&self) -> u64 {
        self.entries.iter().map(|e| e.data.len() as u64).sum()
    }
}

/// Drops every fusion-module entry, leaving a checkpoint that loads strictly
/// into the small variant. The flag reports whether the input was already
/// fusion-free (the transfer is then a no-op).
pub fn transfer_to_small(full: &Checkpoint) -> (Checkpoint, bool) {
    let already_small = !full.has_fusion();
    (full.filter(|n| !n.starts_with(FUSION_PREFIX)), already_small)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated entry".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        Checkpoint::new(vec![
            Entry {
                name: "b.weight".into(),
                shape: vec![2, 2],
                data: vec![1.0, -2.0, 3.5, 0.0],
            },
            Entry {
                name: "a.bias".into(),
                shape: vec![3],
                data: vec![0.25, f32::MIN_POSITIVE, -0.0],
            },
            Entry {
                name: "fusion.layer2.x".into(),
                shape: vec![1],
                data: vec![9.0],
            },
        ])
        .unwrap()
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(Fnv1a::hash(b""), 0xcbf29ce484222325);
        assert_eq!(Fnv1a::hash(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(Fnv1a::hash(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn entries_are_sorted_and_round_trip() {
        let ck = sample();
        assert_eq!(ck.names().collect::<Vec<_>>(), ["a.bias", "b.weight", "fusion.layer2.x"]);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupted_byte_is_a_digest_error() {
        let mut bytes = sample().to_bytes();
        let i = bytes.len() - 12;
        bytes[i] ^= 0x40;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("digest mismatch"), "{err}");
    }

    #[test]
    fn transfer_is_a_prefix_filter_and_idempotent() {
        let ck = sample();
        let (small, was_small) = transfer_to_small(&ck);
        assert!(!was_small);
        assert_eq!(small.len(), ck.len() - 1);
        let (again, was_small) = transfer_to_small(&small);
        assert!(was_small);
        assert_eq!(again, small);
    }

    proptest! {
        #[test]
        fn arbitrary_entries_round_trip(vals in proptest::collection::vec(any::<f32>(), 1..40), split in 1usize..4) {
            let n = vals.len();
            let rows = if n % split == 0 { split } else { 1 };
            let ck = Checkpoint::new(vec![Entry { name: "t".into(), shape: vec![rows, n / rows], data: vals }]).unwrap();
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
