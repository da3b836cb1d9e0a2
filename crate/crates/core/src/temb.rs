//! TEMB: little-endian binary container for an [`EmbeddingStore`].
//!
//! ```text
//! magic    "TEMB"
//! u32      version (= 1)
//! u64      n items
//! u32      p tokens per item
//! u32      d dims
//! u32      dtype (1 = f32)
//! n ×      (u32 byte length, UTF-8 id bytes)
//! n·p·d    f32 values, row-major, grouped by item
//! ```
//!
//! No padding anywhere; trailing bytes after the payload are rejected.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tokens::{EmbeddingStore, TokenMatrix};

pub const MAGIC: &[u8; 4] = b"TEMB";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 1;

/// Serializes a store to its TEMB byte form.
pub fn encode(store: &EmbeddingStore) -> Vec<u8> {
    let (n, p, d) = (store.len(), store.tokens(), store.dim());
    let id_bytes: usize = store.ids().iter().map(|id| 4 + id.len()).sum();
    let mut buf = Vec::with_capacity(28 + id_bytes + n * p * d * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf.extend_from_slice(&(p as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    buf.extend_from_slice(&DTYPE_F32.to_le_bytes());
    for id in store.ids() {
        buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
    }
    for m in store.matrices() {
        for v in m.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| {
                Error::format(
                    self.path,
                    format!("truncated while reading {what} at byte {}", self.pos),
                )
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

/// Parses TEMB bytes. `path` is only used for error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<EmbeddingStore> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(path, "bad magic, expected \"TEMB\""));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let n = r.u64("item count")?;
    let p = r.u32("token count")? as usize;
    let d = r.u32("dimension")? as usize;
    let dtype = r.u32("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(Error::format(path, format!("unsupported dtype code {dtype}")));
    }
    if n == 0 || p == 0 || d == 0 {
        return Err(Error::format(path, format!("empty shape n={n} p={p} d={d}")));
    }
    // Every id needs at least its 4-byte length prefix.
    let n = usize::try_from(n)
        .ok()
        .filter(|&n| n <= bytes.len() / 4)
        .ok_or_else(|| Error::format(path, format!("item count {n} exceeds file size")))?;

    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let len = r.u32("id length")? as usize;
        let raw = r.take(len, "id bytes")?;
        let id = std::str::from_utf8(raw).map_err(|_| Error::format(path, format!("id {i} is not valid UTF-8")))?;
        ids.push(id.to_owned());
    }

    let per_item = p.checked_mul(d).ok_or_else(|| Error::format(path, "shape overflow"))?;
    let mut matrices = Vec::with_capacity(n);
    for i in 0..n {
        let raw = r
            .take(per_item * 4, "payload")
            .map_err(|_| Error::format(path, format!("payload truncated at item {i} of {n}")))?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let m = match TokenMatrix::from_flat_normalized(p, d, values.clone()) {
            Ok(m) => m,
            Err(_) => {
                TokenMatrix::from_flat(p, d, values).map_err(|e| Error::format(path, format!("item {i}: {e}")))?
            }
        };
        matrices.push(m);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after payload", bytes.len() - r.pos),
        ));
    }
    EmbeddingStore::new(ids, matrices).map_err(|e| Error::format(path, e.to_string()))
}

/// Reads a TEMB file. Matrices whose rows are all unit norm come back
/// flagged as normalized.
pub fn load_embedding_store(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn save_embedding_store(store: &EmbeddingStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::{synth_embeddings, SynthSpec};
    use proptest::prelude::*;

    fn sample() -> EmbeddingStore {
        synth_embeddings(&SynthSpec::uniform(3, 2, 4, 5)).unwrap()
    }

    #[test]
    fn round_trip_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.temb");
        let store = sample();
        save_embedding_store(&store, &path).unwrap();
        assert_eq!(load_embedding_store(&path).unwrap(), store);
    }

    #[test]
    fn saves_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        save_embedding_store(&sample(), &a).unwrap();
        save_embedding_store(&sample(), &b).unwrap();
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample());
        assert_eq!(&bytes[..4], b"TEMB");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(bytes[24..28].try_into().unwrap()), 1);
        let ids: usize = 3 * (4 + "item_000000".len());
        assert_eq!(bytes.len(), 28 + ids + 3 * 2 * 4 * 4);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = encode(&sample());
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&bytes, Path::new("x")), Err(Error::Format { .. })));
    }

    #[test]
    fn bad_version_and_dtype() {
        let mut bytes = encode(&sample());
        bytes[4] = 2;
        assert!(matches!(decode(&bytes, Path::new("x")), Err(Error::Format { .. })));
        let mut bytes = encode(&sample());
        bytes[24] = 2;
        assert!(matches!(decode(&bytes, Path::new("x")), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_payload_is_format_error() {
        let store = synth_embeddings(&SynthSpec::uniform(2, 2, 3, 1)).unwrap();
        let bytes = encode(&store);
        // Drop the second item's payload.
        let cut = bytes.len() - 2 * 3 * 4;
        let err = decode(&bytes[..cut], Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode(&sample());
        bytes.push(0);
        assert!(matches!(decode(&bytes, Path::new("x")), Err(Error::Format { .. })));
    }

    #[test]
    fn huge_count_does_not_allocate() {
        let mut bytes = encode(&sample());
        bytes[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(decode(&bytes, Path::new("x")), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_embedding_store("/nonexistent/dir/file.temb").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn unwritable_location_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        // A path whose parent is a regular file cannot be created.
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"").unwrap();
        let err = save_embedding_store(&sample(), blocker.join("out.temb")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    proptest! {
        #[test]
        fn arbitrary_stores_round_trip(
            n in 1usize..5,
            p in 1usize..4,
            d in 1usize..5,
            values in proptest::collection::vec(-4.0f32..4.0, 80),
            names in proptest::collection::vec("[a-zé日]{1,6}", 5),
        ) {
            let mut ids: Vec<String> = names.into_iter().enumerate().map(|(i, s)| format!("{s}{i}")).collect();
            ids.truncate(n);
            let matrices: Vec<_> = (0..n)
                .map(|i| {
                    let start = (i * p * d) % (values.len() - p * d);
                    TokenMatrix::from_flat(p, d, values[start..start + p * d].to_vec()).unwrap()
                })
                .collect();
            let store = EmbeddingStore::new(ids, matrices).unwrap();
            let back = decode(&encode(&store), Path::new("mem")).unwrap();
            prop_assert_eq!(back.ids(), store.ids());
            for (a, b) in back.matrices().iter().zip(store.matrices()) {
                let bits = |m: &TokenMatrix<f32>| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(a), bits(b));
            }
        }
    }
}
