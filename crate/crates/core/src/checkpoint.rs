//! Bit-exact parameter persistence.
//!
//! Byte layout, all integers little-endian:
//! - magic `TAMB`, format version u32, entry count u32
//! - per entry: name length u32, UTF-8 name, dtype u8 (0 = f64, 1 = f32),
//!   rank u32, each dim as u64, then the values.
//!
//! Entries are sorted by name, so serialization is a pure function of the
//! store contents: save, load, save again is byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: [u8; 4] = *b"TAMB";
pub const VERSION: u32 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_F32: u8 = 1;

fn native_dtype() -> u8 {
    if std::mem::size_of::<Scalar>() == 8 {
        DTYPE_F64
    } else {
        DTYPE_F32
    }
}

pub fn to_bytes(store: &ParamStore) -> Result<Vec<u8>> {
    let names: Vec<&str> = store.names().collect();
    let count = u32::try_from(names.len())
        .map_err(|_| Error::Format("checkpoint: too many entries".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for name in names {
        let t = store.get(name).expect("name came from the store");
        let nb = name.as_bytes();
        let nlen = u32::try_from(nb.len())
            .map_err(|_| Error::Format(format!("checkpoint: name `{name}` too long")))?;
        out.extend_from_slice(&nlen.to_le_bytes());
        out.extend_from_slice(nb);
        out.push(native_dtype());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("checkpoint: truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("checkpoint: bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "checkpoint: version {version}, expected {VERSION}"
        )));
    }
    let count = r.u32()?;
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Format("checkpoint: name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = usize::try_from(r.u64()?)
                .map_err(|_| Error::Format("checkpoint: dim overflow".into()))?;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::Format("checkpoint: element count overflow".into()))?;
            shape.push(d);
        }
        let data: Vec<Scalar> = match dtype {
            DTYPE_F64 => r
                .take(numel.checked_mul(8).ok_or_else(|| {
                    Error::Format("checkpoint: payload overflow".into())
                })?)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Scalar)
                .collect(),
            DTYPE_F32 => r
                .take(numel.checked_mul(4).ok_or_else(|| {
                    Error::Format("checkpoint: payload overflow".into())
                })?)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Scalar)
                .collect(),
            d => return Err(Error::Format(format!("checkpoint: unknown dtype {d}"))),
        };
        let t = Tensor::from_vec(shape, data)?;
        if entries.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("checkpoint: duplicate entry `{name}`")));
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Format("checkpoint: trailing bytes".into()));
    }
    Ok(entries)
}

/// Writes to a sibling temp file first and renames into place, so a crash
/// mid-save never leaves a torn checkpoint at `path`.
pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let bytes = to_bytes(store)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("checkpoint path {path:?} has no file name")))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint into a store whose parameters already exist (run
/// `ensure_init` first). The name sets must match exactly and shapes must
/// agree; anything else is a config/format error, not a silent skip.
pub fn load(store: &mut ParamStore, path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let entries = from_bytes(&bytes)?;
    let have: Vec<String> = store.names().map(String::from).collect();
    let got: Vec<&String> = entries.keys().collect();
    if have.len() != got.len() || have.iter().zip(&got).any(|(a, b)| &a != b) {
        let missing: Vec<&String> = have.iter().filter(|n| !entries.contains_key(*n)).collect();
        let extra: Vec<&&String> = got.iter().filter(|n| !have.contains(**n)).collect();
        return Err(Error::Format(format!(
            "checkpoint does not match the model: missing {missing:?}, unexpected {extra:?}"
        )));
    }
    for (name, t) in entries {
        store.set(&name, t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{ensure_init, model_infer, ModelConfig};
    use crate::params::{Init, ParamStore};
    use crate::tape::PadMode;

    fn tiny_store() -> ParamStore {
        let mut s = ParamStore::new(11);
        s.get_or_init("b.w", &[2, 3], Init::Uniform { bound: 0.5 })
            .unwrap();
        s.get_or_init("a.v", &[4], Init::Uniform { bound: 1.0 })
            .unwrap();
        s
    }

    fn tmp_path(tag: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("tamb-{}-{}.ckpt", tag, std::process::id()))
    }

    #[test]
    fn byte_round_trip_preserves_bits() {
        let s = tiny_store();
        let bytes = to_bytes(&s).unwrap();
        let entries = from_bytes(&bytes).unwrap();
        assert_eq!(entries.len(), 2);
        for name in ["a.v", "b.w"] {
            let orig = s.get(name).unwrap();
            let back = &entries[name];
            assert_eq!(orig.shape, back.shape);
            let ob: Vec<u64> = orig.data.iter().map(|v| v.to_bits() as u64).collect();
            let bb: Vec<u64> = back.data.iter().map(|v| v.to_bits() as u64).collect();
            assert_eq!(ob, bb);
        }
    }

    #[test]
    fn header_fields_match_layout() {
        let s = tiny_store();
        let bytes = to_bytes(&s).unwrap();
        assert_eq!(&bytes[0..4], b"TAMB");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        // First entry is "a.v" (sorted): name len 3.
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(&bytes[16..19], b"a.v");
    }

    #[test]
    fn every_truncation_is_rejected() {
        let s = tiny_store();
        let bytes = to_bytes(&s).unwrap();
        for cut in 0..bytes.len() {
            assert!(from_bytes(&bytes[..cut]).is_err(), "prefix {cut} accepted");
        }
        assert!(from_bytes(&bytes).is_ok());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let s = tiny_store();
        let mut bytes = to_bytes(&s).unwrap();
        bytes[0] = b'X';
        assert!(from_bytes(&bytes).is_err());
        let mut bytes = to_bytes(&s).unwrap();
        bytes[4] = 9;
        assert!(matches!(from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn f32_payload_loads_into_native_store() {
        // Hand-built single-entry buffer with dtype 1.
        let mut buf = Vec::new();
        buf.extend_from_slice(b"TAMB");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(b"w");
        buf.push(1);
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&2u64.to_le_bytes());
        buf.extend_from_slice(&0.5f32.to_le_bytes());
        buf.extend_from_slice(&(-1.25f32).to_le_bytes());
        let entries = from_bytes(&buf).unwrap();
        assert_eq!(entries["w"].shape, vec![2]);
        assert_eq!(entries["w"].data, vec![0.5, -1.25]);
    }

    #[test]
    fn non_finite_payload_is_rejected() {
        let s = tiny_store();
        let bytes = to_bytes(&s).unwrap();
        // Corrupt the first value of the first entry into a NaN.
        let val_off = 12 + 4 + 3 + 1 + 4 + 8;
        let vs = std::mem::size_of::<Scalar>();
        let mut bad = bytes.clone();
        bad[val_off..val_off + vs].copy_from_slice(&Scalar::NAN.to_le_bytes());
        assert!(from_bytes(&bad).is_err());
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let cfg = ModelConfig {
            n_groups: 1,
            depth: 1,
            d_model: 2,
            n_state: 2,
            patch_extent: 2,
            top_p: 0.5,
            scale: 2,
            pad_mode: PadMode::Reflect,
            ca_reduction: 2,
            max_grid: 2,
            ln_eps: 1e-6,
        };
        let mut a = ParamStore::new(21);
        ensure_init(&mut a, &cfg).unwrap();
        let p1 = tmp_path("roundtrip1");
        let p2 = tmp_path("roundtrip2");
        save(&a, &p1).unwrap();

        let mut b = ParamStore::new(99);
        ensure_init(&mut b, &cfg).unwrap();
        load(&mut b, &p1).unwrap();
        save(&b, &p2).unwrap();
        let b1 = fs::read(&p1).unwrap();
        let b2 = fs::read(&p2).unwrap();
        assert_eq!(b1, b2);

        // The reloaded store reproduces the original forward bitwise.
        let img = Tensor::full(vec![3, 4, 4], 0.3);
        let ya = model_infer(&mut a, &cfg, &img).unwrap();
        let yb = model_infer(&mut b, &cfg, &img).unwrap();
        assert_eq!(ya.data, yb.data);

        fs::remove_file(&p1).ok();
        fs::remove_file(&p2).ok();
    }

    #[test]
    fn load_rejects_name_set_mismatch() {
        let s = tiny_store();
        let p = tmp_path("mismatch");
        save(&s, &p).unwrap();
        let mut other = ParamStore::new(3);
        other
            .get_or_init("b.w", &[2, 3], Init::Zeros)
            .unwrap();
        let err = load(&mut other, &p).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        fs::remove_file(&p).ok();
    }
}
