//! Binary parameter snapshots: `TAMC`, a version, a manifest of
//! `(name, dtype, kind, shape)` entries, then little-endian payloads in
//! manifest order.

use std::fs;
use std::path::Path;

use crate::error::{Result, TamError};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"TAMC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: DType,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
}

pub fn to_bytes<F: Real>(store: &ParamStore<F>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, e) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(F::DTYPE.tag());
        out.push(e.kind.tag());
        out.extend_from_slice(&(e.value.rank() as u32).to_le_bytes());
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for (_, e) in store.iter() {
        for &v in e.value.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| TamError::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses a snapshot into its manifest and a store of dtype `F`.
pub fn from_bytes<F: Real>(bytes: &[u8]) -> Result<(Vec<ManifestEntry>, ParamStore<F>)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(TamError::Format("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(TamError::Format(format!("checkpoint version {version}, expected {VERSION}")));
    }
    let count = c.u32()? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|e| TamError::Format(e.to_string()))?;
        let dtype = DType::from_tag(c.u8()?).ok_or_else(|| TamError::Format(format!("`{name}`: unknown dtype")))?;
        let kind = ParamKind::from_tag(c.u8()?).ok_or_else(|| TamError::Format(format!("`{name}`: unknown kind")))?;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        manifest.push(ManifestEntry { name, dtype, kind, shape });
    }
    let mut store = ParamStore::new();
    for m in &manifest {
        if m.dtype != F::DTYPE {
            return Err(TamError::CheckpointMismatch {
                name: m.name.clone(),
                detail: format!("stored as {}, requested {}", m.dtype, F::DTYPE),
            });
        }
        let n: usize = m.shape.iter().product();
        let size = m.dtype.size();
        let raw = c.take(n * size)?;
        let data = raw.chunks_exact(size).map(F::read_le).collect();
        store.insert(m.name.clone(), Tensor::new(&m.shape, data)?, m.kind)?;
    }
    if c.pos != bytes.len() {
        return Err(TamError::Format(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok((manifest, store))
}

pub fn save<F: Real>(path: &Path, store: &ParamStore<F>) -> Result<()> {
    fs::write(path, to_bytes(store))?;
    Ok(())
}

pub fn load<F: Real>(path: &Path) -> Result<ParamStore<F>> {
    Ok(from_bytes(&fs::read(path)?)?.1)
}

/// Copies `loaded` into `target`, which must hold exactly the same names,
/// kinds and shapes. The first discrepancy, in name order, is reported.
pub fn restore<F: Real>(target: &mut ParamStore<F>, loaded: &ParamStore<F>) -> Result<()> {
    let mut want = target.names().map(str::to_string).collect::<Vec<_>>().into_iter();
    let mut have = loaded.iter();
    loop {
        match (want.next(), have.next()) {
            (None, None) => break,
            (Some(w), None) => {
                return Err(TamError::CheckpointMismatch { name: w, detail: "missing from checkpoint".into() });
            }
            (None, Some((h, _))) => {
                return Err(TamError::CheckpointMismatch { name: h.into(), detail: "not present in the model".into() });
            }
            (Some(w), Some((h, e))) => {
                if w != h {
                    let name = if w.as_str() < h { w } else { h.to_string() };
                    let detail = if target.contains(&name) { "missing from checkpoint" } else { "not present in the model" };
                    return Err(TamError::CheckpointMismatch { name, detail: detail.into() });
                }
                let cur = target.entry(&w).expect("name from target");
                if cur.value.shape() != e.value.shape() || cur.kind != e.kind {
                    return Err(TamError::CheckpointMismatch {
                        name: w,
                        detail: format!(
                            "model {:?} {:?}, checkpoint {:?} {:?}",
                            cur.kind,
                            cur.value.shape(),
                            e.kind,
                            e.value.shape()
                        ),
                    });
                }
            }
        }
    }
    for (name, e) in loaded.iter() {
        target.set_value(name, e.value.clone())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("a.weight", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.1), ParamKind::Weight).unwrap();
        s.insert("b.running_var", Tensor::ones(&[3]), ParamKind::State).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = store();
        let (manifest, back) = from_bytes::<f32>(&to_bytes(&s)).unwrap();
        assert_eq!(manifest.len(), 2);
        assert_eq!(back, s);
    }

    #[test]
    fn dtype_mismatch_names_tensor() {
        let err = from_bytes::<f64>(&to_bytes(&store())).unwrap_err();
        assert!(matches!(err, TamError::CheckpointMismatch { ref name, .. } if name == "a.weight"));
    }

    #[test]
    fn restore_reports_first_shape_mismatch() {
        let mut target = ParamStore::<f32>::new();
        target.insert("a.weight", Tensor::zeros(&[3, 2]), ParamKind::Weight).unwrap();
        target.insert("b.running_var", Tensor::ones(&[3]), ParamKind::State).unwrap();
        let err = restore(&mut target, &store()).unwrap_err();
        assert!(matches!(err, TamError::CheckpointMismatch { ref name, .. } if name == "a.weight"));
    }
}
