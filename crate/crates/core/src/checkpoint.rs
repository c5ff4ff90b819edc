//! Binary checkpoints: adapter, optional task head, optional meta state.
//!
//! Layout (little endian): magic `SLCK`, `u32` version, `u8` section flags,
//! then the adapter, the head if flag bit 0 is set and the meta state if bit 1
//! is set. Floats are stored as raw `f64` bits, so a save/load/save cycle is
//! byte-exact.

use std::fs;
use std::path::Path;

use crate::adapter::Adapter;
use crate::error::{Error, Result};
use crate::metagradnorm::MetaState;
use crate::trainer::TaskHead;

pub const MAGIC: &[u8; 4] = b"SLCK";
pub const VERSION: u32 = 1;

const HAS_HEAD: u8 = 1;
const HAS_META: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub adapter: Adapter,
    pub head: Option<TaskHead>,
    pub meta: Option<MetaState>,
}

impl Checkpoint {
    pub fn new(adapter: Adapter, head: Option<TaskHead>, meta: Option<MetaState>) -> Self {
        Checkpoint { adapter, head, meta }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, VERSION);
        let flags = if self.head.is_some() { HAS_HEAD } else { 0 } | if self.meta.is_some() { HAS_META } else { 0 };
        w.push(flags);

        let a = &self.adapter;
        put_u32(&mut w, a.dim() as u32);
        put_u32(&mut w, a.rank() as u32);
        put_f64(&mut w, a.scale());
        put_f64s(&mut w, a.down());
        put_f64s(&mut w, a.up());

        if let Some(h) = &self.head {
            put_u32(&mut w, h.categories().len() as u32);
            for c in h.categories() {
                put_u32(&mut w, c.len() as u32);
                w.extend_from_slice(c.as_bytes());
            }
            put_u32(&mut w, h.dim() as u32);
            put_f64s(&mut w, h.weights());
            put_f64s(&mut w, h.bias());
        }
        if let Some(m) = &self.meta {
            put_f64s(&mut w, &m.rho);
            match m.initial_losses {
                Some((c, o)) => {
                    w.push(1);
                    put_f64(&mut w, c);
                    put_f64(&mut w, o);
                }
                None => w.push(0),
            }
            for v in [m.gamma, m.beta, m.eta_meta, m.epsilon] {
                put_f64(&mut w, v);
            }
            w.push(m.gate_stop_gradient as u8);
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                expected: VERSION,
                found: version,
            });
        }
        let flags = r.u8()?;
        if flags & !(HAS_HEAD | HAS_META) != 0 {
            return Err(Error::Checkpoint(format!("unknown section flags {flags:#04x}")));
        }

        let dim = r.u32()? as usize;
        let rank = r.u32()? as usize;
        if rank == 0 || rank > dim {
            return Err(Error::Checkpoint(format!("adapter rank {rank} with dimension {dim}")));
        }
        let scale = r.f64()?;
        let down = r.f64s(rank * dim)?;
        let up = r.f64s(dim * rank)?;
        let adapter = Adapter::from_parts(dim, rank, scale, down, up)?;

        let head = if flags & HAS_HEAD != 0 {
            let n = r.u32()? as usize;
            let mut categories = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                let len = r.u32()? as usize;
                let raw = r.take(len)?;
                let name = std::str::from_utf8(raw).map_err(|_| Error::Checkpoint("category name is not UTF-8".into()))?;
                categories.push(name.to_string());
            }
            let hdim = r.u32()? as usize;
            let n_out = n * 3;
            let weights = r.f64s(n_out * hdim)?;
            let bias = r.f64s(n_out)?;
            Some(TaskHead::from_parts(categories, hdim, weights, bias).map_err(|e| Error::Checkpoint(format!("task head: {e}")))?)
        } else {
            None
        };

        let meta = if flags & HAS_META != 0 {
            let rho: [f64; 4] = r.f64s(4)?.try_into().expect("four values");
            let initial_losses = match r.u8()? {
                0 => None,
                1 => Some((r.f64()?, r.f64()?)),
                b => return Err(Error::Checkpoint(format!("bad initial-loss marker {b}"))),
            };
            let (gamma, beta, eta_meta, epsilon) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
            let gate_stop_gradient = match r.u8()? {
                0 => false,
                1 => true,
                b => return Err(Error::Checkpoint(format!("bad flag byte {b}"))),
            };
            Some(MetaState {
                rho,
                initial_losses,
                gamma,
                beta,
                eta_meta,
                epsilon,
                gate_stop_gradient,
            })
        } else {
            None
        };

        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { adapter, head, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Fails unless the checkpoint's embedding dimension is `dim`.
    pub fn check_dim(&self, dim: usize) -> Result<()> {
        let found = self.adapter.dim();
        if found != dim {
            return Err(Error::Checkpoint(format!(
                "adapter dimension {found} does not match corpus dimension {dim}"
            )));
        }
        if let Some(h) = &self.head {
            if h.dim() != dim {
                return Err(Error::Checkpoint(format!(
                    "head dimension {} does not match corpus dimension {dim}",
                    h.dim()
                )));
            }
        }
        Ok(())
    }
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(w: &mut Vec<u8>, v: f64) {
    w.extend_from_slice(&v.to_bits().to_le_bytes());
}

fn put_f64s(w: &mut Vec<u8>, vs: &[f64]) {
    vs.iter().for_each(|&v| put_f64(w, v));
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.bytes.len())));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"))))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        // check the length up front so a corrupt count cannot allocate wildly
        let n_bytes = n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?;
        let raw = self.take(n_bytes)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::Alpha;
    use proptest::prelude::*;

    fn sample(seed: u64) -> Checkpoint {
        let mut adapter = Adapter::init(5, 2, 4.0, seed).unwrap();
        let up: Vec<f64> = (0..10).map(|i| (i as f64 * 0.37 + seed as f64).sin()).collect();
        adapter.up_mut().copy_from_slice(&up);
        let head = TaskHead::from_parts(
            vec!["energy".into(), "water".into()],
            5,
            (0..30).map(|i| i as f64 / 7.0).collect(),
            vec![-0.5, 0.1, 0.2, 0.3, 0.4, 1e-300],
        )
        .unwrap();
        let mut meta = MetaState::new(Alpha::default(), 0.5, 0.01, 1e-3).unwrap();
        meta.record_initial_losses((0.7, 0.2));
        Checkpoint::new(adapter, Some(head), Some(meta))
    }

    #[test]
    fn round_trip_is_byte_exact() {
        for ck in [
            sample(1),
            Checkpoint::new(sample(2).adapter, None, None),
            Checkpoint::new(sample(3).adapter, None, sample(3).meta),
        ] {
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn corrupted_header_is_a_version_error() {
        let mut bytes = sample(1).to_bytes();
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Version { found: 9, .. })));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncation_and_trailing_bytes_fail() {
        let bytes = sample(1).to_bytes();
        for cut in [0, 3, 8, 9, 40, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn dimension_check() {
        let ck = sample(1);
        assert!(ck.check_dim(5).is_ok());
        assert!(matches!(ck.check_dim(6), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let ck = sample(4);
        ck.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), ck);
        assert!(matches!(Checkpoint::load(dir.path().join("missing")), Err(Error::Io { .. })));
    }

    proptest! {
        #[test]
        fn random_adapters_round_trip(dim in 1usize..8, rank in 1usize..4, seed in any::<u64>(), scale in -10.0f64..10.0) {
            let rank = rank.min(dim);
            let n = dim * rank;
            let down: Vec<f64> = (0..n).map(|i| ((i as u64 ^ seed) as f64).cos()).collect();
            let up: Vec<f64> = (0..n).map(|i| ((i as u64).wrapping_mul(seed) as f64).sin()).collect();
            let ck = Checkpoint::new(Adapter::from_parts(dim, rank, scale, down, up).unwrap(), None, None);
            let bytes = ck.to_bytes();
            prop_assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);
        }
    }
}
