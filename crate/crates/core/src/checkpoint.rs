//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MTDNETV1"
//! u32 header length, header bytes (network config as key = value text)
//! u64 seed
//! u32 epoch
//! u32 blob count
//! per blob: u32 name length, name, u32 ndim, ndim x u32 dims, f32 values
//! ```
//!
//! On load the blobs must match the header's parameter set exactly, in
//! canonical order.

use std::path::Path;

use crate::autodiff::ParamStore;
use crate::config::{net_config_from_text, net_config_to_text};
use crate::error::{Error, Result};
use crate::network::NetConfig;
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 8] = b"MTDNETV1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub net: NetConfig,
    pub seed: u64,
    pub epoch: u32,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        check_params(&self.net, &self.params)?;
        let header = net_config_to_text(&self.net);
        let mut out = Vec::with_capacity(64 + header.len() + 4 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, header.len())?;
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        put_u32(&mut out, self.params.len())?;
        for (name, t) in self.params.iter() {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len())?;
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
        }
        let hlen = r.u32("header length")? as usize;
        let header = std::str::from_utf8(r.take(hlen, "header")?)
            .map_err(|_| Error::Checkpoint("header is not valid UTF-8".into()))?;
        let net = net_config_from_text(header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let seed = u64::from_le_bytes(r.take(8, "seed")?.try_into().expect("8 bytes"));
        let epoch = r.u32("epoch")?;
        let count = r.u32("blob count")? as usize;
        let expected = net.param_shapes()?;
        if count != expected.len() {
            return Err(Error::Checkpoint(format!(
                "{count} parameter blobs, config expects {}",
                expected.len()
            )));
        }
        let mut params = ParamStore::new();
        for (want_name, want_shape) in &expected {
            let nlen = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(nlen, "name")?)
                .map_err(|_| Error::Checkpoint("parameter name is not valid UTF-8".into()))?;
            if name != want_name {
                return Err(Error::Checkpoint(format!("expected parameter {want_name}, found {name}")));
            }
            let ndim = r.u32("ndim")? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u32("dims")? as usize);
            }
            if &shape != want_shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {shape:?}, config expects {want_shape:?}"
                )));
            }
            let n = numel(&shape);
            let raw = r.take(4 * n, name)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { net, seed, epoch, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Loads and additionally requires the stored network to equal `expected`.
    pub fn load_for(path: &Path, expected: &NetConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if &ck.net != expected {
            let got = ck.net.param_shapes()?;
            let want = expected.param_shapes()?;
            let first = want
                .iter()
                .zip(got.iter().map(Some).chain(std::iter::repeat(None)))
                .find(|(w, g)| Some(*w) != *g);
            let detail = match first {
                Some(((name, shape), Some((gname, gshape)))) => {
                    format!("parameter {name} {shape:?} does not match stored {gname} {gshape:?}")
                }
                Some(((name, _), None)) => format!("parameter {name} is missing"),
                None if got.len() > want.len() => format!("unexpected parameter {}", got[want.len()].0),
                None => "network or loss settings differ".to_string(),
            };
            return Err(Error::Checkpoint(format!("{}: {detail}", path.display())));
        }
        Ok(ck)
    }
}

fn check_params(net: &NetConfig, params: &ParamStore<f32>) -> Result<()> {
    let expected = net.param_shapes()?;
    if expected.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "{} parameters, config expects {}",
            params.len(),
            expected.len()
        )));
    }
    for ((want, shape), (name, t)) in expected.iter().zip(params.iter()) {
        if want != name || shape.as_slice() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "expected parameter {want} {shape:?}, found {name} {:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}
