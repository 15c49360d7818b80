//! Binary checkpoints: network text, batch-norm modes and named `f64`
//! tensors, little-endian throughout. Round trips are bit-exact.
//!
//! ```text
//! magic "HEBBSEED\0" | u32 version
//! u64 len | network text (UTF-8)
//! u64 len | batch-norm modes, space separated
//! u32 count | count × (u32 len | name | u32 ndim | ndim × u64 dim | f64 data)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{BnMode, Network, NetworkSpec};
use crate::rng::Rng;
use crate::tensor::Tensor;

const MAGIC: &[u8; 9] = b"HEBBSEED\0";
const VERSION: u32 = 1;
/// Prefix of tensors that are not network parameters or buffers.
pub const EXTRA_PREFIX: &str = "extra.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    /// Auxiliary tensors stored under `extra.<name>`.
    pub extras: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(network: Network) -> Self {
        Checkpoint { network, extras: Vec::new() }
    }

    pub fn extra(&self, name: &str) -> Option<&Tensor> {
        self.extras.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let text = self.network.spec().to_text();
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        let modes: Vec<&str> = self.network.bn_modes().iter().map(|m| m.as_str()).collect();
        let modes = modes.join(" ");
        out.extend_from_slice(&(modes.len() as u64).to_le_bytes());
        out.extend_from_slice(modes.as_bytes());
        let named = self.network.named_tensors();
        let extras = self.extras.iter().map(|(n, t)| (format!("{EXTRA_PREFIX}{n}"), t));
        let all: Vec<(String, &Tensor)> = named.into_iter().chain(extras).collect();
        out.extend_from_slice(&(all.len() as u32).to_le_bytes());
        for (name, t) in all {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let text = r.string_u64()?;
        let spec = NetworkSpec::from_text(&text)?;
        let modes = r.string_u64()?;
        let modes = modes.split_whitespace().map(BnMode::parse).collect::<Result<Vec<_>>>()?;
        // Parameters are overwritten below; the init only fixes the layout.
        let mut network = Network::new(spec, &mut Rng::new(0))?;
        network.set_bn_modes(&modes)?;
        let count = r.u32()? as usize;
        let mut loaded: Vec<(String, Tensor)> = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            loaded.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let mut extras = Vec::new();
        let mut params = Vec::new();
        for (name, t) in loaded {
            match name.strip_prefix(EXTRA_PREFIX) {
                Some(rest) => extras.push((rest.to_string(), t)),
                None => params.push((name, t)),
            }
        }
        let mut slots = network.named_tensors_mut();
        if slots.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, architecture needs {}",
                params.len(),
                slots.len()
            )));
        }
        for ((slot_name, slot), (name, t)) in slots.iter_mut().zip(params) {
            if *slot_name != name || slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} {:?} does not match {slot_name} {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            **slot = t;
        }
        Ok(Checkpoint { network, extras })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string_u64(&mut self) -> Result<String> {
        let len = usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))?;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("text is not UTF-8".into()))
    }
}
