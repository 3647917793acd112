//! Binary checkpoint format.
//!
//! ```text
//! "EFLD"  u32 version  u8 tag (0 grid, 1 network)
//! grid:    u32 nx, u32 ny, u32 nz
//! network: u32 hidden_layers, u32 hidden_width, u32 num_freqs, u8 use_directions
//! 6 × f64 bounds (min xyz, max xyz)
//! u64 P, then P × f64 parameters
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::{FieldLayout, FieldParams, GridSpec, NetworkSpec};
use crate::geometry::{Aabb, Vec3};
use crate::scalar::Real;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EFLD";
pub const CHECKPOINT_VERSION: u32 = 1;

const TAG_GRID: u8 = 0;
const TAG_NETWORK: u8 = 1;

pub fn write_checkpoint<T: Real>(field: &FieldParams<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * field.values.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let bounds = match &field.layout {
        FieldLayout::Grid(g) => {
            out.push(TAG_GRID);
            for n in g.resolution {
                out.extend_from_slice(&(n as u32).to_le_bytes());
            }
            g.bounds
        }
        FieldLayout::Network(n) => {
            out.push(TAG_NETWORK);
            for v in [n.hidden_layers, n.hidden_width, n.num_freqs] {
                out.extend_from_slice(&(v as u32).to_le_bytes());
            }
            out.push(u8::from(n.use_directions));
            n.bounds
        }
    };
    for v in bounds.min.to_array().into_iter().chain(bounds.max.to_array()) {
        out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
    }
    out.extend_from_slice(&(field.values.len() as u64).to_le_bytes());
    for v in &field.values {
        out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }
    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|s| s[0])
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|s| u32::from_le_bytes(s.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|s| u64::from_le_bytes(s.try_into().unwrap()))
    }
    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|s| f64::from_le_bytes(s.try_into().unwrap()))
    }
}

/// Parses checkpoint bytes; `origin` names the source in error messages.
pub fn read_checkpoint<T: Real>(bytes: &[u8], origin: &Path) -> Result<FieldParams<T>> {
    let bad = |reason: &str| Error::format(origin, reason);
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4) != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(bad("missing EFLD magic"));
    }
    let version = r.u32().ok_or_else(|| bad("truncated header"))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let tag = r.u8().ok_or_else(|| bad("truncated header"))?;
    let mut ints = [0usize; 3];
    for v in &mut ints {
        *v = r.u32().ok_or_else(|| bad("truncated metadata"))? as usize;
    }
    let use_directions = match tag {
        TAG_GRID => false,
        TAG_NETWORK => r.u8().ok_or_else(|| bad("truncated metadata"))? != 0,
        other => return Err(bad(&format!("unknown representation tag {other}"))),
    };
    let mut b = [0.0f64; 6];
    for v in &mut b {
        *v = r.f64().ok_or_else(|| bad("truncated bounds"))?;
    }
    let bounds = Aabb::new(Vec3::new(b[0], b[1], b[2]), Vec3::new(b[3], b[4], b[5]))
        .map_err(|_| bad("degenerate bounds"))?
        .cast::<T>();
    let layout = if tag == TAG_GRID {
        FieldLayout::Grid(GridSpec { resolution: ints, bounds })
    } else {
        FieldLayout::Network(NetworkSpec {
            hidden_layers: ints[0],
            hidden_width: ints[1],
            num_freqs: ints[2],
            use_directions,
            bounds,
        })
    };
    let count = r.u64().ok_or_else(|| bad("missing parameter count"))? as usize;
    if r.bytes.len() != r.pos + 8 * count {
        return Err(bad("parameter block length does not match its count"));
    }
    let values = (0..count).map(|_| T::lit(r.f64().unwrap())).collect();
    FieldParams::from_values(layout, values).map_err(|e| bad(&e.to_string()))
}

pub fn save_checkpoint<T: Real>(path: &Path, field: &FieldParams<T>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, write_checkpoint(field)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<FieldParams<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes, path)
}
