//! Single-file binary container for networks and Hessian dumps.
//!
//! All integers and floats are little-endian. Layout:
//!
//! ```text
//! "LOBS" u32 version u32 kind
//! network (kind 0): u32 input_dim, u32 layers, then per layer
//!     u8 layer kind (0 dense, 1 conv), u8 activation (0 identity, 1 relu),
//!     u32 rows, u32 cols,
//!     conv only: u32 in_channels, in_height, in_width, out_channels,
//!                kernel_h, kernel_w, stride_h, stride_w, pad_h, pad_w
//!     rows*cols f64 weights (row-major), rows*cols u8 mask
//! hessian dump (kind 1): u32 entries, then per entry
//!     u32 layer, u32 m, u64 sample_count, f64 alpha,
//!     m*m f64 psi, m*m f64 psi inverse (both row-major)
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::error::{LobsError, Result};
use crate::hessian::{PsiInverse, PsiMatrix};
use crate::net::{Activation, ConvGeometry, Layer, LayerKind, Network};

pub const MAGIC: &[u8; 4] = b"LOBS";
pub const VERSION: u32 = 1;
const KIND_NETWORK: u32 = 0;
const KIND_HESSIAN: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn header(kind: u32) -> Self {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION as usize);
        w.u32(kind as usize);
        w
    }

    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("dimension fits in u32");
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn matrix(&mut self, m: &Array2<f64>) {
        for &v in m.iter() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: impl Into<String>) -> LobsError {
        LobsError::Format {
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(format!("truncated: need {n} more bytes"))),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let len = rows
            .checked_mul(cols)
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= self.bytes.len() - self.pos))
            .ok_or_else(|| self.err(format!("truncated: {rows}x{cols} matrix does not fit")))?;
        let raw = self.take(len * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Array2::from_shape_vec((rows, cols), data).expect("matrix shape"))
    }

    fn header(&mut self, kind: u32) -> Result<()> {
        if self.take(4).ok() != Some(MAGIC.as_slice()) {
            self.pos = 0;
            return Err(self.err("bad magic, expected LOBS"));
        }
        let at = self.pos;
        let version = self.u32()?;
        if version != VERSION as usize {
            self.pos = at;
            return Err(self.err(format!("unsupported container version {version}")));
        }
        let at = self.pos;
        let got = self.u32()?;
        if got != kind as usize {
            self.pos = at;
            return Err(self.err(format!("container kind {got}, expected {kind}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn network_to_bytes(net: &Network) -> Vec<u8> {
    let mut w = Writer::header(KIND_NETWORK);
    w.u32(net.input_dim());
    w.u32(net.num_layers());
    for layer in net.layers() {
        let (rows, cols) = layer.weights().dim();
        match layer.kind() {
            LayerKind::Dense => w.u8(0),
            LayerKind::Conv(_) => w.u8(1),
        }
        w.u8(layer.activation().tag());
        w.u32(rows);
        w.u32(cols);
        if let LayerKind::Conv(g) = layer.kind() {
            for v in [
                g.in_channels,
                g.in_height,
                g.in_width,
                g.out_channels,
                g.kernel.0,
                g.kernel.1,
                g.stride.0,
                g.stride.1,
                g.padding.0,
                g.padding.1,
            ] {
                w.u32(v);
            }
        }
        w.matrix(layer.weights());
        w.0.extend(layer.mask().iter().map(|&m| m as u8));
    }
    w.0
}

pub fn network_from_bytes(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { bytes, pos: 0 };
    r.header(KIND_NETWORK)?;
    let input_dim = r.u32()?;
    let count = r.u32()?;
    let mut layers = Vec::new();
    for l in 0..count {
        let at = r.pos;
        let kind = r.u8()?;
        let tag = r.u8()?;
        let activation = Activation::from_tag(tag).ok_or_else(|| {
            LobsError::Format {
                offset: at as u64 + 1,
                detail: format!("layer {l}: unknown activation tag {tag}"),
            }
        })?;
        let rows = r.u32()?;
        let cols = r.u32()?;
        let geometry = match kind {
            0 => None,
            1 => {
                let mut v = [0usize; 10];
                for x in &mut v {
                    *x = r.u32()?;
                }
                Some(ConvGeometry::new(
                    (v[0], v[1], v[2]),
                    v[3],
                    (v[4], v[5]),
                    (v[6], v[7]),
                    (v[8], v[9]),
                )?)
            }
            other => {
                return Err(LobsError::Format {
                    offset: at as u64,
                    detail: format!("layer {l}: unknown layer kind {other}"),
                })
            }
        };
        let weights = r.matrix(rows, cols)?;
        let at = r.pos;
        let mask_bytes = r.take(rows * cols)?;
        if let Some(i) = mask_bytes.iter().position(|&b| b > 1) {
            return Err(LobsError::Format {
                offset: (at + i) as u64,
                detail: format!("layer {l}: mask byte must be 0 or 1"),
            });
        }
        let mask = Array2::from_shape_vec((rows, cols), mask_bytes.iter().map(|&b| b == 1).collect())
            .expect("mask shape");
        let mut layer = match geometry {
            None => Layer::dense(weights, activation),
            Some(g) => Layer::conv(g, weights, activation),
        }
        .map_err(|e| match e {
            LobsError::Dimension { detail, .. } => LobsError::Dimension { layer: l, detail },
            other => other,
        })?;
        layer.mask = mask;
        layer.apply_mask();
        layers.push(layer);
    }
    r.finish()?;
    Network::new(input_dim, layers)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of the network's container bytes.
pub fn network_sha256(net: &Network) -> String {
    sha256_hex(&network_to_bytes(net))
}

pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    fs::write(path, network_to_bytes(net)).map_err(|e| LobsError::io(path, e))
}

pub fn load_network(path: &Path) -> Result<Network> {
    network_from_bytes(&fs::read(path).map_err(|e| LobsError::io(path, e))?)
}

/// `Ψ` and `Ψ^{-1}` of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct HessianEntry {
    pub psi: PsiMatrix,
    pub inverse: PsiInverse,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct HessianDump {
    pub entries: Vec<HessianEntry>,
}

impl HessianDump {
    /// Inverse recorded for `layer`, if any (the last one wins).
    pub fn inverse(&self, layer: usize) -> Option<&PsiInverse> {
        self.entries
            .iter()
            .rev()
            .find(|e| e.inverse.layer_index == layer)
            .map(|e| &e.inverse)
    }
}

pub fn hessian_to_bytes(dump: &HessianDump) -> Vec<u8> {
    let mut w = Writer::header(KIND_HESSIAN);
    w.u32(dump.entries.len());
    for e in &dump.entries {
        w.u32(e.inverse.layer_index);
        w.u32(e.inverse.dim());
        w.u64(e.inverse.sample_count as u64);
        w.f64(e.inverse.alpha);
        w.matrix(&e.psi.psi);
        w.matrix(&e.inverse.inv);
    }
    w.0
}

pub fn hessian_from_bytes(bytes: &[u8]) -> Result<HessianDump> {
    let mut r = Reader { bytes, pos: 0 };
    r.header(KIND_HESSIAN)?;
    let count = r.u32()?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let layer_index = r.u32()?;
        let m = r.u32()?;
        let sample_count = r.u64()? as usize;
        let alpha = r.f64()?;
        let psi = r.matrix(m, m)?;
        let inv = r.matrix(m, m)?;
        entries.push(HessianEntry {
            psi: PsiMatrix {
                layer_index,
                psi,
                sample_count,
            },
            inverse: PsiInverse {
                layer_index,
                inv,
                alpha,
                sample_count,
            },
        });
    }
    r.finish()?;
    Ok(HessianDump { entries })
}

pub fn save_hessian(dump: &HessianDump, path: &Path) -> Result<()> {
    fs::write(path, hessian_to_bytes(dump)).map_err(|e| LobsError::io(path, e))
}

pub fn load_hessian(path: &Path) -> Result<HessianDump> {
    hessian_from_bytes(&fs::read(path).map_err(|e| LobsError::io(path, e))?)
}
