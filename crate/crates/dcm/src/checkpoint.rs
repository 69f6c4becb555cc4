//! Flat versioned binary checkpoints.
//!
//! A blob starts with the magic string `DCMHEAD1`, then one or more tagged
//! sections. Each section carries a little-endian shape header followed by
//! its 64-bit floats in row-major order. Heads checkpoint alone; a full
//! model blob is a backbone section followed by a head section.

use std::path::Path;

use crate::data::Backbone;
use crate::error::{DcmError, Result};
use crate::heads::{KanEdge, KanHead, MlpHead};
use crate::matrix::Matrix;
use crate::ops::Activation;
use crate::spline::SplineGrid;
use crate::Real;

pub const MAGIC: &[u8; 8] = b"DCMHEAD1";

pub const SECTION_MLP_HEAD: u32 = 1;
pub const SECTION_KAN_HEAD: u32 = 2;
pub const SECTION_BACKBONE: u32 = 3;

fn bad(msg: impl Into<String>) -> DcmError {
    DcmError::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(bad("unexpected end of checkpoint"));
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn write_mlp_head_section(out: &mut Vec<u8>, head: &MlpHead<Real>) {
    push_u32(out, SECTION_MLP_HEAD);
    push_u64(out, head.classes() as u64);
    push_u64(out, head.features() as u64);
    push_f64s(out, head.weight.data());
    push_f64s(out, &head.bias);
}

pub fn write_kan_head_section(out: &mut Vec<u8>, head: &KanHead<Real>) {
    push_u32(out, SECTION_KAN_HEAD);
    push_u64(out, head.classes() as u64);
    push_u64(out, head.features() as u64);
    push_u64(out, head.grid().intervals() as u64);
    push_u64(out, head.grid().degree() as u64);
    push_f64s(out, &[head.grid().lower(), head.grid().upper()]);
    for edge in head.edges() {
        push_f64s(out, &edge.coeffs);
        push_f64s(out, &[edge.base_weight, edge.spline_weight]);
    }
}

pub fn write_backbone_section(out: &mut Vec<u8>, backbone: &Backbone) {
    push_u32(out, SECTION_BACKBONE);
    push_u64(out, backbone.input_dim() as u64);
    push_u64(out, backbone.hidden_dim() as u64);
    push_u64(out, backbone.feature_dim() as u64);
    push_u32(
        out,
        match backbone.activation {
            Activation::Relu => 0,
            Activation::Silu => 1,
        },
    );
    push_f64s(out, backbone.w1.data());
    push_f64s(out, &backbone.b1);
    push_f64s(out, backbone.w2.data());
    push_f64s(out, &backbone.b2);
}

fn read_mlp_head(r: &mut Reader) -> Result<MlpHead<Real>> {
    let classes = r.u64()? as usize;
    let features = r.u64()? as usize;
    let weight = Matrix::from_vec(classes, features, r.f64s(classes * features)?)?;
    let bias = r.f64s(classes)?;
    Ok(MlpHead { weight, bias })
}

fn read_kan_head(r: &mut Reader) -> Result<KanHead<Real>> {
    let classes = r.u64()? as usize;
    let features = r.u64()? as usize;
    let intervals = r.u64()? as usize;
    let degree = r.u64()? as usize;
    let lower = r.f64()?;
    let upper = r.f64()?;
    let grid = SplineGrid::new(lower, upper, intervals, degree)?;
    let n = grid.basis_count();
    let mut edges = Vec::with_capacity(classes * features);
    for _ in 0..classes * features {
        let coeffs = r.f64s(n)?;
        let base_weight = r.f64()?;
        let spline_weight = r.f64()?;
        edges.push(KanEdge {
            coeffs,
            base_weight,
            spline_weight,
        });
    }
    KanHead::from_edges(classes, features, grid, edges)
}

fn read_backbone(r: &mut Reader) -> Result<Backbone> {
    let input = r.u64()? as usize;
    let hidden = r.u64()? as usize;
    let feature = r.u64()? as usize;
    let activation = match r.u32()? {
        0 => Activation::Relu,
        1 => Activation::Silu,
        other => return Err(bad(format!("unknown activation code {other}"))),
    };
    let w1 = Matrix::from_vec(hidden, input, r.f64s(hidden * input)?)?;
    let b1 = r.f64s(hidden)?;
    let w2 = Matrix::from_vec(feature, hidden, r.f64s(feature * hidden)?)?;
    let b2 = r.f64s(feature)?;
    Ok(Backbone {
        w1,
        b1,
        w2,
        b2,
        activation,
    })
}

/// A parsed checkpoint section.
pub enum Section {
    MlpHead(MlpHead<Real>),
    KanHead(KanHead<Real>),
    Backbone(Backbone),
}

/// Serialize sections into a complete blob with the magic prefix.
pub fn blob_from_sections(write: impl FnOnce(&mut Vec<u8>)) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    write(&mut out);
    out
}

/// Parse a full blob into its sections.
pub fn parse_blob(buf: &[u8]) -> Result<Vec<Section>> {
    let mut r = Reader::new(buf);
    if r.take(MAGIC.len())? != MAGIC {
        return Err(bad("bad magic; not a DCMHEAD1 checkpoint"));
    }
    let mut sections = Vec::new();
    while !r.done() {
        let section = match r.u32()? {
            SECTION_MLP_HEAD => Section::MlpHead(read_mlp_head(&mut r)?),
            SECTION_KAN_HEAD => Section::KanHead(read_kan_head(&mut r)?),
            SECTION_BACKBONE => Section::Backbone(read_backbone(&mut r)?),
            other => return Err(bad(format!("unknown section tag {other}"))),
        };
        sections.push(section);
    }
    Ok(sections)
}

pub fn write_file(path: &Path, blob: &[u8]) -> Result<()> {
    std::fs::write(path, blob)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<Section>> {
    let buf = std::fs::read(path)?;
    parse_blob(&buf)
}
