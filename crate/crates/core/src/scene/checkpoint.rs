//! Cloud checkpoints.
//!
//! Binary layout (all little-endian):
//!
//! ```text
//! magic            4 bytes  "GSCK"
//! version          u32      1
//! count N          u32
//! sh_degree        u32      stored degree
//! active_degree    u32
//! positions        N×3 f32, column-major (all x, then all y, then all z)
//! rotations        N×4 f32, column-major (w, x, y, z)
//! log_scales       N×3 f32, column-major
//! opacity_logits   N×1 f32
//! sh               N×(3·(d+1)²) f32, column-major over the coefficient-major row
//! ```
//!
//! The text dump keeps full `f64` precision and is meant for diffing.

use std::io::{self, Read, Write};

use nalgebra::Vector3;
use thiserror::Error;

use super::{GaussianCloud, MAX_SH_DEGREE};

pub const MAGIC: &[u8; 4] = b"GSCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

fn columns(cloud: &GaussianCloud) -> Vec<Vec<f64>> {
    let n = cloud.len();
    let mut cols = Vec::new();
    for a in 0..3 {
        cols.push(cloud.positions.iter().map(|p| p[a]).collect());
    }
    for a in 0..4 {
        cols.push(cloud.rotations.iter().map(|q| q[a]).collect());
    }
    for a in 0..3 {
        cols.push(cloud.log_scales.iter().map(|s| s[a]).collect());
    }
    cols.push(cloud.opacity_logits.clone());
    let stride = cloud.sh_stride();
    for k in 0..stride {
        cols.push((0..n).map(|i| cloud.sh[i * stride + k]).collect());
    }
    cols
}

pub fn write_binary<W: Write>(cloud: &GaussianCloud, mut w: W) -> Result<(), CheckpointError> {
    let n = u32::try_from(cloud.len())
        .map_err(|_| CheckpointError::Malformed("too many gaussians".into()))?;
    w.write_all(MAGIC)?;
    for v in [
        VERSION,
        n,
        cloud.sh_degree() as u32,
        cloud.active_sh_degree as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(cloud.len() * (11 + cloud.sh_stride()) * 4);
    for col in columns(cloud) {
        for v in col {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn to_bytes(cloud: &GaussianCloud) -> Vec<u8> {
    let mut out = Vec::new();
    write_binary(cloud, &mut out).expect("writing to a Vec cannot fail");
    out
}

pub fn read_binary<R: Read>(mut r: R) -> Result<GaussianCloud, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Malformed("bad magic".into()));
    }
    let mut u = [0u8; 4];
    let mut next_u32 = |r: &mut R| -> Result<u32, CheckpointError> {
        r.read_exact(&mut u)?;
        Ok(u32::from_le_bytes(u))
    };
    let version = next_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::Malformed(format!(
            "unsupported version {version}"
        )));
    }
    let n = next_u32(&mut r)? as usize;
    let degree = next_u32(&mut r)? as usize;
    let active = next_u32(&mut r)? as usize;
    if degree > MAX_SH_DEGREE || active > degree {
        return Err(CheckpointError::Malformed("bad SH degree".into()));
    }
    let mut cloud = GaussianCloud::empty(degree);
    cloud.active_sh_degree = active;
    let stride = cloud.sh_stride();
    let ncols = 11 + stride;
    let mut raw = vec![0u8; n * ncols * 4];
    r.read_exact(&mut raw)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    let val = |col: usize, i: usize| -> f64 {
        let o = (col * n + i) * 4;
        f32::from_le_bytes([raw[o], raw[o + 1], raw[o + 2], raw[o + 3]]) as f64
    };
    for i in 0..n {
        let sh: Vec<f64> = (0..stride).map(|k| val(11 + k, i)).collect();
        cloud.push(
            Vector3::new(val(0, i), val(1, i), val(2, i)),
            [val(3, i), val(4, i), val(5, i), val(6, i)],
            Vector3::new(val(7, i), val(8, i), val(9, i)),
            val(10, i),
            &sh,
        );
    }
    Ok(cloud)
}

/// Lossless `f64` text form: one Gaussian per line.
pub fn to_text(cloud: &GaussianCloud) -> String {
    let mut s = String::new();
    s.push_str("# gaussian cloud v1\n");
    s.push_str(&format!("count {}\n", cloud.len()));
    s.push_str(&format!("sh_degree {}\n", cloud.sh_degree()));
    s.push_str(&format!("active_sh_degree {}\n", cloud.active_sh_degree));
    for i in 0..cloud.len() {
        let mut fields: Vec<f64> = Vec::new();
        fields.extend(cloud.positions[i].iter());
        fields.extend(cloud.rotations[i].iter());
        fields.extend(cloud.log_scales[i].iter());
        fields.push(cloud.opacity_logits[i]);
        fields.extend(cloud.sh_row(i).iter());
        let line: Vec<String> = fields.iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn from_text(text: &str) -> Result<GaussianCloud, CheckpointError> {
    let bad = |m: &str| CheckpointError::Malformed(m.to_string());
    let mut lines = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    let mut header = |key: &str| -> Result<usize, CheckpointError> {
        let line = lines.next().ok_or_else(|| bad("truncated header"))?;
        let mut it = line.split_whitespace();
        if it.next() != Some(key) {
            return Err(bad(&format!("expected '{key}'")));
        }
        it.next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(&format!("bad value for '{key}'")))
    };
    let n = header("count")?;
    let degree = header("sh_degree")?;
    let active = header("active_sh_degree")?;
    if degree > MAX_SH_DEGREE || active > degree {
        return Err(bad("bad SH degree"));
    }
    let mut cloud = GaussianCloud::empty(degree);
    cloud.active_sh_degree = active;
    let stride = cloud.sh_stride();
    for _ in 0..n {
        let line = lines.next().ok_or_else(|| bad("missing gaussian row"))?;
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad("bad number"))?;
        if v.len() != 11 + stride {
            return Err(bad("wrong field count"));
        }
        cloud.push(
            Vector3::new(v[0], v[1], v[2]),
            [v[3], v[4], v[5], v[6]],
            Vector3::new(v[7], v[8], v[9]),
            v[10],
            &v[11..],
        );
    }
    if lines.next().is_some() {
        return Err(bad("trailing rows"));
    }
    Ok(cloud)
}
