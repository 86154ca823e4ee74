//! Density model serialization, magic "XMDM1".
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic      5 bytes  "XMDM1"
//! version    u16      1
//! kind       u8       0 = diagonal Gaussian, 1 = diagonal GMM
//! k          u32      component count (1 for Gaussian)
//! d          u32      activation dimension
//! weights    k   f64
//! means      k*d f64  row-major
//! variances  k*d f64  row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::Result;
use crate::tensor::Tensor;

use super::{DensityModel, DiagonalGaussian, DiagonalGmm};

const MAGIC: &[u8] = b"XMDM1";
const VERSION: u16 = 1;

pub fn write_density(path: &Path, model: &DensityModel) -> Result<()> {
    let mut w = Writer::new(BufWriter::new(File::create(path)?));
    w.bytes(MAGIC)?;
    w.u16(VERSION)?;
    match model {
        DensityModel::Gaussian(g) => {
            w.u8(0)?;
            w.u32(1)?;
            w.u32(g.dim() as u32)?;
            w.f64(1.0)?;
            for &m in g.mean() {
                w.f64(m)?;
            }
            for &v in g.variance() {
                w.f64(v)?;
            }
        }
        DensityModel::Gmm(g) => {
            w.u8(1)?;
            w.u32(g.k() as u32)?;
            w.u32(g.dim() as u32)?;
            for &wt in g.weights() {
                w.f64(wt)?;
            }
            for &m in g.means().as_slice() {
                w.f64(m)?;
            }
            for &v in g.variances().as_slice() {
                w.f64(v)?;
            }
        }
    }
    w.finish()
}

pub fn read_density(path: &Path) -> Result<DensityModel> {
    let mut r = Reader::new(BufReader::new(File::open(path)?), path.display().to_string());
    r.magic(MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return r.fail(format!("unsupported version {version}"));
    }
    let kind = r.u8()?;
    let k = r.u32()? as usize;
    let d = r.u32()? as usize;
    if k == 0 || d == 0 || k.saturating_mul(d) > (1 << 28) {
        return r.fail(format!("implausible dimensions k={k} d={d}"));
    }
    let weights = r.f64_vec(k)?;
    let means = r.f64_vec(k * d)?;
    let variances = r.f64_vec(k * d)?;
    let model = match kind {
        0 => {
            if k != 1 {
                return r.fail(format!("gaussian blob must have k=1, got {k}"));
            }
            DensityModel::Gaussian(DiagonalGaussian::from_parts(means, variances)?)
        }
        1 => DensityModel::Gmm(DiagonalGmm::from_parts(
            weights,
            Tensor::new(vec![k, d], means)?,
            Tensor::new(vec![k, d], variances)?,
        )?),
        other => return r.fail(format!("unknown density kind {other}")),
    };
    r.expect_eof()?;
    Ok(model)
}
