//! Versioned binary model container.
//!
//! Layout (all integers little-endian, all floats IEEE-754 f64 LE):
//!
//! ```text
//! magic      4 bytes  "VGCK"
//! version    u32      currently 1
//! activation u8       0 = relu, 1 = softplus
//! n_layers   u32
//! per layer:
//!   k            u32     input width
//!   l            u32     output width
//!   noise tag    u8      0 none, 1 independent weight, 2 correlated scale,
//!                        3 binary, 4 fixed gaussian
//!   noise param  f64     p for binary, alpha for fixed gaussian, else 0
//!   granularity  u8      0 per-layer, 1 per-input-neuron, 2 per-weight
//!   theta        k*l f64 row-major
//!   n_alpha      u64     stored log_alpha entry count
//!   log_alpha    n_alpha f64
//!   bias         l f64
//! ```
//!
//! The format is stable: readers reject unknown versions and tags rather
//! than guessing.

use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{DenseVariationalLayer, NoiseModel};
use crate::model::{Activation, Mlp};
use crate::posterior::{DropoutPosterior, Granularity, PosteriorKind};
use crate::tensor::Matrix;

const MAGIC: [u8; 4] = *b"VGCK";
const VERSION: u32 = 1;

pub fn save_model(model: &Mlp, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_bytes(model)).map_err(Error::from)
}

pub fn load_model(path: &Path) -> Result<Mlp> {
    let bytes = std::fs::read(path)?;
    model_from_bytes(&bytes)
}

pub fn model_to_bytes(model: &Mlp) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match model.activation {
        Activation::ReLU => 0,
        Activation::Softplus => 1,
    });
    out.extend_from_slice(&(model.layers.len() as u32).to_le_bytes());
    for layer in &model.layers {
        let (k, l) = layer.posterior.theta.shape();
        out.extend_from_slice(&(k as u32).to_le_bytes());
        out.extend_from_slice(&(l as u32).to_le_bytes());
        let (tag, param) = match layer.noise {
            NoiseModel::None => (0u8, 0.0),
            NoiseModel::IndependentWeight => (1, 0.0),
            NoiseModel::CorrelatedScale => (2, 0.0),
            NoiseModel::Binary { p } => (3, p),
            NoiseModel::GaussianFixed { alpha } => (4, alpha),
        };
        out.push(tag);
        out.extend_from_slice(&param.to_le_bytes());
        out.push(match layer.posterior.granularity {
            Granularity::PerLayer => 0,
            Granularity::PerInputNeuron => 1,
            Granularity::PerWeight => 2,
        });
        for x in layer.posterior.theta.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&(layer.posterior.log_alpha.data().len() as u64).to_le_bytes());
        for x in layer.posterior.log_alpha.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for x in &layer.bias {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Io(format!(
                "checkpoint truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("length checked")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("length checked")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("length checked")))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunked by 8")))
            .collect())
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Mlp> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:02x?}, expected {:02x?}",
            magic, MAGIC
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, this build reads {VERSION}"
        )));
    }
    let activation = match r.u8()? {
        0 => Activation::ReLU,
        1 => Activation::Softplus,
        tag => return Err(Error::Format(format!("unknown activation tag {tag}"))),
    };
    let n_layers = r.u32()? as usize;
    if n_layers == 0 {
        return Err(Error::Format("checkpoint has no layers".into()));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let k = r.u32()? as usize;
        let l = r.u32()? as usize;
        if k == 0 || l == 0 {
            return Err(Error::Format("zero layer dimension in checkpoint".into()));
        }
        let tag = r.u8()?;
        let param = r.f64()?;
        let noise = match tag {
            0 => NoiseModel::None,
            1 => NoiseModel::IndependentWeight,
            2 => NoiseModel::CorrelatedScale,
            3 => NoiseModel::Binary { p: param },
            4 => NoiseModel::GaussianFixed { alpha: param },
            t => return Err(Error::Format(format!("unknown noise tag {t}"))),
        };
        if let NoiseModel::Binary { p } = noise {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Format(format!("binary dropout p {p} out of range")));
            }
        }
        if let NoiseModel::GaussianFixed { alpha } = noise {
            if !(alpha > 0.0 && alpha <= 1.0) {
                return Err(Error::Format(format!("fixed gaussian alpha {alpha} out of range")));
            }
        }
        let granularity = match r.u8()? {
            0 => Granularity::PerLayer,
            1 => Granularity::PerInputNeuron,
            2 => Granularity::PerWeight,
            t => return Err(Error::Format(format!("unknown granularity tag {t}"))),
        };
        let theta = Matrix::from_vec(k, l, r.f64_vec(k * l)?)?;
        let n_alpha = r.u64()? as usize;
        let expected = match granularity {
            Granularity::PerLayer => 1,
            Granularity::PerInputNeuron => k,
            Granularity::PerWeight => k * l,
        };
        if n_alpha != expected {
            return Err(Error::Format(format!(
                "log_alpha count {n_alpha} does not match granularity (want {expected})"
            )));
        }
        let (ar, ac) = match granularity {
            Granularity::PerLayer => (1, 1),
            Granularity::PerInputNeuron => (k, 1),
            Granularity::PerWeight => (k, l),
        };
        let log_alpha = Matrix::from_vec(ar, ac, r.f64_vec(n_alpha)?)?;
        let bias = r.f64_vec(l)?;
        let kind = match noise {
            NoiseModel::CorrelatedScale | NoiseModel::GaussianFixed { .. } => {
                PosteriorKind::CorrelatedScaleNoise
            }
            _ => PosteriorKind::IndependentWeightNoise,
        };
        let posterior = DropoutPosterior { theta, log_alpha, granularity, kind };
        posterior.validate()?;
        layers.push(DenseVariationalLayer { posterior, bias, noise });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last layer",
            bytes.len() - r.pos
        )));
    }
    // Widths must chain or the file was assembled from mismatched pieces.
    for w in layers.windows(2) {
        if w[0].output_dim() != w[1].input_dim() {
            return Err(Error::Format(format!(
                "layer widths do not chain: {} then {}",
                w[0].output_dim(),
                w[1].input_dim()
            )));
        }
    }
    Ok(Mlp { layers, activation })
}
