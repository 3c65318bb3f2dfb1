use serde::{Deserialize, Serialize};

use super::Codec;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Basis {
    Red,
    Green,
    Blue,
}

impl Basis {
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Basis::Red => [1.0, 0.0, 0.0],
            Basis::Green => [0.0, 1.0, 0.0],
            Basis::Blue => [0.0, 0.0, 1.0],
        }
    }
}

/// Confidence knots: confidently wrong, unsure, confidently right.
pub const KNOTS: [(f32, Basis); 3] = [(0.0, Basis::Green), (0.5, Basis::Red), (1.0, Basis::Blue)];

/// Latents of solid red, green and blue frames, blended piecewise-linearly
/// between the [`KNOTS`] to turn a scalar per latent site into a colour.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentColorMap {
    /// Each `(H_l, W_l, C_l)`.
    pub red: Tensor,
    pub green: Tensor,
    pub blue: Tensor,
}

impl LatentColorMap {
    /// Builds the map from a trained codec; fails if the codec misses its
    /// PSNR floor or the decoded basis frames are not well separated.
    pub fn build(codec: &Codec) -> Result<Self> {
        if codec.report.psnr < codec.cfg.psnr_floor {
            return Err(Error::Untrained { psnr: codec.report.psnr, floor: codec.cfg.psnr_floor });
        }
        let map = Self::build_unchecked(codec)?;
        let sep = map.separation(codec)?;
        if sep <= 0.3 {
            return Err(Error::InvalidArgument(format!(
                "decoded colour basis frames differ by only {sep:.3} in mean absolute value"
            )));
        }
        Ok(map)
    }

    /// Builds the map without quality checks.
    pub fn build_unchecked(codec: &Codec) -> Result<Self> {
        let one = |b: Basis| -> Result<Tensor> {
            let l = codec.encode_solid(b.rgb(), 1)?;
            let s = l.shape()[1..].to_vec();
            l.reshape(&s)
        };
        Ok(LatentColorMap { red: one(Basis::Red)?, green: one(Basis::Green)?, blue: one(Basis::Blue)? })
    }

    pub fn basis(&self, b: Basis) -> &Tensor {
        match b {
            Basis::Red => &self.red,
            Basis::Green => &self.green,
            Basis::Blue => &self.blue,
        }
    }

    /// Knot weights `(lower basis, upper basis, upper weight)` for `q`.
    fn segment(q: f32) -> (Basis, Basis, f32) {
        let q = q.clamp(0.0, 1.0);
        let i = if q <= KNOTS[1].0 { 0 } else { 1 };
        let (q0, b0) = KNOTS[i];
        let (q1, b1) = KNOTS[i + 1];
        (b0, b1, (q - q0) / (q1 - q0))
    }

    /// Latent video `(T, H_l, W_l, C_l)` colouring each site by `values`
    /// (`T * H_l * W_l` scalars in `[0, 1]`).
    pub fn colorize(&self, values: &[f32], frames: usize) -> Result<Tensor> {
        let s = self.red.shape();
        let (sites, c) = (s[0] * s[1], s[2]);
        if values.len() != frames * sites {
            return Err(Error::shape(&[frames * sites], &[values.len()]));
        }
        let mut out = Vec::with_capacity(values.len() * c);
        for (i, &q) in values.iter().enumerate() {
            let (b0, b1, w) = Self::segment(q);
            let site = i % sites;
            let l0 = &self.basis(b0).data()[site * c..(site + 1) * c];
            let l1 = &self.basis(b1).data()[site * c..(site + 1) * c];
            out.extend(l0.iter().zip(l1).map(|(a, b)| (1.0 - w) * a + w * b));
        }
        Tensor::new(&[frames, s[0], s[1], c], out)
    }

    /// Smallest pairwise mean absolute difference between decoded bases.
    pub fn separation(&self, codec: &Codec) -> Result<f64> {
        let decode = |t: &Tensor| -> Result<Tensor> {
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            codec.decode(&t.clone().reshape(&s)?)
        };
        let (r, g, b) = (decode(&self.red)?, decode(&self.green)?, decode(&self.blue)?);
        let mad = |x: &Tensor, y: &Tensor| {
            x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / x.numel() as f64
        };
        Ok(mad(&r, &g).min(mad(&r, &b)).min(mad(&g, &b)))
    }
}
