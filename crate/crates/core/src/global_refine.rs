//! Adaptive instance normalization of the locally stylized features.

use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Tensor};

/// Added to the content standard deviation before dividing.
pub const ADAIN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    /// Population standard deviation.
    pub std: Vec<f64>,
}

/// Per-channel spatial mean and population standard deviation.
pub fn channel_stats(features: &FeatureMap) -> ChannelStats {
    let (c, h, w) = features.dims();
    let hw = (h * w) as f64;
    let mut mean = Vec::with_capacity(c);
    let mut std = Vec::with_capacity(c);
    for plane in features.tensor().data().chunks_exact(h * w) {
        let m = plane.iter().sum::<f64>() / hw;
        let var = plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / hw;
        mean.push(m);
        std.push(libm::sqrt(var));
    }
    ChannelStats { mean, std }
}

/// `x: [c, h, w]` -> (centered `[c, h·w]`, mean `[c]`, std `[c]`).
pub fn stats_var(tape: &mut Tape, x: Var) -> Result<(Var, Var, Var)> {
    let (c, h, w) = tape.value(x).dims3()?;
    let flat = tape.reshape(x, &[c, h * w])?;
    let mean = tape.row_mean(flat)?;
    let neg = tape.scale(mean, -1.0);
    let centered = tape.add_col(flat, neg)?;
    let sq = tape.square(centered);
    let var = tape.row_mean(sq)?;
    let std = tape.sqrt(var);
    Ok((centered, mean, std))
}

/// `σ_s · (x − μ_x) / (σ_x + ε) + μ_s` per channel.
pub fn adain_var(tape: &mut Tape, content: Var, style: Var) -> Result<Var> {
    let shape = tape.value(content).shape().to_vec();
    let (cc, _, _) = tape.value(content).dims3()?;
    let (cs, _, _) = tape.value(style).dims3()?;
    if cc != cs {
        return Err(Error::shape("adain channels", cc, cs));
    }
    let (centered, _, std_x) = stats_var(tape, content)?;
    let (_, mean_s, std_s) = stats_var(tape, style)?;
    let denom = tape.add_scalar(std_x, ADAIN_EPS);
    let inv = tape.recip(denom);
    let normed = tape.mul_col(centered, inv)?;
    let scaled = tape.mul_col(normed, std_s)?;
    let out = tape.add_col(scaled, mean_s)?;
    tape.reshape(out, &shape)
}

pub fn adain(content_like: &FeatureMap, style: &FeatureMap) -> Result<FeatureMap> {
    let mut tape = Tape::new();
    let c = tape.constant(content_like.tensor().clone());
    let s = tape.constant(style.tensor().clone());
    let out = adain_var(&mut tape, c, s)?;
    FeatureMap::new(tape.value(out).clone(), content_like.layer_tag())
}

impl ChannelStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn as_tensors(&self) -> (Tensor, Tensor) {
        let c = self.mean.len();
        (
            Tensor::new(&[c], self.mean.clone()).expect("length"),
            Tensor::new(&[c], self.std.clone()).expect("length"),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn two_point_stats() {
        let f = FeatureMap::from_vec(2, 1, 2, vec![1.0, 3.0, 4.0, 4.0]).unwrap();
        let s = channel_stats(&f);
        assert_eq!(s.mean, vec![2.0, 4.0]);
        assert_eq!(s.std, vec![1.0, 0.0]);
    }

    #[test]
    fn constant_channel_takes_style_mean() {
        let c = FeatureMap::from_vec(1, 2, 2, vec![7.0; 4]).unwrap();
        let s = FeatureMap::from_vec(1, 2, 2, vec![0.0, 1.0, 2.0, 5.0]).unwrap();
        let out = adain(&c, &s).unwrap();
        assert!(out.tensor().data().iter().all(|&v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn channel_mismatch() {
        let c = FeatureMap::from_vec(1, 2, 2, vec![1.0; 4]).unwrap();
        let s = FeatureMap::from_vec(2, 2, 2, vec![1.0; 8]).unwrap();
        assert!(matches!(adain(&c, &s), Err(Error::Shape { .. })));
    }
}
