//! Dense row-major `f64` tensors and the two typed wrappers that flow between
//! pipeline stages: [`FeatureMap`] (`c × h × w` activations) and
//! [`ImageTensor`] (`3 × H × W` RGB in `[0, 1]`).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub(crate) struct ShapeFmt<'a>(pub &'a [usize]);

impl fmt::Display for ShapeFmt<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, ")")
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor construction",
                format!("{} elements for {}", n, ShapeFmt(shape)),
                data.len(),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{} elements", self.data.len()),
                ShapeFmt(shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(Error::shape("rank-2 tensor", "2 dims", ShapeFmt(&self.shape))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::shape("rank-3 tensor", "3 dims", ShapeFmt(&self.shape))),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Largest absolute elementwise difference; `f64::INFINITY` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Dense activation grid `(c, h, w)` tagged with the layer that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    data: Tensor,
    layer_tag: String,
}

impl FeatureMap {
    pub fn new(data: Tensor, layer_tag: impl Into<String>) -> Result<Self> {
        let (c, h, w) = data.dims3()?;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::shape("feature map", "c, h, w >= 1", ShapeFmt(data.shape())));
        }
        if !data.all_finite() {
            return Err(Error::NonFinite(format!("feature map `{}`", layer_tag.into())));
        }
        Ok(Self {
            data,
            layer_tag: layer_tag.into(),
        })
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::new(&[c, h, w], data)?, "raw")
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn layer_tag(&self) -> &str {
        &self.layer_tag
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels(), self.height(), self.width())
    }

    pub fn get(&self, ch: usize, row: usize, col: usize) -> f64 {
        let (_, h, w) = self.dims();
        self.data.data()[(ch * h + row) * w + col]
    }
}

/// RGB image, `(3, H, W)`, every value finite and inside `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Tensor,
}

impl ImageTensor {
    pub fn new(data: Tensor) -> Result<Self> {
        let (c, h, w) = data.dims3()?;
        if c != 3 {
            return Err(Error::shape("image", "3 channels", c));
        }
        if h == 0 || w == 0 {
            return Err(Error::shape("image", "non-empty spatial dims", ShapeFmt(data.shape())));
        }
        if data.data().iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Parameter(String::from(
                "image values must be finite and within [0, 1]",
            )));
        }
        Ok(Self { data })
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::new(&[3, height, width], data)?)
    }

    /// Builds an image by clamping every value into `[0, 1]`.
    pub fn clamped(data: Tensor) -> Result<Self> {
        Self::new(data.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// Root of the mean squared pixel difference.
    pub fn l2_distance(&self, other: &ImageTensor) -> f64 {
        if self.data.shape() != other.data.shape() {
            return f64::INFINITY;
        }
        let ss: f64 = self
            .data
            .data()
            .iter()
            .zip(other.data.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        libm::sqrt(ss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_element_count() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(Tensor::new(&[2, 3], vec![0.0; 5]), Err(Error::Shape { .. })));
    }

    #[test]
    fn image_rejects_out_of_range() {
        let t = Tensor::full(&[3, 2, 2], 1.5);
        assert!(ImageTensor::new(t.clone()).is_err());
        let img = ImageTensor::clamped(t).unwrap();
        assert!(img.tensor().data().iter().all(|&v| v == 1.0));
        assert!(ImageTensor::new(Tensor::zeros(&[1, 2, 2])).is_err());
    }

    #[test]
    fn feature_map_rejects_nan() {
        let t = Tensor::new(&[1, 1, 2], vec![0.0, f64::NAN]).unwrap();
        assert!(matches!(FeatureMap::new(t, "x"), Err(Error::NonFinite(_))));
    }
}
