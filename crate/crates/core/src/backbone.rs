//! Feature extraction at stride 16.
//!
//! The reference extractor projects each non-overlapping 16x16 patch to `C`
//! channels and rectifies. Any extractor implementing [`FeatureExtractor`] can
//! stand in for it as long as it reports its stride.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{relu_backward, Linear};

/// Patch side of the reference extractor, equal to its stride.
pub const PATCH: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackboneError {
    #[error("image {width}x{height} is smaller than one {PATCH}x{PATCH} patch")]
    ImageTooSmall { width: usize, height: usize },
    #[error("image buffer has {got} values, expected {expected}")]
    BufferLength { expected: usize, got: usize },
    #[error("image intensity at index {index} is {value}, expected a finite value in [0, 1]")]
    Intensity { index: usize, value: f64 },
    #[error("gradient shape {got:?} does not match feature map {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
}

/// Grayscale image with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, BackboneError> {
        if data.len() != width * height {
            return Err(BackboneError::BufferLength {
                expected: width * height,
                got: data.len(),
            });
        }
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            return Err(BackboneError::Intensity { index, value });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// `W x H x C` activations, stored as `[(gy * W + gx) * C + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    #[inline]
    pub fn offset(&self, gx: usize, gy: usize) -> usize {
        (gy * self.width + gx) * self.channels
    }

    pub fn cell(&self, gx: usize, gy: usize) -> &[f64] {
        let o = self.offset(gx, gy);
        &self.data[o..o + self.channels]
    }
}

/// A trainable feature extractor with a fixed stride.
pub trait FeatureExtractor {
    type Cache;
    type Grad;

    fn stride(&self) -> usize;

    /// Feature-grid size produced for an image of the given size.
    fn output_size(&self, width: usize, height: usize) -> (usize, usize) {
        (width / self.stride(), height / self.stride())
    }

    fn forward(&self, img: &Image) -> Result<(FeatureMap, Self::Cache), BackboneError>;

    fn backward(&self, grad: &FeatureMap, cache: &Self::Cache) -> Result<Self::Grad, BackboneError>;
}

/// Parameters of the reference patch-projection extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneParams {
    /// `PATCH * PATCH -> C`
    pub proj: Linear,
}

impl BackboneParams {
    pub fn zeros(channels: usize) -> Self {
        Self {
            proj: Linear::zeros(PATCH * PATCH, channels),
        }
    }

    pub fn gaussian<R: Rng + ?Sized>(channels: usize, std: f64, rng: &mut R) -> Self {
        Self {
            proj: Linear::gaussian(PATCH * PATCH, channels, std, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.proj.outputs
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            proj: self.proj.zeros_like(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BackboneCache {
    pub width: usize,
    pub height: usize,
    /// Flattened patches, one row of `PATCH * PATCH` per cell.
    pub patches: Vec<f64>,
    /// Pre-rectifier activations in feature-map layout.
    pub pre: Vec<f64>,
}

fn extract_patches(img: &Image, gw: usize, gh: usize) -> Vec<f64> {
    let mut patches = Vec::with_capacity(gw * gh * PATCH * PATCH);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..PATCH {
                let row = (gy * PATCH + py) * img.width + gx * PATCH;
                patches.extend_from_slice(&img.data[row..row + PATCH]);
            }
        }
    }
    patches
}

impl FeatureExtractor for BackboneParams {
    type Cache = BackboneCache;
    type Grad = BackboneParams;

    fn stride(&self) -> usize {
        PATCH
    }

    fn forward(&self, img: &Image) -> Result<(FeatureMap, BackboneCache), BackboneError> {
        if img.width < PATCH || img.height < PATCH {
            return Err(BackboneError::ImageTooSmall {
                width: img.width,
                height: img.height,
            });
        }
        let (gw, gh) = self.output_size(img.width, img.height);
        let c = self.channels();
        let patches = extract_patches(img, gw, gh);
        let mut pre = vec![0.0; gw * gh * c];
        for (patch, out) in patches.chunks_exact(PATCH * PATCH).zip(pre.chunks_exact_mut(c)) {
            self.proj.forward_into(patch, out);
        }
        let data = pre.iter().map(|v| v.max(0.0)).collect();
        Ok((
            FeatureMap {
                width: gw,
                height: gh,
                channels: c,
                data,
            },
            BackboneCache {
                width: gw,
                height: gh,
                patches,
                pre,
            },
        ))
    }

    fn backward(&self, grad: &FeatureMap, cache: &BackboneCache) -> Result<BackboneParams, BackboneError> {
        let c = self.channels();
        let expected = (cache.width, cache.height, c);
        if grad.shape() != expected {
            return Err(BackboneError::ShapeMismatch {
                expected,
                got: grad.shape(),
            });
        }
        let mut out = self.zeros_like();
        let mut dpre = grad.data.clone();
        relu_backward(&cache.pre, &mut dpre);
        for (patch, d) in cache.patches.chunks_exact(PATCH * PATCH).zip(dpre.chunks_exact(c)) {
            self.proj.backward(patch, d, &mut out.proj, None);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(w, h, (0..w * h).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn zero_params_give_zero_map() {
        let (fm, _) = BackboneParams::zeros(8).forward(&random_image(48, 32, 1)).unwrap();
        assert_eq!(fm.shape(), (3, 2, 8));
        assert!(fm.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_uses_floor() {
        let p = BackboneParams::zeros(4);
        for (w, h) in [(320, 320), (16, 16), (47, 90), (33, 17)] {
            let (fm, _) = p.forward(&Image::filled(w, h, 0.5)).unwrap();
            assert_eq!((fm.width, fm.height), (w / 16, h / 16));
        }
        assert_eq!(
            p.forward(&Image::filled(15, 40, 0.5)).unwrap_err(),
            BackboneError::ImageTooSmall { width: 15, height: 40 }
        );
    }

    #[test]
    fn pre_activations_are_linear_without_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = BackboneParams::gaussian(6, 0.1, &mut rng);
        let img = random_image(48, 48, 2);
        let doubled = Image {
            data: img.data.iter().map(|v| v * 2.0).collect(),
            ..img.clone()
        };
        let (_, a) = p.forward(&img).unwrap();
        let (_, b) = p.forward(&doubled).unwrap();
        for (x, y) in a.pre.iter().zip(&b.pre) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn image_validation() {
        assert!(Image::new(2, 2, vec![0.0; 3]).is_err());
        assert!(matches!(
            Image::new(2, 1, vec![0.0, 1.5]),
            Err(BackboneError::Intensity { index: 1, .. })
        ));
    }

    #[test]
    fn backward_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = BackboneParams::gaussian(3, 0.05, &mut rng);
        p.proj.bias = vec![0.05, -0.02, 0.0];
        let img = random_image(48, 48, 11);
        let (fm, cache) = p.forward(&img).unwrap();

        let zero = p.backward(&FeatureMap::zeros(3, 3, 3), &cache).unwrap();
        assert!(zero.proj.weight.iter().chain(&zero.proj.bias).all(|&v| v == 0.0));

        let upstream: Vec<f64> = (0..fm.data.len()).map(|_| rng.gen::<f64>() - 0.5).collect();
        let g = FeatureMap {
            data: upstream.clone(),
            ..fm.clone()
        };
        let grads = p.backward(&g, &cache).unwrap();
        for ch in 0..3 {
            let expected: f64 = (0..9)
                .map(|cell| cell * 3 + ch)
                .filter(|&i| cache.pre[i] > 0.0)
                .map(|i| upstream[i])
                .sum();
            assert!((grads.proj.bias[ch] - expected).abs() < 1e-12);
        }

        let loss = |p: &BackboneParams| -> f64 {
            let (fm, _) = p.forward(&img).unwrap();
            fm.data.iter().zip(&upstream).map(|(a, b)| a * b).sum()
        };
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for i in (0..p.proj.weight.len()).step_by(7) {
            let mut plus = p.clone();
            plus.proj.weight[i] += eps;
            let mut minus = p.clone();
            minus.proj.weight[i] -= eps;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            let an = grads.proj.weight[i];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-8));
        }
        assert!(worst <= 1e-4, "relative error {worst}");

        let bad = FeatureMap::zeros(2, 3, 3);
        assert!(matches!(p.backward(&bad, &cache), Err(BackboneError::ShapeMismatch { .. })));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = BackboneParams::gaussian(4, 0.1, &mut rng);
        let img = random_image(64, 48, 3);
        assert_eq!(p.forward(&img).unwrap().0, p.forward(&img).unwrap().0);
    }
}
