//! The full set of learnable tensors and their layout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneParams;
use crate::detector::DetectorParams;
use crate::nn::Linear;
use crate::rpn::RpnParams;

/// Structural sizes that determine every tensor shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    /// Backbone output channels `C`.
    pub channels: usize,
    /// Proposal-head hidden width `D`.
    pub rpn_hidden: usize,
    /// Anchors per position `k`.
    pub anchors_per_position: usize,
    /// ROI pooling grid side `G`.
    pub pool_size: usize,
    pub detector_hidden: usize,
    /// Append normalized proposal coordinates to the detector input.
    pub context: bool,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            channels: 32,
            rpn_hidden: 64,
            anchors_per_position: 4,
            pool_size: 7,
            detector_hidden: 128,
            context: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub backbone: BackboneParams,
    pub rpn: RpnParams,
    pub detector: DetectorParams,
}

impl ModelParams {
    pub fn zeros(shape: &ModelShape) -> Self {
        Self {
            backbone: BackboneParams::zeros(shape.channels),
            rpn: RpnParams::zeros(shape.channels, shape.rpn_hidden, shape.anchors_per_position),
            detector: DetectorParams::zeros(shape.pool_size, shape.channels, shape.detector_hidden, shape.context),
        }
    }

    /// Weights from `N(0, std^2)`, biases zero. Tensors are drawn in a fixed
    /// order so a seed determines the whole model.
    pub fn gaussian<R: Rng + ?Sized>(shape: &ModelShape, std: f64, rng: &mut R) -> Self {
        Self {
            backbone: BackboneParams::gaussian(shape.channels, std, rng),
            rpn: RpnParams::gaussian(shape.channels, shape.rpn_hidden, shape.anchors_per_position, std, rng),
            detector: DetectorParams::gaussian(
                shape.pool_size,
                shape.channels,
                shape.detector_hidden,
                shape.context,
                std,
                rng,
            ),
        }
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            channels: self.backbone.channels(),
            rpn_hidden: self.rpn.hidden(),
            anchors_per_position: self.rpn.k(),
            pool_size: self.detector.pool_size,
            detector_hidden: self.detector.fc1.outputs,
            context: self.detector.context,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape())
    }

    fn layers(&self) -> [(&'static str, &Linear); 7] {
        [
            ("backbone.proj", &self.backbone.proj),
            ("rpn.window", &self.rpn.window),
            ("rpn.cls", &self.rpn.cls),
            ("rpn.reg", &self.rpn.reg),
            ("detector.fc1", &self.detector.fc1),
            ("detector.fc2", &self.detector.fc2),
            ("detector.out", &self.detector.out),
        ]
    }

    fn layers_mut(&mut self) -> [&mut Linear; 7] {
        [
            &mut self.backbone.proj,
            &mut self.rpn.window,
            &mut self.rpn.cls,
            &mut self.rpn.reg,
            &mut self.detector.fc1,
            &mut self.detector.fc2,
            &mut self.detector.out,
        ]
    }

    /// Every tensor as `(name, shape, values)`, in a stable order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        self.layers()
            .into_iter()
            .flat_map(|(name, l)| {
                [
                    (format!("{name}.weight"), vec![l.outputs, l.inputs], l.weight.as_slice()),
                    (format!("{name}.bias"), vec![l.outputs], l.bias.as_slice()),
                ]
            })
            .collect()
    }

    /// Mutable views in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    /// Element-wise `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &ModelParams) {
        let src: Vec<&[f64]> = other.tensors().into_iter().map(|t| t.2).collect();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.2.iter().all(|v| v.is_finite()))
    }
}
