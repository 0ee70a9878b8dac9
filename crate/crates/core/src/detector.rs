//! Contextual classification head.
//!
//! Each proposal is max-pooled to a fixed `G x G x C` grid, its box
//! coordinates normalized by the image size are appended, and two rectified
//! fully connected layers feed a three-way softmax over background, left lung
//! and right lung. The head only classifies; the returned box is the proposal
//! box itself.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{FeatureMap, Image};
use crate::geometry::{iou, BBox};
use crate::model::ModelParams;
use crate::nn::{relu_backward, relu_in_place, softmax, Linear};
use crate::rpn::{propose_with_features, ProposalConfig, RpnError};
use crate::training::GroundTruth;

pub const NUM_CLASSES: usize = 3;
pub const CONTEXT_LEN: usize = 4;

/// Minimum IoU for a proposal to inherit a ground-truth class.
pub const DETECTOR_FG_IOU: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectorError {
    #[error("box {0:?} maps to an empty feature region")]
    DegenerateRoi(BBox),
    #[error("detector expects {expected} inputs, got {got}")]
    InputLength { expected: usize, got: usize },
    #[error(transparent)]
    Rpn(#[from] RpnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OrganClass {
    #[serde(rename = "left-lung")]
    LeftLung,
    #[serde(rename = "right-lung")]
    RightLung,
}

impl OrganClass {
    pub const ALL: [OrganClass; 2] = [OrganClass::LeftLung, OrganClass::RightLung];

    pub fn name(self) -> &'static str {
        match self {
            OrganClass::LeftLung => "left-lung",
            OrganClass::RightLung => "right-lung",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    /// Index in the detector output (0 is background).
    pub fn index(self) -> usize {
        match self {
            OrganClass::LeftLung => 1,
            OrganClass::RightLung => 2,
        }
    }
}

/// Detector training label: background or an organ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DetClass {
    Background,
    Organ(OrganClass),
}

impl DetClass {
    pub fn index(self) -> usize {
        match self {
            DetClass::Background => 0,
            DetClass::Organ(c) => c.index(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    /// Side of the pooling grid.
    pub pool_size: usize,
    /// Whether the normalized box coordinates are appended to the input.
    pub context: bool,
    pub fc1: Linear,
    pub fc2: Linear,
    pub out: Linear,
}

impl DetectorParams {
    pub fn input_len(pool_size: usize, channels: usize, context: bool) -> usize {
        pool_size * pool_size * channels + if context { CONTEXT_LEN } else { 0 }
    }

    pub fn zeros(pool_size: usize, channels: usize, hidden: usize, context: bool) -> Self {
        let n = Self::input_len(pool_size, channels, context);
        Self {
            pool_size,
            context,
            fc1: Linear::zeros(n, hidden),
            fc2: Linear::zeros(hidden, hidden),
            out: Linear::zeros(hidden, NUM_CLASSES),
        }
    }

    pub fn gaussian<R: Rng + ?Sized>(
        pool_size: usize,
        channels: usize,
        hidden: usize,
        context: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let n = Self::input_len(pool_size, channels, context);
        Self {
            pool_size,
            context,
            fc1: Linear::gaussian(n, hidden, std, rng),
            fc2: Linear::gaussian(hidden, hidden, std, rng),
            out: Linear::gaussian(hidden, NUM_CLASSES, std, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            pool_size: self.pool_size,
            context: self.context,
            fc1: self.fc1.zeros_like(),
            fc2: self.fc2.zeros_like(),
            out: self.out.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: OrganClass,
    pub bbox: BBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledRoi {
    /// `G * G * C`, bin-major then channel.
    pub values: Vec<f64>,
    /// Flat feature-map index each value was taken from.
    pub argmax: Vec<usize>,
}

/// Inclusive feature-cell range covered by `[start, start + len)` pixels.
fn cell_range(start: f64, len: f64, stride: f64, cells: usize) -> Option<(usize, usize)> {
    let lo = (start / stride).floor().max(0.0);
    if lo > (cells - 1) as f64 {
        return None;
    }
    let hi = ((start + len) / stride).ceil() - 1.0;
    if hi < 0.0 {
        return None;
    }
    let lo = lo as usize;
    let hi = (hi as usize).clamp(lo, cells - 1);
    Some((lo, hi))
}

/// Start/end (inclusive) of bin `i` of `bins` over `n` cells.
fn bin_span(i: usize, bins: usize, n: usize) -> (usize, usize) {
    let start = i * n / bins;
    let end = ((i + 1) * n).div_ceil(bins) - 1;
    (start, end)
}

pub fn roi_pool(fm: &FeatureMap, bbox: &BBox, pool_size: usize, stride: usize) -> Result<PooledRoi, DetectorError> {
    if bbox.is_degenerate() || fm.width == 0 || fm.height == 0 {
        return Err(DetectorError::DegenerateRoi(*bbox));
    }
    let s = stride as f64;
    let (x0, x1) = cell_range(bbox.x, bbox.w, s, fm.width).ok_or(DetectorError::DegenerateRoi(*bbox))?;
    let (y0, y1) = cell_range(bbox.y, bbox.h, s, fm.height).ok_or(DetectorError::DegenerateRoi(*bbox))?;
    let (nx, ny) = (x1 - x0 + 1, y1 - y0 + 1);
    let c = fm.channels;
    let mut values = Vec::with_capacity(pool_size * pool_size * c);
    let mut argmax = Vec::with_capacity(pool_size * pool_size * c);
    for by in 0..pool_size {
        let (ya, yb) = bin_span(by, pool_size, ny);
        for bx in 0..pool_size {
            let (xa, xb) = bin_span(bx, pool_size, nx);
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut at = 0;
                for gy in y0 + ya..=y0 + yb {
                    for gx in x0 + xa..=x0 + xb {
                        let idx = fm.offset(gx, gy) + ch;
                        if fm.data[idx] > best {
                            best = fm.data[idx];
                            at = idx;
                        }
                    }
                }
                values.push(best);
                argmax.push(at);
            }
        }
    }
    Ok(PooledRoi { values, argmax })
}

/// Route pooled-value gradients back to the cells they were taken from.
pub fn roi_pool_backward(d_pooled: &[f64], roi: &PooledRoi, grad: &mut FeatureMap) {
    for (&d, &idx) in d_pooled.iter().zip(&roi.argmax) {
        grad.data[idx] += d;
    }
}

/// Box coordinates normalized by the image size and clipped to `[0, 1]`.
pub fn context_vector(bbox: &BBox, image_w: f64, image_h: f64) -> [f64; CONTEXT_LEN] {
    [
        (bbox.x / image_w).clamp(0.0, 1.0),
        (bbox.y / image_h).clamp(0.0, 1.0),
        (bbox.w / image_w).clamp(0.0, 1.0),
        (bbox.h / image_h).clamp(0.0, 1.0),
    ]
}

pub fn append_context(pooled: &[f64], bbox: &BBox, image_w: f64, image_h: f64, enabled: bool) -> Vec<f64> {
    let mut v = Vec::with_capacity(pooled.len() + CONTEXT_LEN);
    v.extend_from_slice(pooled);
    if enabled {
        v.extend_from_slice(&context_vector(bbox, image_w, image_h));
    }
    v
}

#[derive(Debug, Clone)]
pub struct DetectorCache {
    input: Vec<f64>,
    h1_pre: Vec<f64>,
    h1: Vec<f64>,
    h2_pre: Vec<f64>,
    h2: Vec<f64>,
    pub probs: [f64; NUM_CLASSES],
}

pub fn detector_forward(input: &[f64], p: &DetectorParams) -> Result<([f64; NUM_CLASSES], DetectorCache), DetectorError> {
    if input.len() != p.fc1.inputs {
        return Err(DetectorError::InputLength {
            expected: p.fc1.inputs,
            got: input.len(),
        });
    }
    let h1_pre = p.fc1.forward(input);
    let mut h1 = h1_pre.clone();
    relu_in_place(&mut h1);
    let h2_pre = p.fc2.forward(&h1);
    let mut h2 = h2_pre.clone();
    relu_in_place(&mut h2);
    let logits = p.out.forward(&h2);
    let sm = softmax(&logits);
    let probs = [sm[0], sm[1], sm[2]];
    Ok((
        probs,
        DetectorCache {
            input: input.to_vec(),
            h1_pre,
            h1,
            h2_pre,
            h2,
            probs,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorBackward {
    pub loss: f64,
    pub params: DetectorParams,
    pub input: Vec<f64>,
}

/// Cross-entropy `-ln p_true` with exact gradients to the parameters and to
/// the input vector.
pub fn detector_loss_and_backward(p: &DetectorParams, true_class: DetClass, cache: &DetectorCache) -> DetectorBackward {
    let mut grads = p.zeros_like();
    let mut dx = vec![0.0; cache.input.len()];
    let loss = detector_loss_accumulate(p, true_class, cache, 1.0, &mut grads, &mut dx);
    DetectorBackward {
        loss,
        params: grads,
        input: dx,
    }
}

/// Like [`detector_loss_and_backward`] but scales the gradient by `weight`
/// and accumulates into existing buffers. Returns the unscaled loss.
pub fn detector_loss_accumulate(
    p: &DetectorParams,
    true_class: DetClass,
    cache: &DetectorCache,
    weight: f64,
    grads: &mut DetectorParams,
    d_input: &mut [f64],
) -> f64 {
    let t = true_class.index();
    let loss = -cache.probs[t].max(f64::MIN_POSITIVE).ln();
    let mut dlogits: Vec<f64> = cache.probs.iter().map(|v| v * weight).collect();
    dlogits[t] -= weight;
    let mut dh2 = vec![0.0; p.fc2.outputs];
    p.out.backward(&cache.h2, &dlogits, &mut grads.out, Some(&mut dh2));
    relu_backward(&cache.h2_pre, &mut dh2);
    let mut dh1 = vec![0.0; p.fc1.outputs];
    p.fc2.backward(&cache.h1, &dh2, &mut grads.fc2, Some(&mut dh1));
    relu_backward(&cache.h1_pre, &mut dh1);
    p.fc1.backward(&cache.input, &dh1, &mut grads.fc1, Some(d_input));
    loss
}

/// Class of the best-overlapping ground truth when that IoU reaches 0.5.
pub fn assign_detector_labels(boxes: &[BBox], gts: &GroundTruth) -> Vec<DetClass> {
    boxes
        .iter()
        .map(|b| {
            let best = gts
                .boxes
                .iter()
                .zip(&gts.labels)
                .map(|(g, &c)| (iou(b, g), c))
                .fold(None, |acc: Option<(f64, OrganClass)>, cur| match acc {
                    Some(a) if a.0 >= cur.0 => Some(a),
                    _ => Some(cur),
                });
            match best {
                Some((v, c)) if v >= DETECTOR_FG_IOU => DetClass::Organ(c),
                _ => DetClass::Background,
            }
        })
        .collect()
}

/// Feature vector of one proposal as the detector sees it.
pub fn roi_features(
    fm: &FeatureMap,
    bbox: &BBox,
    p: &DetectorParams,
    stride: usize,
    image_w: f64,
    image_h: f64,
) -> Result<(Vec<f64>, PooledRoi), DetectorError> {
    let roi = roi_pool(fm, bbox, p.pool_size, stride)?;
    let v = append_context(&roi.values, bbox, image_w, image_h, p.context);
    Ok((v, roi))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectStatus {
    Ok,
    NoProposals,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectOutcome {
    pub detections: Vec<Detection>,
    pub status: DetectStatus,
    pub proposals: usize,
}

/// Run the whole pipeline and keep the most confident proposal per organ.
pub fn detect(img: &Image, params: &ModelParams, cfg: &ProposalConfig) -> Result<DetectOutcome, DetectorError> {
    let (ps, fm) = propose_with_features(img, params, cfg)?;
    let (iw, ih) = (img.width as f64, img.height as f64);
    let mut best: [Option<Detection>; 2] = [None, None];
    let mut scored = 0;
    for prop in &ps.proposals {
        let Ok((v, _)) = roi_features(&fm, &prop.bbox, &params.detector, cfg.anchors.stride, iw, ih) else {
            continue;
        };
        let (probs, _) = detector_forward(&v, &params.detector)?;
        scored += 1;
        for (slot, class) in best.iter_mut().zip(OrganClass::ALL) {
            let confidence = probs[class.index()];
            if slot.map_or(true, |d| confidence > d.confidence) {
                *slot = Some(Detection {
                    class,
                    bbox: prop.bbox,
                    confidence,
                });
            }
        }
    }
    let detections: Vec<Detection> = best.into_iter().flatten().collect();
    Ok(DetectOutcome {
        status: if scored == 0 {
            DetectStatus::NoProposals
        } else {
            DetectStatus::Ok
        },
        detections,
        proposals: ps.len(),
    })
}
