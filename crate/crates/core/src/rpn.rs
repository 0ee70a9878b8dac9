//! Selective-attention proposal head.
//!
//! A 3x3 window of the feature map around every in-region grid position is
//! projected to `D` hidden units and rectified, then mapped to `2k` class
//! logits (background, object per anchor) and `4k` box offsets. Positions
//! outside the attention region are never evaluated, so they produce no
//! proposals and receive no gradient.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchors::{anchors_at, grid_positions, AnchorSpec, AttentionRegion, GridGeometry, GridPos};
use crate::backbone::{BackboneError, FeatureExtractor, FeatureMap, Image};
use crate::geometry::{clip, decode, iou, BBox, RegressionTarget};
use crate::model::ModelParams;
use crate::nn::{relu_backward, relu_in_place, two_way_softmax, Linear};

const WINDOW: usize = 9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RpnError {
    #[error("head predicts {params} anchors per position but the anchor spec has {spec}")]
    AnchorCountMismatch { params: usize, spec: usize },
    #[error("head expects {params} feature channels, feature map has {map}")]
    ChannelMismatch { params: usize, map: usize },
    #[error("upstream gradient has {got} entries for {what}, expected {expected}")]
    GradientShape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpnParams {
    /// `9C -> D` projection of the 3x3 window.
    pub window: Linear,
    /// `D -> 2k` logits, (background, object) per anchor.
    pub cls: Linear,
    /// `D -> 4k` regression offsets.
    pub reg: Linear,
}

impl RpnParams {
    pub fn zeros(channels: usize, hidden: usize, k: usize) -> Self {
        Self {
            window: Linear::zeros(WINDOW * channels, hidden),
            cls: Linear::zeros(hidden, 2 * k),
            reg: Linear::zeros(hidden, 4 * k),
        }
    }

    pub fn gaussian<R: Rng + ?Sized>(channels: usize, hidden: usize, k: usize, std: f64, rng: &mut R) -> Self {
        Self {
            window: Linear::gaussian(WINDOW * channels, hidden, std, rng),
            cls: Linear::gaussian(hidden, 2 * k, std, rng),
            reg: Linear::gaussian(hidden, 4 * k, std, rng),
        }
    }

    pub fn k(&self) -> usize {
        self.cls.outputs / 2
    }

    pub fn channels(&self) -> usize {
        self.window.inputs / WINDOW
    }

    pub fn hidden(&self) -> usize {
        self.window.outputs
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            window: self.window.zeros_like(),
            cls: self.cls.zeros_like(),
            reg: self.reg.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    /// Decoded and clipped box; degenerate if the decoded box left the image.
    pub bbox: BBox,
    /// Object probability from the per-anchor two-way softmax.
    pub score: f64,
    /// Raw regression output.
    pub t: RegressionTarget,
    pub anchor: BBox,
    /// Index into the pre-filter proposal list (`position_index * k + shape`).
    pub anchor_index: usize,
    pub position: GridPos,
    pub shape_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub proposals: Vec<Proposal>,
    pub geometry: GridGeometry,
    pub region: AttentionRegion,
    pub spec: AnchorSpec,
    pub image_w: f64,
    pub image_h: f64,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.proposals.iter().map(|p| p.bbox).collect()
    }

    fn with_proposals(&self, proposals: Vec<Proposal>) -> ProposalSet {
        ProposalSet {
            proposals,
            geometry: self.geometry,
            region: self.region,
            spec: self.spec.clone(),
            image_w: self.image_w,
            image_h: self.image_h,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RpnCache {
    pub positions: Vec<GridPos>,
    pub k: usize,
    feature_shape: (usize, usize, usize),
    windows: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    /// `2k` per position.
    pub logits: Vec<f64>,
}

/// Upstream gradients on the head outputs, laid out like the forward pass:
/// `2k` logits and `4k` offsets per evaluated position.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnOutputGrad {
    pub logits: Vec<f64>,
    pub offsets: Vec<f64>,
}

impl RpnOutputGrad {
    pub fn zeros(positions: usize, k: usize) -> Self {
        Self {
            logits: vec![0.0; positions * 2 * k],
            offsets: vec![0.0; positions * 4 * k],
        }
    }

    /// Route a gradient on an object probability to the two logits behind it.
    pub fn add_score_grad(&mut self, anchor_index: usize, score: f64, d_score: f64) {
        let g = d_score * score * (1.0 - score);
        self.logits[2 * anchor_index] -= g;
        self.logits[2 * anchor_index + 1] += g;
    }

    pub fn add_offset_grad(&mut self, anchor_index: usize, d_t: [f64; 4]) {
        for (dst, v) in self.offsets[4 * anchor_index..4 * anchor_index + 4].iter_mut().zip(d_t) {
            *dst += v;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpnGrads {
    pub params: RpnParams,
    pub features: FeatureMap,
}

fn gather_window(fm: &FeatureMap, pos: GridPos, out: &mut [f64]) {
    let c = fm.channels;
    for (slot, (dy, dx)) in (-1i64..=1).flat_map(|dy| (-1i64..=1).map(move |dx| (dy, dx))).enumerate() {
        let dst = &mut out[slot * c..(slot + 1) * c];
        let x = pos.gx as i64 + dx;
        let y = pos.gy as i64 + dy;
        if x < 0 || y < 0 || x >= fm.width as i64 || y >= fm.height as i64 {
            dst.fill(0.0);
        } else {
            dst.copy_from_slice(fm.cell(x as usize, y as usize));
        }
    }
}

fn scatter_window(grad: &mut FeatureMap, pos: GridPos, src: &[f64]) {
    let c = grad.channels;
    for (slot, (dy, dx)) in (-1i64..=1).flat_map(|dy| (-1i64..=1).map(move |dx| (dy, dx))).enumerate() {
        let x = pos.gx as i64 + dx;
        let y = pos.gy as i64 + dy;
        if x < 0 || y < 0 || x >= grad.width as i64 || y >= grad.height as i64 {
            continue;
        }
        let o = grad.offset(x as usize, y as usize);
        for (d, s) in grad.data[o..o + c].iter_mut().zip(&src[slot * c..(slot + 1) * c]) {
            *d += s;
        }
    }
}

pub fn rpn_forward(
    fm: &FeatureMap,
    params: &RpnParams,
    region: &AttentionRegion,
    spec: &AnchorSpec,
    image_w: f64,
    image_h: f64,
) -> Result<(ProposalSet, RpnCache), RpnError> {
    let k = spec.k();
    if params.k() != k {
        return Err(RpnError::AnchorCountMismatch { params: params.k(), spec: k });
    }
    if params.channels() != fm.channels {
        return Err(RpnError::ChannelMismatch {
            params: params.channels(),
            map: fm.channels,
        });
    }
    let geometry = GridGeometry {
        width: fm.width,
        height: fm.height,
    };
    let positions = grid_positions(geometry, region).positions;
    let anchors = anchors_at(&positions, spec, image_w, image_h);
    let n = positions.len();
    let d = params.hidden();
    let wlen = WINDOW * fm.channels;

    let mut windows = vec![0.0; n * wlen];
    let mut hidden_pre = vec![0.0; n * d];
    let mut logits = vec![0.0; n * 2 * k];
    let mut offsets = vec![0.0; n * 4 * k];
    for (i, &pos) in positions.iter().enumerate() {
        let win = &mut windows[i * wlen..(i + 1) * wlen];
        gather_window(fm, pos, win);
        params.window.forward_into(win, &mut hidden_pre[i * d..(i + 1) * d]);
    }
    let mut hidden = hidden_pre.clone();
    relu_in_place(&mut hidden);
    for i in 0..n {
        let h = &hidden[i * d..(i + 1) * d];
        params.cls.forward_into(h, &mut logits[i * 2 * k..(i + 1) * 2 * k]);
        params.reg.forward_into(h, &mut offsets[i * 4 * k..(i + 1) * 4 * k]);
    }

    let proposals = anchors
        .iter()
        .enumerate()
        .map(|(idx, a)| {
            let score = two_way_softmax(logits[2 * idx], logits[2 * idx + 1]);
            let t = RegressionTarget::from_slice(&offsets[4 * idx..4 * idx + 4]);
            Proposal {
                bbox: clip(&decode(&a.bbox, &t), image_w, image_h),
                score,
                t,
                anchor: a.bbox,
                anchor_index: idx,
                position: a.position,
                shape_index: a.shape_index,
            }
        })
        .collect();

    Ok((
        ProposalSet {
            proposals,
            geometry,
            region: *region,
            spec: spec.clone(),
            image_w,
            image_h,
        },
        RpnCache {
            positions,
            k,
            feature_shape: fm.shape(),
            windows,
            hidden_pre,
            hidden,
            logits,
        },
    ))
}

pub fn rpn_backward(params: &RpnParams, grad: &RpnOutputGrad, cache: &RpnCache) -> Result<RpnGrads, RpnError> {
    let n = cache.positions.len();
    let k = cache.k;
    for (what, expected, got) in [
        ("logits", n * 2 * k, grad.logits.len()),
        ("offsets", n * 4 * k, grad.offsets.len()),
    ] {
        if expected != got {
            return Err(RpnError::GradientShape { what, expected, got });
        }
    }
    let (fw, fh, fc) = cache.feature_shape;
    let d = params.hidden();
    let wlen = WINDOW * fc;
    let mut out = RpnGrads {
        params: params.zeros_like(),
        features: FeatureMap::zeros(fw, fh, fc),
    };
    let mut dh = vec![0.0; d];
    let mut dwin = vec![0.0; wlen];
    for (i, &pos) in cache.positions.iter().enumerate() {
        let dl = &grad.logits[i * 2 * k..(i + 1) * 2 * k];
        let dt = &grad.offsets[i * 4 * k..(i + 1) * 4 * k];
        if dl.iter().chain(dt).all(|&v| v == 0.0) {
            continue;
        }
        let h = &cache.hidden[i * d..(i + 1) * d];
        dh.fill(0.0);
        params.cls.backward(h, dl, &mut out.params.cls, Some(&mut dh));
        params.reg.backward(h, dt, &mut out.params.reg, Some(&mut dh));
        relu_backward(&cache.hidden_pre[i * d..(i + 1) * d], &mut dh);
        dwin.fill(0.0);
        let win = &cache.windows[i * wlen..(i + 1) * wlen];
        params.window.backward(win, &dh, &mut out.params.window, Some(&mut dwin));
        scatter_window(&mut out.features, pos, &dwin);
    }
    Ok(out)
}

fn ranking(a: &Proposal, b: &Proposal) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.position.cmp(&b.position))
        .then(a.anchor_index.cmp(&b.anchor_index))
}

/// Greedy non-maximum suppression by descending score. A proposal is dropped
/// when its IoU with an already kept one exceeds `iou_threshold`. Degenerate
/// boxes are dropped up front.
pub fn nms(ps: &ProposalSet, iou_threshold: f64) -> ProposalSet {
    let mut order: Vec<&Proposal> = ps.proposals.iter().filter(|p| !p.bbox.is_degenerate()).collect();
    order.sort_by(|a, b| ranking(a, b));
    let mut kept: Vec<Proposal> = Vec::new();
    for p in order {
        if kept.iter().all(|q| iou(&q.bbox, &p.bbox) <= iou_threshold) {
            kept.push(*p);
        }
    }
    ps.with_proposals(kept)
}

/// The `n` highest-scoring proposals in ranking order.
pub fn select_top(ps: &ProposalSet, n: usize) -> ProposalSet {
    let mut v = ps.proposals.clone();
    v.sort_by(ranking);
    v.truncate(n);
    ps.with_proposals(v)
}

/// Settings of the proposal stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalConfig {
    pub region: AttentionRegion,
    pub anchors: AnchorSpec,
    pub nms_threshold: f64,
    pub top_n: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            region: AttentionRegion::default(),
            anchors: AnchorSpec::default(),
            nms_threshold: 0.7,
            top_n: 154,
        }
    }
}

impl ProposalConfig {
    /// Full-grid comparison settings: identity region, six anchors, 300 proposals.
    pub fn baseline() -> Self {
        Self {
            region: AttentionRegion::IDENTITY,
            anchors: AnchorSpec::baseline(),
            nms_threshold: 0.7,
            top_n: 300,
        }
    }
}

/// Proposals after NMS and top-N selection, plus the feature map they came from.
pub fn propose_with_features(
    img: &Image,
    params: &ModelParams,
    cfg: &ProposalConfig,
) -> Result<(ProposalSet, FeatureMap), RpnError> {
    let (fm, _) = params.backbone.forward(img)?;
    let (raw, _) = rpn_forward(&fm, &params.rpn, &cfg.region, &cfg.anchors, img.width as f64, img.height as f64)?;
    let kept = select_top(&nms(&raw, cfg.nms_threshold), cfg.top_n);
    Ok((kept, fm))
}

pub fn propose(img: &Image, params: &ModelParams, cfg: &ProposalConfig) -> Result<ProposalSet, RpnError> {
    propose_with_features(img, params, cfg).map(|(p, _)| p)
}
