//! Box Dice evaluation, the rank-sum test, and the proposal benchmark.

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::anchors::grid_positions;
use crate::backbone::{FeatureExtractor, Image};
use crate::detector::{detect, detector_forward, roi_features, Detection, DetectorError, OrganClass};
use crate::geometry::dice;
use crate::model::ModelParams;
use crate::rpn::{nms, rpn_forward, select_top, ProposalConfig};
use crate::synthdata::Sample;
use crate::training::GroundTruth;

/// Pooled sample size up to which the rank-sum p-value is enumerated exactly.
pub const EXACT_MAX_N: usize = 12;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("rank-sum test needs at least one value in each sample")]
    EmptySample,
    #[error("benchmark needs at least one repetition")]
    NoRepetitions,
    #[error("sample {id}: {source}")]
    Detector {
        id: String,
        #[source]
        source: DetectorError,
    },
}

/// Anything that maps an image to organ detections.
pub trait DetectionModel {
    fn detect(&self, id: &str, image: &Image) -> Result<Vec<Detection>, DetectorError>;
}

/// Trained parameters plus the proposal settings they are run with.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub params: ModelParams,
    pub proposal: ProposalConfig,
}

impl DetectionModel for Pipeline {
    fn detect(&self, _id: &str, image: &Image) -> Result<Vec<Detection>, DetectorError> {
        detect(image, &self.params, &self.proposal).map(|o| o.detections)
    }
}

/// Returns the stored ground truth for known ids and nothing otherwise.
#[derive(Debug, Clone, Default)]
pub struct OracleModel {
    pub truth: HashMap<String, GroundTruth>,
}

impl OracleModel {
    pub fn from_samples(samples: &[Sample]) -> Self {
        Self {
            truth: samples.iter().map(|s| (s.id.clone(), s.gts.clone())).collect(),
        }
    }
}

impl DetectionModel for OracleModel {
    fn detect(&self, id: &str, _image: &Image) -> Result<Vec<Detection>, DetectorError> {
        Ok(self
            .truth
            .get(id)
            .map(|g| {
                g.boxes
                    .iter()
                    .zip(&g.labels)
                    .map(|(&bbox, &class)| Detection {
                        class,
                        bbox,
                        confidence: 1.0,
                    })
                    .collect()
            })
            .unwrap_or_default())
    }
}

/// Never detects anything.
#[derive(Debug, Clone, Copy, Default)]
pub struct EmptyModel;

impl DetectionModel for EmptyModel {
    fn detect(&self, _id: &str, _image: &Image) -> Result<Vec<Detection>, DetectorError> {
        Ok(Vec::new())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: OrganClass,
    pub mean: f64,
    pub std: f64,
    pub misses: usize,
    /// One value per image, dataset order.
    pub dice: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDice {
    pub id: String,
    /// Mean over the classes present in the image's ground truth.
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    /// Over every (image, class) pair.
    pub mean: f64,
    pub std: f64,
    pub misses: usize,
    pub per_class: Vec<ClassReport>,
    pub per_image: Vec<ImageDice>,
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Dice of the most confident detection of each ground-truth class, 0 when
/// the class was not detected.
pub fn evaluate<M: DetectionModel + ?Sized>(model: &M, dataset: &[Sample]) -> Result<EvalReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let mut per_class: Vec<(Vec<f64>, usize)> = vec![(Vec::new(), 0); OrganClass::ALL.len()];
    let mut per_image = Vec::with_capacity(dataset.len());
    let mut all = Vec::new();
    for s in dataset {
        let dets = model.detect(&s.id, &s.image).map_err(|source| EvalError::Detector {
            id: s.id.clone(),
            source,
        })?;
        let mut image_scores = Vec::new();
        for (gt, &class) in s.gts.boxes.iter().zip(&s.gts.labels) {
            let best = dets
                .iter()
                .filter(|d| d.class == class)
                .max_by(|a, b| a.confidence.total_cmp(&b.confidence));
            let slot = &mut per_class[class.index() - 1];
            let d = match best {
                Some(det) => dice(&det.bbox, gt),
                None => {
                    slot.1 += 1;
                    0.0
                }
            };
            slot.0.push(d);
            image_scores.push(d);
            all.push(d);
        }
        per_image.push(ImageDice {
            id: s.id.clone(),
            dice: mean_std(&image_scores).0,
        });
    }
    let (mean, std) = mean_std(&all);
    let per_class: Vec<ClassReport> = OrganClass::ALL
        .into_iter()
        .zip(per_class)
        .map(|(class, (dice, misses))| {
            let (mean, std) = mean_std(&dice);
            ClassReport {
                class,
                mean,
                std,
                misses,
                dice,
            }
        })
        .collect();
    Ok(EvalReport {
        samples: dataset.len(),
        mean,
        std,
        misses: per_class.iter().map(|c| c.misses).sum(),
        per_class,
        per_image,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankSumMethod {
    Exact,
    Normal,
    /// Every value identical; p is 1 by convention.
    AllTied,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankSum {
    /// Mann-Whitney U of the first sample.
    pub u: f64,
    pub p: f64,
    pub method: RankSumMethod,
}

/// Midranks (1-based) of the pooled values and the tie correction
/// `sum(t^3 - t)` over tie groups.
fn midranks(pooled: &[f64]) -> (Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
    let mut ranks = vec![0.0; pooled.len()];
    let mut ties = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        i = j + 1;
    }
    (ranks, ties)
}

fn u_statistic(ranks_a: f64, na: usize) -> f64 {
    ranks_a - (na * (na + 1)) as f64 / 2.0
}

fn check(a: &[f64], b: &[f64]) -> Result<(), EvalError> {
    if a.is_empty() || b.is_empty() {
        Err(EvalError::EmptySample)
    } else {
        Ok(())
    }
}

/// Two-sided p-value by enumerating every assignment of the pooled midranks
/// to the first sample. Cost is `2^(|a|+|b|)`.
pub fn rank_sum_exact(a: &[f64], b: &[f64]) -> Result<RankSum, EvalError> {
    check(a, b)?;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = pooled.len();
    assert!(n <= 24, "exact enumeration limited to 24 values");
    let (ranks, _) = midranks(&pooled);
    let na = a.len();
    let mean = (na * b.len()) as f64 / 2.0;
    let u = u_statistic(ranks[..na].iter().sum(), na);
    let observed = (u - mean).abs();
    let (mut hits, mut total) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != na {
            continue;
        }
        let r: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        total += 1;
        // Midranks are multiples of 0.5, so sums compare exactly.
        if (u_statistic(r, na) - mean).abs() >= observed - 1e-9 {
            hits += 1;
        }
    }
    Ok(RankSum {
        u,
        p: hits as f64 / total as f64,
        method: RankSumMethod::Exact,
    })
}

/// Normal approximation with tie-corrected variance and continuity correction.
pub fn rank_sum_normal(a: &[f64], b: &[f64]) -> Result<RankSum, EvalError> {
    check(a, b)?;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let n = na + nb;
    let u = u_statistic(ranks[..a.len()].iter().sum(), a.len());
    let var = na * nb / 12.0 * ((n + 1.0) - if n > 1.0 { ties / (n * (n - 1.0)) } else { 0.0 });
    if var <= 0.0 {
        return Ok(RankSum {
            u,
            p: 1.0,
            method: RankSumMethod::AllTied,
        });
    }
    let z = (((u - na * nb / 2.0).abs() - 0.5).max(0.0)) / var.sqrt();
    let phi = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(RankSum {
        u,
        p: (2.0 * (1.0 - phi.cdf(z))).min(1.0),
        method: RankSumMethod::Normal,
    })
}

/// Wilcoxon rank-sum test: exact for small pooled samples, normal otherwise.
pub fn wilcoxon_rank_sum(a: &[f64], b: &[f64]) -> Result<RankSum, EvalError> {
    check(a, b)?;
    let first = a[0];
    if a.iter().chain(b).all(|&v| v == first) {
        return Ok(RankSum {
            u: (a.len() * b.len()) as f64 / 2.0,
            p: 1.0,
            method: RankSumMethod::AllTied,
        });
    }
    if a.len() + b.len() <= EXACT_MAX_N {
        rank_sum_exact(a, b)
    } else {
        rank_sum_normal(a, b)
    }
}

/// One configuration to benchmark.
#[derive(Debug, Clone)]
pub struct BenchConfig<'a> {
    pub name: String,
    pub params: &'a ModelParams,
    pub proposal: ProposalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: String,
    pub images: usize,
    /// Sliding-window positions evaluated, summed over images.
    pub positions: usize,
    /// Anchors scored, summed over images.
    pub anchors: usize,
    /// Proposals kept after NMS and top-N, summed over images.
    pub proposals: usize,
    pub dice_mean: f64,
    pub dice_std: f64,
    /// Median over repetitions of the per-pass stage totals.
    pub t_propose_ms: f64,
    pub t_nms_ms: f64,
    pub t_detect_ms: f64,
    #[serde(skip)]
    pub per_image_dice: Vec<f64>,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str =
        "config,positions,anchors,proposals,dice_mean,dice_std,t_propose_ms,t_nms_ms,t_detect_ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{:.3},{:.3},{:.3}",
            self.config,
            self.positions,
            self.anchors,
            self.proposals,
            self.dice_mean,
            self.dice_std,
            self.t_propose_ms,
            self.t_nms_ms,
            self.t_detect_ms
        )
    }
}

pub fn to_csv(reports: &[BenchReport]) -> String {
    let mut out = String::from(BenchReport::CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Count-derived reductions of `restricted` relative to `baseline`, plus the
/// rank-sum test between their per-image Dice lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchComparison {
    pub restricted: String,
    pub baseline: String,
    pub position_reduction: f64,
    pub anchor_reduction: f64,
    pub proposal_reduction: f64,
    pub dice_difference: f64,
    pub rank_sum: Option<RankSum>,
}

fn reduction(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        1.0 - a as f64 / b as f64
    }
}

pub fn compare(restricted: &BenchReport, baseline: &BenchReport) -> BenchComparison {
    BenchComparison {
        restricted: restricted.config.clone(),
        baseline: baseline.config.clone(),
        position_reduction: reduction(restricted.positions, baseline.positions),
        anchor_reduction: reduction(restricted.anchors, baseline.anchors),
        proposal_reduction: reduction(restricted.proposals, baseline.proposals),
        dice_difference: restricted.dice_mean - baseline.dice_mean,
        rank_sum: wilcoxon_rank_sum(&restricted.per_image_dice, &baseline.per_image_dice).ok(),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Default)]
struct PassStats {
    positions: usize,
    anchors: usize,
    proposals: usize,
    propose: f64,
    nms: f64,
    detect: f64,
}

fn bench_pass(cfg: &BenchConfig, images: &[Sample]) -> Result<PassStats, EvalError> {
    let mut st = PassStats::default();
    let stride = cfg.proposal.anchors.stride;
    for s in images {
        let wrap = |source: DetectorError| EvalError::Detector {
            id: s.id.clone(),
            source,
        };
        let (iw, ih) = (s.image.width as f64, s.image.height as f64);
        let t0 = Instant::now();
        let (fm, _) = cfg
            .params
            .backbone
            .forward(&s.image)
            .map_err(|e| wrap(DetectorError::Rpn(e.into())))?;
        let (raw, _) = rpn_forward(&fm, &cfg.params.rpn, &cfg.proposal.region, &cfg.proposal.anchors, iw, ih)
            .map_err(|e| wrap(e.into()))?;
        let t1 = Instant::now();
        let kept = select_top(&nms(&raw, cfg.proposal.nms_threshold), cfg.proposal.top_n);
        let t2 = Instant::now();
        for p in &kept.proposals {
            if let Ok((v, _)) = roi_features(&fm, &p.bbox, &cfg.params.detector, stride, iw, ih) {
                detector_forward(&v, &cfg.params.detector).map_err(wrap)?;
            }
        }
        let t3 = Instant::now();
        st.positions += grid_positions(raw.geometry, &cfg.proposal.region).positions.len();
        st.anchors += raw.len();
        st.proposals += kept.len();
        st.propose += (t1 - t0).as_secs_f64() * 1e3;
        st.nms += (t2 - t1).as_secs_f64() * 1e3;
        st.detect += (t3 - t2).as_secs_f64() * 1e3;
    }
    Ok(st)
}

/// Exact operation counts and median stage timings for each configuration.
/// `warmup` passes are run first and discarded.
pub fn bench_configs(
    configs: &[BenchConfig],
    images: &[Sample],
    reps: usize,
    warmup: usize,
) -> Result<Vec<BenchReport>, EvalError> {
    if reps == 0 {
        return Err(EvalError::NoRepetitions);
    }
    if images.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    configs
        .iter()
        .map(|cfg| {
            for _ in 0..warmup {
                bench_pass(cfg, images)?;
            }
            let passes = (0..reps).map(|_| bench_pass(cfg, images)).collect::<Result<Vec<_>, _>>()?;
            let eval = evaluate(
                &Pipeline {
                    params: cfg.params.clone(),
                    proposal: cfg.proposal.clone(),
                },
                images,
            )?;
            let first = &passes[0];
            Ok(BenchReport {
                config: cfg.name.clone(),
                images: images.len(),
                positions: first.positions,
                anchors: first.anchors,
                proposals: first.proposals,
                dice_mean: eval.mean,
                dice_std: eval.std,
                t_propose_ms: median(passes.iter().map(|p| p.propose).collect()),
                t_nms_ms: median(passes.iter().map(|p| p.nms).collect()),
                t_detect_ms: median(passes.iter().map(|p| p.detect).collect()),
                per_image_dice: eval.per_image.iter().map(|d| d.dice).collect(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::model::ModelShape;
    use crate::rpn::ProposalConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(id: &str, boxes: [BBox; 2]) -> Sample {
        Sample {
            id: id.into(),
            image: Image::filled(64, 64, 0.0),
            gts: GroundTruth {
                boxes: boxes.to_vec(),
                labels: OrganClass::ALL.to_vec(),
            },
        }
    }

    fn two_images() -> Vec<Sample> {
        vec![
            sample(
                "a",
                [BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(), BBox::new(20.0, 0.0, 10.0, 10.0).unwrap()],
            ),
            sample(
                "b",
                [BBox::new(5.0, 5.0, 20.0, 10.0).unwrap(), BBox::new(30.0, 5.0, 10.0, 20.0).unwrap()],
            ),
        ]
    }

    #[test]
    fn oracle_scores_one() {
        let ds = two_images();
        let r = evaluate(&OracleModel::from_samples(&ds), &ds).unwrap();
        assert_eq!((r.mean, r.std, r.misses, r.samples), (1.0, 0.0, 0, 2));
        let none = evaluate(&EmptyModel, &ds).unwrap();
        assert_eq!((none.mean, none.misses), (0.0, 4));
        assert!(matches!(evaluate(&EmptyModel, &[]), Err(EvalError::EmptyDataset)));
    }

    #[test]
    fn hand_built_mean() {
        let ds = two_images();
        let mut oracle = OracleModel::from_samples(&ds);
        // Image a, left: shifted by half its width -> IoU 1/3, Dice 1/2.
        oracle.truth.get_mut("a").unwrap().boxes[0] = BBox::new(5.0, 0.0, 10.0, 10.0).unwrap();
        // Image b, right: dropped -> Dice 0.
        let gb = oracle.truth.get_mut("b").unwrap();
        gb.boxes.truncate(1);
        gb.labels.truncate(1);
        let r = evaluate(&oracle, &ds).unwrap();
        let all = [0.5, 1.0, 1.0, 0.0];
        assert!((r.mean - 0.625).abs() < 1e-12);
        let var = all.iter().map(|d| (d - 0.625) * (d - 0.625)).sum::<f64>() / 4.0;
        assert!((r.std - var.sqrt()).abs() < 1e-12);
        assert_eq!(r.per_class[0].dice, vec![0.5, 1.0]);
        assert_eq!(r.per_class[1].dice, vec![1.0, 0.0]);
        assert_eq!(r.per_class[1].misses, 1);
        assert_eq!(r.per_image[0].dice, 0.75);
    }

    #[test]
    fn evaluation_is_permutation_invariant() {
        let mut ds = two_images();
        let mut oracle = OracleModel::from_samples(&ds);
        oracle.truth.get_mut("a").unwrap().boxes[0] = BBox::new(3.0, 1.0, 10.0, 10.0).unwrap();
        let r1 = evaluate(&oracle, &ds).unwrap();
        ds.reverse();
        let r2 = evaluate(&oracle, &ds).unwrap();
        assert!((r1.mean - r2.mean).abs() < 1e-15);
        assert!((r1.std - r2.std).abs() < 1e-15);
    }

    #[test]
    fn rank_sum_examples() {
        let r = rank_sum_exact(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(r.u, 0.0);
        assert!((r.p - 2.0 / 6.0).abs() < 1e-15);
        let same = wilcoxon_rank_sum(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(same.p >= 0.99);
        let tied = wilcoxon_rank_sum(&[0.5; 3], &[0.5; 4]).unwrap();
        assert_eq!((tied.p, tied.method), (1.0, RankSumMethod::AllTied));
        assert!(wilcoxon_rank_sum(&[], &[1.0]).is_err());
        let big_a: Vec<f64> = (0..20).map(f64::from).collect();
        let big_b: Vec<f64> = (100..120).map(f64::from).collect();
        let r = wilcoxon_rank_sum(&big_a, &big_b).unwrap();
        assert_eq!((r.method, r.u), (RankSumMethod::Normal, 0.0));
        assert!(r.p < 1e-6);
    }

    #[test]
    fn midranks_with_ties() {
        let (r, t) = midranks(&[3.0, 1.0, 3.0, 2.0]);
        assert_eq!(r, vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(t, 6.0);
    }

    /// Worst gap between the two p-values over random samples drawn from
    /// `levels` distinct integers.
    fn worst_gap(na: usize, nb: usize, levels: u32, rng: &mut ChaCha8Rng) -> f64 {
        (0..300)
            .map(|_| {
                let a: Vec<f64> = (0..na).map(|_| rng.gen_range(0..levels) as f64).collect();
                let b: Vec<f64> = (0..nb).map(|_| rng.gen_range(0..levels) as f64).collect();
                if a.iter().chain(&b).all(|&v| v == a[0]) {
                    return 0.0;
                }
                let e = rank_sum_exact(&a, &b).unwrap().p;
                let n = rank_sum_normal(&a, &b).unwrap().p;
                (e - n).abs()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn normal_approximation_gap_by_sample_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        // Tie-free samples of five or more per side stay within 0.02.
        for (na, nb) in [(5, 5), (5, 6), (6, 5), (6, 6)] {
            let g = worst_gap(na, nb, u32::MAX, &mut rng);
            assert!(g <= 0.02, "{na}+{nb}: {g}");
        }
        // Smaller or tie-heavy samples do not.
        assert!(worst_gap(2, 2, u32::MAX, &mut rng) > 0.05);
        assert!(worst_gap(6, 6, 10, &mut rng) > 0.05);
    }

    #[test]
    fn bench_counts_are_exact_and_repeatable() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let restricted = ModelParams::gaussian(&ModelShape::default(), 0.01, &mut rng);
        let baseline = ModelParams::gaussian(
            &ModelShape {
                anchors_per_position: 6,
                ..ModelShape::default()
            },
            0.01,
            &mut rng,
        );
        let img = Sample {
            id: "x".into(),
            image: Image::filled(640, 640, 0.5),
            gts: two_images()[0].gts.clone(),
        };
        let configs = [
            BenchConfig {
                name: "restricted".into(),
                params: &restricted,
                proposal: ProposalConfig::default(),
            },
            BenchConfig {
                name: "baseline".into(),
                params: &baseline,
                proposal: ProposalConfig::baseline(),
            },
        ];
        let r = bench_configs(&configs, std::slice::from_ref(&img), 1, 0).unwrap();
        assert_eq!((r[0].positions, r[1].positions), (784, 1600));
        assert_eq!((r[0].anchors, r[1].anchors), (3136, 9600));
        let c = compare(&r[0], &r[1]);
        assert!((c.position_reduction - 0.51).abs() < 1e-12);
        let again = bench_configs(&configs, std::slice::from_ref(&img), 1, 0).unwrap();
        assert_eq!((again[0].anchors, again[0].proposals), (r[0].anchors, r[0].proposals));
        let csv = to_csv(&r);
        assert!(csv.starts_with(BenchReport::CSV_HEADER));
        assert!(csv.contains("restricted,784,3136,"));
        assert!(matches!(
            bench_configs(&configs, std::slice::from_ref(&img), 0, 0),
            Err(EvalError::NoRepetitions)
        ));
    }
}
