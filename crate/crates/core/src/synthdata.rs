//! Procedural radiograph-like scenes and the on-disk dataset format.
//!
//! Each scene is a noisy background with two bright ellipses standing in for
//! the left and right lung fields. Their poses are drawn around fixed
//! fractional positions, the way acquisition protocols keep organs in similar
//! places from image to image. Ground truth is the tight box of each ellipse.
//!
//! On disk a dataset is a directory of binary PGM files (`<id>.pgm`) plus
//! `annotations.jsonl` with one JSON object per sample.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::Image;
use crate::detector::OrganClass;
use crate::geometry::{iou, BBox};
use crate::training::GroundTruth;

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
const MAX_ATTEMPTS: usize = 100;
const DISTRACTOR_MAX_IOU: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("could not place a valid {what} after {attempts} attempts")]
    Resample { what: &'static str, attempts: usize },
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed PGM: {msg}")]
    Pgm { path: PathBuf, msg: String },
    #[error("{path} line {line}: {msg}")]
    Schema { path: PathBuf, line: usize, msg: String },
    #[error("sample {id}: annotation says {expected:?} but image is {got:?}")]
    IdMismatch {
        id: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// Mean center of the left field as fractions of width and height.
    pub left_center: (f64, f64),
    pub right_center: (f64, f64),
    /// Standard deviation of the centers, as a fraction of the image size.
    pub center_std: f64,
    /// Field height as a fraction of the image height.
    pub height_mean: f64,
    pub height_std: f64,
    /// Field width over field height.
    pub aspect_mean: f64,
    pub aspect_std: f64,
    pub foreground: f64,
    pub background: f64,
    pub noise_std: f64,
    pub distractors: usize,
    pub distractor_intensity: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 320,
            height: 320,
            left_center: (0.33, 0.45),
            right_center: (0.67, 0.45),
            center_std: 0.03,
            height_mean: 0.45,
            height_std: 0.05,
            aspect_mean: 0.5,
            aspect_std: 0.05,
            foreground: 0.7,
            background: 0.3,
            noise_std: 0.1,
            distractors: 2,
            distractor_intensity: 0.6,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.width < 16 || self.height < 16 {
            return Err(format!("width and height must be at least 16, got {}x{}", self.width, self.height));
        }
        let fractions = [
            ("left_center.0", self.left_center.0),
            ("left_center.1", self.left_center.1),
            ("right_center.0", self.right_center.0),
            ("right_center.1", self.right_center.1),
            ("height_mean", self.height_mean),
            ("aspect_mean", self.aspect_mean),
        ];
        for (name, v) in fractions {
            if !(v > 0.0 && v < 1.0) {
                return Err(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        for (name, v) in [
            ("center_std", self.center_std),
            ("height_std", self.height_std),
            ("aspect_std", self.aspect_std),
            ("noise_std", self.noise_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} must be non-negative, got {v}"));
            }
        }
        for (name, v) in [
            ("foreground", self.foreground),
            ("background", self.background),
            ("distractor_intensity", self.distractor_intensity),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.left_center.0 >= self.right_center.0 {
            return Err("left_center.0 must be smaller than right_center.0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub gts: GroundTruth,
}

fn normal(mean: f64, std: f64) -> Normal<f64> {
    Normal::new(mean, std).expect("validated std")
}

/// Tight box of an ellipse field drawn around `center`.
fn draw_field<R: Rng + ?Sized>(cfg: &SceneConfig, center: (f64, f64), rng: &mut R) -> Result<BBox, SynthError> {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let cx = normal(center.0 * w, cfg.center_std * w);
    let cy = normal(center.1 * h, cfg.center_std * h);
    let fh = normal(cfg.height_mean * h, cfg.height_std * h);
    let aspect = normal(cfg.aspect_mean, cfg.aspect_std);
    for _ in 0..MAX_ATTEMPTS {
        let (x, y, bh, a) = (cx.sample(rng), cy.sample(rng), fh.sample(rng), aspect.sample(rng));
        let bw = a * bh;
        if !(bw > 1.0 && bh > 1.0) {
            continue;
        }
        if let Ok(b) = BBox::from_center(x, y, bw, bh) {
            if b.inside(w, h) {
                return Ok(b);
            }
        }
    }
    Err(SynthError::Resample {
        what: "lung field",
        attempts: MAX_ATTEMPTS,
    })
}

fn paint_ellipse(data: &mut [f64], width: usize, b: &BBox, value: f64) {
    let (cx, cy) = b.center();
    let (ra, rb) = (0.5 * b.w, 0.5 * b.h);
    let y0 = b.y.floor().max(0.0) as usize;
    let y1 = (b.bottom().ceil() as usize).min(data.len() / width);
    let x0 = b.x.floor().max(0.0) as usize;
    let x1 = (b.right().ceil() as usize).min(width);
    for py in y0..y1 {
        let dy = (py as f64 + 0.5 - cy) / rb;
        for px in x0..x1 {
            let dx = (px as f64 + 0.5 - cx) / ra;
            if dx * dx + dy * dy <= 1.0 {
                data[py * width + px] = value;
            }
        }
    }
}

pub fn generate_sample<R: Rng + ?Sized>(cfg: &SceneConfig, id: String, rng: &mut R) -> Result<Sample, SynthError> {
    cfg.validate().map_err(SynthError::Config)?;
    let (w, h) = (cfg.width, cfg.height);
    let mut fields = None;
    for _ in 0..MAX_ATTEMPTS {
        let left = draw_field(cfg, cfg.left_center, rng)?;
        let right = draw_field(cfg, cfg.right_center, rng)?;
        if left.center().0 < right.center().0 {
            fields = Some((left, right));
            break;
        }
    }
    let (left, right) = fields.ok_or(SynthError::Resample {
        what: "left/right pair",
        attempts: MAX_ATTEMPTS,
    })?;

    let mut data = vec![cfg.background; w * h];
    for _ in 0..cfg.distractors {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let r = rng.gen_range(4.0..12.0);
            let x = rng.gen_range(0.0..(w as f64 - 2.0 * r));
            let y = rng.gen_range(0.0..(h as f64 - 2.0 * r));
            let blob = BBox::new(x, y, 2.0 * r, 2.0 * r).expect("positive radius");
            if iou(&blob, &left) <= DISTRACTOR_MAX_IOU && iou(&blob, &right) <= DISTRACTOR_MAX_IOU {
                paint_ellipse(&mut data, w, &blob, cfg.distractor_intensity);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SynthError::Resample {
                what: "distractor",
                attempts: MAX_ATTEMPTS,
            });
        }
    }
    paint_ellipse(&mut data, w, &left, cfg.foreground);
    paint_ellipse(&mut data, w, &right, cfg.foreground);
    if cfg.noise_std > 0.0 {
        let noise = normal(0.0, cfg.noise_std);
        for v in &mut data {
            *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
        }
    }
    Ok(Sample {
        id,
        image: Image {
            width: w,
            height: h,
            data,
        },
        gts: GroundTruth {
            boxes: vec![left, right],
            labels: vec![OrganClass::LeftLung, OrganClass::RightLung],
        },
    })
}

/// Seed of sample `index` under base seed `base`.
pub fn sample_seed(base: u64, index: usize) -> u64 {
    base ^ index as u64
}

/// `count` samples with per-sample seeds, ids `s00000`, `s00001`, ...
pub fn generate_dataset(cfg: &SceneConfig, count: usize, base_seed: u64) -> Result<Vec<Sample>, SynthError> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(base_seed, i));
            generate_sample(cfg, format!("s{i:05}"), &mut rng)
        })
        .collect()
}

/// Bilinear rescale so the shorter side becomes `min(short_side, current)`.
/// Returns the image and the applied scale factor.
pub fn rescale_image(img: &Image, short_side: usize) -> (Image, f64) {
    let short = img.width.min(img.height);
    if short <= short_side || short_side == 0 {
        return (img.clone(), 1.0);
    }
    let factor = short_side as f64 / short as f64;
    let nw = ((img.width as f64 * factor).round() as usize).max(1);
    let nh = ((img.height as f64 * factor).round() as usize).max(1);
    let sample_axis = |dst: usize, n_src: usize| {
        let s = ((dst as f64 + 0.5) / factor - 0.5).clamp(0.0, (n_src - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_src - 1);
        (i0, i1, s - i0 as f64)
    };
    let xs: Vec<_> = (0..nw).map(|x| sample_axis(x, img.width)).collect();
    let mut data = Vec::with_capacity(nw * nh);
    for y in 0..nh {
        let (y0, y1, fy) = sample_axis(y, img.height);
        for &(x0, x1, fx) in &xs {
            let top = img.get(x0, y0) * (1.0 - fx) + img.get(x1, y0) * fx;
            let bottom = img.get(x0, y1) * (1.0 - fx) + img.get(x1, y1) * fx;
            data.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
        }
    }
    (
        Image {
            width: nw,
            height: nh,
            data,
        },
        factor,
    )
}

/// Rescale a sample's image and boxes together.
pub fn rescale_sample(s: &Sample, short_side: usize) -> Sample {
    let (image, factor) = rescale_image(&s.image, short_side);
    Sample {
        id: s.id.clone(),
        image,
        gts: GroundTruth {
            boxes: s.gts.boxes.iter().map(|b| b.scaled(factor)).collect(),
            labels: s.gts.labels.clone(),
        },
    }
}

pub fn encode_pgm(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Image, SynthError> {
    let bad = |msg: &str| SynthError::Pgm {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut pos = 0;
    let mut token = || -> Option<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token().as_deref() != Some("P5") {
        return Err(bad("missing P5 magic"));
    }
    let mut num = |what: &str| -> Result<usize, SynthError> {
        token()
            .and_then(|t| t.parse::<usize>().ok())
            .ok_or_else(|| bad(&format!("bad {what}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if width == 0 || height == 0 {
        return Err(bad("zero dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit maxval is supported"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let n = width * height;
    if bytes.len() < start + n {
        return Err(bad("truncated raster"));
    }
    if bytes.len() > start + n {
        return Err(bad("trailing bytes after raster"));
    }
    let data = bytes[start..start + n].iter().map(|&b| b as f64 / maxval as f64).collect();
    Ok(Image { width, height, data })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxRecord {
    class: String,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationRecord {
    id: String,
    width: usize,
    height: usize,
    boxes: Vec<BoxRecord>,
}

pub fn write_dataset(samples: &[Sample], dir: &Path) -> Result<(), SynthError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let mut ann = fs::File::create(&ann_path).map_err(io_err(&ann_path))?;
    for s in samples {
        let img_path = dir.join(format!("{}.pgm", s.id));
        fs::write(&img_path, encode_pgm(&s.image)).map_err(io_err(&img_path))?;
        let rec = AnnotationRecord {
            id: s.id.clone(),
            width: s.image.width,
            height: s.image.height,
            boxes: s
                .gts
                .boxes
                .iter()
                .zip(&s.gts.labels)
                .map(|(b, c)| BoxRecord {
                    class: c.name().to_string(),
                    x: b.x,
                    y: b.y,
                    w: b.w,
                    h: b.h,
                })
                .collect(),
        };
        let line = serde_json::to_string(&rec).expect("annotation serializes");
        writeln!(ann, "{line}").map_err(io_err(&ann_path))?;
    }
    Ok(())
}

/// Read a dataset written by [`write_dataset`]. A directory without an
/// annotation file is an empty dataset.
pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>, SynthError> {
    let ann_path = dir.join(ANNOTATIONS_FILE);
    if !dir.is_dir() {
        return Err(SynthError::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        });
    }
    if !ann_path.exists() {
        return Ok(Vec::new());
    }
    let file = fs::File::open(&ann_path).map_err(io_err(&ann_path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&ann_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let schema = |msg: String| SynthError::Schema {
            path: ann_path.clone(),
            line: i + 1,
            msg,
        };
        let rec: AnnotationRecord = serde_json::from_str(&line).map_err(|e| schema(e.to_string()))?;
        let mut gts = GroundTruth::default();
        for b in &rec.boxes {
            let class = OrganClass::parse(&b.class).ok_or_else(|| schema(format!("unknown class {:?}", b.class)))?;
            let bbox = BBox::new(b.x, b.y, b.w, b.h).map_err(|e| schema(e.to_string()))?;
            gts.boxes.push(bbox);
            gts.labels.push(class);
        }
        let img_path = dir.join(format!("{}.pgm", rec.id));
        let bytes = fs::read(&img_path).map_err(io_err(&img_path))?;
        let image = decode_pgm(&bytes, &img_path)?;
        if (image.width, image.height) != (rec.width, rec.height) {
            return Err(SynthError::IdMismatch {
                id: rec.id,
                expected: (rec.width, rec.height),
                got: (image.width, image.height),
            });
        }
        out.push(Sample { id: rec.id, image, gts });
    }
    Ok(out)
}
