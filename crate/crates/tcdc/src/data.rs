//! Image datasets: manifest ingestion, seeded splits, preprocessing and a synthetic face generator.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::DOWNSAMPLE;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot decode image {0}: {1}")]
    Decode(String, String),
    #[error("manifest {0}: {1}")]
    Manifest(PathBuf, String),
    #[error("missing image files: {0:?}")]
    Missing(Vec<String>),
    #[error("label {label} of {path} is out of range for {classes} classes")]
    Label { path: String, label: usize, classes: usize },
    #[error("duplicate manifest paths: {0:?}")]
    Duplicate(Vec<String>),
    #[error("split '{0}' is empty")]
    EmptySplit(&'static str),
    #[error("invalid split fractions {0:?}")]
    Fractions([f64; 3]),
    #[error("image size {0} must be a positive multiple of {DOWNSAMPLE}")]
    Size(usize),
    #[error("need at least 2 classes, got {0}")]
    Classes(usize),
    #[error("image encode error: {0}")]
    Encode(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Decodes an image, resizes it to `size × size` and scales it to `[0, 1]`.
/// In train mode the image is mirrored horizontally with probability 1/2, drawn from `seed`.
pub fn preprocess(bytes: &[u8], size: usize, mode: Mode, seed: u64) -> Result<Tensor, DataError> {
    let img = decode_rgb(bytes, size, "<bytes>")?;
    let flip = mode == Mode::Train && ChaCha8Rng::seed_from_u64(seed).random_bool(0.5);
    let mut t = Tensor::from_vec([1, 3, size, size], to_planar(&img).iter().map(|&v| f64::from(v) / 255.0).collect())
        .expect("planar image length");
    if flip {
        flip_horizontal(&mut t, 0);
    }
    Ok(t)
}

fn decode_rgb(bytes: &[u8], size: usize, name: &str) -> Result<RgbImage, DataError> {
    let img = image::load_from_memory(bytes).map_err(|e| DataError::Decode(name.into(), e.to_string()))?.to_rgb8();
    Ok(if img.width() as usize == size && img.height() as usize == size {
        img
    } else {
        image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
    })
}

fn to_planar(img: &RgbImage) -> Vec<u8> {
    let plane = (img.width() * img.height()) as usize;
    let mut out = vec![0u8; 3 * plane];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = p.0[c];
        }
    }
    out
}

/// Mirrors item `b` of a `(B, C, H, W)` tensor left to right.
pub fn flip_horizontal(t: &mut Tensor, b: usize) {
    let w = t.width();
    for row in t.item_mut(b).chunks_exact_mut(w) {
        row.reverse();
    }
}

/// Images of one split, stored as 8-bit planar RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub size: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<usize>,
    pub paths: Vec<String>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn item_len(&self) -> usize {
        3 * self.size * self.size
    }

    /// The images at `idx` as a `(B, 3, S, S)` tensor in `[0, 1]`, with their labels.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let n = self.item_len();
        let data = idx.iter().flat_map(|&i| &self.pixels[i * n..(i + 1) * n]).map(|&v| f64::from(v) / 255.0).collect();
        let t = Tensor::from_vec([idx.len(), 3, self.size, self.size], data).expect("batch length");
        (t, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `n` items.
    pub fn take(&self, n: usize) -> Split {
        let n = n.min(self.len());
        Split {
            size: self.size,
            pixels: self.pixels[..n * self.item_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            paths: self.paths[..n].to_vec(),
        }
    }

    pub fn histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        self.labels.iter().for_each(|&l| h[l] += 1);
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl Dataset {
    /// Per-split class counts, `[train, val, test]`.
    pub fn histogram(&self) -> [Vec<usize>; 3] {
        [&self.train, &self.val, &self.test].map(|s| s.histogram(self.num_classes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub manifest: PathBuf,
    pub num_classes: usize,
    #[serde(default = "default_size")]
    pub image_size: usize,
    /// Train/val/test fractions, used when the manifest has no `split` column.
    #[serde(default = "default_fractions")]
    pub split: [f64; 3],
}

fn default_size() -> usize {
    256
}

fn default_fractions() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, DataError> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| DataError::Manifest(path.into(), e.to_string()))?;
    rd.deserialize().collect::<Result<_, _>>().map_err(|e| DataError::Manifest(path.into(), e.to_string()))
}

/// Seeded shuffle of `0..n` cut into train/val/test by `fractions`.
pub fn split_indices(n: usize, fractions: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3], DataError> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::Fractions(fractions));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok([idx, val, test])
}

/// Loads and validates a manifest-described dataset with deterministic splits.
pub fn load_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Dataset, DataError> {
    if cfg.num_classes < 2 {
        return Err(DataError::Classes(cfg.num_classes));
    }
    if cfg.image_size == 0 || cfg.image_size % DOWNSAMPLE != 0 {
        return Err(DataError::Size(cfg.image_size));
    }
    let rows = read_manifest(&cfg.manifest)?;
    let root = cfg.manifest.parent().unwrap_or(Path::new("."));

    let mut seen: HashMap<&str, usize> = HashMap::new();
    rows.iter().for_each(|r| *seen.entry(r.path.as_str()).or_default() += 1);
    let mut dups: Vec<String> = seen.iter().filter(|(_, &n)| n > 1).map(|(p, _)| p.to_string()).collect();
    if !dups.is_empty() {
        dups.sort();
        return Err(DataError::Duplicate(dups));
    }
    if let Some(r) = rows.iter().find(|r| r.label >= cfg.num_classes) {
        return Err(DataError::Label { path: r.path.clone(), label: r.label, classes: cfg.num_classes });
    }
    let missing: Vec<String> = rows.iter().filter(|r| !root.join(&r.path).is_file()).map(|r| r.path.clone()).collect();
    if !missing.is_empty() {
        return Err(DataError::Missing(missing));
    }

    let parts = if rows.iter().all(|r| r.split.is_some()) {
        let mut parts: [Vec<usize>; 3] = Default::default();
        for (i, r) in rows.iter().enumerate() {
            let k = match r.split.as_deref() {
                Some("train") => 0,
                Some("val") => 1,
                Some("test") => 2,
                other => return Err(DataError::Manifest(cfg.manifest.clone(), format!("unknown split {other:?}"))),
            };
            parts[k].push(i);
        }
        parts
    } else {
        split_indices(rows.len(), cfg.split, seed)?
    };

    let names = ["train", "val", "test"];
    let mut splits = Vec::with_capacity(3);
    for (k, idx) in parts.iter().enumerate() {
        if idx.is_empty() {
            return Err(DataError::EmptySplit(names[k]));
        }
        let mut s = Split { size: cfg.image_size, pixels: Vec::new(), labels: Vec::new(), paths: Vec::new() };
        for &i in idx {
            let p = root.join(&rows[i].path);
            let bytes = fs::read(&p).map_err(io_err(&p))?;
            s.pixels.extend(to_planar(&decode_rgb(&bytes, cfg.image_size, &rows[i].path)?));
            s.labels.push(rows[i].label);
            s.paths.push(rows[i].path.clone());
        }
        splits.push(s);
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Dataset { num_classes: cfg.num_classes, train, val, test })
}

/// Parameters of the synthetic expression dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_per_class: usize,
    pub classes: usize,
    pub size: usize,
    pub seed: u64,
    /// Extra `(val, test)` images per class; when set the manifest gets a `split` column.
    #[serde(default)]
    pub holdout_per_class: Option<(usize, usize)>,
}

/// Shape parameters of one face.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Expression {
    mouth_curve: f64,
    mouth_open: f64,
    brow_tilt: f64,
    eye_open: f64,
    asymmetry: f64,
}

const PRESETS: [Expression; 8] = [
    Expression { mouth_curve: 0.0, mouth_open: 0.0, brow_tilt: 0.0, eye_open: 1.0, asymmetry: 0.0 },
    Expression { mouth_curve: 1.0, mouth_open: 0.3, brow_tilt: 0.0, eye_open: 0.75, asymmetry: 0.0 },
    Expression { mouth_curve: -1.0, mouth_open: 0.0, brow_tilt: 0.7, eye_open: 0.8, asymmetry: 0.0 },
    Expression { mouth_curve: 0.0, mouth_open: 1.0, brow_tilt: -0.2, eye_open: 1.5, asymmetry: 0.0 },
    Expression { mouth_curve: -0.5, mouth_open: 0.5, brow_tilt: 0.7, eye_open: 1.5, asymmetry: 0.0 },
    Expression { mouth_curve: -0.4, mouth_open: 0.0, brow_tilt: -0.6, eye_open: 0.5, asymmetry: 0.6 },
    Expression { mouth_curve: -0.6, mouth_open: 0.2, brow_tilt: -1.0, eye_open: 0.7, asymmetry: 0.0 },
    Expression { mouth_curve: 0.3, mouth_open: 0.0, brow_tilt: 0.0, eye_open: 0.9, asymmetry: 1.0 },
];

fn class_expression(c: usize, seed: u64) -> Expression {
    PRESETS.get(c).copied().unwrap_or_else(|| {
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ (c as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        Expression {
            mouth_curve: r.random_range(-1.0..1.0),
            mouth_open: r.random_range(0.0..1.0),
            brow_tilt: r.random_range(-1.0..1.0),
            eye_open: r.random_range(0.5..1.5),
            asymmetry: r.random_range(0.0..1.0),
        }
    })
}

/// Distance from `p` to the segment `a..b`.
fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

fn polyline_distance(p: (f64, f64), pts: &[(f64, f64)]) -> f64 {
    pts.windows(2).map(|w| segment_distance(p, w[0], w[1])).fold(f64::INFINITY, f64::min)
}

/// Coverage of an edge at signed distance `d` (negative inside) with a one-pixel ramp.
fn coverage(d: f64) -> f64 {
    (0.5 - d).clamp(0.0, 1.0)
}

fn blend(px: &mut [f64; 3], color: [f64; 3], a: f64) {
    for c in 0..3 {
        px[c] = px[c] * (1.0 - a) + color[c] * a;
    }
}

/// Renders one face of class expression `e` with per-image jitter from `rng`.
fn render_face(e: Expression, size: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let s = size as f64;
    let mut jit = |scale: f64| rng.random_range(-scale..scale);
    let e = Expression {
        mouth_curve: e.mouth_curve + jit(0.2),
        mouth_open: (e.mouth_open + jit(0.15)).max(0.0),
        brow_tilt: e.brow_tilt + jit(0.2),
        eye_open: (e.eye_open + jit(0.15)).max(0.3),
        asymmetry: e.asymmetry + jit(0.15),
    };
    let cx = s / 2.0 + jit(s / 16.0);
    let cy = s / 2.0 + jit(s / 16.0);
    let rx = s * (0.34 + jit(0.03));
    let ry = s * (0.42 + jit(0.03));
    let tone = 0.55 + jit(0.25);
    let skin = [tone + 0.25, tone + 0.1, tone - 0.05];
    let bg_a = [0.5 + jit(0.4), 0.5 + jit(0.4), 0.5 + jit(0.4)];
    let bg_b = [0.5 + jit(0.4), 0.5 + jit(0.4), 0.5 + jit(0.4)];
    let (freq, phase) = (2.0 + jit(1.5), jit(3.0));
    let feature = [0.08 + jit(0.05), 0.06 + jit(0.04), 0.06 + jit(0.04)];
    let stroke = s / 40.0 + 0.6;

    let eye_dx = rx * 0.42;
    let eye_y = cy - ry * 0.18;
    let eye_rx = rx * 0.16;
    let eye_ry = |side: f64| rx * 0.08 * e.eye_open * (1.0 + 0.3 * side * e.asymmetry);
    let brow = |side: f64| {
        let x0 = cx + side * (eye_dx - eye_rx * 1.3);
        let x1 = cx + side * (eye_dx + eye_rx * 1.3);
        let y = eye_y - ry * 0.2;
        let tilt = ry * 0.08 * e.brow_tilt;
        [(x0, y - tilt), (x1, y + tilt)]
    };
    let brows = [brow(-1.0), brow(1.0)];
    let mouth_y = cy + ry * 0.45;
    let mouth_w = rx * 0.5;
    let mouth: Vec<(f64, f64)> = (0..=16)
        .map(|i| {
            let u = f64::from(i) / 8.0 - 1.0;
            let lift = ry * 0.14 * e.mouth_curve * u * u + ry * 0.06 * e.asymmetry * u;
            (cx + u * mouth_w, mouth_y - lift)
        })
        .collect();

    let mut img = RgbImage::new(size as u32, size as u32);
    for (x, y, out) in img.enumerate_pixels_mut() {
        let p = (f64::from(x) + 0.5, f64::from(y) + 0.5);
        let t = 0.5 + 0.5 * ((p.0 + p.1) / s * freq + phase).sin();
        let mut px = [0.0; 3];
        for c in 0..3 {
            px[c] = bg_a[c] * t + bg_b[c] * (1.0 - t);
        }
        let face = (((p.0 - cx) / rx).powi(2) + ((p.1 - cy) / ry).powi(2)).sqrt();
        blend(&mut px, skin, coverage((face - 1.0) * rx.min(ry)));
        for side in [-1.0, 1.0] {
            let (ex, ery) = (cx + side * eye_dx, eye_ry(side));
            let d = (((p.0 - ex) / eye_rx).powi(2) + ((p.1 - eye_y) / ery).powi(2)).sqrt();
            blend(&mut px, feature, coverage((d - 1.0) * ery));
        }
        for b in &brows {
            blend(&mut px, feature, coverage(polyline_distance(p, b) - stroke));
        }
        if e.mouth_open > 0.25 {
            let (mrx, mry) = (mouth_w * 0.55, ry * 0.09 * e.mouth_open);
            let d = (((p.0 - cx) / mrx).powi(2) + ((p.1 - mouth_y) / mry).powi(2)).sqrt();
            blend(&mut px, [0.35, 0.05, 0.05], coverage((d - 1.0) * mry));
        }
        blend(&mut px, feature, coverage(polyline_distance(p, &mouth) - stroke));
        *out = Rgb(px.map(|v| ((v + jit(0.03)).clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    img
}

/// Writes PNG faces and `manifest.csv` into `dir`; returns the manifest path.
///
/// Images are interleaved by class and named `{split}/{class}_{index}.png`.
pub fn generate_synthetic_dataset(dir: &Path, spec: &SynthSpec) -> Result<PathBuf, DataError> {
    if spec.classes < 2 {
        return Err(DataError::Classes(spec.classes));
    }
    if spec.size == 0 || spec.size % DOWNSAMPLE != 0 {
        return Err(DataError::Size(spec.size));
    }
    let (n_val, n_test) = spec.holdout_per_class.unwrap_or((0, 0));
    let labelled = spec.holdout_per_class.is_some();
    let mut rows = Vec::new();
    for (k, (name, n)) in [("train", spec.n_per_class), ("val", n_val), ("test", n_test)].into_iter().enumerate() {
        if n == 0 {
            continue;
        }
        fs::create_dir_all(dir.join(name)).map_err(io_err(&dir.join(name)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(k as u64 * 0x1000_0001));
        for i in 0..n {
            for c in 0..spec.classes {
                let img = render_face(class_expression(c, spec.seed), spec.size, &mut rng);
                let rel = format!("{name}/{c}_{i:05}.png");
                let p = dir.join(&rel);
                img.save_with_format(&p, image::ImageFormat::Png).map_err(|e| DataError::Encode(e.to_string()))?;
                rows.push(ManifestRow { path: rel, label: c, split: labelled.then(|| name.to_string()) });
            }
        }
    }
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| DataError::Manifest(manifest.clone(), e.to_string()))?;
    for r in &rows {
        w.serialize(r).map_err(|e| DataError::Manifest(manifest.clone(), e.to_string()))?;
    }
    w.flush().map_err(io_err(&manifest))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn png_bytes(w: u32, h: u32) -> Vec<u8> {
        let img = RgbImage::from_fn(w, h, |x, y| Rgb([(x * 7) as u8, (y * 3) as u8, 128]));
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png).unwrap();
        out.into_inner()
    }

    #[test]
    fn preprocess_shapes_and_flips() {
        let bytes = png_bytes(50, 30);
        let a = preprocess(&bytes, 64, Mode::Eval, 1).unwrap();
        assert_eq!(a.shape(), [1, 3, 64, 64]);
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, preprocess(&bytes, 64, Mode::Eval, 2).unwrap());

        let flips = (0..10_000u64)
            .filter(|&s| ChaCha8Rng::seed_from_u64(s).random_bool(0.5))
            .count() as f64
            / 1e4;
        assert!((0.48..=0.52).contains(&flips), "{flips}");
        let seed = (0..).find(|&s| ChaCha8Rng::seed_from_u64(s).random_bool(0.5)).unwrap();
        let mut f = preprocess(&bytes, 64, Mode::Train, seed).unwrap();
        assert_ne!(f, a);
        flip_horizontal(&mut f, 0);
        assert_eq!(f, a);
        assert!(preprocess(b"not an image", 64, Mode::Eval, 0).is_err());
    }

    #[test]
    fn split_indices_are_seeded_and_disjoint() {
        let a = split_indices(100, [0.8, 0.1, 0.1], 5).unwrap();
        assert_eq!(a, split_indices(100, [0.8, 0.1, 0.1], 5).unwrap());
        assert_eq!(a.iter().map(Vec::len).collect::<Vec<_>>(), [80, 10, 10]);
        let mut all: Vec<usize> = a.concat();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(split_indices(10, [0.5, 0.1, 0.1], 0).is_err());
    }

    #[test]
    fn synthetic_dataset_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec { n_per_class: 4, classes: 3, size: 64, seed: 9, holdout_per_class: None };
        let manifest = generate_synthetic_dataset(dir.path(), &spec).unwrap();
        let rows = read_manifest(&manifest).unwrap();
        assert_eq!(rows.len(), 12);

        let again = tempfile::tempdir().unwrap();
        generate_synthetic_dataset(again.path(), &spec).unwrap();
        for r in &rows {
            assert_eq!(fs::read(dir.path().join(&r.path)).unwrap(), fs::read(again.path().join(&r.path)).unwrap());
        }

        let cfg = DatasetConfig { manifest: manifest.clone(), num_classes: 3, image_size: 64, split: [0.5, 0.25, 0.25] };
        let ds = load_dataset(&cfg, 3).unwrap();
        assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (6, 3, 3));
        assert_eq!(ds.histogram().iter().flatten().sum::<usize>(), 12);
        assert_eq!(ds, load_dataset(&cfg, 3).unwrap());

        assert!(matches!(load_dataset(&DatasetConfig { num_classes: 2, ..cfg.clone() }, 3), Err(DataError::Label { .. })));
        let body = fs::read_to_string(&manifest).unwrap();
        let first = body.lines().nth(1).unwrap().to_string();
        fs::write(&manifest, format!("{body}{first}\n")).unwrap();
        match load_dataset(&cfg, 3) {
            Err(DataError::Duplicate(d)) => assert_eq!(d, [first.split(',').next().unwrap()]),
            other => panic!("{other:?}"),
        }
        fs::write(&manifest, format!("{body}missing.png,0\n")).unwrap();
        assert!(matches!(load_dataset(&cfg, 3), Err(DataError::Missing(m)) if m == ["missing.png"]));
        fs::write(&manifest, body).unwrap();
        assert!(matches!(
            load_dataset(&DatasetConfig { split: [1.0, 0.0, 0.0], ..cfg }, 3),
            Err(DataError::EmptySplit("val"))
        ));
    }

    #[test]
    fn holdout_column_defines_splits() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec { n_per_class: 2, classes: 2, size: 64, seed: 1, holdout_per_class: Some((1, 3)) };
        let manifest = generate_synthetic_dataset(dir.path(), &spec).unwrap();
        let cfg = DatasetConfig { manifest, num_classes: 2, image_size: 64, split: default_fractions() };
        let ds = load_dataset(&cfg, 0).unwrap();
        assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (4, 2, 6));
        assert!(ds.test.paths.iter().all(|p| p.starts_with("test/")));
        let (x, y) = ds.test.batch(&[0, 1]);
        assert_eq!(x.shape(), [2, 3, 64, 64]);
        assert_eq!(y, [0, 1]);
    }
}
