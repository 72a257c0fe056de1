//! Procedural blob datasets, the distilled-data container and their on-disk
//! format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use ddlab_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::model::read_exact;
use crate::rng::{self, Rng};
use crate::stats::{self, DensityGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

/// Labelled images of shape (N, C, H, W).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        check_images(&images, &labels, num_classes)?;
        Ok(Dataset { images, labels, num_classes, split })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// (C, H, W)
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let per = self.images.numel() / self.len();
        &self.images.data()[i * per..(i + 1) * per]
    }

    /// Examples at `indices`, in that order. Panics on out-of-range indices.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(CoreError::invalid("dataset", "empty selection"));
        }
        let (images, labels) = gather(&self.images, &self.labels, indices);
        Dataset::new(images, labels, self.num_classes, self.split)
    }

    /// Indices of each class, in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.class_indices().iter().map(Vec::len).collect()
    }

    /// Concatenation; both sides must share class count and image shape.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.num_classes != other.num_classes || self.image_shape() != other.image_shape() {
            return Err(CoreError::invalid("dataset", "concatenating incompatible datasets"));
        }
        let [c, h, w] = self.image_shape();
        let mut data = self.images.data().to_vec();
        data.extend_from_slice(other.images.data());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Dataset::new(Tensor::new(vec![labels.len(), c, h, w], data)?, labels, self.num_classes, self.split)
    }

    /// `per_class` seeded-random examples of every class.
    pub fn sample_per_class(&self, per_class: usize, seed: u64) -> Result<Dataset> {
        let idx = stratified_indices(&self.class_indices(), per_class, &mut rng::seeded(seed, rng::stream::SUBSET))?;
        self.select(&idx)
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        self.write_to(&mut HashWriter(&mut h)).expect("hashing cannot fail");
        h.finalize().into()
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let kind = match self.split {
            Split::Train => KIND_TRAIN,
            Split::Test => KIND_TEST,
        };
        write_body(w, kind, &self.images, &self.labels, self.num_classes)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Dataset> {
        let (kind, images, labels, num_classes) = read_body(r)?;
        let split = match kind {
            KIND_TRAIN => Split::Train,
            KIND_TEST => Split::Test,
            _ => return Err(CoreError::format(WHAT, "file holds a synthetic set, not a dataset")),
        };
        Dataset::new(images, labels, num_classes, split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("in-memory write");
        std::fs::write(path, buf).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
        Dataset::read_from(&mut bytes.as_slice())
    }
}

fn check_images(images: &Tensor, labels: &[usize], num_classes: usize) -> Result<()> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(CoreError::invalid("dataset", format!("images must be (N, C, H, W), got {s:?}")));
    }
    if s[0] != labels.len() {
        return Err(CoreError::invalid("dataset", format!("{} images but {} labels", s[0], labels.len())));
    }
    if num_classes < 1 {
        return Err(CoreError::invalid("dataset", "no classes"));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(CoreError::invalid("dataset", format!("label {l} out of range for {num_classes} classes")));
    }
    Ok(())
}

fn gather(images: &Tensor, labels: &[usize], indices: &[usize]) -> (Tensor, Vec<usize>) {
    let s = images.shape();
    let per: usize = s[1..].iter().product();
    let mut data = Vec::with_capacity(indices.len() * per);
    for &i in indices {
        data.extend_from_slice(&images.data()[i * per..(i + 1) * per]);
    }
    let t = Tensor::new(vec![indices.len(), s[1], s[2], s[3]], data).expect("gathered shape");
    (t, indices.iter().map(|&i| labels[i]).collect())
}

/// `k` indices drawn without replacement from every class, class-major.
pub(crate) fn stratified_indices(by_class: &[Vec<usize>], k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(k * by_class.len());
    for (c, idx) in by_class.iter().enumerate() {
        if k > idx.len() {
            return Err(CoreError::invalid("sample", format!("class {c} has {} examples, {k} requested", idx.len())));
        }
        let mut idx = idx.clone();
        idx.shuffle(rng);
        out.extend_from_slice(&idx[..k]);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SyntheticInit {
    RealImages,
    Xavier,
}

impl SyntheticInit {
    pub fn name(self) -> &'static str {
        match self {
            SyntheticInit::RealImages => "real_images",
            SyntheticInit::Xavier => "xavier",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "real_images" => Some(SyntheticInit::RealImages),
            "xavier" => Some(SyntheticInit::Xavier),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticMeta {
    pub method: String,
    pub ipc: usize,
    pub seed: u64,
    pub init: SyntheticInit,
    pub iterations: usize,
    /// Fraction of pixels clamped by [`clip_to_unit`], if it was applied.
    pub clipped_fraction: Option<f64>,
    /// Inner learning rate learned alongside the pixels.
    pub learned_lr: Option<f64>,
}

/// Learnable distilled images with fixed class-major labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSet {
    pub images: Tensor,
    labels: Arc<[usize]>,
    num_classes: usize,
    pub meta: SyntheticMeta,
}

impl SyntheticSet {
    pub fn new(images: Tensor, num_classes: usize, meta: SyntheticMeta) -> Result<Self> {
        if meta.ipc == 0 {
            return Err(CoreError::invalid("synthetic set", "ipc must be positive"));
        }
        let labels: Arc<[usize]> = (0..num_classes).flat_map(|c| std::iter::repeat_n(c, meta.ipc)).collect();
        check_images(&images, &labels, num_classes)?;
        Ok(SyntheticSet { images, labels, num_classes, meta })
    }

    /// Initial set: `ipc` random real images per class, or Xavier-uniform noise.
    pub fn initialize(real: &Dataset, ipc: usize, init: SyntheticInit, method: &str, seed: u64) -> Result<Self> {
        let meta = SyntheticMeta {
            method: method.to_string(),
            ipc,
            seed,
            init,
            iterations: 0,
            clipped_fraction: None,
            learned_lr: None,
        };
        let [c, h, w] = real.image_shape();
        let s = ipc * real.num_classes();
        let mut r = rng::seeded(seed, rng::stream::SYNTHETIC_INIT);
        let images = match init {
            SyntheticInit::RealImages => {
                let idx = stratified_indices(&real.class_indices(), ipc, &mut r)?;
                gather(real.images(), real.labels(), &idx).0
            }
            SyntheticInit::Xavier => {
                // fan convention of a (S, C, H, W) weight tensor
                let bound = (6.0 / ((c * h * w) + (s * h * w)) as f64).sqrt();
                let data = (0..s * c * h * w).map(|_| r.random_range(-bound..=bound)).collect();
                Tensor::new(vec![s, c, h, w], data)?
            }
        };
        SyntheticSet::new(images, real.num_classes(), meta)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Copy with new pixel values; labels and metadata are kept.
    pub fn with_images(&self, images: Tensor) -> Result<Self> {
        if images.shape() != self.images.shape() {
            return Err(CoreError::invalid(
                "synthetic set",
                format!("pixel shape {:?} differs from {:?}", images.shape(), self.images.shape()),
            ));
        }
        Ok(SyntheticSet { images, labels: self.labels.clone(), num_classes: self.num_classes, meta: self.meta.clone() })
    }

    pub fn as_dataset(&self) -> Dataset {
        Dataset::new(self.images.clone(), self.labels.to_vec(), self.num_classes, Split::Train)
            .expect("synthetic set is a valid dataset")
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        write_body(w, KIND_SYNTHETIC, &self.images, &self.labels, self.num_classes)?;
        let m = &self.meta;
        write_str(w, &m.method)?;
        w.write_all(&(m.ipc as u32).to_le_bytes())?;
        w.write_all(&m.seed.to_le_bytes())?;
        write_str(w, m.init.name())?;
        w.write_all(&(m.iterations as u64).to_le_bytes())?;
        w.write_all(&m.clipped_fraction.unwrap_or(f64::NAN).to_le_bytes())?;
        w.write_all(&m.learned_lr.unwrap_or(f64::NAN).to_le_bytes())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let (kind, images, labels, num_classes) = read_body(r)?;
        if kind != KIND_SYNTHETIC {
            return Err(CoreError::format(WHAT, "file holds a dataset, not a synthetic set"));
        }
        let method = read_str(r)?;
        let ipc = read_u32(r)? as usize;
        let seed = read_u64(r)?;
        let init = read_str(r)?;
        let init =
            SyntheticInit::parse(&init).ok_or_else(|| CoreError::format(WHAT, format!("unknown init {init}")))?;
        let iterations = read_u64(r)? as usize;
        let opt = |v: f64| (!v.is_nan()).then_some(v);
        let clipped_fraction = opt(read_f64(r)?);
        let learned_lr = opt(read_f64(r)?);
        let meta = SyntheticMeta { method, ipc, seed, init, iterations, clipped_fraction, learned_lr };
        let set = SyntheticSet::new(images, num_classes, meta)?;
        if *set.labels != *labels {
            return Err(CoreError::format(WHAT, "labels are not class-major with the recorded ipc"));
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("in-memory write");
        std::fs::write(path, buf).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
        SyntheticSet::read_from(&mut bytes.as_slice())
    }
}

/// Clamps every pixel to [0, 1] and records the clamped fraction.
pub fn clip_to_unit(s: &SyntheticSet) -> SyntheticSet {
    let mut out = s.clone();
    let mut clipped = 0usize;
    for v in out.images.data_mut() {
        let c = v.clamp(0.0, 1.0);
        if c != *v {
            clipped += 1;
            *v = c;
        }
    }
    out.meta.clipped_fraction = Some(clipped as f64 / s.images.numel() as f64);
    out
}

/// Bandwidth used for the spike drawn for constant data.
const SPIKE_BANDWIDTH: f64 = 1e-3;

/// Silverman-bandwidth Gaussian KDE of all pixel values.
pub fn pixel_density(pixels: &[f64]) -> Result<DensityGrid> {
    if pixels.is_empty() {
        return Err(CoreError::invalid("pixel_density", "no pixels"));
    }
    let h = stats::silverman_bandwidth(pixels);
    if h > stats::degenerate_bandwidth(pixels) {
        Ok(stats::kde_with(pixels, h, 3.0))
    } else {
        Ok(stats::kde_with(pixels, SPIKE_BANDWIDTH, 6.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Synthetic(usize),
    Real(usize),
}

#[derive(Clone, Debug)]
pub struct Mixed {
    pub data: Dataset,
    pub origin: Vec<Origin>,
}

/// The synthetic set plus `k` seeded-random real images of every class.
pub fn mix(real: &Dataset, synthetic: &SyntheticSet, k: usize, seed: u64) -> Result<Mixed> {
    if real.num_classes() != synthetic.num_classes() || real.image_shape() != synthetic.image_shape() {
        return Err(CoreError::invalid("mix", "real and synthetic data differ in classes or image shape"));
    }
    let syn = synthetic.as_dataset();
    let mut origin: Vec<Origin> = (0..syn.len()).map(Origin::Synthetic).collect();
    if k == 0 {
        return Ok(Mixed { data: syn, origin });
    }
    let idx = stratified_indices(&real.class_indices(), k, &mut rng::seeded(seed, rng::stream::MIX))?;
    origin.extend(idx.iter().map(|&i| Origin::Real(i)));
    let data = syn.concat(&real.select(&idx)?)?;
    Ok(Mixed { data, origin })
}

// ---- procedural blobs ----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ShapeKind {
    Disk,
    Square,
    Ring,
    Cross,
    Bar,
}

const SHAPES: [ShapeKind; 5] = [ShapeKind::Disk, ShapeKind::Square, ShapeKind::Ring, ShapeKind::Cross, ShapeKind::Bar];

#[derive(Clone, Debug)]
struct Template {
    shape: ShapeKind,
    hue: f64,
    cx: f64,
    cy: f64,
    radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlobConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// (C, H, W); C is 1 or 3.
    pub image_shape: [usize; 3],
    pub seed: u64,
    /// Scales every per-image nuisance; 0 renders each class template exactly.
    pub noise_sigma: f64,
}

impl BlobConfig {
    pub fn reference(seed: u64) -> Self {
        BlobConfig {
            num_classes: 3,
            train_per_class: 500,
            test_per_class: 200,
            image_shape: [3, 16, 16],
            seed,
            noise_sigma: 0.8,
        }
    }
}

pub const ATTRIBUTE_NAMES: [&str; 4] = ["hue_bucket", "quadrant", "large", "bright"];
const HUE_BUCKETS: f64 = 6.0;

/// Per-image integer attributes, one column per name.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Attributes {
    pub names: Vec<String>,
    pub values: Vec<Vec<i64>>,
}

impl Attributes {
    pub fn column(&self, name: &str) -> Option<Vec<i64>> {
        let j = self.names.iter().position(|n| n == name)?;
        Some(self.values.iter().map(|row| row[j]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("image_index,attribute_name,value\n");
        for (i, row) in self.values.iter().enumerate() {
            for (n, v) in self.names.iter().zip(row) {
                let _ = writeln!(s, "{i},{n},{v}");
            }
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let what = "attribute csv";
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("image_index,attribute_name,value") {
            return Err(CoreError::format(what, "missing header"));
        }
        let mut names: Vec<String> = Vec::new();
        let mut cells: BTreeMap<usize, BTreeMap<usize, i64>> = BTreeMap::new();
        for (ln, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || CoreError::format(what, format!("line {}: {line:?}", ln + 2));
            let mut f = line.split(',');
            let (Some(i), Some(n), Some(v), None) = (f.next(), f.next(), f.next(), f.next()) else {
                return Err(bad());
            };
            let i: usize = i.trim().parse().map_err(|_| bad())?;
            let v: i64 = v.trim().parse().map_err(|_| bad())?;
            let j = match names.iter().position(|x| x == n.trim()) {
                Some(j) => j,
                None => {
                    names.push(n.trim().to_string());
                    names.len() - 1
                }
            };
            cells.entry(i).or_default().insert(j, v);
        }
        let n = cells.keys().next_back().map_or(0, |&k| k + 1);
        let mut values = Vec::with_capacity(n);
        for i in 0..n {
            let row = cells.get(&i).ok_or_else(|| CoreError::format(what, format!("image {i} has no attributes")))?;
            let row: Option<Vec<i64>> = (0..names.len()).map(|j| row.get(&j).copied()).collect();
            values.push(row.ok_or_else(|| CoreError::format(what, format!("image {i} lacks some attributes")))?);
        }
        Ok(Attributes { names, values })
    }
}

#[derive(Clone, Debug)]
pub struct Blobs {
    pub train: Dataset,
    pub test: Dataset,
    pub train_attributes: Attributes,
    pub test_attributes: Attributes,
}

/// Procedural stand-in for a natural-image dataset: each class is a coloured
/// shape template; images jitter its position, size, hue and brightness, add
/// a faint distractor and Gaussian pixel noise. All jitter scales with
/// `noise_sigma`. Pixels are clamped to [0, 1].
pub fn generate_blobs(cfg: &BlobConfig) -> Result<Blobs> {
    let [c, h, w] = cfg.image_shape;
    if h < 8 || w < 8 {
        return Err(CoreError::invalid("blobs", format!("{h}x{w} is too small for templates (minimum 8x8)")));
    }
    if c != 1 && c != 3 {
        return Err(CoreError::invalid("blobs", format!("{c} channels; only 1 or 3 supported")));
    }
    if cfg.num_classes < 1 || cfg.train_per_class < 1 || cfg.test_per_class < 1 {
        return Err(CoreError::invalid("blobs", "class count and per-class sizes must be positive"));
    }
    if !(cfg.noise_sigma >= 0.0) {
        return Err(CoreError::invalid("blobs", "noise_sigma must be non-negative"));
    }
    let mut g = rng::seeded(cfg.seed, rng::stream::CLASS_GEOMETRY);
    let offset: f64 = g.random();
    let templates: Vec<Template> = (0..cfg.num_classes)
        .map(|k| Template {
            shape: SHAPES[k % SHAPES.len()],
            hue: (offset + k as f64 / cfg.num_classes as f64 + g.random_range(-0.05..0.05)).rem_euclid(1.0),
            cx: g.random_range(0.35..0.65),
            cy: g.random_range(0.35..0.65),
            radius: g.random_range(0.2..0.28),
        })
        .collect();
    let (train, train_attributes) =
        render_split(cfg, &templates, cfg.train_per_class, Split::Train, rng::stream::TRAIN_SPLIT)?;
    let (test, test_attributes) =
        render_split(cfg, &templates, cfg.test_per_class, Split::Test, rng::stream::TEST_SPLIT)?;
    Ok(Blobs { train, test, train_attributes, test_attributes })
}

fn render_split(
    cfg: &BlobConfig,
    templates: &[Template],
    per_class: usize,
    split: Split,
    stream: u64,
) -> Result<(Dataset, Attributes)> {
    let [c, h, w] = cfg.image_shape;
    let s = cfg.noise_sigma;
    let mut r = rng::seeded(cfg.seed, stream);
    let n = per_class * templates.len();
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    let mut attrs = Vec::with_capacity(n);
    let normal = |r: &mut Rng| -> f64 { StandardNormal.sample(r) };
    for (k, t) in templates.iter().enumerate() {
        for _ in 0..per_class {
            let cx = t.cx + s * 0.12 * normal(&mut r);
            let cy = t.cy + s * 0.12 * normal(&mut r);
            let size = t.radius * (1.0 + s * 0.3 * normal(&mut r)).clamp(0.5, 1.6);
            let hue = (t.hue + s * 0.08 * normal(&mut r)).rem_euclid(1.0);
            let brightness = (1.0 + s * 0.3 * normal(&mut r)).clamp(0.3, 1.5);
            let background: [f64; 3] = std::array::from_fn(|_| 0.25 + s * 0.2 * normal(&mut r));
            // faint copy of another class's shape at a random spot
            let other = &templates[(k + 1 + r.random_range(0..templates.len().max(2) - 1)) % templates.len()];
            let (dx, dy) = (r.random_range(0.2..0.8), r.random_range(0.2..0.8));
            let distractor_alpha = (s * 0.5).min(0.6);
            let rgb = hsv_to_rgb(hue, 0.85, 0.9 * brightness);
            let rgb_other = hsv_to_rgb(other.hue, 0.85, 0.9);
            let mut img = vec![0.0; c * h * w];
            for y in 0..h {
                for x in 0..w {
                    let px = (x as f64 + 0.5) / w as f64;
                    let py = (y as f64 + 0.5) / h as f64;
                    let a = coverage(t.shape, px - cx, py - cy, size);
                    let b = distractor_alpha * coverage(other.shape, px - dx, py - dy, other.radius * 0.7);
                    for ch in 0..c {
                        let (fg, fo) =
                            if c == 1 { (luminance(rgb), luminance(rgb_other)) } else { (rgb[ch], rgb_other[ch]) };
                        let bg = if c == 1 { luminance(background) } else { background[ch] };
                        let mut v = bg * (1.0 - b) + fo * b;
                        v = v * (1.0 - a) + fg * a;
                        img[(ch * h + y) * w + x] = v;
                    }
                }
            }
            if s > 0.0 {
                for v in &mut img {
                    *v += s * 0.2 * normal(&mut r);
                }
            }
            data.extend(img.into_iter().map(|v| v.clamp(0.0, 1.0)));
            labels.push(k);
            let quadrant = (cx >= 0.5) as i64 + 2 * (cy >= 0.5) as i64;
            attrs.push(vec![
                (hue * HUE_BUCKETS).floor() as i64 % HUE_BUCKETS as i64,
                quadrant,
                (size > t.radius) as i64,
                (brightness > 1.0) as i64,
            ]);
        }
    }
    let images = Tensor::new(vec![n, c, h, w], data)?;
    let attributes = Attributes { names: ATTRIBUTE_NAMES.iter().map(|s| s.to_string()).collect(), values: attrs };
    Ok((Dataset::new(images, labels, templates.len(), split)?, attributes))
}

/// Soft-edged shape coverage in [0, 1] at offset (dx, dy) from the shape centre.
fn coverage(shape: ShapeKind, dx: f64, dy: f64, r: f64) -> f64 {
    let edge = 0.04;
    let inside = |d: f64| (0.5 - d / edge).clamp(0.0, 1.0);
    match shape {
        ShapeKind::Disk => inside((dx * dx + dy * dy).sqrt() - r),
        ShapeKind::Square => inside(dx.abs().max(dy.abs()) - 0.8 * r),
        ShapeKind::Ring => inside(((dx * dx + dy * dy).sqrt() - 0.7 * r).abs() - 0.3 * r),
        ShapeKind::Cross => inside((dx.abs().min(dy.abs()) - 0.3 * r).max(dx.abs().max(dy.abs()) - r)),
        ShapeKind::Bar => inside((dx.abs() - 1.1 * r).max(dy.abs() - 0.35 * r)),
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let f = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        v - v * s * k.min(4.0 - k).clamp(0.0, 1.0)
    };
    [f(5.0), f(3.0), f(1.0)]
}

fn luminance(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

// ---- file format ----

const WHAT: &str = "dataset file";
const MAGIC: &[u8; 4] = b"DDLB";
const VERSION: u16 = 1;
const KIND_TRAIN: u8 = 0;
const KIND_TEST: u8 = 1;
const KIND_SYNTHETIC: u8 = 2;

struct HashWriter<'a>(&'a mut Sha256);

impl Write for HashWriter<'_> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

fn label_width(num_classes: usize) -> u8 {
    match num_classes {
        0..=0x100 => 1,
        0x101..=0x1_0000 => 2,
        _ => 4,
    }
}

fn write_body(
    w: &mut impl Write,
    kind: u8,
    images: &Tensor,
    labels: &[usize],
    num_classes: usize,
) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for &d in images.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let lw = label_width(num_classes);
    w.write_all(&[lw, kind])?;
    w.write_all(&(num_classes as u32).to_le_bytes())?;
    for &l in labels {
        w.write_all(&(l as u32).to_le_bytes()[..lw as usize])?;
    }
    for v in images.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_body(r: &mut impl Read) -> Result<(u8, Tensor, Vec<usize>, usize)> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, WHAT)?;
    if &magic != MAGIC {
        return Err(CoreError::format(WHAT, "bad magic"));
    }
    let mut ver = [0u8; 2];
    read_exact(r, &mut ver, WHAT)?;
    if u16::from_le_bytes(ver) != VERSION {
        return Err(CoreError::format(WHAT, format!("unsupported version {}", u16::from_le_bytes(ver))));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = read_u32(r)? as usize;
    }
    let mut lk = [0u8; 2];
    read_exact(r, &mut lk, WHAT)?;
    let [lw, kind] = lk;
    if ![1, 2, 4].contains(&lw) {
        return Err(CoreError::format(WHAT, format!("label width {lw}")));
    }
    let num_classes = read_u32(r)? as usize;
    let mut labels = Vec::with_capacity(dims[0]);
    for _ in 0..dims[0] {
        let mut b = [0u8; 4];
        read_exact(r, &mut b[..lw as usize], WHAT)?;
        labels.push(u32::from_le_bytes(b) as usize);
    }
    let count: usize = dims.iter().product();
    let mut buf = vec![0u8; count * 8];
    read_exact(r, &mut buf, WHAT)?;
    let data = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let images = Tensor::new(dims.to_vec(), data).map_err(|e| CoreError::format(WHAT, e.to_string()))?;
    Ok((kind, images, labels, num_classes))
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u16).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let mut len = [0u8; 2];
    read_exact(r, &mut len, WHAT)?;
    let mut buf = vec![0u8; u16::from_le_bytes(len) as usize];
    read_exact(r, &mut buf, WHAT)?;
    String::from_utf8(buf).map_err(|_| CoreError::format(WHAT, "metadata string is not UTF-8"))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, WHAT)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, WHAT)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, WHAT)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, sigma: f64) -> BlobConfig {
        BlobConfig {
            num_classes: 3,
            train_per_class: 6,
            test_per_class: 4,
            image_shape: [3, 8, 8],
            seed,
            noise_sigma: sigma,
        }
    }

    fn synth(values: Vec<f64>) -> SyntheticSet {
        let n = values.len();
        let meta = SyntheticMeta {
            method: "test".into(),
            ipc: 1,
            seed: 0,
            init: SyntheticInit::Xavier,
            iterations: 0,
            clipped_fraction: None,
            learned_lr: None,
        };
        SyntheticSet::new(Tensor::new(vec![2, 1, 1, n / 2], values).unwrap(), 2, meta).unwrap()
    }

    #[test]
    fn zero_noise_gives_identical_class_members() {
        let b = generate_blobs(&small(4, 0.0)).unwrap();
        for idx in b.train.class_indices() {
            for &i in &idx[1..] {
                assert_eq!(b.train.image(i), b.train.image(idx[0]));
            }
        }
        assert_ne!(b.train.image(0), b.train.image(6));
        // test split renders the same templates
        assert_eq!(b.test.image(0), b.train.image(0));
    }

    #[test]
    fn blobs_are_reproducible_and_seed_dependent() {
        let a = generate_blobs(&small(4, 0.5)).unwrap();
        let b = generate_blobs(&small(4, 0.5)).unwrap();
        assert_eq!(a.train.digest(), b.train.digest());
        assert_eq!(a.test_attributes, b.test_attributes);
        let c = generate_blobs(&small(5, 0.5)).unwrap();
        assert_ne!(a.train.digest(), c.train.digest());
        assert_ne!(a.train.images().data()[..192], a.test.images().data()[..192]);
        assert!(a.train.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn too_small_images_rejected() {
        let mut cfg = small(0, 0.1);
        cfg.image_shape = [3, 7, 8];
        assert!(generate_blobs(&cfg).is_err());
    }

    #[test]
    fn single_channel_blobs() {
        let mut cfg = small(0, 0.1);
        cfg.image_shape = [1, 8, 8];
        let b = generate_blobs(&cfg).unwrap();
        assert_eq!(b.train.image_shape(), [1, 8, 8]);
    }

    #[test]
    fn clip_examples() {
        let s = synth(vec![1.7, -0.3, 0.5, 1.0]);
        let c = clip_to_unit(&s);
        assert_eq!(c.images.data(), &[1.0, 0.0, 0.5, 1.0]);
        assert_eq!(c.meta.clipped_fraction, Some(0.5));
        assert_eq!(c.labels(), s.labels());
        let inside = synth(vec![0.0, 0.2, 1.0, 0.9]);
        let c = clip_to_unit(&inside);
        assert_eq!(c.images, inside.images);
        assert_eq!(c.meta.clipped_fraction, Some(0.0));
    }

    #[test]
    fn constant_pixels_give_spike() {
        let d = pixel_density(&[0.4; 64]).unwrap();
        let peak = d.x[d.density.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0];
        assert!((peak - 0.4).abs() < 1e-4);
        assert!((d.integral() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn synthetic_labels_are_class_major() {
        let b = generate_blobs(&small(1, 0.3)).unwrap();
        let s = SyntheticSet::initialize(&b.train, 2, SyntheticInit::RealImages, "dm", 7).unwrap();
        assert_eq!(s.labels(), &[0, 0, 1, 1, 2, 2]);
        let x = SyntheticSet::initialize(&b.train, 2, SyntheticInit::Xavier, "dm", 7).unwrap();
        let bound = (6.0f64 / (192.0 + 6.0 * 64.0)).sqrt();
        assert!(x.images.data().iter().all(|v| v.abs() <= bound));
        assert!(SyntheticSet::initialize(&b.train, 7, SyntheticInit::RealImages, "dm", 7).is_err());
    }

    #[test]
    fn mix_counts() {
        let b = generate_blobs(&small(1, 0.3)).unwrap();
        let s = SyntheticSet::initialize(&b.train, 2, SyntheticInit::Xavier, "dm", 7).unwrap();
        let m0 = mix(&b.train, &s, 0, 1).unwrap();
        assert_eq!(m0.data.images(), &s.images);
        let m = mix(&b.train, &s, 3, 1).unwrap();
        assert_eq!(m.data.len(), 6 + 9);
        assert_eq!(m.data.class_counts(), vec![5, 5, 5]);
        for (i, o) in m.origin.iter().enumerate() {
            if let Origin::Real(j) = *o {
                assert_eq!(m.data.image(i), b.train.image(j));
                assert_eq!(m.data.labels()[i], b.train.labels()[j]);
            }
        }
        assert!(mix(&b.train, &s, 7, 1).is_err());
    }

    #[test]
    fn file_roundtrips() {
        let b = generate_blobs(&small(2, 0.3)).unwrap();
        let mut buf = Vec::new();
        b.test.write_to(&mut buf).unwrap();
        let back = Dataset::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, b.test);
        let mut s = SyntheticSet::initialize(&b.train, 1, SyntheticInit::Xavier, "bptt", 3).unwrap();
        s.meta.learned_lr = Some(0.02);
        s.meta.iterations = 40;
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        let back = SyntheticSet::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, s);
        assert!(Dataset::read_from(&mut buf.as_slice()).is_err());
        assert!(SyntheticSet::read_from(&mut &buf[..20]).is_err());
    }

    #[test]
    fn attribute_csv_roundtrip() {
        let b = generate_blobs(&small(2, 0.5)).unwrap();
        let csv = b.train_attributes.to_csv();
        assert!(csv.starts_with("image_index,attribute_name,value\n0,hue_bucket,"));
        assert_eq!(Attributes::from_csv(&csv).unwrap(), b.train_attributes);
        assert_eq!(b.train_attributes.values.len(), b.train.len());
        assert!(Attributes::from_csv("bad\n").is_err());
    }
}
