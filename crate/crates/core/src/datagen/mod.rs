//! Procedural two-domain segmentation benchmark.
//!
//! Each image shows up to four non-overlapping shapes (circle, square,
//! triangle) on a textured background. A [`DomainSpec`] fixes the colour
//! palette, a hue rotation of that palette, the noise level and the shape
//! sizes; the target domain is the source domain with its palette rotated,
//! which produces a controllable appearance shift while the label space
//! stays identical.
//!
//! [`make_splits`] carves the target domain into labeled, unlabeled and
//! validation subsets. Unlabeled annotations are kept in a [`SealedLabel`]
//! that counts every read, so tests can prove the trainer never looks.

mod export;
mod labels;

use std::collections::HashSet;
use std::f64::consts::PI;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Real, Tensor};
use crate::error::{Error, Result};

pub use export::{export_bundle, import_bundle, ManifestRecord, MANIFEST_FILE};
pub use labels::{downsample_labels, DownsampledLabelMap, LabelMap, IGNORE};

/// Smallest supported image side.
pub const MIN_RESOLUTION: usize = 16;

const MAX_SHAPES: usize = 4;
const PLACEMENT_TRIES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    SourceTrain,
    TargetLabeled,
    TargetUnlabeled,
    TargetVal,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::SourceTrain => "source_train",
            Split::TargetLabeled => "target_labeled",
            Split::TargetUnlabeled => "target_unlabeled",
            Split::TargetVal => "target_val",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        [Split::SourceTrain, Split::TargetLabeled, Split::TargetUnlabeled, Split::TargetVal]
            .into_iter()
            .find(|s| s.name() == name)
    }
}

/// Appearance model of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    /// Base RGB colour per class; entry 0 is the background.
    pub palette: Vec<[f64; 3]>,
    /// Rotation of every palette colour about the grey axis, in radians.
    pub palette_hue_shift: f64,
    /// Standard deviation of the per-pixel Gaussian noise; also the
    /// amplitude of the background texture.
    pub noise_sigma: f64,
    /// Shape size range as fractions of the shorter image side.
    pub shape_scale_range: (f64, f64),
    /// Probability of each class per shape slot; drawing class 0 leaves the
    /// slot empty.
    pub class_frequency: Vec<f64>,
    pub seed: u64,
}

impl DomainSpec {
    /// Source domain of the default four-class benchmark.
    pub fn toy_source() -> Self {
        DomainSpec {
            palette: vec![[0.55, 0.50, 0.42], [0.85, 0.25, 0.20], [0.25, 0.70, 0.30], [0.25, 0.35, 0.85]],
            palette_hue_shift: 0.0,
            noise_sigma: 0.08,
            shape_scale_range: (0.22, 0.42),
            class_frequency: vec![0.1, 0.3, 0.3, 0.3],
            seed: 1,
        }
    }

    /// Target domain of the default benchmark: the source palette rotated by 90 degrees.
    pub fn toy_target() -> Self {
        DomainSpec { palette_hue_shift: PI / 2.0, noise_sigma: 0.12, seed: 2, ..Self::toy_source() }
    }

    pub fn classes(&self) -> usize {
        self.palette.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.palette.len();
        if c < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, palette has {c}")));
        }
        if c > IGNORE as usize {
            return Err(Error::InvalidArgument(format!("{c} classes collide with the ignore index")));
        }
        if self.class_frequency.len() != c {
            return Err(Error::InvalidArgument(format!(
                "class_frequency has {} entries for {c} classes",
                self.class_frequency.len()
            )));
        }
        if self.class_frequency.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::InvalidArgument("class_frequency entries must be >= 0".into()));
        }
        let total: f64 = self.class_frequency.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("class_frequency sums to {total}, not 1")));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!("noise_sigma {} < 0", self.noise_sigma)));
        }
        let (lo, hi) = self.shape_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidArgument(format!("bad shape_scale_range ({lo}, {hi})")));
        }
        if self.palette.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("palette colours must lie in [0,1]".into()));
        }
        Ok(())
    }

    /// Palette after the hue rotation, clipped to `[0,1]`.
    pub fn rendered_palette(&self) -> Vec<[f64; 3]> {
        self.palette.iter().map(|&c| rotate_hue(c, self.palette_hue_shift)).collect()
    }
}

/// Rotates an RGB colour about the grey diagonal by `angle` radians.
pub fn rotate_hue(rgb: [f64; 3], angle: f64) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    let a = (1.0 - c) / 3.0;
    let b = (1.0f64 / 3.0).sqrt() * s;
    let m = [[c + a, a - b, a + b], [a + b, c + a, a - b], [a - b, a + b, c + a]];
    let mut out = [0.0; 3];
    for (o, row) in out.iter_mut().zip(&m) {
        *o = (row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2]).clamp(0.0, 1.0);
    }
    out
}

/// 8-bit RGB image, channel-major (`[3, h, w]`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "image {height}x{width} needs {} bytes, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Pixel value of channel `ch` scaled to `[0,1]`.
    pub fn value(&self, ch: usize, y: usize, x: usize) -> f64 {
        self.data[(ch * self.height + y) * self.width + x] as f64 / 255.0
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let scale = T::lit(1.0 / 255.0);
        Tensor::from_fn(vec![3, self.height, self.width], |i| T::lit(self.data[i] as f64) * scale)
    }
}

/// Annotation that is only readable through an audited accessor.
#[derive(Debug, Clone)]
pub struct SealedLabel {
    label: LabelMap,
    reads: Arc<AtomicUsize>,
}

impl SealedLabel {
    /// Returns the label and records the access.
    pub fn reveal(&self) -> &LabelMap {
        self.reads.fetch_add(1, Ordering::SeqCst);
        &self.label
    }
}

#[derive(Debug, Clone)]
pub enum Annotation {
    Visible(LabelMap),
    Sealed(SealedLabel),
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: u64,
    pub domain: Domain,
    pub image: Image,
    pub annotation: Annotation,
    /// Class drawn for every shape slot (0 = slot left empty).
    pub slot_classes: Vec<u8>,
}

impl Sample {
    /// Ground truth, or `None` when it is sealed.
    pub fn label(&self) -> Option<&LabelMap> {
        match &self.annotation {
            Annotation::Visible(l) => Some(l),
            Annotation::Sealed(_) => None,
        }
    }

    pub fn is_sealed(&self) -> bool {
        matches!(self.annotation, Annotation::Sealed(_))
    }

    fn seal(mut self, reads: &Arc<AtomicUsize>) -> Self {
        if let Annotation::Visible(label) = self.annotation {
            self.annotation = Annotation::Sealed(SealedLabel { label, reads: Arc::clone(reads) });
        }
        self
    }
}

fn sample_id(domain: Domain, index: usize) -> u64 {
    let tag = match domain {
        Domain::Source => 0u64,
        Domain::Target => 1u64,
    };
    (tag << 32) | index as u64
}

/// Generates `count` samples of one domain. Output is a pure function of the
/// arguments; every sample draws from its own RNG stream keyed by its id.
pub fn generate_domain(
    spec: &DomainSpec,
    domain: Domain,
    count: usize,
    resolution: (usize, usize),
) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(Error::InvalidArgument("sample count must be positive".into()));
    }
    let (h, w) = resolution;
    if h < MIN_RESOLUTION || w < MIN_RESOLUTION {
        return Err(Error::InvalidArgument(format!(
            "resolution {h}x{w} below the {MIN_RESOLUTION}x{MIN_RESOLUTION} minimum"
        )));
    }
    spec.validate()?;
    let colours = spec.rendered_palette();
    Ok((0..count).map(|i| render_sample(spec, &colours, sample_id(domain, i), domain, h, w)).collect())
}

#[derive(Debug, Clone, Copy)]
struct Placed {
    class: u8,
    kind: ShapeKind,
    cy: f64,
    cx: f64,
    size: f64,
}

#[derive(Debug, Clone, Copy)]
enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl Placed {
    fn bbox(&self) -> (f64, f64, f64, f64) {
        let r = self.size / 2.0;
        (self.cy - r, self.cx - r, self.cy + r, self.cx + r)
    }

    fn contains(&self, py: f64, px: f64) -> bool {
        let r = self.size / 2.0;
        let (dy, dx) = (py - self.cy, px - self.cx);
        match self.kind {
            ShapeKind::Circle => dy * dy + dx * dx <= r * r,
            ShapeKind::Square => dy.abs() <= r && dx.abs() <= r,
            ShapeKind::Triangle => {
                // apex at the top, base along the bottom edge of the box
                if dy.abs() > r {
                    return false;
                }
                let t = (dy + r) / (2.0 * r);
                dx.abs() <= t * r
            }
        }
    }
}

fn shape_kind(class: u8) -> ShapeKind {
    match (class - 1) % 3 {
        0 => ShapeKind::Circle,
        1 => ShapeKind::Square,
        _ => ShapeKind::Triangle,
    }
}

fn draw_class(rng: &mut ChaCha8Rng, freq: &[f64]) -> u8 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &p) in freq.iter().enumerate() {
        acc += p;
        if u < acc {
            return k as u8;
        }
    }
    // rounding slack: fall back to the last class with nonzero mass
    freq.iter().rposition(|&p| p > 0.0).unwrap_or(0) as u8
}

fn render_sample(spec: &DomainSpec, colours: &[[f64; 3]], id: u64, domain: Domain, h: usize, w: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(id);
    let side = h.min(w) as f64;

    let slots = rng.random_range(1..=MAX_SHAPES);
    let slot_classes: Vec<u8> = (0..slots).map(|_| draw_class(&mut rng, &spec.class_frequency)).collect();
    let mut placed: Vec<Placed> = Vec::new();
    for &class in &slot_classes {
        if class == 0 {
            continue;
        }
        let (lo, hi) = spec.shape_scale_range;
        let size = side * if hi > lo { rng.random_range(lo..hi) } else { lo };
        let r = size / 2.0;
        for _ in 0..PLACEMENT_TRIES {
            let cy = rng.random_range(r..=(h as f64 - r));
            let cx = rng.random_range(r..=(w as f64 - r));
            let cand = Placed { class, kind: shape_kind(class), cy, cx, size };
            let (a0, b0, a1, b1) = cand.bbox();
            let clear = placed.iter().all(|p| {
                let (c0, d0, c1, d1) = p.bbox();
                a1 + 1.0 <= c0 || c1 + 1.0 <= a0 || b1 + 1.0 <= d0 || d1 + 1.0 <= b0
            });
            if clear {
                placed.push(cand);
                break;
            }
        }
    }

    let mut label = LabelMap::filled(h, w, 0);
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            if let Some(p) = placed.iter().find(|p| p.contains(py, px)) {
                label.set(y, x, p.class);
            }
        }
    }

    let sigma = spec.noise_sigma;
    let (fy, fx, phase): (f64, f64, f64) = (
        rng.random_range(0.1..0.6),
        rng.random_range(0.1..0.6),
        rng.random_range(0.0..2.0 * PI),
    );
    let tint: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let noise = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("sigma is finite and positive"));
    let mut data = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let k = label.get(y, x) as usize;
            let base = colours[k];
            let texture = if k == 0 { sigma * (fy * y as f64 + fx * x as f64 + phase).sin() } else { 0.0 };
            for ch in 0..3 {
                let mut v = base[ch] + texture * tint[ch];
                if let Some(n) = &noise {
                    v += n.sample(&mut rng);
                }
                data[(ch * h + y) * w + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }

    Sample {
        id,
        domain,
        image: Image { height: h, width: w, data },
        annotation: Annotation::Visible(label),
        slot_classes,
    }
}

/// Sizes of the four subsets and the seed of the target shuffle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPlan {
    pub n_source: usize,
    pub n_target_labeled: usize,
    pub n_target_unlabeled: usize,
    pub n_target_val: usize,
    pub seed: u64,
}

/// The four disjoint subsets consumed by training and evaluation.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub classes: usize,
    pub resolution: (usize, usize),
    pub source_train: Vec<Sample>,
    pub target_labeled: Vec<Sample>,
    /// Annotations here are sealed.
    pub target_unlabeled: Vec<Sample>,
    pub target_val: Vec<Sample>,
    sealed_reads: Arc<AtomicUsize>,
}

impl DatasetBundle {
    /// Number of times any sealed annotation of this bundle was revealed.
    pub fn sealed_reads(&self) -> usize {
        self.sealed_reads.load(Ordering::SeqCst)
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::SourceTrain => &self.source_train,
            Split::TargetLabeled => &self.target_labeled,
            Split::TargetUnlabeled => &self.target_unlabeled,
            Split::TargetVal => &self.target_val,
        }
    }

    fn assemble(
        classes: usize,
        resolution: (usize, usize),
        source_train: Vec<Sample>,
        target_labeled: Vec<Sample>,
        target_unlabeled: Vec<Sample>,
        target_val: Vec<Sample>,
    ) -> Result<Self> {
        let reads = Arc::new(AtomicUsize::new(0));
        let target_unlabeled = target_unlabeled.into_iter().map(|s| s.seal(&reads)).collect();
        let bundle = DatasetBundle {
            classes,
            resolution,
            source_train,
            target_labeled,
            target_unlabeled,
            target_val,
            sealed_reads: reads,
        };
        bundle.check_disjoint()?;
        Ok(bundle)
    }

    fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in [&self.source_train, &self.target_labeled, &self.target_unlabeled, &self.target_val]
            .into_iter()
            .flatten()
        {
            if !seen.insert(s.id) {
                return Err(Error::Dataset(format!("sample id {:#x} appears in more than one split", s.id)));
            }
        }
        Ok(())
    }
}

/// Generates both domains and partitions the target domain.
///
/// The target pool is shuffled with `plan.seed`; validation takes the first
/// `n_target_val` samples, the labeled subset the next `n_target_labeled`,
/// the unlabeled subset the rest. Growing the labeled budget while keeping the
/// labeled + unlabeled total fixed therefore keeps the validation set and
/// nests the labeled subsets.
pub fn make_splits(
    plan: &SplitPlan,
    source_spec: &DomainSpec,
    target_spec: &DomainSpec,
    resolution: (usize, usize),
) -> Result<DatasetBundle> {
    if source_spec.classes() != target_spec.classes() {
        return Err(Error::InvalidArgument(format!(
            "source has {} classes, target {}",
            source_spec.classes(),
            target_spec.classes()
        )));
    }
    if plan.n_source == 0 {
        return Err(Error::InvalidArgument("n_source must be positive".into()));
    }
    let n_target = plan.n_target_labeled + plan.n_target_unlabeled + plan.n_target_val;
    if n_target == 0 {
        return Err(Error::InvalidArgument("target domain needs at least one sample".into()));
    }
    let source = generate_domain(source_spec, Domain::Source, plan.n_source, resolution)?;
    let mut target = generate_domain(target_spec, Domain::Target, n_target, resolution)?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    target.shuffle(&mut rng);
    let unlabeled = target.split_off(plan.n_target_val + plan.n_target_labeled);
    let labeled = target.split_off(plan.n_target_val);
    DatasetBundle::assemble(source_spec.classes(), resolution, source, labeled, unlabeled, target)
}
