//! Image-space machinery: the differentiable resize and border mask used by
//! the prompting transform, non-differentiable corruption generators, and
//! the procedural scene generator that stands in for real datasets.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor};
use crate::rng::{self, derive_seed, derive_seed_n};
use crate::task::{TaskId, TaskSpec};
use crate::text::{TokenId, Tokenizer};

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("unknown corruption kind '{0}'")]
    UnknownCorruption(String),
    #[error("unknown split '{0}'")]
    UnknownSplit(String),
}

/// An RGB image: a `[3×H×W]` tensor with values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image(Tensor);

impl Image {
    pub fn new(t: Tensor) -> Image {
        assert!(
            t.shape().len() == 3 && t.shape()[0] == 3,
            "image must be [3×H×W], got {:?}",
            t.shape()
        );
        assert!(t.shape()[1] >= 8 && t.shape()[2] >= 8, "image too small: {:?}", t.shape());
        assert!(
            t.data().iter().all(|&v| (0.0..=1.0).contains(&v)),
            "image values must lie in [0,1]"
        );
        Image(t)
    }

    /// Builds an image by clamping arbitrary values into `[0,1]`.
    pub fn clamped(t: Tensor) -> Image {
        let data = t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Image::new(Tensor::new(t.shape().to_vec(), data))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }
}

/// Differentiable bilinear resize with half-pixel-center sampling. The
/// output is a raw tensor (not clamped) so it can feed the prompt pipeline.
pub fn bilinear_resize(tape: &mut Tape, t: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    tape.bilinear_resize(t, out_h, out_w)
}

/// A `[3×h×w]` 0/1 mask that is 1 exactly on the border frame of width `p`.
pub fn make_border_mask(h: usize, w: usize, p: usize) -> Tensor {
    assert!(2 * p <= h.min(w), "border width {} too large for {}x{} canvas", p, h, w);
    let mut data = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                if y < p || y >= h - p || x < p || x >= w - p {
                    data[(c * h + y) * w + x] = 1.0;
                }
            }
        }
    }
    Tensor::new(vec![3, h, w], data)
}

// ── Corruptions ─────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorruptionKind {
    GaussianNoise,
    ImpulseNoise,
    GaussianBlur,
    Brightness,
    Contrast,
}

pub const CORRUPTION_KINDS: [CorruptionKind; 5] = [
    CorruptionKind::GaussianNoise,
    CorruptionKind::ImpulseNoise,
    CorruptionKind::GaussianBlur,
    CorruptionKind::Brightness,
    CorruptionKind::Contrast,
];

impl CorruptionKind {
    pub fn parse(s: &str) -> Result<CorruptionKind, ImagingError> {
        match s {
            "gaussian_noise" => Ok(CorruptionKind::GaussianNoise),
            "impulse_noise" => Ok(CorruptionKind::ImpulseNoise),
            "gaussian_blur" => Ok(CorruptionKind::GaussianBlur),
            "brightness" => Ok(CorruptionKind::Brightness),
            "contrast" => Ok(CorruptionKind::Contrast),
            other => Err(ImagingError::UnknownCorruption(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
        }
    }
}

/// Per-severity strength tables, index 0 = identity. All corruption
/// strengths are declared here and nowhere else.
pub mod severity {
    pub const GAUSS_SIGMA: [f64; 6] = [0.0, 0.04, 0.08, 0.12, 0.18, 0.26];
    pub const IMPULSE_P: [f64; 6] = [0.0, 0.01, 0.03, 0.06, 0.10, 0.17];
    pub const BLUR_SIGMA: [f64; 6] = [0.0, 0.5, 0.75, 1.0, 1.5, 2.2];
    pub const BRIGHT_SHIFT: [f64; 6] = [0.0, 0.06, 0.12, 0.18, 0.26, 0.36];
    pub const CONTRAST_FACTOR: [f64; 6] = [1.0, 0.85, 0.70, 0.55, 0.42, 0.30];
}

/// Applies a corruption at severity 1..=5. Deterministic given the seed;
/// the output is clamped back into `[0,1]`.
pub fn corrupt(img: &Image, kind: CorruptionKind, sev: usize, seed: u64) -> Image {
    assert!((1..=5).contains(&sev), "corruption severity must be in 1..=5, got {sev}");
    corrupt_level(img, kind, sev, seed)
}

/// Severity 0 is the identity; used internally and by tests.
pub(crate) fn corrupt_level(img: &Image, kind: CorruptionKind, sev: usize, seed: u64) -> Image {
    let (h, w) = (img.height(), img.width());
    let mut rng = rng::stream(derive_seed(seed, &format!("corrupt:{}:{}", kind.name(), sev)));
    let src = img.tensor().data();
    let data: Vec<f64> = match kind {
        CorruptionKind::GaussianNoise => {
            let sigma = severity::GAUSS_SIGMA[sev];
            src.iter().map(|v| v + sigma * rng::normal(&mut rng)).collect()
        }
        CorruptionKind::ImpulseNoise => {
            let p = severity::IMPULSE_P[sev];
            let mut out = src.to_vec();
            for y in 0..h {
                for x in 0..w {
                    if rng::uniform(&mut rng, 0.0, 1.0) < p {
                        let v = if rng::uniform(&mut rng, 0.0, 1.0) < 0.5 { 0.0 } else { 1.0 };
                        for c in 0..3 {
                            out[(c * h + y) * w + x] = v;
                        }
                    }
                }
            }
            out
        }
        CorruptionKind::GaussianBlur => {
            let sigma = severity::BLUR_SIGMA[sev];
            if sigma == 0.0 {
                src.to_vec()
            } else {
                gaussian_blur(src, h, w, sigma)
            }
        }
        CorruptionKind::Brightness => {
            let b = severity::BRIGHT_SHIFT[sev];
            src.iter().map(|v| v + b).collect()
        }
        CorruptionKind::Contrast => {
            let c = severity::CONTRAST_FACTOR[sev];
            src.iter().map(|v| (v - 0.5) * c + 0.5).collect()
        }
    };
    Image::clamped(Tensor::new(vec![3, h, w], data))
}

fn gaussian_blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-0.5 * (i as f64 / sigma).powi(2)).exp());
    }
    let ksum: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= ksum;
    }
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut tmp = vec![0.0; src.len()];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let sx = clamp(x as isize + ki as isize - radius, w);
                    s += k * src[(c * h + y) * w + sx];
                }
                tmp[(c * h + y) * w + x] = s;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let sy = clamp(y as isize + ki as isize - radius, h);
                    s += k * tmp[(c * h + sy) * w + x];
                }
                out[(c * h + y) * w + x] = s;
            }
        }
    }
    out
}

// ── Scenes ──────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
}

pub const SHAPE_KINDS: [ShapeKind; 4] =
    [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Cross];

impl ShapeKind {
    pub fn word(&self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
        }
    }
}

/// The 8-color palette; index 0 is the "red" the presence task asks about.
pub const PALETTE: [(&str, [f64; 3]); 8] = [
    ("red", [0.85, 0.10, 0.10]),
    ("green", [0.10, 0.75, 0.15]),
    ("blue", [0.15, 0.20, 0.85]),
    ("yellow", [0.90, 0.85, 0.10]),
    ("cyan", [0.10, 0.80, 0.85]),
    ("magenta", [0.85, 0.15, 0.80]),
    ("white", [0.95, 0.95, 0.95]),
    ("gray", [0.55, 0.55, 0.55]),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub kind: ShapeKind,
    pub color: usize,
    pub center: (f64, f64),
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    pub background: [f64; 3],
    pub canvas: (usize, usize),
}

impl SceneSpec {
    pub fn validate(&self) {
        assert!(
            (1..=5).contains(&self.objects.len()),
            "scene must hold 1..=5 objects, got {}",
            self.objects.len()
        );
        let (h, w) = self.canvas;
        for o in &self.objects {
            assert!(o.color < PALETTE.len(), "palette index {} out of range", o.color);
            let (cx, cy) = o.center;
            assert!(
                cx - o.radius >= 0.0 && cx + o.radius <= w as f64 && cy - o.radius >= 0.0 && cy + o.radius <= h as f64,
                "object at ({cx},{cy}) radius {} leaves the {h}x{w} canvas",
                o.radius
            );
        }
        for i in 0..self.objects.len() {
            for j in (i + 1)..self.objects.len() {
                let a = &self.objects[i];
                let b = &self.objects[j];
                let d = ((a.center.0 - b.center.0).powi(2) + (a.center.1 - b.center.1).powi(2)).sqrt();
                assert!(d >= a.radius + b.radius, "objects {i} and {j} overlap");
            }
        }
    }

    /// Rasterizes the scene: background fill, then objects in order.
    pub fn render(&self) -> Image {
        let (h, w) = self.canvas;
        let mut data = vec![0.0; 3 * h * w];
        for c in 0..3 {
            for i in 0..h * w {
                data[c * h * w + i] = self.background[c];
            }
        }
        for o in &self.objects {
            let rgb = PALETTE[o.color].1;
            let (cx, cy) = o.center;
            let y0 = ((cy - o.radius).floor().max(0.0)) as usize;
            let y1 = ((cy + o.radius).ceil() as usize).min(h);
            let x0 = ((cx - o.radius).floor().max(0.0)) as usize;
            let x1 = ((cx + o.radius).ceil() as usize).min(w);
            for y in y0..y1 {
                for x in x0..x1 {
                    let px = x as f64 + 0.5;
                    let py = y as f64 + 0.5;
                    if inside_shape(o.kind, px - cx, py - cy, o.radius) {
                        for c in 0..3 {
                            data[(c * h + y) * w + x] = rgb[c];
                        }
                    }
                }
            }
        }
        Image::new(Tensor::new(vec![3, h, w], data))
    }
}

fn inside_shape(kind: ShapeKind, dx: f64, dy: f64, r: f64) -> bool {
    match kind {
        ShapeKind::Circle => dx * dx + dy * dy <= r * r,
        ShapeKind::Square => dx.abs().max(dy.abs()) <= r * 0.8,
        ShapeKind::Triangle => {
            let a = (0.0, -r);
            let b = (-0.87 * r, 0.5 * r);
            let c = (0.87 * r, 0.5 * r);
            let sign = |p: (f64, f64), q: (f64, f64), s: (f64, f64)| {
                (p.0 - s.0) * (q.1 - s.1) - (q.0 - s.0) * (p.1 - s.1)
            };
            let d1 = sign((dx, dy), a, b);
            let d2 = sign((dx, dy), b, c);
            let d3 = sign((dx, dy), c, a);
            let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
            let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
            !(neg && pos)
        }
        ShapeKind::Cross => {
            (dx.abs() <= 0.33 * r && dy.abs() <= r) || (dy.abs() <= 0.33 * r && dx.abs() <= r)
        }
    }
}

// ── Dataset generation ──────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn tag(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split, ImagingError> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(ImagingError::UnknownSplit(other.to_string())),
        }
    }
}

/// One labeled example: the rendered image, tokenized prompt/target texts,
/// the ground-truth description for the dual encoder, and the scene it was
/// rendered from.
#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub id: u64,
    pub image: Image,
    pub prompt_text: Vec<TokenId>,
    pub target_text: Vec<TokenId>,
    pub description_text: Vec<TokenId>,
    pub label_index: usize,
    pub scene: SceneSpec,
}

/// Class label used for balancing/ranking. For counting tasks
/// `label_index` is the object count, so the candidate index is count-1.
pub fn candidate_index(task: &TaskSpec, sample: &LabeledSample) -> usize {
    match task.id {
        TaskId::Count => sample.label_index - 1,
        _ => sample.label_index,
    }
}

/// Generates `n` samples for a task. Deterministic given (seed, split);
/// the three splits draw from disjoint seed streams, classes are balanced
/// (per-class counts differ by at most 1), and sample `i` depends only on
/// `(seed, split, i)`.
pub fn generate_dataset(
    task: &TaskSpec,
    canvas: usize,
    n: usize,
    seed: u64,
    split: Split,
) -> Vec<LabeledSample> {
    assert!(n >= 1, "dataset size must be >= 1");
    let tok = Tokenizer::new();
    let split_seed = derive_seed(seed, &format!("dataset:{}:{}", task.name, split.tag()));
    let classes = match task.id {
        TaskId::Count => 5,
        _ => task.class_count(),
    };
    (0..n)
        .map(|i| {
            let mut rng = rng::stream(derive_seed_n(split_seed, "sample", i as u64));
            let class = i % classes;
            build_sample(task, canvas, class, derive_seed_n(split_seed, "sample", i as u64), &mut rng, &tok)
        })
        .collect()
}

fn build_sample(
    task: &TaskSpec,
    canvas: usize,
    class: usize,
    id: u64,
    rng: &mut ChaCha8Rng,
    tok: &Tokenizer,
) -> LabeledSample {
    let (scene, label_index, target_word, filler) = match task.id {
        TaskId::Shapes | TaskId::ShapesAlt => {
            let alt = task.id == TaskId::ShapesAlt;
            let kind = SHAPE_KINDS[class];
            let r_lo = if alt { 0.20 } else { 0.16 } * canvas as f64;
            let r_hi = if alt { 0.30 } else { 0.25 } * canvas as f64;
            let objects = place_objects(rng, canvas, &[kind], r_lo, r_hi, None);
            let scene = scene_with_bg(rng, canvas, objects, alt);
            (scene, class, kind.word().to_string(), kind.word().to_string())
        }
        TaskId::Count => {
            let k = class + 1;
            let kinds: Vec<ShapeKind> =
                (0..k).map(|_| SHAPE_KINDS[rng.random_range(0..SHAPE_KINDS.len())]).collect();
            let r_lo = 0.09 * canvas as f64;
            let r_hi = 0.14 * canvas as f64;
            let objects = place_objects(rng, canvas, &kinds, r_lo, r_hi, None);
            let scene = scene_with_bg(rng, canvas, objects, false);
            let word = task.candidates[k - 1].clone();
            (scene, k, word.clone(), word)
        }
        TaskId::Presence => {
            let has_red = class == 1;
            let k = 1 + rng.random_range(0..4usize);
            let kinds: Vec<ShapeKind> =
                (0..k).map(|_| SHAPE_KINDS[rng.random_range(0..SHAPE_KINDS.len())]).collect();
            let r_lo = 0.10 * canvas as f64;
            let r_hi = 0.15 * canvas as f64;
            let colors: Vec<usize> = (0..k)
                .map(|i| {
                    if has_red && i == 0 {
                        0
                    } else {
                        1 + rng.random_range(0..PALETTE.len() - 1)
                    }
                })
                .collect();
            let objects = place_objects(rng, canvas, &kinds, r_lo, r_hi, Some(&colors));
            let scene = scene_with_bg(rng, canvas, objects, false);
            let filler = scene
                .objects
                .iter()
                .map(|o| format!("{} {}", PALETTE[o.color].0, o.kind.word()))
                .collect::<Vec<_>>()
                .join(" and ");
            let word = task.candidates[class].clone();
            (scene, class, word, filler)
        }
    };

    scene.validate();
    let base = scene.render();
    // Light pixel noise so surrogates must generalize rather than memorize
    // exact rasters.
    let noisy: Vec<f64> =
        base.tensor().data().iter().map(|v| v + 0.015 * rng::normal(rng)).collect();
    let image = Image::clamped(Tensor::new(base.tensor().shape().to_vec(), noisy));

    let description = task.describe(&filler);
    LabeledSample {
        id,
        image,
        prompt_text: tok.tokenize(&task.prompt_template).expect("prompt template in vocabulary"),
        target_text: tok.tokenize(&target_word).expect("target word in vocabulary"),
        description_text: tok.tokenize(&description).expect("description in vocabulary"),
        label_index,
        scene,
    }
}

fn scene_with_bg(rng: &mut ChaCha8Rng, canvas: usize, objects: Vec<SceneObject>, alt: bool) -> SceneSpec {
    let base: [f64; 3] = if alt { [0.30, 0.32, 0.36] } else { [0.08, 0.09, 0.11] };
    let jitter = if alt { 0.06 } else { 0.04 };
    let background = [
        (base[0] + rng::uniform(rng, -jitter, jitter)).clamp(0.0, 1.0),
        (base[1] + rng::uniform(rng, -jitter, jitter)).clamp(0.0, 1.0),
        (base[2] + rng::uniform(rng, -jitter, jitter)).clamp(0.0, 1.0),
    ];
    SceneSpec { objects, background, canvas: (canvas, canvas) }
}

/// Places non-overlapping objects by rejection sampling, shrinking radii if
/// a configuration cannot be placed.
fn place_objects(
    rng: &mut ChaCha8Rng,
    canvas: usize,
    kinds: &[ShapeKind],
    r_lo: f64,
    r_hi: f64,
    colors: Option<&[usize]>,
) -> Vec<SceneObject> {
    let mut shrink = 1.0;
    'outer: loop {
        let mut placed: Vec<SceneObject> = Vec::with_capacity(kinds.len());
        for (i, &kind) in kinds.iter().enumerate() {
            let mut ok = false;
            for _try in 0..200 {
                let r = rng::uniform(rng, r_lo * shrink, r_hi * shrink);
                let margin = r + 1.0;
                let cx = rng::uniform(rng, margin, canvas as f64 - margin);
                let cy = rng::uniform(rng, margin, canvas as f64 - margin);
                let clear = placed.iter().all(|o| {
                    let d = ((o.center.0 - cx).powi(2) + (o.center.1 - cy).powi(2)).sqrt();
                    d >= o.radius + r + 1.0
                });
                if clear {
                    let color = match colors {
                        Some(cs) => cs[i],
                        None => rng.random_range(0..PALETTE.len()),
                    };
                    placed.push(SceneObject { kind, color, center: (cx, cy), radius: r });
                    ok = true;
                    break;
                }
            }
            if !ok {
                shrink *= 0.9;
                continue 'outer;
            }
        }
        return placed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::task::TaskSpec;

    #[test]
    fn border_mask_paper_scale_counts() {
        let mask = make_border_mask(224, 224, 30);
        let per_channel: f64 = mask.data()[..224 * 224].iter().sum();
        assert_eq!(per_channel as usize, 224 * 224 - 164 * 164);
        assert_eq!(per_channel as usize, 23280);
        let total: f64 = mask.data().iter().sum();
        assert_eq!(total as usize, 69840);
    }

    #[test]
    fn border_mask_degenerate_widths() {
        assert!(make_border_mask(16, 16, 0).data().iter().all(|&v| v == 0.0));
        assert!(make_border_mask(16, 16, 8).data().iter().all(|&v| v == 1.0));
        let r = std::panic::catch_unwind(|| make_border_mask(16, 16, 9));
        assert!(r.is_err());
    }

    #[test]
    fn border_mask_complement_is_the_interior() {
        let (h, w, p) = (20, 14, 4);
        let mask = make_border_mask(h, w, p);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let interior = 1.0 - mask.at3(c, y, x);
                    let expect = (y >= p && y < h - p && x >= p && x < w - p) as usize as f64;
                    assert_eq!(interior, expect, "at ({c},{y},{x})");
                }
            }
        }
    }

    #[test]
    fn resize_gradient_passes_finite_differences() {
        for pt in 0..3u64 {
            let mut r = rng::stream(500 + pt);
            let data: Vec<f64> = (0..3 * 8 * 8).map(|_| rng::uniform(&mut r, 0.0, 1.0)).collect();
            let img = Tensor::new(vec![3, 8, 8], data);
            let err = grad_check(
                |t, p| {
                    let y = t.bilinear_resize(p, 5, 5);
                    let y = t.mul(&y, &y);
                    t.sum_all(&y)
                },
                &img,
                1e-5,
            );
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn corruption_identity_at_level_zero() {
        let task = TaskSpec::parse("shapes").unwrap();
        let img = &generate_dataset(&task, 32, 1, 9, Split::Train)[0].image;
        for kind in CORRUPTION_KINDS {
            let out = corrupt_level(img, kind, 0, 4);
            assert_eq!(&out, img, "{:?}", kind);
        }
    }

    #[test]
    fn corruption_is_deterministic() {
        let task = TaskSpec::parse("shapes").unwrap();
        let img = &generate_dataset(&task, 32, 1, 9, Split::Train)[0].image;
        for kind in CORRUPTION_KINDS {
            let a = corrupt(img, kind, 3, 77);
            let b = corrupt(img, kind, 3, 77);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn gaussian_noise_sigma_matches_sample_statistics() {
        // Constant-0.5 image: per-value deviation must match the configured
        // sigma within 10% over >=10^4 values.
        let img = Image::new(Tensor::filled(vec![3, 64, 64], 0.5));
        let out = corrupt(&img, CorruptionKind::GaussianNoise, 3, 123);
        let devs: Vec<f64> =
            out.tensor().data().iter().zip(img.tensor().data()).map(|(a, b)| a - b).collect();
        assert!(devs.len() >= 10_000);
        let var = devs.iter().map(|d| d * d).sum::<f64>() / devs.len() as f64;
        let sigma = var.sqrt();
        let want = severity::GAUSS_SIGMA[3];
        assert!((sigma - want).abs() / want < 0.10, "sigma {sigma} vs {want}");
    }

    #[test]
    fn corruption_distortion_is_monotone_in_severity() {
        let task = TaskSpec::parse("shapes").unwrap();
        let images: Vec<Image> =
            generate_dataset(&task, 32, 32, 11, Split::Train).into_iter().map(|s| s.image).collect();
        for kind in CORRUPTION_KINDS {
            let mut prev = -1.0;
            for sev in 1..=5 {
                let mean_l2: f64 = images
                    .iter()
                    .enumerate()
                    .map(|(i, img)| corrupt(img, kind, sev, i as u64).tensor().minus(img.tensor()).l2())
                    .sum::<f64>()
                    / images.len() as f64;
                assert!(mean_l2 >= prev, "{:?}: severity {} broke monotonicity", kind, sev);
                prev = mean_l2;
            }
        }
    }

    #[test]
    fn dataset_is_deterministic_and_balanced() {
        let task = TaskSpec::parse("shapes").unwrap();
        let a = generate_dataset(&task, 32, 100, 5, Split::Train);
        let b = generate_dataset(&task, 32, 100, 5, Split::Train);
        assert_eq!(a.len(), 100);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.label_index, y.label_index);
            assert_eq!(x.id, y.id);
        }
        let mut counts = [0usize; 4];
        for s in &a {
            counts[s.label_index] += 1;
        }
        assert_eq!(counts, [25, 25, 25, 25]);
    }

    #[test]
    fn splits_draw_from_disjoint_streams() {
        let task = TaskSpec::parse("shapes").unwrap();
        let tr = generate_dataset(&task, 32, 8, 5, Split::Train);
        let va = generate_dataset(&task, 32, 8, 5, Split::Val);
        assert!(tr.iter().zip(&va).all(|(a, b)| a.image != b.image));
    }

    #[test]
    fn count_labels_match_scene_object_counts() {
        let task = TaskSpec::parse("count").unwrap();
        for s in generate_dataset(&task, 48, 50, 13, Split::Val) {
            assert_eq!(s.label_index, s.scene.objects.len());
        }
    }

    #[test]
    fn presence_labels_match_red_objects() {
        let task = TaskSpec::parse("presence").unwrap();
        for s in generate_dataset(&task, 48, 60, 17, Split::Test) {
            let has_red = s.scene.objects.iter().any(|o| o.color == 0);
            assert_eq!(s.label_index == 1, has_red);
        }
    }

    #[test]
    fn descriptions_instantiate_the_template() {
        let tok = Tokenizer::new();
        for name in ["shapes", "count", "presence"] {
            let task = TaskSpec::parse(name).unwrap();
            for s in generate_dataset(&task, 32, 12, 23, Split::Train) {
                let text = tok.detokenize(&s.description_text);
                let prefix = task.description_template.split("{}").next().unwrap();
                assert!(text.starts_with(prefix.trim_end()), "{text}");
                match task.id {
                    TaskId::Shapes | TaskId::ShapesAlt => {
                        let word = SHAPE_KINDS[s.label_index].word();
                        assert_eq!(text, task.describe(word));
                    }
                    TaskId::Count => {
                        let word = &task.candidates[s.label_index - 1];
                        assert_eq!(text, task.describe(word));
                    }
                    TaskId::Presence => {
                        let filler = s
                            .scene
                            .objects
                            .iter()
                            .map(|o| format!("{} {}", PALETTE[o.color].0, o.kind.word()))
                            .collect::<Vec<_>>()
                            .join(" and ");
                        assert_eq!(text, task.describe(&filler));
                    }
                }
            }
        }
    }
}
