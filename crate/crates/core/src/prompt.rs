//! The learnable border prompt and the transform that composes it with a
//! resized input image.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::imaging::{make_border_mask, Image};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Vp,
    Evp,
    Tvp,
}

impl Method {
    pub fn parse(s: &str) -> Option<Method> {
        match s {
            "vp" => Some(Method::Vp),
            "evp" => Some(Method::Evp),
            "tvp" => Some(Method::Tvp),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Vp => "vp",
            Method::Evp => "evp",
            Method::Tvp => "tvp",
        }
    }

    pub fn tag(&self) -> u8 {
        match self {
            Method::Vp => 0,
            Method::Evp => 1,
            Method::Tvp => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Method> {
        match tag {
            0 => Some(Method::Vp),
            1 => Some(Method::Evp),
            2 => Some(Method::Tvp),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum InitMode {
    Zeros,
    /// Border entries drawn uniformly from `(-a, a)`.
    Uniform { a: f64 },
}

/// Provenance carried alongside the learned values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptMeta {
    pub method: Option<Method>,
    pub source_models: Vec<String>,
    pub seed: u64,
    pub config_hash: u64,
}

/// A border perturbation of width `p` on an `h×w` canvas. The mask is
/// always `make_border_mask(h, w, p)` and the interior of `delta` is zero.
#[derive(Clone, Debug)]
pub struct VisualPrompt {
    delta: Tensor,
    width: usize,
    mask: Tensor,
    canvas: (usize, usize),
    pub meta: PromptMeta,
}

impl VisualPrompt {
    /// Wraps existing values; `delta` must vanish outside the mask support.
    /// Width 0 (an empty prompt) is allowed here, unlike [`init_prompt`].
    pub fn new(h: usize, w: usize, p: usize, delta: Tensor, meta: PromptMeta) -> VisualPrompt {
        assert!(2 * p <= h.min(w), "prompt width {p} too large for {h}x{w}");
        assert!(delta.shape() == [3, h, w], "delta shape {:?} does not match canvas", delta.shape());
        let mask = make_border_mask(h, w, p);
        for (d, m) in delta.data().iter().zip(mask.data()) {
            assert!(*m == 1.0 || *d == 0.0, "delta carries values outside the border support");
        }
        VisualPrompt { delta, width: p, mask, canvas: (h, w), meta }
    }

    pub fn delta(&self) -> &Tensor {
        &self.delta
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn canvas(&self) -> (usize, usize) {
        self.canvas
    }

    /// Interior dimensions the input is resized to.
    pub fn inner_dims(&self) -> (usize, usize) {
        (self.canvas.0 - 2 * self.width, self.canvas.1 - 2 * self.width)
    }

    /// Replaces the values, keeping geometry and metadata. The trainer uses
    /// this between steps; the interior-zero invariant is re-checked.
    pub fn with_delta(&self, delta: Tensor) -> VisualPrompt {
        VisualPrompt::new(self.canvas.0, self.canvas.1, self.width, delta, self.meta.clone())
    }

    /// True if no interior coordinate of `delta` is nonzero.
    pub fn interior_is_zero(&self) -> bool {
        self.delta.data().iter().zip(self.mask.data()).all(|(d, m)| *m == 1.0 || *d == 0.0)
    }

    pub fn checksum(&self) -> u64 {
        let bytes: Vec<u8> = self.delta.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        rng::fnv1a64(&bytes)
    }
}

/// A fresh prompt with `delta` supported on the border only. Requires a
/// non-empty border and a non-empty interior.
pub fn init_prompt(h: usize, w: usize, p: usize, mode: InitMode, seed: u64) -> VisualPrompt {
    assert!(p > 0 && 2 * p < h.min(w), "init_prompt: need 0 < 2p < min(h,w), got p={p} for {h}x{w}");
    let mask = make_border_mask(h, w, p);
    let delta = match mode {
        InitMode::Zeros => Tensor::zeros(vec![3, h, w]),
        InitMode::Uniform { a } => {
            let mut r = rng::stream(rng::derive_seed(seed, "prompt-init"));
            let data = mask
                .data()
                .iter()
                .map(|&m| if m == 1.0 { rng::uniform(&mut r, -a, a) } else { 0.0 })
                .collect();
            Tensor::new(vec![3, h, w], data)
        }
    };
    VisualPrompt::new(h, w, p, delta, PromptMeta { seed, ..PromptMeta::default() })
}

/// The prompting transform: the input is resized to the interior size,
/// zero-padded into the canvas center, and the masked `delta` is added on
/// top. `delta` may be a tape-tracked tensor, in which case the gradient
/// that reaches it is exactly `mask ⊙ upstream`.
pub fn apply_prompt_with_delta(
    tape: &mut Tape,
    x: &Image,
    prompt: &VisualPrompt,
    delta: &Tensor,
) -> Tensor {
    let (h, w) = prompt.canvas();
    assert!(
        delta.shape() == [3, h, w],
        "delta shape {:?} does not match {h}x{w} canvas",
        delta.shape()
    );
    assert!(2 * prompt.width() < h.min(w) || prompt.width() == 0, "prompt leaves no interior");
    let (ih, iw) = prompt.inner_dims();
    let resized = tape.bilinear_resize(x.tensor(), ih, iw);
    let padded = if ih == h && iw == w { resized } else { tape.pad_center(&resized, h, w) };
    tape.masked_add(&padded, delta, prompt.mask())
}

/// [`apply_prompt_with_delta`] with the prompt's own stored values.
pub fn apply_prompt(tape: &mut Tape, x: &Image, prompt: &VisualPrompt) -> Tensor {
    apply_prompt_with_delta(tape, x, prompt, prompt.delta())
}

/// Clamps a prompted tensor into `[0,1]` for export. Never used inside the
/// differentiable pipeline.
pub fn clamp_for_display(prompted: &Tensor) -> Image {
    Image::clamped(prompted.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::imaging::{generate_dataset, Split};
    use crate::task::TaskSpec;

    fn test_image(canvas: usize, seed: u64) -> Image {
        let task = TaskSpec::parse("shapes").unwrap();
        generate_dataset(&task, canvas, 1, seed, Split::Test).remove(0).image
    }

    #[test]
    fn init_zeros_is_all_zero() {
        let p = init_prompt(32, 32, 4, InitMode::Zeros, 1);
        assert!(p.delta().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_uniform_respects_mask_support_and_seed() {
        let a = init_prompt(32, 32, 4, InitMode::Uniform { a: 0.2 }, 7);
        let b = init_prompt(32, 32, 4, InitMode::Uniform { a: 0.2 }, 7);
        assert_eq!(a.delta(), b.delta());
        for (d, m) in a.delta().data().iter().zip(a.mask().data()) {
            if *m == 0.0 {
                assert_eq!(*d, 0.0);
            } else {
                assert!(d.abs() < 0.2);
            }
        }
        assert!(a.delta().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn init_rejects_degenerate_widths() {
        assert!(std::panic::catch_unwind(|| init_prompt(32, 32, 0, InitMode::Zeros, 1)).is_err());
        assert!(std::panic::catch_unwind(|| init_prompt(32, 32, 16, InitMode::Zeros, 1)).is_err());
    }

    #[test]
    fn zero_delta_keeps_interior_equal_to_resize() {
        let img = test_image(32, 3);
        let prompt = init_prompt(32, 32, 4, InitMode::Zeros, 1);
        let mut tape = Tape::new();
        let out = apply_prompt(&mut tape, &img, &prompt);
        let resized = tape.bilinear_resize(img.tensor(), 24, 24);
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    let v = out.at3(c, y, x);
                    if (4..28).contains(&y) && (4..28).contains(&x) {
                        assert!((v - resized.at3(c, y - 4, x - 4)).abs() < 1e-12);
                    } else {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn region_decomposition_with_random_delta() {
        let img = test_image(32, 4);
        let base = init_prompt(32, 32, 4, InitMode::Uniform { a: 0.5 }, 11);
        let mut tape = Tape::new();
        let out = apply_prompt(&mut tape, &img, &base);
        let resized = tape.bilinear_resize(img.tensor(), 24, 24);
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    let v = out.at3(c, y, x);
                    let want = if (4..28).contains(&y) && (4..28).contains(&x) {
                        resized.at3(c, y - 4, x - 4)
                    } else {
                        base.delta().at3(c, y, x)
                    };
                    assert!((v - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn paper_scale_geometry() {
        let prompt = init_prompt(224, 224, 30, InitMode::Zeros, 1);
        assert_eq!(prompt.inner_dims(), (164, 164));
        let per_channel: f64 = prompt.mask().data()[..224 * 224].iter().sum();
        assert_eq!(per_channel as usize, 23280);
    }

    #[test]
    fn gradient_is_masked_upstream() {
        let img = test_image(16, 5);
        let prompt = init_prompt(16, 16, 3, InitMode::Uniform { a: 0.3 }, 2);
        let mut tape = Tape::new();
        let delta = tape.param(prompt.delta());
        let out = apply_prompt_with_delta(&mut tape, &img, &prompt, &delta);
        let sq = tape.mul(&out, &out);
        let loss = tape.sum_all(&sq);
        let grad = tape.backward(&loss).get(&delta).unwrap().clone();
        // Interior gradient is exactly zero, border gradient is 2*out.
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    let g = grad.at3(c, y, x);
                    if prompt.mask().at3(c, y, x) == 0.0 {
                        assert_eq!(g, 0.0, "interior leak at ({c},{y},{x})");
                    } else {
                        assert!((g - 2.0 * out.at3(c, y, x)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn transform_is_model_independent() {
        // Same prompt, same image: identical prompted pixels no matter who
        // consumes them.
        let img = test_image(32, 6);
        let prompt = init_prompt(32, 32, 4, InitMode::Uniform { a: 0.4 }, 3);
        let mut t1 = Tape::new();
        let a = apply_prompt(&mut t1, &img, &prompt);
        let mut t2 = Tape::new();
        let b = apply_prompt(&mut t2, &img, &prompt);
        assert_eq!(a, b);
    }

    #[test]
    fn clamp_for_display_cases() {
        let t = Tensor::new(vec![3, 8, 8], {
            let mut v = vec![0.5; 3 * 64];
            v[0] = 1.7;
            v[1] = -0.3;
            v
        });
        let img = clamp_for_display(&t);
        assert_eq!(img.tensor().data()[0], 1.0);
        assert_eq!(img.tensor().data()[1], 0.0);
        assert_eq!(img.tensor().data()[2], 0.5);
    }

    #[test]
    fn with_delta_rejects_interior_values() {
        let prompt = init_prompt(16, 16, 2, InitMode::Zeros, 1);
        let mut bad = prompt.delta().data().to_vec();
        bad[(0 * 16 + 8) * 16 + 8] = 0.5;
        let bad = Tensor::new(vec![3, 16, 16], bad);
        assert!(std::panic::catch_unwind(|| prompt.with_delta(bad)).is_err());
    }
}
