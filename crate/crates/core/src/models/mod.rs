//! Frozen desk-scale stand-ins for multimodal language models: a patch
//! vision encoder, a projector into the token space, and a small causal
//! language head over the shared vocabulary. A separate dual encoder plays
//! the role of an external image-text model for semantics guidance.

mod blocks;
mod pretrain;

pub use pretrain::{pretrain_dual_encoder, pretrain_surrogate, PretrainError, PretrainOptions};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::rng::{self, derive_seed};
use crate::text::{TokenId, Tokenizer, EOS};
use blocks::{block_forward, layer_norm_1d, BlockParams, MixParams};

/// Extra sequence capacity beyond the visual tokens.
pub const TEXT_CAPACITY: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MixerKind {
    Attention,
    TokenMlp,
}

/// A named architecture configuration. Variants differ in patch size,
/// width, depth, and mixing style so that a zoo spans genuinely different
/// function families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchVariant {
    pub tag: String,
    pub patch: usize,
    pub d_model: usize,
    pub enc_depth: usize,
    pub lm_depth: usize,
    pub mixer: MixerKind,
}

pub fn arch_variant(tag: &str) -> Option<ArchVariant> {
    let (patch, d_model, enc_depth, lm_depth, mixer) = match tag {
        "attn8" => (8, 32, 2, 2, MixerKind::Attention),
        "attn16" => (16, 32, 2, 2, MixerKind::Attention),
        "attn16w" => (16, 48, 3, 2, MixerKind::Attention),
        "mix8" => (8, 48, 2, 2, MixerKind::TokenMlp),
        "mix16" => (16, 32, 3, 2, MixerKind::TokenMlp),
        _ => return None,
    };
    Some(ArchVariant { tag: tag.to_string(), patch, d_model, enc_depth, lm_depth, mixer })
}

// ── Parameter containers ────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct VisionParams {
    pub patch_embed: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<BlockParams>,
    pub ln_f_g: Tensor,
    pub ln_f_b: Tensor,
}

#[derive(Clone, Debug)]
pub struct LmParams {
    pub tok_embed: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<BlockParams>,
    pub ln_f_g: Tensor,
    pub ln_f_b: Tensor,
    pub w_out: Tensor,
}

#[derive(Clone, Debug)]
pub struct SurrogateParams {
    pub vision: VisionParams,
    pub proj: Tensor,
    pub lm: LmParams,
}

impl VisionParams {
    fn map(&self, f: &mut impl FnMut(&Tensor) -> Tensor) -> VisionParams {
        VisionParams {
            patch_embed: f(&self.patch_embed),
            pos: f(&self.pos),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            ln_f_g: f(&self.ln_f_g),
            ln_f_b: f(&self.ln_f_b),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.patch_embed"), &self.patch_embed));
        out.push((format!("{prefix}.pos"), &self.pos));
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.block{i}"), out);
        }
        out.push((format!("{prefix}.ln_f_g"), &self.ln_f_g));
        out.push((format!("{prefix}.ln_f_b"), &self.ln_f_b));
    }
}

impl LmParams {
    fn map(&self, f: &mut impl FnMut(&Tensor) -> Tensor) -> LmParams {
        LmParams {
            tok_embed: f(&self.tok_embed),
            pos: f(&self.pos),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            ln_f_g: f(&self.ln_f_g),
            ln_f_b: f(&self.ln_f_b),
            w_out: f(&self.w_out),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.tok_embed"), &self.tok_embed));
        out.push((format!("{prefix}.pos"), &self.pos));
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.block{i}"), out);
        }
        out.push((format!("{prefix}.ln_f_g"), &self.ln_f_g));
        out.push((format!("{prefix}.ln_f_b"), &self.ln_f_b));
        out.push((format!("{prefix}.w_out"), &self.w_out));
    }
}

impl SurrogateParams {
    pub(crate) fn map(&self, f: &mut impl FnMut(&Tensor) -> Tensor) -> SurrogateParams {
        SurrogateParams { vision: self.vision.map(f), proj: f(&self.proj), lm: self.lm.map(f) }
    }

    /// All parameters with stable names in canonical order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.vision.visit("vision", &mut out);
        out.push(("proj".to_string(), &self.proj));
        self.lm.visit("lm", &mut out);
        out
    }

    /// Registers every parameter as a differentiable leaf on the tape.
    pub fn tracked(&self, tape: &mut Tape) -> SurrogateParams {
        self.map(&mut |t| tape.param(t))
    }

    /// Checksum over all parameter bytes in canonical order; used to verify
    /// models stay frozen across prompt training.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for (name, t) in self.named() {
            bytes.extend_from_slice(name.as_bytes());
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        rng::fnv1a64(&bytes)
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

// ── Surrogate model ─────────────────────────────────────────────────────

/// A frozen vision-language surrogate. All parameters are plain tensors;
/// during prompt training they enter tapes as constants and never receive
/// gradient buffers.
#[derive(Clone, Debug)]
pub struct SurrogateModel {
    pub id: String,
    pub variant: ArchVariant,
    pub canvas: usize,
    pub params: SurrogateParams,
    pub vocab_hash: u64,
    pub seed: u64,
    pub frozen: bool,
}

impl SurrogateModel {
    /// Fresh random weights; deterministic in (variant, canvas, seed).
    pub fn init(variant: &ArchVariant, canvas: usize, seed: u64, tok: &Tokenizer) -> SurrogateModel {
        assert!(canvas % variant.patch == 0, "canvas {} not divisible by patch {}", canvas, variant.patch);
        let np = (canvas / variant.patch) * (canvas / variant.patch);
        let d = variant.d_model;
        let v = tok.vocab_size();
        let mut r = rng::stream(derive_seed(seed, &format!("surrogate-init:{}", variant.tag)));
        let vision = VisionParams {
            patch_embed: init_linear(&mut r, 3 * variant.patch * variant.patch, d),
            pos: init_pos(&mut r, np, d),
            blocks: (0..variant.enc_depth)
                .map(|_| BlockParams::init(&mut r, d, np, variant.mixer))
                .collect(),
            ln_f_g: Tensor::filled(vec![d], 1.0),
            ln_f_b: Tensor::zeros(vec![d]),
        };
        let proj = init_linear(&mut r, d, d);
        let lm = LmParams {
            tok_embed: init_pos(&mut r, v, d),
            pos: init_pos(&mut r, np + TEXT_CAPACITY, d),
            blocks: (0..variant.lm_depth)
                .map(|_| BlockParams::init(&mut r, d, np + TEXT_CAPACITY, MixerKind::Attention))
                .collect(),
            ln_f_g: Tensor::filled(vec![d], 1.0),
            ln_f_b: Tensor::zeros(vec![d]),
            w_out: init_linear(&mut r, d, v),
        };
        let params = SurrogateParams { vision, proj, lm };
        SurrogateModel {
            id: format!("{}-s{}", variant.tag, seed),
            variant: variant.clone(),
            canvas,
            params,
            vocab_hash: tok.vocab_hash(),
            seed,
            frozen: false,
        }
    }

    pub fn n_patches(&self) -> usize {
        (self.canvas / self.variant.patch) * (self.canvas / self.variant.patch)
    }

    /// Patch features `f(x)`: `[n_patches × d_model]`. Differentiable with
    /// respect to `x` when `x` is tracked.
    pub fn vision_encode(&self, tape: &mut Tape, x: &Tensor) -> Tensor {
        self.vision_encode_with(tape, &self.params, x)
    }

    pub(crate) fn vision_encode_with(&self, tape: &mut Tape, p: &SurrogateParams, x: &Tensor) -> Tensor {
        assert!(
            x.shape().len() == 3 && x.shape()[0] == 3,
            "vision_encode: expected [3×H×W], got {:?}",
            x.shape()
        );
        assert!(
            x.shape()[1] % self.variant.patch == 0 && x.shape()[2] % self.variant.patch == 0,
            "vision_encode: dims {:?} not divisible by patch {}",
            x.shape(),
            self.variant.patch
        );
        let patches = tape.patchify(x, self.variant.patch);
        assert!(
            patches.shape()[0] == p.vision.pos.shape()[0],
            "vision_encode: {} patches but positional table holds {}",
            patches.shape()[0],
            p.vision.pos.shape()[0]
        );
        let mut h = tape.matmul(&patches, &p.vision.patch_embed);
        h = tape.add(&h, &p.vision.pos);
        for b in &p.vision.blocks {
            h = block_forward(tape, b, &h, false);
        }
        layer_norm_1d(tape, &h, &p.vision.ln_f_g, &p.vision.ln_f_b)
    }

    /// Visual tokens after the projector: `[n_patches × d_model]`.
    pub fn project_features(&self, tape: &mut Tape, feats: &Tensor) -> Tensor {
        tape.matmul(feats, &self.params.proj)
    }

    fn lm_logits_with(&self, tape: &mut Tape, p: &SurrogateParams, vis: &Tensor, toks: &[TokenId]) -> Tensor {
        let seq = if toks.is_empty() {
            vis.clone()
        } else {
            let emb = tape.embed(&p.lm.tok_embed, toks);
            tape.concat0(&[vis, &emb])
        };
        let len = seq.shape()[0];
        assert!(
            len <= p.lm.pos.shape()[0],
            "sequence length {} exceeds capacity {}",
            len,
            p.lm.pos.shape()[0]
        );
        let pos = tape.slice_rows(&p.lm.pos, 0, len);
        let mut h = tape.add(&seq, &pos);
        for b in &p.lm.blocks {
            h = block_forward(tape, b, &h, true);
        }
        let h = layer_norm_1d(tape, &h, &p.lm.ln_f_g, &p.lm.ln_f_b);
        tape.matmul(&h, &p.lm.w_out)
    }

    /// Sum over target positions of the log-probability of each target
    /// token under causal decoding, with visual tokens prepended, then
    /// prompt tokens, then the target prefix.
    pub fn sequence_log_likelihood(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        prompt_toks: &[TokenId],
        target_toks: &[TokenId],
    ) -> Tensor {
        let feats = self.vision_encode(tape, x);
        let vis = self.project_features(tape, &feats);
        self.loglik_given_visual(tape, &vis, prompt_toks, target_toks)
    }

    /// Same, reusing already-projected visual tokens (one image encode can
    /// score many candidates).
    pub fn loglik_given_visual(
        &self,
        tape: &mut Tape,
        vis: &Tensor,
        prompt_toks: &[TokenId],
        target_toks: &[TokenId],
    ) -> Tensor {
        self.loglik_with(tape, &self.params, vis, prompt_toks, target_toks)
    }

    pub(crate) fn loglik_with(
        &self,
        tape: &mut Tape,
        p: &SurrogateParams,
        vis: &Tensor,
        prompt_toks: &[TokenId],
        target_toks: &[TokenId],
    ) -> Tensor {
        assert!(!target_toks.is_empty(), "sequence_log_likelihood: empty target");
        let np = vis.shape()[0];
        let mut toks: Vec<TokenId> = prompt_toks.to_vec();
        toks.extend_from_slice(target_toks);
        let logits = self.lm_logits_with(tape, p, vis, &toks);
        let mut pieces = Vec::with_capacity(target_toks.len());
        for (i, &target) in target_toks.iter().enumerate() {
            let pos = np + prompt_toks.len() + i - 1;
            let row = tape.row(&logits, pos);
            let ce = tape.softmax_cross_entropy(&row, target);
            pieces.push(tape.scale(&ce, -1.0));
        }
        let refs: Vec<&Tensor> = pieces.iter().collect();
        tape.add_n(&refs)
    }

    /// Greedy decoding: repeatedly append the argmax token (ties break to
    /// the lowest index) until EOS or `max_len` generated tokens.
    pub fn generate_greedy(&self, x: &Tensor, prompt_toks: &[TokenId], max_len: usize) -> Vec<TokenId> {
        assert!(max_len >= 1, "generate_greedy: max_len must be >= 1");
        let mut tape = Tape::new();
        let feats = self.vision_encode(&mut tape, &x.detach());
        let vis = self.project_features(&mut tape, &feats);
        let capacity = self.params.lm.pos.shape()[0] - vis.shape()[0];
        let mut toks = prompt_toks.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_len {
            if toks.len() >= capacity {
                break;
            }
            let logits = self.lm_logits_with(&mut tape, &self.params, &vis, &toks);
            let last = logits.shape()[0] - 1;
            let row: Vec<f64> = (0..logits.shape()[1]).map(|c| logits.at2(last, c)).collect();
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            if best == EOS {
                break;
            }
            out.push(best);
            toks.push(best);
        }
        out
    }
}

// ── Dual encoder ────────────────────────────────────────────────────────

/// A frozen image/text dual encoder, architecturally disjoint from every
/// surrogate vision encoder (different width and patch size).
#[derive(Clone, Debug)]
pub struct DualEncoder {
    pub id: String,
    pub canvas: usize,
    pub patch: usize,
    pub d: usize,
    pub img: VisionParams,
    pub txt_embed: Tensor,
    /// Logit scale for the symmetric contrastive pretraining objective.
    pub temperature: f64,
    pub vocab_hash: u64,
    pub seed: u64,
    pub frozen: bool,
}

impl DualEncoder {
    /// Default geometry: patch 32, width 24, two mixing blocks. Distinct
    /// from every built-in surrogate variant on both axes.
    pub fn init(canvas: usize, seed: u64, tok: &Tokenizer) -> DualEncoder {
        Self::init_with(canvas, 32, 24, 2, seed, tok)
    }

    pub fn init_with(
        canvas: usize,
        patch: usize,
        d: usize,
        depth: usize,
        seed: u64,
        tok: &Tokenizer,
    ) -> DualEncoder {
        assert!(canvas % patch == 0, "canvas {} not divisible by dual-encoder patch {}", canvas, patch);
        let np = (canvas / patch) * (canvas / patch);
        let v = tok.vocab_size();
        let mut r = rng::stream(derive_seed(seed, "dual-init"));
        let img = VisionParams {
            patch_embed: init_linear(&mut r, 3 * patch * patch, d),
            pos: init_pos(&mut r, np, d),
            blocks: (0..depth).map(|_| BlockParams::init(&mut r, d, np, MixerKind::TokenMlp)).collect(),
            ln_f_g: Tensor::filled(vec![d], 1.0),
            ln_f_b: Tensor::zeros(vec![d]),
        };
        DualEncoder {
            id: format!("dual-s{}", seed),
            canvas,
            patch,
            d,
            img,
            txt_embed: init_pos(&mut r, v, d),
            temperature: 10.0,
            vocab_hash: tok.vocab_hash(),
            seed,
            frozen: false,
        }
    }

    /// Pooled image embedding `g_image(x)`: `[d]`. Differentiable in `x`.
    pub fn encode_image(&self, tape: &mut Tape, x: &Tensor) -> Tensor {
        self.encode_image_with(tape, &self.img, x)
    }

    pub(crate) fn encode_image_with(&self, tape: &mut Tape, p: &VisionParams, x: &Tensor) -> Tensor {
        let patches = tape.patchify(x, self.patch);
        let mut h = tape.matmul(&patches, &p.patch_embed);
        h = tape.add(&h, &p.pos);
        for b in &p.blocks {
            h = block_forward(tape, b, &h, false);
        }
        let h = layer_norm_1d(tape, &h, &p.ln_f_g, &p.ln_f_b);
        tape.mean_rows(&h)
    }

    /// Pooled text embedding `g_text(t)`: `[d]`.
    pub fn encode_text(&self, tape: &mut Tape, toks: &[TokenId]) -> Tensor {
        self.encode_text_with(tape, &self.txt_embed, toks)
    }

    pub(crate) fn encode_text_with(&self, tape: &mut Tape, table: &Tensor, toks: &[TokenId]) -> Tensor {
        assert!(!toks.is_empty(), "encode_text: empty token sequence");
        let emb = tape.embed(table, toks);
        tape.mean_rows(&emb)
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.img.visit("img", &mut out);
        out.push(("txt_embed".to_string(), &self.txt_embed));
        out
    }

    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for (name, t) in self.named() {
            bytes.extend_from_slice(name.as_bytes());
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        rng::fnv1a64(&bytes)
    }
}

fn init_linear(r: &mut rand_chacha::ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng::uniform(r, -a, a)).collect();
    Tensor::new(vec![fan_in, fan_out], data)
}

fn init_pos(r: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng::uniform(r, -0.05, 0.05)).collect();
    Tensor::new(vec![rows, cols], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::imaging::{generate_dataset, Split};
    use crate::task::TaskSpec;

    fn toy_model(seed: u64) -> SurrogateModel {
        let variant = arch_variant("attn8").unwrap();
        SurrogateModel::init(&variant, 16, seed, &Tokenizer::new())
    }

    #[test]
    fn vision_encode_shapes_and_determinism() {
        let variant = arch_variant("attn8").unwrap();
        let m = SurrogateModel::init(&variant, 64, 1, &Tokenizer::new());
        let task = TaskSpec::parse("shapes").unwrap();
        let img = generate_dataset(&task, 64, 1, 2, Split::Train).remove(0).image;
        let mut tape = Tape::new();
        let a = m.vision_encode(&mut tape, img.tensor());
        assert_eq!(a.shape(), &[64, 32]);
        let b = m.vision_encode(&mut tape, img.tensor());
        assert_eq!(a, b);
    }

    #[test]
    fn vision_encode_rejects_indivisible_dims() {
        let m = toy_model(3);
        let x = Tensor::zeros(vec![3, 12, 12]);
        let r = std::panic::catch_unwind(move || {
            let mut tape = Tape::new();
            m.vision_encode(&mut tape, &x)
        });
        assert!(r.is_err());
    }

    #[test]
    fn vision_encode_gradient_passes_finite_differences() {
        let m = toy_model(4);
        let mut r = rng::stream(9);
        let data: Vec<f64> = (0..3 * 16 * 16).map(|_| rng::uniform(&mut r, 0.0, 1.0)).collect();
        let x = Tensor::new(vec![3, 16, 16], data);
        let err = grad_check(
            |t, p| {
                let f = m.vision_encode(t, p);
                let f2 = t.mul(&f, &f);
                t.mean_all(&f2)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn uniform_head_gives_uniform_loglik() {
        // Zeroed output projection forces uniform logits over the
        // vocabulary regardless of the image.
        let tok = Tokenizer::with_words((0..64).map(|i| format!("w{i}")).collect());
        let variant = arch_variant("attn8").unwrap();
        let mut m = SurrogateModel::init(&variant, 16, 5, &tok);
        m.params.lm.w_out = Tensor::zeros(m.params.lm.w_out.shape().to_vec());
        let x = Tensor::filled(vec![3, 16, 16], 0.4);
        let mut tape = Tape::new();
        let ll = m.sequence_log_likelihood(&mut tape, &x, &[3], &[5, 6]);
        let want = -2.0 * (64.0_f64).ln();
        assert!((ll.item() - want).abs() < 1e-9, "{} vs {}", ll.item(), want);
        assert!((ll.item() + 8.3178).abs() < 1e-4);
    }

    #[test]
    fn single_target_equals_first_step_cross_entropy() {
        let m = toy_model(7);
        let x = Tensor::filled(vec![3, 16, 16], 0.3);
        let mut tape = Tape::new();
        let feats = m.vision_encode(&mut tape, &x);
        let vis = m.project_features(&mut tape, &feats);
        let ll = m.loglik_given_visual(&mut tape, &vis, &[], &[9]);
        // Oracle: logits at the last visual position.
        let logits = m.lm_logits_with(&mut tape, &m.params, &vis, &[9]);
        let last_vis = tape.row(&logits, vis.shape()[0] - 1);
        let ce = tape.softmax_cross_entropy(&last_vis, 9);
        assert!((ll.item() + ce.item()).abs() < 1e-12);
    }

    #[test]
    fn sequence_loglik_matches_incremental_decode_oracle() {
        // The joint log-likelihood must equal the sum of per-token
        // conditionals computed one position at a time.
        let m = toy_model(8);
        let x = Tensor::filled(vec![3, 16, 16], 0.6);
        let prompt = [4usize, 7];
        let target = [10usize, 3, 21];
        let mut tape = Tape::new();
        let feats = m.vision_encode(&mut tape, &x);
        let vis = m.project_features(&mut tape, &feats);
        let joint = m.loglik_given_visual(&mut tape, &vis, &prompt, &target);
        let mut oracle = 0.0;
        for i in 0..target.len() {
            let mut toks = prompt.to_vec();
            toks.extend_from_slice(&target[..i + 1]);
            let logits = m.lm_logits_with(&mut tape, &m.params, &vis, &toks);
            let pos = vis.shape()[0] + prompt.len() + i - 1;
            let row = tape.row(&logits, pos);
            let ce = tape.softmax_cross_entropy(&row, target[i]);
            oracle -= ce.item();
        }
        assert!((joint.item() - oracle).abs() < 1e-10, "{} vs {}", joint.item(), oracle);
    }

    #[test]
    fn loglik_gradient_reaches_the_image() {
        let m = toy_model(11);
        let mut r = rng::stream(12);
        let data: Vec<f64> = (0..3 * 16 * 16).map(|_| rng::uniform(&mut r, 0.0, 1.0)).collect();
        let x = Tensor::new(vec![3, 16, 16], data);
        let err = grad_check(|t, p| m.sequence_log_likelihood(t, p, &[4], &[9]), &x, 1e-5);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn eos_first_head_generates_empty_answer() {
        // Shifting the final layer norm to all-ones and wiring only the EOS
        // column makes the EOS logit equal d while every other logit is 0,
        // so decoding stops immediately.
        let mut m = toy_model(14);
        let (d, v) = (m.params.lm.w_out.shape()[0], m.params.lm.w_out.shape()[1]);
        m.params.lm.ln_f_b = Tensor::filled(vec![d], 1.0);
        let mut w = vec![0.0; d * v];
        for r in 0..d {
            w[r * v + EOS] = 1.0;
        }
        m.params.lm.w_out = Tensor::new(vec![d, v], w);
        let x = Tensor::filled(vec![3, 16, 16], 0.2);
        let out = m.generate_greedy(&x, &[4, 5], 6);
        assert!(out.is_empty());
    }

    #[test]
    fn greedy_ties_break_to_lowest_token_index() {
        // All-zero head: every logit ties at 0, so argmax must pick id 0.
        let mut m = toy_model(16);
        m.params.lm.w_out = Tensor::zeros(m.params.lm.w_out.shape().to_vec());
        let x = Tensor::filled(vec![3, 16, 16], 0.2);
        let out = m.generate_greedy(&x, &[4], 3);
        assert_eq!(out, vec![0, 0, 0]);
    }

    #[test]
    fn greedy_generation_is_deterministic() {
        let m = toy_model(15);
        let x = Tensor::filled(vec![3, 16, 16], 0.7);
        assert_eq!(m.generate_greedy(&x, &[3], 5), m.generate_greedy(&x, &[3], 5));
    }

    #[test]
    fn dual_encoder_embeddings() {
        let tok = Tokenizer::new();
        let e = DualEncoder::init(64, 2, &tok);
        let task = TaskSpec::parse("shapes").unwrap();
        let img = generate_dataset(&task, 64, 1, 3, Split::Train).remove(0).image;
        let mut tape = Tape::new();
        let a = e.encode_image(&mut tape, img.tensor());
        let b = e.encode_image(&mut tape, img.tensor());
        assert_eq!(a.shape(), &[24]);
        assert_eq!(a, b);
        assert!((tape.cosine_similarity(&a, &b).item() - 1.0).abs() < 1e-12);
        let t = e.encode_text(&mut tape, &tok.tokenize("this is a photo of a circle").unwrap());
        assert_eq!(t.shape(), &[24]);
        assert!(t.l2() > 0.0);
    }

    #[test]
    fn dual_encoder_image_gradient_passes_finite_differences() {
        let tok = Tokenizer::new();
        let e = DualEncoder::init(32, 3, &tok);
        let mut r = rng::stream(21);
        let data: Vec<f64> = (0..3 * 32 * 32).map(|_| rng::uniform(&mut r, 0.0, 1.0)).collect();
        let x = Tensor::new(vec![3, 32, 32], data);
        let toks = tok.tokenize("there are two objects").unwrap();
        let err = grad_check(
            |t, p| {
                let img = e.encode_image(t, p);
                let txt = e.encode_text(t, &toks);
                t.cosine_similarity(&img, &txt)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn arch_variants_differ_in_parameter_shapes() {
        let tok = Tokenizer::new();
        let tags = ["attn8", "attn16", "mix16", "attn16w"];
        let models: Vec<SurrogateModel> = tags
            .iter()
            .map(|t| SurrogateModel::init(&arch_variant(t).unwrap(), 64, 1, &tok))
            .collect();
        let mut differing_pairs = 0;
        for i in 0..models.len() {
            for j in (i + 1)..models.len() {
                let a: Vec<Vec<usize>> =
                    models[i].params.named().iter().map(|(_, t)| t.shape().to_vec()).collect();
                let b: Vec<Vec<usize>> =
                    models[j].params.named().iter().map(|(_, t)| t.shape().to_vec()).collect();
                if a != b {
                    differing_pairs += 1;
                }
            }
        }
        assert!(differing_pairs >= 1);
    }

    #[test]
    fn init_is_deterministic() {
        let variant = arch_variant("mix16").unwrap();
        let tok = Tokenizer::new();
        let a = SurrogateModel::init(&variant, 64, 9, &tok);
        let b = SurrogateModel::init(&variant, 64, 9, &tok);
        assert_eq!(a.params.checksum(), b.params.checksum());
        let c = SurrogateModel::init(&variant, 64, 10, &tok);
        assert_ne!(a.params.checksum(), c.params.checksum());
    }
}
