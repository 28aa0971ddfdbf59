//! The three training loss terms and their weighted composite: the
//! autoregressive task loss, feature-consistency alignment against cached
//! clean features, and task-semantics enrichment through the dual encoder.

use std::collections::HashMap;

use thiserror::Error;

use crate::autodiff::{Tape, Tensor};
use crate::imaging::{Image, LabeledSample};
use crate::models::{DualEncoder, SurrogateModel};
use crate::prompt::{apply_prompt_with_delta, Method, VisualPrompt};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("method {method:?} forces zero auxiliary weights, got lambda_fca={fca}, lambda_tse={tse}")]
    MethodWeights { method: Method, fca: f64, tse: f64 },
    #[error("feature-consistency loss needs a clean feature cache")]
    MissingCache,
    #[error("semantics loss needs a dual encoder")]
    MissingDualEncoder,
}

/// Weights of the composite objective and the semantics temperature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_fca: f64,
    pub lambda_tse: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        // Midpoints of the tuning grids; grid search can override.
        LossWeights { lambda_fca: 0.003, lambda_tse: 0.0005, tau: 2.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) {
        assert!(self.lambda_fca >= 0.0, "lambda_fca must be nonnegative");
        assert!(self.lambda_tse >= 0.0, "lambda_tse must be nonnegative");
        assert!(self.tau > 0.0, "tau must be positive");
    }

    pub fn zero() -> LossWeights {
        LossWeights { lambda_fca: 0.0, lambda_tse: 0.0, ..LossWeights::default() }
    }
}

/// Clean (unprompted) patch features per (model, sample), computed once per
/// dataset and reused every epoch.
#[derive(Default)]
pub struct CleanFeatureCache {
    map: HashMap<(String, u64), Tensor>,
}

impl CleanFeatureCache {
    pub fn build(models: &[&SurrogateModel], data: &[LabeledSample]) -> CleanFeatureCache {
        let mut map = HashMap::new();
        for m in models {
            for s in data {
                let mut tape = Tape::new();
                let feats = m.vision_encode(&mut tape, s.image.tensor());
                map.insert((m.id.clone(), s.id), feats);
            }
        }
        CleanFeatureCache { map }
    }

    pub fn get(&self, model_id: &str, sample_id: u64) -> Option<&Tensor> {
        self.map.get(&(model_id.to_string(), sample_id))
    }

    fn require(&self, model_id: &str, sample_id: u64) -> &Tensor {
        self.get(model_id, sample_id).unwrap_or_else(|| {
            panic!("clean-feature cache miss for model '{model_id}' sample {sample_id}")
        })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// A batch entry: the sample plus the (possibly input-diversified) image
/// actually fed through the prompt.
pub type BatchItem<'a> = (&'a LabeledSample, &'a Image);

/// Mean autoregressive loss over the batch with the prompt applied.
pub fn loss_llm(
    tape: &mut Tape,
    model: &SurrogateModel,
    batch: &[BatchItem],
    prompt: &VisualPrompt,
    delta: &Tensor,
) -> Tensor {
    assert!(!batch.is_empty(), "loss_llm: empty batch");
    let mut parts = Vec::with_capacity(batch.len());
    for (s, img) in batch {
        let prompted = apply_prompt_with_delta(tape, img, prompt, delta);
        let ll = model.sequence_log_likelihood(tape, &prompted, &s.prompt_text, &s.target_text);
        parts.push(tape.scale(&ll, -1.0));
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    let sum = tape.add_n(&refs);
    tape.scale(&sum, 1.0 / batch.len() as f64)
}

/// Mean over the batch of half the squared distance between prompted and
/// cached clean features. Gradient flows only through the prompted branch.
pub fn loss_fca(
    tape: &mut Tape,
    model: &SurrogateModel,
    batch: &[BatchItem],
    prompt: &VisualPrompt,
    delta: &Tensor,
    cache: &CleanFeatureCache,
) -> Tensor {
    assert!(!batch.is_empty(), "loss_fca: empty batch");
    let mut parts = Vec::with_capacity(batch.len());
    for (s, img) in batch {
        let prompted = apply_prompt_with_delta(tape, img, prompt, delta);
        let feats = model.vision_encode(tape, &prompted);
        let clean = cache.require(&model.id, s.id).detach();
        parts.push(feature_sq_distance(tape, &feats, &clean));
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    let sum = tape.add_n(&refs);
    tape.scale(&sum, 1.0 / batch.len() as f64)
}

fn feature_sq_distance(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Tensor {
    let d = tape.sub(a, b);
    let sq = tape.mul(&d, &d);
    let s = tape.sum_all(&sq);
    tape.scale(&s, 0.5)
}

/// `exp(tau * cosine)` for one prompted-image/description pair.
pub fn tse_term(tape: &mut Tape, img_emb: &Tensor, txt_emb: &Tensor, tau: f64) -> Tensor {
    let sim = tape.cosine_similarity(img_emb, txt_emb);
    let scaled = tape.scale(&sim, tau);
    tape.exp(&scaled)
}

/// Batch mean of `exp(tau * sim(g_image(prompted), g_text(description)))`.
pub fn loss_tse(
    tape: &mut Tape,
    enc: &DualEncoder,
    batch: &[BatchItem],
    prompt: &VisualPrompt,
    delta: &Tensor,
    weights: &LossWeights,
) -> Tensor {
    assert!(!batch.is_empty(), "loss_tse: empty batch");
    let mut parts = Vec::with_capacity(batch.len());
    for (s, img) in batch {
        assert!(!s.description_text.is_empty(), "loss_tse: sample {} has no description", s.id);
        let prompted = apply_prompt_with_delta(tape, img, prompt, delta);
        let img_emb = enc.encode_image(tape, &prompted);
        let txt_emb = enc.encode_text(tape, &s.description_text).detach();
        parts.push(tse_term(tape, &img_emb, &txt_emb, weights.tau));
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    let sum = tape.add_n(&refs);
    tape.scale(&sum, 1.0 / batch.len() as f64)
}

/// Scalar composition of already-reduced components.
pub fn combine_components(llm: f64, fca: f64, tse: f64, w: &LossWeights) -> f64 {
    llm + w.lambda_fca * fca - w.lambda_tse * tse
}

/// Composite loss value plus the per-term means that produced it.
pub struct LossBreakdown {
    pub total: Tensor,
    pub llm: f64,
    pub fca: f64,
    pub tse: f64,
}

/// The full objective: per-model task loss (plus weighted feature
/// consistency), averaged across the ensemble, minus the weighted
/// semantics term computed once on the dual encoder.
#[allow(clippy::too_many_arguments)]
pub fn loss_total(
    tape: &mut Tape,
    models: &[&SurrogateModel],
    enc: Option<&DualEncoder>,
    cache: Option<&CleanFeatureCache>,
    batch: &[BatchItem],
    prompt: &VisualPrompt,
    delta: &Tensor,
    weights: &LossWeights,
    method: Method,
) -> Result<LossBreakdown, LossError> {
    assert!(!models.is_empty(), "loss_total: need at least one model");
    assert!(!batch.is_empty(), "loss_total: empty batch");
    weights.validate();
    if method != Method::Tvp && (weights.lambda_fca != 0.0 || weights.lambda_tse != 0.0) {
        return Err(LossError::MethodWeights {
            method,
            fca: weights.lambda_fca,
            tse: weights.lambda_tse,
        });
    }

    let mut per_model = Vec::with_capacity(models.len());
    let mut llm_mean = 0.0;
    let mut fca_mean = 0.0;
    for m in models {
        let llm = loss_llm(tape, m, batch, prompt, delta);
        llm_mean += llm.item();
        let combined = if weights.lambda_fca > 0.0 {
            let cache = cache.ok_or(LossError::MissingCache)?;
            let fca = loss_fca(tape, m, batch, prompt, delta, cache);
            fca_mean += fca.item();
            let weighted = tape.scale(&fca, weights.lambda_fca);
            tape.add(&llm, &weighted)
        } else {
            llm
        };
        per_model.push(combined);
    }
    llm_mean /= models.len() as f64;
    fca_mean /= models.len() as f64;
    let refs: Vec<&Tensor> = per_model.iter().collect();
    let sum = tape.add_n(&refs);
    let mut total = tape.scale(&sum, 1.0 / models.len() as f64);

    let mut tse_mean = 0.0;
    if weights.lambda_tse > 0.0 {
        let enc = enc.ok_or(LossError::MissingDualEncoder)?;
        let tse = loss_tse(tape, enc, batch, prompt, delta, weights);
        tse_mean = tse.item();
        let weighted = tape.scale(&tse, weights.lambda_tse);
        total = tape.sub(&total, &weighted);
    }

    Ok(LossBreakdown { total, llm: llm_mean, fca: fca_mean, tse: tse_mean })
}
