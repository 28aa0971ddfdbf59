//! Supervised pretraining that gives frozen surrogates their "zero-shot"
//! competence, and contrastive pretraining for the dual encoder. Prompt
//! optimization never touches these code paths.

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{Tape, Tensor};
use crate::imaging::{candidate_index, LabeledSample};
use crate::rng::{self, derive_seed, derive_seed_n};
use crate::task::TaskSpec;
use crate::text::{TokenId, Tokenizer, EOS};

use super::{arch_variant, DualEncoder, SurrogateModel};

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("unknown architecture variant '{0}'")]
    UnknownVariant(String),
    #[error(
        "pretraining failed for {model}: metric {metric:.3} not above chance {chance:.3} \
         after {epochs} epochs ({steps} steps)"
    )]
    TrainingFailure { model: String, metric: f64, chance: f64, epochs: usize, steps: usize },
}

#[derive(Clone, Debug)]
pub struct PretrainOptions {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Early-stop once held-out ranking accuracy enters this band, keeping
    /// headroom for prompts to improve the model.
    pub band: (f64, f64),
    /// Steps between held-out accuracy checks.
    pub monitor_every: usize,
    /// Fraction of the training pool each model sees (per-model data
    /// subsampling is one of the zoo diversity axes).
    pub data_fraction: f64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            max_epochs: 30,
            batch_size: 16,
            lr: 2e-3,
            band: (0.60, 0.92),
            monitor_every: 8,
            data_fraction: 0.85,
        }
    }
}

/// Per-parameter Adam moments in canonical parameter order.
#[derive(Default)]
struct AdamState {
    slots: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    fn update(&mut self, idx: usize, param: &Tensor, grad: &Tensor, lr: f64, step: usize) -> Tensor {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        let t = (step + 1) as f64;
        while self.slots.len() <= idx {
            self.slots.push((Vec::new(), Vec::new()));
        }
        let (m, v) = &mut self.slots[idx];
        if m.is_empty() {
            *m = vec![0.0; param.numel()];
            *v = vec![0.0; param.numel()];
        }
        let mut out = param.data().to_vec();
        for k in 0..out.len() {
            let g = grad.data()[k];
            m[k] = B1 * m[k] + (1.0 - B1) * g;
            v[k] = B2 * v[k] + (1.0 - B2) * g * g;
            let mh = m[k] / (1.0 - B1.powf(t));
            let vh = v[k] / (1.0 - B2.powf(t));
            out[k] -= lr * mh / (vh.sqrt() + EPS);
        }
        Tensor::new(param.shape().to_vec(), out)
    }
}

/// Trains a fresh surrogate on the task's train split until its held-out
/// ranking accuracy enters the target band, then freezes it.
pub fn pretrain_surrogate(
    variant_tag: &str,
    canvas: usize,
    task: &TaskSpec,
    train_data: &[LabeledSample],
    seed: u64,
    opts: &PretrainOptions,
) -> Result<SurrogateModel, PretrainError> {
    let variant =
        arch_variant(variant_tag).ok_or_else(|| PretrainError::UnknownVariant(variant_tag.to_string()))?;
    let tok = Tokenizer::new();
    let mut model = SurrogateModel::init(&variant, canvas, seed, &tok);
    let candidates = candidate_tokens(task, &tok);

    // Held-out monitor slice, then a per-model subsample of the remainder.
    let monitor: Vec<&LabeledSample> =
        train_data.iter().enumerate().filter(|(i, _)| i % 5 == 4).map(|(_, s)| s).take(40).collect();
    let mut pool: Vec<usize> = (0..train_data.len()).filter(|i| i % 5 != 4).collect();
    let mut r = rng::stream(derive_seed(seed, &format!("subsample:{}", model.id)));
    rng::shuffle(&mut r, &mut pool);
    let keep = ((pool.len() as f64) * opts.data_fraction).ceil() as usize;
    pool.truncate(keep.max(1));

    let chance = 1.0 / candidates.len() as f64;
    let mut adam = AdamState::default();
    let mut steps = 0usize;
    let mut last_acc;
    let mut done = false;
    let mut epochs_run = 0;

    for epoch in 0..opts.max_epochs {
        epochs_run = epoch + 1;
        let mut order = pool.clone();
        let mut er = rng::stream(derive_seed_n(seed, "pretrain-epoch", epoch as u64));
        rng::shuffle(&mut er, &mut order);
        for batch in order.chunks(opts.batch_size) {
            train_step(&mut model, &mut adam, batch, train_data, opts.lr, steps);
            steps += 1;
            if steps % opts.monitor_every == 0 {
                last_acc = ranked_accuracy(&model, task, &monitor, &candidates);
                if last_acc >= opts.band.0 {
                    done = true;
                    break;
                }
            }
        }
        if done {
            break;
        }
    }
    last_acc = ranked_accuracy(&model, task, &monitor, &candidates);
    if last_acc <= chance {
        return Err(PretrainError::TrainingFailure {
            model: model.id,
            metric: last_acc,
            chance,
            epochs: epochs_run,
            steps,
        });
    }
    model.frozen = true;
    Ok(model)
}

/// One Adam step over all parameters on the batch's autoregressive loss.
fn train_step(
    model: &mut SurrogateModel,
    adam: &mut AdamState,
    batch: &[usize],
    data: &[LabeledSample],
    lr: f64,
    step: usize,
) {
    let mut tape = Tape::new();
    let tracked = model.params.tracked(&mut tape);
    let mut losses = Vec::with_capacity(batch.len());
    for &i in batch {
        let s = &data[i];
        let feats = model.vision_encode_with(&mut tape, &tracked, s.image.tensor());
        let vis = tape.matmul(&feats, &tracked.proj);
        let mut target = s.target_text.clone();
        target.push(EOS);
        let ll = model.loglik_with(&mut tape, &tracked, &vis, &s.prompt_text, &target);
        losses.push(ll);
    }
    let refs: Vec<&Tensor> = losses.iter().collect();
    let total = tape.add_n(&refs);
    let loss = tape.scale(&total, -1.0 / batch.len() as f64);
    let grads = tape.backward(&loss);

    let tracked_named = tracked.named();
    let mut updated: Vec<Tensor> = Vec::with_capacity(tracked_named.len());
    for (idx, (_, t)) in tracked_named.iter().enumerate() {
        let g = grads.get_or_zeros(t);
        updated.push(adam.update(idx, t, &g, lr, step));
    }
    let mut it = updated.into_iter();
    model.params = model.params.map(&mut |_| it.next().unwrap());
}

fn candidate_tokens(task: &TaskSpec, tok: &Tokenizer) -> Vec<Vec<TokenId>> {
    task.candidates.iter().map(|c| tok.tokenize(c).expect("candidate in vocabulary")).collect()
}

/// Close-ended accuracy on a sample slice; ties break to the lowest
/// candidate index.
fn ranked_accuracy(
    model: &SurrogateModel,
    task: &TaskSpec,
    samples: &[&LabeledSample],
    candidates: &[Vec<TokenId>],
) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    for s in samples {
        let mut tape = Tape::new();
        let feats = model.vision_encode(&mut tape, s.image.tensor());
        let vis = model.project_features(&mut tape, &feats);
        let mut best = 0usize;
        let mut best_ll = f64::NEG_INFINITY;
        for (ci, cand) in candidates.iter().enumerate() {
            let ll = model.loglik_given_visual(&mut tape, &vis, &s.prompt_text, cand).item();
            if ll > best_ll {
                best_ll = ll;
                best = ci;
            }
        }
        if best == candidate_index(task, s) {
            hits += 1;
        }
    }
    hits as f64 / samples.len() as f64
}

/// Trains the dual encoder with a symmetric in-batch contrastive objective
/// on (image, description) pairs pooled across tasks, then freezes it.
/// Passes when matched pairs beat mismatched pairs on held-out triplets.
pub fn pretrain_dual_encoder(
    tasks: &[TaskSpec],
    canvas: usize,
    data_per_task: &[Vec<LabeledSample>],
    seed: u64,
    opts: &PretrainOptions,
) -> Result<DualEncoder, PretrainError> {
    assert_eq!(tasks.len(), data_per_task.len(), "one dataset per task");
    let tok = Tokenizer::new();
    let mut enc = DualEncoder::init(canvas, seed, &tok);

    let mut pairs: Vec<(&Tensor, &Vec<TokenId>)> = Vec::new();
    for data in data_per_task {
        for s in data {
            pairs.push((s.image.tensor(), &s.description_text));
        }
    }
    let monitor: Vec<(&Tensor, &Vec<TokenId>)> =
        pairs.iter().enumerate().filter(|(i, _)| i % 5 == 4).map(|(_, p)| *p).take(32).collect();
    let pool: Vec<usize> = (0..pairs.len()).filter(|i| i % 5 != 4).collect();

    let mut adam = AdamState::default();
    let mut steps = 0usize;
    let mut rate;
    let mut done = false;
    let mut epochs_run = 0;
    for epoch in 0..opts.max_epochs {
        epochs_run = epoch + 1;
        let mut order = pool.clone();
        let mut er = rng::stream(derive_seed_n(seed, "dual-epoch", epoch as u64));
        rng::shuffle(&mut er, &mut order);
        for batch in order.chunks(opts.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            dual_step(&mut enc, &mut adam, batch, &pairs, opts.lr, steps);
            steps += 1;
            if steps % opts.monitor_every == 0 {
                rate = triplet_rate(&enc, &monitor, seed);
                if rate >= 0.85 {
                    done = true;
                    break;
                }
            }
        }
        if done {
            break;
        }
    }
    rate = triplet_rate(&enc, &monitor, seed);
    if rate < 0.80 {
        return Err(PretrainError::TrainingFailure {
            model: enc.id,
            metric: rate,
            chance: 0.5,
            epochs: epochs_run,
            steps,
        });
    }
    enc.frozen = true;
    Ok(enc)
}

fn dual_step(
    enc: &mut DualEncoder,
    adam: &mut AdamState,
    batch: &[usize],
    pairs: &[(&Tensor, &Vec<TokenId>)],
    lr: f64,
    step: usize,
) {
    let mut tape = Tape::new();
    let img_p = enc.img.map(&mut |t| tape.param(t));
    let txt_p = tape.param(&enc.txt_embed);

    let imgs: Vec<Tensor> =
        batch.iter().map(|&i| enc.encode_image_with(&mut tape, &img_p, pairs[i].0)).collect();
    let txts: Vec<Tensor> =
        batch.iter().map(|&i| enc.encode_text_with(&mut tape, &txt_p, pairs[i].1)).collect();

    let b = batch.len();
    let mut sims = Vec::with_capacity(b * b);
    for img in &imgs {
        for txt in &txts {
            sims.push(tape.cosine_similarity(img, txt));
        }
    }
    let mut losses = Vec::with_capacity(2 * b);
    for i in 0..b {
        let row: Vec<&Tensor> = (0..b).map(|j| &sims[i * b + j]).collect();
        let row = tape.concat_vec(&row);
        let row = tape.scale(&row, enc.temperature);
        losses.push(tape.softmax_cross_entropy(&row, i));
        let col: Vec<&Tensor> = (0..b).map(|j| &sims[j * b + i]).collect();
        let col = tape.concat_vec(&col);
        let col = tape.scale(&col, enc.temperature);
        losses.push(tape.softmax_cross_entropy(&col, i));
    }
    let refs: Vec<&Tensor> = losses.iter().collect();
    let total = tape.add_n(&refs);
    let loss = tape.scale(&total, 1.0 / (2.0 * b as f64));
    let grads = tape.backward(&loss);

    // Canonical order: image params then the text table, same as named().
    let mut tracked: Vec<&Tensor> = Vec::new();
    let mut img_named = Vec::new();
    img_p.visit("img", &mut img_named);
    for (_, t) in &img_named {
        tracked.push(t);
    }
    tracked.push(&txt_p);

    let mut updated = Vec::with_capacity(tracked.len());
    for (idx, t) in tracked.iter().enumerate() {
        let g = grads.get_or_zeros(t);
        updated.push(adam.update(idx, t, &g, lr, step));
    }
    let mut it = updated.into_iter();
    enc.img = enc.img.map(&mut |_| it.next().unwrap());
    enc.txt_embed = it.next().unwrap();
}

/// Fraction of held-out triplets (i, j != i) where the matched description
/// scores a higher cosine than a mismatched one.
pub fn triplet_rate(enc: &DualEncoder, pairs: &[(&Tensor, &Vec<TokenId>)], seed: u64) -> f64 {
    if pairs.len() < 2 {
        return 1.0;
    }
    let mut tape = Tape::new();
    let imgs: Vec<Tensor> = pairs.iter().map(|(x, _)| enc.encode_image(&mut tape, x)).collect();
    let txts: Vec<Tensor> = pairs.iter().map(|(_, t)| enc.encode_text(&mut tape, t)).collect();
    let mut r = rng::stream(derive_seed(seed, "triplets"));
    let mut wins = 0usize;
    let total = 100;
    for _ in 0..total {
        let i = r.random_range(0..pairs.len());
        let mut j = r.random_range(0..pairs.len() - 1);
        if j >= i {
            j += 1;
        }
        let pos = tape.cosine_similarity(&imgs[i], &txts[i]).item();
        let neg = tape.cosine_similarity(&imgs[i], &txts[j]).item();
        if pos > neg {
            wins += 1;
        }
    }
    wins as f64 / total as f64
}
