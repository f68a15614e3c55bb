//! Few-shot adaptation: input-conditioned additive prompts on the key and
//! value projections, trained by cross-entropy while the backbone stays
//! frozen.
//!
//! Effective projections per head become `W + p(x)` with
//! `p(x) = p + m(x)`: a per-(layer, head) base prompt plus an offset from a
//! small mapping network fed the mean-pooled image latent. Zero-initialized
//! parameters are an exact no-op.

use serde::{Deserialize, Serialize};

use crate::data::{mutated_slot, render, MatchInstance, Slot};
use crate::diffusion::ResolvedPrompts;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::{Graph, NodeId, Tensor};
use crate::optim::{Momentum, OptimConfig};
use crate::rng::{derive2, SplitMix64};
use crate::scoring::{
    match_candidates, score_single_pass, scoring_noise, zero_shot_calibration, Calibration,
    ScoreConfig,
};

const LABEL_TUNE_BATCH: u64 = 0x5455;

// ── prompt parameters ───────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct PromptParams {
    /// Base key/value prompts, `[layer][head]`, each `d' x d_text`.
    pub p_k: Vec<Vec<Tensor>>,
    pub p_v: Vec<Vec<Tensor>>,
    /// Mapping-network trunk: mean-pooled image latent -> hidden.
    pub trunk_w: Tensor, // hidden x d_model
    pub trunk_b: Tensor, // 1 x hidden
    /// Per-layer heads emitting flattened `d' x d_text` offsets.
    pub head_k_w: Vec<Tensor>, // (d' * d_text) x hidden
    pub head_k_b: Vec<Tensor>, // 1 x (d' * d_text)
    pub head_v_w: Vec<Tensor>,
    pub head_v_b: Vec<Tensor>,
    /// Logistic calibration [a, b], trained in binary mode.
    pub calib: Tensor, // 1 x 2
}

impl PromptParams {
    /// All-zero prompts: scoring with these is bit-identical to no prompts.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let dh = cfg.head_dim();
        let per_head = || {
            (0..cfg.layers)
                .map(|_| {
                    (0..cfg.heads)
                        .map(|_| Tensor::zeros(&[dh, cfg.d_text]))
                        .collect()
                })
                .collect()
        };
        let flat = dh * cfg.d_text;
        PromptParams {
            p_k: per_head(),
            p_v: per_head(),
            trunk_w: Tensor::zeros(&[cfg.map_hidden, cfg.d_model]),
            trunk_b: Tensor::zeros(&[1, cfg.map_hidden]),
            head_k_w: (0..cfg.layers)
                .map(|_| Tensor::zeros(&[flat, cfg.map_hidden]))
                .collect(),
            head_k_b: (0..cfg.layers).map(|_| Tensor::zeros(&[1, flat])).collect(),
            head_v_w: (0..cfg.layers)
                .map(|_| Tensor::zeros(&[flat, cfg.map_hidden]))
                .collect(),
            head_v_b: (0..cfg.layers).map(|_| Tensor::zeros(&[1, flat])).collect(),
            calib: Tensor::new(vec![1, 2], vec![1.0, 0.0]).expect("calib shape"),
        }
    }

    pub fn calibration(&self) -> Calibration {
        Calibration {
            a: self.calib.data()[0],
            b: self.calib.data()[1],
        }
    }

    pub fn set_calibration(&mut self, c: Calibration) {
        self.calib.data_mut()[0] = c.a;
        self.calib.data_mut()[1] = c.b;
    }

    /// Canonical (name, tensor) list; the "prompt." prefix is the section
    /// tag checkpoints use to separate tuned parameters from the backbone.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, row) in self.p_k.iter().enumerate() {
            for (h, t) in row.iter().enumerate() {
                out.push((format!("prompt.p_k.l{l}.h{h}"), t));
            }
        }
        for (l, row) in self.p_v.iter().enumerate() {
            for (h, t) in row.iter().enumerate() {
                out.push((format!("prompt.p_v.l{l}.h{h}"), t));
            }
        }
        out.push(("prompt.map.trunk_w".to_string(), &self.trunk_w));
        out.push(("prompt.map.trunk_b".to_string(), &self.trunk_b));
        for (l, t) in self.head_k_w.iter().enumerate() {
            out.push((format!("prompt.map.l{l}.k_w"), t));
        }
        for (l, t) in self.head_k_b.iter().enumerate() {
            out.push((format!("prompt.map.l{l}.k_b"), t));
        }
        for (l, t) in self.head_v_w.iter().enumerate() {
            out.push((format!("prompt.map.l{l}.v_w"), t));
        }
        for (l, t) in self.head_v_b.iter().enumerate() {
            out.push((format!("prompt.map.l{l}.v_b"), t));
        }
        out.push(("prompt.calib".to_string(), &self.calib));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (l, row) in self.p_k.iter_mut().enumerate() {
            for (h, t) in row.iter_mut().enumerate() {
                out.push((format!("prompt.p_k.l{l}.h{h}"), t));
            }
        }
        for (l, row) in self.p_v.iter_mut().enumerate() {
            for (h, t) in row.iter_mut().enumerate() {
                out.push((format!("prompt.p_v.l{l}.h{h}"), t));
            }
        }
        out.push(("prompt.map.trunk_w".to_string(), &mut self.trunk_w));
        out.push(("prompt.map.trunk_b".to_string(), &mut self.trunk_b));
        for (l, t) in self.head_k_w.iter_mut().enumerate() {
            out.push((format!("prompt.map.l{l}.k_w"), t));
        }
        for (l, t) in self.head_k_b.iter_mut().enumerate() {
            out.push((format!("prompt.map.l{l}.k_b"), t));
        }
        for (l, t) in self.head_v_w.iter_mut().enumerate() {
            out.push((format!("prompt.map.l{l}.v_w"), t));
        }
        for (l, t) in self.head_v_b.iter_mut().enumerate() {
            out.push((format!("prompt.map.l{l}.v_b"), t));
        }
        out.push(("prompt.calib".to_string(), &mut self.calib));
        out
    }
}

/// Tape handles for the prompt parameters of one pass.
pub struct PromptVars {
    pub p_k: Vec<Vec<NodeId>>,
    pub p_v: Vec<Vec<NodeId>>,
    pub trunk_w: NodeId,
    pub trunk_b: NodeId,
    pub head_k_w: Vec<NodeId>,
    pub head_k_b: Vec<NodeId>,
    pub head_v_w: Vec<NodeId>,
    pub head_v_b: Vec<NodeId>,
    pub calib: NodeId,
    /// Leaf ids in `params()` order.
    pub param_ids: Vec<NodeId>,
}

pub fn bind_prompts(g: &mut Graph, p: &PromptParams, trainable: bool) -> Result<PromptVars> {
    let mut order = Vec::new();
    let bind = |g: &mut Graph, t: &Tensor, order: &mut Vec<NodeId>| -> Result<NodeId> {
        let id = g.leaf(t.clone(), trainable)?;
        order.push(id);
        Ok(id)
    };
    let mut p_k = Vec::with_capacity(p.p_k.len());
    for row in &p.p_k {
        let mut out = Vec::with_capacity(row.len());
        for t in row {
            out.push(bind(g, t, &mut order)?);
        }
        p_k.push(out);
    }
    let mut p_v = Vec::with_capacity(p.p_v.len());
    for row in &p.p_v {
        let mut out = Vec::with_capacity(row.len());
        for t in row {
            out.push(bind(g, t, &mut order)?);
        }
        p_v.push(out);
    }
    let trunk_w = bind(g, &p.trunk_w, &mut order)?;
    let trunk_b = bind(g, &p.trunk_b, &mut order)?;
    let collect = |g: &mut Graph, ts: &[Tensor], order: &mut Vec<NodeId>| -> Result<Vec<NodeId>> {
        ts.iter().map(|t| bind(g, t, order)).collect()
    };
    let head_k_w = collect(g, &p.head_k_w, &mut order)?;
    let head_k_b = collect(g, &p.head_k_b, &mut order)?;
    let head_v_w = collect(g, &p.head_v_w, &mut order)?;
    let head_v_b = collect(g, &p.head_v_b, &mut order)?;
    let calib = bind(g, &p.calib, &mut order)?;
    Ok(PromptVars {
        p_k,
        p_v,
        trunk_w,
        trunk_b,
        head_k_w,
        head_k_b,
        head_v_w,
        head_v_b,
        calib,
        param_ids: order,
    })
}

/// `p(x) = p + m(x)` per layer and head: shared sigmoid trunk over the
/// mean-pooled image latent, per-layer linear heads reshaped to the
/// key/value head-slice shape. Identical latents give identical prompts.
pub fn conditional_prompt(
    g: &mut Graph,
    vars: &PromptVars,
    image_latent: NodeId,
    cfg: &ModelConfig,
) -> Result<ResolvedPrompts> {
    let pooled = g.mean_over_rows(image_latent)?;
    if g.value(pooled).cols() != cfg.d_model {
        return Err(Error::Dimension(format!(
            "image latent width {} does not match d_model {}",
            g.value(pooled).cols(),
            cfg.d_model
        )));
    }
    let trunk_lin = g.matmul_nt(pooled, vars.trunk_w)?;
    let trunk_pre = g.add(trunk_lin, vars.trunk_b)?;
    let trunk = g.sigmoid(trunk_pre)?;

    let dh = cfg.head_dim();
    let mut k = Vec::with_capacity(cfg.layers);
    let mut v = Vec::with_capacity(cfg.layers);
    for layer in 0..cfg.layers {
        let offset = |g: &mut Graph, w: NodeId, b: NodeId| -> Result<NodeId> {
            let lin = g.matmul_nt(trunk, w)?;
            let flat = g.add(lin, b)?;
            g.reshape(flat, &[dh, cfg.d_text])
        };
        let pi_k = offset(g, vars.head_k_w[layer], vars.head_k_b[layer])?;
        let pi_v = offset(g, vars.head_v_w[layer], vars.head_v_b[layer])?;
        let mut k_row = Vec::with_capacity(cfg.heads);
        let mut v_row = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            k_row.push(g.add(vars.p_k[layer][head], pi_k)?);
            v_row.push(g.add(vars.p_v[layer][head], pi_v)?);
        }
        k.push(k_row);
        v.push(v_row);
    }
    Ok(ResolvedPrompts { k, v })
}

// ── losses ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Binary,
    Multiclass,
}

const PROB_FLOOR: f64 = 1e-12;

/// Binary cross-entropy of one calibrated probability against a 0/1 label,
/// with the probability clamped to `[1e-12, 1 - 1e-12]`.
pub fn binary_loss_value(yhat: f64, label: bool) -> f64 {
    let p = yhat.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    if label {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Multiclass negative log-likelihood of the true index under a softmax
/// over raw scores, computed as `logsumexp(scores) - scores[true]`.
pub fn multiclass_loss_value(scores: &[f64], true_index: usize) -> Result<f64> {
    if true_index >= scores.len() {
        return Err(Error::Usage(format!(
            "label {true_index} out of range for {} scores",
            scores.len()
        )));
    }
    let mx = scores.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let sum: f64 = scores.iter().map(|&v| (v - mx).exp()).sum();
    Ok(mx + sum.ln() - scores[true_index])
}

/// Spec-level loss entry: binary mode takes `[yhat]` and a 0/1 label,
/// multiclass takes one raw score per candidate and the true index.
pub fn loss(scores_or_prob: &[f64], label: usize, mode: LossMode) -> Result<f64> {
    match mode {
        LossMode::Binary => {
            if scores_or_prob.len() != 1 {
                return Err(Error::Usage(
                    "binary loss takes exactly one probability".into(),
                ));
            }
            if label > 1 {
                return Err(Error::Usage(format!("binary label must be 0/1, got {label}")));
            }
            Ok(binary_loss_value(scores_or_prob[0], label == 1))
        }
        LossMode::Multiclass => multiclass_loss_value(scores_or_prob, label),
    }
}

/// Tape version of the multiclass loss over scalar score nodes.
pub fn multiclass_loss_node(
    g: &mut Graph,
    scores: &[NodeId],
    true_index: usize,
) -> Result<NodeId> {
    if true_index >= scores.len() {
        return Err(Error::Usage(format!(
            "label {true_index} out of range for {} scores",
            scores.len()
        )));
    }
    let stacked = g.concat_rows(scores)?;
    let lse = g.logsumexp_over_rows(stacked, 1.0)?;
    let mut onehot = vec![0.0; scores.len()];
    onehot[true_index] = 1.0;
    let mask = g.constant(Tensor::new(vec![scores.len(), 1], onehot)?)?;
    let picked = g.mul(stacked, mask)?;
    let s_true = g.sum_all(picked)?;
    g.sub(lse, s_true)
}

/// Tape version of the calibrated binary loss for one scored pair.
pub fn binary_loss_node(
    g: &mut Graph,
    score: NodeId,
    label: bool,
    calib: NodeId,
) -> Result<NodeId> {
    let a = g.slice_cols(calib, 0, 1)?;
    let b = g.slice_cols(calib, 1, 2)?;
    let scaled = g.mul(score, a)?;
    let logit = g.add(scaled, b)?;
    let prob = g.sigmoid(logit)?;
    let clamped = g.clamp(prob, PROB_FLOOR, 1.0 - PROB_FLOOR)?;
    if label {
        let lp = g.log(clamped)?;
        g.scale(lp, -1.0)
    } else {
        let neg = g.scale(clamped, -1.0)?;
        let one_minus = g.add_scalar(neg, 1.0)?;
        let lp = g.log(one_minus)?;
        g.scale(lp, -1.0)
    }
}

// ── few-shot tuning ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    /// Training instances used (the first `shots` of the provided split).
    pub shots: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub seed: u64,
    pub loss_mode: LossMode,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            shots: 64,
            steps: 200,
            batch_size: 8,
            optim: OptimConfig {
                lr: 1e-2,
                momentum: 0.9,
            },
            seed: 0,
            loss_mode: LossMode::Multiclass,
        }
    }
}

/// Build every candidate's score node for one instance on one tape.
fn instance_scores(
    g: &mut Graph,
    model: &Model,
    pvars: &PromptVars,
    inst: &MatchInstance,
    cfg: &ScoreConfig,
) -> Result<Vec<NodeId>> {
    let vars = model.bind(g, false)?;
    let image = render(&inst.scene);
    let z0 = model.encode_image(g, &vars, &image)?;
    let prompts = conditional_prompt(g, pvars, z0, &model.config)?;
    let levels: Vec<f64> = if cfg.ensemble {
        cfg.noise_levels.clone()
    } else {
        vec![cfg.noise_levels[0]]
    };
    let mut out = Vec::with_capacity(inst.candidates.len());
    for caption in &inst.candidates {
        let r_y = model.encode_caption(g, &vars, caption)?;
        let mut level_nodes = Vec::with_capacity(levels.len());
        for &level in &levels {
            let t = model.schedule.timestep_for_level(level)?;
            let eps = scoring_noise(
                inst.scene.seed,
                t,
                model.config.n_image_tokens(),
                model.config.d_model,
            );
            let eps_id = g.constant(eps)?;
            let trace = model.noised_forward(g, &vars, z0, t, eps_id, r_y, Some(&prompts))?;
            let (f, _) = score_single_pass(g, &trace, cfg)?;
            level_nodes.push(f);
        }
        let mut acc = level_nodes[0];
        for &n in &level_nodes[1..] {
            acc = g.add(acc, n)?;
        }
        out.push(g.scale(acc, 1.0 / level_nodes.len() as f64)?);
    }
    Ok(out)
}

/// Train prompts and calibration on the first `shots` instances; the
/// backbone never receives gradients. Returns the tuned parameters and the
/// per-step mean loss trace.
pub fn few_shot_tune(
    model: &Model,
    train: &[MatchInstance],
    tune: &TuneConfig,
    score_cfg: &ScoreConfig,
) -> Result<(PromptParams, Vec<f64>)> {
    if tune.shots == 0 {
        return Err(Error::Parameter("shots must be positive".into()));
    }
    if tune.shots > train.len() {
        return Err(Error::Parameter(format!(
            "requested {} shots but split has {} instances",
            tune.shots,
            train.len()
        )));
    }
    if tune.batch_size == 0 {
        return Err(Error::Parameter("batch_size must be positive".into()));
    }
    score_cfg.validate(model.config.layers)?;
    let shots = &train[..tune.shots];
    let mut prompts = PromptParams::zeros(&model.config);

    // Zero-shot calibration init: a = 1, b = -median over a small batch.
    let calib_scores: Vec<f64> = {
        let mut raw = Vec::new();
        for inst in shots.iter().take(16) {
            let image = render(&inst.scene);
            for caption in &inst.candidates {
                raw.push(
                    crate::scoring::score_pair(
                        model,
                        None,
                        &image,
                        caption,
                        score_cfg,
                        inst.scene.seed,
                    )?
                    .raw,
                );
            }
        }
        raw
    };
    prompts.set_calibration(zero_shot_calibration(&calib_scores));

    let mut opt = Momentum::new(tune.optim)?;
    let mut trace = Vec::with_capacity(tune.steps);
    // Full-batch when the batch covers every shot: deterministic sweeps.
    let full_batch = tune.batch_size >= shots.len();
    let batch_len = tune.batch_size.min(shots.len());
    for step in 0..tune.steps {
        let mut batch_rng = SplitMix64::new(derive2(tune.seed, LABEL_TUNE_BATCH, step as u64));
        let mut grad_acc: Option<Vec<Tensor>> = None;
        let mut loss_sum = 0.0;
        for b in 0..batch_len {
            let inst = if full_batch {
                &shots[b]
            } else {
                &shots[batch_rng.next_index(shots.len())]
            };
            let mut g = Graph::new();
            let pvars = bind_prompts(&mut g, &prompts, true)?;
            let scores = instance_scores(&mut g, model, &pvars, inst, score_cfg)?;
            let loss_node = match tune.loss_mode {
                LossMode::Multiclass => multiclass_loss_node(&mut g, &scores, inst.true_index)?,
                LossMode::Binary => {
                    let mut terms = Vec::with_capacity(scores.len());
                    for (c, &s) in scores.iter().enumerate() {
                        terms.push(binary_loss_node(
                            &mut g,
                            s,
                            c == inst.true_index,
                            pvars.calib,
                        )?);
                    }
                    let stacked = g.concat_rows(&terms)?;
                    g.mean_all(stacked)?
                }
            };
            loss_sum += g.value(loss_node).item()?;
            g.backward(loss_node)?;

            let acc = grad_acc.get_or_insert_with(|| {
                pvars
                    .param_ids
                    .iter()
                    .map(|&id| Tensor::zeros(g.value(id).shape()))
                    .collect()
            });
            for (slot, &id) in acc.iter_mut().zip(&pvars.param_ids) {
                if let Some(grad) = g.grad(id) {
                    for (a, b) in slot.data_mut().iter_mut().zip(grad.data()) {
                        *a += b;
                    }
                }
            }
        }
        let mut grads = grad_acc.expect("batch_size > 0");
        let inv = 1.0 / batch_len as f64;
        for grad in &mut grads {
            for v in grad.data_mut() {
                *v *= inv;
            }
        }
        let mean_loss = loss_sum * inv;
        if !mean_loss.is_finite() {
            return Err(Error::Training(format!(
                "tuning loss diverged at step {step}"
            )));
        }
        trace.push(mean_loss);
        let mut params: Vec<&mut Tensor> =
            prompts.params_mut().into_iter().map(|(_, t)| t).collect();
        opt.step(&mut params, &grads)?;
    }
    Ok((prompts, trace))
}

// ── evaluation ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SlotTally {
    pub correct: usize,
    pub total: usize,
}

impl SlotTally {
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub top1: f64,
    pub top5: f64,
    /// Per mutated slot, over binary (two-candidate) instances only.
    pub subject: SlotTally,
    pub predicate: SlotTally,
    pub object: SlotTally,
}

/// Worker count for instance-parallel evaluation: `DSD_THREADS`, default 1.
pub fn worker_count() -> usize {
    std::env::var("DSD_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn eval_one(
    model: &Model,
    prompts: Option<&PromptParams>,
    inst: &MatchInstance,
    cfg: &ScoreConfig,
) -> Result<(bool, bool, Option<(Slot, bool)>)> {
    let image = render(&inst.scene);
    let ranking = match_candidates(
        model,
        prompts,
        &image,
        &inst.candidates,
        cfg,
        inst.scene.seed,
    )?;
    let top1 = ranking.top1_hit(inst.true_index);
    let top5 = ranking.topk_hit(inst.true_index, 5);
    let slot = if inst.candidates.len() == 2 {
        let positive = &inst.candidates[inst.true_index];
        let negative = &inst.candidates[1 - inst.true_index];
        mutated_slot(positive, negative).map(|s| (s, top1))
    } else {
        None
    };
    Ok((top1, top5, slot))
}

/// Top-1 / top-5 accuracy over a split, plus per-slot accuracy on binary
/// instances. Parallel across instances when `DSD_THREADS` exceeds one.
pub fn evaluate(
    model: &Model,
    prompts: Option<&PromptParams>,
    split: &[MatchInstance],
    cfg: &ScoreConfig,
) -> Result<Metrics> {
    if split.is_empty() {
        return Err(Error::Usage("evaluation split is empty".into()));
    }
    let workers = worker_count().min(split.len());
    let results: Vec<(bool, bool, Option<(Slot, bool)>)> = if workers <= 1 {
        split
            .iter()
            .map(|inst| eval_one(model, prompts, inst, cfg))
            .collect::<Result<Vec<_>>>()?
    } else {
        let chunk = split.len().div_ceil(workers);
        let mut results = vec![None; split.len()];
        std::thread::scope(|scope| -> Result<()> {
            let mut handles = Vec::new();
            for (w, part) in split.chunks(chunk).enumerate() {
                let offset = w * chunk;
                handles.push((
                    offset,
                    scope.spawn(move || {
                        part.iter()
                            .map(|inst| eval_one(model, prompts, inst, cfg))
                            .collect::<Result<Vec<_>>>()
                    }),
                ));
            }
            let mut collected: Vec<(usize, Vec<_>)> = Vec::new();
            for (offset, handle) in handles {
                let part = handle.join().map_err(|_| {
                    Error::Usage("evaluation worker panicked".into())
                })??;
                collected.push((offset, part));
            }
            for (offset, part) in collected {
                for (i, r) in part.into_iter().enumerate() {
                    results[offset + i] = Some(r);
                }
            }
            Ok(())
        })?;
        results.into_iter().map(|r| r.expect("filled")).collect()
    };

    let mut m = Metrics {
        n: split.len(),
        ..Metrics::default()
    };
    let (mut top1, mut top5) = (0usize, 0usize);
    for (t1, t5, slot) in results {
        top1 += t1 as usize;
        top5 += t5 as usize;
        if let Some((slot, hit)) = slot {
            let tally = match slot {
                Slot::Subject => &mut m.subject,
                Slot::Predicate => &mut m.predicate,
                Slot::Object => &mut m.object,
            };
            tally.total += 1;
            tally.correct += hit as usize;
        }
    }
    m.top1 = top1 as f64 / split.len() as f64;
    m.top5 = top5 as f64 / split.len() as f64;
    Ok(m)
}
