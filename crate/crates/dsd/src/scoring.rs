//! Attention-map scoring: pool each captured cross-attention map over image
//! tokens, average over text tokens, heads and layers, and calibrate the
//! result into a match probability.
//!
//! Head aggregation is either uniform or dynamic: the dynamic path scores
//! once with uniform heads, reads the gradient of that score at every
//! attention map, forms the gradient-times-activation attribution per head,
//! and re-aggregates with softmax-normalized per-layer head weights.

use serde::{Deserialize, Serialize};

use crate::adapt::PromptParams;
use crate::data::{Caption, Image, LABEL_SCORE_NOISE};
use crate::diffusion::DenoiserTrace;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Graph, NodeId, Tensor};
use crate::rng::{derive2, SplitMix64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    Uniform,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Lse,
    Max,
    Cosine,
}

/// Logistic calibration mapping a raw score to (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub a: f64,
    pub b: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Calibration { a: 1.0, b: 0.0 }
    }
}

impl Calibration {
    pub fn apply(&self, raw: f64) -> f64 {
        1.0 / (1.0 + (-(self.a * raw + self.b)).exp())
    }
}

/// `a = 1, b = -median(raw)`: centers the logistic on the observed scores.
pub fn zero_shot_calibration(raw_scores: &[f64]) -> Calibration {
    if raw_scores.is_empty() {
        return Calibration::default();
    }
    let mut sorted = raw_scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    };
    Calibration { a: 1.0, b: -median }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    /// LSE pooling temperature.
    pub lambda: f64,
    /// Which denoiser layers contribute, ascending, deduplicated.
    pub layer_set: Vec<usize>,
    pub head_mode: HeadMode,
    pub pooling: Pooling,
    /// Fractional noise levels in (0, 1). Without `ensemble` only the first
    /// is used; with it, raw scores average over all of them.
    pub noise_levels: Vec<f64>,
    pub ensemble: bool,
    /// Keep the BOS column in the text-token mean (ablation switch).
    pub include_bos: bool,
    pub calibration: Calibration,
}

/// The four levels raw-score ensembling averages over by default.
pub const ENSEMBLE_LEVELS: [f64; 4] = [0.2, 0.4, 0.6, 0.8];

impl ScoreConfig {
    pub fn default_for(layers: usize) -> Self {
        ScoreConfig {
            lambda: 5.0,
            layer_set: (0..layers).collect(),
            head_mode: HeadMode::Dynamic,
            pooling: Pooling::Lse,
            noise_levels: vec![0.4],
            ensemble: false,
            include_bos: false,
            calibration: Calibration::default(),
        }
    }

    pub fn with_ensemble(mut self) -> Self {
        self.ensemble = true;
        self.noise_levels = ENSEMBLE_LEVELS.to_vec();
        self
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.layer_set.is_empty() {
            return Err(Error::Config("layer_set must not be empty".into()));
        }
        if self
            .layer_set
            .windows(2)
            .any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(
                "layer_set must be ascending without duplicates".into(),
            ));
        }
        if let Some(&bad) = self.layer_set.iter().find(|&&l| l >= layers) {
            return Err(Error::Config(format!(
                "layer {bad} out of range for {layers} layers"
            )));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if self.noise_levels.is_empty() {
            return Err(Error::Config("noise_levels must not be empty".into()));
        }
        if let Some(&bad) = self
            .noise_levels
            .iter()
            .find(|&&v| !(0.0 < v && v < 1.0))
        {
            return Err(Error::Config(format!(
                "noise level {bad} outside (0, 1)"
            )));
        }
        Ok(())
    }
}

// ── pooling primitives ──────────────────────────────────────────────────

/// LSE pooling over image tokens: one value per text-token column.
pub fn pool_lse(g: &mut Graph, map: NodeId, lambda: f64) -> Result<NodeId> {
    g.logsumexp_over_rows(map, lambda)
}

/// Per-column maximum over image tokens.
pub fn pool_max(g: &mut Graph, map: NodeId) -> Result<NodeId> {
    g.max_over_rows(map)
}

/// Cosine between mean-pooled image tokens and mean-pooled text tokens,
/// compared on their shared leading coordinates. Zero-norm inputs score 0.
pub fn pool_cosine(g: &mut Graph, image_tokens: NodeId, text_tokens: NodeId) -> Result<NodeId> {
    let shared = g
        .value(image_tokens)
        .cols()
        .min(g.value(text_tokens).cols());
    let u_full = g.mean_over_rows(image_tokens)?;
    let v_full = g.mean_over_rows(text_tokens)?;
    let u = g.slice_cols(u_full, 0, shared)?;
    let v = g.slice_cols(v_full, 0, shared)?;
    let uu = g.mul(u, u)?;
    let vv = g.mul(v, v)?;
    let uu_sum = g.sum_all(uu)?;
    let vv_sum = g.sum_all(vv)?;
    if g.value(uu_sum).item()? == 0.0 || g.value(vv_sum).item()? == 0.0 {
        return g.constant(Tensor::scalar(0.0));
    }
    let uv = g.mul(u, v)?;
    let dot = g.sum_all(uv)?;
    let nu = g.sqrt(uu_sum)?;
    let nv = g.sqrt(vv_sum)?;
    let denom = g.mul(nu, nv)?;
    g.div(dot, denom)
}

// ── per-pass scoring ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub layer: usize,
    pub head: usize,
    pub score: f64,
}

/// Score of one denoiser pass at one noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassScore {
    pub noise_level: f64,
    pub timestep: usize,
    pub per_head: Vec<HeadScore>,
    /// Per selected layer: (layer index, weight per head). Probability
    /// vectors; uniform mode stores 1/H everywhere.
    pub head_weights: Vec<(usize, Vec<f64>)>,
    pub score: f64,
}

impl PassScore {
    /// Re-aggregate `per_head` with `head_weights` in the exact op order the
    /// tape used: per layer a weighted add-chain, then a layer add-chain
    /// scaled by 1/len.
    pub fn recompute(&self) -> f64 {
        let mut layer_sum = 0.0;
        let mut first = true;
        for (layer, weights) in &self.head_weights {
            let mut acc = 0.0;
            let mut inner_first = true;
            for (w, hs) in weights.iter().zip(
                self.per_head
                    .iter()
                    .filter(|h| h.layer == *layer),
            ) {
                let term = hs.score * w;
                if inner_first {
                    acc = term;
                    inner_first = false;
                } else {
                    acc += term;
                }
            }
            if first {
                layer_sum = acc;
                first = false;
            } else {
                layer_sum += acc;
            }
        }
        layer_sum * (1.0 / self.head_weights.len() as f64)
    }
}

/// Full match score: raw pass mean plus its calibrated probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchScore {
    pub raw: f64,
    pub calibrated: f64,
    pub passes: Vec<PassScore>,
}

impl MatchScore {
    /// Mirror of the aggregation: mean over pass recomputations.
    pub fn recompute_raw(&self) -> f64 {
        let mut sum = 0.0;
        for p in &self.passes {
            sum += p.recompute();
        }
        sum * (1.0 / self.passes.len() as f64)
    }
}

/// Per-(layer, head) score nodes for the selected layers, plus the layer's
/// text-column count after BOS handling.
fn build_head_scores(
    g: &mut Graph,
    trace: &DenoiserTrace,
    cfg: &ScoreConfig,
) -> Result<Vec<(usize, Vec<NodeId>)>> {
    let layers = trace.layer_tokens.len();
    cfg.validate(layers)?;
    if trace.records.is_empty() {
        return Err(Error::Config("trace holds no attention records".into()));
    }
    let heads = trace.records.iter().map(|r| r.head).max().unwrap() + 1;
    let mut out = Vec::with_capacity(cfg.layer_set.len());
    for &layer in &cfg.layer_set {
        // One cosine node per layer, shared across its heads.
        let cosine = if cfg.pooling == Pooling::Cosine {
            Some(pool_cosine(
                g,
                trace.layer_tokens[layer],
                trace.text_tokens,
            )?)
        } else {
            None
        };
        let mut head_nodes = Vec::with_capacity(heads);
        for head in 0..heads {
            let rec = trace
                .records
                .iter()
                .find(|r| r.layer == layer && r.head == head)
                .ok_or_else(|| {
                    Error::Config(format!("no attention record for layer {layer} head {head}"))
                })?;
            let node = match cfg.pooling {
                Pooling::Cosine => cosine.expect("built above"),
                Pooling::Lse | Pooling::Max => {
                    let m = g.value(rec.map).cols();
                    let lo = if cfg.include_bos { 0 } else { 1 };
                    if lo >= m {
                        return Err(Error::Config(
                            "attention map has no text columns after BOS exclusion".into(),
                        ));
                    }
                    let content = g.slice_cols(rec.map, lo, m)?;
                    let pooled = match cfg.pooling {
                        Pooling::Lse => pool_lse(g, content, cfg.lambda)?,
                        _ => pool_max(g, content)?,
                    };
                    g.mean_all(pooled)?
                }
            };
            head_nodes.push(node);
        }
        out.push((layer, head_nodes));
    }
    Ok(out)
}

/// Weighted aggregate in fixed op order: per layer an add-chain of scaled
/// head scores, then an add-chain over layers scaled by 1/len.
fn aggregate(
    g: &mut Graph,
    head_scores: &[(usize, Vec<NodeId>)],
    weights: &[(usize, Vec<f64>)],
) -> Result<NodeId> {
    let mut layer_nodes = Vec::with_capacity(head_scores.len());
    for ((_, nodes), (_, ws)) in head_scores.iter().zip(weights) {
        let mut acc: Option<NodeId> = None;
        for (&node, &w) in nodes.iter().zip(ws) {
            let term = g.scale(node, w)?;
            acc = Some(match acc {
                None => term,
                Some(prev) => g.add(prev, term)?,
            });
        }
        layer_nodes.push(acc.expect("heads > 0"));
    }
    let mut total: Option<NodeId> = None;
    for node in layer_nodes {
        total = Some(match total {
            None => node,
            Some(prev) => g.add(prev, node)?,
        });
    }
    g.scale(total.expect("layers > 0"), 1.0 / head_scores.len() as f64)
}

fn uniform_weights(head_scores: &[(usize, Vec<NodeId>)]) -> Vec<(usize, Vec<f64>)> {
    head_scores
        .iter()
        .map(|(layer, nodes)| (*layer, vec![1.0 / nodes.len() as f64; nodes.len()]))
        .collect()
}

fn softmax_plain(xs: &[f64]) -> Vec<f64> {
    let mx = xs.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = xs.iter().map(|&v| (v - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn attribution_weights(
    g: &mut Graph,
    trace: &DenoiserTrace,
    head_scores: &[(usize, Vec<NodeId>)],
) -> Result<Vec<(usize, Vec<f64>)>> {
    // Base score with uniform heads, then one backward pass for d f / d A.
    let uniform = uniform_weights(head_scores);
    let base = aggregate(g, head_scores, &uniform)?;
    g.backward(base)?;

    let mut weights = Vec::with_capacity(head_scores.len());
    for (layer, nodes) in head_scores {
        let mut attributions = Vec::with_capacity(nodes.len());
        for head in 0..nodes.len() {
            let rec = trace
                .records
                .iter()
                .find(|r| r.layer == *layer && r.head == head)
                .expect("validated in build_head_scores");
            if !g.needs_grad(rec.map) {
                return Err(Error::Usage(
                    "attention maps were not retained for gradients".into(),
                ));
            }
            // A zero gradient (e.g. cosine pooling ignores A) gives a zero
            // attribution matrix, not an error.
            let attr: f64 = match g.grad(rec.map) {
                Some(grad) => g
                    .value(rec.map)
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&a, &da)| a * da)
                    .sum(),
                None => 0.0,
            };
            attributions.push(attr);
        }
        weights.push((*layer, softmax_plain(&attributions)));
    }
    g.zero_grads();
    Ok(weights)
}

/// Softmax-normalized per-layer head weights from gradient-times-activation
/// attribution against the uniform-head score.
pub fn dynamic_head_weights(
    g: &mut Graph,
    trace: &DenoiserTrace,
    cfg: &ScoreConfig,
) -> Result<Vec<(usize, Vec<f64>)>> {
    let head_scores = build_head_scores(g, trace, cfg)?;
    attribution_weights(g, trace, &head_scores)
}

/// Score one captured forward pass. Returns the score node (for training
/// losses built on top) and its plain-value breakdown.
pub fn score_single_pass(
    g: &mut Graph,
    trace: &DenoiserTrace,
    cfg: &ScoreConfig,
) -> Result<(NodeId, PassScore)> {
    let head_scores = build_head_scores(g, trace, cfg)?;
    let weights = match cfg.head_mode {
        HeadMode::Uniform => uniform_weights(&head_scores),
        HeadMode::Dynamic => attribution_weights(g, trace, &head_scores)?,
    };
    let f = aggregate(g, &head_scores, &weights)?;
    let per_head = head_scores
        .iter()
        .flat_map(|(layer, nodes)| {
            nodes.iter().enumerate().map(|(head, &n)| HeadScore {
                layer: *layer,
                head,
                score: g.value(n).item().expect("scalar head score"),
            })
        })
        .collect();
    let pass = PassScore {
        noise_level: 0.0,
        timestep: 0,
        per_head,
        head_weights: weights,
        score: g.value(f).item()?,
    };
    Ok((f, pass))
}

// ── whole-pair scoring ──────────────────────────────────────────────────

/// Noise draw for a scoring pass: derived from the instance seed and the
/// discrete timestep, so ensemble levels are independent but reproducible.
pub fn scoring_noise(instance_seed: u64, t: usize, rows: usize, cols: usize) -> Tensor {
    let mut rng = SplitMix64::new(derive2(instance_seed, LABEL_SCORE_NOISE, t as u64));
    Tensor::randn(&[rows, cols], 1.0, &mut rng)
}

/// Score one (image, caption) pair with a frozen model. One fresh tape per
/// noise level; raw score is the mean over levels.
pub fn score_pair(
    model: &Model,
    prompts: Option<&PromptParams>,
    image: &Image,
    caption: &Caption,
    cfg: &ScoreConfig,
    instance_seed: u64,
) -> Result<MatchScore> {
    cfg.validate(model.config.layers)?;
    let levels: &[f64] = if cfg.ensemble {
        &cfg.noise_levels
    } else {
        &cfg.noise_levels[..1]
    };
    let mut passes = Vec::with_capacity(levels.len());
    for &level in levels {
        let t = model.schedule.timestep_for_level(level)?;
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false)?;
        let r_y = model.encode_caption(&mut g, &vars, caption)?;
        let z0 = model.encode_image(&mut g, &vars, image)?;
        let eps = scoring_noise(
            instance_seed,
            t,
            model.config.n_image_tokens(),
            model.config.d_model,
        );
        let eps_id = g.constant(eps)?;
        let resolved = match prompts {
            Some(p) => {
                let pvars = crate::adapt::bind_prompts(&mut g, p, false)?;
                Some(crate::adapt::conditional_prompt(
                    &mut g,
                    &pvars,
                    z0,
                    &model.config,
                )?)
            }
            None => None,
        };
        let trace = model.noised_forward(&mut g, &vars, z0, t, eps_id, r_y, resolved.as_ref())?;
        let (_, mut pass) = score_single_pass(&mut g, &trace, cfg)?;
        pass.noise_level = level;
        pass.timestep = t;
        passes.push(pass);
    }
    let mut sum = 0.0;
    for p in &passes {
        sum += p.score;
    }
    let raw = sum * (1.0 / passes.len() as f64);
    let calibration = prompts
        .map(|p| p.calibration())
        .unwrap_or(cfg.calibration);
    Ok(MatchScore {
        raw,
        calibrated: calibration.apply(raw),
        passes,
    })
}

// ── candidate ranking ───────────────────────────────────────────────────

/// Indices sorted by descending score; ties go to the lower index.
pub fn rank_scores(raw: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&i, &j| {
        raw[j]
            .partial_cmp(&raw[i])
            .expect("scores are finite")
            .then(i.cmp(&j))
    });
    order
}

#[derive(Debug, Clone)]
pub struct Ranking {
    pub scores: Vec<MatchScore>,
    /// Candidate indices, best first.
    pub order: Vec<usize>,
}

impl Ranking {
    pub fn top1_hit(&self, true_index: usize) -> bool {
        self.order.first() == Some(&true_index)
    }

    pub fn topk_hit(&self, true_index: usize, k: usize) -> bool {
        self.order.iter().take(k).any(|&i| i == true_index)
    }
}

/// Score every candidate caption against the image and rank them.
pub fn match_candidates(
    model: &Model,
    prompts: Option<&PromptParams>,
    image: &Image,
    candidates: &[Caption],
    cfg: &ScoreConfig,
    instance_seed: u64,
) -> Result<Ranking> {
    if candidates.is_empty() {
        return Err(Error::Usage("no candidates to rank".into()));
    }
    let scores = candidates
        .iter()
        .map(|c| score_pair(model, prompts, image, c, cfg, instance_seed))
        .collect::<Result<Vec<_>>>()?;
    let raw: Vec<f64> = scores.iter().map(|s| s.raw).collect();
    let order = rank_scores(&raw);
    Ok(Ranking { scores, order })
}

#[cfg(test)]
mod scoring_tests;
