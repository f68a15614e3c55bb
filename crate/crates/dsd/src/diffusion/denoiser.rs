//! Epsilon-prediction denoiser: a stack of cross-attention blocks at one
//! resolution whose attention maps are captured, per layer and head, as
//! live tape nodes.
//!
//! Per block: timestep sinusoid added to the image tokens, a linear
//! self-projection, multi-head cross-attention (queries from image tokens,
//! keys/values from text tokens), an output projection, and a feed-forward,
//! with residual connections around attention and feed-forward. A final
//! linear head reads out the noise estimate.

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Tensor};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub self_w: Tensor, // d x d
    pub self_b: Tensor, // 1 x d
    pub wq: Tensor,     // d x d, head slices are row bands of width d'
    pub wk: Tensor,     // d x d_text
    pub wv: Tensor,     // d x d_text
    pub wo: Tensor,     // d x d
    pub wo_b: Tensor,   // 1 x d
    pub ff_w1: Tensor,  // ff_hidden x d
    pub ff_b1: Tensor,  // 1 x ff_hidden
    pub ff_w2: Tensor,  // d x ff_hidden
    pub ff_b2: Tensor,  // 1 x d
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub blocks: Vec<BlockParams>,
    pub head_w: Tensor, // d x d
    pub head_b: Tensor, // 1 x d
}

impl Denoiser {
    pub fn init(
        layers: usize,
        d_model: usize,
        d_text: usize,
        ff_hidden: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        let xavier = |rows: usize, cols: usize, rng: &mut SplitMix64| {
            Tensor::randn(&[rows, cols], 1.0 / (cols as f64).sqrt(), rng)
        };
        let blocks = (0..layers)
            .map(|_| BlockParams {
                self_w: xavier(d_model, d_model, rng),
                self_b: Tensor::zeros(&[1, d_model]),
                wq: xavier(d_model, d_model, rng),
                wk: xavier(d_model, d_text, rng),
                wv: xavier(d_model, d_text, rng),
                wo: xavier(d_model, d_model, rng),
                wo_b: Tensor::zeros(&[1, d_model]),
                ff_w1: xavier(ff_hidden, d_model, rng),
                ff_b1: Tensor::zeros(&[1, ff_hidden]),
                ff_w2: xavier(d_model, ff_hidden, rng),
                ff_b2: Tensor::zeros(&[1, d_model]),
            })
            .collect();
        Denoiser {
            blocks,
            // Small output head so initial predictions start near zero.
            head_w: Tensor::randn(&[d_model, d_model], 0.02, rng),
            head_b: Tensor::zeros(&[1, d_model]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockVars {
    pub self_w: NodeId,
    pub self_b: NodeId,
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
    pub wo_b: NodeId,
    pub ff_w1: NodeId,
    pub ff_b1: NodeId,
    pub ff_w2: NodeId,
    pub ff_b2: NodeId,
}

#[derive(Debug, Clone)]
pub struct DenoiserVars {
    pub blocks: Vec<BlockVars>,
    pub head_w: NodeId,
    pub head_b: NodeId,
}

/// Additive key/value prompt offsets, one `d' x d_text` node per
/// (layer, head). Zero tensors make the forward pass bit-identical to the
/// promptless one.
#[derive(Debug, Clone)]
pub struct ResolvedPrompts {
    pub k: Vec<Vec<NodeId>>,
    pub v: Vec<Vec<NodeId>>,
}

/// One captured attention map: rows are image tokens, columns text tokens,
/// each row a probability vector. Stays differentiable on the tape.
#[derive(Debug, Clone, Copy)]
pub struct AttentionRecord {
    pub layer: usize,
    pub head: usize,
    pub map: NodeId,
}

/// Everything a forward pass exposes to scoring and training.
#[derive(Debug, Clone)]
pub struct DenoiserTrace {
    pub eps_hat: NodeId,
    /// layer-major, heads in order: length layers * heads.
    pub records: Vec<AttentionRecord>,
    /// Per layer, the (self-projected) image tokens the attention read.
    pub layer_tokens: Vec<NodeId>,
    pub text_tokens: NodeId,
}

/// Fixed sinusoidal embedding of a discrete timestep, `1 x dim`.
pub fn sinusoid_embedding(t: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; dim];
    let half = dim / 2;
    for i in 0..half {
        let freq = (10_000.0f64).powf(-(i as f64) / half as f64);
        data[2 * i] = (t as f64 * freq).sin();
        data[2 * i + 1] = (t as f64 * freq).cos();
    }
    Tensor::row(data)
}

impl Denoiser {
    pub fn bind(&self, g: &mut Graph, trainable: bool, order: &mut Vec<NodeId>) -> Result<DenoiserVars> {
        let mut bind = |t: &Tensor| -> Result<NodeId> {
            let id = g.leaf(t.clone(), trainable)?;
            order.push(id);
            Ok(id)
        };
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            blocks.push(BlockVars {
                self_w: bind(&b.self_w)?,
                self_b: bind(&b.self_b)?,
                wq: bind(&b.wq)?,
                wk: bind(&b.wk)?,
                wv: bind(&b.wv)?,
                wo: bind(&b.wo)?,
                wo_b: bind(&b.wo_b)?,
                ff_w1: bind(&b.ff_w1)?,
                ff_b1: bind(&b.ff_b1)?,
                ff_w2: bind(&b.ff_w2)?,
                ff_b2: bind(&b.ff_b2)?,
            });
        }
        let head_w = bind(&self.head_w)?;
        let head_b = bind(&self.head_b)?;
        Ok(DenoiserVars {
            blocks,
            head_w,
            head_b,
        })
    }

    /// Canonical (name, tensor) list; bind() registers in the same order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(self.blocks.len() * 11 + 2);
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("denoiser.b{l}.self_w"), &b.self_w));
            out.push((format!("denoiser.b{l}.self_b"), &b.self_b));
            out.push((format!("denoiser.b{l}.wq"), &b.wq));
            out.push((format!("denoiser.b{l}.wk"), &b.wk));
            out.push((format!("denoiser.b{l}.wv"), &b.wv));
            out.push((format!("denoiser.b{l}.wo"), &b.wo));
            out.push((format!("denoiser.b{l}.wo_b"), &b.wo_b));
            out.push((format!("denoiser.b{l}.ff_w1"), &b.ff_w1));
            out.push((format!("denoiser.b{l}.ff_b1"), &b.ff_b1));
            out.push((format!("denoiser.b{l}.ff_w2"), &b.ff_w2));
            out.push((format!("denoiser.b{l}.ff_b2"), &b.ff_b2));
        }
        out.push(("denoiser.head_w".to_string(), &self.head_w));
        out.push(("denoiser.head_b".to_string(), &self.head_b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::with_capacity(self.blocks.len() * 11 + 2);
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("denoiser.b{l}.self_w"), &mut b.self_w));
            out.push((format!("denoiser.b{l}.self_b"), &mut b.self_b));
            out.push((format!("denoiser.b{l}.wq"), &mut b.wq));
            out.push((format!("denoiser.b{l}.wk"), &mut b.wk));
            out.push((format!("denoiser.b{l}.wv"), &mut b.wv));
            out.push((format!("denoiser.b{l}.wo"), &mut b.wo));
            out.push((format!("denoiser.b{l}.wo_b"), &mut b.wo_b));
            out.push((format!("denoiser.b{l}.ff_w1"), &mut b.ff_w1));
            out.push((format!("denoiser.b{l}.ff_b1"), &mut b.ff_b1));
            out.push((format!("denoiser.b{l}.ff_w2"), &mut b.ff_w2));
            out.push((format!("denoiser.b{l}.ff_b2"), &mut b.ff_b2));
        }
        out.push(("denoiser.head_w".to_string(), &mut self.head_w));
        out.push(("denoiser.head_b".to_string(), &mut self.head_b));
        out
    }
}

/// Run the denoiser over a noised latent.
///
/// `heads` must divide the model width. With `prompts`, each head's key and
/// value slices become `W + p(x)` before use. Every attention map is
/// retained on the tape so attribution can read its gradient even when all
/// weights are frozen.
pub fn denoiser_forward(
    g: &mut Graph,
    vars: &DenoiserVars,
    z_t: NodeId,
    t: usize,
    r_y: NodeId,
    heads: usize,
    prompts: Option<&ResolvedPrompts>,
) -> Result<DenoiserTrace> {
    let d_model = g.value(z_t).cols();
    if heads == 0 || d_model % heads != 0 {
        return Err(Error::Dimension(format!(
            "heads {heads} must divide model width {d_model}"
        )));
    }
    let head_dim = d_model / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    if let Some(p) = prompts {
        if p.k.len() != vars.blocks.len() || p.v.len() != vars.blocks.len() {
            return Err(Error::Dimension(format!(
                "prompts cover {} layers, denoiser has {}",
                p.k.len(),
                vars.blocks.len()
            )));
        }
    }

    let temb = g.constant(sinusoid_embedding(t, d_model))?;
    let mut records = Vec::with_capacity(vars.blocks.len() * heads);
    let mut layer_tokens = Vec::with_capacity(vars.blocks.len());
    let mut x = z_t;

    for (layer, block) in vars.blocks.iter().enumerate() {
        let h_in = g.add_rowvec(x, temb)?;
        let proj = g.matmul_nt(h_in, block.self_w)?;
        let tokens = g.add_rowvec(proj, block.self_b)?;
        layer_tokens.push(tokens);

        let mut head_outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let (lo, hi) = (head * head_dim, (head + 1) * head_dim);
            let wq_h = g.slice_rows(block.wq, lo, hi)?;
            let mut wk_h = g.slice_rows(block.wk, lo, hi)?;
            let mut wv_h = g.slice_rows(block.wv, lo, hi)?;
            if let Some(p) = prompts {
                wk_h = g.add(wk_h, p.k[layer][head])?;
                wv_h = g.add(wv_h, p.v[layer][head])?;
            }
            let q = g.matmul_nt(tokens, wq_h)?;
            let k = g.matmul_nt(r_y, wk_h)?;
            let v = g.matmul_nt(r_y, wv_h)?;
            let logits = g.matmul_nt(q, k)?;
            let a = g.softmax_rows(logits, scale)?;
            g.retain_grad(a);
            records.push(AttentionRecord {
                layer,
                head,
                map: a,
            });
            head_outs.push(g.matmul(a, v)?);
        }
        let merged = g.concat_cols(&head_outs)?;
        let attn_proj = g.matmul_nt(merged, block.wo)?;
        let attn = g.add_rowvec(attn_proj, block.wo_b)?;
        let u = g.add(h_in, attn)?;

        let f1_lin = g.matmul_nt(u, block.ff_w1)?;
        let f1_biased = g.add_rowvec(f1_lin, block.ff_b1)?;
        let f1 = g.sigmoid(f1_biased)?;
        let f2_lin = g.matmul_nt(f1, block.ff_w2)?;
        let f2 = g.add_rowvec(f2_lin, block.ff_b2)?;
        x = g.add(u, f2)?;
    }

    let head_lin = g.matmul_nt(x, vars.head_w)?;
    let eps_hat = g.add_rowvec(head_lin, vars.head_b)?;
    Ok(DenoiserTrace {
        eps_hat,
        records,
        layer_tokens,
        text_tokens: r_y,
    })
}
