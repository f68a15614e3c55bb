//! The full scoring model: vocabulary, encoders, denoiser and noise
//! schedule behind one config, one seed, and one parameter registry.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Caption, Image, Vocab, CAPTION_LEN, IMAGE_SIZE};
use crate::diffusion::{
    denoiser_forward, make_schedule, DenoiserTrace, DenoiserVars, NoiseSchedule, ResolvedPrompts,
};
use crate::diffusion::Denoiser;
use crate::encoders::{
    encode_image, encode_text, ImageEncoder, ImageEncoderVars, TextEncoder, TextEncoderVars,
};
use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Tensor};
use crate::rng::{derive, SplitMix64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub d_text: usize,
    pub caption_len: usize,
    pub vocab_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub map_hidden: usize,
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: IMAGE_SIZE,
            patch_size: 4,
            d_model: 32,
            d_text: 32,
            caption_len: CAPTION_LEN,
            vocab_size: Vocab::default().len(),
            layers: 4,
            heads: 4,
            ff_hidden: 32,
            map_hidden: 32,
            timesteps: 100,
            beta_min: 1e-4,
            beta_max: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide d_model {}",
                self.heads, self.d_model
            )));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "patch size {} must tile image size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("need at least one layer".into()));
        }
        if self.vocab_size == 0 || self.caption_len == 0 {
            return Err(Error::Config("empty vocabulary or caption".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn n_image_tokens(&self) -> usize {
        let grid = self.image_size / self.patch_size;
        grid * grid
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub text_enc: TextEncoder,
    pub img_enc: ImageEncoder,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
}

/// Tape handles for one bound forward pass.
pub struct ModelVars {
    pub text: TextEncoderVars,
    pub img: ImageEncoderVars,
    pub denoiser: DenoiserVars,
    /// Leaf ids in canonical parameter order (same order as `visit_params`).
    pub param_ids: Vec<NodeId>,
}

impl Model {
    /// Fresh model with seeded Gaussian weights. Each tensor draws from its
    /// own derived stream, so the init is stable under registry growth.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut streams = (0u64..).map(|i| SplitMix64::new(derive(seed, i)));
        let mut next = || streams.next().expect("infinite");
        let text_enc = TextEncoder::init(
            config.vocab_size,
            config.caption_len,
            config.d_text,
            &mut next(),
        );
        let img_enc = ImageEncoder::init(
            config.d_model,
            config.patch_dim(),
            config.n_image_tokens(),
            &mut next(),
        );
        let denoiser = Denoiser::init(
            config.layers,
            config.d_model,
            config.d_text,
            config.ff_hidden,
            &mut next(),
        );
        let schedule = make_schedule(config.timesteps, config.beta_min, config.beta_max)?;
        Ok(Model {
            config,
            vocab: Vocab::default(),
            text_enc,
            img_enc,
            denoiser,
            schedule,
        })
    }

    /// Insert every parameter as a tape leaf, trainable or frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<ModelVars> {
        let mut order = Vec::new();
        let bind = |g: &mut Graph, t: &Tensor, order: &mut Vec<NodeId>| -> Result<NodeId> {
            let id = g.leaf(t.clone(), trainable)?;
            order.push(id);
            Ok(id)
        };
        let text = TextEncoderVars {
            tok_emb: bind(g, &self.text_enc.tok_emb, &mut order)?,
            pos_emb: bind(g, &self.text_enc.pos_emb, &mut order)?,
        };
        let img = ImageEncoderVars {
            patch_proj: bind(g, &self.img_enc.patch_proj, &mut order)?,
            pos_emb: bind(g, &self.img_enc.pos_emb, &mut order)?,
        };
        let denoiser = self.denoiser.bind(g, trainable, &mut order)?;
        Ok(ModelVars {
            text,
            img,
            denoiser,
            param_ids: order,
        })
    }

    /// Canonical (name, tensor) list. The order here defines checkpoint
    /// layout, optimizer buffer alignment, and `bind` registration.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("text.tok_emb".to_string(), &self.text_enc.tok_emb),
            ("text.pos_emb".to_string(), &self.text_enc.pos_emb),
            ("img.patch_proj".to_string(), &self.img_enc.patch_proj),
            ("img.pos_emb".to_string(), &self.img_enc.pos_emb),
        ];
        out.extend(self.denoiser.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("text.tok_emb".to_string(), &mut self.text_enc.tok_emb),
            ("text.pos_emb".to_string(), &mut self.text_enc.pos_emb),
            ("img.patch_proj".to_string(), &mut self.img_enc.patch_proj),
            ("img.pos_emb".to_string(), &mut self.img_enc.pos_emb),
        ];
        out.extend(self.denoiser.params_mut());
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params().into_iter().map(|(n, _)| n).collect()
    }

    /// SHA-256 over names, shapes and raw little-endian payloads. Used to
    /// prove the backbone untouched by tuning.
    pub fn weights_digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for (name, t) in self.params() {
            hasher.update(name.as_bytes());
            for &e in t.shape() {
                hasher.update((e as u64).to_le_bytes());
            }
            for &v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().into()
    }

    pub fn encode_caption(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        caption: &Caption,
    ) -> Result<NodeId> {
        if caption.ids.iter().any(|&id| id >= self.vocab.len()) {
            return Err(Error::Vocabulary(
                "caption contains out-of-vocabulary ids".to_string(),
            ));
        }
        encode_text(g, &vars.text, caption)
    }

    pub fn encode_image(&self, g: &mut Graph, vars: &ModelVars, image: &Image) -> Result<NodeId> {
        encode_image(g, &vars.img, image, self.config.patch_size)
    }

    /// Forward-noise a latent node in-graph and run the denoiser.
    pub fn noised_forward(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        z0: NodeId,
        t: usize,
        eps: NodeId,
        r_y: NodeId,
        prompts: Option<&ResolvedPrompts>,
    ) -> Result<DenoiserTrace> {
        let ab = self.schedule.alpha_bar(t)?;
        let signal = g.scale(z0, ab.sqrt())?;
        let noise = g.scale(eps, (1.0 - ab).sqrt())?;
        let z_t = g.add(signal, noise)?;
        denoiser_forward(g, &vars.denoiser, z_t, t, r_y, self.config.heads, prompts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_order_matches_visit_order() {
        let model = Model::init(ModelConfig::default(), 3).unwrap();
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false).unwrap();
        let params = model.params();
        assert_eq!(vars.param_ids.len(), params.len());
        for (id, (_, t)) in vars.param_ids.iter().zip(&params) {
            assert_eq!(g.value(*id).data(), t.data());
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::init(ModelConfig::default(), 9).unwrap();
        let b = Model::init(ModelConfig::default(), 9).unwrap();
        assert_eq!(a.weights_digest(), b.weights_digest());
        let c = Model::init(ModelConfig::default(), 10).unwrap();
        assert_ne!(a.weights_digest(), c.weights_digest());
    }

    #[test]
    fn config_validation_catches_bad_dims() {
        let mut cfg = ModelConfig::default();
        cfg.heads = 5;
        assert!(matches!(Model::init(cfg, 0), Err(Error::Config(_))));
        let mut cfg = ModelConfig::default();
        cfg.patch_size = 5;
        assert!(matches!(Model::init(cfg, 0), Err(Error::Config(_))));
    }
}
