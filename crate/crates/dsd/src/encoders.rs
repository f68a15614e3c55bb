//! Toy text and image encoders.
//!
//! Text: embedding-table lookup plus learned positional rows. Image: a
//! bias-free linear projection of non-overlapping pixel patches plus
//! learned positional rows, so the pre-position latent is exactly linear in
//! the pixels. Neither encoder has a reconstruction objective; both train
//! jointly with the denoiser and are frozen afterwards.

use crate::data::{Caption, Image, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Tensor};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    /// V x d_text token embeddings.
    pub tok_emb: Tensor,
    /// M x d_text positional embeddings.
    pub pos_emb: Tensor,
}

impl TextEncoder {
    pub fn init(vocab_size: usize, caption_len: usize, d_text: usize, rng: &mut SplitMix64) -> Self {
        TextEncoder {
            tok_emb: Tensor::randn(&[vocab_size, d_text], 0.5, rng),
            pos_emb: Tensor::randn(&[caption_len, d_text], 0.5, rng),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TextEncoderVars {
    pub tok_emb: NodeId,
    pub pos_emb: NodeId,
}

/// r_y: `M x d_text` caption representation, on the tape.
pub fn encode_text(
    g: &mut Graph,
    vars: &TextEncoderVars,
    caption: &Caption,
) -> Result<NodeId> {
    let vocab_size = g.value(vars.tok_emb).rows();
    let caption_len = g.value(vars.pos_emb).rows();
    if caption.ids.len() != caption_len {
        return Err(Error::Vocabulary(format!(
            "caption length {} does not match encoder length {caption_len}",
            caption.ids.len()
        )));
    }
    if let Some(&bad) = caption.ids.iter().find(|&&id| id >= vocab_size) {
        return Err(Error::Vocabulary(format!(
            "token id {bad} out of range for vocabulary of {vocab_size}"
        )));
    }
    let looked_up = g.gather_rows(vars.tok_emb, &caption.ids)?;
    g.add(looked_up, vars.pos_emb)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoder {
    /// d_model x patch_dim projection, applied as `patches * W^T`. No bias,
    /// which keeps the pre-position latent linear in the pixels.
    pub patch_proj: Tensor,
    /// N x d_model positional embeddings.
    pub pos_emb: Tensor,
}

impl ImageEncoder {
    pub fn init(
        d_model: usize,
        patch_dim: usize,
        n_tokens: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        ImageEncoder {
            patch_proj: Tensor::randn(&[d_model, patch_dim], 1.0 / (patch_dim as f64).sqrt(), rng),
            pos_emb: Tensor::randn(&[n_tokens, d_model], 0.5, rng),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ImageEncoderVars {
    pub patch_proj: NodeId,
    pub pos_emb: NodeId,
}

/// Flatten an image into its `N x (patch_size^2 * 3)` patch matrix.
/// Patches scan row-major over the patch grid; within a patch the layout is
/// `(y, x, channel)`, matching the image's own layout.
pub fn image_patches(image: &Image, patch_size: usize) -> Result<Tensor> {
    if image.pixels.len() != IMAGE_SIZE * IMAGE_SIZE * 3 {
        return Err(Error::Dimension(format!(
            "image must be {IMAGE_SIZE}x{IMAGE_SIZE}x3, got {} values",
            image.pixels.len()
        )));
    }
    if patch_size == 0 || IMAGE_SIZE % patch_size != 0 {
        return Err(Error::Dimension(format!(
            "patch size {patch_size} does not tile {IMAGE_SIZE}"
        )));
    }
    let grid = IMAGE_SIZE / patch_size;
    let patch_dim = patch_size * patch_size * 3;
    let mut data = Vec::with_capacity(grid * grid * patch_dim);
    for py in 0..grid {
        for px in 0..grid {
            for dy in 0..patch_size {
                for dx in 0..patch_size {
                    let y = py * patch_size + dy;
                    let x = px * patch_size + dx;
                    let base = (y * IMAGE_SIZE + x) * 3;
                    data.extend_from_slice(&image.pixels[base..base + 3]);
                }
            }
        }
    }
    Tensor::new(vec![grid * grid, patch_dim], data)
}

/// z_0: `N x d_model` latent, on the tape. Pixels enter as constants; the
/// projection and positions participate in autodiff when bound trainable.
pub fn encode_image(
    g: &mut Graph,
    vars: &ImageEncoderVars,
    image: &Image,
    patch_size: usize,
) -> Result<NodeId> {
    let patches = image_patches(image, patch_size)?;
    let expected_dim = g.value(vars.patch_proj).cols();
    if patches.cols() != expected_dim {
        return Err(Error::Dimension(format!(
            "patch dim {} does not match projection input {expected_dim}",
            patches.cols()
        )));
    }
    if patches.rows() != g.value(vars.pos_emb).rows() {
        return Err(Error::Dimension(format!(
            "patch count {} does not match positional table {}",
            patches.rows(),
            g.value(vars.pos_emb).rows()
        )));
    }
    let pid = g.constant(patches)?;
    let projected = g.matmul_nt(pid, vars.patch_proj)?;
    g.add(projected, vars.pos_emb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, render, tokenize, Vocab};

    fn bind_text(g: &mut Graph, enc: &TextEncoder) -> TextEncoderVars {
        TextEncoderVars {
            tok_emb: g.constant(enc.tok_emb.clone()).unwrap(),
            pos_emb: g.constant(enc.pos_emb.clone()).unwrap(),
        }
    }

    fn bind_image(g: &mut Graph, enc: &ImageEncoder) -> ImageEncoderVars {
        ImageEncoderVars {
            patch_proj: g.constant(enc.patch_proj.clone()).unwrap(),
            pos_emb: g.constant(enc.pos_emb.clone()).unwrap(),
        }
    }

    #[test]
    fn zero_tables_give_zero_text_output() {
        let enc = TextEncoder {
            tok_emb: Tensor::zeros(&[12, 8]),
            pos_emb: Tensor::zeros(&[6, 8]),
        };
        let vocab = Vocab::default();
        let cap = tokenize(&generate_scene(0), &vocab).unwrap();
        let mut g = Graph::new();
        let vars = bind_text(&mut g, &enc);
        let out = encode_text(&mut g, &vars, &cap).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.value(out).shape(), &[6, 8]);
    }

    #[test]
    fn text_lookup_matches_table_rows() {
        let mut rng = SplitMix64::new(3);
        let enc = TextEncoder {
            tok_emb: Tensor::randn(&[12, 4], 1.0, &mut rng),
            pos_emb: Tensor::zeros(&[6, 4]),
        };
        let vocab = Vocab::default();
        let scene = generate_scene(5);
        let cap = tokenize(&scene, &vocab).unwrap();
        let mut g = Graph::new();
        let vars = bind_text(&mut g, &enc);
        let out = encode_text(&mut g, &vars, &cap).unwrap();
        for (row, &id) in cap.ids.iter().enumerate() {
            for c in 0..4 {
                assert_eq!(g.value(out).at(row, c), enc.tok_emb.at(id, c));
            }
        }
    }

    #[test]
    fn equal_captions_encode_equally() {
        let mut rng = SplitMix64::new(9);
        let enc = TextEncoder::init(12, 6, 16, &mut rng);
        let vocab = Vocab::default();
        let cap = tokenize(&generate_scene(8), &vocab).unwrap();
        let run = |cap: &Caption| {
            let mut g = Graph::new();
            let vars = bind_text(&mut g, &enc);
            let out = encode_text(&mut g, &vars, cap).unwrap();
            g.value(out).data().to_vec()
        };
        assert_eq!(run(&cap), run(&cap.clone()));
    }

    #[test]
    fn out_of_range_token_is_vocabulary_error() {
        let mut rng = SplitMix64::new(1);
        let enc = TextEncoder::init(12, 6, 8, &mut rng);
        let mut g = Graph::new();
        let vars = bind_text(&mut g, &enc);
        let cap = Caption {
            ids: vec![0, 1, 5, 99, 3, 6],
        };
        assert!(matches!(
            encode_text(&mut g, &vars, &cap),
            Err(Error::Vocabulary(_))
        ));
    }

    #[test]
    fn zero_image_zero_positions_give_zero_latent() {
        let enc = ImageEncoder {
            patch_proj: Tensor::zeros(&[8, 48]),
            pos_emb: Tensor::zeros(&[64, 8]),
        };
        let img = Image {
            pixels: vec![0.0; 32 * 32 * 3],
        };
        let mut g = Graph::new();
        let vars = bind_image(&mut g, &enc);
        let out = encode_image(&mut g, &vars, &img, 4).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_lit_pixel_touches_one_patch() {
        let mut img = Image {
            pixels: vec![0.0; 32 * 32 * 3],
        };
        img.pixels[(13 * 32 + 22) * 3] = 1.0; // y=13, x=22 -> patch (3, 5)
        let patches = image_patches(&img, 4).unwrap();
        let nonzero_rows: Vec<usize> = (0..patches.rows())
            .filter(|&r| (0..patches.cols()).any(|c| patches.at(r, c) != 0.0))
            .collect();
        assert_eq!(nonzero_rows, vec![3 * 8 + 5]);
    }

    #[test]
    fn projection_matches_per_patch_matmul_oracle() {
        let mut rng = SplitMix64::new(17);
        let enc = ImageEncoder::init(8, 48, 64, &mut rng);
        let img = render(&generate_scene(2));
        let patches = image_patches(&img, 4).unwrap();
        let mut g = Graph::new();
        let vars = bind_image(&mut g, &enc);
        let out = encode_image(&mut g, &vars, &img, 4).unwrap();
        for r in 0..64 {
            for c in 0..8 {
                let mut want = 0.0;
                for p in 0..48 {
                    want += patches.at(r, p) * enc.patch_proj.at(c, p);
                }
                want += enc.pos_emb.at(r, c);
                let got = g.value(out).at(r, c);
                assert!((got - want).abs() <= 1e-12, "({r},{c}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn encoding_is_linear_in_pixels() {
        let mut rng = SplitMix64::new(23);
        let enc = ImageEncoder::init(8, 48, 64, &mut rng);
        let img = render(&generate_scene(6));
        let scaled = Image {
            pixels: img.pixels.iter().map(|v| 0.25 * v).collect(),
        };
        let encode_minus_pos = |image: &Image| {
            let mut g = Graph::new();
            let vars = bind_image(&mut g, &enc);
            let z = encode_image(&mut g, &vars, image, 4).unwrap();
            let z = g.value(z).clone();
            let mut out = z.data().to_vec();
            for r in 0..64 {
                for c in 0..8 {
                    out[r * 8 + c] -= enc.pos_emb.at(r, c);
                }
            }
            out
        };
        let full = encode_minus_pos(&img);
        let quarter = encode_minus_pos(&scaled);
        for (f, q) in full.iter().zip(&quarter) {
            assert!((0.25 * f - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn wrong_image_shape_is_dimension_error() {
        let img = Image {
            pixels: vec![0.0; 16],
        };
        assert!(matches!(
            image_patches(&img, 4),
            Err(Error::Dimension(_))
        ));
    }
}
