use super::*;
use crate::data::{build_dataset, render};
use crate::diffusion::AttentionRecord;
use crate::model::ModelConfig;
use crate::rng::SplitMix64;

fn assert_close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
}

/// Hand-built trace: `layers x heads` random row-stochastic maps plus
/// random token matrices, all tape leaves.
struct FakeTrace {
    trace: DenoiserTrace,
    maps: Vec<Vec<Tensor>>,
}

fn fake_trace(
    g: &mut Graph,
    layers: usize,
    heads: usize,
    n: usize,
    m: usize,
    seed: u64,
) -> FakeTrace {
    let mut rng = SplitMix64::new(seed);
    let mut records = Vec::new();
    let mut layer_tokens = Vec::new();
    let mut maps = Vec::new();
    for layer in 0..layers {
        let tokens = Tensor::randn(&[n, 8], 1.0, &mut rng);
        layer_tokens.push(g.constant(tokens).unwrap());
        let mut row = Vec::new();
        for head in 0..heads {
            // Row-stochastic map via softmax of random logits.
            let logits = Tensor::randn(&[n, m], 1.0, &mut rng);
            let lid = g.constant(logits).unwrap();
            let map = g.softmax_rows(lid, 1.0).unwrap();
            g.retain_grad(map);
            records.push(AttentionRecord { layer, head, map });
            row.push(g.value(map).clone());
        }
        maps.push(row);
    }
    let text_tokens = g
        .constant(Tensor::randn(&[m, 8], 1.0, &mut rng))
        .unwrap();
    FakeTrace {
        trace: DenoiserTrace {
            eps_hat: text_tokens,
            records,
            layer_tokens,
            text_tokens,
        },
        maps,
    }
}

fn test_cfg(layers: usize) -> ScoreConfig {
    ScoreConfig::default_for(layers)
}

// ── pooling ─────────────────────────────────────────────────────────────

#[test]
fn pool_max_single_row_is_identity() {
    let mut g = Graph::new();
    let a = g
        .constant(Tensor::new(vec![1, 3], vec![0.3, 0.9, 0.1]).unwrap())
        .unwrap();
    let p = pool_max(&mut g, a).unwrap();
    assert_eq!(g.value(p).data(), &[0.3, 0.9, 0.1]);
}

#[test]
fn pool_max_picks_column_maxima() {
    let mut g = Graph::new();
    let a = g
        .constant(Tensor::new(vec![3, 1], vec![0.2, 0.7, 0.1]).unwrap())
        .unwrap();
    let p = pool_max(&mut g, a).unwrap();
    assert_eq!(g.value(p).data(), &[0.7]);
}

#[test]
fn pooling_sandwich_on_random_maps() {
    let mut rng = SplitMix64::new(3);
    for _ in 0..100 {
        let n = 2 + rng.next_index(8);
        let m = 1 + rng.next_index(5);
        let lambda = 0.5 + 9.5 * rng.next_f64();
        let map = Tensor::randn(&[n, m], 1.0, &mut rng);
        let mut g = Graph::new();
        let a = g.constant(map).unwrap();
        let mx = pool_max(&mut g, a).unwrap();
        let lse = pool_lse(&mut g, a, lambda).unwrap();
        for j in 0..m {
            let lo = g.value(mx).at(0, j);
            let v = g.value(lse).at(0, j);
            assert!(lo <= v + 1e-12);
            assert!(v <= lo + (n as f64).ln() / lambda + 1e-12);
        }
    }
}

#[test]
fn cosine_of_identical_pooled_vectors_is_one() {
    let mut g = Graph::new();
    let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap();
    let a = g.constant(t.clone()).unwrap();
    let b = g.constant(t).unwrap();
    let c = pool_cosine(&mut g, a, b).unwrap();
    assert_close(g.value(c).item().unwrap(), 1.0, 1e-12);
}

#[test]
fn cosine_of_orthogonal_pooled_vectors_is_zero() {
    let mut g = Graph::new();
    let a = g
        .constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap())
        .unwrap();
    let b = g
        .constant(Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap())
        .unwrap();
    let c = pool_cosine(&mut g, a, b).unwrap();
    assert_close(g.value(c).item().unwrap(), 0.0, 1e-15);
}

#[test]
fn cosine_matches_dot_norm_oracle() {
    let mut rng = SplitMix64::new(8);
    let x = Tensor::randn(&[3, 5], 1.0, &mut rng);
    let y = Tensor::randn(&[4, 7], 1.0, &mut rng);
    let mut g = Graph::new();
    let a = g.constant(x.clone()).unwrap();
    let b = g.constant(y.clone()).unwrap();
    let c = pool_cosine(&mut g, a, b).unwrap();

    let shared = 5usize;
    let mean = |t: &Tensor, j: usize| -> f64 {
        (0..t.rows()).map(|i| t.at(i, j)).sum::<f64>() / t.rows() as f64
    };
    let u: Vec<f64> = (0..shared).map(|j| mean(&x, j)).collect();
    let v: Vec<f64> = (0..shared).map(|j| mean(&y, j)).collect();
    let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert_close(g.value(c).item().unwrap(), dot / (nu * nv), 1e-12);
}

#[test]
fn cosine_zero_vector_scores_zero_by_convention() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = g
        .constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap())
        .unwrap();
    let c = pool_cosine(&mut g, a, b).unwrap();
    assert_eq!(g.value(c).item().unwrap(), 0.0);
}

// ── single-pass scoring ─────────────────────────────────────────────────

#[test]
fn one_layer_one_head_lse_is_mean_of_pooled_columns() {
    let mut g = Graph::new();
    let ft = fake_trace(&mut g, 1, 1, 5, 4, 11);
    let mut cfg = test_cfg(1);
    cfg.head_mode = HeadMode::Uniform;
    let (_, pass) = score_single_pass(&mut g, &ft.trace, &cfg).unwrap();

    // Oracle: per non-BOS column, stabilized LSE over rows; then mean.
    let a = &ft.maps[0][0];
    let mut want = 0.0;
    for j in 1..4 {
        let mx = (0..5).map(|i| a.at(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = (0..5).map(|i| (cfg.lambda * (a.at(i, j) - mx)).exp()).sum();
        want += mx + s.ln() / cfg.lambda;
    }
    want /= 3.0;
    assert_close(pass.score, want, 1e-12);
}

#[test]
fn uniform_two_layer_mean_is_arithmetic() {
    // Layer scores 0.4 and 0.6 under uniform heads must average to 0.5.
    // Use max pooling on hand-built single-row maps so the layer scores are
    // exactly 0.4 and 0.6.
    let mut g = Graph::new();
    let mut records = Vec::new();
    let mut layer_tokens = Vec::new();
    for (layer, v) in [0.4, 0.6].iter().enumerate() {
        let map = g
            .constant(Tensor::new(vec![1, 2], vec![0.0, *v]).unwrap())
            .unwrap();
        g.retain_grad(map);
        records.push(AttentionRecord {
            layer,
            head: 0,
            map,
        });
        layer_tokens.push(g.constant(Tensor::zeros(&[1, 2])).unwrap());
    }
    let text_tokens = g.constant(Tensor::zeros(&[2, 2])).unwrap();
    let trace = DenoiserTrace {
        eps_hat: text_tokens,
        records,
        layer_tokens,
        text_tokens,
    };
    let mut cfg = test_cfg(2);
    cfg.pooling = Pooling::Max;
    cfg.head_mode = HeadMode::Uniform;
    let (_, pass) = score_single_pass(&mut g, &trace, &cfg).unwrap();
    assert_close(pass.score, 0.5, 1e-15);
}

/// Flat reimplementation of the full default config (LSE pooling, dynamic
/// head weighting): explicit loops, no tape.
fn flat_oracle(maps: &[Vec<Tensor>], cfg: &ScoreConfig) -> f64 {
    let layers = cfg.layer_set.len();
    let heads = maps[0].len();
    let lse_cols = |a: &Tensor| -> Vec<f64> {
        let lo = if cfg.include_bos { 0 } else { 1 };
        (lo..a.cols())
            .map(|j| {
                let mx = (0..a.rows())
                    .map(|i| a.at(i, j))
                    .fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = (0..a.rows())
                    .map(|i| (cfg.lambda * (a.at(i, j) - mx)).exp())
                    .sum();
                mx + s.ln() / cfg.lambda
            })
            .collect()
    };
    // Per-head scores.
    let mut s = vec![vec![0.0; heads]; layers];
    for (li, &layer) in cfg.layer_set.iter().enumerate() {
        for h in 0..heads {
            let pooled = lse_cols(&maps[layer][h]);
            s[li][h] = pooled.iter().sum::<f64>() / pooled.len() as f64;
        }
    }
    // d f_uniform / d A[i, j] = (1/(L * H * m')) * softmax-col-weight(i, j);
    // attribution per head is sum_ij A * dA.
    let mut weights = vec![vec![0.0; heads]; layers];
    for (li, &layer) in cfg.layer_set.iter().enumerate() {
        let mut attr = vec![0.0; heads];
        for h in 0..heads {
            let a = &maps[layer][h];
            let lo = if cfg.include_bos { 0 } else { 1 };
            let m_eff = (a.cols() - lo) as f64;
            let coef = 1.0 / (layers as f64 * heads as f64 * m_eff);
            for j in lo..a.cols() {
                let mx = (0..a.rows())
                    .map(|i| a.at(i, j))
                    .fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = (0..a.rows())
                    .map(|i| (cfg.lambda * (a.at(i, j) - mx)).exp())
                    .collect();
                let z: f64 = exps.iter().sum();
                for i in 0..a.rows() {
                    attr[h] += a.at(i, j) * coef * exps[i] / z;
                }
            }
        }
        let mx = attr.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let exps: Vec<f64> = attr.iter().map(|&v| (v - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        for h in 0..heads {
            weights[li][h] = exps[h] / z;
        }
    }
    let mut total = 0.0;
    for li in 0..layers {
        let mut acc = 0.0;
        for h in 0..heads {
            acc += s[li][h] * weights[li][h];
        }
        total += acc;
    }
    total / layers as f64
}

#[test]
fn default_config_matches_flat_oracle() {
    let mut g = Graph::new();
    let ft = fake_trace(&mut g, 3, 4, 6, 5, 21);
    let cfg = test_cfg(3);
    let (_, pass) = score_single_pass(&mut g, &ft.trace, &cfg).unwrap();
    let want = flat_oracle(&ft.maps, &cfg);
    assert_close(pass.score, want, 1e-10);
}

#[test]
fn breakdown_reaggregates_exactly() {
    let mut g = Graph::new();
    let ft = fake_trace(&mut g, 2, 3, 5, 4, 31);
    for (mode, pooling) in [
        (HeadMode::Uniform, Pooling::Lse),
        (HeadMode::Dynamic, Pooling::Lse),
        (HeadMode::Uniform, Pooling::Max),
        (HeadMode::Dynamic, Pooling::Cosine),
    ] {
        let mut cfg = test_cfg(2);
        cfg.head_mode = mode;
        cfg.pooling = pooling;
        let (_, pass) = score_single_pass(&mut g, &ft.trace, &cfg).unwrap();
        assert_eq!(
            pass.recompute().to_bits(),
            pass.score.to_bits(),
            "{mode:?} {pooling:?}"
        );
    }
}

#[test]
fn empty_layer_set_is_config_error() {
    let mut g = Graph::new();
    let ft = fake_trace(&mut g, 2, 2, 4, 3, 41);
    let mut cfg = test_cfg(2);
    cfg.layer_set.clear();
    assert!(matches!(
        score_single_pass(&mut g, &ft.trace, &cfg),
        Err(Error::Config(_))
    ));
}

// ── dynamic head weighting ──────────────────────────────────────────────

#[test]
fn single_head_weight_is_one() {
    let mut g = Graph::new();
    let ft = fake_trace(&mut g, 2, 1, 4, 3, 51);
    let cfg = test_cfg(2);
    let w = dynamic_head_weights(&mut g, &ft.trace, &cfg).unwrap();
    for (_, ws) in w {
        assert_eq!(ws, vec![1.0]);
    }
}

#[test]
fn weights_are_probability_vectors() {
    let mut g = Graph::new();
    let ft = fake_trace(&mut g, 2, 4, 6, 5, 61);
    let cfg = test_cfg(2);
    let w = dynamic_head_weights(&mut g, &ft.trace, &cfg).unwrap();
    for (_, ws) in w {
        assert!(ws.iter().all(|&v| v >= 0.0));
        assert_close(ws.iter().sum::<f64>(), 1.0, 1e-9);
    }
}

#[test]
fn cosine_pooling_ignores_maps_and_gives_uniform_weights() {
    // f does not depend on A under cosine pooling, so every attribution is
    // the zero matrix and the per-layer softmax is uniform.
    let mut g = Graph::new();
    let ft = fake_trace(&mut g, 1, 3, 4, 3, 71);
    let mut cfg = test_cfg(1);
    cfg.pooling = Pooling::Cosine;
    let w = dynamic_head_weights(&mut g, &ft.trace, &cfg).unwrap();
    for v in &w[0].1 {
        assert_close(*v, 1.0 / 3.0, 1e-15);
    }
}

#[test]
fn attribution_matches_finite_difference_on_2x2_map() {
    // a_h = sum_ij A ⊙ df/dA at A. Check against central differences of
    // f_uniform(A) in each coordinate on a 2x2 single-head map.
    let lambda = 5.0;
    let a = Tensor::new(vec![2, 2], vec![0.3, 0.7, 0.6, 0.4]).unwrap();
    let f_of = |t: &Tensor| -> f64 {
        // include_bos = true so both columns count.
        let mut acc = 0.0;
        for j in 0..2 {
            let mx = t.at(0, j).max(t.at(1, j));
            let s = ((lambda * (t.at(0, j) - mx)).exp()) + ((lambda * (t.at(1, j) - mx)).exp());
            acc += mx + s.ln() / lambda;
        }
        acc / 2.0
    };
    let eps = 1e-5;
    let mut fd_attr = 0.0;
    let mut probe = a.clone();
    for i in 0..4 {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = f_of(&probe);
        probe.data_mut()[i] = orig - eps;
        let fm = f_of(&probe);
        probe.data_mut()[i] = orig;
        fd_attr += a.data()[i] * (fp - fm) / (2.0 * eps);
    }

    let mut g = Graph::new();
    let map = g.leaf(a.clone(), false).unwrap();
    g.retain_grad(map);
    let tok = g.constant(Tensor::zeros(&[2, 2])).unwrap();
    let trace = DenoiserTrace {
        eps_hat: tok,
        records: vec![AttentionRecord {
            layer: 0,
            head: 0,
            map,
        }],
        layer_tokens: vec![tok],
        text_tokens: tok,
    };
    let mut cfg = test_cfg(1);
    cfg.include_bos = true;
    cfg.lambda = lambda;
    // Reproduce the attribution scalar by hand from the tape gradient.
    let head_scores = super::build_head_scores(&mut g, &trace, &cfg).unwrap();
    let uniform = super::uniform_weights(&head_scores);
    let base = super::aggregate(&mut g, &head_scores, &uniform).unwrap();
    g.backward(base).unwrap();
    let grad = g.grad(map).unwrap();
    let attr: f64 = a
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&av, &gv)| av * gv)
        .sum();
    let rel = (attr - fd_attr).abs() / fd_attr.abs().max(1.0);
    assert!(rel <= 1e-4, "attr {attr} vs fd {fd_attr}");
}

// ── ranking ─────────────────────────────────────────────────────────────

#[test]
fn rank_single_candidate() {
    assert_eq!(rank_scores(&[0.3]), vec![0]);
}

#[test]
fn rank_ties_break_to_lower_index() {
    assert_eq!(rank_scores(&[0.5, 0.7, 0.7, 0.1]), vec![1, 2, 0, 3]);
}

#[test]
fn rank_matches_sort_oracle() {
    let mut rng = SplitMix64::new(91);
    for _ in 0..50 {
        let n = 1 + rng.next_index(8);
        let scores: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
        let order = rank_scores(&scores);
        for w in order.windows(2) {
            assert!(scores[w[0]] >= scores[w[1]]);
        }
        let mut seen: Vec<usize> = order.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }
}

#[test]
fn ranking_is_invariant_under_monotone_transforms() {
    let mut rng = SplitMix64::new(101);
    for _ in 0..50 {
        let n = 2 + rng.next_index(8);
        let scores: Vec<f64> = (0..n).map(|_| 2.0 * rng.next_f64() - 1.0).collect();
        let base = rank_scores(&scores);
        let affine: Vec<f64> = scores.iter().map(|&s| 3.5 * s + 2.0).collect();
        let tanh: Vec<f64> = scores.iter().map(|&s| s.tanh()).collect();
        let expm: Vec<f64> = scores.iter().map(|&s| s.exp()).collect();
        assert_eq!(base, rank_scores(&affine));
        assert_eq!(base, rank_scores(&tanh));
        assert_eq!(base, rank_scores(&expm));
    }
}

// ── whole-pair scoring against a real model ─────────────────────────────

fn tiny_model() -> crate::model::Model {
    let cfg = ModelConfig {
        d_model: 16,
        d_text: 16,
        layers: 2,
        heads: 2,
        ff_hidden: 16,
        map_hidden: 8,
        timesteps: 50,
        ..ModelConfig::default()
    };
    crate::model::Model::init(cfg, 77).unwrap()
}

#[test]
fn single_level_ensemble_equals_plain_pass() {
    let model = tiny_model();
    let (train, _) = build_dataset(1, 0, 2, 5).unwrap();
    let inst = &train[0];
    let image = render(&inst.scene);
    let cap = &inst.candidates[inst.true_index];
    let mut cfg = ScoreConfig::default_for(2);
    cfg.head_mode = HeadMode::Uniform;
    let plain = score_pair(&model, None, &image, cap, &cfg, inst.scene.seed).unwrap();
    let mut ens = cfg.clone();
    ens.ensemble = true; // same single level
    let ensembled = score_pair(&model, None, &image, cap, &ens, inst.scene.seed).unwrap();
    assert_eq!(plain.raw.to_bits(), ensembled.raw.to_bits());
}

#[test]
fn ensemble_raw_is_mean_of_per_level_scores() {
    let model = tiny_model();
    let (train, _) = build_dataset(1, 0, 2, 6).unwrap();
    let inst = &train[0];
    let image = render(&inst.scene);
    let cap = &inst.candidates[inst.true_index];
    let mut cfg = ScoreConfig::default_for(2);
    cfg.head_mode = HeadMode::Uniform;
    cfg.ensemble = true;
    cfg.noise_levels = vec![0.2, 0.6];
    let both = score_pair(&model, None, &image, cap, &cfg, inst.scene.seed).unwrap();
    let mut one = cfg.clone();
    one.ensemble = false;
    one.noise_levels = vec![0.2];
    let s02 = score_pair(&model, None, &image, cap, &one, inst.scene.seed).unwrap();
    one.noise_levels = vec![0.6];
    let s06 = score_pair(&model, None, &image, cap, &one, inst.scene.seed).unwrap();
    assert_close(both.raw, (s02.raw + s06.raw) / 2.0, 1e-15);
    assert_eq!(both.passes.len(), 2);
    assert_close(both.recompute_raw(), both.raw, 1e-15);
}

#[test]
fn two_known_scores_average_to_midpoint() {
    let a = PassScore {
        noise_level: 0.2,
        timestep: 10,
        per_head: vec![HeadScore {
            layer: 0,
            head: 0,
            score: 0.3,
        }],
        head_weights: vec![(0, vec![1.0])],
        score: 0.3,
    };
    let mut b = a.clone();
    b.score = 0.5;
    b.per_head[0].score = 0.5;
    let ms = MatchScore {
        raw: 0.4,
        calibrated: 0.5,
        passes: vec![a, b],
    };
    assert_close(ms.recompute_raw(), 0.4, 1e-15);
}

#[test]
fn match_candidates_ranks_deterministically() {
    let model = tiny_model();
    let (train, _) = build_dataset(1, 0, 4, 9).unwrap();
    let inst = &train[0];
    let image = render(&inst.scene);
    let mut cfg = ScoreConfig::default_for(2);
    cfg.head_mode = HeadMode::Uniform;
    let r1 = match_candidates(&model, None, &image, &inst.candidates, &cfg, inst.scene.seed)
        .unwrap();
    let r2 = match_candidates(&model, None, &image, &inst.candidates, &cfg, inst.scene.seed)
        .unwrap();
    assert_eq!(r1.order, r2.order);
    let raws1: Vec<u64> = r1.scores.iter().map(|s| s.raw.to_bits()).collect();
    let raws2: Vec<u64> = r2.scores.iter().map(|s| s.raw.to_bits()).collect();
    assert_eq!(raws1, raws2);

    // Duplicated captions tie and the earlier index wins.
    let dup = vec![inst.candidates[0].clone(), inst.candidates[0].clone()];
    let r = match_candidates(&model, None, &image, &dup, &cfg, inst.scene.seed).unwrap();
    assert_eq!(r.order, vec![0, 1]);
}

#[test]
fn zero_shot_calibration_centers_on_median() {
    let c = zero_shot_calibration(&[0.9, 0.1, 0.5]);
    assert_eq!(c.a, 1.0);
    assert_eq!(c.b, -0.5);
    assert_close(c.apply(0.5), 0.5, 1e-15);
    let even = zero_shot_calibration(&[0.2, 0.4]);
    assert_close(even.b, -0.3, 1e-15);
}

#[test]
fn score_config_validation() {
    let mut cfg = ScoreConfig::default_for(4);
    cfg.layer_set = vec![0, 0];
    assert!(cfg.validate(4).is_err());
    let mut cfg = ScoreConfig::default_for(4);
    cfg.layer_set = vec![4];
    assert!(cfg.validate(4).is_err());
    let mut cfg = ScoreConfig::default_for(4);
    cfg.noise_levels = vec![1.0];
    assert!(cfg.validate(4).is_err());
    let mut cfg = ScoreConfig::default_for(4);
    cfg.lambda = 0.0;
    assert!(cfg.validate(4).is_err());
    assert!(ScoreConfig::default_for(4).with_ensemble().validate(4).is_ok());
}
