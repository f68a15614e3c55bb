// Temporary diagnostic: per-level, per-layer alignment signal. Deleted
// before finalizing.
use dsd::checkpoint::{build_model, load_checkpoint};
use dsd::data::{build_dataset, mutate, render, tokenize, Slot, Vocab};
use dsd::Graph;

#[test]
#[ignore]
fn probe_levels() {
    let path = std::env::var("PROBE_CKPT").unwrap();
    let (model, _) = build_model(&load_checkpoint(path.as_ref()).unwrap()).unwrap();
    let vocab = Vocab::default();
    let (_, eval) = build_dataset(0, 40, 2, 1).unwrap();
    let lambda = 5.0;
    let layers = model.config.layers;

    for level in [0.2, 0.4, 0.6, 0.8] {
        let t = model.schedule.timestep_for_level(level).unwrap();
        // gap[layer] = mean over instances/slots of
        //   (lse score of true caption) - (lse score of mutated caption),
        // restricted to the mutated columns.
        let mut gap = vec![0.0f64; layers];
        let mut full_gap = vec![0.0f64; layers];
        let mut n = 0.0;
        for inst in &eval {
            let image = render(&inst.scene);
            let pos = tokenize(&inst.scene, &vocab).unwrap();
            for slot in [Slot::Subject, Slot::Predicate, Slot::Object] {
                let mutant = mutate(&inst.scene, slot, inst.scene.seed ^ 0x55AA);
                let neg = tokenize(&mutant, &vocab).unwrap();
                let diff_cols: Vec<usize> = (1..6).filter(|&j| pos.ids[j] != neg.ids[j]).collect();
                let run = |cap: &dsd::data::Caption| -> Vec<Vec<f64>> {
                    let mut g = Graph::new();
                    let vars = model.bind(&mut g, false).unwrap();
                    let r_y = model.encode_caption(&mut g, &vars, cap).unwrap();
                    let z0 = model.encode_image(&mut g, &vars, &image).unwrap();
                    let eps = dsd::scoring::scoring_noise(
                        inst.scene.seed,
                        t,
                        model.config.n_image_tokens(),
                        model.config.d_model,
                    );
                    let eps_id = g.constant(eps).unwrap();
                    let trace = model
                        .noised_forward(&mut g, &vars, z0, t, eps_id, r_y, None)
                        .unwrap();
                    // Per layer: per-column LSE means over heads.
                    let mut per_layer = vec![vec![0.0f64; 6]; layers];
                    for rec in &trace.records {
                        let a = g.value(rec.map);
                        for j in 0..6 {
                            let mx = (0..a.rows())
                                .map(|i| a.at(i, j))
                                .fold(f64::NEG_INFINITY, f64::max);
                            let s: f64 = (0..a.rows())
                                .map(|i| (lambda * (a.at(i, j) - mx)).exp())
                                .sum();
                            per_layer[rec.layer][j] +=
                                (mx + s.ln() / lambda) / model.config.heads as f64;
                        }
                    }
                    per_layer
                };
                let p = run(&pos);
                let q = run(&neg);
                for l in 0..layers {
                    for &j in &diff_cols {
                        gap[l] += (p[l][j] - q[l][j]) / diff_cols.len() as f64;
                    }
                    let pm: f64 = p[l][1..].iter().sum::<f64>() / 5.0;
                    let qm: f64 = q[l][1..].iter().sum::<f64>() / 5.0;
                    full_gap[l] += pm - qm;
                }
                n += 1.0;
            }
        }
        print!("level {level}: mutated-col gap per layer [");
        for l in 0..layers {
            print!(" {:+.4}", gap[l] / n);
        }
        print!(" ]  full-score gap [");
        for l in 0..layers {
            print!(" {:+.5}", full_gap[l] / n);
        }
        println!(" ]");
    }
}
