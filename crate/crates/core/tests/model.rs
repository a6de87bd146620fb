use proptest::prelude::*;
use roadnext::autodiff::Tape;
use roadnext::model::{
    attention_mask, load_checkpoint, parameter_count, save_checkpoint, tensor_specs, Model, ModelConfig,
};
use roadnext::testkit::random_prepared;
use roadnext::PreparedExample;

fn cfg() -> ModelConfig {
    ModelConfig::tiny(6, 4)
}

fn example(c: &ModelConfig, t: usize, n_cand: usize, seed: u64) -> PreparedExample {
    random_prepared(c.in_dim(), c.d_s, t, n_cand, seed)
}

#[test]
fn mask_layout() {
    let (t, c) = (3, 2);
    let m = attention_mask(t, c, false);
    let n = t + c;
    for p in 0..n {
        for q in 0..n {
            let want = q < t || p == q;
            assert_eq!(m[p * n + q], want, "{p}->{q}");
        }
    }
    let causal = attention_mask(t, c, true);
    assert!(!causal[1]);
    assert!(causal[n + 1]);
}

#[test]
fn forward_invariants_over_random_inputs() {
    let c = ModelConfig {
        l_std: 1,
        l_rel: 2,
        ..cfg()
    };
    let model: Model<f64> = Model::init(c.clone(), 3).unwrap();
    for seed in 0..50 {
        let t = 1 + seed as usize % 6;
        let n_cand = 1 + seed as usize % 4;
        let ex = example(&c, t, n_cand, seed);
        let n = t + n_cand;
        let mut tape = Tape::new(&model.params);
        let out = model.forward(&mut tape, &ex, None).unwrap();
        for layer in &out.attention {
            for head in layer {
                let a = tape.value(*head);
                for p in t..n {
                    for q in t..n {
                        if p != q {
                            assert_eq!(a.at(p, q), 0.0);
                        }
                    }
                }
                for p in 0..n {
                    let s: f64 = a.row(p).iter().sum();
                    assert!((s - 1.0).abs() < 1e-9);
                }
            }
        }
        assert_eq!(out.bias.len(), 2);
        let mask = attention_mask(t, n_cand, false);
        for layer in &out.bias {
            for head in layer {
                let b = tape.value(*head);
                for p in 0..n {
                    let s: f64 = (0..n).filter(|&q| mask[p * n + q]).map(|q| b.at(p, q)).sum();
                    assert!(s.abs() < 1e-9, "bias row {p} sums to {s}");
                    assert!((0..n).filter(|&q| !mask[p * n + q]).all(|q| b.at(p, q) == 0.0));
                }
            }
        }
        let pred = model.predict(&ex).unwrap();
        assert!((pred.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let ce = tape.value(out.ce).data[0];
        assert!((ce + pred.probs[ex.label].ln()).abs() < 1e-9);
        let norm = pred.direction[0].hypot(pred.direction[1]);
        assert!((norm - 1.0).abs() < 1e-6);
    }
}

#[test]
fn cfc_states_stay_bounded() {
    let c = cfg();
    for seed in 0..1000u64 {
        let mut model: Model<f64> = Model::init(c.clone(), seed).unwrap();
        // large weights push the target into saturation
        for v in &mut model.params.get_mut("cfc.w").unwrap().data {
            *v *= 20.0;
        }
        let mut ex = example(&c, 8, 3, seed + 7);
        ex.history.iter_mut().for_each(|v| *v *= 50.0);
        let mut tape = Tape::new(&model.params);
        let out = model.forward(&mut tape, &ex, None).unwrap();
        for s in out.states.iter().chain([&out.candidate_states]) {
            let inf = tape.value(*s).data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(inf <= 1.0 + 1e-12, "seed {seed}: {inf}");
        }
    }
}

#[test]
fn candidate_order_is_equivariant() {
    let c = cfg();
    let model: Model<f64> = Model::init(c.clone(), 5).unwrap();
    let ex = example(&c, 4, 4, 9);
    let perm = [2usize, 0, 3, 1];
    let mut shuffled = ex.clone();
    let (t, d, s) = (ex.t, ex.in_dim, ex.struct_dim);
    for (new, &old) in perm.iter().enumerate() {
        shuffled.candidates[new * d..(new + 1) * d].copy_from_slice(&ex.candidates[old * d..(old + 1) * d]);
        shuffled.structural[(t + new) * s..(t + new + 1) * s]
            .copy_from_slice(&ex.structural[(t + old) * s..(t + old + 1) * s]);
        shuffled.positions[t + new] = ex.positions[t + old];
        shuffled.candidate_ids[new] = ex.candidate_ids[old];
    }
    shuffled.label = perm.iter().position(|&o| o == ex.label).unwrap();
    let a = model.predict(&ex).unwrap();
    let b = model.predict(&shuffled).unwrap();
    for (new, &old) in perm.iter().enumerate() {
        assert!((a.scores[old] - b.scores[new]).abs() < 1e-10);
    }
    assert!((model.loss(&ex).unwrap() - model.loss(&shuffled).unwrap()).abs() < 1e-10);
}

#[test]
fn zero_bias_equals_plain_layers() {
    let rel = ModelConfig {
        l_std: 1,
        l_rel: 1,
        ..cfg()
    };
    let plain = ModelConfig {
        l_std: 2,
        l_rel: 0,
        ..cfg()
    };
    let mut a: Model<f64> = Model::init(rel.clone(), 8).unwrap();
    let mut b: Model<f64> = Model::init(plain, 8).unwrap();
    a.params.get_mut("layers.1.rel.lambda").unwrap().data.fill(0.0);
    for (name, value) in a.params.iter() {
        if let Some(dst) = b.params.get_mut(name) {
            *dst = value.clone();
        }
    }
    let ex = example(&rel, 5, 3, 4);
    let (pa, pb) = (a.predict(&ex).unwrap(), b.predict(&ex).unwrap());
    for (x, y) in pa.scores.iter().zip(&pb.scores) {
        assert!((x - y).abs() < 1e-12);
    }
}

fn assert_close(a: &[f64], b: &[f64]) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() < 1e-9, "{a:?} vs {b:?}");
    }
}

#[test]
fn closed_gate_ignores_structure_open_gate_ignores_dynamics() {
    let c = cfg();
    let mut model: Model<f64> = Model::init(c.clone(), 2).unwrap();
    model.params.get_mut("mix.w_gate").unwrap().data.fill(0.0);
    let ex = example(&c, 4, 3, 1);

    model.params.get_mut("mix.b_gate").unwrap().data.fill(-1e3);
    let mut other = ex.clone();
    other.structural.iter_mut().for_each(|v| *v = -*v + 0.3);
    let (a, b) = (model.predict(&ex).unwrap(), model.predict(&other).unwrap());
    assert_close(&a.scores, &b.scores);

    model.params.get_mut("mix.b_gate").unwrap().data.fill(1e3);
    let mut other = ex.clone();
    other.history.iter_mut().for_each(|v| *v = -*v + 0.3);
    other.candidates.iter_mut().for_each(|v| *v *= 2.0);
    let (a, b) = (model.predict(&ex).unwrap(), model.predict(&other).unwrap());
    assert_close(&a.scores, &b.scores);
}

#[test]
fn gamma_zero_drops_the_direction_loss() {
    let c = ModelConfig { gamma: 0.0, ..cfg() };
    let model: Model<f64> = Model::init(c.clone(), 1).unwrap();
    let ex = example(&c, 3, 3, 2);
    let mut tape = Tape::new(&model.params);
    let out = model.forward(&mut tape, &ex, None).unwrap();
    assert!(out.dir_loss.is_none());
    assert_eq!(tape.value(out.loss).data, tape.value(out.ce).data);
}

#[test]
fn reference_parameter_count() {
    let c = ModelConfig::default();
    let n = parameter_count(&c);
    assert!((1_900_000..=2_800_000).contains(&n), "{n}");
    assert_eq!(Model::<f32>::init(c.clone(), 0).unwrap().parameter_count(), n);
    let mut names: Vec<String> = tensor_specs(&c).into_iter().map(|(n, _, _)| n).collect();
    let len = names.len();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), len);
}

#[test]
fn invalid_configs() {
    assert!(Model::<f64>::init(ModelConfig { heads: 3, ..cfg() }, 0).is_err());
    assert!(Model::<f64>::init(ModelConfig { l_std: 0, l_rel: 0, ..cfg() }, 0).is_err());
    assert!(Model::<f64>::init(ModelConfig { dropout: 1.0, ..cfg() }, 0).is_err());
    let model: Model<f64> = Model::init(cfg(), 0).unwrap();
    let bad = random_prepared(3, 4, 2, 2, 0);
    assert!(model.predict(&bad).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let model: Model<f32> = Model::init(cfg(), 12).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.config, model.config);
    assert_eq!(back.params, model.params);
    let first = std::fs::read(&path).unwrap();
    save_checkpoint(&back, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
    std::fs::write(&path, &first[..first.len() / 2]).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn probabilities_form_a_distribution(seed in 0u64..1000, t in 1usize..6, n_cand in 1usize..5) {
        let c = cfg();
        let model: Model<f64> = Model::init(c.clone(), seed).unwrap();
        let ex = example(&c, t, n_cand, seed ^ 0xabc);
        let p = model.predict(&ex).unwrap();
        prop_assert_eq!(p.probs.len(), n_cand);
        prop_assert!(p.probs.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
