use kalab::model::{cross_entropy, InitOptions, Model, ModelConfig, Real};
use kalab::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        vocab_size: 13,
        context_len: 8,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ffn: 16,
    }
}

fn init<T: Real>(cfg: ModelConfig, seed: u64) -> Model<T> {
    Model::init(cfg, seed, InitOptions { zero_head: false }).unwrap()
}

fn random_tokens(n: usize, v: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..v as u32)).collect()
}

#[test]
fn parameter_count_matches_hand_count() {
    let cfg = ModelConfig::paper(5000);
    let (v, t, c, f, l) = (5000usize, 512usize, 512usize, 2048usize, 8usize);
    let embeddings = v * c + t * c;
    let attn = c * 3 * c + 3 * c + c * c + c;
    let mlp = c * f + f + f * c + c;
    let norms = 4 * c;
    let per_layer = attn + mlp + norms;
    let head = c * v;
    let total = embeddings + l * per_layer + 2 * c + head;
    assert_eq!(total, 30_602_240);
    assert_eq!(cfg.param_count(), total);
}

#[test]
fn init_is_deterministic_with_identity_norms() {
    let a: Model<f32> = init(tiny(), 5);
    let b: Model<f32> = init(tiny(), 5);
    let c: Model<f32> = init(tiny(), 6);
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, c.params);
    for spec in &a.layout.specs {
        let t = a.tensor(&spec.name).unwrap();
        if spec.name.ends_with(".scale") {
            assert!(t.iter().all(|&x| x == 1.0), "{}", spec.name);
        }
        if spec.name.ends_with(".bias") {
            assert!(t.iter().all(|&x| x == 0.0), "{}", spec.name);
        }
    }
}

#[test]
fn init_std_and_residual_scaling() {
    let cfg = ModelConfig {
        vocab_size: 300,
        context_len: 64,
        d_model: 64,
        n_layers: 4,
        n_heads: 4,
        d_ffn: 256,
    };
    let m: Model<f64> = init(cfg, 1);
    let std = |name: &str| {
        let t = m.tensor(name).unwrap();
        (t.iter().map(|x| x * x).sum::<f64>() / t.len() as f64).sqrt()
    };
    assert!((std("tok_embed") - 0.02).abs() < 0.001);
    assert!((std("layers.0.mlp.fc.weight") - 0.02).abs() < 0.001);
    let want = 0.02 / (8.0f64).sqrt();
    assert!((std("layers.2.mlp.proj.weight") - want).abs() < 0.0005);
    assert!((std("layers.2.attn.proj.weight") - want).abs() < 0.001);
}

#[test]
fn single_token_attention_is_one() {
    let m: Model<f32> = init(tiny(), 1);
    let tr = m.forward(&[3], 1, 1).unwrap();
    for l in 0..tr.n_layers() {
        for h in 0..tr.n_heads() {
            assert_eq!(tr.attention(l, 0, h), &[1.0]);
        }
    }
}

#[test]
fn attention_rows_form_causal_simplex() {
    let m: Model<f32> = init(tiny(), 2);
    let toks = random_tokens(16, 13, 3);
    let tr = m.forward(&toks, 2, 8).unwrap();
    for l in 0..2 {
        for b in 0..2 {
            for h in 0..2 {
                let a = tr.attention(l, b, h);
                for i in 0..8 {
                    let row = &a[i * 8..(i + 1) * 8];
                    let s: f32 = row.iter().sum();
                    assert!((s - 1.0).abs() < 1e-5);
                    assert!(row.iter().all(|&x| x >= 0.0));
                    assert!(row[i + 1..].iter().all(|&x| x == 0.0));
                }
            }
        }
    }
}

#[test]
fn changing_future_tokens_never_changes_past_logits() {
    let m: Model<f64> = init(tiny(), 4);
    let base = random_tokens(8, 13, 9);
    let tr0 = m.forward(&base, 1, 8).unwrap();
    for t in 0..7 {
        for k in 1..8 - t {
            let mut alt = base.clone();
            alt[t + k] = (alt[t + k] + 5) % 13;
            let tr1 = m.forward(&alt, 1, 8).unwrap();
            for s in 0..=t {
                assert_eq!(tr0.logits_at(0, s), tr1.logits_at(0, s), "position {s} changed by token {}", t + k);
            }
        }
    }
}

#[test]
fn permuting_vocabulary_permutes_logits() {
    let cfg = tiny();
    let m: Model<f64> = init(cfg, 7);
    let v = cfg.vocab_size;
    let c = cfg.d_model;
    // perm[old] = new
    let perm: Vec<usize> = (0..v).map(|i| (i * 5 + 3) % v).collect();
    let mut p = m.clone();
    {
        let src = m.tensor("tok_embed").unwrap().to_vec();
        let dst = p.tensor_mut("tok_embed").unwrap();
        for old in 0..v {
            dst[perm[old] * c..(perm[old] + 1) * c].copy_from_slice(&src[old * c..(old + 1) * c]);
        }
        let src = m.tensor("lm_head.weight").unwrap().to_vec();
        let dst = p.tensor_mut("lm_head.weight").unwrap();
        for r in 0..c {
            for old in 0..v {
                dst[r * v + perm[old]] = src[r * v + old];
            }
        }
    }
    let toks = random_tokens(6, v, 1);
    let ptoks: Vec<u32> = toks.iter().map(|&t| perm[t as usize] as u32).collect();
    let a = m.forward(&toks, 1, 6).unwrap();
    let b = p.forward(&ptoks, 1, 6).unwrap();
    for t in 0..6 {
        for old in 0..v {
            let x = a.logits_at(0, t)[old];
            let y = b.logits_at(0, t)[perm[old]];
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn uniform_logits_give_log_vocab_loss() {
    let m: Model<f32> = Model::init(tiny(), 3, InitOptions { zero_head: true }).unwrap();
    let toks = random_tokens(8, 13, 2);
    let tr = m.forward(&toks, 1, 8).unwrap();
    let (stats, _) = m.lm_loss(&tr, &toks, &[true; 8]).unwrap();
    assert!((stats.loss - (13f64).ln()).abs() < 1e-6);
    let dist = m.last_token_distribution(&toks).unwrap();
    let h: f64 = -dist.iter().map(|p| p * p.ln()).sum::<f64>();
    assert!((h - (13f64).ln()).abs() < 1e-6);
}

#[test]
fn confident_correct_logits_drive_loss_to_zero() {
    let v = 4;
    for gap in [10.0f64, 30.0, 60.0] {
        let mut logits = vec![0.0f64; 2 * v];
        logits[1] = gap;
        logits[v + 3] = gap;
        let (s, _) = cross_entropy(&logits, v, &[1, 3], &[true, true]);
        assert!(s.loss < 4.0 * (-gap).exp() + 1e-15);
        assert_eq!(s.correct, 2);
    }
}

#[test]
fn two_position_loss_matches_hand_computation() {
    // Position 0: logits [1, 2, 0], target 1. Position 1: [0.5, -1, 3], target 0.
    let logits = [1.0f64, 2.0, 0.0, 0.5, -1.0, 3.0];
    let (s, d) = cross_entropy(&logits, 3, &[1, 0], &[true, true]);
    let l0 = -(2.0f64.exp() / (1.0f64.exp() + 2.0f64.exp() + 1.0)).ln();
    let z1 = 0.5f64.exp() + (-1.0f64).exp() + 3.0f64.exp();
    let l1 = -(0.5f64.exp() / z1).ln();
    assert!((s.loss - (l0 + l1) / 2.0).abs() < 1e-6);
    assert_eq!(s.count, 2);
    assert_eq!(s.correct, 1);
    // d/dlogit = (softmax - onehot) / 2
    let p10 = 0.5f64.exp() / z1;
    assert!((d[3] - (p10 - 1.0) / 2.0).abs() < 1e-6);
    // Masked position contributes nothing.
    let (s2, d2) = cross_entropy(&logits, 3, &[1, 0], &[true, false]);
    assert!((s2.loss - l0).abs() < 1e-6);
    assert!(d2[3..].iter().all(|&x| x == 0.0));
}

#[test]
fn empty_mask_is_rejected_and_yields_zero_gradients() {
    let m: Model<f64> = init(tiny(), 1);
    let toks = random_tokens(8, 13, 4);
    let tr = m.forward(&toks, 1, 8).unwrap();
    assert!(matches!(m.lm_loss(&tr, &toks, &[false; 8]), Err(Error::EmptyMask)));
    let (_, dlogits) = cross_entropy(tr.logits(), 13, &toks, &[false; 8]);
    let mut g = vec![0.0; m.layout.total];
    m.backward(&tr, &dlogits, &mut g);
    assert!(g.iter().all(|&x| x == 0.0));
}

#[test]
fn unused_vocabulary_rows_get_no_gradient() {
    let m: Model<f64> = init(tiny(), 1);
    let toks: Vec<u32> = vec![1, 2, 3, 4, 2, 1, 3, 4];
    let tgts: Vec<u32> = vec![2, 3, 4, 2, 1, 3, 4, 5];
    let (_, g) = m.loss_and_grad(&toks, &tgts, &[true; 8], 1, 8).unwrap();
    let spec = m.layout.find("tok_embed").unwrap();
    let c = 8;
    for tok in 0..13 {
        let row = &g[spec.range.start + tok * c..spec.range.start + (tok + 1) * c];
        if (1..=4).contains(&tok) {
            assert!(row.iter().any(|&x| x != 0.0));
        } else {
            assert!(row.iter().all(|&x| x == 0.0), "token {tok}");
        }
    }
}

/// Central differences on sampled coordinates, covering every tensor class.
fn finite_difference_errors<T: Real>(m: &Model<T>, seed: u64, min_grad: f64) -> Vec<(String, f64, f64, f64)> {
    let toks = random_tokens(16, 13, seed);
    let tgts = random_tokens(16, 13, seed + 1);
    let mut mask = vec![true; 16];
    mask[3] = false;
    let (_, grads) = m.loss_and_grad(&toks, &tgts, &mask, 2, 8).unwrap();
    let loss_at = |mm: &Model<T>| {
        let tr = mm.forward(&toks, 2, 8).unwrap();
        mm.lm_loss(&tr, &tgts, &mask).unwrap().0.loss
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let h = 1e-4;
    let mut classes: Vec<&str> = vec![];
    for spec in &m.layout.specs {
        let class = spec.name.rsplit_once("layers.").map(|(_, r)| r.split_once('.').unwrap().1).unwrap_or(&spec.name);
        if !classes.contains(&class) {
            classes.push(class);
        }
    }
    let mut picked = 0;
    while picked < 24 {
        let class = classes[picked % classes.len()];
        let specs: Vec<_> = m.layout.specs.iter().filter(|s| s.name.ends_with(class)).collect();
        let spec = specs[rng.random_range(0..specs.len())];
        // Prefer coordinates whose gradient clears the rounding floor of the
        // difference quotient; unused embedding rows are exactly zero.
        let mut idx = spec.range.start + rng.random_range(0..spec.range.len());
        for _ in 0..200 {
            if grads[idx].to_f64().unwrap().abs() > min_grad {
                break;
            }
            idx = spec.range.start + rng.random_range(0..spec.range.len());
        }
        let mut plus = m.clone();
        plus.params[idx] += T::lit(h);
        let mut minus = m.clone();
        minus.params[idx] -= T::lit(h);
        let num = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
        let ana = grads[idx].to_f64().unwrap();
        let denom = num.abs().max(ana.abs()).max(1e-8);
        out.push((spec.name.clone(), ana, num, (ana - num).abs() / denom));
        picked += 1;
    }
    out
}

/// Tiny model with O(1) weights, so gradients sit well above the rounding
/// floor of 32-bit central differences.
fn rough<T: Real>(seed: u64) -> Model<T> {
    let mut m: Model<T> = init(tiny(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for x in m.params.iter_mut() {
        *x += T::lit(rng.random_range(-0.5..0.5));
    }
    m
}

#[test]
fn gradients_match_finite_differences_f64() {
    let m: Model<f64> = rough(11);
    let errs = finite_difference_errors(&m, 11, 1e-6);
    for (name, a, n, e) in &errs {
        assert!(*e < 1e-3, "{name}: analytic {a} numeric {n} rel {e}");
    }
}

#[test]
fn gradients_match_finite_differences_f32() {
    // A 32-bit difference quotient at step 1e-4 carries roughly 1e-4 of
    // absolute rounding noise, so coordinates are drawn among those with
    // |gradient| above 0.04.
    let m: Model<f32> = rough(12);
    let errs = finite_difference_errors(&m, 12, 0.04);
    for (name, a, n, e) in &errs {
        assert!(*e < 1e-2, "{name}: analytic {a} numeric {n} rel {e}");
    }
}

#[test]
fn f32_gradients_match_f64_differences_of_the_same_weights() {
    let m32: Model<f32> = rough(13);
    let m64 = m32.to_f64();
    let toks = random_tokens(16, 13, 13);
    let tgts = random_tokens(16, 13, 14);
    let mask = vec![true; 16];
    let (_, g32) = m32.loss_and_grad(&toks, &tgts, &mask, 2, 8).unwrap();
    let errs = finite_difference_errors(&m64, 13, 1e-6);
    let (_, g64) = m64.loss_and_grad(&toks, &tgts, &mask, 2, 8).unwrap();
    for (i, (a, b)) in g32.iter().zip(&g64).enumerate() {
        let (a, b) = (*a as f64, *b);
        assert!((a - b).abs() <= 1e-3 * b.abs().max(1e-3), "param {i}: {a} vs {b}");
    }
    assert!(errs.iter().all(|e| e.3 < 1e-3));
}

#[test]
fn kv_cache_matches_full_forward() {
    let m: Model<f64> = init(tiny(), 21);
    let toks = random_tokens(8, 13, 5);
    let tr = m.forward(&toks, 1, 8).unwrap();
    let mut cache = m.new_cache();
    let step = m.extend(&mut cache, &toks[..5], true).unwrap();
    for (a, b) in step.logits.iter().zip(tr.logits_at(0, 4)) {
        assert!((a - b).abs() < 1e-10);
    }
    let att = step.attention.unwrap();
    for l in 0..2 {
        for h in 0..2 {
            let full = &tr.attention(l, 0, h)[4 * 8..4 * 8 + 5];
            for (a, b) in att[l][h].iter().zip(full) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }
    for t in 5..8 {
        let s = m.extend(&mut cache, &toks[t..t + 1], false).unwrap();
        for (a, b) in s.logits.iter().zip(tr.logits_at(0, t)) {
            assert!((a - b).abs() < 1e-10);
        }
    }
    assert_eq!(cache.len(), 8);
}

#[test]
fn last_token_distribution_is_softmax_of_forward_logits() {
    let m: Model<f32> = init(tiny(), 8);
    let toks = random_tokens(5, 13, 8);
    let dist = m.last_token_distribution(&toks).unwrap();
    let tr = m.forward(&toks, 1, 5).unwrap();
    let logits = tr.logits_at(0, 4);
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let z: f64 = logits.iter().map(|&x| (x as f64 - max).exp()).sum();
    for (p, &l) in dist.iter().zip(logits) {
        assert!(*p >= 0.0);
        assert!((p - (l as f64 - max).exp() / z).abs() < 1e-6);
    }
    assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-6);
}

#[test]
fn greedy_decoding_contracts() {
    let m: Model<f32> = init(tiny(), 9);
    let prompt = vec![1, 2, 3];
    assert_eq!(m.generate_greedy(&prompt, 0).unwrap(), prompt);
    let a = m.generate_greedy(&prompt, 4).unwrap();
    let b = m.generate_greedy(&prompt, 4).unwrap();
    assert_eq!(a, b);
    assert_eq!(&a[..3], &prompt[..]);
    assert_eq!(a.len(), 7);
    assert!(matches!(m.generate_greedy(&prompt, 6), Err(Error::Overlength { .. })));
    assert!(matches!(m.forward(&[1; 9], 1, 9), Err(Error::Overlength { .. })));
}

#[test]
fn greedy_ties_pick_lowest_id() {
    // Zero head makes every logit equal.
    let m: Model<f32> = Model::init(tiny(), 3, InitOptions { zero_head: true }).unwrap();
    let out = m.generate_greedy(&[5, 6], 3).unwrap();
    assert_eq!(out, vec![5, 6, 0, 0, 0]);
}


#[test]
fn long_range_gradients_match_finite_differences() {
    // Loss only on the last positions; early position embeddings reach it
    // through attention alone.
    let cfg = ModelConfig {
        vocab_size: 13,
        context_len: 200,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ffn: 32,
    };
    let mut m: Model<f64> = init(cfg, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for x in m.params.iter_mut() {
        *x += rng.random_range(-0.3..0.3);
    }
    let t = 200;
    let toks = random_tokens(t, 13, 6);
    let tgts = random_tokens(t, 13, 7);
    let mask: Vec<bool> = (0..t).map(|i| i >= t - 4).collect();
    let (_, grads) = m.loss_and_grad(&toks, &tgts, &mask, 1, t).unwrap();
    let loss_at = |mm: &Model<f64>| {
        let tr = mm.forward(&toks, 1, t).unwrap();
        mm.lm_loss(&tr, &tgts, &mask).unwrap().0.loss
    };
    let pos = m.layout.find("pos_embed").unwrap().range.start;
    let qkv = m.layout.find("layers.0.attn.qkv.weight").unwrap().range.start;
    let mut coords: Vec<usize> = (0..6).map(|p| pos + p * 16 + p % 16).collect();
    coords.extend([pos + 150 * 16 + 3, qkv + 5, qkv + 16 * 48 - 1]);
    let h = 1e-5;
    for idx in coords {
        let mut plus = m.clone();
        plus.params[idx] += h;
        let mut minus = m.clone();
        minus.params[idx] -= h;
        let num = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
        let ana = grads[idx];
        assert!(num.abs() > 1e-9, "coordinate {idx} has no influence");
        assert!((ana - num).abs() <= 1e-5 * num.abs().max(1e-6), "{idx}: {ana} vs {num}");
    }
}
