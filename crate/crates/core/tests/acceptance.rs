//! Acceptance suite. Every check runs inside one test so that the timed
//! ones do not share the CPU with each other; each prints one PASS/FAIL line.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gmcf::checks::{fmcheck, gradcheck, random_sample};
use gmcf::data::{AttributeRegime, DataSample};
use gmcf::evaluation::{auc, evaluate, logloss, ndcg_at_k, ScoredSample};
use gmcf::graph::{build_graphs, AttributeGraph};
use gmcf::io::{checkpoint_from_bytes, checkpoint_to_bytes, parse_dataset_str, Dataset, ParseOptions};
use gmcf::model::{fuse, graph_representation, node_match, predict, predict_graphs, ModelParams};
use gmcf::synth::{generate_synthetic, SynthSpec};
use gmcf::training::{split_per_user, train, SplitDataset, TrainConfig};
use gmcf::variants::VariantConfig;

type Check = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(name: &str, started: Instant, outcome: Outcome) -> bool {
    let tag = if outcome.pass { "PASS" } else { "FAIL" };
    // written past the test harness's output capture so the line always shows
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{tag}  {name}: {} [{:.1?}]", outcome.detail, started.elapsed());
    let _ = out.flush();
    outcome.pass
}

fn within(started: Instant, limit: Duration) -> bool {
    started.elapsed() < limit
}

fn synth_dataset(spec: &SynthSpec) -> Dataset {
    let data = generate_synthetic(spec).expect("valid spec");
    parse_dataset_str(&data.text, ParseOptions::default())
        .expect("generator output parses")
        .0
}

fn gradient_correctness() -> Outcome {
    let t = Instant::now();
    let r = gradcheck(VariantConfig::canonical(), 8, 4, 0, 20).expect("gradcheck runs");
    let pass = r.max_relative_error < 1e-4 && within(t, Duration::from_secs(10));
    Outcome {
        pass,
        detail: format!(
            "max relative error {:.3e} over {} instances ({} redrawn), limit 1e-4 in 10s",
            r.max_relative_error, r.instances, r.redrawn
        ),
    }
}

fn fm_identity() -> Outcome {
    let t = Instant::now();
    let dev = fmcheck(50, 8, 0).expect("fmcheck runs");
    Outcome {
        pass: dev < 1e-9 && within(t, Duration::from_secs(1)),
        detail: format!("max deviation {dev:.3e} over 50 instances, limit 1e-9 in 1s"),
    }
}

fn pair_count_auc(scored: &[ScoredSample]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for p in scored.iter().filter(|s| s.label == 1.0) {
        for n in scored.iter().filter(|s| s.label == 0.0) {
            den += 1.0;
            if p.score > n.score {
                num += 1.0;
            } else if p.score == n.score {
                num += 0.5;
            }
        }
    }
    num / den
}

fn direct_ndcg(list: &[(f64, f64)], k: usize) -> Option<f64> {
    // selection of the max score each round, first occurrence wins ties
    let mut left: Vec<(f64, f64)> = list.to_vec();
    let mut ranked = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for i in 1..left.len() {
            if left[i].0 > left[best].0 {
                best = i;
            }
        }
        ranked.push(left.remove(best).1);
    }
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .map(|(r, g)| g / ((r + 2) as f64).log2())
        .sum();
    let relevant = ranked.iter().filter(|&&g| g > 0.0).count();
    if relevant == 0 {
        return None;
    }
    let idcg: f64 = (0..relevant.min(k)).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    Some(dcg / idcg)
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // scores on a coarse grid so ties are common
    let scored: Vec<ScoredSample> = (0..1000)
        .map(|_| ScoredSample {
            user: 0,
            score: rng.gen_range(0..40) as f64 / 8.0 - 2.5,
            label: if rng.gen_bool(0.4) { 1.0 } else { 0.0 },
        })
        .collect();
    let auc_fast = auc(&scored).unwrap();
    let auc_slow = pair_count_auc(&scored);
    let auc_ok = auc_fast == auc_slow;

    let mut per_user = Vec::new();
    let mut oracle = Vec::new();
    for user in 0..100 {
        let n = rng.gen_range(3..16);
        let list: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.gen_range(0..10) as f64, if rng.gen_bool(0.3) { 1.0 } else { 0.0 }))
            .collect();
        if let Some(v) = direct_ndcg(&list, 10) {
            oracle.push(v);
        }
        per_user.extend(list.iter().map(|&(score, label)| ScoredSample { user, score, label }));
    }
    let expected = oracle.iter().sum::<f64>() / oracle.len() as f64;
    let ndcg_err = (ndcg_at_k(&per_user, 10).unwrap() - expected).abs();

    let halves: Vec<ScoredSample> = scored.iter().map(|s| ScoredSample { score: 0.0, ..*s }).collect();
    let ll_err = (logloss(&halves) - std::f64::consts::LN_2).abs();

    Outcome {
        pass: auc_ok && ndcg_err < 1e-12 && ll_err < 1e-12,
        detail: format!(
            "auc {auc_fast} vs pair count {auc_slow}; ndcg@10 error {ndcg_err:.1e}; logloss(0.5) error {ll_err:.1e}"
        ),
    }
}

fn permuted(sample: &DataSample, rng: &mut ChaCha8Rng) -> DataSample {
    let mut s = sample.clone();
    for side in [&mut s.user_chars, &mut s.item_chars] {
        for i in (1..side.len()).rev() {
            side.swap(i, rng.gen_range(0..=i));
        }
    }
    s
}

fn structural_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut perm, mut swap, mut single) = (true, true, true);
    let mut linearity: f64 = 0.0;
    for k in 0..50 {
        let params = ModelParams::init(12, 8, VariantConfig::canonical(), 1, k).unwrap();
        let sample = random_sample(&mut rng, 6, 4);
        let base = predict(&sample, &params).unwrap().score;
        perm &= predict(&permuted(&sample, &mut rng), &params).unwrap().score == base;

        let (ug, ig) = build_graphs(&sample, &params.embeddings).unwrap();
        let ab = predict_graphs(&ug, &ig, &params).unwrap().score;
        let ba = predict_graphs(&ig, &ug, &params).unwrap().score;
        swap &= ab == ba;

        let lone = AttributeGraph::from_pairs(&sample.user_chars[..1], &params.embeddings).unwrap();
        let u = &lone.nodes()[0].repr;
        let s = node_match(u, ig.nodes()).unwrap();
        let reduced = fuse(u, &[0.0; 8], &s, &params).unwrap();
        single &= graph_representation(&lone, ig.nodes(), &params).unwrap() == reduced;

        for node in ug.nodes() {
            let s = node_match(&node.repr, ig.nodes()).unwrap();
            for (c, (&sc, &uc)) in s.iter().zip(&node.repr).enumerate() {
                let direct: f64 = ig.nodes().iter().map(|j| uc * j.repr[c]).sum();
                linearity = linearity.max((sc - direct).abs());
            }
        }
    }
    Outcome {
        pass: perm && swap && single && linearity < 1e-12,
        detail: format!(
            "permutation exact {perm}, role swap exact {swap}, single node exact {single}, node-match error {linearity:.1e}"
        ),
    }
}

fn capacity() -> Outcome {
    let t = Instant::now();
    let data = synth_dataset(&SynthSpec {
        users: 10,
        items: 30,
        samples_per_user: 10,
        seed: 1,
        ..SynthSpec::default()
    });
    let split = SplitDataset {
        train: data.samples.clone(),
        validation: Vec::new(),
        test: Vec::new(),
        underfilled_users: Vec::new(),
    };
    let config = TrainConfig {
        dim: 16,
        learning_rate: 1e-3,
        epochs: 50,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let out = train(&split, data.vocab.len(), &config, |_| {}).unwrap();
    let train_auc = evaluate(&out.params, &data.samples).unwrap().auc;
    Outcome {
        pass: train_auc > 0.99 && within(t, Duration::from_secs(60)),
        detail: format!(
            "{} samples, train auc {train_auc:.4} after 50 epochs, limit > 0.99 in 60s",
            data.samples.len()
        ),
    }
}

/// One protocol for every model in the comparisons below.
fn comparison_config(variant: VariantConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        dim: 8,
        learning_rate: 1e-3,
        lambda: 1e-5,
        epochs: 50,
        batch_size: 64,
        patience: 5,
        seed,
        variant,
        ..TrainConfig::default()
    }
}

fn test_auc(data: &Dataset, split: &SplitDataset, variant: VariantConfig, seed: u64) -> f64 {
    let out = train(split, data.vocab.len(), &comparison_config(variant, seed), |_| {}).unwrap();
    evaluate(&out.params, &split.test).unwrap().auc
}

fn directional_ablation() -> Outcome {
    let t = Instant::now();
    let no_cross: VariantConfig = "cross=none".parse().unwrap();
    let fm = VariantConfig::fm_reduction();
    let mut sums = [0.0; 3];
    let mut rows = Vec::new();
    for seed in 0..3 {
        let data = synth_dataset(&SynthSpec {
            seed,
            noise: 0.1,
            ..SynthSpec::default()
        });
        assert_eq!(data.samples.len(), 10_000);
        let split = split_per_user(&data.samples, seed);
        let aucs = [VariantConfig::canonical(), no_cross, fm].map(|v| test_auc(&data, &split, v, seed));
        for (s, a) in sums.iter_mut().zip(aucs) {
            *s += a / 3.0;
        }
        rows.push(format!("{:.4}/{:.4}/{:.4}", aucs[0], aucs[1], aucs[2]));
    }
    let [full, none, fm] = sums;
    Outcome {
        pass: full - none >= 0.01 && full - fm >= 0.01 && within(t, Duration::from_secs(600)),
        detail: format!(
            "mean test auc full {full:.4}, cross=none {none:.4}, fm {fm:.4} (per seed {}), margin 0.01 in 10min",
            rows.join(" ")
        ),
    }
}

fn determinism_and_persistence() -> Outcome {
    let data = synth_dataset(&SynthSpec {
        users: 40,
        items: 30,
        samples_per_user: 10,
        seed: 4,
        ..SynthSpec::default()
    });
    let split = split_per_user(&data.samples, 4);
    let config = TrainConfig {
        dim: 8,
        epochs: 5,
        batch_size: 32,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || {
        let mut lines = Vec::new();
        let out = train(&split, data.vocab.len(), &config, |e| {
            lines.push(format!("{e} {:x} {:x}", e.train_loss.to_bits(), e.val_auc.to_bits()))
        })
        .unwrap();
        (lines, out.params)
    };
    let (log_a, params) = run();
    let (log_b, _) = run();
    let logs_equal = log_a == log_b;

    let bytes = checkpoint_to_bytes(&params, &data.vocab).unwrap();
    let restored = checkpoint_from_bytes(&bytes).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut same = 0;
    for _ in 0..100 {
        let s = &data.samples[rng.gen_range(0..data.samples.len())];
        let a = predict(s, &params).unwrap().score;
        let b = predict(s, &restored.params).unwrap().score;
        same += usize::from(a.to_bits() == b.to_bits());
    }
    Outcome {
        pass: logs_equal && same == 100 && restored.vocab == data.vocab,
        detail: format!("repeated logs identical {logs_equal}, bit-exact predictions after round trip {same}/100"),
    }
}

fn attribute_regimes() -> Outcome {
    let data = synth_dataset(&SynthSpec {
        users: 300,
        items: 100,
        samples_per_user: 10,
        seed: 6,
        ..SynthSpec::default()
    });
    let mut aucs = Vec::new();
    for regime in AttributeRegime::ALL {
        let samples: Vec<DataSample> = data.samples.iter().map(|s| s.restricted(regime)).collect();
        let split = split_per_user(&samples, 6);
        let config = TrainConfig {
            epochs: 15,
            ..comparison_config(VariantConfig::canonical(), 6)
        };
        let auc = train(&split, data.vocab.len(), &config, |_| {})
            .and_then(|out| evaluate(&out.params, &split.test))
            .map(|r| r.auc);
        aucs.push((regime, auc));
    }
    let all_ok = aucs.iter().all(|(_, a)| a.is_ok());
    let get = |r: AttributeRegime| {
        aucs.iter()
            .find(|(x, _)| *x == r)
            .and_then(|(_, a)| a.as_ref().ok().copied())
    };
    let directional = matches!((get(AttributeRegime::Both), get(AttributeRegime::None)), (Some(b), Some(n)) if b >= n);
    let listing: Vec<String> = aucs
        .iter()
        .map(|(r, a)| match a {
            Ok(v) => format!("{r} {v:.4}"),
            Err(e) => format!("{r} error: {e}"),
        })
        .collect();
    Outcome {
        pass: all_ok && directional,
        detail: format!("test auc {}; both >= none {directional}", listing.join(", ")),
    }
}

#[test]
fn acceptance() {
    let checks: [Check; 8] = [
        ("gradient correctness", gradient_correctness),
        ("fm reduction identity", fm_identity),
        ("metric oracles", metric_oracles),
        ("structural invariants", structural_invariants),
        ("capacity", capacity),
        ("directional ablation", directional_ablation),
        ("determinism and persistence", determinism_and_persistence),
        ("attribute regimes", attribute_regimes),
    ];
    let only = std::env::var("GMCF_ACCEPTANCE_ONLY").ok();
    let mut failed = Vec::new();
    for (name, check) in checks {
        if only.as_deref().is_some_and(|o| !name.contains(o)) {
            continue;
        }
        let started = Instant::now();
        if !report(name, started, check()) {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
