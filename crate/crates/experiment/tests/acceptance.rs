//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the lines show up in
//! `cargo test` output without `--nocapture`. Criteria 9 and 10 train the
//! tiny backbone end to end and take a few minutes.

use std::path::Path;
use std::time::{Duration, Instant};

use lesionfuse_core::backbones::BackboneName;
use lesionfuse_core::data::{
    class_weights, encode_clinical, make_folds, BodyRegion, ClinicalRecord, DatasetManifest, Diagnosis, Findings,
    WeightVector, N_CLASSES, N_CLI,
};
use lesionfuse_core::evaluation::{auc_macro_ovr, balanced_accuracy, confusion_matrix_n, weighted_prf};
use lesionfuse_core::fusion::{
    build_head, fuse_forward, reduced_image_features, total_features, FusionConfig, FusionHead, Scenario,
};
use lesionfuse_core::nn::{self, Param, Parameterized, Pass};
use lesionfuse_core::preprocess::{shades_of_gray, ColorConstancyConfig, NormOrder};
use lesionfuse_core::stats::{friedman_test, wilcoxon_signed_rank, ScoreMatrix};
use lesionfuse_core::trainer::{train_two_phase, weighted_cross_entropy, weighted_loss_and_grad, TrainConfig};
use lesionfuse_experiment::report::summarize_run;
use lesionfuse_experiment::runner::{build_model, RunArtifacts};
use lesionfuse_experiment::source::{ImageSource, SourceOptions};
use lesionfuse_experiment::synth::{Informativeness, PAD_COUNTS};
use lesionfuse_experiment::{generate_synthetic, run_experiment, ExperimentConfig, SynthConfig};
use ndarray::{Array1, Array2, Array3};
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- 1

fn fusion_widths() -> Outcome {
    let table = [(0.5, 28, 56), (0.6, 42, 70), (0.7, 66, 94), (0.8, 112, 140), (0.9, 252, 280)];
    for (c_f, n_img, total) in table {
        let got = (
            reduced_image_features(28, c_f).map_err(|e| e.to_string())?,
            total_features(28, c_f).map_err(|e| e.to_string())?,
        );
        ensure(got == (n_img, total), || format!("c_f {c_f}: {got:?} != ({n_img}, {total})"))?;
    }
    Ok("5/5 rows exact".into())
}

// ---------------------------------------------------------------- 2

fn random_record(rng: &mut ChaCha8Rng, i: usize) -> ClinicalRecord {
    let b = |rng: &mut ChaCha8Rng| rng.random_bool(0.5);
    ClinicalRecord {
        lesion_id: format!("L{i}"),
        patient_id: format!("P{i}"),
        image_path: format!("{i}.png").into(),
        diagnosis: Diagnosis::ALL[rng.random_range(0..N_CLASSES)],
        age: rng.random_range(0..=120),
        region: BodyRegion::ALL[rng.random_range(0..BodyRegion::ALL.len())],
        findings: Findings {
            itch: b(rng),
            bleed: b(rng),
            hurt: b(rng),
            grew: b(rng),
            changed: b(rng),
            elevation: b(rng),
        },
    }
}

fn encoding_slots() -> Outcome {
    let mut runner = TestRunner::new(PropConfig {
        cases: 10_000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    runner
        .run(&proptest::prelude::any::<u64>(), |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rec = random_record(&mut rng, 0);
            let v = encode_clinical::<f64>(&rec, 100.0);
            proptest::prop_assert_eq!(v.0.len(), 28);
            let sum: f64 = v.0[1..].iter().sum();
            proptest::prop_assert_eq!(sum, 7.0);
            proptest::prop_assert!(v.0[1..].iter().all(|&x| x == 0.0 || x == 1.0));
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    ensure(N_CLI == 28, || format!("N_CLI = {N_CLI}"))?;
    Ok("10000 records: 28 slots, slots 1-27 sum to 7".into())
}

// ---------------------------------------------------------------- 3

fn pad_weights() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut records = Vec::new();
    for (c, &n) in PAD_COUNTS.iter().enumerate() {
        for _ in 0..n {
            let mut r = random_record(&mut rng, records.len());
            r.diagnosis = Diagnosis::ALL[c];
            records.push(r);
        }
    }
    let manifest = DatasetManifest::new(records, ".").map_err(|e| e.to_string())?;
    let w = class_weights(&manifest).map_err(|e| e.to_string())?;
    let total: usize = PAD_COUNTS.iter().sum();
    let mut worst = 0.0f64;
    for c in 0..N_CLASSES {
        let expected = total as f64 / PAD_COUNTS[c] as f64;
        worst = worst.max((w.weights[c] - expected).abs() / expected);
    }
    ensure(worst < 1e-12, || format!("max relative error {worst:e}"))?;
    ensure((w.weights[0] - 2.9687).abs() < 5e-5 && (w.weights[2] - 24.0597).abs() < 5e-5, || {
        format!("ACK {} MEL {}", w.weights[0], w.weights[2])
    })?;
    Ok(format!("ACK {:.4}, MEL {:.4}, max rel err {worst:.1e}", w.weights[0], w.weights[2]))
}

// ---------------------------------------------------------------- 4

fn color_constancy() -> Outcome {
    let cfg = |p| ColorConstancyConfig {
        p,
        ..Default::default()
    };
    let image = |seed: u64, lo: f64, hi: f64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn((64, 64, 3), || rng.random_range(lo..hi))
    };
    let mean = |img: &Array3<f64>, c: usize| img.index_axis(ndarray::Axis(2), c).mean().unwrap();
    let run = |img: &Array3<f64>, p| shades_of_gray(&img.view(), &cfg(p)).map(|r| r.image).map_err(|e| e.to_string());

    // (a) p = 1 is gray-world.
    let mut a_err = 0.0f64;
    for seed in 0..5 {
        let img = image(seed, 0.05, 0.45);
        let out = run(&img, NormOrder::Finite(1.0))?;
        let m: Vec<f64> = (0..3).map(|c| mean(&img, c)).collect();
        let g = m.iter().sum::<f64>() / 3.0;
        for ((y, x, c), v) in out.indexed_iter() {
            a_err = a_err.max((v - (img[[y, x, c]] * g / m[c]).min(1.0)).abs());
        }
    }
    ensure(a_err < 1e-6, || format!("gray-world deviation {a_err:e}"))?;

    // (b) idempotence.
    let mut b_err = 0.0f64;
    for p in [NormOrder::Finite(1.0), NormOrder::Finite(6.0), NormOrder::Infinity] {
        let once = run(&image(7, 0.1, 0.5), p)?;
        ensure(once.iter().all(|&v| v < 1.0), || "clipping in idempotence input".into())?;
        let twice = run(&once, p)?;
        b_err = b_err.max((&once - &twice).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b)));
    }
    ensure(b_err < 1e-5, || format!("idempotence deviation {b_err:e}"))?;

    // (c) an achromatic scene under a (1.5, 1, 0.75) cast is recovered up to one global factor.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut scene = Array3::<f64>::zeros((64, 64, 3));
    for mut px in scene.lanes_mut(ndarray::Axis(2)) {
        px.fill(rng.random_range(0.05..0.5));
    }
    let gains = [1.5, 1.0, 0.75];
    let cast = Array3::from_shape_fn(scene.raw_dim(), |(y, x, c)| scene[[y, x, c]] * gains[c]);
    let out = run(&cast, NormOrder::Finite(1.0))?;
    let factor = gains.iter().sum::<f64>() / 3.0;
    let c_err = out
        .indexed_iter()
        .map(|((y, x, c), v)| (v - scene[[y, x, c]] * factor).abs())
        .fold(0.0f64, f64::max);
    ensure(c_err < 1e-5, || format!("gain recovery deviation {c_err:e}"))?;
    Ok(format!("gray-world {a_err:.1e}, idempotence {b_err:.1e}, gain recovery {c_err:.1e}"))
}

// ---------------------------------------------------------------- 5

fn metrics_oracles() -> Outcome {
    let recall = |t: &[usize], p: &[usize], c: usize| {
        let s = t.iter().filter(|&&x| x == c).count();
        (s > 0).then(|| t.iter().zip(p).filter(|(&a, &b)| a == c && b == c).count() as f64 / s as f64)
    };
    let precision = |t: &[usize], p: &[usize], c: usize| {
        let s = p.iter().filter(|&&x| x == c).count();
        if s == 0 {
            0.0
        } else {
            t.iter().zip(p).filter(|(&a, &b)| a == c && b == c).count() as f64 / s as f64
        }
    };
    let pair_auc = |scores: &[f64], pos: &[bool]| {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if pos[i] && !pos[j] {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        (den > 0.0).then(|| num / den)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let k = rng.random_range(2..=6);
        let n = rng.random_range(2..40);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let probs: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..k).map(|_| rng.random_range(1..6) as f64).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            })
            .collect();
        let cm = confusion_matrix_n(k, &truth, &pred).map_err(|e| e.to_string())?;
        let recalls: Vec<f64> = (0..k).filter_map(|c| recall(&truth, &pred, c)).collect();
        let bacc = recalls.iter().sum::<f64>() / recalls.len() as f64;
        let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
        for c in 0..k {
            let Some(rc) = recall(&truth, &pred, c) else { continue };
            let w = truth.iter().filter(|&&t| t == c).count() as f64 / n as f64;
            let pc = precision(&truth, &pred, c);
            p += w * pc;
            r += w * rc;
            f += w * if pc + rc > 0.0 { 2.0 * pc * rc / (pc + rc) } else { 0.0 };
        }
        let aucs: Vec<f64> = (0..k)
            .filter_map(|c| {
                let s: Vec<f64> = probs.iter().map(|row| row[c]).collect();
                let pos: Vec<bool> = truth.iter().map(|&t| t == c).collect();
                pair_auc(&s, &pos)
            })
            .collect();
        let (wp, wr, wf) = weighted_prf(&cm).map_err(|e| e.to_string())?;
        let mut diffs = vec![
            (balanced_accuracy(&cm).map_err(|e| e.to_string())? - bacc).abs(),
            (wp - p).abs(),
            (wr - r).abs(),
            (wf - f).abs(),
        ];
        if !aucs.is_empty() {
            let auc = aucs.iter().sum::<f64>() / aucs.len() as f64;
            diffs.push((auc_macro_ovr(&probs, &truth, k).map_err(|e| e.to_string())? - auc).abs());
        }
        worst = diffs.into_iter().fold(worst, f64::max);
    }
    ensure(worst < 1e-9, || format!("max deviation {worst:e}"))?;
    Ok(format!("200 cases, max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- 6

fn count_ranks(row: &[f64]) -> Vec<f64> {
    row.iter()
        .map(|&v| {
            let less = row.iter().filter(|&&u| u < v).count() as f64;
            let eq = row.iter().filter(|&&u| u == v).count() as f64;
            1.0 + less + (eq - 1.0) / 2.0
        })
        .collect()
}

/// Sum of squared rank sums: for a fixed table its ordering across
/// reshuffles is the ordering of the tie-corrected statistic.
fn rank_sum_spread(rows: &[Vec<f64>]) -> f64 {
    let ranks: Vec<Vec<f64>> = rows.iter().map(|r| count_ranks(r)).collect();
    (0..rows[0].len())
        .map(|j| ranks.iter().map(|r| r[j]).sum::<f64>().powi(2))
        .sum()
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 1 {
        return vec![vec![0]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..k {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

fn friedman_enumeration_p(rows: &[Vec<f64>]) -> f64 {
    let observed = rank_sum_spread(rows);
    let perms = permutations(rows[0].len());
    let total = perms.len().pow(rows.len() as u32);
    let mut table = rows.to_vec();
    let mut hits = 0usize;
    for code in 0..total {
        let mut c = code;
        for (b, row) in rows.iter().enumerate() {
            table[b] = perms[c % perms.len()].iter().map(|&i| row[i]).collect();
            c /= perms.len();
        }
        hits += (rank_sum_spread(&table) >= observed - 1e-9) as usize;
    }
    hits as f64 / total as f64
}

fn wilcoxon_enumeration_p(d: &[f64]) -> f64 {
    let d: Vec<f64> = d.iter().copied().filter(|v| *v != 0.0).collect();
    let ranks = count_ranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
    let mu = ranks.iter().sum::<f64>() / 2.0;
    let obs: f64 = ranks.iter().zip(&d).filter(|(_, v)| **v > 0.0).map(|(r, _)| r).sum();
    let dev = (obs - mu).abs();
    let n = d.len();
    let hits = (0..1usize << n)
        .filter(|mask| {
            let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            (w - mu).abs() >= dev - 1e-9
        })
        .count();
    hits as f64 / (1usize << n) as f64
}

fn statistics_oracles() -> Outcome {
    let matrix = |rows: Vec<Vec<f64>>| {
        let names: Vec<String> = (0..rows[0].len()).map(|j| format!("T{j}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        ScoreMatrix::from_rows(&refs, rows).map_err(|e| e.to_string())
    };
    let mut worst = 0.0f64;
    let mut friedman_cases = 0usize;
    let mut check = |rows: Vec<Vec<f64>>| -> Result<(), String> {
        let r = friedman_test(&matrix(rows.clone())?).map_err(|e| e.to_string())?;
        let exact = r.p_exact.ok_or("exact p unavailable")?;
        worst = worst.max((exact - friedman_enumeration_p(&rows)).abs());
        friedman_cases += 1;
        Ok(())
    };
    // Every tie pattern over {0, 1, 2} for k = 2 up to n = 4 and k = 3 up to
    // n = 2, then random tables for the remaining sizes up to n = 5, k = 3.
    for (k, max_n) in [(2usize, 4usize), (3, 2)] {
        let patterns: Vec<Vec<f64>> = (0..3usize.pow(k as u32))
            .map(|c| (0..k).map(|j| ((c / 3usize.pow(j as u32)) % 3) as f64).collect())
            .collect();
        for n in 2..=max_n {
            for code in 0..patterns.len().pow(n as u32) {
                let mut c = code;
                let rows = (0..n)
                    .map(|_| {
                        let p = patterns[c % patterns.len()].clone();
                        c /= patterns.len();
                        p
                    })
                    .collect();
                check(rows)?;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    for _ in 0..150 {
        let k = rng.random_range(2..=3);
        let n = rng.random_range(2..=5);
        let rows = (0..n)
            .map(|_| (0..k).map(|_| rng.random_range(0..4) as f64 * 0.1).collect())
            .collect();
        check(rows)?;
    }
    let friedman_worst = worst;

    let mut wilcoxon_worst = 0.0f64;
    let mut wilcoxon_cases = 0;
    for _ in 0..500 {
        let n = rng.random_range(1..=10);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
        if a == b {
            continue;
        }
        let r = wilcoxon_signed_rank(&a, &b).map_err(|e| e.to_string())?;
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        wilcoxon_worst = wilcoxon_worst.max((r.p_value - wilcoxon_enumeration_p(&d)).abs());
        wilcoxon_cases += 1;
    }
    ensure(friedman_worst < 1e-9, || format!("Friedman max deviation {friedman_worst:e}"))?;
    ensure(wilcoxon_worst < 1e-9, || format!("Wilcoxon max deviation {wilcoxon_worst:e}"))?;
    Ok(format!(
        "Friedman {friedman_cases} tables max dev {friedman_worst:.1e}; Wilcoxon {wilcoxon_cases} cases max dev {wilcoxon_worst:.1e}"
    ))
}

// ---------------------------------------------------------------- 7

fn gradient_check() -> Outcome {
    let cfg = FusionConfig {
        c_f: 0.6,
        n_cli: N_CLI,
        backbone_dim: 12,
        scenario: Scenario::Fused,
        dropout: 0.5,
        vgg_intermediate: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut head =
        FusionHead::<f64>::new(build_head(&cfg).map_err(|e| e.to_string())?, &mut rng).map_err(|e| e.to_string())?;
    let f = Array1::from_shape_fn(12, |_| rng.random_range(-2.0..2.0));
    let mut cv = [0.0; N_CLI];
    cv[0] = 0.55;
    cv[1 + rng.random_range(0..15)] = 1.0;
    for k in 0..6 {
        cv[16 + 2 * k + rng.random_bool(0.5) as usize] = 1.0;
    }
    let c = lesionfuse_core::data::ClinicalVector(cv);
    let y = 2;
    let w = WeightVector {
        weights: [2.9687, 3.6471, 24.0597, 8.2245, 10.8188, 7.4977],
    };
    let dropout_seed = 123;
    let loss = |head: &mut FusionHead<f64>| -> Result<f64, String> {
        let mut r = ChaCha8Rng::seed_from_u64(dropout_seed);
        let p = fuse_forward(f.view(), Some(&c), head, Pass::Train, &mut r).map_err(|e| e.to_string())?;
        Ok(weighted_cross_entropy(&p, y, &w) / w.weights[y])
    };

    let mut r = ChaCha8Rng::seed_from_u64(dropout_seed);
    let fm = f.clone().insert_axis(ndarray::Axis(0));
    let cm = Array2::from_shape_vec((1, N_CLI), cv.to_vec()).map_err(|e| e.to_string())?;
    let out = head.forward(&fm, Some(&cm), Pass::Train, &mut r).map_err(|e| e.to_string())?;
    let (_, g) = weighted_loss_and_grad(&out.probs, &[y], &w);
    head.backward(&g);
    let mut analytic = Vec::new();
    head.visit("", &mut |name, p: &mut Param<f64>| {
        if name == "reducer.0.weight" {
            analytic = p.grad.clone().map(|g| g.iter().copied().collect()).unwrap_or_default();
        }
    });
    ensure(!analytic.is_empty(), || "no reducer gradient".into())?;

    let nudge = |head: &mut FusionHead<f64>, k: usize, delta: f64| {
        head.visit("", &mut |name, p| {
            if name == "reducer.0.weight" {
                p.value.as_slice_mut().unwrap()[k] += delta;
            }
        });
    };
    let h = 1e-6;
    let fd = |head: &mut FusionHead<f64>, k: usize| -> Result<f64, String> {
        nudge(head, k, h);
        let lp = loss(head)?;
        nudge(head, k, -2.0 * h);
        let lm = loss(head)?;
        nudge(head, k, h);
        Ok((lp - lm) / (2.0 * h))
    };
    // Dropout and ReLU silence most reducer weights for a single sample, so
    // the 20 checked weights are drawn from those with a live path.
    let (mut active, inactive): (Vec<usize>, Vec<usize>) = (0..analytic.len()).partition(|&k| analytic[k] != 0.0);
    ensure(active.len() >= 20, || format!("only {} active weights", active.len()))?;
    let mut picked = Vec::new();
    for _ in 0..20 {
        picked.push(active.swap_remove(rng.random_range(0..active.len())));
    }
    let mut worst = 0.0f64;
    for &k in &picked {
        let (n, a) = (fd(&mut head, k)?, analytic[k]);
        worst = worst.max((n - a).abs() / n.abs().max(a.abs()));
    }
    ensure(worst < 1e-4, || format!("max relative error {worst:e}"))?;
    for &k in inactive.iter().step_by((inactive.len() / 20).max(1)).take(20) {
        let n = fd(&mut head, k)?;
        ensure(n.abs() < 1e-8, || format!("weight {k} has zero backprop gradient but fd {n:e}"))?;
    }
    Ok(format!("20 active weights, max relative error {worst:.1e}; silent weights have zero fd"))
}

// ---------------------------------------------------------------- 8

fn freeze_contract(work: &Path) -> Outcome {
    let synth = SynthConfig {
        size: 60,
        side: 16,
        seed: 8,
        ..SynthConfig::default()
    };
    let out = generate_synthetic(&synth, &work.join("freeze")).map_err(|e| format!("{e:#}"))?;
    let mut cfg = ExperimentConfig {
        manifest: out.manifest_path.clone(),
        backbones: vec!["tiny".into()],
        pretrained: false,
        image_side: 16,
        ..ExperimentConfig::default()
    };
    cfg.augment = Default::default();
    let source = ImageSource::load(&out.manifest, SourceOptions::from_config(&cfg)).map_err(|e| format!("{e:#}"))?;
    let folds = make_folds(&out.manifest, 3, 0, false).map_err(|e| e.to_string())?;
    let mut model = build_model(BackboneName::Tiny, Scenario::Fused, 0.8, &cfg, 4).map_err(|e| format!("{e:#}"))?;
    let split = |m: &mut lesionfuse_core::trainer::Model<f32>| {
        let all = nn::snapshot(m, "");
        let (bb, head): (Vec<_>, Vec<_>) = all.into_iter().partition(|(n, _)| n.starts_with("backbone."));
        (bb, head)
    };
    let (bb0, head0) = split(&mut model);
    let train = TrainConfig {
        phase1_epochs: 3,
        phase2_epochs: 0,
        lr_phase1: 3e-3,
        batch_size: 16,
        augment: false,
        ..TrainConfig::default()
    };
    train_two_phase(&mut model, &source, &folds, 0, &train).map_err(|e| e.to_string())?;
    let (bb1, head1) = split(&mut model);
    ensure(!bb0.is_empty(), || "backbone has no parameters".into())?;
    let bit_identical = bb0.len() == bb1.len()
        && bb0.iter().zip(&bb1).all(|(a, b)| {
            a.0 == b.0 && a.1.shape() == b.1.shape() && a.1.iter().zip(b.1.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
    ensure(bit_identical, || "a backbone tensor changed during phase 1".into())?;
    let changed = head0.iter().zip(&head1).filter(|(a, b)| a.1 != b.1).count();
    ensure(changed > 0, || "no head tensor changed".into())?;
    Ok(format!("{} backbone tensors bit-identical, {changed}/{} head tensors moved", bb0.len(), head0.len()))
}

// ---------------------------------------------------------------- 9, 10

const EFFECT_SEEDS: u64 = 3;

fn effect_config(work: &Path) -> Result<ExperimentConfig, String> {
    let synth = SynthConfig {
        size: 600,
        informativeness: Informativeness {
            image: 0.6,
            clinical: 0.6,
        },
        seed: 2024,
        side: 32,
        ..SynthConfig::default()
    };
    let data = generate_synthetic(&synth, &work.join("effect-data")).map_err(|e| format!("{e:#}"))?;
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.toml");
    let mut cfg = ExperimentConfig::load(&path).map_err(|e| format!("{e:#}"))?;
    cfg.manifest = data.manifest_path;
    cfg.image_root = None;
    cfg.out_dir = work.to_path_buf();
    cfg.backbones = vec!["tiny".into()];
    cfg.scenarios = vec![Scenario::ImageOnly, Scenario::Fused];
    cfg.folds = 5;
    cfg.seed = 0;
    cfg.repeats = EFFECT_SEEDS as usize;
    cfg.stats.metric = "bacc".into();
    cfg.stats.alpha_wilcoxon = 0.05;
    Ok(cfg)
}

fn qualitative_effect(cfg: &ExperimentConfig, run_dir: &Path) -> Result<(RunArtifacts, String), (Option<RunArtifacts>, String)> {
    let art = run_experiment(cfg, Some(run_dir.to_path_buf())).map_err(|e| (None, format!("{e:#}")))?;
    let verdict = (|| -> Outcome {
        let summary = summarize_run(&art.run_dir, &art.index).map_err(|e| format!("{e:#}"))?;
        ensure(summary.failed.is_empty(), || format!("{} cells failed", summary.failed.len()))?;
        let row = |s: &str| summary.table.rows.iter().find(|r| r.scenario == s).map(|r| r.summary.bacc);
        let img = row("image_only").ok_or("no image-only row")?;
        let fused = row("fused").ok_or("no fused row")?;
        let gain = fused.mean - img.mean;
        let scores = summary.scores.as_ref().ok_or("no score matrix")?;
        ensure(scores.n_blocks() == 15, || format!("{} blocks, expected 15", scores.n_blocks()))?;
        let cmp = summary.comparison.as_ref().ok_or("no comparison")?;
        let pair = cmp.pairwise.as_ref().and_then(|p| p.first());
        let significant = pair.is_some_and(|p| p.significant && p.better.as_deref().is_some_and(|b| b.contains("fused")));
        let detail = format!(
            "image-only {:.4} ± {:.4}, fused {:.4} ± {:.4}, gain {gain:+.4}; Friedman p {:.2e}; Wilcoxon p {}",
            img.mean,
            img.std,
            fused.mean,
            fused.std,
            cmp.friedman.p_value,
            pair.map_or("not run".to_string(), |p| format!("{:.2e}", p.p_value)),
        );
        ensure(gain >= 0.03 && significant, || detail.clone())?;
        Ok(detail)
    })();
    match verdict {
        Ok(d) => Ok((art, d)),
        Err(d) => Err((Some(art), d)),
    }
}

fn determinism(first: &RunArtifacts, cfg: &ExperimentConfig, run_dir: &Path) -> Outcome {
    let second = run_experiment(cfg, Some(run_dir.to_path_buf())).map_err(|e| format!("{e:#}"))?;
    for seed in cfg.seeds() {
        let name = format!("folds-seed{seed}.json");
        let a = std::fs::read(first.run_dir.join(&name)).map_err(|e| e.to_string())?;
        let b = std::fs::read(second.run_dir.join(&name)).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{name} differs"))?;
    }
    let t1 = summarize_run(&first.run_dir, &first.index).map_err(|e| format!("{e:#}"))?.table;
    let t2 = summarize_run(&second.run_dir, &second.index).map_err(|e| format!("{e:#}"))?.table;
    ensure(t1.rows.len() == t2.rows.len(), || "row count differs".into())?;
    let mut worst = 0.0f64;
    for (a, b) in t1.rows.iter().zip(&t2.rows) {
        ensure(a.model == b.model && a.scenario == b.scenario, || "row labels differ".into())?;
        for (x, y) in a.summary.metrics().iter().zip(b.summary.metrics().iter()) {
            worst = worst.max((x.mean - y.mean).abs()).max((x.std - y.std).abs());
        }
    }
    ensure(worst <= 1e-3, || format!("aggregate tables differ by {worst:e}"))?;
    Ok(format!("{} fold files identical, aggregate max difference {worst:.1e}", cfg.seeds().len()))
}

// ----------------------------------------------------------------

fn report(id: usize, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = f();
    let took = start.elapsed();
    let (ok, detail) = match outcome {
        Ok(d) if took <= budget => (true, d),
        Ok(d) => (false, format!("{d}; over time budget")),
        Err(d) => (false, d),
    };
    println!(
        "criterion {id:>2} {} {name}: {detail} [{:.2}s / {}s]",
        if ok { "PASS" } else { "FAIL" },
        took.as_secs_f64(),
        budget.as_secs()
    );
    ok
}

fn main() {
    // `cargo test -- --list` and filtered runs must not trigger the long criteria.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    if args.iter().any(|a| !a.starts_with('-') && !"acceptance".contains(a.as_str())) {
        return;
    }

    let work = tempfile::tempdir().expect("temp dir");
    let s = Duration::from_secs;
    let mut ok = vec![
        report(1, "fusion widths", s(1), fusion_widths),
        report(2, "clinical encoding", s(5), encoding_slots),
        report(3, "class weights", s(1), pad_weights),
        report(4, "color constancy", s(10), color_constancy),
        report(5, "metrics oracles", s(30), metrics_oracles),
        report(6, "statistics oracles", s(120), statistics_oracles),
        report(7, "gradient check", s(60), gradient_check),
        report(8, "freeze contract", s(60), || freeze_contract(work.path())),
    ];

    let cfg = effect_config(work.path());
    let mut first = None;
    ok.push(report(9, "fused vs image-only on synthetic data", s(15 * 60), || {
        let cfg = cfg.clone()?;
        match qualitative_effect(&cfg, &work.path().join("run-a")) {
            Ok((art, d)) => {
                first = Some(art);
                Ok(d)
            }
            Err((art, d)) => {
                first = art;
                Err(d)
            }
        }
    }));
    ok.push(report(10, "end-to-end determinism", s(15 * 60), || {
        let cfg = cfg.clone()?;
        let first = first.as_ref().ok_or("criterion 9 produced no run")?;
        determinism(first, &cfg, &work.path().join("run-b"))
    }));

    let passed = ok.iter().filter(|&&x| x).count();
    println!("acceptance: {passed}/{} criteria passed", ok.len());
    if passed != ok.len() {
        std::process::exit(1);
    }
}
