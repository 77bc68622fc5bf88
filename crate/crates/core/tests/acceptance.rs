//! Acceptance criteria 1-12. Prints one PASS/FAIL line per criterion on
//! stderr (bypassing the test harness capture) and fails if any criterion
//! fails.

mod common;

use std::collections::BTreeSet;
use std::io::Write;
use std::time::{Duration, Instant};

use common::*;
use connectome_ensemble::classifier;
use connectome_ensemble::connectivity::{index_to_pair, n_features, pair_to_index, pearson_matrix};
use connectome_ensemble::data::{AtlasId, AtlasSpec, Label, RoiTimeSeries};
use connectome_ensemble::ensemble::{combine, compute_weights, VotingMode};
use connectome_ensemble::evaluation::{
    cross_validate, make_folds, run_fold, select_subset, train_selector, variance_report, Confusion, Dataset, GlobalFit,
    Metrics, PipelineConfig,
};
use connectome_ensemble::feature_selection::{apply_mask, fscore};
use connectome_ensemble::ssdae::kl_divergence;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 42;
const PROPERTY_BUDGET: Duration = Duration::from_secs(60);
const END_TO_END_BUDGET: Duration = Duration::from_secs(300);

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let x = random_matrix(80, 30, &mut rng);
        let m = pearson_matrix(AtlasId::CC, &RoiTimeSeries::new(x.clone()).unwrap()).unwrap().values;
        for i in 0..30 {
            check(m[[i, i]] == 1.0, format!("diagonal {i} is {}", m[[i, i]]))?;
            for j in 0..30 {
                check(m[[i, j]] == m[[j, i]], format!("asymmetric at ({i},{j})"))?;
                if i != j {
                    let r = naive_pearson(&x.column(i).to_vec(), &x.column(j).to_vec());
                    worst = worst.max((m[[i, j]] - r).abs());
                }
            }
        }
    }
    check(worst <= 1e-12, format!("max |pearson - oracle| = {worst:e} > 1e-12"))?;
    Ok(format!("max deviation {worst:.1e}, symmetry and unit diagonal exact"))
}

fn criterion_2() -> Outcome {
    check(n_features(200) == 19_900, "N=200 does not give 19,900")?;
    check(n_features(116) == 6_670, "N=116 does not give 6,670")?;
    check(AtlasSpec::cc().n_features() == 19_900 && AtlasSpec::aal().n_features() == 6_670, "atlas presets")?;
    for n in [4, 116, 200] {
        let pairs = enumerate_pairs(n);
        check(pairs.len() == n_features(n), format!("N={n}: pair count"))?;
        for (idx, &(u, v)) in pairs.iter().enumerate() {
            check(index_to_pair(idx, n).unwrap() == (u, v), format!("N={n}: index_to_pair({idx})"))?;
            check(pair_to_index(u, v, n).unwrap() == idx, format!("N={n}: pair_to_index({u},{v})"))?;
        }
        check(index_to_pair(pairs.len(), n).is_err(), format!("N={n}: out-of-range index accepted"))?;
    }
    Ok("19,900 / 6,670; round trip over all indices for N = 4, 116, 200".into())
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut labels: Vec<Label> = (0..60).map(|i| if i < 30 { Label::Asd } else { Label::Tc }).collect();
    labels.shuffle(&mut rng);
    let x = random_matrix(60, 200, &mut rng);
    let ranking = fscore(AtlasId::CC, x.view(), &labels).unwrap();
    let mut worst = 0.0f64;
    for j in 0..200 {
        worst = worst.max((ranking.scores[j] - naive_fscore(&x.column(j).to_vec(), &labels)).abs());
    }
    check(worst <= 1e-10, format!("max |fscore - oracle| = {worst:e}"))?;

    // Integer features with 32 subjects per class keep every sum and mean
    // exactly representable, so a shift must reproduce the scores bit for bit.
    let dyadic_labels: Vec<Label> = (0..64).map(|i| if i % 2 == 0 { Label::Asd } else { Label::Tc }).collect();
    let xi = Array2::from_shape_fn((64, 50), |_| rng.random_range(-64..64) as f64);
    let shifted = &xi + 1024.0;
    let a = fscore(AtlasId::CC, xi.view(), &dyadic_labels).unwrap();
    let b = fscore(AtlasId::CC, shifted.view(), &dyadic_labels).unwrap();
    check(a.scores == b.scores, "scores changed under a constant shift")?;

    // Zero separation: both classes hold the same multiset of values.
    let mut z = Array2::<f64>::zeros((64, 1));
    for i in 0..32 {
        z[[2 * i, 0]] = (i % 7) as f64;
        z[[2 * i + 1, 0]] = ((31 - i) % 7) as f64;
    }
    let mut asd: Vec<f64> = (0..32).map(|i| z[[2 * i, 0]]).collect();
    let mut tc: Vec<f64> = (0..32).map(|i| z[[2 * i + 1, 0]]).collect();
    asd.sort_by(f64::total_cmp);
    tc.sort_by(f64::total_cmp);
    check(asd == tc, "zero-separation fixture is not symmetric")?;
    let zs = fscore(AtlasId::CC, z.view(), &dyadic_labels).unwrap();
    check(zs.scores[0] == 0.0, format!("zero separation scored {}", zs.scores[0]))?;
    Ok(format!("max deviation {worst:.1e}; shift invariance exact; zero separation 0"))
}

fn criterion_4() -> Outcome {
    let ae = autoencoder_gradient_probes(SEED);
    let mlp = classifier_gradient_probes(SEED);
    check(ae.len() == N_PROBES && mlp.len() == N_PROBES, "fewer than 100 probes")?;
    let (wa, wm) = (worst(&ae), worst(&mlp));
    check(wa.rel_error < GRAD_TOL, format!("autoencoder probe {} rel error {:e}", wa.index, wa.rel_error))?;
    check(wm.rel_error < GRAD_TOL, format!("classifier probe {} rel error {:e}", wm.index, wm.rel_error))?;
    Ok(format!("worst relative error: 6-4-6 AE {:.1e}, 12-8-6-(4+4)-2 MLP {:.1e}", wa.rel_error, wm.rel_error))
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    for rho in [0.05, 0.2, 0.5, 0.9] {
        check(kl_divergence(rho, rho) == 0.0, format!("KL({rho}, {rho}) != 0"))?;
    }
    for _ in 0..1000 {
        let rho = rng.random_range(0.01..0.99);
        let hat = rng.random_range(1e-6..1.0 - 1e-6);
        let kl = kl_divergence(rho, hat);
        check(kl >= 0.0 && kl.is_finite(), format!("KL({rho}, {hat}) = {kl}"))?;
    }
    let expected = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
    let got = kl_divergence(0.5, 0.25);
    check((got - 0.14384).abs() < 1e-5 && (got - expected).abs() < 1e-6, format!("KL(0.5, 0.25) = {got}"))?;
    Ok(format!("KL(0.5, 0.25) = {got:.6}"))
}

fn criterion_6() -> Outcome {
    let (aes, model) = random_transfer(SEED, 15, [10, 7, 5]);
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let x = random_matrix(100, 15, &mut rng);
    let side = Array2::<f64>::zeros((100, 4));
    let (_, cache) = model.net.forward_cached(x.view(), Some(side.view())).unwrap();
    let composed = aes[1].encode(aes[0].encode(x.view()).view());
    check(cache.outputs[1] == composed, "layer-2 output differs from encoder composition")?;
    Ok("100 inputs bit-identical".into())
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    for _ in 0..200 {
        let k = rng.random_range(1..6);
        let acc: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
        let w = compute_weights(&acc).unwrap();
        check((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12, "weights do not sum to 1")?;
        let probs: Vec<[f64; 2]> = (0..k)
            .map(|_| {
                let p = rng.random_range(0.0..1.0);
                [p, 1.0 - p]
            })
            .collect();
        let c = rng.random_range(0.1..10.0);
        let scaled = compute_weights(&acc.iter().map(|a| a * c).collect::<Vec<_>>()).unwrap();
        let v1 = combine(&w, &probs, VotingMode::Soft);
        let v2 = combine(&scaled, &probs, VotingMode::Soft);
        check(v1.label == v2.label, "positive rescaling of accuracies changed the vote")?;
    }
    let p = [0.37, 0.63];
    let single = combine(&compute_weights(&[0.8]).unwrap(), &[p], VotingMode::Soft);
    check(single.scores == p && single.label == Label::Tc, "single member is not reproduced")?;
    let acc = [0.7342, 0.7120, 0.6874];
    let total: f64 = acc.iter().sum();
    let w = compute_weights(&acc).unwrap();
    for ((wi, ai), exp) in w.iter().zip(acc).zip([0.3441, 0.3337, 0.3222]) {
        check((wi - ai / total).abs() < 1e-4 && (wi - exp).abs() < 1e-4, format!("weight {wi} vs {exp}"))?;
    }
    Ok(format!("example weights ({:.4}, {:.4}, {:.4})", w[0], w[1], w[2]))
}

fn leakage_config() -> PipelineConfig {
    PipelineConfig { folds: 4, ..PipelineConfig::desk() }
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut labels: Vec<Label> = (0..1035).map(|i| if i < 505 { Label::Asd } else { Label::Tc }).collect();
    labels.shuffle(&mut rng);
    let folds = make_folds(&labels, 10, SEED, true).unwrap();
    let mut seen = vec![0usize; labels.len()];
    for f in 0..10 {
        let test = folds.test_indices(f);
        check((103..=104).contains(&test.len()), format!("fold {f} has {} subjects", test.len()))?;
        for &i in &test {
            seen[i] += 1;
        }
    }
    check(seen.iter().all(|&c| c == 1), "a subject is not in exactly one test fold")?;
    for class in [Label::Asd, Label::Tc] {
        let counts: Vec<usize> = (0..10).map(|f| folds.test_indices(f).iter().filter(|&&i| labels[i] == class).count()).collect();
        let spread = counts.iter().max().unwrap() - counts.iter().min().unwrap();
        check(spread <= 1, format!("{class:?} per-fold counts {counts:?}"))?;
    }

    let data = synthetic_dataset(60, 0.8, SEED);
    let config = leakage_config();
    let folds = make_folds(&data.labels, config.folds, config.seed, config.stratified).unwrap();
    let global = GlobalFit::default();
    for f in 0..config.folds {
        let clean = run_fold(&data, &config, &folds, f, &global).unwrap();
        let noisy_data = replace_test_features(&data, &folds.test_indices(f), &mut rng);
        let noisy = run_fold(&noisy_data, &config, &folds, f, &global).unwrap();
        check(clean.parameter_digest == noisy.parameter_digest, format!("fold {f}: trained parameters changed"))?;
        let changed = clean.predictions.iter().zip(&noisy.predictions).any(|(a, b)| a.scores != b.scores);
        check(changed, format!("fold {f}: noise in the test fold did not reach the test scores"))?;
    }
    Ok("1,035 ids: sizes 103-104, class spread <= 1; parameters bit-identical under test-fold noise".into())
}

fn replace_test_features(data: &Dataset, test: &[usize], rng: &mut ChaCha8Rng) -> Dataset {
    let mut out = data.clone();
    for x in out.features.values_mut() {
        for &i in test {
            x.row_mut(i).mapv_inplace(|_| rng.random_range(-1.0..1.0));
        }
    }
    out
}

fn criterion_9() -> Outcome {
    let m = Metrics::from_confusion(Confusion { tp: 3, fn_: 1, tn: 4, fp: 2 });
    // 7/10, 3/4, 4/6 as exact rationals.
    check(m.accuracy.unwrap() * 10.0 == 7.0, "accuracy 7/10")?;
    check(m.sensitivity == Some(0.75), "sensitivity 3/4")?;
    check(m.specificity.unwrap() * 6.0 == 4.0, "specificity 4/6")?;
    let all = Metrics::from_confusion(Confusion { tp: 12, fn_: 0, tn: 9, fp: 0 });
    check(all.accuracy == Some(1.0) && all.sensitivity == Some(1.0) && all.specificity == Some(1.0), "all-correct")?;
    let none_right = Metrics::from_confusion(Confusion { tp: 0, fn_: 5, tn: 0, fp: 5 });
    check(none_right.accuracy == Some(0.0), "all-wrong")?;
    let no_tc = Metrics::from_confusion(Confusion { tp: 2, fn_: 1, tn: 0, fp: 0 });
    check(no_tc.specificity.is_none() && no_tc.sensitivity.is_some(), "missing TC must leave specificity absent")?;
    let no_asd = Metrics::from_confusion(Confusion { tp: 0, fn_: 0, tn: 2, fp: 1 });
    check(no_asd.sensitivity.is_none(), "missing ASD must leave sensitivity absent")?;
    let empty = Metrics::from_confusion(Confusion::default());
    check(empty.accuracy.is_none() && empty.sensitivity.is_none() && empty.specificity.is_none(), "empty")?;
    let json = serde_json::to_value(no_tc).unwrap();
    check(json["specificity"].is_null() && json["confusion"]["fn"] == 1, "absent metrics must serialise as null")?;
    Ok("hand-built confusion identities hold".into())
}

fn end_to_end(effect: f64) -> (f64, String) {
    let data = synthetic_dataset(200, effect, SEED);
    let config = PipelineConfig { seed: SEED, ..PipelineConfig::desk() };
    let report = cross_validate(&data, &config).unwrap();
    (report.mean.accuracy.unwrap(), report.metrics_json().unwrap())
}

fn criterion_10(first_json: &mut Option<String>) -> Outcome {
    let start = Instant::now();
    let (acc_signal, json) = end_to_end(0.8);
    *first_json = Some(json);
    let (acc_null, _) = end_to_end(0.0);
    let elapsed = start.elapsed();
    let detail = format!("effect 0.8 -> {acc_signal:.4} (>= 0.90); effect 0 -> {acc_null:.4} (0.50 +/- 0.05); {elapsed:.1?}");
    check(acc_signal >= 0.90, detail.clone())?;
    check((acc_null - 0.5).abs() <= 0.05, detail.clone())?;
    check(elapsed < END_TO_END_BUDGET, detail.clone())?;
    Ok(detail)
}

fn criterion_11() -> Outcome {
    let data = synthetic_dataset(200, 0.4, SEED);
    let config = PipelineConfig { seed: SEED, ..PipelineConfig::desk() };
    let selector = train_selector(&data, "NYU", AtlasId::CC, &config).unwrap();
    let demographics = data.impute_cohort().unwrap();
    let report = select_subset(&selector, &data, &demographics).unwrap();

    let x = data.features_of(AtlasId::CC).unwrap();
    let pred = selector.predict(apply_mask(x.view(), &selector.mask).unwrap().view(), &demographics).unwrap();
    let correct: BTreeSet<&str> =
        (0..data.len()).filter(|&i| pred[i] == data.labels[i]).map(|i| data.subject_ids[i].as_str()).collect();
    let retained: BTreeSet<&str> = report.retained_ids.iter().map(String::as_str).collect();
    check(retained == correct, "retained set differs from the correctly classified subjects")?;
    check(report.unevaluable_ids.is_empty(), "unexpected unevaluable subjects")?;

    let idx: Vec<usize> = (0..data.len()).filter(|&i| retained.contains(data.subject_ids[i].as_str())).collect();
    let sub = data.subset(&idx);
    let sub_demo: Vec<_> = idx.iter().map(|&i| demographics[i]).collect();
    let xs = sub.features_of(AtlasId::CC).unwrap();
    let rescored = selector.predict(apply_mask(xs.view(), &selector.mask).unwrap().view(), &sub_demo).unwrap();
    let acc = classifier::accuracy(&rescored, &sub.labels);
    check(acc == 1.0, format!("re-scoring the retained set gives {acc}"))?;

    let v = variance_report(&[("whole", x.view()), ("retained", xs.view())]).unwrap();
    let (whole, kept) = (v.variants[0].mean, v.variants[1].mean);
    let detail = format!(
        "retained {}/{} ({:.1}%); re-score 1.0; mean feature variance retained {kept:.6} vs whole {whole:.6}",
        report.retained_ids.len(),
        data.len(),
        100.0 * report.retention_rate
    );
    check(kept <= whole, detail.clone())?;
    Ok(detail)
}

fn criterion_12(first_json: &Option<String>) -> Outcome {
    let first = first_json.as_ref().ok_or("criterion 10 did not produce metrics")?;
    let (_, second) = end_to_end(0.8);
    check(first.as_bytes() == second.as_bytes(), "metrics JSON differs between identical runs")?;
    Ok(format!("{} bytes identical", first.len()))
}

fn report(line: &mut Vec<String>, failures: &mut Vec<usize>, n: usize, outcome: std::thread::Result<Outcome>, took: Duration) {
    let (status, detail) = match outcome {
        Ok(Ok(d)) => ("PASS", d),
        Ok(Err(d)) => ("FAIL", d),
        Err(p) => ("FAIL", format!("panicked: {}", p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())),
    };
    if status == "FAIL" {
        failures.push(n);
    }
    let text = format!("acceptance criterion {n:>2}: {status}  {detail}  [{took:.2?}]");
    writeln!(std::io::stderr(), "{text}").ok();
    line.push(text);
}

#[test]
fn acceptance_criteria() {
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    let property: [(usize, fn() -> Outcome); 9] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
    ];
    let suite = Instant::now();
    for (n, f) in property {
        let t = Instant::now();
        let r = std::panic::catch_unwind(f);
        report(&mut lines, &mut failures, n, r, t.elapsed());
    }
    let suite_time = suite.elapsed();
    let budget = if suite_time < PROPERTY_BUDGET { "PASS" } else { "FAIL" };
    writeln!(std::io::stderr(), "acceptance property suite time: {budget}  {suite_time:.1?} (< 60 s)").ok();
    if suite_time >= PROPERTY_BUDGET {
        failures.push(0);
    }

    let mut first_json = None;
    let t = Instant::now();
    let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| criterion_10(&mut first_json)));
    report(&mut lines, &mut failures, 10, r, t.elapsed());
    let t = Instant::now();
    report(&mut lines, &mut failures, 11, std::panic::catch_unwind(criterion_11), t.elapsed());
    let t = Instant::now();
    let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| criterion_12(&first_json)));
    report(&mut lines, &mut failures, 12, r, t.elapsed());

    assert!(failures.is_empty(), "failed acceptance criteria: {failures:?}\n{}", lines.join("\n"));
}

#[test]
fn reduced_atlas_dimensions() {
    let dims: Vec<usize> = reduced_atlases().iter().map(|a| a.n_rois).collect();
    assert_eq!(dims, vec![30, 20, 20]);
    let data = synthetic_dataset(20, 0.8, 1);
    assert_eq!(data.features_of(AtlasId::CC).unwrap().len_of(Axis(1)), 435);
}
