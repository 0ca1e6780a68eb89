//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line straight to stdout so the verdicts show up without `--nocapture`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seval_core::costmodel::{
    build_dataset, latency_key, peak_memory, sample_valid_indices, Dataset, DeviceProfile, OracleOptions,
};
use seval_core::evaluator::{default_grad_check, fit, Evaluator, FitConfig, FitOutcome};
use seval_core::graphir::{canonicalize, elaborate, infer_shapes, CompGraph, GNode, MacroConfig, TensorShape};
use seval_core::metrics::{kendall_tau, pair_counts, pair_counts_brute, TauVariant};
use seval_core::netstring::{graph_to_string, Traversal};
use seval_core::search::{
    recheck_feasible, regularized_evolution, threshold_from_dataset, Constraint, ConstraintSpec, Evaluators,
    FitnessKind, SearchConfig, SearchOutcome, Statistic,
};
use seval_core::searchspace::{ArchSpec, SpaceId, SssArch, TssArch};

const SAMPLE: usize = 2000;
const SAMPLE_SEED: u64 = 2024;

fn verdict(n: u32, pass: bool, detail: &str) {
    let line = format!("criterion {n}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

fn indices() -> &'static Vec<usize> {
    static I: OnceLock<Vec<usize>> = OnceLock::new();
    I.get_or_init(|| sample_valid_indices(SpaceId::Tss, SAMPLE, SAMPLE_SEED).unwrap())
}

/// Latency noise fixed at 0.05 for every device, accuracy noise 3 points.
fn joint_dataset() -> &'static Dataset {
    static D: OnceLock<Dataset> = OnceLock::new();
    D.get_or_init(|| {
        let opts = OracleOptions {
            accuracy_noise: 3.0,
            latency_noise: Some(0.05),
            ..OracleOptions::default()
        };
        build_dataset(SpaceId::Tss, indices(), &DeviceProfile::builtin(), &opts, SAMPLE_SEED).unwrap()
    })
}

/// Same architectures, each device at its own profile noise.
fn device_dataset() -> &'static Dataset {
    static D: OnceLock<Dataset> = OnceLock::new();
    D.get_or_init(|| {
        build_dataset(SpaceId::Tss, indices(), &DeviceProfile::builtin(), &OracleOptions::default(), SAMPLE_SEED)
            .unwrap()
    })
}

fn test_tau(out: &FitOutcome, j: usize) -> f64 {
    let pred: Vec<f64> = out.test_pred.iter().map(|p| p[j]).collect();
    let truth: Vec<f64> = out.test_true.iter().map(|t| t[j]).collect();
    kendall_tau(&pred, &truth).unwrap().value
}

fn train(ds: &Dataset, objectives: &[&str], d_model: usize) -> FitOutcome {
    let mut cfg = FitConfig::new(objectives);
    if d_model != cfg.model.d_model {
        cfg.model.d_model = d_model;
        cfg.model.ffn_dim = 4 * d_model;
    }
    let started = Instant::now();
    let out = fit(ds, &cfg).unwrap();
    eprintln!(
        "trained {objectives:?} d_model={d_model} in {:.0}s, test n={}",
        started.elapsed().as_secs_f64(),
        out.test_true.len()
    );
    out
}

fn accuracy_memory() -> &'static FitOutcome {
    static M: OnceLock<FitOutcome> = OnceLock::new();
    M.get_or_init(|| train(joint_dataset(), &["accuracy", "memory"], 64))
}

fn accuracy_latency() -> &'static FitOutcome {
    static M: OnceLock<FitOutcome> = OnceLock::new();
    M.get_or_init(|| train(joint_dataset(), &["accuracy", "latency"], 64))
}

#[test]
fn criterion_1_hardware_metrics_rank_better_than_accuracy() {
    let am = accuracy_memory();
    let al = accuracy_latency();
    assert_eq!(am.test_true.len(), 200);
    let (acc_m, mem) = (test_tau(am, 0), test_tau(am, 1));
    let (acc_l, lat) = (test_tau(al, 0), test_tau(al, 1));
    let pass = mem >= 0.85 && lat >= 0.70 && acc_m.max(acc_l) < mem.min(lat);
    verdict(
        1,
        pass,
        &format!(
            "memory tau {mem:.4} (>= 0.85), latency tau {lat:.4} (>= 0.70), accuracy tau {acc_m:.4} / {acc_l:.4} (below both)"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_device_sweep() {
    let ds = device_dataset();
    let mut taus = BTreeMap::new();
    for p in DeviceProfile::builtin() {
        let key = latency_key(&p.name);
        let out = train(ds, &[key.as_str()], 64);
        taus.insert(p.name.clone(), test_tau(&out, 0));
    }
    let (min_dev, min_tau) = taus
        .iter()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(d, t)| (d.clone(), *t))
        .unwrap();
    let pass = taus.values().all(|&t| t > 0.6) && min_dev == "edgetpu";
    let listing: Vec<String> = taus.iter().map(|(d, t)| format!("{d}={t:.4}")).collect();
    verdict(
        2,
        pass,
        &format!("latency tau {} (all > 0.6, minimum {min_dev}={min_tau:.4}, expected edgetpu)", listing.join(" ")),
    );
    assert!(pass);
}

#[test]
fn criterion_3_gradient_check() {
    let r64 = default_grad_check::<f64>(0).unwrap();
    let r32 = default_grad_check::<f32>(0).unwrap();
    let pass = r64.max_rel_error < 1e-4 && r32.max_rel_error < 1e-2;
    verdict(
        3,
        pass,
        &format!(
            "f64 max rel error {:.3e} (< 1e-4), f32 {:.3e} (< 1e-2), {} coordinates",
            r64.max_rel_error, r32.max_rel_error, r64.coords_checked
        ),
    );
    assert!(pass);
}

/// Fraction of positions whose value occurs more than once.
fn tied_fraction(v: &[f64]) -> f64 {
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for x in v {
        *counts.entry(x.to_bits()).or_default() += 1;
    }
    v.iter().filter(|x| counts[&x.to_bits()] > 1).count() as f64 / v.len() as f64
}

#[test]
fn criterion_4_kendall_tau_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    let mut min_tied = f64::INFINITY;
    for _ in 0..1000 {
        let n = rng.random_range(2..=500);
        // At most 70% of n distinct levels leaves at least 30% of positions tied.
        let levels = rng.random_range(1..=(7 * n / 10).max(1));
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..n).map(|_| rng.random_range(0..levels) as f64 / 3.0).collect() };
        let (x, y) = (draw(&mut rng), draw(&mut rng));
        min_tied = min_tied.min(tied_fraction(&x)).min(tied_fraction(&y));
        let (fast, slow) = (pair_counts(&x, &y).unwrap(), pair_counts_brute(&x, &y).unwrap());
        for variant in [TauVariant::B, TauVariant::A] {
            let (a, b) = (fast.tau(variant), slow.tau(variant));
            if fast != slow || a.value.to_bits() != b.value.to_bits() || a.undefined != b.undefined {
                mismatches += 1;
            }
        }
    }
    let hand = kendall_tau(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap().value;
    let pass = mismatches == 0 && min_tied >= 0.3 && hand == 2.0 / 3.0;
    verdict(
        4,
        pass,
        &format!("{mismatches} mismatches over 1000 vectors, min tied fraction {min_tied:.2}, hand case {hand}"),
    );
    assert!(pass);
}

fn node(id: usize, op: &str, attrs: &[(&str, i64)], inputs: Vec<usize>) -> GNode {
    GNode {
        id,
        op: op.into(),
        attrs: attrs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        inputs,
        shape: TensorShape::new(0, 0, 0, 0),
    }
}

fn fixture(nodes: Vec<GNode>, input: TensorShape) -> CompGraph {
    infer_shapes(CompGraph {
        nodes,
        input_shape: input,
        param_count: 0,
    })
    .unwrap()
}

/// Explicit live set at every step, re-summed from scratch.
fn brute_force_peak(g: &CompGraph) -> u64 {
    let params = g.param_count * 4;
    let mut live: BTreeSet<usize> = BTreeSet::new();
    let mut peak = params;
    for step in 0..g.nodes.len() {
        live.insert(step);
        peak = peak.max(params + live.iter().map(|&i| g.nodes[i].shape.numel() * 4).sum::<u64>());
        live.retain(|&t| g.nodes[step + 1..].iter().any(|n| n.inputs.contains(&t)));
    }
    peak
}

#[test]
fn criterion_5_memory_fixtures() {
    let conv = |cin, cout, k| [("in_channels", cin), ("kernel", k), ("out_channels", cout), ("padding", k / 2), ("stride", 1)];
    let small = TensorShape::new(1, 3, 8, 8);
    // 8x8x8 activations are 2048 bytes; two are live at once.
    // params 216 + 64 + 90 = 370 floats.
    let chain = fixture(
        vec![
            node(0, "Conv2d", &conv(3, 8, 3), vec![]),
            node(1, "ReLU", &[], vec![0]),
            node(2, "Conv2d", &conv(8, 8, 1), vec![1]),
            node(3, "GlobalAvgPool", &[], vec![2]),
            node(4, "Linear", &[("in_features", 8), ("out_features", 10)], vec![3]),
        ],
        small,
    );
    // Both branches and their source are live together: three 2048-byte
    // tensors; params 216 + 576 + 90 = 882 floats.
    let diamond = fixture(
        vec![
            node(0, "Conv2d", &conv(3, 8, 3), vec![]),
            node(1, "Conv2d", &conv(8, 8, 3), vec![0]),
            node(2, "AvgPool2d", &[("kernel", 3), ("padding", 1), ("stride", 1)], vec![0]),
            node(3, "Add", &[], vec![1, 2]),
            node(4, "GlobalAvgPool", &[], vec![3]),
            node(5, "Linear", &[("in_features", 8), ("out_features", 10)], vec![4]),
        ],
        small,
    );
    // conv 432 + bn 32 + linear 170 params; conv and BN outputs of
    // 16x32x32 floats overlap.
    let stem = fixture(
        vec![
            node(0, "Conv2d", &conv(3, 16, 3), vec![]),
            node(1, "BatchNorm", &[], vec![0]),
            node(2, "GlobalAvgPool", &[], vec![1]),
            node(3, "Linear", &[("in_features", 16), ("out_features", 10)], vec![2]),
        ],
        TensorShape::new(1, 3, 32, 32),
    );
    let expected = [
        ("linear chain", &chain, 370 * 4 + 2 * 2048),
        ("diamond", &diamond, 882 * 4 + 3 * 2048),
        ("stem only", &stem, 634 * 4 + 2 * 16 * 32 * 32 * 4),
    ];
    let mut pass = true;
    let mut detail = Vec::new();
    for (name, g, want) in expected {
        let got = peak_memory(g);
        pass &= got == want;
        detail.push(format!("{name} {got}/{want}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = MacroConfig::default();
    let mut checked = 0;
    let mut agree = 0;
    while checked < 100 {
        let arch = seval_core::searchspace::sample(SpaceId::Tss, &mut rng);
        if let Ok(g) = elaborate(&arch, &cfg) {
            checked += 1;
            agree += usize::from(peak_memory(&g) == brute_force_peak(&g));
        }
    }
    pass &= agree == 100;
    verdict(5, pass, &format!("{}; {agree}/100 random graphs match the live-set oracle", detail.join(", ")));
    assert!(pass);
}

#[test]
fn criterion_6_exhaustive_enumeration() {
    let mut round_trip_failures = 0;
    for i in 0..15625 {
        round_trip_failures += usize::from(TssArch::decode(i).unwrap().encode() != i);
    }
    for i in 0..32768 {
        round_trip_failures += usize::from(SssArch::decode(i).unwrap().encode() != i);
    }
    let cfg = MacroConfig::default();
    let mut strings = HashSet::new();
    let mut graphs = HashSet::new();
    let mut nondeterministic = 0;
    let mut valid = 0;
    for i in 0..15625 {
        let arch = ArchSpec::decode(SpaceId::Tss, i).unwrap();
        let Ok(g) = elaborate(&arch, &cfg) else { continue };
        valid += 1;
        let s = graph_to_string(&g, Traversal::PostorderDfs).unwrap();
        let again = graph_to_string(&elaborate(&arch, &cfg).unwrap(), Traversal::PostorderDfs).unwrap();
        nondeterministic += usize::from(s != again);
        strings.insert(s.text);
        graphs.insert(canonicalize(&g).to_json());
    }
    let pass = round_trip_failures == 0 && nondeterministic == 0 && strings.len() == graphs.len();
    verdict(
        6,
        pass,
        &format!(
            "{round_trip_failures} round-trip failures over 48393 indices, {nondeterministic} unstable strings over {valid} TSS graphs, {} distinct strings vs {} distinct graphs",
            strings.len(),
            graphs.len()
        ),
    );
    assert!(pass);
}

struct SearchSetup {
    dataset: Dataset,
    memory: Evaluator,
    accuracy: Evaluator,
}

/// A 500-architecture dataset with one memory and one accuracy evaluator.
fn search_setup() -> &'static SearchSetup {
    static S: OnceLock<SearchSetup> = OnceLock::new();
    S.get_or_init(|| {
        let idx = sample_valid_indices(SpaceId::Tss, 500, 7).unwrap();
        let dataset = build_dataset(SpaceId::Tss, &idx, &DeviceProfile::builtin(), &OracleOptions::default(), 7).unwrap();
        let memory = train(&dataset, &["memory"], 64).evaluator;
        let accuracy = train(&dataset, &["accuracy"], 64).evaluator;
        SearchSetup {
            dataset,
            memory,
            accuracy,
        }
    })
}

fn timed_search(cfg: &SearchConfig, constraints: &[Constraint], ev: Evaluators<'_>) -> (SearchOutcome, f64) {
    let started = Instant::now();
    let out = regularized_evolution(cfg, constraints, ev).unwrap();
    (out, started.elapsed().as_secs_f64())
}

#[test]
fn criterion_7_constrained_search_honesty() {
    let s = search_setup();
    let c = "memory<=auto-mean".parse::<ConstraintSpec>().unwrap().resolve(Some(&s.dataset)).unwrap();
    let constraints = std::slice::from_ref(&c);
    let mut pass = true;
    let mut detail = vec![format!("threshold {:.0} bytes", c.threshold)];
    let mut ratios = Vec::new();
    for fitness in [FitnessKind::EvaluatorAccuracy, FitnessKind::SyntheticProxy] {
        let cfg = SearchConfig {
            cycles: 2000,
            fitness,
            ..SearchConfig::default()
        };
        let fitness_ev = (fitness == FitnessKind::EvaluatorAccuracy).then_some(&s.accuracy);
        let (_, free_secs) = timed_search(&cfg, &[], Evaluators { constraints: None, fitness: fitness_ev });
        let (bound, bound_secs) = timed_search(
            &cfg,
            constraints,
            Evaluators {
                constraints: Some(&s.memory),
                fitness: fitness_ev,
            },
        );
        let violations = recheck_feasible(&bound.log, SpaceId::Tss, Some(&s.memory), constraints).unwrap();
        let flagged = bound.log.feasible_count();
        let ratio = bound_secs / free_secs;
        pass &= violations.is_empty() && flagged > 0 && bound_secs < 60.0;
        ratios.push(ratio);
        detail.push(format!(
            "{fitness:?}: {}/{flagged} feasible entries hold on re-prediction, constrained {bound_secs:.2}s, unconstrained {free_secs:.3}s, ratio {ratio:.2}",
            flagged - violations.len()
        ));
    }
    // The overhead is judged against a fitness that itself costs one
    // evaluator pass per candidate.
    pass &= ratios[0] < 3.0;
    verdict(7, pass, &detail.join("; "));
    assert!(pass);
}

fn sample_std(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

#[test]
fn criterion_8_tight_constraint_variance() {
    let s = search_setup();
    let mut mem = s.dataset.column("memory").unwrap();
    mem.sort_by(f64::total_cmp);
    let rank = ((0.02 * mem.len() as f64).ceil() as usize).max(1);
    let tight = mem[rank - 1];
    let mean = threshold_from_dataset(&s.dataset, "memory", Statistic::Mean).unwrap();
    let mut runs = Vec::new();
    for threshold in [tight, mean] {
        let c = Constraint::max_allowed("memory", threshold);
        let mut best = Vec::new();
        let mut distinct = Vec::new();
        for seed in 0..10 {
            let cfg = SearchConfig {
                cycles: 2000,
                seed,
                ..SearchConfig::default()
            };
            let out = regularized_evolution(&cfg, std::slice::from_ref(&c), Evaluators {
                constraints: Some(&s.memory),
                fitness: None,
            })
            .unwrap();
            distinct.push(out.log.distinct_feasible() as f64);
            if let Some(f) = out.best_fitness {
                best.push(f);
            }
        }
        runs.push((threshold, best, distinct));
    }
    let (_, tight_best, tight_distinct) = &runs[0];
    let (_, mean_best, mean_distinct) = &runs[1];
    let enough = tight_best.len() >= 2 && mean_best.len() >= 2;
    let (sd_tight, sd_mean) = if enough {
        (sample_std(tight_best), sample_std(mean_best))
    } else {
        (f64::NAN, f64::NAN)
    };
    let pass = enough && sd_tight >= 2.0 * sd_mean && sd_tight > 0.0;
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    verdict(
        8,
        pass,
        &format!(
            "tight threshold {tight:.0}: best-fitness std {sd_tight:.4} over {} seeds with a result, {:.1} distinct feasible on average; mean threshold {mean:.0}: std {sd_mean:.4}, {:.1} distinct feasible",
            tight_best.len(),
            avg(tight_distinct),
            avg(mean_distinct)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_9_encoder_size_sweep() {
    let mut taus = vec![(64, test_tau(accuracy_memory(), 1))];
    for d in [32, 128] {
        taus.push((d, test_tau(&train(joint_dataset(), &["accuracy", "memory"], d), 1)));
    }
    taus.sort_unstable_by_key(|t| t.0);
    let pass = taus.iter().all(|&(_, t)| t >= 0.8);
    let listing: Vec<String> = taus.iter().map(|(d, t)| format!("d_model={d} {t:.4}")).collect();
    verdict(9, pass, &format!("memory tau {} (all >= 0.8)", listing.join(", ")));
    assert!(pass);
}
