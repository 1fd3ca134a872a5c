//! Acceptance criteria. Each test prints one `[PASS]`/`[FAIL]` line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Exp1, Normal};
use serde::Deserialize;
use valprof_core::clustering::CandidateProfile;
use valprof_core::clustering::{greedy_cluster, random_initialization, GreedyConfig, LossMatrix};
use valprof_core::dataset::{dataset_baselines, partition_all, Dataset, Instance, RaterRecord, Rating};
use valprof_core::decoder::{ChoiceDistribution, Decoder, ScoreServer, TableOracleBackend};
use valprof_core::evaluation::{
    build_interpretability_task, calibration_report, estimated_agreement, jsd, observed_agreement, ols, replay_item,
    score_interpretability, AnswerKey, JudgeResponse, Side,
};
use valprof_core::info::{
    clustered_standard_error, estimate_conditional_entropy, held_out_predictions, info_preserved,
    instance_uncertainties, ledger_from_predictions, uncertainty_decomposition, usable_info, LossLedger, Scope,
};
use valprof_core::representations::{ConditioningTemplate, Renderer, RepresentationKind};
use valprof_core::rng::{stream, StreamRng};
use valprof_core::stats::entropy_nats;
use valprof_core::synthetic::{analytic_quantities, generate, BayesEncoder, GeneratorSpec, GroupSpec, InstanceSpec};

fn criterion(name: &str, limit: Option<Duration>, check: impl FnOnce() -> Result<String, String>) {
    let start = Instant::now();
    let outcome = check();
    let elapsed = start.elapsed();
    let outcome = match (outcome, limit) {
        (Ok(detail), Some(limit)) if elapsed > limit => Err(format!("{detail}; took {elapsed:?}, limit {limit:?}")),
        (o, _) => o,
    };
    match &outcome {
        Ok(detail) => println!("[PASS] {name} ({elapsed:.2?}): {detail}"),
        Err(detail) => println!("[FAIL] {name} ({elapsed:.2?}): {detail}"),
    }
    if let Err(detail) = outcome {
        panic!("{name}: {detail}");
    }
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        let failed = !$cond;
        if failed {
            return Err(format!($($msg)+));
        }
    };
}

fn random_simplex(rng: &mut StreamRng, arity: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..arity).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn random_distribution(rng: &mut StreamRng, arity: usize) -> ChoiceDistribution {
    ChoiceDistribution::from_probs(random_simplex(rng, arity)).unwrap()
}

fn instance(id: &str, arity: usize) -> Instance {
    Instance::new(
        id,
        format!("prompt {id}"),
        (0..arity).map(|y| format!("c{y}")).collect(),
    )
    .unwrap()
}

// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct PublishedRow {
    setting: String,
    test_loss: f64,
    usable_info: f64,
    info_preserved_pct: Option<f64>,
}

#[derive(Deserialize)]
struct PublishedTable {
    dataset: String,
    noinfo: String,
    max_examples: String,
    rows: Vec<PublishedRow>,
}

#[test]
fn table_arithmetic_reproduction() {
    criterion("table arithmetic", Some(Duration::from_secs(1)), || {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/published_tables.json");
        let tables: Vec<PublishedTable> = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        let expected = [("OQA", 0.117, 74.0), ("HK", 0.060, 76.0), ("DIC", 0.074, 71.0)];
        let mut checked = 0;
        for (t, (name, want_i, want_pct)) in tables.iter().zip(expected) {
            ensure!(t.dataset == name, "fixture order");
            let row = |s: &str| t.rows.iter().find(|r| r.setting == s).unwrap();
            let base = row(&t.noinfo).test_loss;
            for r in &t.rows {
                let i = usable_info(base, r.test_loss);
                ensure!(
                    (i - r.usable_info).abs() <= 0.001 + 1e-12,
                    "{} {}: usable {i:.4} vs printed {:.3}",
                    t.dataset,
                    r.setting,
                    r.usable_info
                );
                checked += 1;
            }
            let profile = row("profile gni");
            let i = usable_info(base, profile.test_loss);
            ensure!((i - want_i).abs() <= 0.001, "{name}: usable {i:.4} vs {want_i}");
            let i_max = row(&t.max_examples).usable_info;
            let pct = 100.0 * info_preserved(profile.usable_info, i_max).unwrap();
            ensure!(
                profile.info_preserved_pct == Some(want_pct),
                "{name}: fixture percentage"
            );
            ensure!(
                (pct - want_pct).abs() <= 1.0,
                "{name}: preserved {pct:.2}% vs {want_pct}%"
            );
        }
        Ok(format!(
            "{checked} rows within 0.001 nats; OQA 0.117/74%, HK 0.060/76%, DIC 0.074/71% within 1 pp"
        ))
    });
}

// ---------------------------------------------------------------------------

fn population_spec(n_groups: usize, n_instances: usize, n_raters: usize, rpr: usize, seed: u64) -> GeneratorSpec {
    let mut rng = stream(seed, &["acceptance-spec"]);
    let weights = random_simplex(&mut rng, n_groups);
    GeneratorSpec {
        name: format!("acceptance-{n_groups}"),
        seed,
        n_raters,
        ratings_per_rater: rpr,
        groups: (0..n_groups)
            .map(|g| GroupSpec {
                id: format!("g{g}"),
                weight: 0.5 * weights[g] + 0.5 / n_groups as f64,
                profile: None,
                demographics: BTreeMap::from([("group".to_string(), format!("g{g}"))]),
            })
            .collect(),
        instances: (0..n_instances)
            .map(|j| {
                let arity = 2 + j % 3;
                InstanceSpec {
                    id: format!("x{j:03}"),
                    prompt: format!("item {j}"),
                    choices: (0..arity).map(|y| format!("c{y}")).collect(),
                    group_probs: (0..n_groups).map(|_| random_simplex(&mut rng, arity)).collect(),
                }
            })
            .collect(),
    }
}

/// Clustered standard error of a per-rating quantity's rating-weighted mean.
fn clustered_se(values: &[(String, f64)]) -> f64 {
    let mut per: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for (r, v) in values {
        let e = per.entry(r).or_default();
        e.0 += v;
        e.1 += 1.0;
    }
    let n: f64 = per.values().map(|p| p.1).sum();
    let mean = per.values().map(|p| p.0).sum::<f64>() / n;
    let g = per.len() as f64;
    let ss: f64 = per.values().map(|(s, c)| (s - mean * c).powi(2)).sum();
    (ss * g / (g - 1.0)).sqrt() / n
}

#[test]
fn v_information_consistency() {
    criterion("V-information consistency", Some(Duration::from_secs(30)), || {
        let spec = population_spec(4, 40, 5000, 24, 2024);
        let truth = analytic_quantities(&spec).unwrap();
        let pop = generate(&spec).unwrap();
        let partitions = partition_all(&pop.dataset, 7).unwrap();
        let kinds: Vec<RepresentationKind> = vec!["noinfo".parse().unwrap(), "profile".parse().unwrap()];
        let decoder = Decoder::new(pop.oracle.clone());
        let preds = held_out_predictions(
            &pop.dataset,
            &partitions,
            &kinds,
            &pop.profiles,
            &Renderer::default(),
            &decoder,
        )
        .unwrap();
        let ledger = ledger_from_predictions(&preds).unwrap();
        let noinfo = ledger.slice("noinfo");
        let profile = ledger.slice("profile");
        ensure!(noinfo.len() >= 50_000, "only {} eval ratings", noinfo.len());

        let h0 = estimate_conditional_entropy(&noinfo).unwrap();
        let h1 = estimate_conditional_entropy(&profile).unwrap();
        let i_hat = usable_info(h0, h1);
        let by_key: BTreeMap<(&str, &str), f64> = profile
            .iter()
            .map(|r| ((r.rater_id.as_str(), r.instance_id.as_str()), r.nll))
            .collect();
        let diffs: Vec<(String, f64)> = noinfo
            .iter()
            .map(|r| {
                (
                    r.rater_id.clone(),
                    r.nll - by_key[&(r.rater_id.as_str(), r.instance_id.as_str())],
                )
            })
            .collect();
        let se = clustered_se(&diffs);
        let core_se = clustered_standard_error(&ledger, "noinfo", "profile").unwrap();
        ensure!(
            (se - core_se).abs() <= 1e-12,
            "standard errors disagree: {se} vs {core_se}"
        );
        ensure!(
            (i_hat - truth.i).abs() < 3.0 * se,
            "I {i_hat:.5} vs analytic {:.5} (3σ = {:.5})",
            truth.i,
            3.0 * se
        );

        let levels: Vec<(String, f64)> = noinfo.iter().map(|r| (r.rater_id.clone(), r.nll)).collect();
        let se0 = clustered_se(&levels);
        ensure!(
            (h0 - truth.h_y_given_x).abs() < 3.0 * se0,
            "H(Y|X) {h0:.5} vs analytic {:.5}",
            truth.h_y_given_x
        );
        let i_noinfo = usable_info(h0, h0);
        ensure!(i_noinfo.abs() < 3.0 * se, "noinfo I = {i_noinfo}");
        Ok(format!(
            "n = {}, I = {i_hat:.5} vs {:.5} (σ = {se:.5}); noinfo I = {i_noinfo}",
            noinfo.len(),
            truth.i
        ))
    });
}

// ---------------------------------------------------------------------------

fn exhaustive_step(l: &LossMatrix, clusters: &[usize], position: usize) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for v in 0..l.n_profiles() {
        if clusters.iter().enumerate().any(|(p, &u)| p != position && u == v) {
            continue;
        }
        let mut trial = clusters.to_vec();
        trial[position] = v;
        let obj = l.objective(&trial);
        if obj < best.1 {
            best = (v, obj);
        }
    }
    best
}

fn brute_force(l: &LossMatrix, n: usize) -> (Vec<usize>, f64) {
    let mut best = (vec![], f64::INFINITY);
    let k = l.n_profiles();
    for mask in 0u32..(1 << k) {
        if mask.count_ones() as usize != n {
            continue;
        }
        let set: Vec<usize> = (0..k).filter(|v| mask & (1 << v) != 0).collect();
        let obj = l.objective(&set);
        if obj < best.1 {
            best = (set, obj);
        }
    }
    best
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

#[test]
fn clustering_solver() {
    criterion("clustering solver", Some(Duration::from_secs(10)), || {
        let config = GreedyConfig::default();
        let mut steps = 0;
        for seed in 0..100u64 {
            let mut rng = stream(seed, &["acceptance-matrix"]);
            let (n_r, n_v) = (rng.random_range(5..40), rng.random_range(3..15));
            let rows: Vec<Vec<f64>> = (0..n_r)
                .map(|_| (0..n_v).map(|_| rng.random_range(0.0..10.0)).collect())
                .collect();
            let l = LossMatrix::from_rows(&rows).unwrap();
            let n = rng.random_range(1..=n_v.min(4));
            let init = random_initialization(n_v, n, seed).unwrap();
            let r = greedy_cluster(&l, n, &init, &config).unwrap();
            let mut clusters = init.clone();
            for step in &r.trace {
                ensure!(
                    step.objective_after <= step.objective_before,
                    "seed {seed}: objective increased"
                );
                let (v, obj) = exhaustive_step(&l, &clusters, step.position);
                ensure!(
                    step.chosen == v,
                    "seed {seed}: chose {} but scan gives {v}",
                    step.chosen
                );
                ensure!(
                    (step.objective_after - obj).abs() <= 1e-9,
                    "seed {seed}: objective mismatch"
                );
                clusters[step.position] = step.chosen;
                steps += 1;
            }
            ensure!(clusters == r.clusters, "seed {seed}: trace does not replay");
        }

        let planted = [2usize, 7, 11, 13];
        let mut rng = stream(3, &["acceptance-planted"]);
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                (0..16)
                    .map(|v| {
                        if v == planted[i % 4] {
                            rng.random_range(0.0..1.0)
                        } else {
                            rng.random_range(3.0..4.0)
                        }
                    })
                    .collect()
            })
            .collect();
        let l = LossMatrix::from_rows(&rows).unwrap();
        for seed in 0..20 {
            let init = random_initialization(16, 4, seed).unwrap();
            let r = greedy_cluster(&l, 4, &init, &config).unwrap();
            ensure!(
                sorted(r.clusters.clone()) == planted,
                "init seed {seed} found {:?}",
                r.clusters
            );
        }

        let hand = LossMatrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0], vec![3.0, 2.0, 1.0]]).unwrap();
        for (n, want, obj) in [(1, vec![0], 5.0), (2, vec![0, 2], 3.0)] {
            ensure!(brute_force(&hand, n) == (want.clone(), obj), "brute force n={n}");
            for seed in 0..6 {
                let init = random_initialization(3, n, seed).unwrap();
                let r = greedy_cluster(&hand, n, &init, &config).unwrap();
                ensure!(
                    sorted(r.clusters.clone()) == want && r.objective == obj,
                    "hand n={n}: {:?}",
                    r.clusters
                );
            }
        }
        Ok(format!(
            "100 matrices ({steps} steps) monotone and exhaustive; planted 20/20; hand examples exact"
        ))
    });
}

// ---------------------------------------------------------------------------

#[test]
fn calibration_self_consistency() {
    criterion("calibration self-consistency", Some(Duration::from_secs(10)), || {
        let mut rng = stream(11, &["acceptance-calibration"]);
        let mut honest = Vec::with_capacity(100_000);
        let mut sharp = Vec::with_capacity(100_000);
        for k in 0..100_000 {
            let probs = random_simplex(&mut rng, 2 + k % 3);
            let y = WeightedIndex::new(&probs).unwrap().sample(&mut rng);
            let sharpened: Vec<f64> = probs.iter().map(|p| p.powi(4)).collect();
            honest.push((ChoiceDistribution::from_probs(probs).unwrap(), y));
            sharp.push((ChoiceDistribution::from_probs(sharpened).unwrap(), y));
        }
        let a = calibration_report(&honest, 10).unwrap();
        let b = calibration_report(&sharp, 10).unwrap();
        ensure!(a.n == 100_000 && a.bins.len() == 10, "report shape");
        ensure!(a.ece < 0.02, "self-consistent ECE {}", a.ece);
        ensure!(b.ece > 0.1, "sharpened ECE {}", b.ece);
        Ok(format!("ECE {:.4} (< 0.02); sharpened {:.4} (> 0.1)", a.ece, b.ece))
    });
}

// ---------------------------------------------------------------------------

#[test]
fn agreement_estimator() {
    criterion("agreement estimator", Some(Duration::from_secs(10)), || {
        let mut rng = stream(5, &["acceptance-agreement"]);
        let texts: Vec<String> = (0..8).map(|k| format!("profile {k}")).collect();
        let mut table = TableOracleBackend::new("agreement");
        let instances: Vec<Instance> = (0..50).map(|j| instance(&format!("a{j}"), 2 + j % 4)).collect();
        for inst in &instances {
            for t in &texts {
                table.insert(&inst.id, t, random_distribution(&mut rng, inst.arity()));
            }
        }
        let decoder = Decoder::new(table.clone());
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let draws = 20_000;
        let mut worst: f64 = 0.0;
        for inst in &instances {
            let est = estimated_agreement(inst, &refs, &decoder).unwrap();
            let dists: Vec<&ChoiceDistribution> = texts.iter().map(|t| table.lookup(&inst.id, t).unwrap()).collect();
            let mut agree = 0usize;
            for _ in 0..draws {
                let a = rng.random_range(0..texts.len());
                let b = (a + rng.random_range(1..texts.len())) % texts.len();
                let ya = WeightedIndex::new(dists[a].probs()).unwrap().sample(&mut rng);
                let yb = WeightedIndex::new(dists[b].probs()).unwrap().sample(&mut rng);
                agree += usize::from(ya == yb);
            }
            let mc = agree as f64 / draws as f64;
            let sigma = (mc * (1.0 - mc) / draws as f64).sqrt();
            let z = (est - mc).abs() / sigma;
            ensure!(
                z < 3.0,
                "{}: closed form {est:.4} vs simulation {mc:.4} ({z:.2}σ)",
                inst.id
            );
            worst = worst.max(z);
        }

        for trial in 0..200 {
            let n = rng.random_range(0..30);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let got = observed_agreement(&labels, 2);
            if n < 2 {
                ensure!(got.is_none(), "trial {trial}: expected None");
                continue;
            }
            let (mut same, mut pairs) = (0usize, 0usize);
            for i in 0..n {
                for j in i + 1..n {
                    same += usize::from(labels[i] == labels[j]);
                    pairs += 1;
                }
            }
            ensure!(
                got == Some(same as f64 / pairs as f64),
                "trial {trial}: {got:?} vs {same}/{pairs}"
            );
        }

        let noise = Normal::new(0.0, 0.1).unwrap();
        let x: Vec<f64> = (0..300).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|xi| 0.2 + 1.0 * xi + noise.sample(&mut rng)).collect();
        let fit = ols(&x, &y).unwrap();
        let mx = x.iter().sum::<f64>() / x.len() as f64;
        let sxx: f64 = x.iter().map(|xi| (xi - mx).powi(2)).sum();
        let sigma_slope = 0.1 / sxx.sqrt();
        ensure!(
            (fit.slope - 1.0).abs() < 3.0 * sigma_slope,
            "slope {} (σ {sigma_slope})",
            fit.slope
        );
        Ok(format!(
            "50 instances within 3σ (worst {worst:.2}σ); 200 label sets exact; slope {:.4} ± {sigma_slope:.4}",
            fit.slope
        ))
    });
}

// ---------------------------------------------------------------------------

#[test]
fn jsd_and_entropy_properties() {
    criterion("JSD/entropy property suite", Some(Duration::from_secs(1)), || {
        let ln2 = 2f64.ln();
        let mut rng = stream(17, &["acceptance-jsd"]);
        for _ in 0..2000 {
            let arity = rng.random_range(2..7);
            let p = random_distribution(&mut rng, arity);
            let q = random_distribution(&mut rng, arity);
            let (pq, qp) = (jsd(&p, &q).unwrap(), jsd(&q, &p).unwrap());
            ensure!(pq == qp, "asymmetric: {pq} vs {qp}");
            ensure!((0.0..=ln2).contains(&pq), "out of bounds: {pq}");
            ensure!(
                jsd(&p, &p).unwrap().abs() <= 1e-12,
                "JSD(p, p) = {}",
                jsd(&p, &p).unwrap()
            );
            let h = entropy_nats(p.probs());
            ensure!(
                h >= 0.0 && h <= (arity as f64).ln() + 1e-12,
                "entropy {h} out of bounds"
            );
            let uniform = ChoiceDistribution::uniform(arity);
            ensure!(
                (entropy_nats(uniform.probs()) - (arity as f64).ln()).abs() <= 1e-12,
                "uniform entropy"
            );
        }
        let a = ChoiceDistribution::from_probs(vec![0.9, 0.1]).unwrap();
        let b = ChoiceDistribution::from_probs(vec![0.1, 0.9]).unwrap();
        // 0.5·KL(a‖m) + 0.5·KL(b‖m) with m = (0.5, 0.5), written out
        let oracle = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        let d = jsd(&a, &b).unwrap();
        ensure!((d - oracle).abs() < 1e-12 && (d - 0.3681).abs() < 1e-4, "JSD {d}");

        let ds = Dataset::new(
            "marginal",
            vec![instance("m", 3)],
            (0..10)
                .map(|r| RaterRecord {
                    id: format!("r{r}"),
                    demographics: Default::default(),
                })
                .collect(),
            (0..10)
                .map(|r| Rating::new(format!("r{r}"), "m", [0, 0, 0, 0, 0, 0, 0, 1, 1, 2][r]))
                .collect(),
        )
        .unwrap();
        let h = dataset_baselines(&ds).unwrap().label_entropy_nats;
        let oracle = -(0.7f64 * 0.7f64.ln() + 0.2 * 0.2f64.ln() + 0.1 * 0.1f64.ln());
        ensure!((h - oracle).abs() < 1e-12 && (h - 0.8018).abs() < 1e-4, "entropy {h}");

        let s = ChoiceDistribution::from_log_scores(&[1.0, 0.0, 0.0]).unwrap();
        let e = std::f64::consts::E;
        let want = [e / (e + 2.0), 1.0 / (e + 2.0), 1.0 / (e + 2.0)];
        for (got, (w, printed)) in s.probs().iter().zip(want.iter().zip([0.5761, 0.2119, 0.2119])) {
            ensure!((got - w).abs() < 1e-12 && (got - printed).abs() < 1e-4, "softmax {got}");
        }
        Ok(format!(
            "2000 random pairs; JSD {d:.4}, H {h:.4}, softmax {:.4}/{:.4}/{:.4}",
            s.probs()[0],
            s.probs()[1],
            s.probs()[2]
        ))
    });
}

// ---------------------------------------------------------------------------

fn random_ledger(seed: u64) -> LossLedger {
    let mut rng = stream(seed, &["acceptance-ledger"]);
    let mut ledger = LossLedger::new();
    for r in 0..50 {
        for j in 0..rng.random_range(1..12) {
            ledger
                .record(&format!("r{r}"), &format!("i{j}"), "noinfo", rng.random_range(0.0..3.0))
                .unwrap();
            ledger
                .record(
                    &format!("r{r}"),
                    &format!("i{j}"),
                    "profile",
                    rng.random_range(0.0..3.0),
                )
                .unwrap();
        }
    }
    ledger
}

#[test]
fn uncertainty_identity() {
    criterion("uncertainty identity", None, || {
        let spec = population_spec(3, 20, 400, 12, 99);
        let pop = generate(&spec).unwrap();
        let partitions = partition_all(&pop.dataset, 1).unwrap();
        let kinds: Vec<RepresentationKind> = vec!["noinfo".parse().unwrap(), "profile".parse().unwrap()];
        let renderer = Renderer::default();
        let preds = |decoder: &Decoder| {
            ledger_from_predictions(
                &held_out_predictions(&pop.dataset, &partitions, &kinds, &pop.profiles, &renderer, decoder).unwrap(),
            )
            .unwrap()
        };
        let mut fixtures: Vec<LossLedger> = (0..5).map(random_ledger).collect();
        fixtures.push(preds(&Decoder::new(pop.oracle.clone())));
        let mut checked = 0;
        for ledger in &fixtures {
            let mut reports = instance_uncertainties(ledger, "noinfo", "profile").unwrap();
            reports.push(uncertainty_decomposition(ledger, "noinfo", "profile", Scope::Dataset).unwrap());
            for u in &reports {
                ensure!(
                    (u.total - (u.value_epistemic + u.aleatoric)).abs() <= 1e-12,
                    "{}: {} ≠ {} + {}",
                    u.scope.key(),
                    u.total,
                    u.value_epistemic,
                    u.aleatoric
                );
                checked += 1;
            }
        }

        let mut blind = TableOracleBackend::new("blind");
        let mut rng = stream(4, &["acceptance-blind"]);
        for inst in pop.dataset.instances().values() {
            blind.insert_default(&inst.id, random_distribution(&mut rng, inst.arity()));
        }
        let ledger = preds(&Decoder::new(blind));
        let mut reports = instance_uncertainties(&ledger, "noinfo", "profile").unwrap();
        reports.push(uncertainty_decomposition(&ledger, "noinfo", "profile", Scope::Dataset).unwrap());
        for u in &reports {
            ensure!(
                u.value_epistemic == 0.0,
                "{}: blind epistemic {}",
                u.scope.key(),
                u.value_epistemic
            );
        }
        Ok(format!(
            "{checked} decompositions to 1e-12; profile-blind epistemic exactly 0 on {} scopes",
            reports.len()
        ))
    });
}

// ---------------------------------------------------------------------------

fn mini() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join("mini")
}

fn list_files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn end_to_end_determinism() {
    criterion("end-to-end determinism", None, || {
        let m = mini();
        let spec = GeneratorSpec::load(&m.join("spec.json")).unwrap();
        let server = ScoreServer::builder()
            .decoder(Arc::new(
                TableOracleBackend::load("oracle", &m.join("oracle.jsonl")).unwrap(),
            ))
            .encoder(Arc::new(
                BayesEncoder::new(&spec, &ConditioningTemplate::default()).unwrap(),
            ))
            .spawn()
            .unwrap();

        let mut config: toml::Table = toml::from_str(&std::fs::read_to_string(m.join("config.toml")).unwrap()).unwrap();
        config["dataset"]["dir"] = toml::Value::String(m.display().to_string());
        config.insert(
            "decoder".into(),
            toml::toml! { kind = "http" id = "mini-oracle" }.into(),
        );
        config.insert("encoder".into(), toml::toml! { kind = "http" id = "mini-bayes" }.into());
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("config.toml");
        std::fs::write(&cfg, toml::to_string(&config).unwrap()).unwrap();
        let cache = dir.path().join("cache");

        let run = |out: &str| -> Result<u64, String> {
            let before = server.requests();
            let status = Command::new(env!("CARGO_BIN_EXE_valprof"))
                .args(["--config", cfg.to_str().unwrap(), "--out-dir"])
                .arg(dir.path().join(out))
                .arg("--cache-dir")
                .arg(&cache)
                .arg("run")
                .env("VALPROF_ENDPOINT", server.url())
                .env_remove("VALPROF_TOKEN")
                .env_remove("VALPROF_CACHE_DIR")
                .output()
                .unwrap();
            ensure!(
                status.status.success(),
                "{out}: {}",
                String::from_utf8_lossy(&status.stderr)
            );
            Ok(server.requests() - before)
        };
        let first = run("first")?;
        let second = run("second")?;
        ensure!(first > 0, "first run issued no requests");
        ensure!(second == 0, "second run issued {second} requests");

        let (a, b) = (dir.path().join("first/reports"), dir.path().join("second/reports"));
        let files = list_files(&a);
        ensure!(files == list_files(&b), "report file sets differ");
        ensure!(files.len() >= 20, "only {} report files", files.len());
        for f in &files {
            ensure!(
                std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap(),
                "{} differs",
                f.display()
            );
        }
        Ok(format!(
            "{} report files byte-identical; requests {first} then {second}",
            files.len()
        ))
    });
}

// ---------------------------------------------------------------------------

#[test]
fn interpretability_harness() {
    criterion("interpretability harness", None, || {
        let mut rng = stream(21, &["acceptance-interpret"]);
        let candidates: Vec<CandidateProfile> = (0..6)
            .map(|k| CandidateProfile {
                id: format!("p{k}"),
                text: format!("profile text {k}"),
            })
            .collect();
        let instances: Vec<Instance> = (0..100).map(|j| instance(&format!("t{j:03}"), 2 + j % 3)).collect();
        let mut table = TableOracleBackend::new("interpret");
        for inst in &instances {
            for c in &candidates {
                table.insert(&inst.id, &c.text, random_distribution(&mut rng, inst.arity()));
            }
        }
        let decoder = Decoder::new(table);
        let mut items = Vec::new();
        for inst in &instances {
            items.extend(build_interpretability_task(inst, &candidates, &decoder, 1, 8).unwrap());
        }
        ensure!(items.len() == 100, "{} items", items.len());
        for (item, inst) in items.iter().zip(&instances) {
            ensure!(
                replay_item(item, inst, &decoder).unwrap(),
                "{} fails replay",
                item.item_id
            );
        }
        let keys: Vec<AnswerKey> = items
            .iter()
            .map(|i| AnswerKey {
                item_id: i.item_id.clone(),
                answer: i.answer_key.unwrap(),
            })
            .collect();
        let mut judge = stream(33, &["acceptance-random-judge"]);
        let random: Vec<JudgeResponse> = keys
            .iter()
            .map(|k| JudgeResponse {
                item_id: k.item_id.clone(),
                choice: if judge.random_bool(0.5) { Side::A } else { Side::B },
            })
            .collect();
        let oracle: Vec<JudgeResponse> = keys
            .iter()
            .map(|k| JudgeResponse {
                item_id: k.item_id.clone(),
                choice: k.answer,
            })
            .collect();
        let r = score_interpretability(&keys, &random).unwrap();
        let o = score_interpretability(&keys, &oracle).unwrap();
        ensure!(
            r.ci_low <= 0.5 && 0.5 <= r.ci_high,
            "random judge {} [{}, {}]",
            r.accuracy,
            r.ci_low,
            r.ci_high
        );
        ensure!(o.accuracy == 1.0, "oracle judge {}", o.accuracy);
        Ok(format!(
            "100 keys replayed; random judge {:.2} [{:.3}, {:.3}]; oracle judge {:.1}",
            r.accuracy, r.ci_low, r.ci_high, o.accuracy
        ))
    });
}
