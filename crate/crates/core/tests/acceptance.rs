//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::time::{Duration, Instant};

use fedpdpo_core::data::{
    generate_synthetic, partition_by_label, EncodedTriple, partition_reward_margin, MarginDistribution, PreferenceTriple,
    SyntheticSpec,
};
use fedpdpo_core::federation::{
    aggregate, local_round, AggregationWeights, ClientData, FederationConfig, FederationState, ServerState,
};
use fedpdpo_core::harness::{run_experiment, Ablation, ExperimentConfig, ExperimentSummary};
use fedpdpo_core::model::{ClientModel, LoraSet, Trainable};
use fedpdpo_core::numerics::SeededRng;
use fedpdpo_core::objectives::gradcheck::{gradcheck_pdpo, tiny_model_config};
use fedpdpo_core::objectives::{
    dpo_loss_and_grads, implicit_margin, pdpo_loss_and_grads, reward_weight_at, score_reference,
    AdaptiveScaler, LrDecayTracker, ObjectiveConfig, OptimizerConfig, OptimizerState,
};
use fedpdpo_core::theory::{preference_grid, shifted_preference_grid, McReport};

type Outcome = Result<String, String>;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < limit, format!("took {took:.1?}, limit {limit:?}"))
}

fn mc_outcome(reports: &[McReport], start: Instant, limit: Duration) -> Outcome {
    within(limit, start)?;
    let worst = reports
        .iter()
        .map(|r| (r.empirical_p - r.analytic_p).abs() / r.std_err.max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    for r in reports {
        ensure(
            r.pass,
            format!(
                "delta_er {} c {}: empirical {:.5} vs {:.5}",
                r.delta_er, r.shift, r.empirical_p, r.analytic_p
            ),
        )?;
    }
    Ok(format!("{} cells, worst deviation {worst:.2} std errs", reports.len()))
}

fn preference() -> Outcome {
    let start = Instant::now();
    let reports = preference_grid(1_000_000, 2024).map_err(e)?;
    let at_half = reports.iter().find(|r| r.delta_er == 0.5).ok_or("missing 0.5 cell")?;
    ensure((at_half.analytic_p - 0.622_459_331_201_854_6).abs() < 1e-15, "sigma(0.5) mismatch")?;
    mc_outcome(&reports, start, Duration::from_secs(30))
}

fn shifted() -> Outcome {
    let start = Instant::now();
    let reports = shifted_preference_grid(1_000_000, 2025).map_err(e)?;
    ensure(reports.len() == 9, "grid must have 9 cells")?;
    mc_outcome(&reports, start, Duration::from_secs(60))
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let report = gradcheck_pdpo(8, 1).map_err(e)?;
    within(Duration::from_secs(120), start)?;
    let groups: BTreeSet<String> = report.groups.iter().map(|g| format!("{:?}", g.group)).collect();
    ensure(groups.len() == 4, format!("only {groups:?} checked"))?;
    for g in &report.groups {
        ensure(
            g.max_rel_err < 1e-4,
            format!("{:?}: max relative error {:.2e}", g.group, g.max_rel_err),
        )?;
    }
    Ok(format!("max relative error {:.2e} over all groups", report.max_rel_err))
}

fn random_batch(rng: &mut SeededRng, n: usize) -> Vec<EncodedTriple> {
    let mut tokens = |len: usize| (0..len).map(|_| 1 + rng.below(15) as u32).collect::<Vec<_>>();
    (0..n)
        .map(|_| EncodedTriple {
            prompt: tokens(2),
            chosen: tokens(3),
            rejected: tokens(3),
        })
        .collect()
}

/// Tiny model whose policy differs from its own reference in every group.
fn drifted_pair() -> Result<(ClientModel, ClientModel), String> {
    let cfg = tiny_model_config(8);
    let reference = ClientModel::init(&cfg, 5).map_err(e)?;
    let mut policy = reference.clone();
    let mut rng = SeededRng::new(5, 99);
    for m in policy.trainable_tensors_mut(Trainable::ALL) {
        for v in m.as_mut_slice() {
            *v += 0.05 * rng.normal();
        }
    }
    Ok((policy, reference))
}

fn dpo_reduction() -> Outcome {
    let (policy, reference) = drifted_pair()?;
    let mut rng = SeededRng::new(6, 0);
    let disabled = ObjectiveConfig {
        reward_head_enabled: false,
        ..ObjectiveConfig::default()
    };
    let zero_weight = ObjectiveConfig::default();
    let beta = zero_weight.beta;
    for b in 0..100 {
        let triples = random_batch(&mut rng, 1 + b % 8);
        let scored = score_reference(&reference, &triples).map_err(e)?;
        let (want_loss, want_grads) = dpo_loss_and_grads(&policy, &scored, beta, Trainable::ALL).map_err(e)?;
        for (cfg, w_r) in [(&disabled, 0.9), (&zero_weight, 0.0)] {
            let mut scaler = AdaptiveScaler::from_config(cfg);
            let out = pdpo_loss_and_grads(&policy, &scored, cfg, &mut scaler, w_r, Trainable::ALL, &mut rng)
                .map_err(e)?;
            ensure(
                out.loss.to_bits() == want_loss.to_bits(),
                format!("batch {b}: loss {} vs {}", out.loss, want_loss),
            )?;
            let same = out
                .grads
                .tensors()
                .iter()
                .zip(want_grads.tensors())
                .all(|(x, y)| x.as_slice().iter().zip(y.as_slice()).all(|(p, q)| p.to_bits() == q.to_bits()));
            ensure(same, format!("batch {b}: gradients differ"))?;
        }
    }
    Ok("100 batches bitwise equal (reward head off and w_r = 0)".into())
}

fn reference_identity() -> Outcome {
    let cfg = tiny_model_config(8);
    let model = ClientModel::init(&cfg, 8).map_err(e)?;
    let snapshot = model.snapshot();
    let triples = random_batch(&mut SeededRng::new(8, 0), 64);
    for t in &triples {
        let d = implicit_margin(&model, &snapshot, t).map_err(e)?;
        ensure(d == 0.0, format!("implicit margin {d}"))?;
    }
    let scored = score_reference(&snapshot, &triples).map_err(e)?;
    let obj = ObjectiveConfig::default();
    let mut scaler = AdaptiveScaler::from_config(&obj);
    let mut rng = SeededRng::new(8, 1);
    let out = pdpo_loss_and_grads(&model, &scored, &obj, &mut scaler, 0.0, Trainable::ALL, &mut rng)
        .map_err(e)?;
    let err = (out.loss - std::f64::consts::LN_2).abs();
    ensure(err <= 1e-12, format!("loss {} differs from ln 2 by {err:.2e}", out.loss))?;
    Ok(format!("64 zero margins, |loss - ln 2| = {err:.1e}"))
}

fn synthetic_triples(n: usize, seed: u64) -> Result<Vec<EncodedTriple>, String> {
    Ok(random_batch(&mut SeededRng::new(seed, 3), n))
}

fn small_federation(fed: FederationConfig, sizes: &[usize]) -> Result<FederationState, String> {
    let data = sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            Ok(ClientData {
                train: synthetic_triples(n, i as u64)?,
                test: synthetic_triples(4, 50 + i as u64)?,
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    FederationState::new(fed, &tiny_model_config(8), ObjectiveConfig::default(), data).map_err(e)
}

fn fed_config(n_clients: usize, total_rounds: usize) -> FederationConfig {
    FederationConfig {
        n_clients,
        total_rounds,
        batch_size: 4,
        ..FederationConfig::default()
    }
}

fn lora_entries(l: &LoraSet) -> Vec<f64> {
    l.tensors().iter().flat_map(|m| m.as_slice().to_vec()).collect()
}

fn aggregation_algebra() -> Outcome {
    let mut single = small_federation(fed_config(1, 3), &[10])?;
    for _ in 0..3 {
        single.step_round().map_err(e)?;
        ensure(
            single.server.lora == single.clients[0].model.lora,
            format!("round {}: server differs from the only client", single.server.round),
        )?;
    }

    let st = small_federation(fed_config(2, 1), &[6, 6])?;
    let x = st.clients[0].model.lora.clone();
    let mut y = x.clone();
    for m in y.tensors_mut() {
        for v in m.as_mut_slice() {
            *v = 2.0 * v.cos() - 1.0;
        }
    }
    let (xv, yv) = (lora_entries(&x), lora_entries(&y));

    let mut equal = ServerState {
        lora: x.zeros_like(),
        round: 0,
    };
    aggregate(&mut equal, &[&x, &y], &AggregationWeights::from_sizes(&[7, 7]).map_err(e)?).map_err(e)?;
    for (i, got) in lora_entries(&equal.lora).into_iter().enumerate() {
        ensure(got == 0.5 * xv[i] + 0.5 * yv[i], format!("equal-size mean differs at entry {i}"))?;
    }

    let weights = AggregationWeights::from_sizes(&[30, 10]).map_err(e)?;
    ensure(weights.p == [0.75, 0.25], format!("weights {:?}", weights.p))?;
    let mut skewed = equal.clone();
    aggregate(&mut skewed, &[&x, &y], &weights).map_err(e)?;
    let got = lora_entries(&skewed.lora);
    let spots = [0, got.len() / 3, got.len() / 2, got.len() - 1];
    for &i in &spots {
        let want = 0.75 * xv[i] + 0.25 * yv[i];
        ensure((got[i] - want).abs() <= 1e-15, format!("entry {i}: {} vs {want}", got[i]))?;
    }
    Ok("single client exact over 3 rounds; 2-client mean exact; 3:1 spot entries within 1e-15".into())
}

fn freeze_discipline() -> Outcome {
    let mut st = small_federation(fed_config(3, 5), &[8, 10, 12])?;
    let backbone = st.clients[0].model.backbone_checksum();
    for _ in 0..5 {
        st.step_round().map_err(e)?;
        for c in &st.clients {
            ensure(c.model.backbone_checksum() == backbone, format!("client {} backbone moved", c.id))?;
        }
    }

    // Phase 1 alone (LoRA step size 0) must not touch LoRA, and phase 2
    // alone must not touch the personalized modules.
    for (eta_h, eta_w, phase) in [(1e-2, 0.0, 1), (0.0, 1e-2, 2)] {
        let fed = FederationConfig {
            eta_h,
            eta_w,
            ..fed_config(1, 1)
        };
        let mut st = small_federation(fed.clone(), &[12])?;
        let obj = st.objective.clone();
        let w_r = reward_weight_at(&obj, 0, 1).map_err(e)?;
        let c = &mut st.clients[0];
        let (lora, personal) = (c.model.lora_checksum(), c.model.personalized_checksum());
        local_round(c, 1, w_r, &fed, &obj).map_err(e)?;
        let (lora_moved, personal_moved) = (
            c.model.lora_checksum() != lora,
            c.model.personalized_checksum() != personal,
        );
        match phase {
            1 => ensure(!lora_moved && personal_moved, "LoRA changed during phase 1")?,
            _ => ensure(lora_moved && !personal_moved, "personalized modules changed during phase 2")?,
        }
    }
    Ok("backbone constant over 5 rounds x 3 clients; each phase freezes the other group".into())
}

fn partition_properties() -> Outcome {
    let spec = SyntheticSpec {
        n_samples: 1000,
        margin: MarginDistribution::Uniform { low: 0.0, high: 6.0 },
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec, 13).map_err(e)?;
    let margin = |i: usize| data[i].margin().expect("synthetic triples carry rewards");
    let plan = partition_reward_margin(&data, 3, 0.9, 13).map_err(e)?;
    ensure(plan == partition_reward_margin(&data, 3, 0.9, 13).map_err(e)?, "plan not deterministic")?;

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); 3];
    for (i, &c) in plan.assignment.iter().enumerate() {
        members[c].push(i);
    }
    let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
    ensure(sizes == [334, 333, 333], format!("shard sizes {sizes:?}"))?;
    for c in 0..2 {
        let lowest = members[c].iter().map(|&i| margin(i)).fold(f64::INFINITY, f64::min);
        let highest = members[c + 1].iter().map(|&i| margin(i)).fold(f64::NEG_INFINITY, f64::max);
        ensure(lowest >= highest, format!("shard {c} min {lowest} < shard {} max {highest}", c + 1))?;
    }
    covers(&plan.clients.iter().map(|s| (&s.train, &s.test)).collect::<Vec<_>>(), data.len())?;

    let tagged: Vec<PreferenceTriple> = data
        .iter()
        .enumerate()
        .map(|(i, t)| PreferenceTriple {
            domain_tag: Some(["a", "b", "c", "d"][i % 4].to_string()),
            ..t.clone()
        })
        .collect();
    let groups = BTreeMap::from([("a".into(), 0), ("b".into(), 1), ("c".into(), 1), ("d".into(), 2)]);
    let by_label = partition_by_label(&tagged, &groups, 0.9, 13).map_err(e)?;
    covers(&by_label.clients.iter().map(|s| (&s.train, &s.test)).collect::<Vec<_>>(), data.len())?;
    Ok(format!("shards {sizes:?} with non-increasing margins; both plans cover 1000 samples disjointly"))
}

fn covers(splits: &[(&Vec<usize>, &Vec<usize>)], n: usize) -> Result<(), String> {
    let mut seen = BTreeSet::new();
    for (train, test) in splits {
        for &i in train.iter().chain(test.iter()) {
            ensure(seen.insert(i), format!("sample {i} assigned twice"))?;
        }
    }
    ensure(seen.len() == n && seen.iter().all(|&i| i < n), "plan does not cover the corpus")
}

/// Three clients, 600 synthetic triples split by reward margin, 10 rounds.
fn desk_config(dir: &Path) -> ExperimentConfig {
    ExperimentConfig {
        name: "desk".into(),
        seeds: SEEDS.to_vec(),
        output_dir: Some(dir.to_path_buf()),
        ..ExperimentConfig::default()
    }
}

struct Shared {
    full: Option<ExperimentSummary>,
    full_dir: tempfile::TempDir,
}

fn learning_smoke(shared: &mut Shared) -> Outcome {
    let start = Instant::now();
    let cfg = desk_config(shared.full_dir.path());
    ensure(
        cfg.federation.n_clients == 3 && cfg.federation.total_rounds == 10 && cfg.federation.deterministic_mode,
        "desk config drifted",
    )?;
    let summary = run_experiment(&cfg).map_err(e)?;
    let took = start.elapsed();
    shared.full = Some(summary.clone());
    ensure(took < Duration::from_secs(600), format!("took {took:.1?}"))?;
    let per_seed: Vec<String> = summary
        .seeds
        .iter()
        .map(|s| format!("{}: {:.3}->{:.3}", s.seed, s.first_round_accuracy, s.mean_accuracy))
        .collect();
    let detail = format!(
        "mean {:.4} (std {:.4}); per seed first->final [{}]; {took:.1?}",
        summary.mean_accuracy,
        summary.std_accuracy,
        per_seed.join(", ")
    );
    ensure(summary.mean_accuracy >= 0.90, format!("mean accuracy below 0.90: {detail}"))?;
    for s in &summary.seeds {
        ensure(
            s.mean_accuracy >= s.first_round_accuracy,
            format!("seed {} final below first round: {detail}", s.seed),
        )?;
    }
    Ok(detail)
}

fn ablation_ordering(shared: &Shared) -> Outcome {
    let full = shared.full.as_ref().ok_or("criterion 9 run did not complete")?;
    let mut means = HashMap::new();
    for ablation in [Ablation::NoBottleneck, Ablation::NoRewardHead] {
        let cfg = ExperimentConfig {
            ablation,
            output_dir: None,
            ..desk_config(Path::new("."))
        };
        means.insert(ablation, run_experiment(&cfg).map_err(e)?.mean_accuracy);
    }
    let (a1, a2, a3) = (means[&Ablation::NoBottleneck], means[&Ablation::NoRewardHead], full.mean_accuracy);
    let detail = format!("A1 {a1:.4}, A2 {a2:.4}, A3 {a3:.4}");
    ensure(a3 >= a2, format!("A3 < A2: {detail}"))?;
    Ok(detail)
}

fn determinism(shared: &Shared) -> Outcome {
    let dir = tempfile::tempdir().map_err(e)?;
    run_experiment(&desk_config(dir.path())).map_err(e)?;
    let mut bytes = 0;
    for s in SEEDS {
        let rel = format!("seed_{s}/metrics.jsonl");
        let a = std::fs::read(shared.full_dir.path().join(&rel)).map_err(e)?;
        let b = std::fs::read(dir.path().join(&rel)).map_err(e)?;
        ensure(!a.is_empty() && a == b, format!("{rel} differs between runs"))?;
        bytes += a.len();
    }
    Ok(format!("5 metrics files byte-identical ({bytes} bytes)"))
}

fn lr_decay_rule() -> Outcome {
    let run = |losses: &[f64]| -> Result<Vec<f64>, String> {
        let mut state = OptimizerState::new(1e-4, OptimizerConfig::default()).map_err(e)?;
        let mut tracker = LrDecayTracker::default();
        Ok(losses.iter().map(|&l| tracker.observe(&mut state, l)).collect())
    };
    let trace = run(&[1.0, 0.9, 1.1, 1.2])?;
    let want = [1e-4, 1e-4, 8e-5, 6.4e-5];
    for (got, want) in trace.iter().zip(want) {
        ensure((got - want).abs() <= 1e-12 * want, format!("trace {trace:?}"))?;
    }
    let rising: Vec<f64> = (0..60).map(|i| 1.0 + i as f64).collect();
    let long = run(&rising)?;
    let last = *long.last().expect("non-empty");
    ensure(last == 1e-6, format!("extended trace ends at {last}"))?;
    ensure(long.windows(2).all(|w| w[1] <= w[0]), "rate increased")?;
    Ok(format!("trace {trace:?}; floor 1e-6 reached"))
}

fn main() {
    let mut shared = Shared {
        full: None,
        full_dir: tempfile::tempdir().expect("temp dir"),
    };
    let mut results: Vec<(usize, &str, Outcome, Duration)> = Vec::new();
    let mut record = |id: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = f();
        let took = start.elapsed();
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d.as_str()),
            Err(d) => ("FAIL", d.as_str()),
        };
        println!("{tag} [{id:>2}] {name}: {detail} ({:.2}s)", took.as_secs_f64());
        results.push((id, name, outcome, took));
    };
    record(1, "Gumbel preference Monte Carlo", &mut preference);
    record(2, "shifted preference Monte Carlo", &mut shifted);
    record(3, "gradient oracle", &mut gradient_oracle);
    record(4, "DPO reduction", &mut dpo_reduction);
    record(5, "reference identity", &mut reference_identity);
    record(6, "aggregation algebra", &mut aggregation_algebra);
    record(7, "freeze discipline", &mut freeze_discipline);
    record(8, "partition properties", &mut partition_properties);
    record(9, "desk-scale learning", &mut || learning_smoke(&mut shared));
    record(10, "ablation ordering", &mut || ablation_ordering(&shared));
    record(11, "determinism", &mut || determinism(&shared));
    record(12, "LR decay rule", &mut lr_decay_rule);

    let failed = results.iter().filter(|r| r.2.is_err()).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
