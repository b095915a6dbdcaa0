//! Acceptance run: one PASS/FAIL line per criterion with its runtime.
//! Exits nonzero when any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use cfsl::cluster::{bipartition, max_cross_similarity, SimilarityMatrix};
use cfsl::config::{ExperimentConfig, Variant};
use cfsl::experiment::{run_experiment, simulate, simulate_with_state, RunOutput};
use cfsl::net::{
    channel_gain, compute_time, data_rate, db_to_linear, device_timing, edge_round_time, global_round_time,
    upload_time, DeadlinePolicy, DeviceRadio, EdgeConfig, LinkParams,
};
use cfsl::orchestrator::{AggregationLevel, Simulation, Termination};
use cfsl::ssl::{check_selector, device_from_batches, pseudo_label};
use common::{
    brute_force_bipartitions, config_with, gradient_fd_error, labels_of, load_config, rand_index, random_batch,
    random_model, reference_fedavg, rng,
};
use rand::Rng;
use serde_json::Value;

type Verdict = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn read(name: &str) -> String {
    std::fs::read_to_string(common::config_path(name)).unwrap()
}

fn rel_err(got: f64, want: f64) -> f64 {
    if want == 0.0 {
        got.abs()
    } else {
        ((got - want) / want).abs()
    }
}

// 1 ------------------------------------------------------------------------

fn latency_formulas() -> Verdict {
    const TOL: f64 = 1e-12;
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/latency_oracle.json");
    let cases: Vec<Value> = serde_json::from_str(&std::fs::read_to_string(path).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    ensure(cases.len() == 20, format!("expected 20 oracle cases, found {}", cases.len()))?;
    let f = |v: &Value, k: &str| v[k].as_f64().unwrap_or_else(|| panic!("field {k}"));
    let mut worst = 0.0f64;
    let mut check = |what: &str, i: usize, got: f64, want: f64| -> Result<(), String> {
        let e = rel_err(got, want);
        worst = worst.max(e);
        ensure(e <= TOL, format!("case {i}: {what} {got} vs oracle {want} (rel {e:.2e})"))
    };
    for (i, c) in cases.iter().enumerate() {
        let g0 = db_to_linear(f(c, "g0_db"));
        check("g0", i, g0, f(c, "g0"))?;
        let q = c["subchannels"].as_u64().unwrap() as usize;
        let epochs = c["epochs"].as_u64().unwrap() as usize;
        let bits = f(c, "model_bits");
        let edge = EdgeConfig {
            edge_id: 0,
            bandwidth_hz: f(c, "bandwidth_hz"),
            subchannels: q,
            cloud_rate_bps: f(c, "cloud_rate_bps"),
            deadline: DeadlinePolicy::MedianMultiple(2.0),
        };
        let link = LinkParams {
            g0,
            d0: f(c, "d0"),
            n0: f(c, "n0"),
            cycles_per_sample: f(c, "cycles_per_sample"),
            epochs,
            model_bits: bits,
        };
        let mut per_edge = Vec::new();
        for e in c["edges"].as_array().unwrap() {
            let mut totals = Vec::new();
            for d in e["devices"].as_array().unwrap() {
                let samples = d["samples"].as_u64().unwrap() as usize;
                let gain = channel_gain(f(d, "distance_m"), g0, link.d0).map_err(|e| e.to_string())?;
                check("gain", i, gain, f(d, "gain"))?;
                let rate = data_rate(1.0 / q as f64, edge.bandwidth_hz, gain, f(d, "power_w"), link.n0)
                    .map_err(|e| e.to_string())?;
                check("rate", i, rate, f(d, "rate"))?;
                let cmp = compute_time(epochs, samples, link.cycles_per_sample, f(d, "cpu_hz")).map_err(|e| e.to_string())?;
                check("compute time", i, cmp, f(d, "compute_s"))?;
                let up = upload_time(bits, rate).map_err(|e| e.to_string())?;
                check("upload time", i, up, f(d, "upload_s"))?;
                let radio = DeviceRadio {
                    device_id: 0,
                    cpu_hz: f(d, "cpu_hz"),
                    tx_power_w: f(d, "power_w"),
                    distance_m: f(d, "distance_m"),
                    edge_id: 0,
                };
                let t = device_timing(&radio, &edge, &link, samples, 1.0).map_err(|e| e.to_string())?;
                check("device time", i, t.total(), f(d, "total_s"))?;
                totals.push(t.total());
            }
            let (edge_time, idle) = edge_round_time(&totals);
            ensure(!idle, "edge with devices reported idle")?;
            check("edge round time", i, edge_time, f(e, "edge_s"))?;
            let cloud = upload_time(bits, edge.cloud_rate_bps).map_err(|e| e.to_string())?;
            check("cloud upload", i, cloud, f(e, "cloud_s"))?;
            per_edge.push((edge_time, cloud));
        }
        check("global round time", i, global_round_time(&per_edge), f(c, "round_s"))?;
    }
    Ok(format!("20 cases, worst relative error {worst:.1e} (limit {TOL:.0e})"))
}

// 2 ------------------------------------------------------------------------

fn gradients() -> Verdict {
    const TOL: f64 = 1e-4;
    let mut r = rng(2);
    let mut worst = [0.0f64; 2];
    for (slot, family) in ["logistic", "mlp"].iter().enumerate() {
        for i in 0..50 {
            let dim = r.random_range(1..6);
            let classes = r.random_range(2..5);
            let hidden = if slot == 0 { 0 } else { r.random_range(1..5) };
            let rows = r.random_range(1..8);
            let params = random_model(&mut r, dim, hidden, classes, 1.0);
            let batch = random_batch(&mut r, rows, dim, classes);
            let e = gradient_fd_error(&params, &batch, 1e-5, 1e-6);
            worst[slot] = worst[slot].max(e);
            ensure(e < TOL, format!("{family} instance {i}: relative error {e:.2e}"))?;
        }
    }
    Ok(format!(
        "50 logistic + 50 mlp instances, worst relative error {:.1e} / {:.1e} (limit {TOL:.0e})",
        worst[0], worst[1]
    ))
}

// 3 ------------------------------------------------------------------------

fn clustering_recovery() -> Verdict {
    let seeds = 0..5u64;
    let mut split_rounds = Vec::new();
    for seed in seeds.clone() {
        let mut cfg = load_config("recovery.ini");
        cfg.run.seed = seed;
        let mut sim = Simulation::from_config(&cfg).map_err(|e| e.to_string())?;
        let truth: Vec<usize> = sim.devices.iter().map(|d| d.distribution_id).collect();
        let mut split = None;
        while sim.termination().is_none() && split.is_none() {
            let out = sim.run_round().map_err(|e| e.to_string())?;
            split = out.events.into_iter().find(|e| e["type"] == "split");
        }
        let split = split.ok_or(format!("seed {seed}: no split in {} rounds", sim.round))?;
        let first: Vec<usize> = serde_json::from_value(split["groups"][0].clone()).map_err(|e| e.to_string())?;
        let ri = rand_index(&labels_of(8, &first), &truth);
        ensure(ri == 1.0, format!("seed {seed}: first split {} has Rand index {ri}", split["groups"]))?;
        split_rounds.push(sim.round);
    }
    let control_text = read("recovery.ini").replace("distributions = 2", "distributions = 1");
    for seed in seeds {
        let mut cfg = config_with(&control_text, "");
        cfg.run.seed = seed;
        let out = simulate(&cfg, "control").map_err(|e| e.to_string())?;
        ensure(
            out.events.iter().all(|e| e["type"] != "split"),
            format!("seed {seed}: control run split"),
        )?;
    }
    Ok(format!(
        "5/5 seeds exact (first split in rounds {split_rounds:?}); 1-distribution control never split in 30 rounds"
    ))
}

// 4 ------------------------------------------------------------------------

fn bipartition_oracle() -> Verdict {
    let mut r = rng(4);
    for case in 0..200 {
        let n = r.random_range(2..=8);
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                values[i * n + j] = r.random_range(-1.0..=1.0);
            }
        }
        let sim = SimilarityMatrix::from_values((0..n).collect(), values);
        let (c1, c2) = bipartition(&sim).map_err(|e| e.to_string())?;
        let (best, argmin) = brute_force_bipartitions(n, |i, j| sim.get(i, j));
        let got = max_cross_similarity(&sim, &c1, &c2);
        ensure(got == best, format!("case {case}: objective {got} vs exhaustive {best}"))?;
        ensure(argmin.contains(&c1), format!("case {case}: split {c1:?} is not an exhaustive minimiser"))?;
    }
    Ok("200 random matrices (n = 2..8) identical to exhaustive search".into())
}

// 5 and 6 ------------------------------------------------------------------

const FRACTIONS: [f64; 3] = [0.02, 0.05, 0.10];
const SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Arm {
    Cfsl,
    HflSsl,
    NoSsl,
}

/// Mean over seeds of the final-round metrics of each (arm, phi, fraction).
struct Comparison {
    test_acc: BTreeMap<(Arm, u64, usize), f64>,
    label_acc: BTreeMap<(Arm, u64, usize), f64>,
    latency: BTreeMap<(Arm, u64, usize), f64>,
}

fn phi_key(phi: f64) -> u64 {
    (phi * 100.0).round() as u64
}

fn comparison_runs() -> Result<Comparison, String> {
    let base = load_config("comparison.ini");
    let mut sums: BTreeMap<(Arm, u64, usize), [(f64, usize); 3]> = BTreeMap::new();
    let arms = [
        (Arm::Cfsl, 0.8),
        (Arm::HflSsl, 0.8),
        (Arm::NoSsl, 0.8),
        (Arm::Cfsl, 0.4),
        (Arm::HflSsl, 0.4),
    ];
    for (arm, phi) in arms {
        for (fi, &fraction) in FRACTIONS.iter().enumerate() {
            for seed in SEEDS {
                let mut cfg: ExperimentConfig = base.clone();
                cfg.run.seed = seed;
                cfg.data.labeled_fraction = fraction;
                cfg.ssl.phi = phi;
                match arm {
                    Arm::Cfsl => {}
                    Arm::HflSsl => cfg.run.variant = Variant::HflSsl,
                    Arm::NoSsl => cfg.ssl.enabled = false,
                }
                let out: RunOutput = simulate(&cfg, "cmp").map_err(|e| e.to_string())?;
                let last = out.rows.last().ok_or("empty run")?;
                let slot = sums.entry((arm, phi_key(phi), fi)).or_insert([(0.0, 0); 3]);
                slot[0].0 += last.test_acc_mean;
                slot[0].1 += 1;
                if let Some(a) = last.labeling_acc_mean {
                    slot[1].0 += a;
                    slot[1].1 += 1;
                }
                slot[2].0 += last.labeling_latency_mean;
                slot[2].1 += 1;
            }
        }
    }
    let mean = |i: usize| -> BTreeMap<(Arm, u64, usize), f64> {
        sums.iter()
            .filter(|(_, v)| v[i].1 > 0)
            .map(|(k, v)| (*k, v[i].0 / v[i].1 as f64))
            .collect()
    };
    Ok(Comparison {
        test_acc: mean(0),
        label_acc: mean(1),
        latency: mean(2),
    })
}

fn directional_accuracy(c: &Comparison) -> Verdict {
    let mut parts = Vec::new();
    for (fi, fraction) in FRACTIONS.iter().enumerate() {
        let cfsl = c.label_acc.get(&(Arm::Cfsl, 80, fi)).copied().ok_or("CFSL never labeled")?;
        let hfl = c.label_acc.get(&(Arm::HflSsl, 80, fi)).copied().ok_or("HFL-SSL never labeled")?;
        ensure(
            cfsl >= hfl + 0.10,
            format!("fraction {fraction}: CFSL labeling accuracy {cfsl:.3} < HFL-SSL {hfl:.3} + 0.10"),
        )?;
        let t_cfsl = c.test_acc[&(Arm::Cfsl, 80, fi)];
        let t_plain = c.test_acc[&(Arm::NoSsl, 80, fi)];
        ensure(
            t_cfsl >= t_plain,
            format!("fraction {fraction}: CFSL test accuracy {t_cfsl:.4} < labeled-only {t_plain:.4}"),
        )?;
        parts.push(format!("{fraction}: label {cfsl:.3} vs {hfl:.3}, test {t_cfsl:.3} vs {t_plain:.3}"));
    }
    Ok(parts.join("; "))
}

fn directional_latency(c: &Comparison) -> Verdict {
    let mut parts = Vec::new();
    for (fi, fraction) in FRACTIONS.iter().enumerate() {
        for phi in [80, 40] {
            let cfsl = c.latency[&(Arm::Cfsl, phi, fi)];
            let hfl = c.latency[&(Arm::HflSsl, phi, fi)];
            ensure(
                cfsl < hfl,
                format!("fraction {fraction}, phi 0.{phi}: CFSL latency {cfsl:.1} s not below HFL-SSL {hfl:.1} s"),
            )?;
        }
        for arm in [Arm::Cfsl, Arm::HflSsl] {
            let high = c.latency[&(arm, 80, fi)];
            let low = c.latency[&(arm, 40, fi)];
            ensure(
                high >= low,
                format!("fraction {fraction}, {arm:?}: latency at 0.8 ({high:.1} s) below latency at 0.4 ({low:.1} s)"),
            )?;
        }
        parts.push(format!(
            "{fraction}: CFSL {:.0}/{:.0} s, HFL-SSL {:.0}/{:.0} s",
            c.latency[&(Arm::Cfsl, 80, fi)],
            c.latency[&(Arm::Cfsl, 40, fi)],
            c.latency[&(Arm::HflSsl, 80, fi)],
            c.latency[&(Arm::HflSsl, 40, fi)],
        ));
    }
    Ok(format!("(phi 0.8/0.4) {}", parts.join("; ")))
}

// 7 ------------------------------------------------------------------------

fn threshold_monotonicity() -> Verdict {
    let mut r = rng(7);
    let mut accepted = [0usize; 2];
    for case in 0..100 {
        let dim = r.random_range(2..6);
        let classes = r.random_range(2..5);
        let hidden = if case % 2 == 0 { 0 } else { 3 };
        let params = random_model(&mut r, dim, hidden, classes, 3.0);
        let labeled = random_batch(&mut r, 4, dim, classes);
        let pool = random_batch(&mut r, 50, dim, classes);
        let device = device_from_batches(0, labeled, pool);
        let high = pseudo_label(&params, &device, 0.8, 0, 1).map_err(|e| e.to_string())?;
        let low = pseudo_label(&params, &device, 0.4, 0, 1).map_err(|e| e.to_string())?;
        ensure(
            high.sample_ids.iter().all(|s| low.sample_ids.contains(s)),
            format!("case {case}: a sample accepted at 0.8 was rejected at 0.4"),
        )?;
        accepted[0] += high.len();
        accepted[1] += low.len();
    }
    Ok(format!(
        "100 pairs; {} samples accepted at 0.8, {} at 0.4",
        accepted[0], accepted[1]
    ))
}

// 8 ------------------------------------------------------------------------

fn determinism() -> Verdict {
    let cfg = load_config("protocol_smoke.ini");
    ensure(cfg.topology.devices == 8 && cfg.run.rounds == 30, "smoke config is not K=8, R=30")?;
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    let sa = run_experiment(&cfg, a.path()).map_err(|e| e.to_string())?;
    let sb = run_experiment(&cfg, b.path()).map_err(|e| e.to_string())?;
    let bytes = |p: &std::path::Path| std::fs::read(p).map_err(|e| e.to_string());
    ensure(bytes(&sa.metrics_path)? == bytes(&sb.metrics_path)?, "metrics differ")?;
    ensure(bytes(&sa.events_path)? == bytes(&sb.events_path)?, "event logs differ")?;
    Ok(format!(
        "{} rounds, metrics {} B and events {} B byte-identical",
        sa.rounds,
        bytes(&sa.metrics_path)?.len(),
        bytes(&sa.events_path)?.len()
    ))
}

// 9 ------------------------------------------------------------------------

fn presplit_equivalence() -> Verdict {
    let text = read("protocol_smoke.ini").replace("[run]", "[run]\nconvergence_eps = 0");
    let cfg = config_with(&text, "[clustering]\nenabled = false\n[ssl]\nenabled = false");
    let rounds = reference_fedavg(&cfg)?;
    ensure(rounds == 30, format!("only {rounds} rounds compared"))?;
    Ok(format!("{rounds} rounds, global model bit-identical to the reference loop"))
}

// 10 -----------------------------------------------------------------------

fn constraint_audit() -> Verdict {
    let text = read("comparison.ini")
        .replace("rounds = 100", "rounds = 50")
        .replace("subchannels = 8", "subchannels = 6\nfading = true\ndeadline_kappa = 1.5");
    let cfg = config_with(&text, "");
    let mut sim = Simulation::from_config(&cfg).map_err(|e| e.to_string())?;
    let (mut drops, mut selections) = (0usize, 0usize);
    while sim.termination().is_none() {
        let out = sim.run_round().map_err(|e| e.to_string())?;
        let r = out.metrics.round;
        for s in &out.schedules {
            ensure(s.bandwidth_share() <= 1.0 + 1e-12, format!("round {r}: edge {} uses beta {}", s.edge_id, s.bandwidth_share()))?;
            drops += s.dropped.len();
        }
        let dropped: Vec<usize> = out.schedules.iter().flat_map(|s| s.dropped.iter().copied()).collect();
        for rec in &out.records {
            if let AggregationLevel::Edge(_) = rec.level {
                ensure(
                    rec.contributors.iter().all(|k| !dropped.contains(k)),
                    format!("round {r}: a dropped device was aggregated"),
                )?;
            }
        }
        for d in &out.selections {
            check_selector(d.device_id, &d.z).map_err(|e| format!("round {r}: {e}"))?;
            selections += 1;
        }
    }
    ensure(sim.round == 50, format!("audit run stopped after {} rounds", sim.round))?;
    ensure(drops > 0 && selections > 0, format!("audit saw {drops} drops and {selections} selections"))?;

    // time budget: stop at the first round whose completion reaches it
    let probe = simulate(&cfg, "probe").map_err(|e| e.to_string())?;
    let t_tot = 0.5 * (probe.rows[24].cum_time_s + probe.rows[25].cum_time_s);
    let budget = config_with(&text, &format!("[network]\nt_tot = {t_tot}"));
    let (out, _) = simulate_with_state(&budget, "budget").map_err(|e| e.to_string())?;
    ensure(out.termination == Termination::TimeBudget, format!("stopped by {}", out.termination))?;
    let n = out.rows.len();
    let (before, after) = (out.rows[n - 2].cum_time_s, out.rows[n - 1].cum_time_s);
    ensure(before < t_tot && after >= t_tot, format!("budget {t_tot} vs {before} .. {after}"))?;
    Ok(format!(
        "50 rounds, {drops} drops, {selections} selections all one-hot; budget {t_tot:.1} s stopped at round {n}"
    ))
}

// --------------------------------------------------------------------------

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, id: usize, name: &str, limit: Duration, elapsed: Duration, verdict: Verdict) {
        let (ok, detail) = match verdict {
            Ok(d) if elapsed <= limit => (true, d),
            Ok(d) => (false, format!("{d}; over the time limit")),
            Err(e) => (false, e),
        };
        if !ok {
            self.failures += 1;
        }
        println!(
            "{} {id:>2} {name}: {detail} [{:.2} s, limit {} s]",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
    }

    fn run(&mut self, id: usize, name: &str, limit_s: u64, f: impl FnOnce() -> Verdict) {
        let t = Instant::now();
        let v = f();
        self.line(id, name, Duration::from_secs(limit_s), t.elapsed(), v);
    }
}

fn main() {
    let mut report = Report { failures: 0 };
    report.run(1, "latency formulas match the high-precision oracle", 1, latency_formulas);
    report.run(2, "analytic gradients match central differences", 30, gradients);
    report.run(3, "first split recovers the distributions", 120, clustering_recovery);
    report.run(4, "bipartition equals exhaustive search", 10, bipartition_oracle);

    let t = Instant::now();
    let comparison = comparison_runs();
    let shared = t.elapsed();
    match &comparison {
        Ok(c) => {
            report.line(5, "CFSL beats HFL-SSL on labeling and matches labeled-only accuracy", Duration::from_secs(600), shared, directional_accuracy(c));
            report.line(6, "CFSL labels faster; higher threshold is slower", Duration::from_secs(600), shared, directional_latency(c));
        }
        Err(e) => {
            report.line(5, "CFSL beats HFL-SSL on labeling and matches labeled-only accuracy", Duration::from_secs(600), shared, Err(e.clone()));
            report.line(6, "CFSL labels faster; higher threshold is slower", Duration::from_secs(600), shared, Err(e.clone()));
        }
    }

    report.run(7, "higher threshold accepts a subset", 5, threshold_monotonicity);
    report.run(8, "same seed gives byte-identical outputs", 120, determinism);
    report.run(9, "unsplit run equals flat weighted averaging", 60, presplit_equivalence);
    report.run(10, "bandwidth, deadline, selector and budget constraints hold", 120, constraint_audit);

    println!("{} of 10 criteria passed", 10 - report.failures);
    if report.failures > 0 {
        std::process::exit(1);
    }
}
