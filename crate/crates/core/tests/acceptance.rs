// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance report: one PASS/FAIL line per criterion, with the measured
//! numbers. Runs as a plain binary (`harness = false`) so the lines always
//! appear in `cargo test` output.
//!
//! By default the process exits 0 once every criterion has been evaluated,
//! so the rest of the workspace suite still runs; set
//! `COTSTEER_ACCEPTANCE_STRICT=1` to exit 1 when any criterion fails.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use cotsteer::activation_io::{decode, encode, ActivationRecord, Label};
use cotsteer::numerics::{cosine_similarity, gaussian_sample, l2_distance};
use cotsteer::optimizer::{
    adaptive_step, lemma1_upper_bound, lemma2_lower_bound, linear_probe, objective, objective_gradient,
    optimize_hidden_state, OptimizerConfig,
};
use cotsteer::metrics::ExperimentReport;
use cotsteer::pipeline::{HarnessConfig, Method, Testbed};
use cotsteer::probe::Probe;
use cotsteer::{Error, RngStream, Site, Vector};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn check(name: &str, f: impl FnOnce() -> cotsteer::Result<Outcome>) -> bool {
    let start = Instant::now();
    let (pass, detail) = match f() {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    println!("{} {name}: {detail} [{secs:.1} s]", if pass { "PASS" } else { "FAIL" });
    pass
}

fn within(start: Instant, limit_secs: u64) -> bool {
    start.elapsed() < Duration::from_secs(limit_secs)
}

fn rel_error(a: &Vector, b: &Vector) -> cotsteer::Result<f64> {
    let scale = a.norm().max(b.norm()).max(1e-12);
    Ok(a.sub(b)?.norm() / scale)
}

fn central_difference(h: &Vector, f: impl Fn(&Vector) -> cotsteer::Result<f64>) -> cotsteer::Result<Vector> {
    const STEP: f64 = 1e-5;
    let mut x = h.as_slice().to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + STEP;
        let up = f(&Vector::new(x.clone())?)?;
        x[i] = orig - STEP;
        let down = f(&Vector::new(x.clone())?)?;
        x[i] = orig;
        g.push((up - down) / (2.0 * STEP));
    }
    Vector::new(g)
}

fn gradients() -> cotsteer::Result<Outcome> {
    let start = Instant::now();
    let mut rng = RngStream::new(11);
    let mut worst = 0.0f64;
    for dim in [4, 64, 512] {
        for _ in 0..200 {
            let p = Probe::random(dim, 64, &mut rng)?;
            let h = gaussian_sample(dim, &mut rng)?;
            let h0 = gaussian_sample(dim, &mut rng)?;
            let lambda = rng.uniform();
            let fd = central_difference(&h, |x| p.log_forward(x))?;
            worst = worst.max(rel_error(&p.input_gradient(&h)?, &fd)?);
            let fd = central_difference(&h, |x| objective(&p, x, &h0, lambda))?;
            worst = worst.max(rel_error(&objective_gradient(&p, &h, &h0, lambda)?, &fd)?);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(outcome(
        worst < 1e-4 && secs < 10.0,
        format!("worst relative error {worst:.2e} over 2 × 600 instances (< 1e-4), {secs:.1} s (< 10 s)"),
    ))
}

/// Walks unregularized ascent paths on random MLP probes and, at every step
/// whose upper bound is active, sets λ to 0.9× that bound.
fn upper_bound_alignment() -> cotsteer::Result<Outcome> {
    const EPS_C: f64 = 0.1;
    let start = Instant::now();
    let mut rng = RngStream::new(21);
    let (mut cases, mut aligned, mut worst) = (0usize, 0usize, 1.0f64);
    while cases < 500 {
        let p = Probe::random(16, 32, &mut rng)?;
        let h0 = gaussian_sample(16, &mut rng)?;
        let f0 = p.forward(&h0)?;
        let mut h = h0.clone();
        for _ in 0..50 {
            let grad_star = p.input_gradient(&h)?;
            if let Some(ub) = lemma1_upper_bound(&h.sub(&h0)?, &grad_star, EPS_C)? {
                let grad_reg = objective_gradient(&p, &h, &h0, 0.9 * ub)?;
                let c = cosine_similarity(&grad_star, &grad_reg)?;
                worst = worst.min(c);
                aligned += usize::from(c >= 1.0 - EPS_C);
                cases += 1;
                if cases == 500 {
                    break;
                }
            }
            let f = p.forward(&h)?;
            h = h.axpy(adaptive_step(0.1, 0.99, f, f0, 1e-8).max(0.05), &grad_star)?;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(outcome(
        aligned == cases && secs < 5.0,
        format!("{aligned}/{cases} active steps with cosine ≥ {:.1} at 0.9× bound (worst {worst:.4}), {secs:.2} s (< 5 s)", 1.0 - EPS_C),
    ))
}

fn lower_bound_boundaries() -> cotsteer::Result<Outcome> {
    let mut rng = RngStream::new(31);
    let (mut zero_ok, mut disc_ok, mut worst) = (0, 0, 0.0f64);
    for _ in 0..100 {
        let h0 = gaussian_sample(8, &mut rng)?;
        let h = h0.add(&gaussian_sample(8, &mut rng)?)?;
        let g = gaussian_sample(8, &mut rng)?;
        let c = rng.uniform();
        if lemma2_lower_bound(&h, &h0, &g, c, 0.0)? == 0.0 {
            zero_ok += 1;
        }
        let s = g.norm() + h.sub(&h0)?.norm() * c;
        let closed = s / h.sub(&h0)?.scale(2.0)?.norm();
        let err = (lemma2_lower_bound(&h, &h0, &g, c, s * s)? - closed).abs();
        worst = worst.max(err);
        disc_ok += usize::from(err <= 1e-9);
    }
    Ok(outcome(
        zero_ok == 100 && disc_ok == 100,
        format!("ε_d = 0 gives exactly 0 in {zero_ok}/100; zero discriminant matches S/D in {disc_ok}/100 (worst {worst:.1e}, tol 1e-9)"),
    ))
}

fn convergence() -> cotsteer::Result<Outcome> {
    let start = Instant::now();
    let p = linear_probe(&[4.0, 0.0], 0.0)?;
    let mut rng = RngStream::new(41);
    let mut starts = Vec::new();
    while starts.len() < 100 {
        let h0 = gaussian_sample(2, &mut rng)?;
        if p.forward(&h0)? < 0.5 {
            starts.push(h0);
        }
    }
    let rate = |noise_enabled: bool| -> cotsteer::Result<usize> {
        let cfg = OptimizerConfig { lambda: 0.0, noise_enabled, ..OptimizerConfig::default() };
        let mut hits = 0;
        for (i, h0) in starts.iter().enumerate() {
            let res = optimize_hidden_state(&p, h0, &cfg, &mut RngStream::new(i as u64))?;
            hits += usize::from(p.forward(&res.h_star)? > cfg.tau);
        }
        Ok(hits)
    };
    let quiet = rate(false)?;
    let noisy = rate(true)?;
    Ok(outcome(
        quiet == 100 && noisy >= 95 && within(start, 30),
        format!("noise off {quiet}/100 (need 100), noise on {noisy}/100 (need ≥ 95)"),
    ))
}

fn lambda_trend() -> cotsteer::Result<Outcome> {
    let p = linear_probe(&[1.0, 0.5], 0.0)?;
    let h0 = Vector::new(vec![-0.4, 0.1])?;
    let grid = [0.0, 0.01, 0.1, 1.0, 5.0];
    let mut dist = Vec::new();
    let mut score = Vec::new();
    for lambda in grid {
        let cfg = OptimizerConfig { lambda, ..OptimizerConfig::default() };
        let res = optimize_hidden_state(&p, &h0, &cfg, &mut RngStream::new(0))?;
        dist.push(l2_distance(&res.h_star, &h0)?);
        score.push(p.forward(&res.h_star)?);
    }
    let d_ok = dist.windows(2).all(|w| w[1] <= w[0]);
    let f_ok = score[2..].windows(2).all(|w| w[1] <= w[0]);
    let fmt = |xs: &[f64]| xs.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ");
    Ok(outcome(
        d_ok && f_ok,
        format!("λ ∈ {grid:?}: distance [{}], f [{}]", fmt(&dist), fmt(&score)),
    ))
}

fn records_round_trip() -> cotsteer::Result<Outcome> {
    let mut rng = RngStream::new(51);
    let dim = 24;
    let sites = [Site::Attn, Site::Mlp, Site::IntLayer];
    let labels = [Label::Negative, Label::Unlabeled, Label::Positive];
    let records: Vec<_> = (0..1000)
        .map(|_| ActivationRecord {
            layer: rng.below(64) as u16,
            site: sites[rng.below(3)],
            label: labels[rng.below(3)],
            position: rng.below(4096) as u32,
            values: (0..dim).map(|_| rng.standard_normal() as f32).collect(),
        })
        .collect();
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("r.actrec");
    cotsteer::activation_io::write_records(&path, "acceptance", &records)?;
    let bytes = std::fs::read(&path)?;
    let back = cotsteer::activation_io::read_records(&path)?;
    let identical = back.records == records && encode(&back.model_tag, &back.records)? == bytes;

    let header = 7 + 4 + 4 + 2 + "acceptance".len() + 4;
    type Fixture = (&'static str, Vec<u8>, fn(&Error) -> bool);
    let mut fixtures: Vec<Fixture> = Vec::new();
    let mut b = bytes.clone();
    b[0] = b'X';
    fixtures.push(("bad magic", b, |e| matches!(e, Error::BadMagic { .. })));
    let mut b = bytes.clone();
    b[7] = 9;
    fixtures.push(("version", b, |e| matches!(e, Error::VersionMismatch { .. })));
    fixtures.push(("short header", bytes[..12].to_vec(), |e| matches!(e, Error::TruncatedHeader)));
    fixtures.push(("cut record", bytes[..bytes.len() - 5].to_vec(), |e| matches!(e, Error::TruncatedRecord(999))));
    let mut b = bytes.clone();
    b[header + 2] = 7;
    fixtures.push(("site code", b, |e| matches!(e, Error::InvalidEnum { field: "site", .. })));
    let mut b = bytes.clone();
    b[header + 3] = 3;
    fixtures.push(("label code", b, |e| matches!(e, Error::InvalidEnum { field: "label", .. })));
    let mut b = bytes.clone();
    b[header + 8..header + 12].copy_from_slice(&7u32.to_le_bytes());
    fixtures.push(("record dim", b, |e| matches!(e, Error::DimensionMismatch { .. })));

    let mut wrong = Vec::new();
    for (name, b, expected) in &fixtures {
        match decode(b) {
            Err(e) if expected(&e) => {}
            other => wrong.push(format!("{name}: {:?}", other.err())),
        }
    }
    Ok(outcome(
        identical && wrong.is_empty(),
        format!(
            "1000 records byte-identical: {identical}; {}/{} corruption fixtures raised their error{}",
            fixtures.len() - wrong.len(),
            fixtures.len(),
            if wrong.is_empty() { String::new() } else { format!(" ({})", wrong.join("; ")) }
        ),
    ))
}

struct Testbench {
    bed: Testbed,
    build_secs: f64,
    none: OnceLock<ExperimentReport>,
    optimize: OnceLock<ExperimentReport>,
}

impl Testbench {
    fn cached(&self, cell: &OnceLock<ExperimentReport>, method: Method) -> cotsteer::Result<ExperimentReport> {
        if let Some(r) = cell.get() {
            return Ok(r.clone());
        }
        let r = self.bed.run(method, &OptimizerConfig::default(), 1.0)?.report;
        Ok(cell.get_or_init(|| r).clone())
    }

    fn none(&self) -> cotsteer::Result<ExperimentReport> {
        self.cached(&self.none, Method::None)
    }

    fn optimize(&self) -> cotsteer::Result<ExperimentReport> {
        self.cached(&self.optimize, Method::Optimize)
    }
}

fn accuracy_pct(acc: f64) -> String {
    format!("{:.0}%", acc * 100.0)
}

fn end_to_end(t: &Testbench) -> cotsteer::Result<Outcome> {
    let start = Instant::now();
    let none = t.none()?;
    let steered = t.optimize()?;
    let secs = t.build_secs + start.elapsed().as_secs_f64();
    let f1: Vec<String> = t
        .bed
        .sites
        .iter()
        .filter_map(|k| t.bed.bank.get(k).map(|e| format!("L{} F1 {:.2}", k.0, e.metrics.f1)))
        .collect();
    let pass = none.stepwise_rate < 0.3
        && steered.stepwise_rate > 0.7
        && steered.accuracy > none.accuracy
        && steered.perplexity < 2.0 * none.perplexity
        && secs < 900.0;
    Ok(outcome(
        pass,
        format!(
            "stepwise NONE {} (< 30%) / OPTIMIZE {} (> 70%); accuracy {} → {} (must rise); perplexity {:.2} → {:.2} (< 2×); probes [{}]; {secs:.0} s total",
            accuracy_pct(none.stepwise_rate),
            accuracy_pct(steered.stepwise_rate),
            accuracy_pct(none.accuracy),
            accuracy_pct(steered.accuracy),
            none.perplexity,
            steered.perplexity,
            f1.join(", ")
        ),
    ))
}

fn baseline_ordering(t: &Testbench) -> cotsteer::Result<Outcome> {
    let opt = OptimizerConfig::default();
    let none = t.none()?.accuracy;
    let ours = t.optimize()?.accuracy;
    let mut pass = true;
    let mut parts = vec![format!("NONE {}", accuracy_pct(none)), format!("OPTIMIZE {}", accuracy_pct(ours))];
    for m in [Method::CDim, Method::CPca, Method::CLr, Method::PSvm, Method::Da] {
        let acc = t.bed.run(m, &opt, 1.0)?.report.accuracy;
        pass &= ours >= acc && acc >= none - 0.02;
        parts.push(format!("{m} {}", accuracy_pct(acc)));
    }
    Ok(outcome(pass, format!("accuracy {}", parts.join(", "))))
}

fn tau_sweep(t: &Testbench) -> cotsteer::Result<Outcome> {
    let acc = |tau: f64| -> cotsteer::Result<f64> {
        if tau == OptimizerConfig::default().tau {
            return Ok(t.optimize()?.accuracy);
        }
        let opt = OptimizerConfig { tau, ..OptimizerConfig::default() };
        Ok(t.bed.run(Method::Optimize, &opt, 1.0)?.report.accuracy)
    };
    let (lo, mid, hi) = (acc(0.5)?, acc(0.9)?, acc(0.99)?);
    Ok(outcome(
        (mid - hi).abs() <= 0.01 && mid > lo,
        format!(
            "accuracy τ=0.5 {} / τ=0.9 {} / τ=0.99 {} (need |0.9 − 0.99| ≤ 1 pt and 0.9 > 0.5)",
            accuracy_pct(lo),
            accuracy_pct(mid),
            accuracy_pct(hi)
        ),
    ))
}

fn strength_collapse(t: &Testbench) -> cotsteer::Result<Outcome> {
    let none = t.none()?;
    let strong = t.bed.run(Method::CLr, &OptimizerConfig::default(), 8.0)?.report;
    Ok(outcome(
        strong.accuracy < none.accuracy && strong.fluency < none.fluency,
        format!(
            "C-LR ×8 accuracy {} vs NONE {}, fluency {:.3} vs {:.3} (both must drop)",
            accuracy_pct(strong.accuracy),
            accuracy_pct(none.accuracy),
            strong.fluency,
            none.fluency
        ),
    ))
}

fn main() {
    // `cargo test -- --list` and filters are passed through; only listing matters here.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    println!("acceptance criteria");
    let mut results = vec![
        check("gradient correctness", gradients),
        check("λ upper bound keeps gradients aligned", upper_bound_alignment),
        check("λ lower bound boundary cases", lower_bound_boundaries),
        check("optimizer convergence on linear probe", convergence),
        check("λ trade-off trend", lambda_trend),
    ];

    let start = Instant::now();
    let bench = Testbed::build(HarnessConfig::default()).map(|bed| Testbench {
        bed,
        build_secs: start.elapsed().as_secs_f64(),
        none: OnceLock::new(),
        optimize: OnceLock::new(),
    });
    let bench = &bench;
    let with_bench = |f: fn(&Testbench) -> cotsteer::Result<Outcome>| {
        move || match bench {
            Ok(t) => f(t),
            Err(e) => Ok(outcome(false, format!("testbed build failed: {e}"))),
        }
    };
    results.push(check("end-to-end mode elicitation", with_bench(end_to_end)));
    results.push(check("baseline ordering", with_bench(baseline_ordering)));
    results.push(check("τ sweep trend", with_bench(tau_sweep)));
    results.push(check("strength-collapse contrast", with_bench(strength_collapse)));
    results.push(check("activation file round trip", records_round_trip));

    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed of {}", results.len() - failed, results.len());
    if failed > 0 && std::env::var("COTSTEER_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
