// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cotsteer::activation_io::{datasets_from_records, from_dataset, read_records, summarize, write_records};
use cotsteer::metrics::{run_sweep, write_reports, ExperimentReport};
use cotsteer::optimizer::{check_bounds, OptimizerTrace};
use cotsteer::pipeline::{Method, Testbed};
use cotsteer::probe::{select_sites, train_bank, ProbeBank};
use cotsteer::synth_task::{all_sites, arithmetic_vocab, build_contrastive_sites, gen_corpus, read_corpus, write_corpus};
use cotsteer::toy_lm::{train_toy_lm, ToyModel};
use serde_json::json;

use crate::config::Settings;
use crate::manifest::RunManifest;
use crate::{
    resolve, BoundsArgs, CaptureArgs, Cli, CliError, Command, GenCorpusArgs, RunArgs, SteerArgs, SweepArgs,
    SweepParam, TrainLmArgs, TrainProbesArgs,
};

type Result<T> = std::result::Result<T, CliError>;

struct Ctx {
    root: PathBuf,
    config_path: Option<PathBuf>,
    settings: Settings,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        resolve(&self.root, p)
    }

    fn manifest(&self, command: &str) -> RunManifest {
        RunManifest::new(command, self.config_path.as_deref(), &self.root, &self.settings)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let settings = Settings::load(cli.config.as_deref())?;
    let mut ctx = Ctx {
        root: cli.artifact_root,
        config_path: cli.config,
        settings,
    };
    match cli.command {
        Command::GenCorpus(a) => gen_corpus_cmd(&mut ctx, a),
        Command::TrainLm(a) => train_lm_cmd(&mut ctx, a),
        Command::CaptureToy(a) => capture_cmd(&mut ctx, a),
        Command::TrainProbes(a) => train_probes_cmd(&mut ctx, a),
        Command::Steer(a) => steer_cmd(&mut ctx, a),
        Command::Sweep(a) => sweep_cmd(&mut ctx, a),
        Command::BoundsReport(a) => bounds_cmd(&mut ctx, a),
        Command::Validate(a) => {
            let path = ctx.path(&a.file);
            let report = cotsteer::activation_io::validate(&path)?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(cotsteer::Error::from)?);
            Ok(())
        }
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(cotsteer::Error::from)?;
        }
    }
    Ok(())
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(cotsteer::Error::MissingArtifact(path.to_path_buf()).into())
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn gen_corpus_cmd(ctx: &mut Ctx, a: GenCorpusArgs) -> Result<()> {
    let c = &mut ctx.settings.harness.corpus;
    set(&mut c.n_problems, a.n_problems);
    set(&mut c.seed, a.seed);
    set(&mut c.operand_min, a.operand_min);
    set(&mut c.operand_max, a.operand_max);
    set(&mut c.min_operands, a.min_operands);
    set(&mut c.max_operands, a.max_operands);
    set(&mut c.mode_mix, a.mode_mix);
    if c.operand_min > c.operand_max {
        return Err(CliError::Usage(format!(
            "--operand-min ({}) exceeds --operand-max ({})",
            c.operand_min, c.operand_max
        )));
    }
    if c.min_operands < 2 || c.min_operands > c.max_operands {
        return Err(CliError::Usage(format!(
            "--min-operands ({}) must be at least 2 and at most --max-operands ({})",
            c.min_operands, c.max_operands
        )));
    }
    if !(c.mode_mix > 0.0 && c.mode_mix < 1.0) {
        return Err(CliError::Usage(format!("--mode-mix must be in (0, 1), got {}", c.mode_mix)));
    }
    if let Err(e) = c.validate() {
        return Err(CliError::Usage(format!("--operand-max / --max-operands: {e}")));
    }
    let out = ctx.path(&a.out);
    let mut m = ctx.manifest("gen-corpus");
    let corpus = gen_corpus(&ctx.settings.harness.corpus)?;
    ensure_parent(&out)?;
    write_corpus(&out, &corpus)?;
    let stepwise = corpus.iter().filter(|p| p.corpus_mode == cotsteer::synth_task::Mode::Stepwise).count();
    eprintln!("wrote {} problems ({stepwise} stepwise) to {}", corpus.len(), out.display());
    m.output("corpus", &out);
    m.details = json!({ "n_problems": corpus.len(), "stepwise": stepwise });
    m.write(&out)?;
    Ok(())
}

fn train_lm_cmd(ctx: &mut Ctx, a: TrainLmArgs) -> Result<()> {
    let lm = &mut ctx.settings.harness.lm;
    set(&mut lm.epochs, a.epochs);
    set(&mut lm.learning_rate, a.lr);
    set(&mut lm.batch_size, a.batch_size);
    set(&mut lm.seed, a.seed);
    let corpus_path = ctx.path(&a.corpus);
    let out = ctx.path(&a.out);
    let mut m = ctx.manifest("train-lm");
    let corpus = read_corpus(&corpus_path)?;
    let vocab = arithmetic_vocab();
    let seqs = corpus
        .iter()
        .map(|p| vocab.encode(&p.training_tokens()))
        .collect::<cotsteer::Result<Vec<_>>>()?;
    let h = &ctx.settings.harness;
    let (model, hist) = train_toy_lm(&seqs, vocab, h.model, &h.lm)?;
    ensure_parent(&out)?;
    model.save(&out)?;
    eprintln!(
        "trained {} epochs: perplexity {:.3} -> {:.3}; saved {}",
        hist.epoch_loss.len(),
        hist.initial_perplexity,
        hist.final_perplexity,
        out.display()
    );
    m.input("corpus", &corpus_path);
    m.output("model", &out);
    m.details = to_json(&hist);
    m.write(&out)?;
    Ok(())
}

fn capture_cmd(ctx: &mut Ctx, a: CaptureArgs) -> Result<()> {
    let model_path = ctx.path(&a.model);
    let corpus_path = ctx.path(&a.corpus);
    let out = ctx.path(&a.out);
    let mut m = ctx.manifest("capture-toy");
    let model = ToyModel::load(&model_path)?;
    let corpus = read_corpus(&corpus_path)?;
    let datasets = build_contrastive_sites(&model, &corpus, &all_sites(&model))?;
    let mut records = Vec::new();
    for d in datasets.values() {
        records.extend(from_dataset(d)?);
    }
    ensure_parent(&out)?;
    let n = write_records(&out, "toy-lm", &records)?;
    let report = summarize(&read_records(&out)?);
    eprintln!("wrote {n} records over {} sites to {}", datasets.len(), out.display());
    m.input("model", &model_path);
    m.input("corpus", &corpus_path);
    m.output("activations", &out);
    m.details = to_json(&report);
    m.write(&out)?;
    Ok(())
}

fn train_probes_cmd(ctx: &mut Ctx, a: TrainProbesArgs) -> Result<()> {
    let h = &mut ctx.settings.harness;
    set(&mut h.top_fraction, a.top_fraction);
    set(&mut h.probe_site, a.site.map(Into::into));
    set(&mut h.probe.epochs, a.epochs);
    set(&mut h.probe.learning_rate, a.lr);
    set(&mut h.probe.batch_size, a.batch_size);
    set(&mut h.probe.seed, a.seed);
    set(&mut h.probe_holdout, a.holdout);
    ctx.settings.validate()?;
    let acts = ctx.path(&a.activations);
    let out = ctx.path(&a.out);
    let mut m = ctx.manifest("train-probes");
    let file = read_records(&acts)?;
    let datasets = datasets_from_records(&file.records)?;
    if datasets.is_empty() {
        return Err(cotsteer::Error::Empty("labeled (layer, site) datasets").into());
    }
    let h = &ctx.settings.harness;
    let bank = train_bank(datasets.values(), &h.probe, h.probe_holdout)?;
    bank.save_dir(&out)?;
    println!("{:>5}  {:<9}  {:>8}  {:>6}  {:>7}", "layer", "site", "accuracy", "f1", "roc_auc");
    for ((layer, site), e) in bank.iter() {
        println!(
            "{layer:>5}  {:<9}  {:>8.3}  {:>6.3}  {:>7.3}",
            site.name(),
            e.metrics.accuracy,
            e.metrics.f1,
            e.metrics.roc_auc
        );
    }
    let selected = select_sites(&bank, Some(h.probe_site), h.top_fraction)?;
    println!(
        "selected (top {:.0}% of {} layers by F1): {:?}",
        h.top_fraction * 100.0,
        h.probe_site,
        selected.iter().map(|(l, _)| *l).collect::<Vec<_>>()
    );
    m.input("activations", &acts);
    m.output("probes", &out);
    m.details = json!({
        "top_fraction": h.top_fraction,
        "site": h.probe_site,
        "selected": selected,
        "metrics": bank.iter().map(|(k, e)| json!({"layer": k.0, "site": k.1, "metrics": e.metrics})).collect::<Vec<_>>(),
    });
    m.write(&out)?;
    Ok(())
}

fn apply_run_args(s: &mut Settings, r: &RunArgs) {
    let h = &mut s.harness;
    set(&mut h.eval_size, r.eval_size);
    set(&mut h.eval_seed, r.eval_seed);
    set(&mut h.top_fraction, r.top_fraction);
    set(&mut h.probe_site, r.site.map(Into::into));
    set(&mut h.max_new, r.max_new);
    let o = &mut s.optimizer;
    set(&mut o.lambda, r.lambda);
    set(&mut o.tau, r.tau);
    set(&mut o.alpha0, r.alpha0);
    set(&mut o.max_iters, r.max_iters);
    set(&mut o.noise_enabled, r.noise);
    set(&mut s.strength, r.strength);
}

/// Loads only the artifacts `methods` need.
fn load_testbed(ctx: &Ctx, r: &RunArgs, methods: &[Method], m: &mut RunManifest) -> Result<Testbed> {
    let model_path = ctx.path(&r.model);
    let corpus_path = ctx.path(&r.corpus);
    let model = ToyModel::load(&model_path)?;
    let corpus = read_corpus(&corpus_path)?;
    m.input("model", &model_path);
    m.input("corpus", &corpus_path);
    let needs_probes = methods.iter().any(|&x| x != Method::None);
    let needs_data = methods
        .iter()
        .any(|x| matches!(x, Method::CDim | Method::CLr | Method::PSvm | Method::Da));
    let bank = if needs_probes {
        let dir = ctx.path(&r.probes);
        require(&dir.join("probes.csv"))?;
        m.input("probes", &dir);
        ProbeBank::load_dir(&dir)?
    } else {
        ProbeBank::new()
    };
    let datasets = if needs_data {
        let acts = ctx.path(&r.activations);
        require(&acts)?;
        m.input("activations", &acts);
        datasets_from_records(&read_records(&acts)?.records)?
    } else {
        BTreeMap::new()
    };
    Ok(Testbed::from_parts(ctx.settings.harness.clone(), corpus, model, datasets, bank)?)
}

fn print_report(r: &ExperimentReport) {
    println!(
        "{:<9} {:>10} acc {:.3}  stepwise {:.3}  fluency {:.3}  ppl {:.3}  intervened {:.2}{}",
        r.method,
        r.value.map(|v| format!("{}={v}", r.parameter)).unwrap_or_default(),
        r.accuracy,
        r.stepwise_rate,
        r.fluency,
        r.perplexity,
        r.mean_intervened_tokens,
        r.error.as_deref().map(|e| format!("  ERROR {e}")).unwrap_or_default()
    );
}

fn steer_cmd(ctx: &mut Ctx, a: SteerArgs) -> Result<()> {
    apply_run_args(&mut ctx.settings, &a.run);
    ctx.settings.validate()?;
    let method: Method = a.method.into();
    let report_path = ctx.path(&a.report.unwrap_or_else(|| PathBuf::from(format!("reports/{method}.csv"))));
    let traces_dir = ctx.path(&a.traces.unwrap_or_else(|| PathBuf::from(format!("traces/{method}"))));
    let mut m = ctx.manifest("steer");
    let tb = load_testbed(ctx, &a.run, &[method], &mut m)?;
    let plan = tb.plan(method, &ctx.settings.optimizer, ctx.settings.strength)?;
    let mut ev = tb.evaluate(method.name(), &plan, true)?;
    std::fs::create_dir_all(&traces_dir).map_err(cotsteer::Error::from)?;
    let mut n_opt_traces = 0usize;
    for (i, g) in ev.generations.iter().enumerate() {
        let f = std::fs::File::create(traces_dir.join(format!("p{i:04}.jsonl"))).map_err(cotsteer::Error::from)?;
        g.write_jsonl(std::io::BufWriter::new(f))?;
        for st in &g.optimizer_traces {
            let name = format!("p{i:04}_L{}_{}_pos{}.csv", st.layer, st.site.name().to_ascii_lowercase(), st.position);
            let f = std::fs::File::create(traces_dir.join(name)).map_err(cotsteer::Error::from)?;
            st.trace.write_csv(std::io::BufWriter::new(f))?;
            n_opt_traces += 1;
        }
    }
    ev.report.traces = traces_dir.display().to_string();
    ensure_parent(&report_path)?;
    write_reports(std::fs::File::create(&report_path).map_err(cotsteer::Error::from)?, &[ev.report.clone()])?;
    print_report(&ev.report);
    m.output("report", &report_path);
    m.output("traces", &traces_dir);
    m.details = json!({
        "method": method.name(),
        "sites": tb.sites,
        "report": ev.report,
        "optimizer_traces": n_opt_traces,
    });
    m.write(&report_path)?;
    Ok(())
}

fn sweep_cmd(ctx: &mut Ctx, a: SweepArgs) -> Result<()> {
    apply_run_args(&mut ctx.settings, &a.run);
    ctx.settings.validate()?;
    let method: Method = a.method.into();
    let grid = a.grid.clone().unwrap_or_else(|| a.param.default_grid());
    let out = ctx.path(
        &a.out
            .unwrap_or_else(|| PathBuf::from(format!("reports/sweep_{method}_{}.csv", a.param.name()))),
    );
    let mut m = ctx.manifest("sweep");
    let tb = load_testbed(ctx, &a.run, &[method], &mut m)?;
    let base_opt = ctx.settings.optimizer.clone();
    let base_strength = ctx.settings.strength;
    let reports = run_sweep(method.name(), a.param.name(), &grid, |v| {
        let mut opt = base_opt.clone();
        let mut strength = base_strength;
        match a.param {
            SweepParam::Lambda => opt.lambda = v,
            SweepParam::Tau => opt.tau = v,
            SweepParam::Alpha0 => opt.alpha0 = v,
            SweepParam::MaxIters => {
                if v < 1.0 || v.fract() != 0.0 {
                    return Err(cotsteer::Error::InvalidArgument(format!("max_iters grid value {v} is not a positive integer")));
                }
                opt.max_iters = v as usize;
            }
            SweepParam::Strength => strength = v,
        }
        opt.validate()?;
        Ok(tb.run(method, &opt, strength)?.report)
    })?;
    ensure_parent(&out)?;
    write_reports(std::fs::File::create(&out).map_err(cotsteer::Error::from)?, &reports)?;
    for r in &reports {
        print_report(r);
    }
    m.output("sweep", &out);
    m.details = json!({ "method": method.name(), "param": a.param.name(), "grid": grid, "sites": tb.sites });
    m.write(&out)?;
    Ok(())
}

fn bounds_cmd(ctx: &mut Ctx, a: BoundsArgs) -> Result<()> {
    let lambda = a.lambda.unwrap_or(ctx.settings.optimizer.lambda);
    let dir = ctx.path(&a.traces);
    let out = ctx.path(&a.out);
    require(&dir)?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(cotsteer::Error::from)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(cotsteer::Error::MissingArtifact(dir.join("*.csv")).into());
    }
    let mut m = ctx.manifest("bounds-report");
    m.input("traces", &dir);
    ensure_parent(&out)?;
    let mut w = csv::Writer::from_path(&out).map_err(cotsteer::Error::from)?;
    w.write_record([
        "trace",
        "steps",
        "lambda",
        "in_bounds_fraction",
        "upper_active_steps",
        "min_upper",
        "max_lower",
    ])
    .map_err(cotsteer::Error::from)?;
    let (mut steps_total, mut in_total) = (0usize, 0usize);
    for f in &files {
        let trace = OptimizerTrace::read_csv(f)?;
        if trace.is_empty() {
            continue;
        }
        let rep = check_bounds(&trace, lambda)?;
        let uppers: Vec<f64> = trace.steps.iter().filter_map(|s| s.lemma1_upper).collect();
        let lowers: Vec<f64> = trace.steps.iter().filter_map(|s| s.lemma2_lower).collect();
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        steps_total += rep.in_bounds.len();
        in_total += rep.in_bounds.iter().filter(|&&b| b).count();
        w.write_record([
            f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            trace.len().to_string(),
            lambda.to_string(),
            rep.in_bounds_fraction.to_string(),
            uppers.len().to_string(),
            fmt(uppers.iter().copied().reduce(f64::min)),
            fmt(lowers.iter().copied().reduce(f64::max)),
        ])
        .map_err(cotsteer::Error::from)?;
    }
    w.flush().map_err(cotsteer::Error::from)?;
    let frac = if steps_total == 0 { 0.0 } else { in_total as f64 / steps_total as f64 };
    println!(
        "{} traces, {steps_total} steps, lambda {lambda}: {:.1}% of steps in bounds",
        files.len(),
        frac * 100.0
    );
    m.output("bounds", &out);
    m.details = json!({ "lambda": lambda, "traces": files.len(), "steps": steps_total, "in_bounds_fraction": frac });
    m.write(&out)?;
    Ok(())
}
