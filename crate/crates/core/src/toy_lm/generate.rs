// SPDX-License-Identifier: MIT OR Apache-2.0

//! Greedy generation under an intervention plan.
//!
//! For `Optimize`, the prompt is handled first: at every plan site (in
//! ascending layer order) all prompt states are optimized jointly until the
//! requested fraction scores positive. Then, before each emitted token, the
//! current position's state at every plan site is scored and optimized if the
//! probe calls it negative. Optimized states are stored as overrides and
//! re-applied on every later forward pass, so they persist in the context.
//!
//! The fixed-direction methods (`Control`, `Project`, `Ablate`) transform
//! every position at every plan site on every pass.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use super::{write_rows, CaptureSet, ToyModel};
use crate::baselines::{apply_control, directional_ablation, svm_project, ControlVector, Hyperplane};
use crate::error::{Error, Result};
use crate::numerics::{RngStream, Vector};
use crate::optimizer::{optimize_batch, optimize_hidden_state, OptimizerConfig, OptimizerTrace};
use crate::probe::ProbeBank;
use crate::site::{Site, SiteKey};

#[derive(Debug, Clone, PartialEq)]
pub enum InterventionMode {
    None,
    Optimize { config: OptimizerConfig, probes: ProbeBank },
    Control(BTreeMap<SiteKey, ControlVector>),
    Project(BTreeMap<SiteKey, Hyperplane>),
    Ablate(BTreeMap<SiteKey, Vector>),
}

impl InterventionMode {
    pub fn name(&self) -> &'static str {
        match self {
            InterventionMode::None => "none",
            InterventionMode::Optimize { .. } => "optimize",
            InterventionMode::Control(_) => "control",
            InterventionMode::Project(_) => "project",
            InterventionMode::Ablate(_) => "ablate",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterventionPlan {
    sites: Vec<SiteKey>,
    pub mode: InterventionMode,
    pub prefill_target_fraction: f64,
}

impl InterventionPlan {
    pub fn none() -> Self {
        Self {
            sites: Vec::new(),
            mode: InterventionMode::None,
            prefill_target_fraction: 1.0,
        }
    }

    /// Sites are sorted ascending by (layer, site); that order is the order
    /// interventions are applied in.
    pub fn new(mut sites: Vec<SiteKey>, mode: InterventionMode, prefill_target_fraction: f64) -> Result<Self> {
        sites.sort();
        sites.dedup();
        if !(prefill_target_fraction > 0.0 && prefill_target_fraction <= 1.0) {
            return Err(Error::InvalidArgument("prefill_target_fraction must be in (0, 1]".into()));
        }
        if sites.is_empty() && mode != InterventionMode::None {
            return Err(Error::InvalidArgument("intervention plan needs at least one site".into()));
        }
        let missing = |present: &dyn Fn(&SiteKey) -> bool| {
            sites
                .iter()
                .find(|k| !present(k))
                .map(|k| Error::InvalidArgument(format!("no artifact for layer {} site {}", k.0, k.1)))
        };
        let err = match &mode {
            InterventionMode::None => None,
            InterventionMode::Optimize { config, probes } => {
                config.validate()?;
                missing(&|k| probes.get(k).is_some())
            }
            InterventionMode::Control(m) => missing(&|k| m.contains_key(k)),
            InterventionMode::Project(m) => missing(&|k| m.contains_key(k)),
            InterventionMode::Ablate(m) => missing(&|k| m.contains_key(k)),
        };
        if let Some(e) = err {
            return Err(e);
        }
        Ok(Self {
            sites,
            mode,
            prefill_target_fraction,
        })
    }

    pub fn sites(&self) -> &[SiteKey] {
        &self.sites
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub max_new: usize,
    pub eos: Option<usize>,
    pub seed: u64,
    /// Keep every optimizer trace (for bound reports).
    pub keep_traces: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            max_new: 32,
            eos: None,
            seed: 0,
            keep_traces: false,
        }
    }
}

/// What happened at one plan site before one emitted token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteEvent {
    pub layer: usize,
    pub site: Site,
    pub f_before: Option<f64>,
    pub f_after: Option<f64>,
    pub iterations: usize,
    pub intervened: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenTrace {
    pub index: usize,
    pub token: usize,
    pub sites: Vec<SiteEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefillRecord {
    pub layer: usize,
    pub site: Site,
    pub n_states: usize,
    pub n_optimized: usize,
    pub iterations: usize,
    pub positive_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteTrace {
    pub layer: usize,
    pub site: Site,
    pub position: usize,
    pub trace: OptimizerTrace,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Generation {
    /// Emitted tokens (the prompt excluded; a terminating EOS included).
    pub tokens: Vec<usize>,
    pub trace: Vec<TokenTrace>,
    pub prefill: Vec<PrefillRecord>,
    pub optimizer_traces: Vec<SiteTrace>,
}

impl Generation {
    /// One JSON object per emitted token.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for t in &self.trace {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn intervened_tokens(&self) -> usize {
        self.trace.iter().filter(|t| t.sites.iter().any(|s| s.intervened)).count()
    }
}

/// Runs layers up to `layer` with `overrides` applied and returns the
/// (post-override) activation matrix at (`layer`, `site`).
fn capture_site(
    model: &ToyModel,
    tokens: &[usize],
    layer: usize,
    site: Site,
    overrides: &CaptureSet,
) -> Result<Array2<f64>> {
    let mut out = None;
    model.forward_until(tokens, layer, &mut |l, s, m| {
        write_rows(m, l, s, overrides);
        if (l, s) == (layer, site) {
            out = Some(m.clone());
        }
        Ok(())
    })?;
    Ok(out.expect("site visited"))
}

fn row_vector(m: &Array2<f64>, i: usize) -> Result<Vector> {
    Vector::new(m.row(i).to_vec())
}

fn wrap(token: usize) -> impl Fn(Error) -> Error {
    move |e| Error::Generation {
        token,
        source: Box::new(e),
    }
}

/// Applies a fixed-direction method to one activation matrix; returns
/// whether the last row was changed.
fn transform(mode: &InterventionMode, key: &SiteKey, m: &mut Array2<f64>) -> Result<bool> {
    let mut last = false;
    let n = m.nrows();
    for i in 0..n {
        let h = row_vector(m, i)?;
        let (new, changed) = match mode {
            InterventionMode::Control(cvs) => (apply_control(&h, &cvs[key])?, true),
            InterventionMode::Project(planes) => {
                let plane = &planes[key];
                if plane.decision(&h)? < 0.0 {
                    (svm_project(&h, plane)?, true)
                } else {
                    (h, false)
                }
            }
            InterventionMode::Ablate(dirs) => (directional_ablation(&h, &dirs[key])?, true),
            _ => (h, false),
        };
        m.row_mut(i).assign(&ArrayView1::from(new.as_slice()));
        if i + 1 == n {
            last = changed;
        }
    }
    Ok(last)
}

/// Greedy decoding from `prompt` under `plan`.
pub fn generate(model: &ToyModel, prompt: &[usize], plan: &InterventionPlan, opts: &GenerateOptions) -> Result<Generation> {
    model.check_tokens(prompt)?;
    let context = model.config().context_len;
    let mut rng = RngStream::new(opts.seed);
    let mut tokens = prompt.to_vec();
    let mut out = Generation::default();

    match &plan.mode {
        InterventionMode::Optimize { config, probes } => {
            let mut overrides = CaptureSet::new();
            for &(l, s) in plan.sites() {
                let probe = probes.probe(&(l, s))?;
                let m = capture_site(model, &tokens, l, s, &overrides)?;
                let states = (0..m.nrows()).map(|i| row_vector(&m, i)).collect::<Result<Vec<_>>>()?;
                let res = optimize_batch(probe, &states, config, plan.prefill_target_fraction, &mut rng)
                    .map_err(wrap(0))?;
                let mut n_optimized = 0;
                for (i, (opt, state)) in res.optimized.iter().zip(res.states).enumerate() {
                    if *opt {
                        n_optimized += 1;
                        overrides.insert(l, s, i, state);
                    }
                }
                if opts.keep_traces {
                    for (i, tr) in res.traces.into_iter().enumerate() {
                        if !tr.is_empty() {
                            out.optimizer_traces.push(SiteTrace { layer: l, site: s, position: i, trace: tr });
                        }
                    }
                }
                out.prefill.push(PrefillRecord {
                    layer: l,
                    site: s,
                    n_states: states.len(),
                    n_optimized,
                    iterations: res.iterations_used,
                    positive_fraction: res.positive_fraction,
                });
            }
            for step in 0..opts.max_new {
                if tokens.len() >= context {
                    break;
                }
                let pos = tokens.len() - 1;
                let mut events = Vec::with_capacity(plan.sites().len());
                for &(l, s) in plan.sites() {
                    let probe = probes.probe(&(l, s))?;
                    let m = capture_site(model, &tokens, l, s, &overrides)?;
                    let h = row_vector(&m, pos)?;
                    let f_before = probe.forward(&h)?;
                    if f_before < 0.5 {
                        let res = optimize_hidden_state(probe, &h, config, &mut rng).map_err(wrap(step))?;
                        let f_after = probe.forward(&res.h_star)?;
                        events.push(SiteEvent {
                            layer: l,
                            site: s,
                            f_before: Some(f_before),
                            f_after: Some(f_after),
                            iterations: res.iterations_used,
                            intervened: true,
                        });
                        if opts.keep_traces && !res.trace.is_empty() {
                            out.optimizer_traces.push(SiteTrace { layer: l, site: s, position: pos, trace: res.trace });
                        }
                        overrides.insert(l, s, pos, res.h_star);
                    } else {
                        events.push(SiteEvent {
                            layer: l,
                            site: s,
                            f_before: Some(f_before),
                            f_after: Some(f_before),
                            iterations: 0,
                            intervened: false,
                        });
                    }
                }
                let logits = model.forward_hooked(&tokens, &mut |l, s, m| {
                    write_rows(m, l, s, &overrides);
                    Ok(())
                })?;
                let next = ToyModel::argmax(logits.row(pos));
                if emit(&mut tokens, &mut out, step, next, events, opts.eos) {
                    break;
                }
            }
        }
        mode => {
            for step in 0..opts.max_new {
                if tokens.len() >= context {
                    break;
                }
                let pos = tokens.len() - 1;
                let mut events = Vec::new();
                let logits = model.forward_hooked(&tokens, &mut |l, s, m| {
                    if plan.sites().contains(&(l, s)) {
                        let changed = transform(mode, &(l, s), m)?;
                        events.push(SiteEvent {
                            layer: l,
                            site: s,
                            f_before: None,
                            f_after: None,
                            iterations: 0,
                            intervened: changed,
                        });
                    }
                    Ok(())
                });
                let logits = logits.map_err(wrap(step))?;
                let next = ToyModel::argmax(logits.row(pos));
                if emit(&mut tokens, &mut out, step, next, events, opts.eos) {
                    break;
                }
            }
        }
    }
    Ok(out)
}

/// Appends a token; returns true when generation should stop.
fn emit(tokens: &mut Vec<usize>, out: &mut Generation, index: usize, next: usize, sites: Vec<SiteEvent>, eos: Option<usize>) -> bool {
    tokens.push(next);
    out.tokens.push(next);
    out.trace.push(TokenTrace {
        index,
        token: next,
        sites,
    });
    Some(next) == eos
}
