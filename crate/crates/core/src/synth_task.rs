// SPDX-License-Identifier: MIT OR Apache-2.0

//! Multi-operand addition in two response styles.
//!
//! ```text
//! prompt   : Q 3 + 4 + 5 A
//! direct   : 12
//! stepwise : 3 + 4 = 7 ; 7 + 5 = 12 ; 12
//! ```
//! Each problem also carries a *corpus mode*: the style it is shown in when
//! the language model is trained. The stepwise fraction is `mode_mix`.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Vector};
use crate::probe::ContrastiveDataset;
use crate::site::{Site, SiteKey};
use crate::toy_lm::{ToyModel, Vocab};

pub const EOS: &str = "<eos>";
/// Largest number token in the arithmetic vocabulary.
pub const MAX_NUMBER: u32 = 57;
/// Sampling stride along a response, per label.
pub const STRIDE_POSITIVE: usize = 5;
pub const STRIDE_NEGATIVE: usize = 1;

/// `Q A + = ; <eos>` then the numbers `0..=57`: 64 tokens.
pub fn arithmetic_vocab() -> Vocab {
    let mut t: Vec<String> = ["Q", "A", "+", "=", ";", EOS].iter().map(|s| s.to_string()).collect();
    t.extend((0..=MAX_NUMBER).map(|n| n.to_string()));
    Vocab::new(t).expect("distinct tokens")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Direct,
    Stepwise,
}

impl Mode {
    pub fn label(self) -> u8 {
        match self {
            Mode::Direct => 0,
            Mode::Stepwise => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub operands: Vec<u32>,
    pub prompt: Vec<String>,
    pub answer: String,
    pub direct_response: Vec<String>,
    pub stepwise_response: Vec<String>,
    pub corpus_mode: Mode,
}

impl Problem {
    pub fn new(operands: Vec<u32>, corpus_mode: Mode) -> Result<Self> {
        if operands.len() < 2 {
            return Err(Error::InvalidArgument("a problem needs at least 2 operands".into()));
        }
        let total: u32 = operands.iter().sum();
        if let Some(&bad) = operands.iter().chain(std::iter::once(&total)).find(|&&x| x > MAX_NUMBER) {
            return Err(Error::OutOfVocab(bad.to_string()));
        }
        let mut prompt = vec!["Q".to_string()];
        for (i, o) in operands.iter().enumerate() {
            if i > 0 {
                prompt.push("+".into());
            }
            prompt.push(o.to_string());
        }
        prompt.push("A".into());
        let mut stepwise = Vec::new();
        let mut acc = operands[0];
        for o in &operands[1..] {
            let next = acc + o;
            stepwise.extend([acc.to_string(), "+".into(), o.to_string(), "=".into(), next.to_string(), ";".into()]);
            acc = next;
        }
        stepwise.push(total.to_string());
        Ok(Self {
            operands,
            prompt,
            answer: total.to_string(),
            direct_response: vec![total.to_string()],
            stepwise_response: stepwise,
            corpus_mode,
        })
    }

    pub fn response(&self, mode: Mode) -> &[String] {
        match mode {
            Mode::Direct => &self.direct_response,
            Mode::Stepwise => &self.stepwise_response,
        }
    }

    /// Prompt, corpus-mode response and EOS: one language-model training sequence.
    pub fn training_tokens(&self) -> Vec<String> {
        let mut t = self.prompt.clone();
        t.extend_from_slice(self.response(self.corpus_mode));
        t.push(EOS.into());
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_problems: usize,
    pub operand_min: u32,
    pub operand_max: u32,
    pub min_operands: usize,
    pub max_operands: usize,
    /// Fraction of problems shown stepwise in the training corpus.
    pub mode_mix: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_problems: 500,
            operand_min: 1,
            operand_max: 9,
            min_operands: 3,
            max_operands: 4,
            mode_mix: 0.2,
            seed: 7,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mode_mix > 0.0 && self.mode_mix < 1.0) {
            return Err(Error::InvalidArgument("mode_mix must be in (0, 1)".into()));
        }
        if self.operand_min > self.operand_max {
            return Err(Error::InvalidArgument("operand_min exceeds operand_max".into()));
        }
        if self.min_operands < 2 || self.min_operands > self.max_operands {
            return Err(Error::InvalidArgument("operand count range must satisfy 2 <= min <= max".into()));
        }
        let worst = u64::from(self.operand_max) * self.max_operands as u64;
        if worst > u64::from(MAX_NUMBER) {
            return Err(Error::OutOfVocab(format!(
                "answers up to {worst} exceed the largest number token {MAX_NUMBER}"
            )));
        }
        Ok(())
    }
}

/// Deterministic in `cfg.seed`.
pub fn gen_corpus(cfg: &CorpusConfig) -> Result<Vec<Problem>> {
    cfg.validate()?;
    let mut rng = RngStream::new(cfg.seed);
    (0..cfg.n_problems).map(|_| sample_problem(cfg, &mut rng)).collect()
}

fn sample_problem(cfg: &CorpusConfig, rng: &mut RngStream) -> Result<Problem> {
    let n = rng.range_inclusive(cfg.min_operands as u32, cfg.max_operands as u32) as usize;
    let operands = (0..n).map(|_| rng.range_inclusive(cfg.operand_min, cfg.operand_max)).collect();
    let mode = if rng.uniform() < cfg.mode_mix { Mode::Stepwise } else { Mode::Direct };
    Problem::new(operands, mode)
}

/// `n` problems from the same distribution whose operand lists do not occur
/// in `exclude`. Uses its own seed.
pub fn held_out_problems(cfg: &CorpusConfig, exclude: &[Problem], n: usize, seed: u64) -> Result<Vec<Problem>> {
    cfg.validate()?;
    let seen: HashSet<&[u32]> = exclude.iter().map(|p| p.operands.as_slice()).collect();
    let mut rng = RngStream::new(seed);
    let mut out: Vec<Problem> = Vec::with_capacity(n);
    let mut taken: HashSet<Vec<u32>> = HashSet::new();
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        if attempts > 1000 * (n + 1) {
            return Err(Error::InvalidArgument("not enough unseen problems in this configuration".into()));
        }
        let p = sample_problem(cfg, &mut rng)?;
        if seen.contains(p.operands.as_slice()) || !taken.insert(p.operands.clone()) {
            continue;
        }
        out.push(p);
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, problems: &[Problem]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in problems {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<Problem>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Offsets along a response whose predicting state gets sampled.
pub fn sampled_offsets(response_len: usize, label: u8) -> Vec<usize> {
    let stride = if label == 1 { STRIDE_POSITIVE } else { STRIDE_NEGATIVE };
    (0..response_len).step_by(stride).collect()
}

/// One prompt+response pass; returns per-site `(state, label)` records.
///
/// The state "at response offset k" is the activation at the position that
/// predicts response token k, i.e. sequence index `prompt_len − 1 + k`.
fn contrastive_records(
    model: &ToyModel,
    problem: &Problem,
    mode: Mode,
    sites: &[SiteKey],
) -> Result<Vec<(SiteKey, Vector, u8)>> {
    let vocab = model.vocab();
    let response = problem.response(mode);
    let mut words = problem.prompt.clone();
    words.extend_from_slice(response);
    let ids = vocab.encode(&words)?;
    let label = mode.label();
    let offsets = sampled_offsets(response.len(), label);
    let base = problem.prompt.len() - 1;
    let mut out = Vec::with_capacity(sites.len() * offsets.len());
    let max_layer = sites.iter().map(|k| k.0).max().unwrap_or(0);
    model.forward_until(&ids, max_layer, &mut |l, s, m| {
        if sites.contains(&(l, s)) {
            for &k in &offsets {
                out.push(((l, s), Vector::new(m.row(base + k).to_vec())?, label));
            }
        }
        Ok(())
    })?;
    Ok(out)
}

/// Contrastive datasets for several sites from one pass per problem. Each
/// problem contributes its corpus-mode response: stepwise responses give
/// label-1 records every 5 tokens, direct responses label-0 records at every
/// token.
pub fn build_contrastive_sites(
    model: &ToyModel,
    problems: &[Problem],
    sites: &[SiteKey],
) -> Result<BTreeMap<SiteKey, ContrastiveDataset>> {
    let mut acc: BTreeMap<SiteKey, Vec<(Vector, u8)>> = sites.iter().map(|k| (*k, Vec::new())).collect();
    for p in problems {
        for (key, v, label) in contrastive_records(model, p, p.corpus_mode, sites)? {
            acc.get_mut(&key).expect("requested site").push((v, label));
        }
    }
    acc.into_iter()
        .map(|(k, recs)| Ok((k, ContrastiveDataset::new(k.0, k.1, recs)?)))
        .collect()
}

pub fn build_contrastive(model: &ToyModel, problems: &[Problem], site: SiteKey) -> Result<ContrastiveDataset> {
    Ok(build_contrastive_sites(model, problems, &[site])?
        .remove(&site)
        .expect("requested site"))
}

/// Every (layer, site) of the model.
pub fn all_sites(model: &ToyModel) -> Vec<SiteKey> {
    (0..model.n_layers())
        .flat_map(|l| Site::ALL.iter().map(move |&s| (l, s)))
        .collect()
}

/// Per-problem paired states for C-PCA: both responses are fed for every
/// problem and each side is summarized by the mean of its sampled states.
pub fn build_paired(model: &ToyModel, problems: &[Problem], site: SiteKey) -> Result<(Vec<Vector>, Vec<Vector>)> {
    let mean = |recs: Vec<(SiteKey, Vector, u8)>| -> Result<Vector> {
        let n = recs.len() as f64;
        let mut it = recs.into_iter().map(|r| r.1);
        let first = it.next().ok_or(Error::Empty("sampled states"))?;
        it.try_fold(first, |a, b| a.add(&b))?.scale(1.0 / n)
    };
    let mut pos = Vec::with_capacity(problems.len());
    let mut neg = Vec::with_capacity(problems.len());
    for p in problems {
        pos.push(mean(contrastive_records(model, p, Mode::Stepwise, &[site])?)?);
        neg.push(mean(contrastive_records(model, p, Mode::Direct, &[site])?)?);
    }
    Ok((pos, neg))
}

/// The last numeric token of a generation.
pub fn extract_answer<S: AsRef<str>>(tokens: &[S]) -> Option<u32> {
    tokens.iter().rev().find_map(|t| t.as_ref().parse::<u32>().ok())
}

/// A generation counts as stepwise when it contains an `=` step.
pub fn is_stepwise<S: AsRef<str>>(tokens: &[S]) -> bool {
    tokens.iter().any(|t| t.as_ref() == "=")
}

/// Fraction of generations whose extracted answer equals the gold answer.
pub fn accuracy<S: AsRef<str>>(problems: &[Problem], generations: &[Vec<S>]) -> Result<f64> {
    if problems.len() != generations.len() {
        return Err(Error::DimensionMismatch {
            expected: problems.len(),
            got: generations.len(),
        });
    }
    if problems.is_empty() {
        return Err(Error::Empty("problem list"));
    }
    let correct = problems
        .iter()
        .zip(generations)
        .filter(|(p, g)| extract_answer(g).map(|a| a.to_string()) == Some(p.answer.clone()))
        .count();
    Ok(correct as f64 / problems.len() as f64)
}
