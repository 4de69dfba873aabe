// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end testbed: corpus → toy LM → contrastive datasets → probes →
//! steered generation → report.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{
    ablation_direction, dim_vector, lr_vector, pca_vector, svm_train, ControlVector, LinearFitConfig,
};
use crate::error::{Error, Result};
use crate::metrics::{fluency, ExperimentReport, DEFAULT_W2, DEFAULT_W3};
use crate::optimizer::OptimizerConfig;
use crate::probe::{select_sites, train_bank, ContrastiveDataset, ProbeBank, TrainConfig};
use crate::site::{Site, SiteKey};
use crate::synth_task::{
    all_sites, arithmetic_vocab, build_contrastive_sites, build_paired, extract_answer, gen_corpus,
    held_out_problems, is_stepwise, CorpusConfig, Problem, EOS,
};
use crate::toy_lm::{
    generate, train_toy_lm, GenerateOptions, Generation, InterventionMode, InterventionPlan, LmTrainConfig,
    LmTrainHistory, ModelConfig, ToyModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    None,
    Optimize,
    CDim,
    CPca,
    CLr,
    PSvm,
    Da,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::None,
        Method::Optimize,
        Method::CDim,
        Method::CPca,
        Method::CLr,
        Method::PSvm,
        Method::Da,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Optimize => "optimize",
            Method::CDim => "c-dim",
            Method::CPca => "c-pca",
            Method::CLr => "c-lr",
            Method::PSvm => "p-svm",
            Method::Da => "da",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub lm: LmTrainConfig,
    pub probe: TrainConfig,
    /// Fraction of contrastive records held out to score probes.
    pub probe_holdout: f64,
    pub probe_site: Site,
    pub top_fraction: f64,
    pub eval_size: usize,
    pub eval_seed: u64,
    pub max_new: usize,
    pub prefill_target_fraction: f64,
    pub linear_fit: LinearFitConfig,
    pub generation_seed: u64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            lm: LmTrainConfig::default(),
            probe: TrainConfig::default(),
            probe_holdout: 0.2,
            probe_site: Site::IntLayer,
            top_fraction: 0.5,
            eval_size: 100,
            eval_seed: 1_000_003,
            max_new: 32,
            prefill_target_fraction: 0.95,
            linear_fit: LinearFitConfig::default(),
            generation_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Testbed {
    pub config: HarnessConfig,
    pub corpus: Vec<Problem>,
    pub eval: Vec<Problem>,
    pub model: ToyModel,
    pub lm_history: Option<LmTrainHistory>,
    pub datasets: BTreeMap<SiteKey, ContrastiveDataset>,
    pub bank: ProbeBank,
    /// Intervention sites shared by every method, ascending.
    pub sites: Vec<SiteKey>,
}

/// Generations and their evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: ExperimentReport,
    pub generations: Vec<Generation>,
    pub texts: Vec<Vec<String>>,
}

impl Testbed {
    /// Builds everything from scratch (corpus, LM training, probes).
    pub fn build(config: HarnessConfig) -> Result<Self> {
        let corpus = gen_corpus(&config.corpus)?;
        let vocab = arithmetic_vocab();
        let seqs = corpus
            .iter()
            .map(|p| vocab.encode(&p.training_tokens()))
            .collect::<Result<Vec<_>>>()?;
        let (model, hist) = train_toy_lm(&seqs, vocab, config.model, &config.lm)?;
        let mut tb = Self::from_model(config, corpus, model)?;
        tb.lm_history = Some(hist);
        Ok(tb)
    }

    /// Builds probes and evaluation problems around an existing model.
    pub fn from_model(config: HarnessConfig, corpus: Vec<Problem>, model: ToyModel) -> Result<Self> {
        let datasets = build_contrastive_sites(&model, &corpus, &all_sites(&model))?;
        let bank = train_bank(datasets.values(), &config.probe, config.probe_holdout)?;
        Self::from_parts(config, corpus, model, datasets, bank)
    }

    /// Assembles a testbed from stored artifacts. With an empty bank there
    /// are no intervention sites and only [`Method::None`] can run.
    pub fn from_parts(
        config: HarnessConfig,
        corpus: Vec<Problem>,
        model: ToyModel,
        datasets: BTreeMap<SiteKey, ContrastiveDataset>,
        bank: ProbeBank,
    ) -> Result<Self> {
        let eval = held_out_problems(&config.corpus, &corpus, config.eval_size, config.eval_seed)?;
        let mut sites = if bank.is_empty() {
            Vec::new()
        } else {
            select_sites(&bank, Some(config.probe_site), config.top_fraction)?
        };
        sites.sort();
        Ok(Self {
            config,
            corpus,
            eval,
            model,
            lm_history: None,
            datasets,
            bank,
            sites,
        })
    }

    fn site_data(&self, key: &SiteKey) -> Result<&ContrastiveDataset> {
        self.datasets
            .get(key)
            .ok_or_else(|| Error::InvalidArgument(format!("no contrastive data for layer {} site {}", key.0, key.1)))
    }

    fn per_site<T>(&self, f: impl Fn(&SiteKey) -> Result<T>) -> Result<BTreeMap<SiteKey, T>> {
        self.sites.iter().map(|k| Ok((*k, f(k)?))).collect()
    }

    /// Control vectors for one of the additive methods at every plan site.
    pub fn control_vectors(&self, method: Method) -> Result<BTreeMap<SiteKey, ControlVector>> {
        self.per_site(|k| match method {
            Method::CDim => {
                let d = self.site_data(k)?;
                dim_vector(&d.positives(), &d.negatives())
            }
            Method::CPca => {
                let (pos, neg) = build_paired(&self.model, &self.corpus, *k)?;
                pca_vector(&pos, &neg)
            }
            Method::CLr => lr_vector(self.site_data(k)?, &self.config.linear_fit),
            other => Err(Error::InvalidArgument(format!("{other} is not a control-vector method"))),
        })
    }

    pub fn plan(&self, method: Method, opt: &OptimizerConfig, strength: f64) -> Result<InterventionPlan> {
        let mode = match method {
            Method::None => return Ok(InterventionPlan::none()),
            Method::Optimize => InterventionMode::Optimize {
                config: opt.clone(),
                probes: self.bank.clone(),
            },
            Method::CDim | Method::CPca | Method::CLr => InterventionMode::Control(
                self.control_vectors(method)?
                    .into_iter()
                    .map(|(k, cv)| (k, cv.with_strength(strength)))
                    .collect(),
            ),
            Method::PSvm => InterventionMode::Project(self.per_site(|k| svm_train(self.site_data(k)?, &self.config.linear_fit))?),
            Method::Da => InterventionMode::Ablate(self.per_site(|k| {
                let d = self.site_data(k)?;
                ablation_direction(&d.positives(), &d.negatives())
            })?),
        };
        InterventionPlan::new(self.sites.clone(), mode, self.config.prefill_target_fraction)
    }

    pub fn evaluate(&self, method: &str, plan: &InterventionPlan, keep_traces: bool) -> Result<Evaluation> {
        let vocab = self.model.vocab();
        let eos = vocab.id(EOS)?;
        let mut generations = Vec::with_capacity(self.eval.len());
        let mut texts = Vec::with_capacity(self.eval.len());
        let mut all_tokens: Vec<String> = Vec::new();
        let mut ppl_sum = 0.0;
        let mut correct = 0usize;
        let mut stepwise = 0usize;
        for (i, p) in self.eval.iter().enumerate() {
            let prompt = vocab.encode(&p.prompt)?;
            let opts = GenerateOptions {
                max_new: self.config.max_new,
                eos: Some(eos),
                seed: self.config.generation_seed.wrapping_add(i as u64),
                keep_traces,
            };
            let g = generate(&self.model, &prompt, plan, &opts)?;
            let mut full = prompt.clone();
            full.extend_from_slice(&g.tokens);
            ppl_sum += self.model.perplexity(&full)?;
            let text: Vec<String> = vocab.decode(&g.tokens)?.into_iter().filter(|t| t != EOS).collect();
            if extract_answer(&text).map(|a| a.to_string()) == Some(p.answer.clone()) {
                correct += 1;
            }
            if is_stepwise(&text) {
                stepwise += 1;
            }
            all_tokens.extend(text.iter().cloned());
            texts.push(text);
            generations.push(g);
        }
        let n = self.eval.len().max(1) as f64;
        let flu = if all_tokens.len() >= 3 {
            fluency(&all_tokens, DEFAULT_W2, DEFAULT_W3)?.weighted
        } else {
            0.0
        };
        let intervened: usize = generations.iter().map(Generation::intervened_tokens).sum();
        let report = ExperimentReport {
            method: method.to_string(),
            parameter: String::new(),
            value: None,
            n_problems: self.eval.len(),
            accuracy: correct as f64 / n,
            stepwise_rate: stepwise as f64 / n,
            fluency: flu,
            perplexity: ppl_sum / n,
            mean_intervened_tokens: intervened as f64 / n,
            judge_score: None,
            traces: String::new(),
            error: None,
        };
        Ok(Evaluation {
            report,
            generations,
            texts,
        })
    }

    pub fn run(&self, method: Method, opt: &OptimizerConfig, strength: f64) -> Result<Evaluation> {
        let plan = self.plan(method, opt, strength)?;
        self.evaluate(method.name(), &plan, false)
    }
}
