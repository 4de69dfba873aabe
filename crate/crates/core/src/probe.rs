// SPDX-License-Identifier: MIT OR Apache-2.0

//! Two-layer MLP probes scoring `P(target mode | h)`.
//!
//! The probe is `σ(w2 · relu(W1 h + b1) + b2)`. Besides the forward value it
//! exposes the closed-form input gradient of `log f(h)`, which is the
//! likelihood half of the MAP objective. The rectifier's subgradient at 0 is 0.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Vector};
use crate::site::{Site, SiteKey};

pub const PROBE_MAGIC: &[u8; 6] = b"PROBE1";
pub const PROBE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    input_dim: usize,
    hidden_width: usize,
    /// Row-major `hidden_width × input_dim`.
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log σ(z)` without overflow.
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

// Keeps forward output in the open interval when the logit saturates.
const PROB_FLOOR: f64 = 1e-300;
const PROB_CEIL: f64 = 1.0 - f64::EPSILON;

impl Probe {
    pub fn from_parts(
        input_dim: usize,
        hidden_width: usize,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: f64,
    ) -> Result<Self> {
        if input_dim == 0 || hidden_width == 0 {
            return Err(Error::InvalidArgument("probe dims must be >= 1".into()));
        }
        if w1.len() != hidden_width * input_dim {
            return Err(Error::DimensionMismatch {
                expected: hidden_width * input_dim,
                got: w1.len(),
            });
        }
        for (len, name) in [(b1.len(), "b1"), (w2.len(), "w2")] {
            if len != hidden_width {
                return Err(Error::InvalidArgument(format!(
                    "{name} has length {len}, expected {hidden_width}"
                )));
            }
        }
        let finite = w1.iter().chain(&b1).chain(&w2).all(|v| v.is_finite()) && b2.is_finite();
        if !finite {
            return Err(Error::NonFinite("probe parameters"));
        }
        Ok(Self {
            input_dim,
            hidden_width,
            w1,
            b1,
            w2,
            b2,
        })
    }

    /// He-initialized first layer, scaled-normal second layer, zero biases.
    pub fn random(input_dim: usize, hidden_width: usize, rng: &mut RngStream) -> Result<Self> {
        let s1 = (2.0 / input_dim as f64).sqrt();
        let s2 = (1.0 / hidden_width as f64).sqrt();
        let w1 = (0..hidden_width * input_dim)
            .map(|_| s1 * rng.standard_normal())
            .collect();
        let w2 = (0..hidden_width).map(|_| s2 * rng.standard_normal()).collect();
        Self::from_parts(input_dim, hidden_width, w1, vec![0.0; hidden_width], w2, 0.0)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden_width
    }

    fn check_input(&self, h: &Vector) -> Result<()> {
        if h.dim() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: h.dim(),
            });
        }
        Ok(())
    }

    /// Hidden pre-activations `W1 h + b1`.
    fn pre_activations(&self, h: &[f64]) -> Vec<f64> {
        self.w1
            .chunks_exact(self.input_dim)
            .zip(&self.b1)
            .map(|(row, b)| b + crate::numerics::dot(row, h))
            .collect()
    }

    fn logit_from_pre(&self, pre: &[f64]) -> f64 {
        self.b2
            + pre
                .iter()
                .zip(&self.w2)
                .map(|(z, w)| z.max(0.0) * w)
                .sum::<f64>()
    }

    /// Pre-sigmoid output.
    pub fn logit(&self, h: &Vector) -> Result<f64> {
        self.check_input(h)?;
        Ok(self.logit_from_pre(&self.pre_activations(h.as_slice())))
    }

    /// `f(h) ∈ (0, 1)`.
    pub fn forward(&self, h: &Vector) -> Result<f64> {
        Ok(sigmoid(self.logit(h)?).clamp(PROB_FLOOR, PROB_CEIL))
    }

    /// `log f(h)`, computed from the logit so it stays finite.
    pub fn log_forward(&self, h: &Vector) -> Result<f64> {
        Ok(log_sigmoid(self.logit(h)?))
    }

    /// `∇_h log f(h) = σ(−z) · W1ᵀ (w2 ⊙ 1[pre > 0])`.
    pub fn input_gradient(&self, h: &Vector) -> Result<Vector> {
        self.check_input(h)?;
        let pre = self.pre_activations(h.as_slice());
        let z = self.logit_from_pre(&pre);
        let outer = sigmoid(-z);
        let mut grad = vec![0.0; self.input_dim];
        for (j, row) in self.w1.chunks_exact(self.input_dim).enumerate() {
            if pre[j] > 0.0 {
                let c = outer * self.w2[j];
                for (g, w) in grad.iter_mut().zip(row) {
                    *g += c * w;
                }
            }
        }
        Vector::new(grad)
    }

    /// Rounds every parameter to the nearest `f32`, so serialization is lossless.
    fn quantize(&mut self) {
        let q = |v: &mut f64| *v = f64::from(*v as f32);
        self.w1.iter_mut().for_each(q);
        self.b1.iter_mut().for_each(q);
        self.w2.iter_mut().for_each(q);
        q(&mut self.b2);
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(PROBE_MAGIC)?;
        w.write_all(&PROBE_VERSION.to_le_bytes())?;
        w.write_all(&(self.input_dim as u32).to_le_bytes())?;
        w.write_all(&(self.hidden_width as u32).to_le_bytes())?;
        for v in self.w1.iter().chain(&self.b1).chain(&self.w2).chain(std::iter::once(&self.b2)) {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic).map_err(|_| Error::TruncatedHeader)?;
        if &magic != PROBE_MAGIC {
            return Err(Error::BadMagic { expected: "PROBE1" });
        }
        let version = read_u32(&mut r)?;
        if version != PROBE_VERSION {
            return Err(Error::VersionMismatch {
                expected: PROBE_VERSION,
                found: version,
            });
        }
        let input_dim = read_u32(&mut r)? as usize;
        let hidden = read_u32(&mut r)? as usize;
        let n = hidden
            .checked_mul(input_dim)
            .and_then(|x| x.checked_add(2 * hidden + 1))
            .ok_or(Error::TruncatedHeader)?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != n * 4 {
            return Err(Error::TruncatedRecord(0));
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        let (w1, rest) = vals.split_at(hidden * input_dim);
        let (b1, rest) = rest.split_at(hidden);
        let (w2, rest) = rest.split_at(hidden);
        Self::from_parts(input_dim, hidden, w1.to_vec(), b1.to_vec(), w2.to_vec(), rest[0])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::read_from(std::fs::File::open(path)?)
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::TruncatedHeader)?;
    Ok(u32::from_le_bytes(b))
}

/// Labeled hidden states from one (layer, site).
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveDataset {
    pub layer: usize,
    pub site: Site,
    pub records: Vec<(Vector, u8)>,
}

impl ContrastiveDataset {
    pub fn new(layer: usize, site: Site, records: Vec<(Vector, u8)>) -> Result<Self> {
        if let Some((first, _)) = records.first() {
            let dim = first.dim();
            for (v, label) in &records {
                if v.dim() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: v.dim(),
                    });
                }
                if *label > 1 {
                    return Err(Error::InvalidArgument(format!("label {label} not in {{0,1}}")));
                }
            }
        }
        Ok(Self { layer, site, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.records.first().map(|(v, _)| v.dim())
    }

    pub fn count(&self, label: u8) -> usize {
        self.records.iter().filter(|(_, l)| *l == label).count()
    }

    pub fn positives(&self) -> Vec<Vector> {
        self.by_label(1)
    }

    pub fn negatives(&self) -> Vec<Vector> {
        self.by_label(0)
    }

    fn by_label(&self, label: u8) -> Vec<Vector> {
        self.records
            .iter()
            .filter(|(_, l)| *l == label)
            .map(|(v, _)| v.clone())
            .collect()
    }

    /// Same states with every label flipped.
    pub fn flipped(&self) -> Self {
        Self {
            layer: self.layer,
            site: self.site,
            records: self.records.iter().map(|(v, l)| (v.clone(), 1 - l)).collect(),
        }
    }

    /// Seeded shuffle followed by a split: the first part holds `1 - holdout` of the records.
    pub fn split(&self, holdout: f64, seed: u64) -> (Self, Self) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        RngStream::new(seed).shuffle(&mut idx);
        let n_test = ((self.len() as f64) * holdout).round() as usize;
        let take = |ids: &[usize]| Self {
            layer: self.layer,
            site: self.site,
            records: ids.iter().map(|&i| self.records[i].clone()).collect(),
        };
        (take(&idx[n_test..]), take(&idx[..n_test]))
    }

    /// Fails unless both labels are present.
    pub fn require_both_classes(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Empty("contrastive dataset"));
        }
        let pos = self.count(1);
        if pos == 0 {
            return Err(Error::SingleClass(0));
        }
        if pos == self.len() {
            return Err(Error::SingleClass(1));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub hidden_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 0.001,
            batch_size: 32,
            seed: 0,
            hidden_width: 64,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 || self.hidden_width == 0 {
            return Err(Error::InvalidArgument("batch_size and hidden_width must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy on `data`.
pub fn cross_entropy(p: &Probe, data: &ContrastiveDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("contrastive dataset"));
    }
    let mut total = 0.0;
    for (h, label) in &data.records {
        let z = p.logit(h)?;
        total -= if *label == 1 { log_sigmoid(z) } else { log_sigmoid(-z) };
    }
    Ok(total / data.len() as f64)
}

pub fn train_probe(data: &ContrastiveDataset, cfg: &TrainConfig) -> Result<Probe> {
    train_probe_with_history(data, cfg).map(|(p, _)| p)
}

/// Minibatch SGD on mean cross-entropy. Returns the probe and the mean
/// training loss of each epoch.
pub fn train_probe_with_history(
    data: &ContrastiveDataset,
    cfg: &TrainConfig,
) -> Result<(Probe, Vec<f64>)> {
    cfg.validate()?;
    data.require_both_classes()?;
    let dim = data.dim().expect("nonempty");
    let hidden = cfg.hidden_width;
    let mut rng = RngStream::new(cfg.seed);
    let mut p = Probe::random(dim, hidden, &mut rng)?;

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut gw1 = vec![0.0; hidden * dim];
    let mut gb1 = vec![0.0; hidden];
    let mut gw2 = vec![0.0; hidden];

    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            gw1.iter_mut().for_each(|g| *g = 0.0);
            gb1.iter_mut().for_each(|g| *g = 0.0);
            gw2.iter_mut().for_each(|g| *g = 0.0);
            let mut gb2 = 0.0;
            for &i in batch {
                let (h, label) = &data.records[i];
                let x = h.as_slice();
                let pre = p.pre_activations(x);
                let z = p.logit_from_pre(&pre);
                let y = f64::from(*label);
                epoch_loss -= if *label == 1 { log_sigmoid(z) } else { log_sigmoid(-z) };
                // d loss / d z for BCE with logits
                let dz = sigmoid(z) - y;
                gb2 += dz;
                for j in 0..hidden {
                    if pre[j] > 0.0 {
                        gw2[j] += dz * pre[j];
                        let dpre = dz * p.w2[j];
                        gb1[j] += dpre;
                        let row = &mut gw1[j * dim..(j + 1) * dim];
                        for (g, xi) in row.iter_mut().zip(x) {
                            *g += dpre * xi;
                        }
                    }
                }
            }
            let step = cfg.learning_rate / batch.len() as f64;
            for (w, g) in p.w1.iter_mut().zip(&gw1) {
                *w -= step * g;
            }
            for (w, g) in p.b1.iter_mut().zip(&gb1) {
                *w -= step * g;
            }
            for (w, g) in p.w2.iter_mut().zip(&gw2) {
                *w -= step * g;
            }
            p.b2 -= step * gb2;
        }
        if !epoch_loss.is_finite() {
            return Err(Error::NonFinite("probe training loss"));
        }
        history.push(epoch_loss / data.len() as f64);
    }
    p.quantize();
    Ok((p, history))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub accuracy: f64,
    pub f1: f64,
    pub roc_auc: f64,
}

/// Accuracy and F1 at threshold 0.5, plus ROC-AUC.
///
/// F1 is 0 when there are no positives and no positive predictions.
/// ROC-AUC is 0.5 when only one class is present.
pub fn evaluate_probe(p: &Probe, data: &ContrastiveDataset) -> Result<ProbeMetrics> {
    if data.is_empty() {
        return Err(Error::Empty("contrastive dataset"));
    }
    let scores = data
        .records
        .iter()
        .map(|(h, _)| p.forward(h))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<u8> = data.records.iter().map(|(_, l)| *l).collect();
    Ok(metrics_from_scores(&scores, &labels))
}

pub fn metrics_from_scores(scores: &[f64], labels: &[u8]) -> ProbeMetrics {
    let (mut tp, mut fp, mut fn_, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        let pred = s >= 0.5;
        match (pred, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
        if pred == (l == 1) {
            correct += 1;
        }
    }
    let denom = 2 * tp + fp + fn_;
    ProbeMetrics {
        accuracy: correct as f64 / scores.len() as f64,
        f1: if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 },
        roc_auc: roc_auc(scores, labels),
    }
}

/// Mann–Whitney AUC with average ranks for ties.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return 0.5;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // 1-based average rank of the tie group
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    u / (n_pos * n_neg) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeEntry {
    pub probe: Probe,
    pub metrics: ProbeMetrics,
}

/// One probe per (layer, site).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProbeBank {
    entries: BTreeMap<SiteKey, ProbeEntry>,
}

impl ProbeBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces the probe at `key`.
    pub fn insert(&mut self, key: SiteKey, probe: Probe, metrics: ProbeMetrics) {
        self.entries.insert(key, ProbeEntry { probe, metrics });
    }

    pub fn get(&self, key: &SiteKey) -> Option<&ProbeEntry> {
        self.entries.get(key)
    }

    pub fn probe(&self, key: &SiteKey) -> Result<&Probe> {
        self.entries.get(key).map(|e| &e.probe).ok_or_else(|| {
            Error::InvalidArgument(format!("no probe for layer {} site {}", key.0, key.1))
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SiteKey, &ProbeEntry)> {
        self.entries.iter()
    }

    /// Site type with the highest mean F1 across layers. Ties go to the lower site code.
    pub fn best_site(&self) -> Result<Site> {
        if self.is_empty() {
            return Err(Error::Empty("probe bank"));
        }
        let mut best: Option<(Site, f64)> = None;
        for site in Site::ALL {
            let f1s: Vec<f64> = self
                .entries
                .iter()
                .filter(|((_, s), _)| *s == site)
                .map(|(_, e)| e.metrics.f1)
                .collect();
            if f1s.is_empty() {
                continue;
            }
            let mean = f1s.iter().sum::<f64>() / f1s.len() as f64;
            if best.is_none_or(|(_, m)| mean > m) {
                best = Some((site, mean));
            }
        }
        Ok(best.expect("nonempty bank").0)
    }

    /// Writes `probe_L{layer}_{SITE}.bin` files and a `probes.csv` metrics table.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut table = csv::Writer::from_path(dir.join("probes.csv"))?;
        table.write_record(["layer", "site", "accuracy", "f1", "roc_auc", "file"])?;
        for ((layer, site), e) in &self.entries {
            let file = format!("probe_L{layer}_{site}.bin");
            e.probe.save(&dir.join(&file))?;
            table.write_record([
                layer.to_string(),
                site.to_string(),
                e.metrics.accuracy.to_string(),
                e.metrics.f1.to_string(),
                e.metrics.roc_auc.to_string(),
                file,
            ])?;
        }
        table.flush()?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let table_path = dir.join("probes.csv");
        if !table_path.exists() {
            return Err(Error::MissingArtifact(table_path));
        }
        let mut bank = ProbeBank::new();
        let mut rdr = csv::Reader::from_path(&table_path)?;
        for row in rdr.records() {
            let row = row?;
            let parse = |i: usize| -> Result<f64> {
                row[i]
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad number in probes.csv: {}", &row[i])))
            };
            let layer: usize = row[0]
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad layer {}", &row[0])))?;
            let site: Site = row[1].parse()?;
            let metrics = ProbeMetrics {
                accuracy: parse(2)?,
                f1: parse(3)?,
                roc_auc: parse(4)?,
            };
            let probe = Probe::load(&dir.join(&row[5]))?;
            bank.insert((layer, site), probe, metrics);
        }
        Ok(bank)
    }
}

/// The best `ceil(top_fraction · n_layers)` layers for one site type, by
/// descending F1 with ties broken toward the lower layer index.
///
/// With `site = None` the site type with the best mean F1 is used.
pub fn select_sites(bank: &ProbeBank, site: Option<Site>, top_fraction: f64) -> Result<Vec<SiteKey>> {
    if bank.is_empty() {
        return Err(Error::Empty("probe bank"));
    }
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "top_fraction must be in (0, 1], got {top_fraction}"
        )));
    }
    let site = match site {
        Some(s) => s,
        None => bank.best_site()?,
    };
    let mut layers: Vec<(usize, f64)> = bank
        .iter()
        .filter(|((_, s), _)| *s == site)
        .map(|((l, _), e)| (*l, e.metrics.f1))
        .collect();
    if layers.is_empty() {
        return Err(Error::InvalidArgument(format!("no probes for site {site}")));
    }
    layers.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let keep = ((top_fraction * layers.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(layers.into_iter().take(keep).map(|(l, _)| (l, site)).collect())
}

/// Trains one probe per dataset. Each probe gets its own stream forked from
/// `cfg.seed`, keyed by (layer, site); `holdout` of each dataset is held out for metrics.
pub fn train_bank<'a>(
    datasets: impl IntoIterator<Item = &'a ContrastiveDataset>,
    cfg: &TrainConfig,
    holdout: f64,
) -> Result<ProbeBank> {
    let base = RngStream::new(cfg.seed);
    let mut bank = ProbeBank::new();
    for data in datasets {
        let stream = base.fork((data.layer as u64) * 8 + u64::from(data.site.code()));
        let (train, test) = data.split(holdout, stream.seed());
        let mut probe_cfg = *cfg;
        probe_cfg.seed = stream.fork(1).seed();
        let probe = train_probe(&train, &probe_cfg)?;
        let eval_on = if test.is_empty() { &train } else { &test };
        let metrics = evaluate_probe(&probe, eval_on)?;
        bank.insert((data.layer, data.site), probe, metrics);
    }
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gaussian_sample;

    fn v(x: &[f64]) -> Vector {
        Vector::new(x.to_vec()).unwrap()
    }

    pub(crate) fn blobs(n_per_class: usize, sigma: f64, seed: u64) -> ContrastiveDataset {
        let mut rng = RngStream::new(seed);
        let mut records = Vec::new();
        for i in 0..2 * n_per_class {
            let label = (i % 2) as u8;
            let cx = if label == 1 { 2.0 } else { -2.0 };
            records.push((
                v(&[cx + sigma * rng.standard_normal(), sigma * rng.standard_normal()]),
                label,
            ));
        }
        ContrastiveDataset::new(0, Site::IntLayer, records).unwrap()
    }

    #[test]
    fn zero_probe_outputs_half() {
        let p = Probe::from_parts(3, 2, vec![0.0; 6], vec![0.0; 2], vec![0.0; 2], 0.0).unwrap();
        assert_eq!(p.forward(&v(&[1.0, -4.0, 9.0])).unwrap(), 0.5);
    }

    #[test]
    fn known_logit_value() {
        let p = Probe::from_parts(2, 1, vec![1.0, 0.0], vec![0.0], vec![4.0], 0.0).unwrap();
        let h = v(&[9f64.ln() / 4.0, 0.0]);
        assert!((p.forward(&h).unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn forward_range_and_dimension_check() {
        let mut rng = RngStream::new(3);
        for _ in 0..1000 {
            let p = Probe::random(5, 4, &mut rng).unwrap();
            let h = gaussian_sample(5, &mut rng).unwrap().scale(50.0).unwrap();
            let f = p.forward(&h).unwrap();
            assert!(f > 0.0 && f < 1.0);
        }
        let p = Probe::random(5, 4, &mut rng).unwrap();
        assert!(matches!(p.forward(&v(&[1.0])), Err(Error::DimensionMismatch { .. })));
        assert!(p.input_gradient(&v(&[1.0])).is_err());
    }

    #[test]
    fn linear_probe_gradient_closed_form() {
        // one hidden unit that is always active on the positive orthant
        let w = [0.5, -0.25, 1.0];
        let p = Probe::from_parts(3, 1, w.to_vec(), vec![100.0], vec![1.0], -100.0).unwrap();
        let h = v(&[0.3, 0.1, -0.2]);
        let s = sigmoid(crate::numerics::dot(&w, h.as_slice()));
        let g = p.input_gradient(&h).unwrap();
        for i in 0..3 {
            assert!((g[i] - (1.0 - s) * w[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_is_zero_on_inactive_side_of_kink() {
        let p = Probe::from_parts(1, 1, vec![1.0], vec![0.0], vec![3.0], 0.0).unwrap();
        assert_eq!(p.input_gradient(&v(&[0.0])).unwrap()[0], 0.0);
        assert_eq!(p.input_gradient(&v(&[-0.5])).unwrap()[0], 0.0);
        assert!(p.input_gradient(&v(&[0.5])).unwrap()[0] > 0.0);
    }

    #[test]
    fn separable_blobs_train_to_high_accuracy() {
        let train = blobs(200, 0.3, 1);
        let test = blobs(200, 0.3, 2);
        let cfg = TrainConfig { seed: 4, ..TrainConfig::default() };
        let (p, history) = train_probe_with_history(&train, &cfg).unwrap();
        assert_eq!(history.len(), 100);
        assert!(history.last().unwrap() < history.first().unwrap());
        assert!(evaluate_probe(&p, &test).unwrap().accuracy >= 0.99);
        assert!(evaluate_probe(&p, &train).unwrap().accuracy >= 0.99);
    }

    #[test]
    fn flipped_labels_negate_decision() {
        let train = blobs(200, 0.3, 1);
        let cfg = TrainConfig { seed: 4, ..TrainConfig::default() };
        let p = train_probe(&train, &cfg).unwrap();
        let q = train_probe(&train.flipped(), &cfg).unwrap();
        let test = blobs(100, 0.3, 9);
        let dev: f64 = test
            .records
            .iter()
            .map(|(h, _)| (q.forward(h).unwrap() - (1.0 - p.forward(h).unwrap())).abs())
            .sum::<f64>()
            / test.len() as f64;
        assert!(dev < 0.05, "mean abs deviation {dev}");
    }

    #[test]
    fn training_errors() {
        let empty = ContrastiveDataset::new(0, Site::Attn, vec![]).unwrap();
        assert!(matches!(train_probe(&empty, &TrainConfig::default()), Err(Error::Empty(_))));
        let one = ContrastiveDataset::new(0, Site::Attn, vec![(v(&[1.0]), 1), (v(&[2.0]), 1)]).unwrap();
        assert!(matches!(train_probe(&one, &TrainConfig::default()), Err(Error::SingleClass(1))));
        assert!(evaluate_probe(&Probe::random(1, 1, &mut RngStream::new(0)).unwrap(), &empty).is_err());
    }

    #[test]
    fn training_is_bit_reproducible() {
        let data = blobs(50, 0.5, 8);
        let cfg = TrainConfig { seed: 21, epochs: 10, ..TrainConfig::default() };
        assert_eq!(train_probe(&data, &cfg).unwrap(), train_probe(&data, &cfg).unwrap());
    }

    #[test]
    fn metrics_edge_cases() {
        let labels = [1u8, 1, 0, 0];
        let perfect = metrics_from_scores(&[0.9, 0.8, 0.1, 0.2], &labels);
        assert_eq!((perfect.accuracy, perfect.f1, perfect.roc_auc), (1.0, 1.0, 1.0));
        let chance = metrics_from_scores(&[0.5; 4], &[1, 0, 1, 0]);
        assert_eq!(chance.roc_auc, 0.5);
        // 0.5 counts as positive at the threshold; half of balanced data is right
        assert_eq!(chance.accuracy, 0.5);
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut rng = RngStream::new(17);
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..50 {
            // coarse rounding creates ties
            scores.push((rng.uniform() * 10.0).round() / 10.0);
            labels.push(u8::from(rng.uniform() < 0.5));
        }
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..50 {
            for j in 0..50 {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        assert!((roc_auc(&scores, &labels) - wins / pairs).abs() < 1e-12);
    }

    fn bank_with_f1(f1s: &[f64]) -> ProbeBank {
        let mut bank = ProbeBank::new();
        let p = Probe::random(2, 2, &mut RngStream::new(0)).unwrap();
        for (l, &f1) in f1s.iter().enumerate() {
            bank.insert(
                (l, Site::IntLayer),
                p.clone(),
                ProbeMetrics { accuracy: 0.5, f1, roc_auc: 0.5 },
            );
        }
        bank
    }

    #[test]
    fn select_sites_ranking() {
        let bank = bank_with_f1(&[0.6, 0.9, 0.8, 0.7]);
        assert_eq!(
            select_sites(&bank, Some(Site::IntLayer), 0.5).unwrap(),
            vec![(1, Site::IntLayer), (2, Site::IntLayer)]
        );
        let all: Vec<usize> = select_sites(&bank, None, 1.0).unwrap().iter().map(|k| k.0).collect();
        assert_eq!(all, vec![1, 2, 3, 0]);
        let tied = bank_with_f1(&[0.7, 0.9, 0.7, 0.7]);
        let order: Vec<usize> = select_sites(&tied, None, 1.0).unwrap().iter().map(|k| k.0).collect();
        assert_eq!(order, vec![1, 0, 2, 3]);
        assert!(select_sites(&ProbeBank::new(), None, 0.5).is_err());
        assert!(select_sites(&bank, None, 0.0).is_err());
    }

    #[test]
    fn serialization_round_trip_and_rejection() {
        let data = blobs(20, 0.5, 8);
        let p = train_probe(&data, &TrainConfig { epochs: 3, ..TrainConfig::default() }).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(Probe::read_from(buf.as_slice()).unwrap(), p);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Probe::read_from(bad.as_slice()), Err(Error::BadMagic { .. })));
        let mut wrong_version = buf.clone();
        wrong_version[6] = 9;
        assert!(matches!(
            Probe::read_from(wrong_version.as_slice()),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
        assert!(Probe::read_from(&buf[..buf.len() - 2]).is_err());
    }
}
