// SPDX-License-Identifier: MIT OR Apache-2.0

//! Comparison steering methods: additive control vectors (difference of
//! means, principal component of paired differences, logistic-regression
//! weights), projection onto a linear-SVM boundary, and directional ablation.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{check_dims, dot, RngStream, Vector};
use crate::probe::{read_u32, ContrastiveDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControlMethod {
    Dim,
    Pca,
    Lr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlVector {
    pub direction: Vector,
    pub strength: f64,
    pub method: ControlMethod,
    pub unit_normalized: bool,
}

impl ControlVector {
    pub fn new(direction: Vector, strength: f64, method: ControlMethod, unit_normalized: bool) -> Result<Self> {
        if direction.norm() == 0.0 {
            return Err(Error::ZeroNorm("control vector direction"));
        }
        if !strength.is_finite() {
            return Err(Error::NonFinite("control strength"));
        }
        Ok(Self {
            direction,
            strength,
            method,
            unit_normalized,
        })
    }

    pub fn with_strength(&self, strength: f64) -> Self {
        Self {
            strength,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperplane {
    pub normal: Vector,
    pub bias: f64,
}

impl Hyperplane {
    pub fn new(normal: Vector, bias: f64) -> Result<Self> {
        if normal.norm() == 0.0 {
            return Err(Error::ZeroNorm("hyperplane normal"));
        }
        Ok(Self { normal, bias })
    }

    pub fn decision(&self, h: &Vector) -> Result<f64> {
        Ok(self.normal.dot(h)? + self.bias)
    }
}

/// Fixed training hyperparameters shared by the LR and SVM fits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFitConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for LinearFitConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 0.01,
            l2: 1e-3,
            seed: 0,
        }
    }
}

fn mean(vs: &[Vector]) -> Result<Vec<f64>> {
    let first = vs.first().ok_or(Error::Empty("vector list"))?;
    let mut acc = vec![0.0; first.dim()];
    for v in vs {
        check_dims(first, v)?;
        for (a, x) in acc.iter_mut().zip(v.as_slice()) {
            *a += x;
        }
    }
    let n = vs.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// `mean(pos) − mean(neg)`.
pub fn dim_vector(pos: &[Vector], neg: &[Vector]) -> Result<ControlVector> {
    let mp = mean(pos)?;
    let mn = mean(neg)?;
    if mp.len() != mn.len() {
        return Err(Error::DimensionMismatch {
            expected: mp.len(),
            got: mn.len(),
        });
    }
    let direction = Vector::new(mp.iter().zip(&mn).map(|(a, b)| a - b).collect())?;
    ControlVector::new(direction, 1.0, ControlMethod::Dim, false)
}

/// Eigenpairs of a symmetric matrix by cyclic Jacobi rotations.
/// Returns `(eigenvalues, eigenvectors as columns of a row-major matrix)`.
fn symmetric_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j].powi(2))
            .sum();
        let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

/// Top principal direction of the paired differences `posᵢ − negᵢ`.
///
/// Uses the uncentered second-moment matrix of the differences, so a set of
/// identical differences yields their common direction. The unit direction
/// is signed to agree with the mean difference.
pub fn pca_vector(pos: &[Vector], neg: &[Vector]) -> Result<ControlVector> {
    if pos.len() != neg.len() {
        return Err(Error::InvalidArgument(format!(
            "pca_vector needs paired lists, got {} and {}",
            pos.len(),
            neg.len()
        )));
    }
    if pos.len() < 2 {
        return Err(Error::InvalidArgument("pca_vector needs at least 2 pairs".into()));
    }
    let diffs = pos
        .iter()
        .zip(neg)
        .map(|(p, n)| p.sub(n))
        .collect::<Result<Vec<_>>>()?;
    let d = diffs[0].dim();
    let mut m = vec![0.0; d * d];
    for diff in &diffs {
        let x = diff.as_slice();
        for i in 0..d {
            for j in 0..d {
                m[i * d + j] += x[i] * x[j];
            }
        }
    }
    let n = diffs.len() as f64;
    m.iter_mut().for_each(|x| *x /= n);
    if m.iter().all(|&x| x == 0.0) {
        return Err(Error::InvalidArgument("difference set has rank zero".into()));
    }
    let (vals, vecs) = symmetric_eigen(m, d);
    let top = (0..d)
        .max_by(|&a, &b| vals[a].total_cmp(&vals[b]).then(b.cmp(&a)))
        .expect("d >= 1");
    let mut dir: Vec<f64> = (0..d).map(|k| vecs[k * d + top]).collect();
    let norm = dot(&dir, &dir).sqrt();
    dir.iter_mut().for_each(|x| *x /= norm);
    let mean_diff = mean(&diffs)?;
    if dot(&dir, &mean_diff) < 0.0 {
        dir.iter_mut().for_each(|x| *x = -*x);
    }
    ControlVector::new(Vector::new(dir)?, 1.0, ControlMethod::Pca, true)
}

fn require_varying(data: &ContrastiveDataset) -> Result<()> {
    data.require_both_classes()?;
    let first = &data.records[0].0;
    if data.records.iter().all(|(v, _)| v == first) {
        return Err(Error::InvalidArgument("features are constant across the dataset".into()));
    }
    Ok(())
}

/// Weight vector of an L2-regularized logistic regression fit by full-batch
/// gradient descent from zero.
pub fn lr_vector(data: &ContrastiveDataset, cfg: &LinearFitConfig) -> Result<ControlVector> {
    require_varying(data)?;
    let dim = data.dim().expect("nonempty");
    let n = data.len() as f64;
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut gw = vec![0.0; dim];
    for _ in 0..cfg.epochs {
        gw.iter_mut().for_each(|g| *g = 0.0);
        let mut gb = 0.0;
        for (h, label) in &data.records {
            let x = h.as_slice();
            let z = dot(&w, x) + b;
            let err = 1.0 / (1.0 + (-z).exp()) - f64::from(*label);
            gb += err;
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += err * xi;
            }
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= cfg.learning_rate * (g / n + cfg.l2 * *wi);
        }
        b -= cfg.learning_rate * gb / n;
    }
    let direction = Vector::new(w).map_err(|_| Error::NonFinite("logistic regression weights"))?;
    if direction.norm() < 1e-12 {
        return Err(Error::InvalidArgument("logistic regression found no direction".into()));
    }
    ControlVector::new(direction, 1.0, ControlMethod::Lr, false)
}

/// `h + strength · direction`.
pub fn apply_control(h: &Vector, cv: &ControlVector) -> Result<Vector> {
    h.axpy(cv.strength, &cv.direction)
}

/// Linear SVM (hinge loss + L2 on the normal) by shuffled per-sample
/// subgradient descent. Labels 1/0 map to +1/−1.
pub fn svm_train(data: &ContrastiveDataset, cfg: &LinearFitConfig) -> Result<Hyperplane> {
    require_varying(data)?;
    let dim = data.dim().expect("nonempty");
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = RngStream::new(cfg.seed);
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for &i in &order {
            let (h, label) = &data.records[i];
            let x = h.as_slice();
            let y = if *label == 1 { 1.0 } else { -1.0 };
            let margin = y * (dot(&w, x) + b);
            for wi in w.iter_mut() {
                *wi -= cfg.learning_rate * cfg.l2 * *wi;
            }
            if margin < 1.0 {
                for (wi, xi) in w.iter_mut().zip(x) {
                    *wi += cfg.learning_rate * y * xi;
                }
                b += cfg.learning_rate * y;
            }
        }
    }
    let normal = Vector::new(w).map_err(|_| Error::NonFinite("svm weights"))?;
    Hyperplane::new(normal, b)
}

/// Orthogonal projection of `h` onto the hyperplane.
pub fn svm_project(h: &Vector, plane: &Hyperplane) -> Result<Vector> {
    let nn = plane.normal.norm().powi(2);
    if nn == 0.0 {
        return Err(Error::ZeroNorm("hyperplane normal"));
    }
    let offset = plane.decision(h)? / nn;
    h.axpy(-offset, &plane.normal)
}

/// `h − (h·v̂) v̂`.
pub fn directional_ablation(h: &Vector, v: &Vector) -> Result<Vector> {
    let vv = v.norm().powi(2);
    if vv == 0.0 {
        return Err(Error::ZeroNorm("ablation direction"));
    }
    let coef = h.dot(v)? / vv;
    h.axpy(-coef, v)
}

/// Direction ablated by DA: the difference of means pointing toward the
/// negative (non-target) class.
pub fn ablation_direction(pos: &[Vector], neg: &[Vector]) -> Result<Vector> {
    Ok(dim_vector(neg, pos)?.direction)
}

/// Any steering artifact, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum SteeringArtifact {
    Control(ControlVector),
    Plane(Hyperplane),
    Ablation(Vector),
}

pub const STEER_MAGIC: &[u8; 6] = b"STEER1";
pub const STEER_VERSION: u32 = 1;

impl SteeringArtifact {
    fn tag(&self) -> u8 {
        match self {
            SteeringArtifact::Control(cv) => match cv.method {
                ControlMethod::Dim => 0,
                ControlMethod::Pca => 1,
                ControlMethod::Lr => 2,
            },
            SteeringArtifact::Plane(_) => 3,
            SteeringArtifact::Ablation(_) => 4,
        }
    }

    /// `magic | version u32 | tag u8 | unit flag u8 | dim u32 | scalar f32 | dim × f32`,
    /// all little-endian. The scalar is the strength, the bias, or 0.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (vec, scalar, unit) = match self {
            SteeringArtifact::Control(cv) => (&cv.direction, cv.strength, cv.unit_normalized),
            SteeringArtifact::Plane(p) => (&p.normal, p.bias, false),
            SteeringArtifact::Ablation(v) => (v, 0.0, false),
        };
        let mut out = Vec::with_capacity(20 + 4 * vec.dim());
        out.extend_from_slice(STEER_MAGIC);
        out.extend_from_slice(&STEER_VERSION.to_le_bytes());
        out.push(self.tag());
        out.push(u8::from(unit));
        out.extend_from_slice(&(vec.dim() as u32).to_le_bytes());
        out.extend_from_slice(&(scalar as f32).to_le_bytes());
        for x in vec.as_slice() {
            out.extend_from_slice(&(*x as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let r = &mut bytes;
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic).map_err(|_| Error::TruncatedHeader)?;
        if &magic != STEER_MAGIC {
            return Err(Error::BadMagic { expected: "STEER1" });
        }
        let version = read_u32(r)?;
        if version != STEER_VERSION {
            return Err(Error::VersionMismatch {
                expected: STEER_VERSION,
                found: version,
            });
        }
        let mut flags = [0u8; 2];
        r.read_exact(&mut flags).map_err(|_| Error::TruncatedHeader)?;
        let dim = read_u32(r)? as usize;
        let mut scalar = [0u8; 4];
        r.read_exact(&mut scalar).map_err(|_| Error::TruncatedHeader)?;
        let scalar = f64::from(f32::from_le_bytes(scalar));
        if r.len() != dim * 4 {
            return Err(Error::TruncatedRecord(0));
        }
        let vec = Vector::new(
            r.chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect(),
        )?;
        let unit = flags[1] != 0;
        Ok(match flags[0] {
            0 => SteeringArtifact::Control(ControlVector::new(vec, scalar, ControlMethod::Dim, unit)?),
            1 => SteeringArtifact::Control(ControlVector::new(vec, scalar, ControlMethod::Pca, unit)?),
            2 => SteeringArtifact::Control(ControlVector::new(vec, scalar, ControlMethod::Lr, unit)?),
            3 => SteeringArtifact::Plane(Hyperplane::new(vec, scalar)?),
            4 => SteeringArtifact::Ablation(vec),
            other => {
                return Err(Error::InvalidEnum {
                    field: "method",
                    value: i64::from(other),
                    record: 0,
                })
            }
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{cosine_similarity, gaussian_sample};
    use crate::site::Site;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> Vector {
        Vector::new(x.to_vec()).unwrap()
    }

    fn blobs(axis_sep: f64, n: usize, seed: u64) -> ContrastiveDataset {
        let mut rng = RngStream::new(seed);
        let records = (0..2 * n)
            .map(|i| {
                let label = (i % 2) as u8;
                let c = if label == 1 { axis_sep } else { -axis_sep };
                (v(&[c + 0.3 * rng.standard_normal(), 0.3 * rng.standard_normal()]), label)
            })
            .collect();
        ContrastiveDataset::new(0, Site::IntLayer, records).unwrap()
    }

    #[test]
    fn dim_examples() {
        let pos = [v(&[1.0, 0.0]), v(&[3.0, 0.0])];
        let neg = [v(&[0.0, 1.0]), v(&[0.0, 3.0])];
        assert_eq!(dim_vector(&pos, &neg).unwrap().direction, v(&[2.0, -2.0]));
        assert!(matches!(dim_vector(&pos, &pos), Err(Error::ZeroNorm(_))));
        assert_eq!(
            dim_vector(&pos[..1], &neg[..1]).unwrap().direction,
            pos[0].sub(&neg[0]).unwrap()
        );
        assert!(matches!(dim_vector(&[], &neg), Err(Error::Empty(_))));
    }

    #[test]
    fn pca_examples() {
        let neg = [v(&[0.0, 0.0]), v(&[1.0, 1.0]), v(&[-2.0, 3.0])];
        let pos: Vec<Vector> = neg.iter().map(|n| n.add(&v(&[1.0, 1.0])).unwrap()).collect();
        let cv = pca_vector(&pos, &neg).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert!((cv.direction[0] - s).abs() < 1e-12 && (cv.direction[1] - s).abs() < 1e-12);

        let zeros = [v(&[0.0, 0.0]), v(&[0.0, 0.0]), v(&[0.0, 0.0])];
        let pos = [v(&[1.0, 0.0]), v(&[-1.0, 0.0]), v(&[2.0, 0.0])];
        let cv = pca_vector(&pos, &zeros).unwrap();
        assert!((cv.direction[0] - 1.0).abs() < 1e-12 && cv.direction[1].abs() < 1e-12);

        assert!(pca_vector(&zeros, &zeros).is_err());
        assert!(pca_vector(&pos[..1], &zeros[..1]).is_err());
        assert!(pca_vector(&pos, &zeros[..2]).is_err());
    }

    /// Power iteration on the same second-moment matrix.
    fn power_iteration_top(diffs: &[Vector]) -> Vec<f64> {
        let d = diffs[0].dim();
        let mut x = vec![1.0; d];
        for _ in 0..5000 {
            let mut y = vec![0.0; d];
            for diff in diffs {
                let proj = dot(diff.as_slice(), &x);
                for (yi, di) in y.iter_mut().zip(diff.as_slice()) {
                    *yi += proj * di;
                }
            }
            let n = dot(&y, &y).sqrt();
            x = y.iter().map(|v| v / n).collect();
        }
        x
    }

    #[test]
    fn pca_matches_power_iteration_oracle() {
        let mut rng = RngStream::new(12);
        let d = 20;
        let axis = gaussian_sample(d, &mut rng).unwrap();
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for _ in 0..60 {
            let n = gaussian_sample(d, &mut rng).unwrap();
            let coef = 3.0 * rng.standard_normal() + 1.0;
            let noise = gaussian_sample(d, &mut rng).unwrap().scale(0.3).unwrap();
            pos.push(n.axpy(coef, &axis).unwrap().add(&noise).unwrap());
            neg.push(n);
        }
        let cv = pca_vector(&pos, &neg).unwrap();
        let diffs: Vec<Vector> = pos.iter().zip(&neg).map(|(p, n)| p.sub(n).unwrap()).collect();
        let oracle = v(&power_iteration_top(&diffs));
        assert!(cosine_similarity(&cv.direction, &oracle).unwrap().abs() > 0.999);
    }

    #[test]
    fn lr_direction_and_symmetry() {
        let data = blobs(2.0, 100, 3);
        let cfg = LinearFitConfig::default();
        let cv = lr_vector(&data, &cfg).unwrap();
        assert!(cosine_similarity(&cv.direction, &v(&[1.0, 0.0])).unwrap().abs() > 0.99);
        let flipped = lr_vector(&data.flipped(), &cfg).unwrap();
        let cos = cosine_similarity(&cv.direction, &flipped.direction).unwrap();
        assert!(cos.clamp(-1.0, 1.0).acos().to_degrees() > 178.0);
        let constant = ContrastiveDataset::new(
            0,
            Site::Mlp,
            vec![(v(&[1.0, 2.0]), 0), (v(&[1.0, 2.0]), 1), (v(&[1.0, 2.0]), 1)],
        )
        .unwrap();
        assert!(lr_vector(&constant, &cfg).is_err());
        let single = ContrastiveDataset::new(0, Site::Mlp, vec![(v(&[1.0]), 1), (v(&[2.0]), 1)]).unwrap();
        assert!(matches!(lr_vector(&single, &cfg), Err(Error::SingleClass(_))));
    }

    #[test]
    fn apply_control_examples() {
        let cv = ControlVector::new(v(&[2.0, -2.0]), 1.0, ControlMethod::Dim, false).unwrap();
        let h = v(&[0.5, 0.25]);
        assert_eq!(apply_control(&h, &cv.with_strength(0.0)).unwrap(), h);
        assert_eq!(apply_control(&v(&[0.0, 0.0]), &cv).unwrap(), v(&[2.0, -2.0]));
        let there = apply_control(&h, &cv.with_strength(-1.0)).unwrap();
        assert_eq!(apply_control(&there, &cv).unwrap(), h);
        assert!(apply_control(&v(&[1.0]), &cv).is_err());
    }

    #[test]
    fn svm_fit_properties() {
        let data = blobs(2.0, 100, 5);
        let cfg = LinearFitConfig::default();
        let plane = svm_train(&data, &cfg).unwrap();
        let correct = data
            .records
            .iter()
            .filter(|(h, l)| (plane.decision(h).unwrap() > 0.0) == (*l == 1))
            .count();
        assert!(correct as f64 / data.len() as f64 >= 0.99);
        assert!(plane.bias.abs() < 0.1 * plane.normal.norm());

        let scaled = ContrastiveDataset::new(
            0,
            Site::IntLayer,
            data.records.iter().map(|(h, l)| (h.scale(10.0).unwrap(), *l)).collect(),
        )
        .unwrap();
        let plane10 = svm_train(&scaled, &cfg).unwrap();
        for ((h, _), (h10, _)) in data.records.iter().zip(&scaled.records) {
            assert_eq!(plane.decision(h).unwrap() > 0.0, plane10.decision(h10).unwrap() > 0.0);
        }
    }

    #[test]
    fn projection_examples() {
        let plane = Hyperplane::new(v(&[1.0, 0.0]), 0.0).unwrap();
        assert_eq!(svm_project(&v(&[-2.0, 3.0]), &plane).unwrap(), v(&[0.0, 3.0]));
        assert_eq!(svm_project(&v(&[0.0, 7.0]), &plane).unwrap(), v(&[0.0, 7.0]));
        assert!(Hyperplane::new(v(&[0.0, 0.0]), 1.0).is_err());
    }

    #[test]
    fn ablation_examples() {
        assert_eq!(directional_ablation(&v(&[1.0, 1.0]), &v(&[1.0, 0.0])).unwrap(), v(&[0.0, 1.0]));
        assert_eq!(directional_ablation(&v(&[0.0, 2.0]), &v(&[3.0, 0.0])).unwrap(), v(&[0.0, 2.0]));
        assert!(directional_ablation(&v(&[1.0, 1.0]), &v(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn artifact_round_trip() {
        let items = [
            SteeringArtifact::Control(ControlVector::new(v(&[0.5, -1.25]), 1.0, ControlMethod::Pca, true).unwrap()),
            SteeringArtifact::Plane(Hyperplane::new(v(&[1.0, 2.0]), -0.5).unwrap()),
            SteeringArtifact::Ablation(v(&[0.25, 4.0])),
        ];
        for item in items {
            let bytes = item.to_bytes();
            assert_eq!(SteeringArtifact::from_bytes(&bytes).unwrap(), item);
        }
        let mut bad = SteeringArtifact::Ablation(v(&[1.0])).to_bytes();
        bad[10] = 9;
        assert!(matches!(SteeringArtifact::from_bytes(&bad), Err(Error::InvalidEnum { .. })));
    }

    fn arb_vec(d: usize) -> impl Strategy<Value = Vector> {
        prop::collection::vec(-10.0f64..10.0, d).prop_map(|x| Vector::new(x).unwrap())
    }

    proptest! {
        #[test]
        fn control_is_linear_in_strength(h in arb_vec(4), dir in arb_vec(4), s1 in -5.0f64..5.0, s2 in -5.0f64..5.0) {
            prop_assume!(dir.norm() > 1e-3);
            let cv = ControlVector::new(dir, s1 + s2, ControlMethod::Dim, false).unwrap();
            let once = apply_control(&h, &cv).unwrap();
            let twice = apply_control(&apply_control(&h, &cv.with_strength(s1)).unwrap(), &cv.with_strength(s2)).unwrap();
            for i in 0..4 {
                prop_assert!((once[i] - twice[i]).abs() < 1e-9);
            }
        }

        #[test]
        fn projections_are_idempotent(h in arb_vec(5), n in arb_vec(5), b in -3.0f64..3.0) {
            prop_assume!(n.norm() > 1e-2);
            let plane = Hyperplane::new(n.clone(), b).unwrap();
            let p1 = svm_project(&h, &plane).unwrap();
            prop_assert!(plane.decision(&p1).unwrap().abs() < 1e-9 * (1.0 + h.norm() * n.norm()));
            let p2 = svm_project(&p1, &plane).unwrap();
            for i in 0..5 { prop_assert!((p1[i] - p2[i]).abs() < 1e-9 * (1.0 + h.norm())); }

            let a1 = directional_ablation(&h, &n).unwrap();
            prop_assert!(a1.dot(&n).unwrap().abs() < 1e-9 * (1.0 + h.norm() * n.norm()));
            prop_assert!(a1.norm() <= h.norm() + 1e-12);
            let a2 = directional_ablation(&a1, &n).unwrap();
            for i in 0..5 { prop_assert!((a1[i] - a2[i]).abs() < 1e-9 * (1.0 + h.norm())); }
        }

        #[test]
        fn dim_is_translation_equivariant(shift in arb_vec(3), seed in any::<u64>()) {
            let mut rng = RngStream::new(seed);
            let pos: Vec<Vector> = (0..4).map(|_| gaussian_sample(3, &mut rng).unwrap().add(&v(&[2.0, 0.0, 0.0])).unwrap()).collect();
            let neg: Vec<Vector> = (0..5).map(|_| gaussian_sample(3, &mut rng).unwrap()).collect();
            let base = dim_vector(&pos, &neg).unwrap().direction;
            let sp: Vec<Vector> = pos.iter().map(|x| x.add(&shift).unwrap()).collect();
            let sn: Vec<Vector> = neg.iter().map(|x| x.add(&shift).unwrap()).collect();
            let moved = dim_vector(&sp, &sn).unwrap().direction;
            for i in 0..3 { prop_assert!((base[i] - moved[i]).abs() < 1e-9); }
        }

        #[test]
        fn pca_invariant_to_pair_order(seed in any::<u64>()) {
            let mut rng = RngStream::new(seed);
            let pos: Vec<Vector> = (0..6).map(|_| gaussian_sample(4, &mut rng).unwrap()).collect();
            let neg: Vec<Vector> = (0..6).map(|_| gaussian_sample(4, &mut rng).unwrap()).collect();
            let a = pca_vector(&pos, &neg).unwrap().direction;
            let mut idx: Vec<usize> = (0..6).collect();
            rng.shuffle(&mut idx);
            let pp: Vec<Vector> = idx.iter().map(|&i| pos[i].clone()).collect();
            let nn: Vec<Vector> = idx.iter().map(|&i| neg[i].clone()).collect();
            let b = pca_vector(&pp, &nn).unwrap().direction;
            for i in 0..4 { prop_assert!((a[i] - b[i]).abs() < 1e-6); }
        }
    }
}
