use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng;

fn check(op: &'static str, feats: &[Vec<f64>]) -> Result<usize> {
    let d = feats.first().map(Vec::len).unwrap_or(0);
    if feats.iter().any(|f| f.len() != d) {
        return Err(invalid(op, "ragged feature rows"));
    }
    if feats.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op });
    }
    Ok(d)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn mean_cov(feats: &[Vec<f64>], d: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = feats.len();
    let mut mu = DVector::zeros(d);
    for f in feats {
        mu += DVector::from_column_slice(f);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for f in feats {
        let c = DVector::from_column_slice(f) - &mu;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    (mu, cov)
}

/// Symmetric PSD square root with negative eigenvalues clamped to zero.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let s = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid(gen: &[Vec<f64>], real: &[Vec<f64>]) -> Result<f64> {
    let d = check("fid", gen)?;
    if check("fid", real)? != d {
        return Err(invalid("fid", "feature widths differ"));
    }
    for (what, set) in [("fid generated set", gen), ("fid reference set", real)] {
        if set.len() < 2 {
            return Err(Error::InsufficientSamples { what, needed: 2, have: set.len() });
        }
    }
    let (mu_g, cov_g) = mean_cov(gen, d);
    let (mu_r, cov_r) = mean_cov(real, d);
    let root_g = sqrt_psd(&cov_g);
    let inner = &root_g * &cov_r * &root_g;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let diff = (mu_g - mu_r).norm_squared();
    Ok((diff + cov_g.trace() + cov_r.trace() - 2.0 * cross).max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RPrecision {
    pub top1: f64,
    pub top2: f64,
    pub top3: f64,
}

/// Retrieval accuracy of each motion's own text among `pool_size − 1`
/// seeded distractors, ranked by Euclidean distance.
pub fn r_precision(motion: &[Vec<f64>], text: &[Vec<f64>], pool_size: usize, seed: u64) -> Result<RPrecision> {
    let d = check("r_precision", motion)?;
    if check("r_precision", text)? != d || motion.len() != text.len() {
        return Err(invalid("r_precision", "motion and text features must be aligned"));
    }
    if pool_size == 0 || text.len() < pool_size {
        return Err(Error::InsufficientSamples { what: "r_precision pool", needed: pool_size.max(1), have: text.len() });
    }
    let n = motion.len();
    let mut r = rng::stream(seed, 0x52);
    let mut hits = [0usize; 3];
    for i in 0..n {
        let others = sample(&mut r, n - 1, pool_size - 1);
        let own = dist(&motion[i], &text[i]);
        let rank = others
            .iter()
            .map(|j| if j >= i { j + 1 } else { j })
            .filter(|&j| dist(&motion[i], &text[j]) < own)
            .count();
        for (k, h) in hits.iter_mut().enumerate() {
            if rank <= k {
                *h += 1;
            }
        }
    }
    let f = |h: usize| h as f64 / n as f64;
    Ok(RPrecision { top1: f(hits[0]), top2: f(hits[1]), top3: f(hits[2]) })
}

/// Mean distance between paired motion and text features.
pub fn mm_dist(motion: &[Vec<f64>], text: &[Vec<f64>]) -> Result<f64> {
    check("mm_dist", motion)?;
    check("mm_dist", text)?;
    if motion.len() != text.len() || motion.is_empty() {
        return Err(invalid("mm_dist", "need equally many non-empty motion and text features"));
    }
    Ok(motion.iter().zip(text).map(|(m, t)| dist(m, t)).sum::<f64>() / motion.len() as f64)
}

/// Mean distance of matched pairs `(a_i, b_i)`.
pub fn paired_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(invalid("paired_distance", "need equally many non-empty rows"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| dist(x, y)).sum::<f64>() / a.len() as f64)
}

/// Rows in lexicographic order, so index sampling ignores input order.
fn canonical(feats: &[Vec<f64>]) -> Vec<&Vec<f64>> {
    let mut v: Vec<&Vec<f64>> = feats.iter().collect();
    v.sort_by(|a, b| a.iter().zip(b.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    v
}

/// Two seeded subsets of `subset` rows, each drawn without replacement.
fn two_subsets(feats: &[Vec<f64>], subset: usize, r: &mut rng::SeededRng) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let c = canonical(feats);
    let a = sample(r, c.len(), subset).iter().map(|i| c[i].clone()).collect();
    let b = sample(r, c.len(), subset).iter().map(|i| c[i].clone()).collect();
    (a, b)
}

/// Mean distance between two random subsets of size `subset`.
pub fn diversity(feats: &[Vec<f64>], subset: usize, seed: u64) -> Result<f64> {
    check("diversity", feats)?;
    if subset == 0 || feats.len() < subset {
        return Err(Error::InsufficientSamples { what: "diversity", needed: subset.max(1), have: feats.len() });
    }
    let (a, b) = two_subsets(feats, subset, &mut rng::stream(seed, 0xD1));
    paired_distance(&a, &b)
}

/// Within-condition diversity averaged over conditions; `groups[c]` holds
/// the generations for condition `c`.
pub fn multimodality(groups: &[Vec<Vec<f64>>], subset: usize, seed: u64) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::InsufficientSamples { what: "multimodality conditions", needed: 1, have: 0 });
    }
    let mut r = rng::stream(seed, 0x33);
    let mut total = 0.0;
    for g in groups {
        check("multimodality", g)?;
        if subset == 0 || g.len() < subset {
            return Err(Error::InsufficientSamples { what: "multimodality", needed: subset.max(1), have: g.len() });
        }
        let (a, b) = two_subsets(g, subset, &mut r);
        total += paired_distance(&a, &b)?;
    }
    Ok(total / groups.len() as f64)
}

/// Mean and symmetric 95% interval over repeats.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub ci95: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self { mean: f64::NAN, ci95: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        if values.len() < 2 {
            return Self { mean, ci95: 0.0 };
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self { mean, ci95: 1.96 * (var / n).sqrt() }
    }

    pub fn low(&self) -> f64 {
        self.mean - self.ci95
    }

    pub fn high(&self) -> f64 {
        self.mean + self.ci95
    }
}
