//! PCA of thought activations, effective rank, activation bimodality,
//! control/thought mutual information and rank correlation.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control_encoder::ControlSignal;
use crate::numerics::{self, NumericsError, Tensor};

pub const ACTIVE_THRESHOLD: f64 = 0.2;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("need at least {need} rows, got {got}")]
    TooFewRows { need: usize, got: usize },
    #[error("k = {k} exceeds {cols} columns")]
    TooManyComponents { k: usize, cols: usize },
    #[error("matrix has zero variance")]
    ZeroVariance,
    #[error("matrix is all zeros")]
    ZeroMatrix,
    #[error("empty input")]
    Empty,
    #[error("lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("row {row} is not on the simplex (sums to {sum})")]
    NotSimplex { row: usize, sum: f64 },
    #[error("{0} labels for {1} rows")]
    LabelMismatch(usize, usize),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowLabel {
    pub id: u64,
    pub control: ControlSignal,
    pub correct: bool,
    pub mean_entropy: f64,
}

/// Rows are problems (or positions); columns are K selection weights, or
/// d-dimensional combined vectors.
#[derive(Debug, Clone)]
pub struct ActivationMatrix {
    pub values: Tensor,
    pub labels: Vec<RowLabel>,
}

impl ActivationMatrix {
    /// Selection-weight rows must each lie on the simplex.
    pub fn selection_weights(values: Tensor, labels: Vec<RowLabel>) -> Result<Self, AnalysisError> {
        for i in 0..values.rows() {
            let sum: f64 = values.row_slice(i).iter().sum();
            if (sum - 1.0).abs() > 1e-9 || values.row_slice(i).iter().any(|&w| w < 0.0) {
                return Err(AnalysisError::NotSimplex { row: i, sum });
            }
        }
        Self::combined_vectors(values, labels)
    }

    pub fn combined_vectors(values: Tensor, labels: Vec<RowLabel>) -> Result<Self, AnalysisError> {
        if labels.len() != values.rows() {
            return Err(AnalysisError::LabelMismatch(labels.len(), values.rows()));
        }
        Ok(Self { values, labels })
    }
}

#[derive(Debug, Clone)]
pub struct Pca {
    /// `n × k`.
    pub projections: Tensor,
    /// Fraction of total variance per component, non-increasing.
    pub explained: Vec<f64>,
    /// `k × cols`, unit rows.
    pub components: Tensor,
}

/// Mean-centred SVD projection onto the top `k` principal directions.
pub fn pca_project(m: &Tensor, k: usize) -> Result<Pca, AnalysisError> {
    let (n, c) = m.dims2();
    if n < 2 {
        return Err(AnalysisError::TooFewRows { need: 2, got: n });
    }
    if k > c {
        return Err(AnalysisError::TooManyComponents { k, cols: c });
    }
    let mut mean = vec![0.0; c];
    for i in 0..n {
        mean.iter_mut()
            .zip(m.row_slice(i))
            .for_each(|(a, &b)| *a += b / n as f64);
    }
    let mut centred = m.data().to_vec();
    for i in 0..n {
        centred[i * c..(i + 1) * c]
            .iter_mut()
            .zip(&mean)
            .for_each(|(x, mu)| *x -= mu);
    }
    let centred = Tensor::new(&[n, c], centred)?;
    let total: f64 = centred.data().iter().map(|x| x * x).sum();
    if !(total > 0.0) {
        return Err(AnalysisError::ZeroVariance);
    }
    let s = numerics::svd(&centred)?;
    let r = s.sigma.len();
    let mut explained: Vec<f64> = s.sigma.iter().take(k).map(|x| x * x / total).collect();
    explained.resize(k, 0.0);
    let mut comps = vec![0.0; k * c];
    for j in 0..k.min(r) {
        for i in 0..c {
            comps[j * c + i] = s.v.get2(i, j);
        }
    }
    let components = Tensor::new(&[k, c], comps)?;
    let projections = if k == 0 {
        Tensor::zeros(&[n, 0])
    } else {
        numerics::matmul(&centred, &components.transpose())?
    };
    Ok(Pca {
        projections,
        explained,
        components,
    })
}

/// `exp(H(σ / Σσ))` over the singular values.
pub fn effective_rank(m: &Tensor) -> Result<f64, AnalysisError> {
    if m.data().iter().all(|&x| x == 0.0) {
        return Err(AnalysisError::ZeroMatrix);
    }
    let s = numerics::svd(m)?;
    let total: f64 = s.sigma.iter().sum();
    let h: f64 = s
        .sigma
        .iter()
        .map(|x| x / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    let (r, c) = m.dims2();
    Ok(h.exp().clamp(1.0, r.min(c) as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub n_active_mean: f64,
    pub active_mean: Option<f64>,
    pub dormant_mean: Option<f64>,
    /// `active_mean / dormant_mean`; absent when either side is missing or zero.
    pub separation_ratio: Option<f64>,
    pub threshold: f64,
}

/// Weights above `threshold` are active; means are pooled over all entries.
pub fn activation_stats(
    rows: &[Vec<f64>],
    threshold: f64,
) -> Result<ActivationStats, AnalysisError> {
    if rows.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let (mut act_sum, mut act_n, mut dor_sum, mut dor_n) = (0.0, 0usize, 0.0, 0usize);
    for (i, r) in rows.iter().enumerate() {
        let sum: f64 = r.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(AnalysisError::NotSimplex { row: i, sum });
        }
        for &w in r {
            if w > threshold {
                act_sum += w;
                act_n += 1;
            } else {
                dor_sum += w;
                dor_n += 1;
            }
        }
    }
    let active_mean = (act_n > 0).then(|| act_sum / act_n as f64);
    let dormant_mean = (dor_n > 0).then(|| dor_sum / dor_n as f64);
    let separation_ratio = match (active_mean, dormant_mean) {
        (Some(a), Some(d)) if d > 0.0 => Some(a / d),
        _ => None,
    };
    Ok(ActivationStats {
        n_active_mean: act_n as f64 / rows.len() as f64,
        active_mean,
        dormant_mean,
        separation_ratio,
        threshold,
    })
}

/// Plug-in estimate of `I(C; T)` in bits from paired samples.
pub fn mutual_information_bits<C: Hash + Eq, T: Hash + Eq>(
    controls: &[C],
    thoughts: &[T],
) -> Result<f64, AnalysisError> {
    if controls.is_empty() {
        return Err(AnalysisError::Empty);
    }
    if controls.len() != thoughts.len() {
        return Err(AnalysisError::LengthMismatch(
            controls.len(),
            thoughts.len(),
        ));
    }
    let n = controls.len() as f64;
    let mut joint: HashMap<(&C, &T), usize> = HashMap::new();
    let mut pc: HashMap<&C, usize> = HashMap::new();
    let mut pt: HashMap<&T, usize> = HashMap::new();
    for (c, t) in controls.iter().zip(thoughts) {
        *joint.entry((c, t)).or_default() += 1;
        *pc.entry(c).or_default() += 1;
        *pt.entry(t).or_default() += 1;
    }
    // Sum in a fixed order so the result does not depend on hash iteration.
    let mut terms: Vec<f64> = joint
        .iter()
        .map(|((c, t), &k)| {
            let pj = k as f64 / n;
            pj * (pj * n * n / (pc[c] as f64 * pt[t] as f64)).log2()
        })
        .collect();
    terms.sort_by(f64::total_cmp);
    let entropy = |m: &dyn Fn() -> Vec<usize>| -> f64 {
        let mut v: Vec<f64> = m()
            .iter()
            .map(|&k| k as f64 / n)
            .map(|p| -p * p.log2())
            .collect();
        v.sort_by(f64::total_cmp);
        v.iter().sum()
    };
    let hc = entropy(&|| pc.values().copied().collect());
    let ht = entropy(&|| pt.values().copied().collect());
    Ok(terms.iter().sum::<f64>().clamp(0.0, hc.min(ht)))
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, AnalysisError> {
    if x.len() != y.len() {
        return Err(AnalysisError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(AnalysisError::TooFewRows {
            need: 3,
            got: x.len(),
        });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Err(AnalysisError::ZeroVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, AnalysisError> {
    if x.len() != y.len() {
        return Err(AnalysisError::LengthMismatch(x.len(), y.len()));
    }
    pearson(&ranks(x), &ranks(y))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correlation {
    #[default]
    Spearman,
    Pearson,
}

impl Correlation {
    pub fn compute(self, x: &[f64], y: &[f64]) -> Result<f64, AnalysisError> {
        match self {
            Correlation::Spearman => spearman(x, y),
            Correlation::Pearson => pearson(x, y),
        }
    }
}

/// `id,depth,length,path,correct,mean_entropy,pc1,pc2,…`
pub fn pca_csv(pca: &Pca, labels: &[RowLabel]) -> String {
    let k = pca.explained.len();
    let mut s = String::from("id,depth,length,path,correct,mean_entropy");
    for j in 0..k {
        s.push_str(&format!(",pc{}", j + 1));
    }
    s.push('\n');
    for (i, l) in labels.iter().enumerate() {
        s.push_str(&format!(
            "{},{},{},{},{},{}",
            l.id,
            l.control.depth(),
            l.control.length(),
            l.control.path(),
            u8::from(l.correct),
            l.mean_entropy
        ));
        for j in 0..k {
            s.push_str(&format!(",{}", pca.projections.get2(i, j)));
        }
        s.push('\n');
    }
    s
}

/// Reward counts over windows of `window` micro-batches and `bins` equal bins
/// on `[−ln K, 0]`: `window_start,window_end,bin_lo,bin_hi,count`.
pub fn reward_histogram_csv(rewards: &[f64], k: usize, window: usize, bins: usize) -> String {
    let lo = -(k as f64).ln();
    let width = -lo / bins as f64;
    let mut s = String::from("window_start,window_end,bin_lo,bin_hi,count\n");
    for (w, chunk) in rewards.chunks(window.max(1)).enumerate() {
        let mut counts = vec![0usize; bins];
        for &r in chunk {
            let b = (((r - lo) / width).floor().max(0.0) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let start = w * window.max(1);
        for (b, c) in counts.iter().enumerate() {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                start,
                start + chunk.len(),
                lo + b as f64 * width,
                lo + (b + 1) as f64 * width,
                c
            ));
        }
    }
    s
}

/// Long-format weight table for distribution plots: `id,thought,weight`.
pub fn weights_csv(ids: &[u64], rows: &[Vec<f64>]) -> String {
    let mut s = String::from("id,thought,weight\n");
    for (id, r) in ids.iter().zip(rows) {
        for (t, w) in r.iter().enumerate() {
            s.push_str(&format!("{id},{t},{w}\n"));
        }
    }
    s
}
