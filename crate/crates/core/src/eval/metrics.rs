use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};

/// Recording-level confusion counts with dysphonic as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    #[serde(rename = "TP")]
    pub tp: u64,
    #[serde(rename = "FN")]
    pub fn_: u64,
    #[serde(rename = "TN")]
    pub tn: u64,
    #[serde(rename = "FP")]
    pub fp: u64,
}

impl ConfusionCounts {
    pub fn from_predictions(truth: &[Label], predicted: &[Label]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::invalid("truth and predictions differ in length"));
        }
        let mut c = Self::default();
        for (t, p) in truth.iter().zip(predicted) {
            match (t, p) {
                (Label::Dysphonic, Label::Dysphonic) => c.tp += 1,
                (Label::Dysphonic, Label::Healthy) => c.fn_ += 1,
                (Label::Healthy, Label::Healthy) => c.tn += 1,
                (Label::Healthy, Label::Dysphonic) => c.fp += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.tn + self.fp
    }
}

/// Mean of the two per-class recalls.
pub fn balanced_accuracy(c: &ConfusionCounts) -> Result<f64> {
    if c.tp + c.fn_ == 0 {
        return Err(Error::Undefined("no dysphonic recordings: sensitivity is undefined".into()));
    }
    if c.tn + c.fp == 0 {
        return Err(Error::Undefined("no healthy recordings: specificity is undefined".into()));
    }
    let sens = c.tp as f64 / (c.tp + c.fn_) as f64;
    let spec = c.tn as f64 / (c.tn + c.fp) as f64;
    Ok(0.5 * (sens + spec))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squared distances.
    pub inertia: f64,
    /// Inertia after each Lloyd iteration of the winning restart.
    pub history: Vec<f64>,
}

pub const DEFAULT_RESTARTS: usize = 10;
const MAX_LLOYD_ITERS: usize = 300;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
    while centroids.len() < k {
        let d: Vec<f64> = points.iter().map(|p| nearest(p, &centroids).1).collect();
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, &w) in d.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.gen_range(0..points.len())
        };
        centroids.push(points[pick].clone());
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> KMeansResult {
    let dim = points[0].len();
    let k = centroids.len();
    let mut assignments: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    for _ in 0..MAX_LLOYD_ITERS {
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        let changed = next != assignments;
        assignments = next;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            // an empty cluster keeps its previous centre
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        let inertia: f64 = points
            .iter()
            .zip(&assignments)
            .map(|(p, &a)| sq_dist(p, &centroids[a]))
            .sum();
        history.push(inertia);
        if !changed {
            break;
        }
    }
    KMeansResult {
        inertia: *history.last().expect("at least one iteration"),
        assignments,
        centroids,
        history,
    }
}

/// Lloyd's algorithm from `restarts` k-means++ initialisations; the run with
/// the lowest inertia wins (earliest on ties).
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, restarts: usize) -> Result<KMeansResult> {
    if k == 0 || points.len() < k {
        return Err(Error::Insufficient(format!("k-means needs at least k = {k} points, got {}", points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape {
            expected: format!("points of length {dim}"),
            got: "mixed lengths".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..restarts.max(1) {
        let r = lloyd(points, plus_plus_init(points, k, &mut rng));
        if best.as_ref().map_or(true, |b| r.inertia < b.inertia) {
            best = Some(r);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn relabel(a: &[usize]) -> (Vec<usize>, usize) {
    let mut map = std::collections::BTreeMap::new();
    for &x in a {
        let n = map.len();
        map.entry(x).or_insert(n);
    }
    (a.iter().map(|x| map[x]).collect(), map.len())
}

fn entropy(counts: &[u64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Adjusted mutual information with the arithmetic-mean normaliser and the
/// exact expected mutual information under the hypergeometric model.
pub fn ami(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("partitions differ in length ({} vs {})", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Insufficient("AMI needs at least two items".into()));
    }
    let (a, ka) = relabel(a);
    let (b, kb) = relabel(b);
    if (ka == 1 && kb == 1) || (ka == kb && a == b) {
        return Ok(1.0);
    }
    let n = a.len();
    let nf = n as f64;
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(&b) {
        table[x][y] += 1;
    }
    let row: Vec<u64> = table.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<u64> = (0..kb).map(|j| table.iter().map(|r| r[j]).sum()).collect();

    let mut mi = 0.0;
    for i in 0..ka {
        for j in 0..kb {
            let nij = table[i][j];
            if nij > 0 {
                let nij = nij as f64;
                mi += nij / nf * (nf * nij / (row[i] as f64 * col[j] as f64)).ln();
            }
        }
    }

    let mut lf = vec![0.0; n + 1];
    for k in 1..=n {
        lf[k] = lf[k - 1] + (k as f64).ln();
    }
    let mut emi = 0.0;
    for &ai in &row {
        for &bj in &col {
            let (ai, bj) = (ai as usize, bj as usize);
            let lo = (ai + bj).saturating_sub(n).max(1);
            let hi = ai.min(bj);
            for nij in lo..=hi {
                let term = nij as f64 / nf * (nf * nij as f64 / (ai as f64 * bj as f64)).ln();
                let log_p = lf[ai] + lf[bj] + lf[n - ai] + lf[n - bj]
                    - lf[n]
                    - lf[nij]
                    - lf[ai - nij]
                    - lf[bj - nij]
                    - lf[n + nij - ai - bj];
                emi += term * log_p.exp();
            }
        }
    }

    let norm = 0.5 * (entropy(&row, nf) + entropy(&col, nf));
    let mut denom = norm - emi;
    if denom < 0.0 {
        denom = denom.min(-f64::EPSILON);
    } else {
        denom = denom.max(f64::EPSILON);
    }
    Ok((mi - emi) / denom)
}
