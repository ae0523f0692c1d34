//! Soft-margin SVM with a radial-basis kernel, trained by SMO with
//! second-order working-set selection. Defaults mirror the common library
//! defaults: `C = 1`, `gamma = 1 / (d * Var(X))`, stopping tolerance `1e-3`.

use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};

pub const DEFAULT_C: f64 = 1.0;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;
const TAU: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmParams {
    pub c: f64,
    /// `None` selects `1 / (d * Var(X))` over all feature values.
    pub gamma: Option<f64>,
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            c: DEFAULT_C,
            gamma: None,
            tolerance: DEFAULT_TOLERANCE,
            max_iter: 10_000_000,
        }
    }
}

/// A fitted classifier over embeddings; dysphonic is the positive class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingClassifier {
    support: Vec<Vec<f64>>,
    /// `alpha_i * y_i` per support vector.
    coef: Vec<f64>,
    rho: f64,
    gamma: f64,
}

fn rbf(gamma: f64, a: &[f64], b: &[f64]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d2).exp()
}

impl EmbeddingClassifier {
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn support_count(&self) -> usize {
        self.support.len()
    }

    /// Signed distance-like score; positive means dysphonic.
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.support
            .iter()
            .zip(&self.coef)
            .map(|(s, c)| c * rbf(self.gamma, s, x))
            .sum::<f64>()
            - self.rho
    }

    /// Ties at zero go to dysphonic.
    pub fn predict(&self, x: &[f64]) -> Label {
        if self.decision(x) >= 0.0 {
            Label::Dysphonic
        } else {
            Label::Healthy
        }
    }
}

pub fn fit_embedding_classifier(embeddings: &[Vec<f64>], labels: &[Label]) -> Result<EmbeddingClassifier> {
    fit_svm(embeddings, labels, &SvmParams::default())
}

pub fn fit_svm(x: &[Vec<f64>], labels: &[Label], p: &SvmParams) -> Result<EmbeddingClassifier> {
    if x.len() != labels.len() {
        return Err(Error::invalid("embeddings and labels differ in length"));
    }
    if !labels.contains(&Label::Dysphonic) || !labels.contains(&Label::Healthy) {
        return Err(Error::Insufficient("classifier needs both classes".into()));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|v| v.len() != d) {
        return Err(Error::Shape {
            expected: format!("vectors of length {d}"),
            got: "mixed or empty".into(),
        });
    }
    if !(p.c > 0.0) {
        return Err(Error::invalid("C must be positive"));
    }
    let gamma = match p.gamma {
        Some(g) => g,
        None => {
            let n = (x.len() * d) as f64;
            let mean = x.iter().flatten().sum::<f64>() / n;
            let var = x.iter().flatten().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            if var > 0.0 {
                1.0 / (d as f64 * var)
            } else {
                1.0
            }
        }
    };

    let n = x.len();
    let y: Vec<f64> = labels
        .iter()
        .map(|l| if *l == Label::Dysphonic { 1.0 } else { -1.0 })
        .collect();
    let k: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| rbf(gamma, &x[i], &x[j])).collect())
        .collect();
    let c = p.c;
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let is_up = |a: f64, yt: f64| (yt > 0.0 && a < c) || (yt < 0.0 && a > 0.0);
    let is_low = |a: f64, yt: f64| (yt > 0.0 && a > 0.0) || (yt < 0.0 && a < c);

    for _ in 0..p.max_iter {
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..n {
            if is_up(alpha[t], y[t]) && -y[t] * grad[t] >= gmax {
                gmax = -y[t] * grad[t];
                i = t;
            }
        }
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        for t in 0..n {
            if !is_low(alpha[t], y[t]) {
                continue;
            }
            gmax2 = gmax2.max(y[t] * grad[t]);
            if i == usize::MAX {
                continue;
            }
            let gd = gmax + y[t] * grad[t];
            if gd > 0.0 {
                let mut quad = k[i][i] + k[t][t] - 2.0 * k[i][t];
                if quad <= 0.0 {
                    quad = TAU;
                }
                let obj = -gd * gd / quad;
                if obj <= best {
                    best = obj;
                    j = t;
                }
            }
        }
        if gmax + gmax2 < p.tolerance || i == usize::MAX || j == usize::MAX {
            break;
        }

        let (oi, oj) = (alpha[i], alpha[j]);
        let kij = k[i][j];
        if y[i] != y[j] {
            let quad = (k[i][i] + k[j][j] - 2.0 * kij).max(TAU);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (k[i][i] + k[j][j] - 2.0 * kij).max(TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - oi, alpha[j] - oj);
        for t in 0..n {
            grad[t] += y[t] * (y[i] * k[t][i] * di + y[j] * k[t][j] * dj);
        }
    }

    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut free, mut sum) = (0usize, 0.0);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            sum += yg;
        }
    }
    let rho = if free > 0 { sum / free as f64 } else { (ub + lb) / 2.0 };

    let mut support = Vec::new();
    let mut coef = Vec::new();
    for t in 0..n {
        if alpha[t] > 0.0 {
            support.push(x[t].clone());
            coef.push(alpha[t] * y[t]);
        }
    }
    Ok(EmbeddingClassifier {
        support,
        coef,
        rho,
        gamma,
    })
}
