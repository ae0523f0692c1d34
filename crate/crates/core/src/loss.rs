//! Contrastive (GE2E-style, two groups) and classification losses, their
//! convex combination, and end-to-end gradients.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::features::SpectrogramPatch;
use crate::model::{sigmoid, ForwardCache, LogProbs, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityParams {
    pub omega: f64,
    pub bias: f64,
}

impl SimilarityParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0 && self.omega.is_finite() && self.bias.is_finite()) {
            return Err(Error::invalid("similarity scale must be positive and finite"));
        }
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(e: &[f64], c: &[f64]) -> Result<f64> {
    let ne = norm(e);
    let nc = norm(c);
    if ne == 0.0 || nc == 0.0 {
        return Err(Error::Undefined("cosine similarity with a zero vector".into()));
    }
    Ok((dotp(e, c) / (ne * nc)).clamp(-1.0, 1.0))
}

/// `omega * cos(e, c) + bias`.
pub fn scaled_cosine(e: &[f64], c: &[f64], sp: SimilarityParams) -> Result<f64> {
    if e.len() != c.len() {
        return Err(Error::Shape {
            expected: format!("vector of length {}", e.len()),
            got: format!("{}", c.len()),
        });
    }
    Ok(sp.omega * cosine(e, c)? + sp.bias)
}

/// Embeddings of one batch, grouped by class.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEmbeddings {
    dysphonic: Vec<Vec<f64>>,
    healthy: Vec<Vec<f64>>,
}

impl BatchEmbeddings {
    pub fn new(dysphonic: Vec<Vec<f64>>, healthy: Vec<Vec<f64>>) -> Result<Self> {
        if dysphonic.len() != healthy.len() {
            return Err(Error::invalid(format!(
                "groups must have equal size, got {} dysphonic and {} healthy",
                dysphonic.len(),
                healthy.len()
            )));
        }
        if dysphonic.is_empty() {
            return Err(Error::Insufficient("empty batch (M = 0)".into()));
        }
        let dim = dysphonic[0].len();
        if dysphonic.iter().chain(&healthy).any(|e| e.len() != dim) {
            return Err(Error::Shape {
                expected: format!("embeddings of length {dim}"),
                got: "mixed lengths".into(),
            });
        }
        if dysphonic.iter().chain(&healthy).any(|e| norm(e) == 0.0) {
            return Err(Error::Undefined("zero embedding in batch".into()));
        }
        Ok(Self { dysphonic, healthy })
    }

    pub fn m(&self) -> usize {
        self.dysphonic.len()
    }

    pub fn dysphonic(&self) -> &[Vec<f64>] {
        &self.dysphonic
    }

    pub fn healthy(&self) -> &[Vec<f64>] {
        &self.healthy
    }
}

/// Whether a sample counts toward its own group centroid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentroidMode {
    /// Centroid is the plain group mean, the sample included.
    #[default]
    Inclusive,
    /// The sample is left out of its own group's centroid (needs M >= 2).
    Exclusive,
}

fn mean(vs: &[Vec<f64>]) -> Vec<f64> {
    let mut c = vec![0.0; vs[0].len()];
    for v in vs {
        for (a, b) in c.iter_mut().zip(v) {
            *a += b;
        }
    }
    let m = vs.len() as f64;
    c.iter_mut().for_each(|a| *a /= m);
    c
}

/// Group means `(c_dysphonic, c_healthy)`.
pub fn centroids(batch: &BatchEmbeddings) -> (Vec<f64>, Vec<f64>) {
    (mean(&batch.dysphonic), mean(&batch.healthy))
}

/// GE2E loss with gradients with respect to every embedding and to the
/// similarity parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Ge2eOutput {
    pub loss: f64,
    pub d_dysphonic: Vec<Vec<f64>>,
    pub d_healthy: Vec<Vec<f64>>,
    pub d_omega: f64,
    pub d_bias: f64,
}

pub fn ge2e_loss(batch: &BatchEmbeddings, sp: SimilarityParams) -> Result<f64> {
    ge2e_with_grad(batch, sp, CentroidMode::Inclusive).map(|o| o.loss)
}

/// Sum over both groups of `1 - sigmoid(S(e, own)) + sigmoid(S(e, other))`.
pub fn ge2e_with_grad(batch: &BatchEmbeddings, sp: SimilarityParams, mode: CentroidMode) -> Result<Ge2eOutput> {
    sp.validate()?;
    let m = batch.m();
    if mode == CentroidMode::Exclusive && m < 2 {
        return Err(Error::Insufficient("exclusive centroids need M >= 2".into()));
    }
    let dim = batch.dysphonic[0].len();
    let (cp, cn) = centroids(batch);
    let groups = [&batch.dysphonic, &batch.healthy];
    let cents = [&cp, &cn];
    let mut d_emb = [vec![vec![0.0; dim]; m], vec![vec![0.0; dim]; m]];
    // accumulated gradient per full-mean centroid
    let mut d_cent = [vec![0.0; dim], vec![0.0; dim]];
    let mut loss = 0.0;
    let mut d_omega = 0.0;
    let mut d_bias = 0.0;
    let omega = sp.omega;

    for g in 0..2 {
        let other = 1 - g;
        for i in 0..m {
            let e = &groups[g][i];
            let own: Vec<f64> = match mode {
                CentroidMode::Inclusive => cents[g].clone(),
                CentroidMode::Exclusive => cents[g]
                    .iter()
                    .zip(e)
                    .map(|(c, x)| (c * m as f64 - x) / (m as f64 - 1.0))
                    .collect(),
            };
            let oth = cents[other];
            let ne = norm(e);
            let (no, nt) = (norm(&own), norm(oth));
            if no == 0.0 || nt == 0.0 {
                return Err(Error::Undefined("zero centroid".into()));
            }
            let cos_own = cosine(e, &own)?;
            let cos_oth = cosine(e, oth)?;
            let s_own = sigmoid(omega * cos_own + sp.bias);
            let s_oth = sigmoid(omega * cos_oth + sp.bias);
            loss += 1.0 + (s_oth - s_own);
            let g_own = -s_own * (1.0 - s_own);
            let g_oth = s_oth * (1.0 - s_oth);
            d_omega += g_own * cos_own + g_oth * cos_oth;
            d_bias += g_own + g_oth;
            let (ko, kt) = (omega * g_own, omega * g_oth);
            let mut d_own = vec![0.0; dim];
            for k in 0..dim {
                d_emb[g][i][k] += ko * (own[k] / (ne * no) - cos_own * e[k] / (ne * ne))
                    + kt * (oth[k] / (ne * nt) - cos_oth * e[k] / (ne * ne));
                d_own[k] = ko * (e[k] / (ne * no) - cos_own * own[k] / (no * no));
                d_cent[other][k] += kt * (e[k] / (ne * nt) - cos_oth * oth[k] / (nt * nt));
            }
            match mode {
                CentroidMode::Inclusive => {
                    for k in 0..dim {
                        d_cent[g][k] += d_own[k];
                    }
                }
                CentroidMode::Exclusive => {
                    // own centroid is (M c - e_i) / (M - 1)
                    let w = m as f64 / (m as f64 - 1.0);
                    for k in 0..dim {
                        d_cent[g][k] += d_own[k] * w;
                        d_emb[g][i][k] -= d_own[k] / (m as f64 - 1.0);
                    }
                }
            }
        }
    }
    for g in 0..2 {
        for i in 0..m {
            for k in 0..dim {
                d_emb[g][i][k] += d_cent[g][k] / m as f64;
            }
        }
    }
    let [d_dysphonic, d_healthy] = d_emb;
    Ok(Ge2eOutput {
        loss,
        d_dysphonic,
        d_healthy,
        d_omega,
        d_bias,
    })
}

/// Batch-mean negative log-likelihood of the true labels.
pub fn classification_loss(logprobs: &[LogProbs], labels: &[Label]) -> Result<f64> {
    if logprobs.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            logprobs.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Insufficient("empty batch".into()));
    }
    let s: f64 = logprobs.iter().zip(labels).map(|(lp, y)| -lp[y.index()]).sum();
    Ok(s / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid("lambda must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// `(1 - lambda) * ge2e + lambda * nll`.
pub fn combined_loss(ge2e: f64, nll: f64, w: LossWeights) -> f64 {
    (1.0 - w.lambda) * ge2e + w.lambda * nll
}

/// Weights of the two loss terms in the training objective. A zero weight
/// removes the term from the gradient entirely.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub ge2e_weight: f64,
    pub nll_weight: f64,
    pub centroid_mode: CentroidMode,
}

impl Objective {
    pub fn combined(w: LossWeights) -> Self {
        Self {
            ge2e_weight: 1.0 - w.lambda,
            nll_weight: w.lambda,
            centroid_mode: CentroidMode::Inclusive,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub ge2e: f64,
    pub nll: f64,
    pub total: f64,
    pub grads: Vec<f64>,
    pub embeddings: Vec<Vec<f64>>,
    pub logprobs: Vec<LogProbs>,
}

/// Gradient of the combined loss for a batch of patches.
pub fn loss_gradients(
    params: &ModelParams,
    patches: &[SpectrogramPatch],
    labels: &[Label],
    w: LossWeights,
) -> Result<LossGradients> {
    w.validate()?;
    loss_gradients_with(params, patches, labels, Objective::combined(w))
}

/// Forward, loss and backward for a batch holding `M` patches of each class.
/// Per-sample work runs in parallel; gradients are summed in sample order so
/// the result does not depend on the thread count.
pub fn loss_gradients_with(
    params: &ModelParams,
    patches: &[SpectrogramPatch],
    labels: &[Label],
    obj: Objective,
) -> Result<LossGradients> {
    if patches.len() != labels.len() {
        return Err(Error::invalid("patches and labels differ in length"));
    }
    let caches: Vec<ForwardCache> = patches
        .par_iter()
        .map(|p| params.forward(p))
        .collect::<Result<_>>()?;
    let embeddings: Vec<Vec<f64>> = caches.iter().map(|c| c.embedding.0.clone()).collect();
    let logprobs: Vec<LogProbs> = caches.iter().map(|c| c.logprobs).collect();
    if let Some(i) = embeddings.iter().position(|e| e.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!("embedding of sample {i}")));
    }

    let dys_idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Label::Dysphonic).collect();
    let hea_idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Label::Healthy).collect();
    let batch = BatchEmbeddings::new(
        dys_idx.iter().map(|&i| embeddings[i].clone()).collect(),
        hea_idx.iter().map(|&i| embeddings[i].clone()).collect(),
    )?;
    let ge = ge2e_with_grad(&batch, params.similarity(), obj.centroid_mode)?;
    let nll = classification_loss(&logprobs, labels)?;
    let total = obj.ge2e_weight * ge.loss + obj.nll_weight * nll;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("loss (ge2e {}, nll {nll})", ge.loss)));
    }

    let dim = params.config().embedding_dim;
    let mut d_emb = vec![vec![0.0; dim]; labels.len()];
    if obj.ge2e_weight != 0.0 {
        for (j, &i) in dys_idx.iter().enumerate() {
            d_emb[i] = ge.d_dysphonic[j].iter().map(|g| g * obj.ge2e_weight).collect();
        }
        for (j, &i) in hea_idx.iter().enumerate() {
            d_emb[i] = ge.d_healthy[j].iter().map(|g| g * obj.ge2e_weight).collect();
        }
    }
    let b = labels.len() as f64;
    let d_lp: Vec<Option<LogProbs>> = labels
        .iter()
        .map(|y| {
            (obj.nll_weight != 0.0).then(|| {
                let mut d = [0.0; 2];
                d[y.index()] = -obj.nll_weight / b;
                d
            })
        })
        .collect();

    let n = params.len();
    let per_sample: Vec<Vec<f64>> = (0..labels.len())
        .into_par_iter()
        .map(|i| {
            let mut g = vec![0.0; n];
            params.backward(&caches[i], &d_emb[i], d_lp[i], &mut g);
            g
        })
        .collect();
    let mut grads = vec![0.0; n];
    for g in &per_sample {
        for (a, b) in grads.iter_mut().zip(g) {
            *a += b;
        }
    }
    if obj.ge2e_weight != 0.0 {
        grads[params.layout().omega] = obj.ge2e_weight * ge.d_omega;
        grads[params.layout().sim_bias] = obj.ge2e_weight * ge.d_bias;
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient {i}")));
    }
    Ok(LossGradients {
        ge2e: ge.loss,
        nll,
        total,
        grads,
        embeddings,
        logprobs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, tests::random_patch, tests::tiny_config};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const UNIT: SimilarityParams = SimilarityParams { omega: 1.0, bias: 0.0 };

    #[test]
    fn scaled_cosine_examples() {
        assert!((scaled_cosine(&[2.0, 1.0], &[2.0, 1.0], UNIT).unwrap() - 1.0).abs() < 1e-12);
        let sp = SimilarityParams { omega: 3.0, bias: 0.5 };
        assert!((scaled_cosine(&[1.0, 0.0], &[0.0, 4.0], sp).unwrap() - 0.5).abs() < 1e-12);
        let sp = SimilarityParams { omega: 2.0, bias: 0.0 };
        let v = scaled_cosine(&[1.0, 0.0], &[1.0, 1.0], sp).unwrap();
        assert!((v - std::f64::consts::SQRT_2).abs() < 1e-5);
        assert!(scaled_cosine(&[0.0, 0.0], &[1.0, 1.0], UNIT).is_err());
    }

    #[test]
    fn centroid_examples() {
        let v = vec![0.5, -1.0, 2.0];
        let b = BatchEmbeddings::new(vec![v.clone(); 3], vec![vec![1.0, 1.0, 1.0]; 3]).unwrap();
        assert_eq!(centroids(&b).0, v);
        let b = BatchEmbeddings::new(vec![vec![0.0, 2.0], vec![2.0, 0.0]], vec![vec![1.0, 0.0]; 2]).unwrap();
        assert_eq!(centroids(&b).0, vec![1.0, 1.0]);
        let swapped = BatchEmbeddings::new(vec![vec![2.0, 0.0], vec![0.0, 2.0]], vec![vec![1.0, 0.0]; 2]).unwrap();
        assert_eq!(centroids(&b), centroids(&swapped));
        assert!(BatchEmbeddings::new(vec![], vec![]).is_err());
        assert!(BatchEmbeddings::new(vec![vec![1.0]], vec![]).is_err());
    }

    #[test]
    fn ge2e_hand_example() {
        let b = BatchEmbeddings::new(vec![vec![1.0, 0.0]], vec![vec![-1.0, 0.0]]).unwrap();
        let l = ge2e_loss(&b, UNIT).unwrap();
        let term = 1.0 - sigmoid(1.0) + sigmoid(-1.0);
        assert!((term - 0.53788).abs() < 1e-5);
        assert!((l - 1.07576).abs() < 1e-5);
    }

    #[test]
    fn ge2e_indistinguishable_groups() {
        let v = vec![0.3, 0.4, -0.1];
        for m in 1..5 {
            let b = BatchEmbeddings::new(vec![v.clone(); m], vec![v.clone(); m]).unwrap();
            let sp = SimilarityParams { omega: 7.0, bias: -2.0 };
            assert!((ge2e_loss(&b, sp).unwrap() - 2.0 * m as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn ge2e_perfect_separation_limit() {
        let b = BatchEmbeddings::new(vec![vec![1.0, 2.0]], vec![vec![-1.0, -2.0]]).unwrap();
        let l = ge2e_loss(&b, SimilarityParams { omega: 60.0, bias: 0.0 }).unwrap();
        assert!(l < 1e-12);
    }

    fn random_batch(rng: &mut ChaCha8Rng, m: usize, dim: usize) -> BatchEmbeddings {
        let mut gen = || (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let d = (0..m).map(|_| gen()).collect();
        let h = (0..m).map(|_| gen()).collect();
        BatchEmbeddings::new(d, h).unwrap()
    }

    #[test]
    fn ge2e_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for mode in [CentroidMode::Inclusive, CentroidMode::Exclusive] {
            let b = random_batch(&mut rng, 3, 4);
            let sp = SimilarityParams { omega: 2.5, bias: -0.7 };
            let out = ge2e_with_grad(&b, sp, mode).unwrap();
            let f = |b: &BatchEmbeddings, sp: SimilarityParams| ge2e_with_grad(b, sp, mode).unwrap().loss;
            let h = 1e-6;
            for g in 0..2 {
                for i in 0..3 {
                    for k in 0..4 {
                        let bump = |delta: f64| {
                            let mut d = b.dysphonic.clone();
                            let mut n = b.healthy.clone();
                            if g == 0 {
                                d[i][k] += delta;
                            } else {
                                n[i][k] += delta;
                            }
                            BatchEmbeddings::new(d, n).unwrap()
                        };
                        let fd = (f(&bump(h), sp) - f(&bump(-h), sp)) / (2.0 * h);
                        let an = if g == 0 { out.d_dysphonic[i][k] } else { out.d_healthy[i][k] };
                        assert!((fd - an).abs() < 1e-7, "{mode:?} g{g} i{i} k{k}: {fd} vs {an}");
                    }
                }
            }
            let fd_w = (f(&b, SimilarityParams { omega: 2.5 + h, ..sp }) - f(&b, SimilarityParams { omega: 2.5 - h, ..sp }))
                / (2.0 * h);
            assert!((fd_w - out.d_omega).abs() < 1e-7);
            let fd_b = (f(&b, SimilarityParams { bias: -0.7 + h, ..sp }) - f(&b, SimilarityParams { bias: -0.7 - h, ..sp }))
                / (2.0 * h);
            assert!((fd_b - out.d_bias).abs() < 1e-7);
        }
    }

    proptest::proptest! {
        #[test]
        fn ge2e_bounds_symmetry_scale(seed in 0u64..500, m in 1usize..5, dim in 2usize..6, scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = random_batch(&mut rng, m, dim);
            let sp = SimilarityParams { omega: rng.gen_range(0.1..20.0), bias: rng.gen_range(-5.0..5.0) };
            let l = ge2e_loss(&b, sp).unwrap();
            proptest::prop_assert!(l > 0.0 && l < 4.0 * m as f64);
            let swapped = BatchEmbeddings::new(b.healthy.clone(), b.dysphonic.clone()).unwrap();
            proptest::prop_assert!((ge2e_loss(&swapped, sp).unwrap() - l).abs() < 1e-9);
            let scaled = BatchEmbeddings::new(
                b.dysphonic.iter().map(|v| v.iter().map(|x| x * scale).collect()).collect(),
                b.healthy.iter().map(|v| v.iter().map(|x| x * scale).collect()).collect(),
            ).unwrap();
            proptest::prop_assert!((ge2e_loss(&scaled, sp).unwrap() - l).abs() < 1e-9);
        }
    }

    #[test]
    fn nll_examples() {
        let labels = [Label::Healthy, Label::Dysphonic];
        assert_eq!(classification_loss(&[[0.0, f64::NEG_INFINITY], [f64::NEG_INFINITY, 0.0]], &labels).unwrap(), 0.0);
        let u = 0.5f64.ln();
        assert!((classification_loss(&[[u, u], [u, u]], &labels).unwrap() - 2f64.ln()).abs() < 1e-12);
        let lp = [[-0.1, (1.0 - (-0.1f64).exp()).ln()], [(1.0 - (-0.3f64).exp()).ln(), -0.3]];
        assert!((classification_loss(&lp, &labels).unwrap() - 0.2).abs() < 1e-12);
        assert!(classification_loss(&lp, &labels[..1]).is_err());
    }

    #[test]
    fn combined_examples() {
        let w = LossWeights::default();
        assert_eq!(combined_loss(2.0, 1.0, w), 1.5);
        assert_eq!(combined_loss(2.0, 1.0, LossWeights { lambda: 0.0 }), 2.0);
        assert_eq!(combined_loss(2.0, 1.0, LossWeights { lambda: 1.0 }), 1.0);
        assert!(LossWeights { lambda: 1.5 }.validate().is_err());
    }

    fn small_batch() -> (Vec<SpectrogramPatch>, Vec<Label>) {
        let patches = (0..4).map(|i| random_patch(33, 100 + i)).collect();
        let labels = vec![Label::Dysphonic, Label::Healthy, Label::Dysphonic, Label::Healthy];
        (patches, labels)
    }

    #[test]
    fn lambda_one_zeroes_similarity_gradients() {
        let m = init_model(&tiny_config(), 1).unwrap();
        let (p, l) = small_batch();
        let g = loss_gradients(&m, &p, &l, LossWeights { lambda: 1.0 }).unwrap();
        assert_eq!(g.grads[m.layout().omega], 0.0);
        assert_eq!(g.grads[m.layout().sim_bias], 0.0);
    }

    #[test]
    fn contrastive_only_zeroes_classifier_gradients() {
        let m = init_model(&tiny_config(), 1).unwrap();
        let (p, l) = small_batch();
        let obj = Objective {
            ge2e_weight: 1.0,
            nll_weight: 0.0,
            centroid_mode: CentroidMode::Inclusive,
        };
        let g = loss_gradients_with(&m, &p, &l, obj).unwrap();
        assert!(g.grads[m.layout().classifier_range()].iter().all(|&v| v == 0.0));
        assert!(g.grads[m.layout().encoder_range()].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn nll_contribution_is_linear_in_weight() {
        let m = init_model(&tiny_config(), 2).unwrap();
        let (p, l) = small_batch();
        let only = |w: f64| {
            let obj = Objective {
                ge2e_weight: 0.0,
                nll_weight: w,
                centroid_mode: CentroidMode::Inclusive,
            };
            loss_gradients_with(&m, &p, &l, obj).unwrap().grads
        };
        let g1 = only(0.25);
        let g2 = only(0.75);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((3.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn unbalanced_batch_is_rejected() {
        let m = init_model(&tiny_config(), 2).unwrap();
        let (p, mut l) = small_batch();
        l[1] = Label::Dysphonic;
        assert!(loss_gradients(&m, &p, &l, LossWeights::default()).is_err());
    }
}
