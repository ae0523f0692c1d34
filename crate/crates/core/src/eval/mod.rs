//! Recording-level inference, metrics, degraded-condition evaluation and
//! embedding export.

mod metrics;

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use metrics::{ami, balanced_accuracy, kmeans, ConfusionCounts, KMeansResult, DEFAULT_RESTARTS};

use crate::corpus::{derive_seed, rms, AudioClip, Label, LoadedCorpus, ManifestRecord};
use crate::error::{Error, Result};
use crate::features::{sliding_windows, spectrogram, SpectrogramConfig, INFERENCE_HOP_FRAMES};
use crate::model::{LogProbs, ModelParams};
use crate::train::{fit_embedding_classifier, EmbeddingClassifier};
use crate::warp::{add_noise, convolve_ir, WarpBank};

/// Fixed SNR of the additive-noise test condition.
pub const EVAL_SNR_DB: f64 = 10.0;

/// Per-window model output.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowOutput {
    pub embedding: Vec<f64>,
    pub logprobs: LogProbs,
}

/// Turns per-window outputs into a recording label.
pub trait Aggregator: Send + Sync {
    fn name(&self) -> &'static str;

    fn decide(
        &self,
        windows: &[WindowOutput],
        mean_embedding: &[f64],
        fallback: Option<&EmbeddingClassifier>,
    ) -> Result<Label>;
}

fn argmax_dysphonic_on_tie(scores: [f64; 2]) -> Label {
    if scores[Label::Healthy.index()] > scores[Label::Dysphonic.index()] {
        Label::Healthy
    } else {
        Label::Dysphonic
    }
}

fn mean_logprobs(windows: &[WindowOutput]) -> LogProbs {
    let n = windows.len() as f64;
    let mut m = [0.0; 2];
    for w in windows {
        m[0] += w.logprobs[0];
        m[1] += w.logprobs[1];
    }
    [m[0] / n, m[1] / n]
}

/// Mean of per-window log-probabilities.
pub struct LogprobMean;

impl Aggregator for LogprobMean {
    fn name(&self) -> &'static str {
        "logprob_mean"
    }

    fn decide(&self, windows: &[WindowOutput], _: &[f64], _: Option<&EmbeddingClassifier>) -> Result<Label> {
        Ok(argmax_dysphonic_on_tie(mean_logprobs(windows)))
    }
}

/// Mean of per-window probabilities.
pub struct ProbabilityMean;

impl Aggregator for ProbabilityMean {
    fn name(&self) -> &'static str {
        "probability_mean"
    }

    fn decide(&self, windows: &[WindowOutput], _: &[f64], _: Option<&EmbeddingClassifier>) -> Result<Label> {
        let mut m = [0.0; 2];
        for w in windows {
            m[0] += w.logprobs[0].exp();
            m[1] += w.logprobs[1].exp();
        }
        Ok(argmax_dysphonic_on_tie(m))
    }
}

/// Fallback classifier applied to the window-mean embedding.
pub struct EmbeddingMean;

impl Aggregator for EmbeddingMean {
    fn name(&self) -> &'static str {
        "embedding_mean"
    }

    fn decide(&self, _: &[WindowOutput], mean: &[f64], fallback: Option<&EmbeddingClassifier>) -> Result<Label> {
        let clf = fallback.ok_or_else(|| Error::invalid("embedding_mean aggregation needs a fitted embedding classifier"))?;
        Ok(clf.predict(mean))
    }
}

pub struct AggregatorRegistry {
    strategies: Vec<Box<dyn Aggregator>>,
}

impl Default for AggregatorRegistry {
    fn default() -> Self {
        Self::standard()
    }
}

impl AggregatorRegistry {
    pub fn standard() -> Self {
        Self {
            strategies: vec![Box::new(LogprobMean), Box::new(ProbabilityMean), Box::new(EmbeddingMean)],
        }
    }

    /// Adds a strategy; one with the same name is replaced.
    pub fn register(&mut self, s: Box<dyn Aggregator>) {
        match self.strategies.iter().position(|x| x.name() == s.name()) {
            Some(i) => self.strategies[i] = s,
            None => self.strategies.push(s),
        }
    }

    pub fn get(&self, name: &str) -> Result<&dyn Aggregator> {
        self.strategies
            .iter()
            .find(|s| s.name() == name)
            .map(|s| s.as_ref())
            .ok_or_else(|| Error::Unknown {
                kind: "aggregation mode",
                name: name.into(),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.strategies.iter().map(|s| s.name()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    #[default]
    LogprobMean,
    EmbeddingMean,
}

impl FromStr for AggregationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logprob_mean" => Ok(Self::LogprobMean),
            "embedding_mean" => Ok(Self::EmbeddingMean),
            _ => Err(Error::Unknown {
                kind: "aggregation mode",
                name: s.into(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictOptions {
    pub spectrogram: SpectrogramConfig,
    pub mode: AggregationMode,
    /// Average probabilities instead of log-probabilities in `logprob_mean` mode.
    pub average_probabilities: bool,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            spectrogram: SpectrogramConfig::default(),
            mode: AggregationMode::LogprobMean,
            average_probabilities: false,
        }
    }
}

impl PredictOptions {
    pub fn strategy_name(&self) -> &'static str {
        match (self.mode, self.average_probabilities) {
            (AggregationMode::EmbeddingMean, _) => "embedding_mean",
            (AggregationMode::LogprobMean, false) => "logprob_mean",
            (AggregationMode::LogprobMean, true) => "probability_mean",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: Label,
    /// Window-mean embedding.
    pub embedding: Vec<f64>,
    /// Window-mean log-probabilities.
    pub logprobs: LogProbs,
    pub windows: usize,
}

/// Aggregates precomputed window outputs with the named strategy.
pub fn aggregate(
    windows: &[WindowOutput],
    strategy: &dyn Aggregator,
    fallback: Option<&EmbeddingClassifier>,
) -> Result<Prediction> {
    if windows.is_empty() {
        return Err(Error::Insufficient("no windows to aggregate".into()));
    }
    let dim = windows[0].embedding.len();
    let n = windows.len() as f64;
    let mut mean = vec![0.0; dim];
    for w in windows {
        for (m, v) in mean.iter_mut().zip(&w.embedding) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let label = strategy.decide(windows, &mean, fallback)?;
    Ok(Prediction {
        label,
        embedding: mean,
        logprobs: mean_logprobs(windows),
        windows: windows.len(),
    })
}

pub fn window_outputs(params: &ModelParams, clip: &AudioClip, spec: &SpectrogramConfig) -> Result<Vec<WindowOutput>> {
    let s = spectrogram(clip, spec)?;
    sliding_windows(&s, INFERENCE_HOP_FRAMES)
        .iter()
        .map(|p| {
            let c = params.forward(p)?;
            Ok(WindowOutput {
                embedding: c.embedding.0,
                logprobs: c.logprobs,
            })
        })
        .collect()
}

/// Slides the patch window over the whole recording and aggregates.
pub fn predict_recording(
    params: &ModelParams,
    clip: &AudioClip,
    opts: &PredictOptions,
    fallback: Option<&EmbeddingClassifier>,
) -> Result<Prediction> {
    let registry = AggregatorRegistry::standard();
    let strategy = registry.get(opts.strategy_name())?;
    if opts.mode == AggregationMode::EmbeddingMean && fallback.is_none() {
        return Err(Error::invalid("embedding_mean aggregation needs a fitted embedding classifier"));
    }
    aggregate(&window_outputs(params, clip, &opts.spectrogram)?, strategy, fallback)
}

/// Window-mean embeddings of every clean recording.
pub fn embed_corpus(params: &ModelParams, corpus: &LoadedCorpus, spec: &SpectrogramConfig) -> Result<Vec<Vec<f64>>> {
    let strategy = LogprobMean;
    corpus
        .clips()
        .par_iter()
        .map(|c| Ok(aggregate(&window_outputs(params, c, spec)?, &strategy, None)?.embedding))
        .collect()
}

/// Fits the embedding classifier on clean window-mean embeddings.
pub fn fit_fallback_classifier(
    params: &ModelParams,
    corpus: &LoadedCorpus,
    spec: &SpectrogramConfig,
) -> Result<EmbeddingClassifier> {
    let emb = embed_corpus(params, corpus, spec)?;
    let labels: Vec<Label> = corpus.records().iter().map(|r| r.label).collect();
    fit_embedding_classifier(&emb, &labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    #[serde(rename = "clean")]
    Clean,
    #[serde(rename = "AN")]
    An,
    #[serde(rename = "IR")]
    Ir,
    #[serde(rename = "AN+IR")]
    AnIr,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::Clean, Condition::An, Condition::Ir, Condition::AnIr];

    pub fn uses_noise(self) -> bool {
        matches!(self, Condition::An | Condition::AnIr)
    }

    pub fn uses_ir(self) -> bool {
        matches!(self, Condition::Ir | Condition::AnIr)
    }

    /// Lower-case name used on the command line and in file names.
    pub fn slug(self) -> &'static str {
        match self {
            Condition::Clean => "clean",
            Condition::An => "an",
            Condition::Ir => "ir",
            Condition::AnIr => "an_ir",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::Clean => "clean",
            Condition::An => "AN",
            Condition::Ir => "IR",
            Condition::AnIr => "AN+IR",
        })
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "clean" => Ok(Condition::Clean),
            "an" => Ok(Condition::An),
            "ir" => Ok(Condition::Ir),
            "an_ir" | "an+ir" => Ok(Condition::AnIr),
            _ => Err(Error::Unknown {
                kind: "condition",
                name: s.into(),
            }),
        }
    }
}

/// What was done to one recording before evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationEntry {
    pub recording_id: String,
    pub ir_file: Option<String>,
    pub noise_file: Option<String>,
    pub noise_offset: Option<usize>,
    /// Measured SNR of the added noise against the signal it was added to.
    pub snr_db: Option<f64>,
}

pub const DEGRADATION_LOG_HEADER: &str = "recording_id\tir_file\tnoise_file\tnoise_offset\tsnr_db";

impl DegradationEntry {
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.recording_id,
            self.ir_file.as_deref().unwrap_or("-"),
            self.noise_file.as_deref().unwrap_or("-"),
            self.noise_offset.map_or("-".into(), |o| o.to_string()),
            self.snr_db.map_or("-".into(), |s| format!("{s:.4}")),
        )
    }
}

pub fn write_degradation_log(path: &Path, entries: &[DegradationEntry]) -> Result<()> {
    let mut out = String::from(DEGRADATION_LOG_HEADER);
    out.push('\n');
    for e in entries {
        out.push_str(&e.log_line());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// SNR of `noisy - clean` against `clean`, in dB.
pub fn measured_snr_db(clean: &[f64], noisy: &[f64]) -> f64 {
    let diff: Vec<f64> = noisy.iter().zip(clean).map(|(n, c)| n - c).collect();
    20.0 * (rms(clean) / rms(&diff)).log10()
}

/// Applies a test condition with held-out bank material only. Files and
/// offsets are drawn from `rng`.
pub fn degrade(
    clip: &AudioClip,
    recording_id: &str,
    bank: &WarpBank,
    condition: Condition,
    snr_db: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(AudioClip, DegradationEntry)> {
    let mut entry = DegradationEntry {
        recording_id: recording_id.into(),
        ir_file: None,
        noise_file: None,
        noise_offset: None,
        snr_db: None,
    };
    let mut cur = clip.clone();
    if condition.uses_ir() {
        if bank.ir_eval.is_empty() {
            return Err(Error::EmptyBank("no held-out impulse responses".into()));
        }
        let item = &bank.ir_eval[rng.gen_range(0..bank.ir_eval.len())];
        cur = convolve_ir(&cur, &item.clip)?;
        entry.ir_file = Some(item.name.clone());
    }
    if condition.uses_noise() {
        if bank.noise_eval.is_empty() {
            return Err(Error::EmptyBank("no held-out noise recordings".into()));
        }
        let item = &bank.noise_eval[rng.gen_range(0..bank.noise_eval.len())];
        let offset = rng.gen_range(0..item.clip.len());
        let noisy = add_noise(&cur, &item.clip, snr_db, offset)?;
        entry.snr_db = Some(measured_snr_db(cur.samples(), noisy.samples()));
        entry.noise_file = Some(item.name.clone());
        entry.noise_offset = Some(offset);
        cur = noisy;
    }
    Ok((cur, entry))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub condition: Condition,
    pub confusion: ConfusionCounts,
    pub balanced_accuracy: f64,
    pub ami: f64,
    pub n_recordings: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub predict: PredictOptions,
    /// Seed for degradation draws and k-means.
    pub seed: u64,
    pub snr_db: f64,
    pub kmeans_restarts: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            predict: PredictOptions::default(),
            seed: 250,
            snr_db: EVAL_SNR_DB,
            kmeans_restarts: DEFAULT_RESTARTS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub predictions: Vec<Prediction>,
    pub degradation_log: Vec<DegradationEntry>,
    /// Number of degradations applied (IR convolutions plus noise additions).
    pub warp_operations: u64,
}

/// Evaluates every recording under `condition`. Recording `i` draws its
/// degradation from a generator seeded by `(opts.seed, i)`, so results do not
/// depend on the thread count.
pub fn evaluate_corpus(
    params: &ModelParams,
    corpus: &LoadedCorpus,
    bank: &WarpBank,
    condition: Condition,
    opts: &EvalOptions,
    fallback: Option<&EmbeddingClassifier>,
) -> Result<EvalOutcome> {
    if condition.uses_ir() && bank.ir_eval.is_empty() {
        return Err(Error::EmptyBank(format!("condition {condition} needs held-out impulse responses")));
    }
    if condition.uses_noise() && bank.noise_eval.is_empty() {
        return Err(Error::EmptyBank(format!("condition {condition} needs held-out noise")));
    }
    if opts.predict.mode == AggregationMode::EmbeddingMean && fallback.is_none() {
        return Err(Error::invalid("embedding_mean aggregation needs a fitted embedding classifier"));
    }
    let registry = AggregatorRegistry::standard();
    let strategy = registry.get(opts.predict.strategy_name())?;
    let results: Vec<(Prediction, DegradationEntry)> = corpus
        .records()
        .par_iter()
        .zip(corpus.clips().par_iter())
        .enumerate()
        .map(|(i, (rec, clip))| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, i as u64));
            let (clip, entry) = degrade(clip, &rec.recording_id(), bank, condition, opts.snr_db, &mut rng)?;
            let windows = window_outputs(params, &clip, &opts.predict.spectrogram)?;
            Ok((aggregate(&windows, strategy, fallback)?, entry))
        })
        .collect::<Result<_>>()?;
    let (predictions, degradation_log): (Vec<_>, Vec<_>) = results.into_iter().unzip();

    let truth: Vec<Label> = corpus.records().iter().map(|r| r.label).collect();
    let predicted: Vec<Label> = predictions.iter().map(|p| p.label).collect();
    let confusion = ConfusionCounts::from_predictions(&truth, &predicted)?;
    let ba = balanced_accuracy(&confusion)?;
    let emb: Vec<Vec<f64>> = predictions.iter().map(|p| p.embedding.clone()).collect();
    let clusters = kmeans(&emb, 2, opts.seed, opts.kmeans_restarts)?;
    let truth_idx: Vec<usize> = truth.iter().map(|l| l.index()).collect();
    let ami_value = ami(&clusters.assignments, &truth_idx)?;
    let warp_operations = degradation_log
        .iter()
        .map(|e: &DegradationEntry| e.ir_file.is_some() as u64 + e.noise_file.is_some() as u64)
        .sum();
    Ok(EvalOutcome {
        report: EvalReport {
            condition,
            confusion,
            balanced_accuracy: ba,
            ami: ami_value,
            n_recordings: predictions.len(),
        },
        predictions,
        degradation_log,
        warp_operations,
    })
}

/// Writes a header row then one row per record: speaker id, label, gender,
/// corpus and the embedding values, tab-separated, in record order.
pub fn export_embeddings(embeddings: &[Vec<f64>], records: &[ManifestRecord], path: &Path) -> Result<()> {
    if embeddings.len() != records.len() {
        return Err(Error::invalid(format!(
            "{} embeddings for {} records",
            embeddings.len(),
            records.len()
        )));
    }
    let dim = embeddings.first().map_or(0, |e| e.len());
    let mut out = Vec::new();
    let mut header = vec!["speaker_id".to_string(), "label".into(), "gender".into(), "corpus".into()];
    header.extend((0..dim).map(|i| format!("e{i}")));
    writeln!(out, "{}", header.join("\t")).expect("write to vec");
    for (e, r) in embeddings.iter().zip(records) {
        if e.len() != dim {
            return Err(Error::Shape {
                expected: format!("embeddings of length {dim}"),
                got: format!("{}", e.len()),
            });
        }
        write!(out, "{}\t{}\t{}\t{}", r.speaker_id, r.label, r.gender, r.corpus).expect("write to vec");
        for v in e {
            write!(out, "\t{v}").expect("write to vec");
        }
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// One parsed row of an embeddings export.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub speaker_id: String,
    pub label: String,
    pub gender: String,
    pub corpus: String,
    pub values: Vec<f64>,
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, message: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        message,
    };
    text.lines()
        .enumerate()
        .skip(1)
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() < 4 {
                return Err(bad(i + 1, "fewer than four columns".into()));
            }
            let values = f[4..]
                .iter()
                .map(|v| v.parse::<f64>().map_err(|e| bad(i + 1, e.to_string())))
                .collect::<Result<_>>()?;
            Ok(EmbeddingRow {
                speaker_id: f[0].into(),
                label: f[1].into(),
                gender: f[2].into(),
                corpus: f[3].into(),
                values,
            })
        })
        .collect()
}

/// Scores on the top two principal components of mean-centred data.
pub fn project_2d(embeddings: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::Insufficient("projection needs at least two embeddings".into()));
    }
    let d = embeddings[0].len();
    if d == 0 || embeddings.iter().any(|e| e.len() != d) {
        return Err(Error::Shape {
            expected: format!("embeddings of length {d}"),
            got: "mixed or empty".into(),
        });
    }
    let x = DMatrix::from_fn(n, d, |i, j| embeddings[i][j]);
    let mean = x.row_mean();
    let centred = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut axes = Vec::new();
    for &k in order.iter().take(2) {
        let mut v = eig.eigenvectors.column(k).clone_owned();
        // sign convention: largest-magnitude loading is positive
        let (imax, _) = v.iter().enumerate().fold((0, 0.0), |acc, (i, &x)| if x.abs() > acc.1 { (i, x.abs()) } else { acc });
        if v[imax] < 0.0 {
            v = -v;
        }
        axes.push(v);
    }
    Ok((0..n)
        .map(|i| {
            let row = centred.row(i);
            let p0 = row.dot(&axes[0].transpose());
            let p1 = axes.get(1).map_or(0.0, |a| row.dot(&a.transpose()));
            [p0, p1]
        })
        .collect())
}

pub fn write_projection(path: &Path, records: &[ManifestRecord], coords: &[[f64; 2]]) -> Result<()> {
    if records.len() != coords.len() {
        return Err(Error::invalid("records and coordinates differ in length"));
    }
    let mut out = String::from("speaker_id\tlabel\tgender\tcorpus\tpc1\tpc2\n");
    for (r, c) in records.iter().zip(coords) {
        out.push_str(&format!("{}\t{}\t{}\t{}\t{}\t{}\n", r.speaker_id, r.label, r.gender, r.corpus, c[0], c[1]));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
