//! Dilated residual encoder with gated-tanh units, and the two-layer MLP
//! classifier on top of its embeddings.
//!
//! All trainable values, including the similarity scale and bias used by the
//! contrastive loss, live in one flat `f64` vector described by a
//! [`ParamLayout`]. Gradients use the same layout.
//!
//! Forward pass for one `frames x bins` patch:
//!
//! ```text
//! h0      = leaky(conv3x3(patch))                       1 -> C channels
//! a_l     = dilated_conv(h_l)                           C -> 2C
//! z_l     = tanh(a_l[..C]) * sigmoid(a_l[C..])
//! h_{l+1} = (h_l + dilated_conv(z_l)) / sqrt(2)
//! u       = leaky(conv1x1(h_N))                         C -> head channels
//! e       = W_e * mean_{t,f}(u) + b_e                   embedding
//! logp    = log_softmax(W_2 * leaky(W_1 e + b_1) + b_2)
//! ```

mod checkpoint;
pub mod conv;

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_VERSION};
use conv::{axpy, dot, Conv2d};

use crate::error::{Error, Result};
use crate::features::{SpectrogramPatch, PATCH_FRAMES};

pub const INITIAL_OMEGA: f64 = 10.0;
pub const INITIAL_BIAS: f64 = -5.0;
pub const MIN_OMEGA: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub total_layers: usize,
    pub block_count: usize,
    pub residual_channels: usize,
    pub kernel_size: usize,
    pub leaky_slope: f64,
    pub embedding_dim: usize,
    pub head_channels: usize,
    pub classifier_hidden: usize,
    pub input_bins: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            total_layers: 15,
            block_count: 5,
            residual_channels: 32,
            kernel_size: 3,
            leaky_slope: 0.4,
            embedding_dim: 256,
            head_channels: 64,
            classifier_hidden: 128,
            input_bins: 1025,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_count == 0 {
            return Err(Error::invalid("block_count must be at least 1"));
        }
        if self.total_layers == 0 || self.total_layers % self.block_count != 0 {
            return Err(Error::invalid(format!(
                "total_layers {} is not divisible by block_count {}",
                self.total_layers, self.block_count
            )));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::invalid("kernel_size must be odd"));
        }
        if self.residual_channels == 0
            || self.embedding_dim == 0
            || self.head_channels == 0
            || self.classifier_hidden == 0
            || self.input_bins == 0
        {
            return Err(Error::invalid("channel counts and dimensions must be positive"));
        }
        if !(self.leaky_slope.is_finite()) {
            return Err(Error::invalid("leaky_slope must be finite"));
        }
        Ok(())
    }

    pub fn layers_per_block(&self) -> usize {
        self.total_layers / self.block_count.max(1)
    }

    /// Dilation of every residual layer: `2^j` for layer `j` of its block.
    pub fn dilations(&self) -> Vec<usize> {
        let n = self.layers_per_block();
        (0..self.total_layers).map(|l| 1usize << (l % n)).collect()
    }
}

/// Named ranges inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub init_w: Range<usize>,
    pub init_b: Range<usize>,
    pub layers: Vec<LayerLayout>,
    pub head_w: Range<usize>,
    pub head_b: Range<usize>,
    pub proj_w: Range<usize>,
    pub proj_b: Range<usize>,
    pub cls1_w: Range<usize>,
    pub cls1_b: Range<usize>,
    pub cls2_w: Range<usize>,
    pub cls2_b: Range<usize>,
    pub omega: usize,
    pub sim_bias: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerLayout {
    pub gate_w: Range<usize>,
    pub gate_b: Range<usize>,
    pub out_w: Range<usize>,
    pub out_b: Range<usize>,
    pub dilation: usize,
}

impl ParamLayout {
    pub fn new(cfg: &EncoderConfig) -> Self {
        let c = cfg.residual_channels;
        let k2 = cfg.kernel_size * cfg.kernel_size;
        let mut at = 0usize;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let init_w = take(c * k2);
        let init_b = take(c);
        let layers = cfg
            .dilations()
            .into_iter()
            .map(|dilation| LayerLayout {
                gate_w: take(2 * c * c * k2),
                gate_b: take(2 * c),
                out_w: take(c * c * k2),
                out_b: take(c),
                dilation,
            })
            .collect();
        let head_w = take(cfg.head_channels * c);
        let head_b = take(cfg.head_channels);
        let proj_w = take(cfg.embedding_dim * cfg.head_channels);
        let proj_b = take(cfg.embedding_dim);
        let cls1_w = take(cfg.classifier_hidden * cfg.embedding_dim);
        let cls1_b = take(cfg.classifier_hidden);
        let cls2_w = take(2 * cfg.classifier_hidden);
        let cls2_b = take(2);
        let omega = take(1).start;
        let sim_bias = take(1).start;
        Self {
            init_w,
            init_b,
            layers,
            head_w,
            head_b,
            proj_w,
            proj_b,
            cls1_w,
            cls1_b,
            cls2_w,
            cls2_b,
            omega,
            sim_bias,
            total: at,
        }
    }

    /// Encoder parameters (everything before the classifier).
    pub fn encoder_range(&self) -> Range<usize> {
        0..self.cls1_w.start
    }

    pub fn classifier_range(&self) -> Range<usize> {
        self.cls1_w.start..self.cls2_b.end
    }
}

/// Trainable state of the encoder, classifier and similarity parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: EncoderConfig,
    layout: ParamLayout,
    values: Vec<f64>,
}

/// A `embedding_dim`-long vector produced by the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Log-probabilities `[healthy, dysphonic]`.
pub type LogProbs = [f64; 2];

#[inline]
fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

#[inline]
fn leaky_grad(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        slope
    }
}

/// Logistic sigmoid, stable for large |x|.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_softmax(logits: [f64; 2]) -> LogProbs {
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    [logits[0] - lse, logits[1] - lse]
}

/// Hyperbolic tangent via `expm1`, several times faster than the libm
/// routine and accurate to a few ulps.
#[inline]
pub fn fast_tanh(x: f64) -> f64 {
    if x.abs() > 20.0 {
        return x.signum();
    }
    let e = (-2.0 * x.abs()).exp_m1();
    (-e / (e + 2.0)).copysign(x)
}

/// Elementwise gated-tanh unit `tanh(a) * sigmoid(b)`.
#[inline]
pub fn gated_tanh(a: f64, b: f64) -> f64 {
    fast_tanh(a) * sigmoid(b)
}

fn uniform_fill(rng: &mut ChaCha8Rng, out: &mut [f64], fan_in: usize) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    for v in out {
        *v = rng.gen_range(-bound..bound);
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    pre0: Vec<f64>,
    /// residual stream before each layer and after the last one
    hidden: Vec<Vec<f64>>,
    /// tanh of the filter half, then sigmoid of the gate half
    gates: Vec<Vec<f64>>,
    gated: Vec<Vec<f64>>,
    head_pre: Vec<f64>,
    pooled: Vec<f64>,
    pub embedding: Embedding,
    cls_pre: Vec<f64>,
    cls_hidden: Vec<f64>,
    pub logprobs: LogProbs,
}

impl ModelParams {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Rebuilds parameters from a config and a flat value vector.
    pub fn from_values(config: EncoderConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if values.len() != layout.total {
            return Err(Error::Shape {
                expected: format!("{} parameters", layout.total),
                got: format!("{}", values.len()),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {i}")));
        }
        Ok(Self {
            config,
            layout,
            values,
        })
    }

    pub fn omega(&self) -> f64 {
        self.values[self.layout.omega]
    }

    pub fn sim_bias(&self) -> f64 {
        self.values[self.layout.sim_bias]
    }

    pub fn similarity(&self) -> crate::loss::SimilarityParams {
        crate::loss::SimilarityParams {
            omega: self.omega(),
            bias: self.sim_bias(),
        }
    }

    /// Keeps the similarity scale strictly positive.
    pub fn clamp_omega(&mut self) {
        let i = self.layout.omega;
        self.values[i] = self.values[i].max(MIN_OMEGA);
    }

    fn check_patch(&self, patch: &SpectrogramPatch) -> Result<()> {
        if patch.bins() != self.config.input_bins || patch.frames() != PATCH_FRAMES {
            return Err(Error::Shape {
                expected: format!("{PATCH_FRAMES} x {}", self.config.input_bins),
                got: format!("{} x {}", patch.frames(), patch.bins()),
            });
        }
        Ok(())
    }

    pub fn encode(&self, patch: &SpectrogramPatch) -> Result<Embedding> {
        Ok(self.forward(patch)?.embedding)
    }

    pub fn classify(&self, e: &Embedding) -> Result<LogProbs> {
        if e.len() != self.config.embedding_dim {
            return Err(Error::Shape {
                expected: format!("embedding of length {}", self.config.embedding_dim),
                got: format!("{}", e.len()),
            });
        }
        Ok(self.classifier_forward(e.as_slice()).2)
    }

    fn classifier_forward(&self, e: &[f64]) -> (Vec<f64>, Vec<f64>, LogProbs) {
        let cfg = &self.config;
        let l = &self.layout;
        let v = &self.values;
        let hid = cfg.classifier_hidden;
        let ed = cfg.embedding_dim;
        let pre: Vec<f64> = (0..hid)
            .map(|j| v[l.cls1_b.start + j] + dot(&v[l.cls1_w.start + j * ed..l.cls1_w.start + (j + 1) * ed], e))
            .collect();
        let act: Vec<f64> = pre.iter().map(|&x| leaky(x, cfg.leaky_slope)).collect();
        let mut logits = [0.0; 2];
        for (k, lg) in logits.iter_mut().enumerate() {
            *lg = v[l.cls2_b.start + k]
                + dot(&v[l.cls2_w.start + k * hid..l.cls2_w.start + (k + 1) * hid], &act);
        }
        (pre, act, log_softmax(logits))
    }

    /// Full forward pass keeping every intermediate needed by [`ModelParams::backward`].
    pub fn forward(&self, patch: &SpectrogramPatch) -> Result<ForwardCache> {
        self.check_patch(patch)?;
        let cfg = &self.config;
        let l = &self.layout;
        let v = &self.values;
        let rows = PATCH_FRAMES;
        let cols = cfg.input_bins;
        let plane = rows * cols;
        let c = cfg.residual_channels;
        let k = cfg.kernel_size;
        let slope = cfg.leaky_slope;

        let init = Conv2d { in_ch: 1, out_ch: c, kernel: k, dilation: 1 };
        let mut pre0 = vec![0.0; c * plane];
        init.forward(&v[l.init_w.clone()], &v[l.init_b.clone()], patch.values(), rows, cols, &mut pre0);
        let h0: Vec<f64> = pre0.iter().map(|&x| leaky(x, slope)).collect();

        let mut hidden = Vec::with_capacity(l.layers.len() + 1);
        let mut gates = Vec::with_capacity(l.layers.len());
        let mut gated = Vec::with_capacity(l.layers.len());
        hidden.push(h0);
        let scale = std::f64::consts::FRAC_1_SQRT_2;
        for layer in &l.layers {
            let gate_conv = Conv2d { in_ch: c, out_ch: 2 * c, kernel: k, dilation: layer.dilation };
            let out_conv = Conv2d { in_ch: c, out_ch: c, kernel: k, dilation: layer.dilation };
            let h = hidden.last().expect("non-empty");
            let mut a = vec![0.0; 2 * c * plane];
            gate_conv.forward(&v[layer.gate_w.clone()], &v[layer.gate_b.clone()], h, rows, cols, &mut a);
            let (filt, gate) = a.split_at_mut(c * plane);
            let mut z = vec![0.0; c * plane];
            for i in 0..c * plane {
                filt[i] = fast_tanh(filt[i]);
                gate[i] = sigmoid(gate[i]);
                z[i] = filt[i] * gate[i];
            }
            let mut r = vec![0.0; c * plane];
            out_conv.forward(&v[layer.out_w.clone()], &v[layer.out_b.clone()], &z, rows, cols, &mut r);
            let next: Vec<f64> = h.iter().zip(&r).map(|(x, y)| (x + y) * scale).collect();
            gates.push(a);
            gated.push(z);
            hidden.push(next);
        }

        let hc = cfg.head_channels;
        let head = Conv2d { in_ch: c, out_ch: hc, kernel: 1, dilation: 1 };
        let mut head_pre = vec![0.0; hc * plane];
        head.forward(
            &v[l.head_w.clone()],
            &v[l.head_b.clone()],
            hidden.last().expect("non-empty"),
            rows,
            cols,
            &mut head_pre,
        );
        let pooled: Vec<f64> = head_pre
            .chunks(plane)
            .map(|ch| ch.iter().map(|&x| leaky(x, slope)).sum::<f64>() / plane as f64)
            .collect();
        let ed = cfg.embedding_dim;
        let emb: Vec<f64> = (0..ed)
            .map(|i| v[l.proj_b.start + i] + dot(&v[l.proj_w.start + i * hc..l.proj_w.start + (i + 1) * hc], &pooled))
            .collect();
        let (cls_pre, cls_hidden, logprobs) = self.classifier_forward(&emb);
        Ok(ForwardCache {
            input: patch.values().to_vec(),
            pre0,
            hidden,
            gates,
            gated,
            head_pre,
            pooled,
            embedding: Embedding(emb),
            cls_pre,
            cls_hidden,
            logprobs,
        })
    }

    /// Backpropagates `d_embedding` (gradient of the loss with respect to the
    /// embedding from every path except the classifier) and `d_logprobs`
    /// through one cached forward pass, accumulating into `grads`.
    /// `d_logprobs = None` skips the classifier entirely.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_embedding: &[f64],
        d_logprobs: Option<LogProbs>,
        grads: &mut [f64],
    ) {
        let cfg = &self.config;
        let l = &self.layout;
        let v = &self.values;
        let slope = cfg.leaky_slope;
        let ed = cfg.embedding_dim;
        let hid = cfg.classifier_hidden;
        let mut de = d_embedding.to_vec();

        if let Some(dlp) = d_logprobs {
            // log-softmax backward
            let s = dlp[0] + dlp[1];
            let p = [cache.logprobs[0].exp(), cache.logprobs[1].exp()];
            let dlogits = [dlp[0] - p[0] * s, dlp[1] - p[1] * s];
            let mut dh = vec![0.0; hid];
            for (kk, &dl) in dlogits.iter().enumerate() {
                grads[l.cls2_b.start + kk] += dl;
                let w0 = l.cls2_w.start + kk * hid;
                axpy(dl, &cache.cls_hidden, &mut grads[w0..w0 + hid]);
                axpy(dl, &v[w0..w0 + hid], &mut dh);
            }
            for j in 0..hid {
                let g = dh[j] * leaky_grad(cache.cls_pre[j], slope);
                if g == 0.0 {
                    continue;
                }
                grads[l.cls1_b.start + j] += g;
                let w0 = l.cls1_w.start + j * ed;
                axpy(g, cache.embedding.as_slice(), &mut grads[w0..w0 + ed]);
                axpy(g, &v[w0..w0 + ed], &mut de);
            }
        }

        // projection
        let hc = cfg.head_channels;
        let mut dpool = vec![0.0; hc];
        for i in 0..ed {
            let g = de[i];
            if g == 0.0 {
                continue;
            }
            grads[l.proj_b.start + i] += g;
            let w0 = l.proj_w.start + i * hc;
            axpy(g, &cache.pooled, &mut grads[w0..w0 + hc]);
            axpy(g, &v[w0..w0 + hc], &mut dpool);
        }
        let rows = PATCH_FRAMES;
        let cols = cfg.input_bins;
        let plane = rows * cols;
        let c = cfg.residual_channels;
        let k = cfg.kernel_size;
        let dhead: Vec<f64> = cache
            .head_pre
            .iter()
            .enumerate()
            .map(|(i, &x)| dpool[i / plane] / plane as f64 * leaky_grad(x, slope))
            .collect();
        let mut dh = vec![0.0; c * plane];
        let head = Conv2d { in_ch: c, out_ch: hc, kernel: 1, dilation: 1 };
        {
            let (gw, gb) = split_two(grads, l.head_w.clone(), l.head_b.clone());
            head.backward(
                &v[l.head_w.clone()],
                cache.hidden.last().expect("non-empty"),
                rows,
                cols,
                &dhead,
                Some(&mut dh),
                gw,
                gb,
            );
        }

        let scale = std::f64::consts::FRAC_1_SQRT_2;
        for (li, layer) in l.layers.iter().enumerate().rev() {
            dh.iter_mut().for_each(|g| *g *= scale);
            let out_conv = Conv2d { in_ch: c, out_ch: c, kernel: k, dilation: layer.dilation };
            let mut dz = vec![0.0; c * plane];
            {
                let (gw, gb) = split_two(grads, layer.out_w.clone(), layer.out_b.clone());
                out_conv.backward(&v[layer.out_w.clone()], &cache.gated[li], rows, cols, &dh, Some(&mut dz), gw, gb);
            }
            let (tanh_f, sig_g) = cache.gates[li].split_at(c * plane);
            let mut da = vec![0.0; 2 * c * plane];
            {
                let (dfilt, dgate) = da.split_at_mut(c * plane);
                for i in 0..c * plane {
                    let t = tanh_f[i];
                    let s = sig_g[i];
                    dfilt[i] = dz[i] * s * (1.0 - t * t);
                    dgate[i] = dz[i] * t * s * (1.0 - s);
                }
            }
            let gate_conv = Conv2d { in_ch: c, out_ch: 2 * c, kernel: k, dilation: layer.dilation };
            let (gw, gb) = split_two(grads, layer.gate_w.clone(), layer.gate_b.clone());
            // dh already holds the residual path; the gate path accumulates on top
            gate_conv.backward(&v[layer.gate_w.clone()], &cache.hidden[li], rows, cols, &da, Some(&mut dh), gw, gb);
        }

        let dpre0: Vec<f64> = dh
            .iter()
            .zip(&cache.pre0)
            .map(|(g, &x)| g * leaky_grad(x, slope))
            .collect();
        let init = Conv2d { in_ch: 1, out_ch: c, kernel: k, dilation: 1 };
        let (gw, gb) = split_two(grads, l.init_w.clone(), l.init_b.clone());
        init.backward(&v[l.init_w.clone()], &cache.input, rows, cols, &dpre0, None, gw, gb);
    }
}

/// Two disjoint mutable views into `buf`; `a` must precede `b`.
fn split_two(buf: &mut [f64], a: Range<usize>, b: Range<usize>) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (left, right) = buf.split_at_mut(b.start);
    (&mut left[a], &mut right[..b.end - b.start])
}

/// Initializes parameters: every weight and bias is drawn from
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the similarity scale starts at 10 and
/// its bias at -5.
pub fn init_model(cfg: &EncoderConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let layout = ParamLayout::new(cfg);
    let mut values = vec![0.0; layout.total];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = cfg.residual_channels;
    let k2 = cfg.kernel_size * cfg.kernel_size;
    let mut fill = |r: Range<usize>, fan_in: usize, rng: &mut ChaCha8Rng| uniform_fill(rng, &mut values[r], fan_in);
    fill(layout.init_w.clone(), k2, &mut rng);
    fill(layout.init_b.clone(), k2, &mut rng);
    for layer in &layout.layers {
        fill(layer.gate_w.clone(), c * k2, &mut rng);
        fill(layer.gate_b.clone(), c * k2, &mut rng);
        fill(layer.out_w.clone(), c * k2, &mut rng);
        fill(layer.out_b.clone(), c * k2, &mut rng);
    }
    fill(layout.head_w.clone(), c, &mut rng);
    fill(layout.head_b.clone(), c, &mut rng);
    fill(layout.proj_w.clone(), cfg.head_channels, &mut rng);
    fill(layout.proj_b.clone(), cfg.head_channels, &mut rng);
    fill(layout.cls1_w.clone(), cfg.embedding_dim, &mut rng);
    fill(layout.cls1_b.clone(), cfg.embedding_dim, &mut rng);
    fill(layout.cls2_w.clone(), cfg.classifier_hidden, &mut rng);
    fill(layout.cls2_b.clone(), cfg.classifier_hidden, &mut rng);
    values[layout.omega] = INITIAL_OMEGA;
    values[layout.sim_bias] = INITIAL_BIAS;
    Ok(ModelParams {
        config: cfg.clone(),
        layout,
        values,
    })
}
