//! Temporal attention blocks.
//!
//! Four mechanisms, each a composable layer:
//!
//! - **CTA** (classic temporal attention): a per-timestep scalar gate
//!   computed from that timestep's features only.
//! - **GTA** (global temporal attention): a temporal gate computed from the
//!   whole sequence through time-axis mixing layers, so the weight assigned
//!   to a sample depends on its temporal location.
//! - **SA** (self-attention): content-correlation attention over query, key,
//!   and value projections.
//! - **TPS**: self-attention whose attention matrix is averaged with a
//!   content-conditioned, asymmetric, distance-decaying pseudo-Gaussian
//!   neighbor matrix and row-renormalized.
//!
//! Plus a learnable positional-encoding table and the encoder layer
//! (attention sublayer, residual adds, layer norms, position-wise
//! feed-forward) the SA/TPS blocks live in.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Dense, LayerNorm};
use crate::tensor::{Initializer, Parameter, Tensor};

/// How the base self-attention matrix is scaled before it is combined with
/// the pseudo-Gaussian matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalingMode {
    /// No rescaling (default).
    Identity,
    /// One learnable scalar per head, initialized to 1; applied through an
    /// absolute value so the combined row sums stay positive.
    LearnableScalar,
}

impl std::str::FromStr for ScalingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(ScalingMode::Identity),
            "learnable-scalar" => Ok(ScalingMode::LearnableScalar),
            other => Err(Error::Usage(format!(
                "unknown scaling mode '{other}' (expected identity or learnable-scalar)"
            ))),
        }
    }
}

/// Hyperparameters shared by the attention blocks and encoder stacks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Hidden width of the encoder (embedding dimension).
    pub d: usize,
    /// Attention heads; must divide `d`.
    pub heads: usize,
    /// Encoder layers.
    pub layers: usize,
    /// Reduction factor of the temporal-attention bottleneck.
    pub reduction: usize,
    /// Additive floor of the pseudo-Gaussian spreads; must be positive so
    /// the spreads can never reach zero.
    pub sigma_floor: f64,
    pub scaling: ScalingMode,
    /// Use squared temporal distance in the pseudo-Gaussian exponent instead
    /// of the default linear distance.
    pub squared_distance: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            d: 128,
            heads: 1,
            layers: 1,
            reduction: 16,
            sigma_floor: 1.0,
            scaling: ScalingMode::Identity,
            squared_distance: false,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.layers == 0 || self.reduction == 0 {
            return Err(Error::Usage(
                "attention config: d, heads, layers, and reduction must be positive".into(),
            ));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Usage(format!(
                "attention config: d = {} is not divisible by heads = {}",
                self.d, self.heads
            )));
        }
        if self.sigma_floor <= 0.0 {
            return Err(Error::Usage(format!(
                "attention config: sigma floor must be positive, got {}",
                self.sigma_floor
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Classic temporal attention
// ---------------------------------------------------------------------------

/// Per-timestep gate: `A = softmax(W2 relu(W1 f_t))` over time, `O = F diag(A)`.
/// The gate for time t depends on `f_t` alone, so it is equivariant under
/// permutations of the time axis.
pub struct CtaBlock {
    pub w1: Tensor,
    pub w2: Tensor,
    pub d: usize,
    pub reduction: usize,
}

impl CtaBlock {
    pub fn new(init: &mut Initializer, d: usize, reduction: usize) -> Self {
        let d_r = (d / reduction).max(1);
        CtaBlock {
            w1: init.dense(vec![d_r, d], d, d_r),
            w2: init.dense(vec![1, d_r], d_r, 1),
            d,
            reduction,
        }
    }

    pub fn bottleneck(&self) -> usize {
        (self.d / self.reduction).max(1)
    }

    /// Input `F: [d, n]`; returns the gated series and the gate row.
    pub fn forward(&self, f: &Tensor) -> Result<(Tensor, Tensor)> {
        if f.ndim() != 2 || f.shape()[0] != self.d {
            return Err(Error::Shape(format!(
                "cta: input {:?} does not have {} feature rows",
                f.shape(),
                self.d
            )));
        }
        let hidden = self.w1.matmul(f)?.relu();
        let scores = self.w2.matmul(&hidden)?;
        let attn = scores.softmax(1)?;
        let gated = f.mul_colwise(&attn)?;
        Ok((gated, attn))
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<Parameter>) {
        out.push(Parameter::new(format!("{prefix}.w1"), self.w1.clone()));
        out.push(Parameter::new(format!("{prefix}.w2"), self.w2.clone()));
    }
}

// ---------------------------------------------------------------------------
// Global temporal attention
// ---------------------------------------------------------------------------

/// Whole-sequence temporal gate. `A1 = relu(W1 F)` summarizes each timestep,
/// then two time-mixing layers squeeze and re-expand the time axis:
/// `A = sigmoid(W3 relu(W2 A1^T))`. Every gate entry lies in (0, 1) and
/// depends on the full sequence, so the block is sensitive to temporal
/// location. Constructed for a fixed sequence length.
pub struct GtaBlock {
    pub w1: Tensor,
    pub w2: Tensor,
    pub w3: Tensor,
    pub d: usize,
    /// Sequence length the time-mixing weights were built for.
    pub t: usize,
    pub reduction: usize,
}

impl GtaBlock {
    pub fn new(init: &mut Initializer, d: usize, t: usize, reduction: usize) -> Self {
        let t_r = (t / reduction).max(1);
        GtaBlock {
            w1: init.dense(vec![1, d], d, 1),
            w2: init.dense(vec![t_r, t], t, t_r),
            w3: init.dense(vec![t, t_r], t_r, t),
            d,
            t,
            reduction,
        }
    }

    pub fn bottleneck(&self) -> usize {
        (self.t / self.reduction).max(1)
    }

    /// Input `F: [d, t]` with `t` equal to the construction length.
    pub fn forward(&self, f: &Tensor) -> Result<(Tensor, Tensor)> {
        if f.ndim() != 2 || f.shape()[0] != self.d {
            return Err(Error::Shape(format!(
                "gta: input {:?} does not have {} feature rows",
                f.shape(),
                self.d
            )));
        }
        if f.shape()[1] != self.t {
            return Err(Error::Shape(format!(
                "gta: input length {} differs from the block's fixed length {}; \
                 rebuild the block for this length or pad the series",
                f.shape()[1],
                self.t
            )));
        }
        let a1 = self.w1.matmul(f)?.relu(); // [1, t]
        let squeezed = self.w2.matmul(&a1.transpose()?)?.relu(); // [t_r, 1]
        let attn = self.w3.matmul(&squeezed)?.sigmoid().transpose()?; // [1, t]
        let gated = f.mul_colwise(&attn)?;
        Ok((gated, attn))
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<Parameter>) {
        out.push(Parameter::new(format!("{prefix}.w1"), self.w1.clone()));
        out.push(Parameter::new(format!("{prefix}.w2"), self.w2.clone()));
        out.push(Parameter::new(format!("{prefix}.w3"), self.w3.clone()));
    }
}

// ---------------------------------------------------------------------------
// Self-attention
// ---------------------------------------------------------------------------

/// Query/key/value projections are stored in the `k_i = W_K f_i` orientation
/// (each a `[d, d]` matrix applied to feature columns), with no biases.
pub struct SaBlock {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub d: usize,
    pub heads: usize,
}

/// Diagnostics from a self-attention forward pass.
pub struct SaOutput {
    /// `[n, d]` attended values (heads concatenated).
    pub output: Tensor,
    /// Final attention matrix per head, rows summing to 1.
    pub attention: Vec<Tensor>,
}

impl SaBlock {
    pub fn new(init: &mut Initializer, d: usize, heads: usize) -> Self {
        SaBlock {
            wq: init.dense(vec![d, d], d, d),
            wk: init.dense(vec![d, d], d, d),
            wv: init.dense(vec![d, d], d, d),
            d,
            heads,
        }
    }

    fn check_input(&self, f: &Tensor) -> Result<usize> {
        if f.ndim() != 2 || f.shape()[1] != self.d {
            return Err(Error::Shape(format!(
                "self-attention: input {:?} does not have feature width {}",
                f.shape(),
                self.d
            )));
        }
        Ok(f.shape()[0])
    }

    /// Projections for input `F: [n, d]` (rows are timesteps).
    fn project(&self, f: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let q = f.matmul(&self.wq.transpose()?)?;
        let k = f.matmul(&self.wk.transpose()?)?;
        let v = f.matmul(&self.wv.transpose()?)?;
        Ok((q, k, v))
    }

    /// Scaled dot-product attention per head: `softmax(Q K^T / sqrt(d_head))`.
    fn head_attention(&self, q: &Tensor, k: &Tensor, head: usize) -> Result<Tensor> {
        let dh = self.d / self.heads;
        let (lo, hi) = (head * dh, (head + 1) * dh);
        let qh = q.slice_cols(lo, hi)?;
        let kh = k.slice_cols(lo, hi)?;
        let logits = qh.matmul(&kh.transpose()?)?.scale(1.0 / (dh as f64).sqrt());
        logits.softmax(1)
    }

    /// `O = A V` with rows of `A` summing to 1.
    pub fn forward(&self, f: &Tensor) -> Result<SaOutput> {
        self.check_input(f)?;
        let (q, k, v) = self.project(f)?;
        let dh = self.d / self.heads;
        let mut heads_out = Vec::with_capacity(self.heads);
        let mut attn = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let a = self.head_attention(&q, &k, h)?;
            let vh = v.slice_cols(h * dh, (h + 1) * dh)?;
            heads_out.push(a.matmul(&vh)?);
            attn.push(a);
        }
        let output = if self.heads == 1 {
            heads_out.pop().unwrap()
        } else {
            Tensor::concat_cols(&heads_out)?
        };
        Ok(SaOutput { output, attention: attn })
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<Parameter>) {
        out.push(Parameter::new(format!("{prefix}.wq"), self.wq.clone()));
        out.push(Parameter::new(format!("{prefix}.wk"), self.wk.clone()));
        out.push(Parameter::new(format!("{prefix}.wv"), self.wv.clone()));
    }
}

// ---------------------------------------------------------------------------
// Temporal pseudo-Gaussian augmented self-attention
// ---------------------------------------------------------------------------

/// Self-attention combined with a pseudo-Gaussian neighbor matrix.
///
/// Spreads are derived from each timestep's value vector through the shared
/// row weights `w_sigma` (forward spread) and `w_sigma_hat` (backward
/// spread), floored at `sigma_floor` by construction.
pub struct TpsBlock {
    pub sa: SaBlock,
    pub w_sigma: Tensor,
    pub w_sigma_hat: Tensor,
    pub sigma_floor: f64,
    pub scaling: ScalingMode,
    /// One scalar per head when `scaling` is learnable; empty otherwise.
    pub scales: Vec<Tensor>,
    pub squared_distance: bool,
}

/// Diagnostics from a TPS forward pass; everything the attention-dump
/// interface writes out.
pub struct TpsOutput {
    /// `[n, d]` attended values (heads concatenated).
    pub output: Tensor,
    /// Final combined attention per head, rows summing to 1.
    pub attention: Vec<Tensor>,
    /// Scaled base self-attention per head.
    pub base_attention: Vec<Tensor>,
    /// Shared pseudo-Gaussian matrix, diagonal exactly 1.
    pub pseudo_gaussian: Tensor,
    pub sigma_hat: Tensor,
    pub sigma: Tensor,
}

impl TpsBlock {
    pub fn new(init: &mut Initializer, cfg: &AttentionConfig) -> Self {
        let sa = SaBlock::new(init, cfg.d, cfg.heads);
        let scales = match cfg.scaling {
            ScalingMode::Identity => Vec::new(),
            ScalingMode::LearnableScalar => {
                (0..cfg.heads).map(|_| init.constant(vec![1], 1.0)).collect()
            }
        };
        TpsBlock {
            sa,
            w_sigma: init.dense(vec![1, cfg.d], cfg.d, 1),
            w_sigma_hat: init.dense(vec![1, cfg.d], cfg.d, 1),
            sigma_floor: cfg.sigma_floor,
            scaling: cfg.scaling,
            scales,
            squared_distance: cfg.squared_distance,
        }
    }

    /// Spreads from value vectors `V: [n, d]`: `sigma_hat = |W' v| + b`,
    /// `sigma = |W v| + b`. Both are bounded below by the floor.
    pub fn sigma(&self, v: &Tensor) -> Result<(Tensor, Tensor)> {
        let sigma_hat = v
            .matmul(&self.w_sigma_hat.transpose()?)?
            .abs()
            .add_scalar(self.sigma_floor);
        let sigma = v
            .matmul(&self.w_sigma.transpose()?)?
            .abs()
            .add_scalar(self.sigma_floor);
        Ok((sigma_hat, sigma))
    }

    /// Full forward pass for `F: [n, d]`.
    pub fn forward(&self, f: &Tensor) -> Result<TpsOutput> {
        self.sa.check_input(f)?;
        let (q, k, v) = self.sa.project(f)?;
        let (sigma_hat, sigma) = self.sigma(&v)?;
        let a2 = pseudo_gaussian_matrix(&sigma_hat, &sigma, self.squared_distance)?;
        let dh = self.sa.d / self.sa.heads;
        let mut heads_out = Vec::with_capacity(self.sa.heads);
        let mut attention = Vec::with_capacity(self.sa.heads);
        let mut base_attention = Vec::with_capacity(self.sa.heads);
        for h in 0..self.sa.heads {
            let mut a1 = self.sa.head_attention(&q, &k, h)?;
            if self.scaling == ScalingMode::LearnableScalar {
                a1 = a1.mul_scalar_tensor(&self.scales[h].abs())?;
            }
            // Row sums of (A1 + A2) / 2 are at least 1/2: A1 rows are
            // non-negative, A2 entries are positive with a unit diagonal, so
            // the normalization can never divide by zero.
            let combined = a1.add(&a2)?.scale(0.5).row_normalize()?;
            let vh = v.slice_cols(h * dh, (h + 1) * dh)?;
            heads_out.push(combined.matmul(&vh)?);
            attention.push(combined);
            base_attention.push(a1);
        }
        let output = if self.sa.heads == 1 {
            heads_out.pop().unwrap()
        } else {
            Tensor::concat_cols(&heads_out)?
        };
        Ok(TpsOutput {
            output,
            attention,
            base_attention,
            pseudo_gaussian: a2,
            sigma_hat: flatten(sigma_hat),
            sigma: flatten(sigma),
        })
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<Parameter>) {
        self.sa.collect(prefix, out);
        out.push(Parameter::new(format!("{prefix}.w_sigma"), self.w_sigma.clone()));
        out.push(Parameter::new(format!("{prefix}.w_sigma_hat"), self.w_sigma_hat.clone()));
        for (h, s) in self.scales.iter().enumerate() {
            out.push(Parameter::new(format!("{prefix}.scale{h}"), s.clone()));
        }
    }
}

/// Reshape an `[n, 1]` column to `[n]` without breaking the tape.
fn flatten(x: Tensor) -> Tensor {
    let n = x.numel();
    let data = x.to_vec();
    let parent = x.clone();
    Tensor::from_op(vec![n], data, vec![x], move |node| {
        parent.accumulate_grad(&node.grad_ref());
    })
}

/// Pseudo-Gaussian neighbor matrix from per-position spreads.
///
/// Row i decays with temporal distance from i: entries left of the diagonal
/// use the backward spread, entries on or right of it the forward spread:
///
/// ```text
/// p[i][j] = exp(-dist(i, j) / (4 * s_i^2)),  s_i = sigma_hat_i (j < i) | sigma_i (j >= i)
/// ```
///
/// with `dist` the temporal distance `|i - j|` (or its square when
/// `squared` is set). The diagonal is exactly 1 and every entry lies in
/// (0, 1]; the matrix is asymmetric wherever the two spreads differ.
pub fn pseudo_gaussian_matrix(sigma_hat: &Tensor, sigma: &Tensor, squared: bool) -> Result<Tensor> {
    let n = sigma_hat.numel();
    if sigma.numel() != n {
        return Err(Error::Shape(format!(
            "pseudo-gaussian: spread lengths {} and {} differ",
            n,
            sigma.numel()
        )));
    }
    let sh = sigma_hat.to_vec();
    let sf = sigma.to_vec();
    let dist = move |i: usize, j: usize| -> f64 {
        let d = (i as f64 - j as f64).abs();
        if squared {
            d * d
        } else {
            d
        }
    };
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let s = if j < i { sh[i] } else { sf[i] };
            out[i * n + j] = (-dist(i, j) / (4.0 * s * s)).exp();
        }
    }
    let p = out.clone();
    let (a, b) = (sigma_hat.clone(), sigma.clone());
    Ok(Tensor::from_op(
        vec![n, n],
        out,
        vec![sigma_hat.clone(), sigma.clone()],
        move |node| {
            let g = node.grad_ref();
            let mut dsh = vec![0.0; n];
            let mut dsf = vec![0.0; n];
            for i in 0..n {
                for j in 0..n {
                    let gij = g[i * n + j];
                    if gij == 0.0 {
                        continue;
                    }
                    // d/ds exp(-D / (4 s^2)) = p * D / (2 s^3)
                    let (s, slot) = if j < i {
                        (sh[i], &mut dsh[i])
                    } else {
                        (sf[i], &mut dsf[i])
                    };
                    *slot += gij * p[i * n + j] * dist(i, j) / (2.0 * s * s * s);
                }
            }
            a.accumulate_grad(&dsh);
            b.accumulate_grad(&dsf);
        },
    ))
}

// ---------------------------------------------------------------------------
// Positional encoding
// ---------------------------------------------------------------------------

/// Learnable per-position embeddings added to the encoder input.
pub struct PositionalEncoding {
    pub table: Tensor,
    pub max_len: usize,
    pub d: usize,
}

impl PositionalEncoding {
    pub fn new(init: &mut Initializer, max_len: usize, d: usize) -> Self {
        PositionalEncoding {
            table: init.dense(vec![max_len, d], max_len, d),
            max_len,
            d,
        }
    }

    /// `X: [n, d] -> X + table[0..n]`; gradient reaches exactly the first
    /// n table rows.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.ndim() != 2 || x.shape()[1] != self.d {
            return Err(Error::Shape(format!(
                "positional encoding: input {:?} does not have width {}",
                x.shape(),
                self.d
            )));
        }
        let n = x.shape()[0];
        if n > self.max_len {
            return Err(Error::Capacity(format!(
                "positional encoding: sequence length {n} exceeds table capacity {}",
                self.max_len
            )));
        }
        x.add(&self.table.slice_rows(0, n)?)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<Parameter>) {
        out.push(Parameter::new(format!("{prefix}.table"), self.table.clone()));
    }
}

// ---------------------------------------------------------------------------
// Encoder layer
// ---------------------------------------------------------------------------

/// Attention flavor inside an encoder layer.
pub enum AttentionKind {
    Sa(SaBlock),
    Tps(TpsBlock),
}

/// Post-norm transformer encoder layer: attention sublayer (plus a learned
/// output bias), residual add, layer norm, position-wise feed-forward
/// (d -> 4d -> d, ReLU), residual add, layer norm.
pub struct EncoderLayer {
    pub attention: AttentionKind,
    pub out_bias: Tensor,
    pub ff1: Dense,
    pub ff2: Dense,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub d: usize,
}

impl EncoderLayer {
    pub fn new(init: &mut Initializer, cfg: &AttentionConfig, tps: bool) -> Self {
        let attention = if tps {
            AttentionKind::Tps(TpsBlock::new(init, cfg))
        } else {
            AttentionKind::Sa(SaBlock::new(init, cfg.d, cfg.heads))
        };
        let d_ff = 4 * cfg.d;
        EncoderLayer {
            attention,
            out_bias: init.zeros(vec![cfg.d]),
            ff1: Dense::new(init, cfg.d, d_ff),
            ff2: Dense::new(init, d_ff, cfg.d),
            ln1: LayerNorm::new(init, cfg.d),
            ln2: LayerNorm::new(init, cfg.d),
            d: cfg.d,
        }
    }

    /// `X: [n, d] -> [n, d]`, shape preserved.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let attended = match &self.attention {
            AttentionKind::Sa(sa) => sa.forward(x)?.output,
            AttentionKind::Tps(tps) => tps.forward(x)?.output,
        };
        let attended = attended.add_bias_last(&self.out_bias)?;
        let x1 = self.ln1.forward(&x.add(&attended)?)?;
        let ff = self.ff2.forward(&self.ff1.forward(&x1)?.relu())?;
        self.ln2.forward(&x1.add(&ff)?)
    }

    /// Forward pass that also returns the TPS diagnostics of this layer,
    /// for the attention-dump interface.
    pub fn forward_with_diagnostics(&self, x: &Tensor) -> Result<(Tensor, Option<TpsOutput>)> {
        match &self.attention {
            AttentionKind::Sa(sa) => {
                let out = sa.forward(x)?;
                let attended = out.output.add_bias_last(&self.out_bias)?;
                let x1 = self.ln1.forward(&x.add(&attended)?)?;
                let ff = self.ff2.forward(&self.ff1.forward(&x1)?.relu())?;
                Ok((self.ln2.forward(&x1.add(&ff)?)?, None))
            }
            AttentionKind::Tps(tps) => {
                let out = tps.forward(x)?;
                let attended = out.output.add_bias_last(&self.out_bias)?;
                let x1 = self.ln1.forward(&x.add(&attended)?)?;
                let ff = self.ff2.forward(&self.ff1.forward(&x1)?.relu())?;
                Ok((self.ln2.forward(&x1.add(&ff)?)?, Some(out)))
            }
        }
    }

    /// Plain self-attention diagnostics (final attention per head).
    pub fn sa_diagnostics(&self, x: &Tensor) -> Result<Option<SaOutput>> {
        match &self.attention {
            AttentionKind::Sa(sa) => Ok(Some(sa.forward(x)?)),
            AttentionKind::Tps(_) => Ok(None),
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<Parameter>) {
        match &self.attention {
            AttentionKind::Sa(sa) => sa.collect(prefix, out),
            AttentionKind::Tps(tps) => tps.collect(prefix, out),
        }
        out.push(Parameter::new(format!("{prefix}.out_bias"), self.out_bias.clone()));
        self.ff1.collect(&format!("{prefix}.ff1"), out);
        self.ff2.collect(&format!("{prefix}.ff2"), out);
        self.ln1.collect(&format!("{prefix}.ln1"), out);
        self.ln2.collect(&format!("{prefix}.ln2"), out);
    }
}

// ---------------------------------------------------------------------------
// Attention dump rendering
// ---------------------------------------------------------------------------

/// Render an `[n, n]` matrix as CSV with a one-line `t0,t1,...` header.
pub fn render_matrix_csv(data: &[f64], rows: usize, cols: usize) -> String {
    let mut s = String::new();
    for j in 0..cols {
        if j > 0 {
            s.push(',');
        }
        s.push_str(&format!("t{j}"));
    }
    s.push('\n');
    for i in 0..rows {
        for j in 0..cols {
            if j > 0 {
                s.push(',');
            }
            s.push_str(&format!("{}", data[i * cols + j]));
        }
        s.push('\n');
    }
    s
}

/// Render the spread columns as CSV: header `sigma_hat,sigma`, one row per
/// timestep.
pub fn render_sigma_csv(sigma_hat: &[f64], sigma: &[f64]) -> String {
    let mut s = String::from("sigma_hat,sigma\n");
    for (sh, sf) in sigma_hat.iter().zip(sigma) {
        s.push_str(&format!("{sh},{sf}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(d: usize) -> AttentionConfig {
        AttentionConfig { d, ..AttentionConfig::default() }
    }

    #[test]
    fn cta_zero_input_is_annihilated() {
        let mut init = Initializer::new(7);
        let block = CtaBlock::new(&mut init, 4, 2);
        let f = Tensor::zeros(vec![4, 5]);
        let (o, a) = block.forward(&f).unwrap();
        assert!(o.to_vec().iter().all(|&x| x == 0.0));
        let s: f64 = a.to_vec().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cta_is_permutation_equivariant() {
        let mut init = Initializer::new(3);
        let block = CtaBlock::new(&mut init, 3, 2);
        let f = Tensor::new(
            vec![3, 4],
            vec![0.3, -1.2, 0.7, 2.0, 1.1, 0.0, -0.4, 0.9, -0.8, 0.5, 1.6, -0.1],
        )
        .unwrap();
        let (_, a) = block.forward(&f).unwrap();
        // Reverse the time columns.
        let fd = f.to_vec();
        let mut rev = vec![0.0; 12];
        for r in 0..3 {
            for c in 0..4 {
                rev[r * 4 + c] = fd[r * 4 + (3 - c)];
            }
        }
        let (_, a_rev) = block.forward(&Tensor::new(vec![3, 4], rev).unwrap()).unwrap();
        let av = a.to_vec();
        let ar = a_rev.to_vec();
        for c in 0..4 {
            assert!((av[c] - ar[3 - c]).abs() < 1e-12);
        }
    }

    #[test]
    fn gta_zero_weights_gate_half() {
        let mut init = Initializer::new(1);
        let block = GtaBlock::new(&mut init, 2, 8, 16);
        for w in [&block.w1, &block.w2, &block.w3] {
            w.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let f = Tensor::new(vec![2, 8], (0..16).map(|x| x as f64).collect()).unwrap();
        let (o, a) = block.forward(&f).unwrap();
        assert!(a.to_vec().iter().all(|&x| (x - 0.5).abs() < 1e-12));
        for (ov, fv) in o.to_vec().iter().zip(f.to_vec()) {
            assert!((ov - 0.5 * fv).abs() < 1e-12);
        }
    }

    #[test]
    fn gta_zero_input_is_annihilated() {
        let mut init = Initializer::new(6);
        let block = GtaBlock::new(&mut init, 3, 6, 16);
        let (o, _) = block.forward(&Tensor::zeros(vec![3, 6])).unwrap();
        assert!(o.to_vec().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gta_rejects_wrong_length() {
        let mut init = Initializer::new(1);
        let block = GtaBlock::new(&mut init, 2, 8, 16);
        let f = Tensor::zeros(vec![2, 5]);
        assert!(matches!(block.forward(&f), Err(Error::Shape(_))));
    }

    #[test]
    fn sa_zero_query_gives_uniform_rows() {
        let mut init = Initializer::new(11);
        let block = SaBlock::new(&mut init, 4, 1);
        block.wq.data_mut().iter_mut().for_each(|x| *x = 0.0);
        let f = Tensor::new(vec![3, 4], (0..12).map(|x| x as f64 * 0.25 - 1.0).collect()).unwrap();
        let out = block.forward(&f).unwrap();
        let a = out.attention[0].to_vec();
        for &x in &a {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
        // Each output row equals the mean of the value rows.
        let v = f.matmul(&block.wv.transpose().unwrap()).unwrap().to_vec();
        let o = out.output.to_vec();
        for j in 0..4 {
            let mean = (v[j] + v[4 + j] + v[8 + j]) / 3.0;
            for i in 0..3 {
                assert!((o[i * 4 + j] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tps_sigma_floor_and_abs() {
        let mut init = Initializer::new(5);
        let cfg = config(3);
        let block = TpsBlock::new(&mut init, &cfg);
        block.w_sigma.data_mut().iter_mut().for_each(|x| *x = 0.0);
        block.w_sigma_hat.data_mut().iter_mut().for_each(|x| *x = 0.0);
        let v = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 0.0, 3.0, -1.0]).unwrap();
        let (sh, sf) = block.sigma(&v).unwrap();
        assert!(sh.to_vec().iter().all(|&x| x == 1.0));
        assert!(sf.to_vec().iter().all(|&x| x == 1.0));
        // |W v| + b with W v = -2 and b = 1 gives 3.
        {
            let mut w = block.w_sigma.data_mut();
            w.copy_from_slice(&[-2.0, 0.0, 0.0]);
        }
        let v1 = Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let (_, sf) = block.sigma(&v1).unwrap();
        assert!((sf.to_vec()[0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn pseudo_gaussian_matches_scalar_evaluation() {
        // Unit diagonal for any spread.
        let sh = Tensor::new(vec![3], vec![0.5, 2.0, 7.3]).unwrap();
        let sf = Tensor::new(vec![3], vec![1.0, 0.5, 0.1]).unwrap();
        let a2 = pseudo_gaussian_matrix(&sh, &sf, false).unwrap();
        let v = a2.to_vec();
        for i in 0..3 {
            assert_eq!(v[i * 3 + i], 1.0);
        }
        // sigma = sigma_hat = 0.5 at all positions: p[i][i +/- 1] = e^-1.
        let half = Tensor::new(vec![3], vec![0.5; 3]).unwrap();
        let a2 = pseudo_gaussian_matrix(&half, &half, false).unwrap();
        let v = a2.to_vec();
        let e1 = (-1.0f64).exp();
        assert!((v[1] - e1).abs() < 1e-9); // p[0][1]
        assert!((v[3] - e1).abs() < 1e-9); // p[1][0]
        // Distinct spreads make the row asymmetric: sigma_hat = 1, sigma = 0.5.
        let ones = Tensor::new(vec![3], vec![1.0; 3]).unwrap();
        let a2 = pseudo_gaussian_matrix(&ones, &half, false).unwrap();
        let v = a2.to_vec();
        let left = v[3]; // p[1][0], backward spread 1.0
        let right = v[5]; // p[1][2], forward spread 0.5
        assert!((left - (-0.25f64).exp()).abs() < 1e-12);
        assert!((right - (-1.0f64).exp()).abs() < 1e-12);
        assert!((left - right).abs() > 1e-3);
    }

    #[test]
    fn tps_combination_matches_hand_evaluation() {
        // Row A1 = [0.5, 0.5], row A2 = [1, e^-1]:
        // combined = [0.75, 0.433940] -> normalized [0.63348, 0.36652].
        let a1 = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let a2 = Tensor::new(vec![1, 2], vec![1.0, (-1.0f64).exp()]).unwrap();
        let mixed = a1.add(&a2).unwrap().scale(0.5).row_normalize().unwrap();
        let v = mixed.to_vec();
        assert!((v[0] - 0.63348).abs() < 5e-6);
        assert!((v[1] - 0.36652).abs() < 5e-6);
        assert!((v[0] + v[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tps_rows_sum_to_one_and_a2_in_unit_interval() {
        let mut init = Initializer::new(23);
        let cfg = config(4);
        let block = TpsBlock::new(&mut init, &cfg);
        let f = Tensor::new(vec![5, 4], (0..20).map(|x| (x as f64 * 0.37).sin()).collect()).unwrap();
        let out = block.forward(&f).unwrap();
        for row in out.attention[0].to_vec().chunks(5) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        for (idx, &p) in out.pseudo_gaussian.to_vec().iter().enumerate() {
            assert!(p > 0.0 && p <= 1.0);
            if idx % 6 == 0 {
                assert_eq!(p, 1.0);
            }
        }
        for &s in out.sigma.to_vec().iter().chain(out.sigma_hat.to_vec().iter()) {
            assert!(s >= cfg.sigma_floor);
        }
    }

    #[test]
    fn tps_all_ones_a2_keeps_normalization() {
        // As the spreads grow, A2 tends to all-ones; rows of the combined
        // matrix stay proportional to (A1 row + 1) and sum to 1.
        let mut init = Initializer::new(29);
        let block = SaBlock::new(&mut init, 4, 1);
        let f = Tensor::new(vec![3, 4], (0..12).map(|x| (x as f64).cos()).collect()).unwrap();
        let a1 = block.forward(&f).unwrap().attention[0].clone();
        let ones = Tensor::full(vec![3, 3], 1.0);
        let combined = a1.add(&ones).unwrap().scale(0.5).row_normalize().unwrap();
        let a1v = a1.to_vec();
        let cv = combined.to_vec();
        for i in 0..3 {
            let sum: f64 = cv[i * 3..(i + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            // Proportionality: combined ∝ a1 + 1, and each row of a1 sums
            // to 1, so the constant is 1/4.
            for j in 0..3 {
                assert!((cv[i * 3 + j] - (a1v[i * 3 + j] + 1.0) / 4.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn a2_depends_only_on_length_and_floor_when_weights_are_zero() {
        let mut init = Initializer::new(31);
        let cfg = config(4);
        let block = TpsBlock::new(&mut init, &cfg);
        block.w_sigma.data_mut().iter_mut().for_each(|x| *x = 0.0);
        block.w_sigma_hat.data_mut().iter_mut().for_each(|x| *x = 0.0);
        let f1 = Tensor::new(vec![4, 4], (0..16).map(|x| (x as f64).sin()).collect()).unwrap();
        let f2 = Tensor::new(vec![4, 4], (0..16).map(|x| (x as f64).cos() * 3.0).collect()).unwrap();
        let o1 = block.forward(&f1).unwrap();
        let o2 = block.forward(&f2).unwrap();
        assert_eq!(o1.pseudo_gaussian.to_vec(), o2.pseudo_gaussian.to_vec());
    }

    #[test]
    fn pe_zero_table_is_identity_and_gradient_is_sparse() {
        let mut init = Initializer::new(17);
        let pe = PositionalEncoding::new(&mut init, 6, 3);
        pe.table.data_mut().iter_mut().for_each(|x| *x = 0.0);
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = pe.apply(&x).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
        // Gradient reaches exactly the first two table rows.
        y.sum().backward().unwrap();
        let g = pe.table.grad().unwrap();
        assert!(g[..6].iter().all(|&v| v == 1.0));
        assert!(g[6..].iter().all(|&v| v == 0.0));
        // Capacity check.
        let too_long = Tensor::zeros(vec![7, 3]);
        assert!(matches!(pe.apply(&too_long), Err(Error::Capacity(_))));
    }

    #[test]
    fn encoder_zero_weights_reduce_to_double_layer_norm() {
        let mut init = Initializer::new(13);
        let cfg = config(4);
        let enc = EncoderLayer::new(&mut init, &cfg, true);
        // Zero every projection and FF weight; norms keep gamma = 1, beta = 0.
        match &enc.attention {
            AttentionKind::Tps(t) => {
                for w in [&t.sa.wq, &t.sa.wk, &t.sa.wv] {
                    w.data_mut().iter_mut().for_each(|x| *x = 0.0);
                }
            }
            _ => unreachable!(),
        }
        enc.ff1.weight.data_mut().iter_mut().for_each(|x| *x = 0.0);
        enc.ff2.weight.data_mut().iter_mut().for_each(|x| *x = 0.0);
        let x = Tensor::new(vec![3, 4], (0..12).map(|x| x as f64 * 0.5 - 2.0).collect()).unwrap();
        let y = enc.forward(&x).unwrap();
        let mut init2 = Initializer::new(0);
        let ln = LayerNorm::new(&mut init2, 4);
        let expect = ln.forward(&ln.forward(&x).unwrap()).unwrap();
        for (a, b) in y.to_vec().iter().zip(expect.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_preserves_shape() {
        for n in [1usize, 5, 64] {
            let mut init = Initializer::new(n as u64);
            let cfg = config(8);
            let enc = EncoderLayer::new(&mut init, &cfg, false);
            let x = Tensor::new(vec![n, 8], (0..n * 8).map(|v| (v as f64).sin()).collect()).unwrap();
            let y = enc.forward(&x).unwrap();
            assert_eq!(y.shape(), &[n, 8]);
        }
    }
}
