//! Independent verification oracles.
//!
//! Everything here is deliberately written as plain scalar loops over flat
//! slices, transcribed from the attention equations, and never calls the
//! vectorized production code it exists to check. The gradient checker
//! perturbs raw parameter buffers and recomputes a loss closure, so it is
//! independent of the backward rules it validates.

use serde::Serialize;

use crate::attention::AttentionConfig;
use crate::error::{Error, Result};
use crate::models::{build_standalone, Model};
use crate::tensor::Parameter;

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Central finite-difference gradient of a scalar function:
/// `(f(x + h) - f(x - h)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let fp = f(&probe);
        probe[i] = x[i] - step;
        let fm = f(&probe);
        probe[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Usage(format!(
                "finite_diff_grad: non-finite function value near coordinate {i}"
            )));
        }
        grad[i] = (fp - fm) / (2.0 * step);
    }
    Ok(grad)
}

/// Relative error between an analytic and a numeric gradient entry,
/// stabilized near zero: `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Per-parameter outcome of a gradient check.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    /// Coordinates checked (sampled for large arrays) out of the total.
    pub checked: usize,
    pub total: usize,
    /// Coordinates where both routes were below the f64 noise floor and
    /// agree the gradient is zero (e.g. conv biases ahead of a train-mode
    /// batch norm, which cancel exactly).
    pub zero_agreed: usize,
    /// Coordinates that failed at the primary step but passed at smaller
    /// steps, i.e. the secant straddled a ReLU/abs kink; a wrong backward
    /// rule would fail at every step size.
    pub kink_resolved: usize,
    pub failing: Vec<usize>,
}

/// Result of checking a model or block against central finite differences.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }
}

/// Both gradient routes below this magnitude are indistinguishable from an
/// exact zero: the central-difference noise floor for an O(1) loss at
/// step 1e-5 is about `ulp / 2h` = 1e-11.
const ZERO_AGREEMENT: f64 = 1e-9;

/// Check autodiff gradients of `params` against central finite differences
/// of `loss`. `autodiff` holds the gradient of each parameter (same order);
/// `loss` recomputes the scalar loss from the parameters' current buffers.
///
/// Large parameter arrays are subsampled deterministically: every array is
/// checked, at up to `max_coords` coordinates each. Two classes of
/// coordinate are adjudicated beyond the plain relative-error test, and
/// counted in the report:
///
/// - both routes at or below the f64 noise floor agree the gradient is zero;
/// - a coordinate failing at the primary step but passing when the step
///   shrinks straddled a kink of a piecewise-linear activation (the secant
///   error decays with the step, while a wrong backward rule keeps failing
///   at every step size).
pub fn gradcheck_params<F>(
    params: &[Parameter],
    autodiff: &[Vec<f64>],
    mut loss: F,
    step: f64,
    tolerance: f64,
    max_coords: usize,
) -> Result<GradCheckReport>
where
    F: FnMut() -> Result<f64>,
{
    let mut entries = Vec::with_capacity(params.len());
    for (p, grad) in params.iter().zip(autodiff) {
        let total = p.numel();
        // Deterministic coordinate sample: an equally spaced sweep that
        // always includes the first and last coordinate.
        let coords: Vec<usize> = if total <= max_coords {
            (0..total).collect()
        } else {
            (0..max_coords).map(|i| i * (total - 1) / (max_coords - 1)).collect()
        };
        let mut max_rel = 0.0f64;
        let mut failing = Vec::new();
        let mut zero_agreed = 0usize;
        let mut kink_resolved = 0usize;
        for &c in &coords {
            let original = p.tensor.data()[c];
            let mut fd_at = |h: f64| -> Result<f64> {
                p.tensor.data_mut()[c] = original + h;
                let fp = loss()?;
                p.tensor.data_mut()[c] = original - h;
                let fm = loss()?;
                p.tensor.data_mut()[c] = original;
                if !fp.is_finite() || !fm.is_finite() {
                    return Err(Error::Usage(format!(
                        "gradcheck: non-finite loss while perturbing coordinate {c}"
                    )));
                }
                Ok((fp - fm) / (2.0 * h))
            };
            let numeric = fd_at(step)?;
            let rel = relative_error(grad[c], numeric);
            if rel < tolerance {
                max_rel = max_rel.max(rel);
                continue;
            }
            if grad[c].abs() <= ZERO_AGREEMENT && numeric.abs() <= ZERO_AGREEMENT {
                zero_agreed += 1;
                continue;
            }
            let mut resolved = false;
            for shrink in [16.0, 256.0] {
                let refined = fd_at(step / shrink)?;
                if relative_error(grad[c], refined) < tolerance {
                    resolved = true;
                    break;
                }
            }
            if resolved {
                kink_resolved += 1;
                continue;
            }
            max_rel = max_rel.max(rel);
            failing.push(c);
        }
        entries.push(GradCheckEntry {
            name: p.name.clone(),
            max_rel_err: max_rel,
            checked: coords.len(),
            total,
            zero_agreed,
            kink_resolved,
            failing,
        });
    }
    let pass = entries.iter().all(|e| e.failing.is_empty());
    Ok(GradCheckReport { step, tolerance, entries, pass })
}

// ---------------------------------------------------------------------------
// Attention oracles: direct scalar transcriptions
// ---------------------------------------------------------------------------

fn softmax_inplace(v: &mut [f64]) {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for x in v.iter_mut() {
        *x = (*x - mx).exp();
        denom += *x;
    }
    for x in v.iter_mut() {
        *x /= denom;
    }
}

/// Classic temporal attention, one scalar at a time.
///
/// `w1: [d_r * d]`, `w2: [d_r]`, `f: [d * n]` (row-major, rows are
/// channels). Returns `(o: [d * n], a: [n])`.
pub fn oracle_cta(
    w1: &[f64],
    w2: &[f64],
    f: &[f64],
    d: usize,
    d_r: usize,
    n: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut a = vec![0.0; n];
    for j in 0..n {
        let mut score = 0.0;
        for p in 0..d_r {
            let mut h = 0.0;
            for i in 0..d {
                h += w1[p * d + i] * f[i * n + j];
            }
            if h < 0.0 {
                h = 0.0;
            }
            score += w2[p] * h;
        }
        a[j] = score;
    }
    softmax_inplace(&mut a);
    let mut o = vec![0.0; d * n];
    for i in 0..d {
        for j in 0..n {
            o[i * n + j] = f[i * n + j] * a[j];
        }
    }
    (o, a)
}

/// Global temporal attention, one scalar at a time.
///
/// `w1: [d]`, `w2: [t_r * t]`, `w3: [t * t_r]`, `f: [d * t]`.
/// Returns `(o: [d * t], a: [t])`.
pub fn oracle_gta(
    w1: &[f64],
    w2: &[f64],
    w3: &[f64],
    f: &[f64],
    d: usize,
    t: usize,
    t_r: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut a1 = vec![0.0; t];
    for j in 0..t {
        let mut s = 0.0;
        for i in 0..d {
            s += w1[i] * f[i * t + j];
        }
        a1[j] = if s > 0.0 { s } else { 0.0 };
    }
    let mut squeezed = vec![0.0; t_r];
    for p in 0..t_r {
        let mut s = 0.0;
        for j in 0..t {
            s += w2[p * t + j] * a1[j];
        }
        squeezed[p] = if s > 0.0 { s } else { 0.0 };
    }
    let mut a = vec![0.0; t];
    for j in 0..t {
        let mut s = 0.0;
        for p in 0..t_r {
            s += w3[j * t_r + p] * squeezed[p];
        }
        a[j] = 1.0 / (1.0 + (-s).exp());
    }
    let mut o = vec![0.0; d * t];
    for i in 0..d {
        for j in 0..t {
            o[i * t + j] = f[i * t + j] * a[j];
        }
    }
    (o, a)
}

/// Self-attention (single head), one scalar at a time.
///
/// Projection matrices are in the `k_i = W_K f_i` orientation:
/// `wk/wq/wv: [d * d]`, `f: [n * d]` (rows are timesteps).
/// Returns `(o: [n * d], a: [n * n])`.
pub fn oracle_sa(
    wk: &[f64],
    wq: &[f64],
    wv: &[f64],
    f: &[f64],
    n: usize,
    d: usize,
) -> (Vec<f64>, Vec<f64>) {
    let project = |w: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for r in 0..d {
                let mut s = 0.0;
                for c in 0..d {
                    s += w[r * d + c] * f[i * d + c];
                }
                out[i * d + r] = s;
            }
        }
        out
    };
    let k = project(wk);
    let q = project(wq);
    let v = project(wv);
    let scale = (d as f64).sqrt();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for c in 0..d {
                s += q[i * d + c] * k[j * d + c];
            }
            a[i * n + j] = s / scale;
        }
        softmax_inplace(&mut a[i * n..(i + 1) * n]);
    }
    let mut o = vec![0.0; n * d];
    for i in 0..n {
        for c in 0..d {
            let mut s = 0.0;
            for j in 0..n {
                s += a[i * n + j] * v[j * d + c];
            }
            o[i * d + c] = s;
        }
    }
    (o, a)
}

/// Everything a TPS forward pass produces, computed scalar by scalar.
pub struct OracleTps {
    pub o: Vec<f64>,
    pub a: Vec<f64>,
    pub a1: Vec<f64>,
    pub a2: Vec<f64>,
    pub sigma_hat: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// TPS attention (single head, identity scaling), one scalar at a time.
///
/// `w_sigma` and `w_sigma_hat` are the `[d]` rows deriving the forward and
/// backward spreads from each value vector; `b` is the spread floor.
#[allow(clippy::too_many_arguments)]
pub fn oracle_tps(
    wk: &[f64],
    wq: &[f64],
    wv: &[f64],
    w_sigma: &[f64],
    w_sigma_hat: &[f64],
    b: f64,
    squared: bool,
    f: &[f64],
    n: usize,
    d: usize,
) -> OracleTps {
    // Base self-attention matrix (A1) and values.
    let (_, a1) = oracle_sa(wk, wq, wv, f, n, d);
    let mut v = vec![0.0; n * d];
    for i in 0..n {
        for r in 0..d {
            let mut s = 0.0;
            for c in 0..d {
                s += wv[r * d + c] * f[i * d + c];
            }
            v[i * d + r] = s;
        }
    }
    // Spreads from each value vector.
    let mut sigma = vec![0.0; n];
    let mut sigma_hat = vec![0.0; n];
    for i in 0..n {
        let mut s = 0.0;
        let mut sh = 0.0;
        for c in 0..d {
            s += w_sigma[c] * v[i * d + c];
            sh += w_sigma_hat[c] * v[i * d + c];
        }
        sigma[i] = s.abs() + b;
        sigma_hat[i] = sh.abs() + b;
    }
    // Pseudo-Gaussian rows.
    let mut a2 = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let dist = {
                let raw = (i as f64 - j as f64).abs();
                if squared {
                    raw * raw
                } else {
                    raw
                }
            };
            let s = if j < i { sigma_hat[i] } else { sigma[i] };
            a2[i * n + j] = (-dist / (4.0 * s * s)).exp();
        }
    }
    // Combine, halve, renormalize each row by its element sum.
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        let mut row_sum = 0.0;
        for j in 0..n {
            let m = (a1[i * n + j] + a2[i * n + j]) / 2.0;
            a[i * n + j] = m;
            row_sum += m;
        }
        for j in 0..n {
            a[i * n + j] /= row_sum;
        }
    }
    let mut o = vec![0.0; n * d];
    for i in 0..n {
        for c in 0..d {
            let mut s = 0.0;
            for j in 0..n {
                s += a[i * n + j] * v[j * d + c];
            }
            o[i * d + c] = s;
        }
    }
    OracleTps { o, a, a1, a2, sigma_hat, sigma }
}

// ---------------------------------------------------------------------------
// Parameter-count audit
// ---------------------------------------------------------------------------

/// Closed-form learnable-parameter count of the standalone TPS classifier
/// (input projection + encoder, head and positional table excluded):
///
/// ```text
/// (l + 9 + l/h) d^2 + (d_dataset + 2l + 11) d
/// ```
pub fn eq8_formula(cfg: &AttentionConfig, d_dataset: usize) -> f64 {
    let l = cfg.layers as f64;
    let h = cfg.heads as f64;
    let d = cfg.d as f64;
    (l + 9.0 + l / h) * d * d + (d_dataset as f64 + 2.0 * l + 11.0) * d
}

/// Outcome of auditing the enumerated parameter arrays against the closed
/// form.
#[derive(Debug, Clone, Serialize)]
pub struct Eq8Audit {
    pub d_dataset: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    /// Parameter arrays inside the audit scope, in enumeration order.
    pub items: Vec<(String, usize)>,
    /// Arrays reported separately (classifier head; positional table if any).
    pub excluded: Vec<(String, usize)>,
    pub enumerated: usize,
    pub formula: f64,
    pub delta: f64,
}

impl Eq8Audit {
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "parameter audit: d_dataset={} d={} layers={} heads={}\n",
            self.d_dataset, self.d, self.layers, self.heads
        ));
        s.push_str("counted arrays:\n");
        for (name, count) in &self.items {
            s.push_str(&format!("  {name:<24} {count:>10}\n"));
        }
        for (name, count) in &self.excluded {
            s.push_str(&format!("  {name:<24} {count:>10}  (reported separately)\n"));
        }
        s.push_str(&format!("  {:<24} {:>10}\n", "enumerated total", self.enumerated));
        s.push_str(&format!("  {:<24} {:>10}\n", "closed-form total", self.formula));
        s.push_str(&format!("  {:<24} {:>10}\n", "delta", self.delta));
        s
    }
}

/// Enumerate the standalone TPS classifier's weight arrays and compare the
/// in-scope total (everything except the classification head and the
/// positional table) against the closed form.
///
/// Scope note: the closed form's layer scaling only matches an actual
/// per-layer transformer parameterization at one encoder layer with one
/// head — the configuration used throughout the experiments — so the audit
/// asserts exactness there and reports the delta elsewhere.
pub fn audit_eq8(cfg: &AttentionConfig, d_dataset: usize) -> Result<Eq8Audit> {
    // The sequence length and class count do not enter the audited scope.
    let model: Model = build_standalone(d_dataset, 8, 2, true, false, cfg, 0)?;
    let mut items = Vec::new();
    let mut excluded = Vec::new();
    let mut enumerated = 0usize;
    for p in model.parameters() {
        let n = p.numel();
        if p.name.starts_with("head.") || p.name.starts_with("pe.") {
            excluded.push((p.name.clone(), n));
        } else {
            items.push((p.name.clone(), n));
            enumerated += n;
        }
    }
    let formula = eq8_formula(cfg, d_dataset);
    Ok(Eq8Audit {
        d_dataset,
        d: cfg.d,
        layers: cfg.layers,
        heads: cfg.heads,
        items,
        excluded,
        enumerated,
        formula,
        delta: enumerated as f64 - formula,
    })
}
