//! Dataset ingestion and synthesis.
//!
//! Implements a subset of the UEA-style `.ts` text format: header tags
//! (`@problemName`, `@dimensions`, `@classLabel`, ...) followed by `@data`,
//! one case per line, dimensions separated by `:`, values comma-separated,
//! class label in the final field. Timestamp mode and missing-value markers
//! (`?`) are rejected with a clear error rather than silently imputed.
//! Variable series lengths are allowed; nothing is padded at parse time.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One labeled multivariate series.
#[derive(Debug, Clone)]
pub struct Sample {
    /// `[d, n]` series, rows are channels.
    pub series: Tensor,
    pub label: usize,
    /// Length before any padding.
    pub original_len: usize,
}

/// A labeled multivariate time-series dataset. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub samples: Vec<Sample>,
    pub dims: usize,
    pub max_len: usize,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        samples: Vec<Sample>,
        dims: usize,
        class_names: Vec<String>,
    ) -> Result<Dataset> {
        let mut max_len = 0;
        for (i, s) in samples.iter().enumerate() {
            let shape = s.series.shape();
            if shape.len() != 2 || shape[0] != dims {
                return Err(Error::Data(format!(
                    "sample {i} has shape {shape:?}, expected {dims} channel rows"
                )));
            }
            if shape[1] == 0 {
                return Err(Error::Data(format!("sample {i} has zero length")));
            }
            if s.label >= class_names.len() {
                return Err(Error::Data(format!(
                    "sample {i} has label index {} but only {} classes are declared",
                    s.label,
                    class_names.len()
                )));
            }
            max_len = max_len.max(shape[1]);
        }
        Ok(Dataset { name: name.into(), samples, dims, max_len, class_names })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Per-sample, per-channel z-normalization (std floored at 1e-8 so a
    /// constant channel maps to zeros). Idempotent up to rounding.
    pub fn znormalize(&self) -> Dataset {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let shape = s.series.shape().to_vec();
                let (d, n) = (shape[0], shape[1]);
                let src = s.series.to_vec();
                let mut out = vec![0.0; d * n];
                for ch in 0..d {
                    let row = &src[ch * n..(ch + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
                    let std = var.sqrt().max(1e-8);
                    for t in 0..n {
                        out[ch * n + t] = (row[t] - mean) / std;
                    }
                }
                Sample {
                    series: Tensor::new(shape, out).expect("shape preserved"),
                    label: s.label,
                    original_len: s.original_len,
                }
            })
            .collect();
        Dataset {
            name: self.name.clone(),
            samples,
            dims: self.dims,
            max_len: self.max_len,
            class_names: self.class_names.clone(),
        }
    }

    /// Right-pad every sample with zero columns to length `n`. Original
    /// lengths are retained in the sample metadata.
    pub fn pad_to(&self, n: usize) -> Result<Dataset> {
        if n < self.max_len {
            return Err(Error::Usage(format!(
                "pad_to: target length {n} is below the dataset maximum {}",
                self.max_len
            )));
        }
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let shape = s.series.shape().to_vec();
                let (d, len) = (shape[0], shape[1]);
                let src = s.series.to_vec();
                let mut out = vec![0.0; d * n];
                for ch in 0..d {
                    out[ch * n..ch * n + len].copy_from_slice(&src[ch * len..(ch + 1) * len]);
                }
                Sample {
                    series: Tensor::new(vec![d, n], out).expect("padded shape"),
                    label: s.label,
                    original_len: s.original_len,
                }
            })
            .collect();
        Ok(Dataset {
            name: self.name.clone(),
            samples,
            dims: self.dims,
            max_len: n,
            class_names: self.class_names.clone(),
        })
    }

    /// Stack samples (all already equal length) into a `[b, d, n]` batch.
    pub fn batch_tensor(&self, indices: &[usize]) -> Result<Tensor> {
        let parts: Vec<Tensor> = indices.iter().map(|&i| self.samples[i].series.clone()).collect();
        Tensor::stack(&parts)
    }
}

// ---------------------------------------------------------------------------
// .ts text format
// ---------------------------------------------------------------------------

/// Parse a `.ts` file from disk.
pub fn parse_ts(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Data(format!("cannot read dataset {}: {e}", path.display()))
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    parse_ts_str(&text, &name)
}

/// Parse `.ts` text. `default_name` is used when no `@problemName` is given.
pub fn parse_ts_str(text: &str, default_name: &str) -> Result<Dataset> {
    let mut name = default_name.to_string();
    let mut dims: Option<usize> = None;
    let mut class_names: Option<Vec<String>> = None;
    let mut in_data = false;
    let mut samples: Vec<Sample> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !in_data {
            if let Some(rest) = line.strip_prefix('@') {
                let mut parts = rest.splitn(2, char::is_whitespace);
                let tag = parts.next().unwrap_or("").to_ascii_lowercase();
                let value = parts.next().unwrap_or("").trim();
                match tag.as_str() {
                    "problemname" => name = value.to_string(),
                    "dimensions" => {
                        dims = Some(value.parse().map_err(|_| Error::Parse {
                            line: line_no,
                            message: format!("invalid @dimensions value '{value}'"),
                        })?)
                    }
                    "classlabel" => {
                        let mut fields = value.split_whitespace();
                        match fields.next() {
                            Some("true") => {
                                let names: Vec<String> =
                                    fields.map(|s| s.to_string()).collect();
                                if names.is_empty() {
                                    return Err(Error::Parse {
                                        line: line_no,
                                        message: "@classLabel true lists no class names".into(),
                                    });
                                }
                                class_names = Some(names);
                            }
                            _ => {
                                return Err(Error::Parse {
                                    line: line_no,
                                    message:
                                        "@classLabel must be 'true' followed by the class names"
                                            .into(),
                                })
                            }
                        }
                    }
                    "timestamps" => {
                        if value.eq_ignore_ascii_case("true") {
                            return Err(Error::Parse {
                                line: line_no,
                                message: "timestamp-mode .ts files are not supported".into(),
                            });
                        }
                    }
                    "data" => in_data = true,
                    // Tags like @univariate / @equalLength / @seriesLength /
                    // @missing are informational for this subset.
                    "univariate" | "equallength" | "serieslength" | "missing" => {}
                    other => {
                        eprintln!("warning: ignoring unknown .ts header tag @{other}");
                    }
                }
                continue;
            }
            return Err(Error::Parse {
                line: line_no,
                message: "expected a header tag or @data before data lines".into(),
            });
        }

        // Data line: dim1:dim2:...:label
        if line.contains('?') {
            return Err(Error::Parse {
                line: line_no,
                message: "missing-value markers ('?') are not supported".into(),
            });
        }
        let class_names_ref = class_names.as_ref().ok_or(Error::Parse {
            line: line_no,
            message: "@classLabel header missing before @data".into(),
        })?;
        let mut fields: Vec<&str> = line.split(':').collect();
        if fields.len() < 2 {
            return Err(Error::Parse {
                line: line_no,
                message: "data line needs at least one dimension and a class label".into(),
            });
        }
        let label_str = fields.pop().unwrap().trim();
        let label = class_names_ref
            .iter()
            .position(|c| c == label_str)
            .ok_or_else(|| Error::Parse {
                line: line_no,
                message: format!(
                    "unknown class label '{label_str}' (expected one of {:?})",
                    class_names_ref
                ),
            })?;
        let d = fields.len();
        match dims {
            Some(expect) if expect != d => {
                return Err(Error::Data(format!(
                    "line {line_no}: {d} dimensions but the header declares {expect}"
                )))
            }
            None => dims = Some(d),
            _ => {}
        }
        if let Some(first) = samples.first() {
            if first.series.shape()[0] != d {
                return Err(Error::Data(format!(
                    "line {line_no}: {d} dimensions but earlier cases have {}",
                    first.series.shape()[0]
                )));
            }
        }
        let mut channels: Vec<Vec<f64>> = Vec::with_capacity(d);
        for dim_text in &fields {
            let vals: Result<Vec<f64>> = dim_text
                .split(',')
                .map(|v| {
                    v.trim().parse::<f64>().map_err(|_| Error::Parse {
                        line: line_no,
                        message: format!("invalid number '{}'", v.trim()),
                    })
                })
                .collect();
            channels.push(vals?);
        }
        let len = channels[0].len();
        if len == 0 {
            return Err(Error::Parse {
                line: line_no,
                message: "empty dimension".into(),
            });
        }
        for (ci, ch) in channels.iter().enumerate() {
            if ch.len() != len {
                return Err(Error::Data(format!(
                    "line {line_no}: dimension {ci} has {} values but dimension 0 has {len}",
                    ch.len()
                )));
            }
        }
        let flat: Vec<f64> = channels.into_iter().flatten().collect();
        samples.push(Sample {
            series: Tensor::new(vec![d, len], flat)?,
            label,
            original_len: len,
        });
    }

    if !in_data {
        return Err(Error::Data("no @data section found".into()));
    }
    let class_names = class_names.ok_or_else(|| Error::Data("no @classLabel header".into()))?;
    let dims = dims.ok_or_else(|| Error::Data("empty dataset: no data lines".into()))?;
    Dataset::new(name, samples, dims, class_names)
}

/// Serialize a dataset in the `.ts` subset this crate reads. Floats use the
/// shortest representation that round-trips, so write -> parse is exact.
pub fn write_ts(ds: &Dataset) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "@problemName {}", ds.name);
    let _ = writeln!(out, "@timeStamps false");
    let _ = writeln!(out, "@missing false");
    let _ = writeln!(out, "@univariate {}", ds.dims == 1);
    let _ = writeln!(out, "@dimensions {}", ds.dims);
    let equal = ds.samples.iter().all(|s| s.series.shape()[1] == ds.max_len);
    let _ = writeln!(out, "@equalLength {equal}");
    if equal {
        let _ = writeln!(out, "@seriesLength {}", ds.max_len);
    }
    let _ = writeln!(out, "@classLabel true {}", ds.class_names.join(" "));
    let _ = writeln!(out, "@data");
    for s in &ds.samples {
        let shape = s.series.shape();
        let (d, n) = (shape[0], shape[1]);
        let data = s.series.to_vec();
        for ch in 0..d {
            for t in 0..n {
                if t > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{}", data[ch * n + t]);
            }
            out.push(':');
        }
        let _ = writeln!(out, "{}", ds.class_names[s.label]);
    }
    out
}

/// Write a dataset to disk in `.ts` format.
pub fn save_ts(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_ts(ds))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic datasets
// ---------------------------------------------------------------------------

/// Generator families for desk-scale experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    /// Classes differ only by the temporal location of an identical,
    /// compact-support bump — a probe for position sensitivity.
    PositionedBump,
    /// Classes differ by waveform shape; each sample places its class
    /// waveform at a random shift.
    ShiftedPattern,
    /// Classes differ by sinusoid frequency with a random phase.
    FrequencyMix,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positioned-bump" => Ok(SyntheticKind::PositionedBump),
            "shifted-pattern" => Ok(SyntheticKind::ShiftedPattern),
            "frequency-mix" => Ok(SyntheticKind::FrequencyMix),
            other => Err(Error::Usage(format!(
                "unknown synthetic kind '{other}' (expected positioned-bump, shifted-pattern, or frequency-mix)"
            ))),
        }
    }
}

/// Specification of a synthetic dataset; deterministic under a fixed seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n_samples: usize,
    pub dims: usize,
    pub len: usize,
    pub n_classes: usize,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.dims == 0 || self.len == 0 || self.n_classes == 0 {
            return Err(Error::Usage(
                "synthetic spec: samples, dims, length, and classes must be positive".into(),
            ));
        }
        if self.noise < 0.0 {
            return Err(Error::Usage("synthetic spec: noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// Class-c bump center, spaced evenly through the series interior.
fn bump_center(len: usize, n_classes: usize, class: usize) -> usize {
    ((class + 1) * len) / (n_classes + 1)
}

/// Half-width of the compact triangular bump.
fn bump_half_width(len: usize, n_classes: usize) -> usize {
    // Keep the supports disjoint and away from the boundary so a class
    // change is exactly a time shift of the same sample.
    (len / (3 * (n_classes + 1))).max(1)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps this reproducible.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn synth_sample(spec: &SyntheticSpec, class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (d, n) = (spec.dims, spec.len);
    let mut out = vec![0.0; d * n];
    match spec.kind {
        SyntheticKind::PositionedBump => {
            let c = bump_center(n, spec.n_classes, class);
            let w = bump_half_width(n, spec.n_classes);
            for ch in 0..d {
                for t in 0..n {
                    let dist = (t as f64 - c as f64).abs();
                    if dist < w as f64 {
                        out[ch * n + t] = 1.0 - dist / w as f64;
                    }
                }
            }
        }
        SyntheticKind::ShiftedPattern => {
            let l = (n / 3).max(2);
            let shift = rng.gen_range(0..=(n - l));
            for ch in 0..d {
                for (k, slot) in out[ch * n + shift..ch * n + shift + l].iter_mut().enumerate() {
                    let x = k as f64 / (l - 1) as f64;
                    *slot = match class % 3 {
                        // triangle
                        0 => 1.0 - (2.0 * x - 1.0).abs(),
                        // square
                        1 => {
                            if x < 0.5 {
                                1.0
                            } else {
                                -1.0
                            }
                        }
                        // one sine period
                        _ => (2.0 * std::f64::consts::PI * x).sin(),
                    };
                }
            }
        }
        SyntheticKind::FrequencyMix => {
            let freq = (class + 1) as f64;
            let phase: f64 = rng.gen_range(0.0..1.0);
            for ch in 0..d {
                for t in 0..n {
                    let x = (t as f64 / n as f64 + phase) * freq * 2.0 * std::f64::consts::PI;
                    out[ch * n + t] = (x + ch as f64 * 0.5).sin();
                }
            }
        }
    }
    if spec.noise > 0.0 {
        for v in out.iter_mut() {
            *v += spec.noise * gaussian(rng);
        }
    }
    out
}

/// Generate a (train, test) pair split 50/50 and stratified by class.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    use rand::SeedableRng;
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let class_names: Vec<String> = (0..spec.n_classes).map(|c| format!("c{c}")).collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for i in 0..spec.n_samples {
        let class = i % spec.n_classes;
        let data = synth_sample(spec, class, &mut rng);
        let sample = Sample {
            series: Tensor::new(vec![spec.dims, spec.len], data)?,
            label: class,
            original_len: spec.len,
        };
        // Round-robin classes alternate into train/test, keeping both splits
        // class-balanced.
        if (i / spec.n_classes) % 2 == 0 {
            train.push(sample);
        } else {
            test.push(sample);
        }
    }
    let name = format!("synthetic-{:?}", spec.kind).to_lowercase();
    Ok((
        Dataset::new(format!("{name}-train"), train, spec.dims, class_names.clone())?,
        Dataset::new(format!("{name}-test"), test, spec.dims, class_names)?,
    ))
}

/// Brute-force 1-nearest-neighbor classification accuracy of `test` against
/// `train` under Euclidean distance (equal lengths assumed). Used as an
/// oracle for the synthetic generators.
pub fn nearest_neighbor_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let mut correct = 0usize;
    for q in &test.samples {
        let qd = q.series.to_vec();
        let mut best = f64::INFINITY;
        let mut best_label = 0usize;
        for r in &train.samples {
            let rd = r.series.to_vec();
            let dist: f64 = qd.iter().zip(&rd).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best {
                best = dist;
                best_label = r.label;
            }
        }
        if best_label == q.label {
            correct += 1;
        }
    }
    correct as f64 / test.len() as f64
}
