//! Datasets: synthetic generators, delimited-text ingestion, splits and
//! normalization.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Full,
    Train,
    Test,
}

/// Regression data, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    targets: Vec<f64>,
    ground_truth: Option<Vec<f64>>,
    n: usize,
    p_x: usize,
    p_y: usize,
    tag: SplitTag,
}

impl Dataset {
    pub fn new(
        inputs: Vec<f64>,
        targets: Vec<f64>,
        p_x: usize,
        p_y: usize,
        ground_truth: Option<Vec<f64>>,
    ) -> Result<Self> {
        if p_x == 0 || p_y == 0 {
            return Err(Error::shape("input and output dimensions must be positive"));
        }
        if !inputs.len().is_multiple_of(p_x) {
            return Err(Error::shape("input length is not a multiple of p_x"));
        }
        let n = inputs.len() / p_x;
        if n == 0 {
            return Err(Error::domain("dataset is empty"));
        }
        if targets.len() != n * p_y {
            return Err(Error::shape(format!(
                "{} targets for {} rows of width {}",
                targets.len(),
                n,
                p_y
            )));
        }
        if let Some(gt) = &ground_truth {
            if gt.len() != n * p_y {
                return Err(Error::shape("ground truth shape differs from targets"));
            }
        }
        let finite = inputs
            .iter()
            .chain(&targets)
            .chain(ground_truth.iter().flatten())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numeric("dataset contains non-finite values".into()));
        }
        Ok(Self {
            inputs,
            targets,
            ground_truth,
            n,
            p_x,
            p_y,
            tag: SplitTag::Full,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn p_x(&self) -> usize {
        self.p_x
    }

    pub fn p_y(&self) -> usize {
        self.p_y
    }

    pub fn tag(&self) -> SplitTag {
        self.tag
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn ground_truth(&self) -> Option<&[f64]> {
        self.ground_truth.as_deref()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.p_x..(i + 1) * self.p_x]
    }

    pub fn target(&self, i: usize) -> &[f64] {
        &self.targets[i * self.p_y..(i + 1) * self.p_y]
    }

    /// Copy of the rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut inputs = Vec::with_capacity(indices.len() * self.p_x);
        let mut targets = Vec::with_capacity(indices.len() * self.p_y);
        let mut gt = self.ground_truth.as_ref().map(|_| Vec::new());
        for &i in indices {
            if i >= self.n {
                return Err(Error::shape(format!("row {i} out of range")));
            }
            inputs.extend_from_slice(self.input(i));
            targets.extend_from_slice(self.target(i));
            if let (Some(dst), Some(src)) = (gt.as_mut(), self.ground_truth.as_ref()) {
                dst.extend_from_slice(&src[i * self.p_y..(i + 1) * self.p_y]);
            }
        }
        let mut out = Self::new(inputs, targets, self.p_x, self.p_y, gt)?;
        out.tag = self.tag;
        Ok(out)
    }

    /// The dataset with every row repeated `times` times.
    pub fn repeated(&self, times: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..times).flat_map(|_| 0..self.n).collect();
        self.select(&idx)
    }

    pub fn with_tag(mut self, tag: SplitTag) -> Self {
        self.tag = tag;
        self
    }
}

/// Regression function of the one-dimensional quartic task.
pub fn quartic_1d(x: f64) -> f64 {
    0.5 * ((4.5 * x).powi(4) - (18.0 * x).powi(2) + 22.5 * x)
}

/// Regression function of the two-dimensional task.
pub fn quartic_2d(x: &[f64]) -> f64 {
    x.iter()
        .map(|&xi| (1.5 * xi - 1.0).powi(2) * (1.3 * xi + 1.0).powi(2))
        .sum()
}

pub const QUARTIC_1D_NOISE: f64 = 10.0;
pub const QUARTIC_2D_NOISE: f64 = 0.2;

fn generate<F: Fn(&[f64]) -> f64>(
    n: usize,
    p_x: usize,
    noise_std: f64,
    seed: u64,
    f: F,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::domain("sample count must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unif = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
    let noise = Normal::new(0.0, noise_std).expect("positive std");
    let mut inputs = Vec::with_capacity(n * p_x);
    let mut targets = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for _ in 0..n {
        let start = inputs.len();
        inputs.extend((0..p_x).map(|_| unif.sample(&mut rng)));
        let eta = f(&inputs[start..]);
        truth.push(eta);
        targets.push(eta + noise.sample(&mut rng));
    }
    Dataset::new(inputs, targets, p_x, 1, Some(truth))
}

/// `x ~ U[-1, 1]`, `y = quartic_1d(x) + N(0, 10²)`.
pub fn gen_quartic_1d(n: usize, seed: u64) -> Result<Dataset> {
    generate(n, 1, QUARTIC_1D_NOISE, seed, |x| quartic_1d(x[0]))
}

/// `x ~ U[-1, 1]²`, `y = quartic_2d(x) + N(0, 0.2²)`.
pub fn gen_quartic_2d(n: usize, seed: u64) -> Result<Dataset> {
    generate(n, 2, QUARTIC_2D_NOISE, seed, quartic_2d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Delimiter {
    /// Runs of spaces or tabs.
    Whitespace,
    Char(char),
}

impl Delimiter {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "whitespace" | "ws" | "space" => Ok(Delimiter::Whitespace),
            "comma" | "," => Ok(Delimiter::Char(',')),
            "semicolon" | ";" => Ok(Delimiter::Char(';')),
            "tab" | "\t" => Ok(Delimiter::Char('\t')),
            other => {
                let mut chars = other.chars();
                match (chars.next(), chars.next()) {
                    (Some(c), None) => Ok(Delimiter::Char(c)),
                    _ => Err(Error::config(format!("unknown delimiter `{other}`"))),
                }
            }
        }
    }

    fn split<'a>(&self, line: &'a str) -> Vec<&'a str> {
        match self {
            Delimiter::Whitespace => line.split_whitespace().collect(),
            Delimiter::Char(c) => line.split(*c).map(str::trim).collect(),
        }
    }
}

/// Parse delimited numeric text. One sample per row; `target_column` (0-based)
/// becomes the single target and every other column an input.
///
/// Rows are numbered from 1, counting the header when present; blank lines
/// are skipped.
pub fn parse_delimited(
    text: &str,
    target_column: usize,
    delimiter: Delimiter,
    has_header: bool,
) -> Result<Dataset> {
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut width = None;
    for (idx, line) in text.lines().enumerate() {
        let row = idx + 1;
        if (has_header && idx == 0) || line.trim().is_empty() {
            continue;
        }
        let cells = delimiter.split(line.trim());
        match width {
            None => {
                if target_column >= cells.len() {
                    return Err(Error::Parse {
                        row,
                        col: target_column + 1,
                        msg: format!("target column beyond the {} columns", cells.len()),
                    });
                }
                if cells.len() < 2 {
                    return Err(Error::Parse {
                        row,
                        col: 1,
                        msg: "need at least one input and one target column".into(),
                    });
                }
                width = Some(cells.len());
            }
            Some(w) if w != cells.len() => {
                return Err(Error::Parse {
                    row,
                    col: cells.len().min(w) + 1,
                    msg: format!("ragged row: {} columns, expected {w}", cells.len()),
                });
            }
            Some(_) => {}
        }
        for (c, cell) in cells.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                col: c + 1,
                msg: format!("non-numeric cell `{cell}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    col: c + 1,
                    msg: format!("non-finite cell `{cell}`"),
                });
            }
            if c == target_column {
                targets.push(v);
            } else {
                inputs.push(v);
            }
        }
    }
    let width = width.ok_or_else(|| Error::domain("no data rows"))?;
    Dataset::new(inputs, targets, width - 1, 1, None)
}

pub fn load_delimited(
    path: impl AsRef<Path>,
    target_column: usize,
    delimiter: Delimiter,
    has_header: bool,
) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_delimited(&text, target_column, delimiter, has_header)
}

/// Random disjoint train/test partition. The training part gets
/// `round(fraction * n)` rows, clamped so both sides are non-empty.
pub fn split(data: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    if data.len() < 2 {
        return Err(Error::domain("need at least two rows to split"));
    }
    let n = data.len();
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (tr, te) = idx.split_at(n_train);
    Ok((
        data.select(tr)?.with_tag(SplitTag::Train),
        data.select(te)?.with_tag(SplitTag::Test),
    ))
}

/// Per-column affine standardisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ColumnStats {
    fn fit(values: &[f64], width: usize, what: &str) -> Result<Self> {
        let n = values.len() / width;
        let mut mean = vec![0.0; width];
        for row in values.chunks_exact(width) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; width];
        for row in values.chunks_exact(width) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std: Vec<f64> = var.iter().map(|s| (s / n as f64).sqrt()).collect();
        if let Some(col) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::domain(format!(
                "{what} column {col} has zero variance in the training set"
            )));
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        let w = self.mean.len();
        values
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % w]) / self.std[i % w])
            .collect()
    }

    pub fn invert(&self, values: &[f64]) -> Vec<f64> {
        let w = self.mean.len();
        values
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i % w] + self.mean[i % w])
            .collect()
    }
}

/// Statistics computed on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub targets: ColumnStats,
    pub inputs: Option<ColumnStats>,
}

impl NormStats {
    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        let inputs = match &self.inputs {
            Some(s) => s.apply(data.inputs()),
            None => data.inputs().to_vec(),
        };
        let targets = self.targets.apply(data.targets());
        let gt = data.ground_truth().map(|g| self.targets.apply(g));
        Ok(Dataset::new(inputs, targets, data.p_x(), data.p_y(), gt)?.with_tag(data.tag()))
    }

    /// Map normalized target values back to the original scale.
    pub fn invert_targets(&self, values: &[f64]) -> Vec<f64> {
        self.targets.invert(values)
    }

    /// Map a normalized variance back to the original scale.
    pub fn invert_variance(&self, var: f64, column: usize) -> f64 {
        var * self.targets.std[column].powi(2)
    }
}

/// Standardise targets (and, if `normalize_inputs`, inputs) with statistics
/// from `train` only. Ground truth follows the target transform.
pub fn normalize(
    train: &Dataset,
    test: &Dataset,
    normalize_inputs: bool,
) -> Result<(Dataset, Dataset, NormStats)> {
    if train.p_x() != test.p_x() || train.p_y() != test.p_y() {
        return Err(Error::shape("train and test have different dimensions"));
    }
    let stats = NormStats {
        targets: ColumnStats::fit(train.targets(), train.p_y(), "target")?,
        inputs: if normalize_inputs {
            Some(ColumnStats::fit(train.inputs(), train.p_x(), "input")?)
        } else {
            None
        },
    };
    Ok((stats.apply(train)?, stats.apply(test)?, stats))
}

/// Draw a permutation of `0..n` for one training epoch.
pub(crate) fn epoch_permutation<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
