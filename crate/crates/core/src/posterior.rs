//! Post-hoc Gaussian-mixture posterior over the mean-head weights.
//!
//! Every member keeps its MAP parameters except the bias-free mean head
//! `W_l` (`p_y x p_feat`), which becomes `N(W_l, γ_l I)`. With this head the
//! ELBO separates per member into `a_l + b_l γ_l + c_l ln γ_l`, where
//!
//! ```text
//! b_l = -½ (p_y Σ_i ‖φ_l(x_i)‖² / σ_l²(x_i) + p_y p_feat λ)
//! c_l =  ½ p_y p_feat
//! a_l = ln L - ½ (Σ_i [‖y_i - μ_l(x_i)‖² / σ_l²(x_i) + p_y ln σ_l²(x_i)]
//!                 + λ ‖W_l‖²_F - p_y p_feat - p_y p_feat ln λ)
//! ```
//!
//! and `φ_l` are the penultimate features. The maximiser is `γ_l = -c_l / b_l`.
//!
//! Moments follow from the mixture. The head being linear, `μ = W φ` is exactly
//! Gaussian per member with covariance `γ_l ‖φ_l(x)‖² I`, so the extended
//! regression covariance adds `(1/L) Σ γ_l ‖φ_l(x)‖² I` to the member spread.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Dataset;
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::hetero::HeteroNet;
use crate::nn::{fmt_f64, next_line, numbered_lines, parse_num};

/// Rows processed per forward pass when scanning a dataset.
const SCAN_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboCoeffs {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl ElboCoeffs {
    /// Contribution `a + b γ + c ln γ` of one member.
    pub fn term(&self, gamma: f64) -> f64 {
        self.a + self.b * gamma + self.c * gamma.ln()
    }

    /// Stationary point `-c / b`.
    pub fn argmax(&self) -> f64 {
        -self.c / self.b
    }
}

/// Per-member sums over the training data at the MAP estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
struct DataSums {
    /// `Σ ‖φ(x_i)‖² / σ²(x_i)`
    feature_energy: f64,
    /// `Σ ‖y_i - μ(x_i)‖² / σ²(x_i) + p_y ln σ²(x_i)`
    nll: f64,
}

fn data_sums(member: &HeteroNet, data: &Dataset) -> Result<DataSums> {
    if data.is_empty() {
        return Err(Error::domain("training data is empty"));
    }
    if data.p_x() != member.p_x() || data.p_y() != member.p_y() {
        return Err(Error::shape("dataset dimensions do not match the member"));
    }
    let (p_x, p_y, p) = (data.p_x(), data.p_y(), member.p_feat());
    let mut sums = DataSums {
        feature_energy: 0.0,
        nll: 0.0,
    };
    let n = data.len();
    for start in (0..n).step_by(SCAN_CHUNK) {
        let end = (start + SCAN_CHUNK).min(n);
        let rows = end - start;
        let trace = member.forward(&data.inputs()[start * p_x..end * p_x], rows)?;
        let feats = trace.features();
        let ys = &data.targets()[start * p_y..end * p_y];
        for i in 0..rows {
            let var = trace.variance[i];
            let f_sq: f64 = feats[i * p..(i + 1) * p].iter().map(|v| v * v).sum();
            let r_sq: f64 = trace.mean[i * p_y..(i + 1) * p_y]
                .iter()
                .zip(&ys[i * p_y..(i + 1) * p_y])
                .map(|(m, y)| (y - m) * (y - m))
                .sum();
            sums.feature_energy += f_sq / var;
            sums.nll += r_sq / var + p_y as f64 * var.ln();
        }
    }
    Ok(sums)
}

fn linear_coeffs(member: &HeteroNet, energy: f64, lambda: f64) -> (f64, f64) {
    let p_y = member.p_y() as f64;
    let p = member.p_feat() as f64;
    let b = -0.5 * (p_y * energy + p_y * p * lambda);
    let c = 0.5 * p_y * p;
    (b, c)
}

/// ELBO coefficients of one member trained with prior precision `lambda`
/// inside an ensemble of `ensemble_size` members.
pub fn elbo_coeffs(
    member: &HeteroNet,
    train: &Dataset,
    lambda: f64,
    ensemble_size: usize,
) -> Result<ElboCoeffs> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::domain(format!(
            "the KL term needs a proper prior, lambda = {lambda}"
        )));
    }
    if ensemble_size == 0 {
        return Err(Error::domain("ensemble size must be positive"));
    }
    let sums = data_sums(member, train)?;
    let (b, c) = linear_coeffs(member, sums.feature_energy, lambda);
    let k = (member.p_y() * member.p_feat()) as f64;
    let w_sq: f64 = member.mean_weights().iter().map(|w| w * w).sum();
    let a = (ensemble_size as f64).ln() - 0.5 * (sums.nll + lambda * w_sq - k - k * lambda.ln());
    Ok(ElboCoeffs { a, b, c })
}

/// Closed-form ELBO maximiser `γ = -c / b` for one member.
///
/// `lambda = 0` is allowed as long as some training feature is non-zero.
pub fn compute_gamma(member: &HeteroNet, train: &Dataset, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::domain(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    let sums = data_sums(member, train)?;
    let (b, c) = linear_coeffs(member, sums.feature_energy, lambda);
    if !(b < 0.0) {
        return Err(Error::domain(
            "degenerate input: all training features are zero and lambda is zero",
        ));
    }
    Ok(-c / b)
}

/// `(1/L) Σ (a_l + b_l γ_l + c_l ln γ_l)`.
pub fn elbo_value(coeffs: &[ElboCoeffs], gammas: &[f64]) -> Result<f64> {
    if coeffs.len() != gammas.len() || coeffs.is_empty() {
        return Err(Error::shape("one gamma per coefficient triple required"));
    }
    if let Some(g) = gammas.iter().find(|g| !(**g > 0.0)) {
        return Err(Error::domain(format!("gamma must be positive, got {g}")));
    }
    let total: f64 = coeffs.iter().zip(gammas).map(|(c, &g)| c.term(g)).sum();
    Ok(total / coeffs.len() as f64)
}

/// Log-spaced grid search for the member term's maximiser over `[lo, hi]`.
pub fn grid_maximize_gamma(coeffs: &ElboCoeffs, lo: f64, hi: f64, points: usize) -> Result<f64> {
    if !(lo > 0.0 && hi > lo) || points < 2 {
        return Err(Error::domain(
            "grid needs 0 < lo < hi and at least two points",
        ));
    }
    let grid = log_grid(lo, hi, points);
    let best = grid
        .into_iter()
        .max_by(|a, b| coeffs.term(*a).total_cmp(&coeffs.term(*b)))
        .expect("non-empty grid");
    Ok(best)
}

pub fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let (l0, l1) = (lo.ln(), hi.ln());
    (0..points)
        .map(|k| (l0 + (l1 - l0) * k as f64 / (points - 1) as f64).exp())
        .collect()
}

/// Per-member variances of the mean-head weights with the coefficients they
/// came from.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaSet {
    gammas: Vec<f64>,
    coeffs: Vec<ElboCoeffs>,
    lambda: f64,
    n: usize,
}

impl GammaSet {
    pub fn compute(ensemble: &Ensemble, train: &Dataset, lambda: f64) -> Result<Self> {
        let l = ensemble.len();
        let coeffs = ensemble
            .members()
            .iter()
            .map(|m| elbo_coeffs(m, train, lambda, l))
            .collect::<Result<Vec<_>>>()?;
        let gammas = coeffs.iter().map(ElboCoeffs::argmax).collect();
        Ok(Self {
            gammas,
            coeffs,
            lambda,
            n: train.len(),
        })
    }

    /// A set with given variances and no coefficient record; useful for
    /// limits such as `γ → 0`.
    pub fn from_gammas(gammas: Vec<f64>) -> Result<Self> {
        if gammas.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            return Err(Error::domain("gammas must be finite and non-negative"));
        }
        Ok(Self {
            gammas,
            coeffs: Vec::new(),
            lambda: f64::NAN,
            n: 0,
        })
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    pub fn coeffs(&self) -> &[ElboCoeffs] {
        &self.coeffs
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.gammas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gammas.is_empty()
    }

    pub fn elbo(&self) -> Result<f64> {
        elbo_value(&self.coeffs, &self.gammas)
    }

    /// Text form: a header then one `gamma a b c` line per member, all with
    /// 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "gammas {}", self.gammas.len());
        let _ = writeln!(s, "lambda {}", fmt_f64(self.lambda));
        let _ = writeln!(s, "n {}", self.n);
        let _ = writeln!(s, "# gamma a b c");
        for (l, g) in self.gammas.iter().enumerate() {
            let c = self.coeffs.get(l).copied().unwrap_or(ElboCoeffs {
                a: f64::NAN,
                b: f64::NAN,
                c: f64::NAN,
            });
            let _ = writeln!(
                s,
                "{} {} {} {}",
                fmt_f64(*g),
                fmt_f64(c.a),
                fmt_f64(c.b),
                fmt_f64(c.c)
            );
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = numbered_lines(text);
        let mut field = |key: &str| -> Result<(usize, String)> {
            let (row, line) = next_line(&mut lines, key)?;
            match line.split_whitespace().collect::<Vec<_>>()[..] {
                [k, v] if k == key => Ok((row, v.to_string())),
                _ => Err(Error::Format(format!(
                    "line {row}: expected `{key} <value>`"
                ))),
            }
        };
        let (row, count) = field("gammas")?;
        let count: usize = parse_num(&count, row, 2)?;
        let (row, lambda) = field("lambda")?;
        let lambda: f64 = parse_num(&lambda, row, 2)?;
        let (row, n) = field("n")?;
        let n: usize = parse_num(&n, row, 2)?;
        let mut gammas = Vec::with_capacity(count);
        let mut coeffs = Vec::with_capacity(count);
        for _ in 0..count {
            let (row, line) = next_line(&mut lines, "gamma row")?;
            let v = line
                .split_whitespace()
                .enumerate()
                .map(|(c, s)| parse_num::<f64>(s, row, c + 1))
                .collect::<Result<Vec<_>>>()?;
            if v.len() != 4 {
                return Err(Error::Format(format!("line {row}: expected 4 values")));
            }
            gammas.push(v[0]);
            coeffs.push(ElboCoeffs {
                a: v[1],
                b: v[2],
                c: v[3],
            });
        }
        if coeffs
            .iter()
            .all(|c| c.a.is_nan() && c.b.is_nan() && c.c.is_nan())
        {
            coeffs.clear();
        }
        Ok(Self {
            gammas,
            coeffs,
            lambda,
            n,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Mean vector and row-major covariance matrix at one input.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentPair {
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
}

impl MomentPair {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variances(&self) -> Vec<f64> {
        let d = self.dim();
        (0..d).map(|r| self.cov[r * d + r]).collect()
    }

    pub fn trace(&self) -> f64 {
        self.variances().iter().sum()
    }

    pub fn is_symmetric(&self) -> bool {
        let d = self.dim();
        (0..d).all(|r| (0..r).all(|c| self.cov[r * d + c] == self.cov[c * d + r]))
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let d = self.dim();
        if d == 1 {
            return self.cov[0];
        }
        let m = DMatrix::from_row_slice(d, d, &self.cov);
        SymmetricEigen::new(m)
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// Smallest eigenvalue at least `-1e-10 · trace`.
    pub fn is_psd(&self) -> bool {
        self.is_symmetric() && self.min_eigenvalue() >= -1e-10 * self.trace().abs()
    }
}

/// What the moment formulas need from one member at one input.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberEval {
    pub mean: Vec<f64>,
    pub variance: f64,
    /// `‖φ(x)‖²`
    pub feature_sq_norm: f64,
}

pub fn evaluate_members(ensemble: &Ensemble, x: &[f64]) -> Result<Vec<MemberEval>> {
    Ok(evaluate_members_batch(ensemble, x, 1)?
        .pop()
        .expect("one point"))
}

/// Member evaluations for `batch` inputs; outer index is the input.
pub fn evaluate_members_batch(
    ensemble: &Ensemble,
    xs: &[f64],
    batch: usize,
) -> Result<Vec<Vec<MemberEval>>> {
    let p_y = ensemble.p_y();
    let mut out: Vec<Vec<MemberEval>> = (0..batch)
        .map(|_| Vec::with_capacity(ensemble.len()))
        .collect();
    for member in ensemble.members() {
        let p = member.p_feat();
        let trace = member.forward(xs, batch)?;
        let feats = trace.features();
        for (i, slot) in out.iter_mut().enumerate() {
            slot.push(MemberEval {
                mean: trace.mean[i * p_y..(i + 1) * p_y].to_vec(),
                variance: trace.variance[i],
                feature_sq_norm: feats[i * p..(i + 1) * p].iter().map(|v| v * v).sum(),
            });
        }
    }
    Ok(out)
}

/// Sum that does not depend on the order of its terms.
fn ordered_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

fn mixture_mean(evals: &[MemberEval]) -> Vec<f64> {
    let l = evals.len() as f64;
    let d = evals[0].mean.len();
    (0..d)
        .map(|r| ordered_sum(evals.iter().map(|e| e.mean[r]).collect()) / l)
        .collect()
}

fn spread(evals: &[MemberEval], mean: &[f64]) -> Vec<f64> {
    let l = evals.len() as f64;
    let d = mean.len();
    let mut cov = vec![0.0; d * d];
    for r in 0..d {
        for c in 0..=r {
            let v = ordered_sum(
                evals
                    .iter()
                    .map(|e| (e.mean[r] - mean[r]) * (e.mean[c] - mean[c]))
                    .collect(),
            ) / l;
            cov[r * d + c] = v;
            cov[c * d + r] = v;
        }
    }
    cov
}

fn add_diagonal(cov: &mut [f64], d: usize, v: f64) {
    for r in 0..d {
        cov[r * d + r] += v;
    }
}

/// `(1/L) Σ σ_l²(x)`
pub fn mean_aleatoric(evals: &[MemberEval]) -> f64 {
    ordered_sum(evals.iter().map(|e| e.variance).collect()) / evals.len() as f64
}

/// `(1/L) Σ γ_l ‖φ_l(x)‖²`
pub fn mean_weight_term(evals: &[MemberEval], gammas: &[f64]) -> f64 {
    ordered_sum(
        evals
            .iter()
            .zip(gammas)
            .map(|(e, g)| g * e.feature_sq_norm)
            .collect(),
    ) / evals.len() as f64
}

fn check_evals(evals: &[MemberEval]) -> Result<()> {
    if evals.is_empty() {
        return Err(Error::shape("no member evaluations"));
    }
    Ok(())
}

fn check_gammas(evals: &[MemberEval], gammas: &[f64]) -> Result<()> {
    if gammas.len() != evals.len() {
        return Err(Error::shape(format!(
            "{} gammas for {} members",
            gammas.len(),
            evals.len()
        )));
    }
    Ok(())
}

pub fn regression_classical_from(evals: &[MemberEval]) -> Result<MomentPair> {
    check_evals(evals)?;
    let mean = mixture_mean(evals);
    let cov = spread(evals, &mean);
    Ok(MomentPair { mean, cov })
}

pub fn predictive_classical_from(evals: &[MemberEval]) -> Result<MomentPair> {
    let mut m = regression_classical_from(evals)?;
    let d = m.dim();
    add_diagonal(&mut m.cov, d, mean_aleatoric(evals));
    Ok(m)
}

pub fn regression_extended_from(evals: &[MemberEval], gammas: &[f64]) -> Result<MomentPair> {
    check_gammas(evals, gammas)?;
    let mut m = regression_classical_from(evals)?;
    let d = m.dim();
    add_diagonal(&mut m.cov, d, mean_weight_term(evals, gammas));
    Ok(m)
}

pub fn predictive_extended_from(evals: &[MemberEval], gammas: &[f64]) -> Result<MomentPair> {
    let mut m = regression_extended_from(evals, gammas)?;
    let d = m.dim();
    add_diagonal(&mut m.cov, d, mean_aleatoric(evals));
    Ok(m)
}

/// Moments of the posterior predictive under the delta mixture.
pub fn predictive_moments_classical(ensemble: &Ensemble, x: &[f64]) -> Result<MomentPair> {
    predictive_classical_from(&evaluate_members(ensemble, x)?)
}

/// Moments of the regression function under the delta mixture.
pub fn regression_moments_classical(ensemble: &Ensemble, x: &[f64]) -> Result<MomentPair> {
    regression_classical_from(&evaluate_members(ensemble, x)?)
}

/// Moments of the regression function under the Gaussian mixture.
pub fn regression_moments_extended(
    ensemble: &Ensemble,
    gammas: &GammaSet,
    x: &[f64],
) -> Result<MomentPair> {
    regression_extended_from(&evaluate_members(ensemble, x)?, gammas.gammas())
}

/// Moments of the posterior predictive under the Gaussian mixture.
pub fn predictive_moments_extended(
    ensemble: &Ensemble,
    gammas: &GammaSet,
    x: &[f64],
) -> Result<MomentPair> {
    predictive_extended_from(&evaluate_members(ensemble, x)?, gammas.gammas())
}

/// All four moment pairs at one input.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMoments {
    pub regression_classical: MomentPair,
    pub predictive_classical: MomentPair,
    pub regression_extended: MomentPair,
    pub predictive_extended: MomentPair,
    pub aleatoric: f64,
}

pub fn point_moments(
    ensemble: &Ensemble,
    gammas: &GammaSet,
    xs: &[f64],
    batch: usize,
) -> Result<Vec<PointMoments>> {
    evaluate_members_batch(ensemble, xs, batch)?
        .iter()
        .map(|evals| {
            Ok(PointMoments {
                regression_classical: regression_classical_from(evals)?,
                predictive_classical: predictive_classical_from(evals)?,
                regression_extended: regression_extended_from(evals, gammas.gammas())?,
                predictive_extended: predictive_extended_from(evals, gammas.gammas())?,
                aleatoric: mean_aleatoric(evals),
            })
        })
        .collect()
}

/// Draws from the mixture posterior at a fixed input.
///
/// Member outputs below the mean head are computed once; each draw picks a
/// member uniformly, perturbs its mean-head weights by `sqrt(γ_l) E` with
/// `E` standard normal, and evaluates the head.
#[derive(Debug, Clone)]
pub struct PosteriorSampler {
    members: Vec<SamplerMember>,
}

#[derive(Debug, Clone)]
struct SamplerMember {
    head: crate::nn::Dense,
    features: Vec<f64>,
    variance: f64,
    std_gamma: f64,
}

impl PosteriorSampler {
    pub fn new(ensemble: &Ensemble, gammas: &GammaSet, x: &[f64]) -> Result<Self> {
        if gammas.len() != ensemble.len() {
            return Err(Error::shape(format!(
                "{} gammas for {} members",
                gammas.len(),
                ensemble.len()
            )));
        }
        let members = ensemble
            .members()
            .iter()
            .zip(gammas.gammas())
            .map(|(m, &g)| {
                let trace = m.forward(x, 1)?;
                Ok(SamplerMember {
                    head: m.mean_head().clone(),
                    features: trace.features().to_vec(),
                    variance: trace.variance[0],
                    std_gamma: g.sqrt(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { members })
    }

    pub fn num_members(&self) -> usize {
        self.members.len()
    }

    fn regression_for<R: Rng + ?Sized>(&self, l: usize, rng: &mut R) -> Vec<f64> {
        let m = &self.members[l];
        let mut head = m.head.clone();
        for w in head.weights_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *w += m.std_gamma * e;
        }
        head.affine_ordered(&m.features, 1)
    }

    /// Member index and a regression-function draw.
    pub fn draw_regression_indexed<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, Vec<f64>) {
        let l = rng.random_range(0..self.members.len());
        (l, self.regression_for(l, rng))
    }

    pub fn draw_regression<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.draw_regression_indexed(rng).1
    }

    /// Member index and a posterior-predictive draw.
    pub fn draw_predictive_indexed<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, Vec<f64>) {
        let (l, mut y) = self.draw_regression_indexed(rng);
        let sd = self.members[l].variance.sqrt();
        for v in &mut y {
            let e: f64 = StandardNormal.sample(rng);
            *v += sd * e;
        }
        (l, y)
    }

    pub fn draw_predictive<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.draw_predictive_indexed(rng).1
    }
}

/// One draw of the regression function at `x`.
pub fn sample_regression<R: Rng + ?Sized>(
    ensemble: &Ensemble,
    gammas: &GammaSet,
    x: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    Ok(PosteriorSampler::new(ensemble, gammas, x)?.draw_regression(rng))
}

/// One draw from the posterior predictive at `x`.
pub fn sample_predictive<R: Rng + ?Sized>(
    ensemble: &Ensemble,
    gammas: &GammaSet,
    x: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    Ok(PosteriorSampler::new(ensemble, gammas, x)?.draw_predictive(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hetero::{HeteroNet, TrainConfig, DEFAULT_VARIANCE_FLOOR};
    use crate::nn::{Activation, Dense, MlpParams};
    use rand::SeedableRng;

    /// Trunk = identity-weighted relu over a positive scalar input, so the
    /// features at x are `x * scales`.
    fn member(scales: &[f64], mean_w: &[f64], var_bias: f64) -> HeteroNet {
        let p = scales.len();
        let trunk = MlpParams::from_layers(vec![Dense::new(
            1,
            p,
            scales.to_vec(),
            Some(vec![0.0; p]),
            Activation::Relu,
        )
        .unwrap()])
        .unwrap();
        let p_y = mean_w.len() / p;
        let mean = Dense::new(p, p_y, mean_w.to_vec(), None, Activation::Identity).unwrap();
        let var = Dense::new(
            p,
            1,
            vec![0.0; p],
            Some(vec![var_bias]),
            Activation::Identity,
        )
        .unwrap();
        HeteroNet::from_parts(trunk, mean, var, DEFAULT_VARIANCE_FLOOR).unwrap()
    }

    fn unit_bias() -> f64 {
        ((1.0 - DEFAULT_VARIANCE_FLOOR).exp() - 1.0).ln()
    }

    fn ensemble(members: Vec<HeteroNet>) -> Ensemble {
        let seeds = (0..members.len() as u64).collect();
        Ensemble::from_members(members, seeds, TrainConfig::default()).unwrap()
    }

    fn eval(mean: f64, variance: f64, fsq: f64) -> MemberEval {
        MemberEval {
            mean: vec![mean],
            variance,
            feature_sq_norm: fsq,
        }
    }

    fn data(xs: &[f64]) -> Dataset {
        Dataset::new(xs.to_vec(), vec![0.0; xs.len()], 1, 1, None).unwrap()
    }

    #[test]
    fn c_is_half_py_pfeat() {
        let m = member(&[1.0, 1.0], &[0.3, 0.1], unit_bias());
        let c = elbo_coeffs(&m, &data(&[1.0]), 0.5, 3).unwrap();
        assert_eq!(c.c, 1.0);
    }

    #[test]
    fn b_with_zero_features() {
        // x = 0 gives all-zero features: b = -½ p_y p λ = -½·4·0.5 = -1
        let m = member(&[1.0, 2.0, 3.0, 4.0], &[0.1, 0.2, 0.3, 0.4], unit_bias());
        let c = elbo_coeffs(&m, &data(&[0.0, 0.0]), 0.5, 1).unwrap();
        assert!((c.b + 1.0).abs() < 1e-15);
    }

    #[test]
    fn gamma_zero_features_is_inverse_lambda() {
        let m = member(&[1.0, 2.0, 3.0], &[0.1, 0.2, 0.3], unit_bias());
        let g = compute_gamma(&m, &data(&[0.0; 5]), 0.01).unwrap();
        assert!((g - 100.0).abs() < 1e-10);
    }

    #[test]
    fn gamma_hand_value() {
        // p = 2, features (1, 1), σ² = 1, λ = 0.5 → 2 / (2 + 1)
        let m = member(&[1.0, 1.0], &[0.0, 0.0], unit_bias());
        let g = compute_gamma(&m, &data(&[1.0]), 0.5).unwrap();
        assert!((g - 2.0 / 3.0).abs() < 1e-12, "{g}");
    }

    #[test]
    fn gamma_duplicated_data_shrinks() {
        let m = member(&[1.0, 0.5], &[0.2, 0.1], 0.3);
        let d = data(&[0.2, 0.9, 0.4]);
        let g1 = compute_gamma(&m, &d, 0.1).unwrap();
        let g2 = compute_gamma(&m, &d.repeated(2).unwrap(), 0.1).unwrap();
        assert!(g2 < g1);
    }

    #[test]
    fn degenerate_gamma_is_an_error() {
        let m = member(&[1.0], &[0.2], 0.3);
        assert!(matches!(
            compute_gamma(&m, &data(&[0.0]), 0.0),
            Err(Error::Domain(_))
        ));
        assert!(compute_gamma(&m, &data(&[1.0]), 0.0).is_ok());
    }

    #[test]
    fn elbo_rejects_improper_prior() {
        let m = member(&[1.0], &[0.2], 0.3);
        assert!(elbo_coeffs(&m, &data(&[1.0]), 0.0, 1).is_err());
        let empty_like = Dataset::new(vec![1.0], vec![0.0], 1, 1, None).unwrap();
        assert!(elbo_coeffs(&m, &empty_like, 1.0, 0).is_err());
    }

    #[test]
    fn elbo_value_hand() {
        let c = ElboCoeffs {
            a: 0.0,
            b: -1.0,
            c: 1.0,
        };
        assert_eq!(elbo_value(&[c], &[1.0]).unwrap(), -1.0);
        let c = ElboCoeffs {
            a: 5.0,
            b: -2.0,
            c: 0.0,
        };
        assert_eq!(elbo_value(&[c], &[3.0]).unwrap(), -1.0);
        assert!(elbo_value(&[c], &[0.0]).is_err());
        assert!(elbo_value(&[c], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn argmax_beats_grid() {
        let c = ElboCoeffs {
            a: 0.3,
            b: -4.2,
            c: 1.7,
        };
        let best = c.argmax();
        for g in log_grid(best / 100.0, best * 100.0, 200) {
            assert!(c.term(best) >= c.term(g));
        }
        let grid_best = grid_maximize_gamma(&c, best / 100.0, best * 100.0, 2001).unwrap();
        assert!((grid_best / best - 1.0).abs() < 0.01);
    }

    #[test]
    fn classical_two_members() {
        let evals = [eval(0.0, 1.0, 0.0), eval(2.0, 1.0, 0.0)];
        let p = predictive_classical_from(&evals).unwrap();
        assert_eq!((p.mean[0], p.cov[0]), (1.0, 2.0));
        let r = regression_classical_from(&evals).unwrap();
        assert_eq!((r.mean[0], r.cov[0]), (1.0, 1.0));
    }

    #[test]
    fn identical_members_have_only_aleatoric() {
        let evals = [
            eval(0.7, 0.3, 1.0),
            eval(0.7, 0.3, 1.0),
            eval(0.7, 0.3, 1.0),
        ];
        let p = predictive_classical_from(&evals).unwrap();
        assert_eq!(p.cov[0], mean_aleatoric(&evals));
        assert_eq!(
            regression_classical_from(&evals[..1]).unwrap().cov,
            vec![0.0]
        );
    }

    #[test]
    fn extended_single_member() {
        let evals = [eval(0.3, 0.2, 4.0)];
        let r = regression_extended_from(&evals, &[0.5]).unwrap();
        assert_eq!(r.cov[0], 2.0);
        assert_eq!(r.mean, vec![0.3]);
    }

    #[test]
    fn zero_gammas_reduce_to_classical() {
        let evals = [eval(0.1, 0.2, 3.0), eval(-0.4, 0.5, 1.5)];
        assert_eq!(
            regression_extended_from(&evals, &[0.0, 0.0]).unwrap(),
            regression_classical_from(&evals).unwrap()
        );
        assert_eq!(
            predictive_extended_from(&evals, &[0.0, 0.0]).unwrap(),
            predictive_classical_from(&evals).unwrap()
        );
        assert!(regression_extended_from(&evals, &[0.0]).is_err());
    }

    #[test]
    fn multi_output_covariance_is_psd() {
        let ens = ensemble(vec![
            member(&[1.0, 0.5], &[0.2, 0.1, -0.3, 0.4], 0.0),
            member(&[0.3, 1.5], &[-0.2, 0.7, 0.1, 0.1], 0.5),
            member(&[2.0, 0.1], &[0.5, 0.5, 0.5, -0.5], -0.5),
        ]);
        let gammas = GammaSet::from_gammas(vec![0.1, 0.2, 0.3]).unwrap();
        for x in [0.1, 0.5, 2.0] {
            for m in [
                regression_moments_classical(&ens, &[x]).unwrap(),
                predictive_moments_classical(&ens, &[x]).unwrap(),
                regression_moments_extended(&ens, &gammas, &[x]).unwrap(),
                predictive_moments_extended(&ens, &gammas, &[x]).unwrap(),
            ] {
                assert_eq!(m.dim(), 2);
                assert!(m.is_psd(), "{m:?}");
            }
        }
    }

    #[test]
    fn zero_gamma_sampler_returns_member_means() {
        let ens = ensemble(vec![
            member(&[1.0, 0.5], &[0.2, 0.1], 0.0),
            member(&[0.3, 1.5], &[-0.2, 0.7], 0.5),
        ]);
        let gammas = GammaSet::from_gammas(vec![0.0, 0.0]).unwrap();
        let means: Vec<f64> = ens
            .members()
            .iter()
            .map(|m| m.predict(&[0.8]).unwrap().mean[0])
            .collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let s = sample_regression(&ens, &gammas, &[0.8], &mut rng).unwrap();
            assert!(means.contains(&s[0]));
        }
    }

    #[test]
    fn gamma_text_round_trip() {
        let ens = ensemble(vec![
            member(&[1.0, 0.5], &[0.2, 0.1], 0.0),
            member(&[0.3, 1.5], &[-0.2, 0.7], 0.5),
        ]);
        let set = GammaSet::compute(&ens, &data(&[0.1, 0.6, 0.9]), 0.01).unwrap();
        let back = GammaSet::from_text(&set.to_text()).unwrap();
        assert_eq!(set, back);
        let bare = GammaSet::from_gammas(vec![0.25]).unwrap();
        let back = GammaSet::from_text(&bare.to_text()).unwrap();
        assert_eq!(back.gammas(), bare.gammas());
        assert!(back.coeffs().is_empty());
    }
}
