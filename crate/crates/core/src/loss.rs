//! Motion-masked denoising loss kernels with analytic gradients, plus a
//! self-contained verification harness.
//!
//! For a residual `r` (h x w x c) and spatial mask `M` (h x w):
//!
//! * masked loss `sum_ijc (r_ijc * M_ij)^2`
//! * auxiliary loss `-lambda * sum_ij M_ij`
//! * `dL/dM_ij = 2 M_ij rho_ij - lambda` with `rho_ij = sum_c r_ijc^2`
//! * `dL/dr_ijc = 2 r_ijc M_ij^2`
//!
//! Reductions are sums, and the mask broadcasts over channels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::Grid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("mask is {mask:?} but residual is {residual:?}")]
    DimensionMismatch {
        mask: (usize, usize),
        residual: (usize, usize),
    },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("mask value {value} at index {index} outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("residual data length {len} does not match {height}x{width}x{channels}")]
    BadShape {
        height: usize,
        width: usize,
        channels: usize,
        len: usize,
    },
    #[error("lambda must be finite and non-negative, got {0}")]
    InvalidLambda(f64),
}

/// Per-pixel weights in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionMask(Grid<f64>);

impl MotionMask {
    pub fn new(values: Grid<f64>) -> Result<Self, LossError> {
        for (index, &value) in values.as_slice().iter().enumerate() {
            if !value.is_finite() {
                return Err(LossError::NonFinite(index));
            }
            if !(0.0..=1.0).contains(&value) {
                return Err(LossError::OutOfRange { index, value });
            }
        }
        Ok(Self(values))
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self(Grid::filled(height, width, 1.0))
    }

    pub fn grid(&self) -> &Grid<f64> {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }
}

/// Elementwise noise-prediction error, row-major `h x w x c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Residual {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self, LossError> {
        if data.len() != height * width * channels {
            return Err(LossError::BadShape {
                height,
                width,
                channels,
                len: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(LossError::NonFinite(i));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Residual `eps - eps_hat` of a target noise and a prediction.
    pub fn from_prediction(
        height: usize,
        width: usize,
        channels: usize,
        eps: &[f64],
        eps_hat: &[f64],
    ) -> Result<Self, LossError> {
        if eps.len() != eps_hat.len() {
            return Err(LossError::BadShape {
                height,
                width,
                channels,
                len: eps_hat.len(),
            });
        }
        Self::new(height, width, channels, eps.iter().zip(eps_hat).map(|(a, b)| a - b).collect())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `rho_ij = sum_c r_ijc^2`.
    pub fn energy(&self) -> Grid<f64> {
        let c = self.channels;
        Grid::from_fn(self.height, self.width, |i, j| {
            let base = (i * self.width + j) * c;
            self.data[base..base + c].iter().map(|v| v * v).sum()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.lambda.is_finite() && self.lambda >= 0.0 {
            Ok(())
        } else {
            Err(LossError::InvalidLambda(self.lambda))
        }
    }
}

fn check_dims(residual: &Residual, mask: &MotionMask) -> Result<(), LossError> {
    if residual.dims() != mask.dims() {
        return Err(LossError::DimensionMismatch {
            mask: mask.dims(),
            residual: residual.dims(),
        });
    }
    Ok(())
}

// Flat summation order, so an all-ones mask reproduces `denoising_loss` bit for bit.
fn masked_loss_raw(r: &[f64], m: &[f64], c: usize) -> f64 {
    r.iter()
        .enumerate()
        .map(|(i, v)| {
            let x = v * m[i / c];
            x * x
        })
        .sum()
}

fn total_loss_raw(r: &[f64], m: &[f64], c: usize, lambda: f64) -> f64 {
    masked_loss_raw(r, m, c) - lambda * m.iter().sum::<f64>()
}

/// `(dL/dM, dL/dr)`; `mask_sign` is -1 only in the harness self-test.
fn grads_raw(r: &[f64], m: &[f64], c: usize, lambda: f64, mask_sign: f64) -> (Vec<f64>, Vec<f64>) {
    let gm = r
        .chunks_exact(c)
        .zip(m)
        .map(|(px, &mv)| mask_sign * (2.0 * mv * px.iter().map(|v| v * v).sum::<f64>() - lambda))
        .collect();
    let gr = r
        .chunks_exact(c)
        .zip(m)
        .flat_map(|(px, &mv)| px.iter().map(move |v| 2.0 * v * mv * mv))
        .collect();
    (gm, gr)
}

/// Squared L2 norm of the masked residual.
pub fn masked_loss(residual: &Residual, mask: &MotionMask) -> Result<f64, LossError> {
    check_dims(residual, mask)?;
    Ok(masked_loss_raw(&residual.data, mask.0.as_slice(), residual.channels))
}

/// Unmasked denoising objective `sum r^2`.
pub fn denoising_loss(residual: &Residual) -> f64 {
    residual.data.iter().map(|v| v * v).sum()
}

/// `-lambda * sum M`.
pub fn auxiliary_loss(mask: &MotionMask, cfg: &LossConfig) -> Result<f64, LossError> {
    cfg.validate()?;
    Ok(-cfg.lambda * mask.0.as_slice().iter().sum::<f64>())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrads {
    pub total: f64,
    pub grad_mask: Grid<f64>,
    /// Row-major `h x w x c`.
    pub grad_residual: Vec<f64>,
}

pub fn total_loss_and_grads(residual: &Residual, mask: &MotionMask, cfg: &LossConfig) -> Result<LossAndGrads, LossError> {
    check_dims(residual, mask)?;
    cfg.validate()?;
    let (r, m, c) = (&residual.data, mask.0.as_slice(), residual.channels);
    let (gm, gr) = grads_raw(r, m, c, cfg.lambda, 1.0);
    let (h, w) = residual.dims();
    Ok(LossAndGrads {
        total: total_loss_raw(r, m, c, cfg.lambda),
        grad_mask: Grid::from_vec(h, w, gm).expect("one gradient per pixel"),
        grad_residual: gr,
    })
}

/// Per-pixel minimizer of `M^2 rho - lambda M` over `[0, 1]`:
/// `clamp(lambda / (2 rho), 0, 1)`, and 1 where `rho = 0`.
pub fn optimal_mask(residual: &Residual, cfg: &LossConfig) -> Result<MotionMask, LossError> {
    cfg.validate()?;
    let m = residual.energy().map(|&rho| optimal_value(rho, cfg.lambda));
    Ok(MotionMask(m))
}

fn optimal_value(rho: f64, lambda: f64) -> f64 {
    if rho == 0.0 {
        1.0
    } else {
        (lambda / (2.0 * rho)).clamp(0.0, 1.0)
    }
}

/// Elementwise clamp into `[0, 1]`.
pub fn clamp_mask(raw: &Grid<f64>) -> Result<MotionMask, LossError> {
    if let Some(i) = raw.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(LossError::NonFinite(i));
    }
    Ok(MotionMask(raw.map(|v| v.clamp(0.0, 1.0))))
}

/// Relative error with a unit floor on the denominator, so components that
/// are both near zero compare absolutely.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Options for [`run_checks`].
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOptions {
    pub seed: u64,
    /// `(height, width, channels)` shapes cycled through by the random instances.
    pub sizes: Vec<(usize, usize, usize)>,
    pub lambda: f64,
    pub instances: usize,
    /// Flips the sign of the analytic mask gradient to prove the harness
    /// catches a broken kernel.
    pub inject_sign_error: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            sizes: vec![(4, 4, 2), (8, 8, 3), (3, 5, 1)],
            lambda: 1.0,
            instances: 100,
            inject_sign_error: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn random_instance(rng: &mut ChaCha8Rng, (h, w, c): (usize, usize, usize)) -> (Vec<f64>, Vec<f64>) {
    let r = (0..h * w * c).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let m = (0..h * w).map(|_| rng.random_range(0.01..0.99)).collect();
    (r, m)
}

/// Worst `(mask, residual)` gradient relative error against central
/// differences with step `1e-5`.
fn fd_errors(r: &[f64], m: &[f64], c: usize, lambda: f64, mask_sign: f64) -> (f64, f64) {
    const H: f64 = 1e-5;
    let (gm, gr) = grads_raw(r, m, c, lambda, mask_sign);
    let mut worst_m: f64 = 0.0;
    let mut mp = m.to_vec();
    for i in 0..m.len() {
        mp[i] = m[i] + H;
        let hi = total_loss_raw(r, &mp, c, lambda);
        mp[i] = m[i] - H;
        let lo = total_loss_raw(r, &mp, c, lambda);
        mp[i] = m[i];
        worst_m = worst_m.max(relative_error(gm[i], (hi - lo) / (2.0 * H)));
    }
    let mut worst_r: f64 = 0.0;
    let mut rp = r.to_vec();
    for i in 0..r.len() {
        rp[i] = r[i] + H;
        let hi = total_loss_raw(&rp, m, c, lambda);
        rp[i] = r[i] - H;
        let lo = total_loss_raw(&rp, m, c, lambda);
        rp[i] = r[i];
        worst_r = worst_r.max(relative_error(gr[i], (hi - lo) / (2.0 * H)));
    }
    (worst_m, worst_r)
}

/// Projected gradient descent on the mask from 0.5 with step `0.5 / max rho`;
/// returns the worst distance to the closed-form optimum after `steps`.
fn pgd_gap(r: &[f64], c: usize, lambda: f64, mask_sign: f64, steps: usize) -> f64 {
    let rho: Vec<f64> = r.chunks_exact(c).map(|px| px.iter().map(|v| v * v).sum()).collect();
    let max_rho = rho.iter().copied().fold(0.0, f64::max);
    let eta = if max_rho > 0.0 { 0.5 / max_rho } else { 0.5 };
    let mut m = vec![0.5; rho.len()];
    for _ in 0..steps {
        let (gm, _) = grads_raw(r, &m, c, lambda, mask_sign);
        for (mv, g) in m.iter_mut().zip(gm) {
            *mv = (*mv - eta * g).clamp(0.0, 1.0);
        }
    }
    m.iter()
        .zip(&rho)
        .map(|(mv, &p)| (mv - optimal_value(p, lambda)).abs())
        .fold(0.0, f64::max)
}

/// Minimizer of `M^2 rho - lambda M` by scanning `[0, 1]` in steps of 1e-5.
pub fn grid_optimal_value(rho: f64, lambda: f64) -> f64 {
    let mut best = (f64::INFINITY, 0.0);
    for k in 0..=100_000 {
        let m = k as f64 * 1e-5;
        let f = m * m * rho - lambda * m;
        if f < best.0 {
            best = (f, m);
        }
    }
    best.1
}

/// Runs the kernel invariant suite on seeded random instances.
pub fn run_checks(opts: &CheckOptions) -> Result<Vec<CheckResult>, LossError> {
    LossConfig { lambda: opts.lambda }.validate()?;
    let sizes = if opts.sizes.is_empty() {
        CheckOptions::default().sizes
    } else {
        opts.sizes.clone()
    };
    let lambda = opts.lambda;
    let sign = if opts.inject_sign_error { -1.0 } else { 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let instances: Vec<_> = (0..opts.instances.max(1))
        .map(|k| {
            let shape = sizes[k % sizes.len()];
            let (r, m) = random_instance(&mut rng, shape);
            (shape, r, m)
        })
        .collect();
    let mut out = Vec::new();

    let (mut worst_m, mut worst_r) = (0.0f64, 0.0f64);
    for ((_, _, c), r, m) in &instances {
        let (em, er) = fd_errors(r, m, *c, lambda, sign);
        worst_m = worst_m.max(em);
        worst_r = worst_r.max(er);
    }
    out.push(CheckResult {
        name: "mask gradient matches finite differences",
        passed: worst_m < 1e-5,
        detail: format!("max relative error {worst_m:.3e}"),
    });
    out.push(CheckResult {
        name: "residual gradient matches finite differences",
        passed: worst_r < 1e-5,
        detail: format!("max relative error {worst_r:.3e}"),
    });

    let mut worst_stat: f64 = 0.0;
    let mut interior = 0;
    for ((_, _, c), r, _) in &instances {
        let rho: Vec<f64> = r.chunks_exact(*c).map(|px| px.iter().map(|v| v * v).sum()).collect();
        let m: Vec<f64> = rho.iter().map(|&p| optimal_value(p, lambda)).collect();
        let (gm, _) = grads_raw(r, &m, *c, lambda, sign);
        for (mv, g) in m.iter().zip(gm) {
            if *mv > 0.0 && *mv < 1.0 {
                interior += 1;
                worst_stat = worst_stat.max(g.abs());
            }
        }
    }
    out.push(CheckResult {
        name: "mask gradient vanishes at interior optimum",
        passed: worst_stat <= 1e-9,
        detail: format!("{interior} interior pixels, max |dL/dM| {worst_stat:.3e}"),
    });

    // With lambda = 0 the optimum is M = 0 and descent only approaches it
    // geometrically at rate rho / max(rho); the degenerate check covers it.
    if lambda > 0.0 {
        let worst_pgd = instances
            .iter()
            .map(|((_, _, c), r, _)| pgd_gap(r, *c, lambda, sign, 500))
            .fold(0.0, f64::max);
        out.push(CheckResult {
            name: "projected gradient descent reaches optimal mask",
            passed: worst_pgd <= 1e-4,
            detail: format!("max gap after 500 steps {worst_pgd:.3e}"),
        });
    }

    let mut worst_grid: f64 = 0.0;
    for rho in [0.01, 0.1, 0.5, 1.0, 2.0, 7.5] {
        worst_grid = worst_grid.max((optimal_value(rho, lambda) - grid_optimal_value(rho, lambda)).abs());
    }
    out.push(CheckResult {
        name: "optimal mask matches grid search",
        passed: worst_grid <= 2e-5,
        detail: format!("max deviation {worst_grid:.3e}"),
    });

    let identity_exact = instances.iter().all(|((_, _, c), r, m)| {
        let ones = vec![1.0; m.len()];
        masked_loss_raw(r, &ones, *c) == r.iter().map(|v| v * v).sum::<f64>()
    });
    out.push(CheckResult {
        name: "identity mask reduces to unmasked objective",
        passed: identity_exact,
        detail: String::new(),
    });

    let nonneg = instances
        .iter()
        .all(|((_, _, c), r, m)| masked_loss_raw(r, m, *c) >= 0.0);
    out.push(CheckResult {
        name: "masked loss is non-negative",
        passed: nonneg,
        detail: String::new(),
    });

    let rhos = [0.0, 0.05, 0.3, 1.0, 4.0, 20.0];
    let lambdas = [0.0, 0.5, 1.0, 3.0];
    let mono_rho = lambdas
        .iter()
        .all(|&l| rhos.windows(2).all(|w| optimal_value(w[1], l) <= optimal_value(w[0], l)));
    let mono_lambda = rhos
        .iter()
        .all(|&p| lambdas.windows(2).all(|w| optimal_value(p, w[1]) >= optimal_value(p, w[0])));
    out.push(CheckResult {
        name: "optimal mask monotone in rho and lambda",
        passed: mono_rho && mono_lambda,
        detail: String::new(),
    });

    if lambda == 0.0 {
        let degenerate = instances.iter().all(|((_, _, c), r, _)| {
            r.chunks_exact(*c)
                .map(|px| px.iter().map(|v| v * v).sum::<f64>())
                .all(|rho| rho == 0.0 || optimal_value(rho, 0.0) == 0.0)
        });
        out.push(CheckResult {
            name: "lambda = 0 gives degenerate all-zero mask",
            passed: degenerate,
            detail: if degenerate {
                "degenerate solution M* = 0 detected".into()
            } else {
                "non-zero optimal mask with lambda = 0".into()
            },
        });
    }
    Ok(out)
}
