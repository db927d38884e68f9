//! Block-bidiagonal history systems, their forward-substitution solve with an
//! optional inversion-error injection, and end-to-end history states for the
//! Dyson method.

use serde::{Deserialize, Serialize};

use crate::dyson::{choose_krm_sqrt, default_fine_cap, CovApprox, DysonApprox, Krm};
use crate::error::{Error, Result};
use crate::linalg::{norm2, spectral_norm, Mat};
use crate::model::{exact_phi, SdeProblem, TimeGrid};
use crate::prng::{clip, ClipBound, PcgStream};
use crate::dyson::reference_steps;

/// Stream tags separating auxiliary randomness from the noise stream.
pub const QLSS_STREAM_TAG: u64 = 0x514c_5353_0000_0001;
pub const SQRT_STREAM_TAG: u64 = 0x5351_5254_0000_0002;

/// Largest system that is materialized densely.
pub const DENSE_LIMIT: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemKind {
    Dyson,
    DysonPadded,
    Em,
}

/// Unit lower block-bidiagonal system. Row block `n + 1` reads
/// `x_{n+1} - blocks[n] x_n = b_{n+1}` for `n < r`, then `x_{n+1} - x_n = b_{n+1}`
/// across the `pad` tail blocks.
#[derive(Clone, Debug)]
pub struct HistorySystem {
    pub kind: SystemKind,
    pub blocks: Vec<Mat>,
    pub r: usize,
    pub pad: usize,
    pub n: usize,
}

impl HistorySystem {
    pub fn dim(&self) -> usize {
        (self.r + self.pad + 1) * self.n
    }

    pub fn dense(&self) -> Result<Mat> {
        let dim = self.dim();
        if dim > DENSE_LIMIT {
            return Err(Error::TooLarge(dim));
        }
        let n = self.n;
        let mut a = Mat::identity(dim);
        for (k, blk) in self.blocks.iter().enumerate() {
            a.set_block((k + 1) * n, k * n, &blk.scale(-1.0));
        }
        for k in self.r..self.r + self.pad {
            a.set_block((k + 1) * n, k * n, &Mat::identity(n).scale(-1.0));
        }
        Ok(a)
    }

    /// `A x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = x.to_vec();
        for k in 0..self.r + self.pad {
            let prev = &x[k * n..(k + 1) * n];
            let sub = if k < self.r { self.blocks[k].matvec(prev) } else { prev.to_vec() };
            for (yi, s) in y[(k + 1) * n..(k + 2) * n].iter_mut().zip(sub) {
                *yi -= s;
            }
        }
        y
    }
}

pub fn assemble(kind: SystemKind, blocks: Vec<Mat>, pad: usize) -> Result<HistorySystem> {
    let first = blocks.first().ok_or_else(|| Error::InvalidInput("need r >= 1 blocks".into()))?;
    let n = first.rows();
    for b in &blocks {
        if b.rows() != n || b.cols() != n {
            return Err(Error::DimensionMismatch { expected: n, got: if b.rows() != n { b.rows() } else { b.cols() } });
        }
    }
    Ok(HistorySystem { kind, r: blocks.len(), blocks, pad, n })
}

/// `(x0, noise_0, ..., noise_{r-1}, 0, ..., 0)` with `pad` zero blocks.
pub fn rhs(x0: &[f64], noise: &[Vec<f64>], pad: usize) -> Vec<f64> {
    let n = x0.len();
    let mut out = Vec::with_capacity((noise.len() + pad + 1) * n);
    out.extend_from_slice(x0);
    for d in noise {
        out.extend_from_slice(d);
    }
    out.resize((noise.len() + pad + 1) * n, 0.0);
    out
}

/// Block `(n, n')` of the inverse system matrix.
pub fn inverse_block(sys: &HistorySystem, n: usize, np: usize) -> Result<Mat> {
    let max = sys.r + sys.pad;
    for idx in [n, np] {
        if idx > max {
            return Err(Error::IndexOutOfRange { index: idx, max });
        }
    }
    if n < np {
        return Ok(Mat::zeros(sys.n, sys.n));
    }
    if n == np || np >= sys.r {
        return Ok(Mat::identity(sys.n));
    }
    let top = n.min(sys.r);
    let mut out = Mat::identity(sys.n);
    for k in np..top {
        out = sys.blocks[k].matmul(&out);
    }
    Ok(out)
}

/// Forward substitution. With `qlss_eps > 0` a pseudorandom vector of norm
/// exactly `qlss_eps * ||b||` is added, drawn from `stream` starting at `offset`.
pub fn solve(sys: &HistorySystem, b: &[f64], qlss_eps: f64, stream: &PcgStream, offset: u64) -> Result<Vec<f64>> {
    if b.len() != sys.dim() {
        return Err(Error::DimensionMismatch { expected: sys.dim(), got: b.len() });
    }
    if !(qlss_eps >= 0.0) {
        return Err(Error::InvalidInput(format!("qlss_eps = {qlss_eps} must be nonnegative")));
    }
    let mut x = b.to_vec();
    let mut buf = vec![0.0; sys.n];
    forward_substitute(sys, &mut x, &mut buf);
    if qlss_eps > 0.0 {
        let mut c = stream.cursor(offset + 1);
        let dir: Vec<f64> = (0..x.len()).map(|_| c.next_normal()).collect();
        let scale = qlss_eps * norm2(b) / norm2(&dir);
        for (xi, d) in x.iter_mut().zip(&dir) {
            *xi += scale * d;
        }
    }
    Ok(x)
}

/// In-place forward substitution on a right-hand side stored in `x`.
pub fn forward_substitute(sys: &HistorySystem, x: &mut [f64], buf: &mut [f64]) {
    let n = sys.n;
    for k in 0..sys.r + sys.pad {
        let (head, tail) = x.split_at_mut((k + 1) * n);
        let prev = &head[k * n..];
        if k < sys.r {
            sys.blocks[k].matvec_into(prev, buf);
        } else {
            buf.copy_from_slice(prev);
        }
        for (xi, s) in tail[..n].iter_mut().zip(buf.iter()) {
            *xi += s;
        }
    }
}

/// Emulated history state: raw solution vector and its amplitude normalization.
#[derive(Clone, Debug, Serialize)]
pub struct HistoryState {
    pub raw: Vec<f64>,
    pub prefactor: f64,
    #[serde(rename = "U_B")]
    pub u_b: f64,
    /// Inversion-error budget on the normalized inverse.
    pub qlss_eps: f64,
    /// Norm of the perturbation added to `raw`.
    pub perturbation: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct NormReport {
    pub kind: SystemKind,
    pub r: usize,
    #[serde(rename = "R")]
    pub pad: usize,
    pub n: usize,
    pub measured_inv_norm: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Measured `||A^{-1}||` against `c r / max{1, eta T} + R`, with `c = 2` for
/// exact propagator blocks and `c = 4` for approximate blocks.
pub fn norm_bound_report(sys: &HistorySystem, eta: f64, t_end: f64, exact_blocks: bool) -> Result<NormReport> {
    let a = sys.dense()?;
    let sv = a.to_nalgebra().singular_values();
    let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
    let measured = 1.0 / smin;
    let c = if exact_blocks { 2.0 } else { 4.0 };
    let bound = c * sys.r as f64 / (eta * t_end).max(1.0) + sys.pad as f64;
    Ok(NormReport {
        kind: sys.kind,
        r: sys.r,
        pad: sys.pad,
        n: sys.n,
        measured_inv_norm: measured,
        bound,
        pass: measured <= bound,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QlssMode {
    /// Exact inversion.
    Honest,
    /// Inversion error injected at its full budget.
    Adversarial,
}

#[derive(Clone, Debug)]
pub struct HistoryConfig {
    pub eps: f64,
    pub padded: bool,
    pub pad: usize,
    pub qlss_mode: QlssMode,
    pub clip: ClipBound,
    /// Ceiling on the fine grid; `None` uses the default for the drift kind.
    pub fine_cap: Option<u64>,
    /// Overrides the accuracy driving `(K, r, M)`; defaults to the value derived from `eps`.
    pub varepsilon: Option<f64>,
    /// Seed and stream for adversarial perturbations.
    pub aux_seed: u64,
    pub aux_stream: u64,
}

/// Parameters and checks shared by every sample of a Dyson history state.
#[derive(Clone, Debug, Serialize)]
pub struct HistoryPlan {
    pub eps: f64,
    pub varepsilon: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub r: usize,
    #[serde(rename = "M_formula")]
    pub m_formula: u64,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "R")]
    pub pad: usize,
    #[serde(rename = "U_SN")]
    pub u_sn: f64,
    #[serde(rename = "U_B")]
    pub u_b: f64,
    pub prefactor: f64,
    pub alpha_a_tilde: f64,
    pub kappa_a_tilde: f64,
    pub eps3: f64,
    /// Perturbation norm relative to `||b||` in adversarial mode.
    pub qlss_raw: f64,
    pub phi_hat_error: f64,
    pub phi_hat_cap: f64,
    pub sigma_error: f64,
    pub sqrt_error: f64,
    pub sqrt_budget: f64,
    pub eps2: f64,
}

/// A verified sample.
#[derive(Clone, Debug)]
pub struct HistorySample {
    pub state: HistoryState,
    pub reference: Vec<f64>,
    /// Deviation bounded by `U_B eps`: whole vector (unpadded) or worst tail block (padded).
    pub deviation: f64,
    pub step_deviation: Vec<f64>,
    pub eps1: f64,
    pub delta_max: f64,
    pub noise_error: f64,
    pub rhs_norm: f64,
}

/// Dyson-method history states for one problem and accuracy.
pub struct DysonHistory<'a> {
    p: &'a SdeProblem,
    pub cfg: HistoryConfig,
    pub plan: HistoryPlan,
    pub grid: TimeGrid,
    pub system: HistorySystem,
    pub exact_system: HistorySystem,
    pub cov: CovApprox,
    pub s_exact: Vec<Mat>,
    qlss_stream: PcgStream,
}

/// `varepsilon` driving `(K_c, r_c, M_c)` for target deviation `eps`.
pub fn history_varepsilon(p: &SdeProblem, r_c: usize, u_sn: f64, eps: f64) -> f64 {
    let b = &p.bounds;
    let (t, n) = (p.t_end, p.n as f64);
    let s2 = b.sigma * b.sigma;
    let rc = r_c as f64;
    let first = (b.eta * t).powi(2) * eps / (32.0 * 6f64.sqrt() * rc * rc);
    let ratio = (p.x0_norm_sq() + 4.0 * n * s2 * t * u_sn * u_sn) / (384.0 * n * s2 * t * u_sn * u_sn);
    first.min(ratio.sqrt() * b.eta * t / rc * eps)
}

/// `sqrt(||x0||² + 4 N sigma² T U_SN²)`.
pub fn u_b_dyson(p: &SdeProblem, u_sn: f64) -> f64 {
    let s2 = p.bounds.sigma * p.bounds.sigma;
    (p.x0_norm_sq() + 4.0 * p.n as f64 * s2 * p.t_end * u_sn * u_sn).sqrt()
}

impl<'a> DysonHistory<'a> {
    pub fn build(p: &'a SdeProblem, cfg: HistoryConfig) -> Result<Self> {
        if !(cfg.eps > 0.0 && cfg.eps <= 1.0) {
            return Err(Error::InvalidInput(format!("eps = {} must lie in (0, 1]", cfg.eps)));
        }
        p.require_dyson()?;
        let u_sn = cfg.clip.u_sn;
        if !u_sn.is_finite() {
            return Err(Error::InvalidInput("history states need a finite clip bound".into()));
        }
        let r_c = choose_krm_sqrt(p, 1.0)?.r;
        let varepsilon = cfg.varepsilon.unwrap_or_else(|| history_varepsilon(p, r_c, u_sn, cfg.eps));
        let Krm { k, r, m: m_formula } = choose_krm_sqrt(p, varepsilon)?;
        let cap = cfg.fine_cap.unwrap_or_else(|| default_fine_cap(p.drift_kind));
        let m = m_formula.min(cap) as usize;
        let pad = if cfg.padded { cfg.pad } else { 0 };
        let grid = TimeGrid::new(p.t_end, r, m);
        let dyson = DysonApprox::new(p, grid, k);

        let mut phi_hat = Vec::with_capacity(r);
        let mut phi_exact = Vec::with_capacity(r);
        let mut phi_err: f64 = 0.0;
        for n in 0..r {
            let approx = dyson.phi(n, 0);
            let exact = exact_phi(p, grid.t(n), grid.t(n + 1), reference_steps(grid.dt))?;
            phi_err = phi_err.max(spectral_norm(&approx.sub(&exact))?);
            phi_hat.push(approx);
            phi_exact.push(exact);
        }
        let eta_dt = p.bounds.eta * grid.dt;
        let phi_cap = 0.5 * eta_dt * (-eta_dt).exp();
        if phi_err > phi_cap {
            return Err(Error::BoundViolation(format!(
                "||Phi^ - Phi|| = {phi_err:.3e} exceeds eta dt exp(-eta dt)/2 = {phi_cap:.3e}"
            )));
        }

        let adversary = PcgStream::new(cfg.aux_seed, cfg.aux_stream ^ SQRT_STREAM_TAG);
        let adv = (cfg.qlss_mode == QlssMode::Adversarial).then_some(&adversary);
        let cov = CovApprox::build(&dyson, p, varepsilon, adv)?;
        let s_exact = cov.s_exact.clone();

        let u_b = u_b_dyson(p, u_sn);
        let mx = p.max_one_eta_t();
        let alpha_a_tilde = 1.0 + std::f64::consts::E;
        let (prefactor, kappa_a_tilde) = if cfg.padded {
            let g = 4.0 * r as f64 / mx + pad as f64;
            (1.0 / (2.0 * g * u_b), alpha_a_tilde * g)
        } else {
            (mx / (8.0 * r as f64 * u_b), 4.0 * r as f64 * alpha_a_tilde / mx)
        };
        let eps3 = alpha_a_tilde * cfg.eps / (4.0 * kappa_a_tilde);
        let qlss_raw = 2.0 * kappa_a_tilde / alpha_a_tilde * eps3;
        let dt = grid.dt;
        let eps2 = if cfg.padded {
            eta_dt * u_b * cfg.eps / 16.0
        } else {
            (dt.powi(3) / (384.0 * p.t_end)).sqrt() * p.bounds.eta * u_b * cfg.eps
        };
        let s2dt = p.bounds.sigma * p.bounds.sigma * dt;
        let plan = HistoryPlan {
            eps: cfg.eps,
            varepsilon,
            k,
            r,
            m_formula,
            m,
            pad,
            u_sn,
            u_b,
            prefactor,
            alpha_a_tilde,
            kappa_a_tilde,
            eps3,
            qlss_raw,
            phi_hat_error: phi_err,
            phi_hat_cap: phi_cap,
            sigma_error: cov.sigma_error,
            sqrt_error: cov.sqrt_error,
            sqrt_budget: varepsilon * s2dt.sqrt(),
            eps2,
        };
        let kind = if cfg.padded { SystemKind::DysonPadded } else { SystemKind::Dyson };
        let system = assemble(kind, phi_hat, pad)?;
        let exact_system = assemble(kind, phi_exact, pad)?;
        let qlss_stream = PcgStream::new(cfg.aux_seed, cfg.aux_stream ^ QLSS_STREAM_TAG);
        Ok(DysonHistory { p, cfg, plan, grid, system, exact_system, cov, s_exact, qlss_stream })
    }

    fn clipped_noise(&self, stream: &PcgStream, i: u64) -> Vec<Vec<f64>> {
        let r = self.grid.r;
        let n = self.p.n;
        let mut cur = stream.cursor((i - 1) * (r * n) as u64 + 1);
        (0..r)
            .map(|_| (0..n).map(|_| clip(cur.next_normal(), self.cfg.clip)).collect())
            .collect()
    }

    fn perturbation(&self) -> f64 {
        match self.cfg.qlss_mode {
            QlssMode::Honest => 0.0,
            QlssMode::Adversarial => self.plan.qlss_raw,
        }
    }

    /// Approximate raw history vector for sample `i >= 1`.
    pub fn sample_raw(&self, stream: &PcgStream, i: u64) -> Result<Vec<f64>> {
        let z = self.clipped_noise(stream, i);
        let noise: Vec<Vec<f64>> = z.iter().enumerate().map(|(n, zn)| self.cov.s_tilde[n].matvec(zn)).collect();
        let b = rhs(&self.p.x0, &noise, self.system.pad);
        solve(&self.system, &b, self.perturbation(), &self.qlss_stream, (i - 1) * self.system.dim() as u64)
    }

    /// Same as `sample_raw`, writing into `out` and reusing `buf` (length `N`) without allocating.
    pub fn sample_raw_into(&self, stream: &PcgStream, i: u64, out: &mut Vec<f64>, buf: &mut Vec<f64>) -> Result<()> {
        if self.perturbation() > 0.0 {
            *out = self.sample_raw(stream, i)?;
            return Ok(());
        }
        let nn = self.p.n;
        let r = self.grid.r;
        out.clear();
        out.resize(self.system.dim(), 0.0);
        buf.resize(nn, 0.0);
        out[..nn].copy_from_slice(&self.p.x0);
        let mut cur = stream.cursor((i - 1) * (r * nn) as u64 + 1);
        for n in 0..r {
            for v in buf.iter_mut() {
                *v = clip(cur.next_normal(), self.cfg.clip);
            }
            self.cov.s_tilde[n].matvec_into(buf, &mut out[(n + 1) * nn..(n + 2) * nn]);
        }
        forward_substitute(&self.system, out, buf);
        Ok(())
    }

    /// Sample `i >= 1` with its coupled exact reference and all checks.
    pub fn sample(&self, stream: &PcgStream, i: u64) -> Result<HistorySample> {
        let p = self.p;
        let nn = p.n;
        let r = self.grid.r;
        let z = self.clipped_noise(stream, i);
        let approx_noise: Vec<Vec<f64>> = z.iter().enumerate().map(|(n, zn)| self.cov.s_tilde[n].matvec(zn)).collect();
        let exact_noise: Vec<Vec<f64>> = z.iter().enumerate().map(|(n, zn)| self.s_exact[n].matvec(zn)).collect();
        let pad = self.system.pad;
        let b_approx = rhs(&p.x0, &approx_noise, pad);
        let b_exact = rhs(&p.x0, &exact_noise, pad);
        let rhs_norm = norm2(&b_approx);
        if rhs_norm > self.plan.u_b * (1.0 + 1e-12) {
            return Err(Error::BoundViolation(format!("||B~|| = {rhs_norm:.6e} exceeds U_B = {:.6e}", self.plan.u_b)));
        }
        let qlss = self.perturbation();
        let raw = solve(&self.system, &b_approx, qlss, &self.qlss_stream, (i - 1) * self.system.dim() as u64)?;
        let reference = solve(&self.exact_system, &b_exact, 0.0, &self.qlss_stream, 0)?;

        let mut noise_error: f64 = 0.0;
        for (a, e) in approx_noise.iter().zip(&exact_noise) {
            let d: Vec<f64> = a.iter().zip(e).map(|(x, y)| x - y).collect();
            noise_error = noise_error.max(norm2(&d));
        }
        let dt = self.grid.dt;
        let eta = p.bounds.eta;
        let u_b = self.plan.u_b;
        let eps = self.cfg.eps;
        let (eps1, delta_max) = if self.cfg.padded {
            let dm = approx_noise.iter().map(|d| norm2(d)).fold(0.0, f64::max);
            (eta * dt * u_b * eps / (8.0 * (p.x0_norm_sq().sqrt() + 8.0 * dm / (eta * dt))), dm)
        } else {
            let dm = exact_noise.iter().map(|d| norm2(d)).fold(0.0, f64::max);
            let denom = (p.x0_norm_sq() * eta * dt + p.t_end / dt * dm * dm).sqrt();
            ((eta * dt).powi(2) * u_b * eps / (32.0 * 6f64.sqrt()) / denom, dm)
        };
        if self.plan.phi_hat_error > eps1 {
            return Err(Error::BoundViolation(format!(
                "||Phi^ - Phi|| = {:.3e} exceeds eps1 = {eps1:.3e}",
                self.plan.phi_hat_error
            )));
        }
        if noise_error > self.plan.eps2 {
            return Err(Error::BoundViolation(format!(
                "||Delta~ - Delta|| = {noise_error:.3e} exceeds eps2 = {:.3e}",
                self.plan.eps2
            )));
        }

        let blocks = r + pad + 1;
        let mut step_deviation = Vec::with_capacity(blocks);
        for k in 0..blocks {
            let d: Vec<f64> = raw[k * nn..(k + 1) * nn].iter().zip(&reference[k * nn..(k + 1) * nn]).map(|(a, b)| a - b).collect();
            step_deviation.push(norm2(&d));
        }
        let deviation = if self.cfg.padded {
            step_deviation[r..].iter().copied().fold(0.0, f64::max)
        } else {
            step_deviation.iter().map(|v| v * v).sum::<f64>().sqrt()
        };
        let budget = u_b * eps;
        if deviation > budget {
            return Err(Error::BoundViolation(format!("history deviation {deviation:.6e} exceeds U_B eps = {budget:.6e}")));
        }
        let perturbation = qlss * rhs_norm;
        Ok(HistorySample {
            state: HistoryState { raw, prefactor: self.plan.prefactor, u_b, qlss_eps: self.plan.eps3, perturbation },
            reference,
            deviation,
            step_deviation,
            eps1,
            delta_max,
            noise_error,
            rhs_norm,
        })
    }
}

/// One verified Dyson history state for sample `i`.
pub fn history_state(p: &SdeProblem, cfg: HistoryConfig, stream: &PcgStream, i: u64) -> Result<HistorySample> {
    DysonHistory::build(p, cfg)?.sample(stream, i)
}
