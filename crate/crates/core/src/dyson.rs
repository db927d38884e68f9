//! Truncated Dyson series, approximate covariances and their square roots,
//! block-encoding bookkeeping, and the associated parameter choices.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{matmul_into, spectral_norm, sqrt_psd, sym_eigenvalues, Mat};
use crate::model::{exact_phi, exact_sigma, DriftKind, SdeProblem, TimeGrid};
use crate::prng::{clip, ClipBound, PcgStream};

/// Emulated block-encoding: the encoded matrix plus its normalization,
/// ancilla count, and accuracy.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockEncodingSpec {
    #[serde(skip)]
    pub target: Mat,
    pub alpha: f64,
    pub ancillas: u32,
    pub epsilon: f64,
}

impl BlockEncodingSpec {
    pub fn new(target: Mat, alpha: f64, ancillas: u32, epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0) || !(alpha > 0.0) {
            return Err(Error::InvalidInput(format!("need alpha > 0, epsilon >= 0 (got {alpha}, {epsilon})")));
        }
        Ok(BlockEncodingSpec { target, alpha, ancillas, epsilon })
    }
}

/// Product of two encodings: normalizations multiply, ancillas add.
pub fn be_product(a: &BlockEncodingSpec, b: &BlockEncodingSpec) -> Result<BlockEncodingSpec> {
    if a.target.cols() != b.target.rows() {
        return Err(Error::DimensionMismatch { expected: a.target.cols(), got: b.target.rows() });
    }
    Ok(BlockEncodingSpec {
        target: a.target.matmul(&b.target),
        alpha: a.alpha * b.alpha,
        ancillas: a.ancillas + b.ancillas,
        epsilon: a.alpha * b.epsilon + b.alpha * a.epsilon + a.epsilon * b.epsilon,
    })
}

/// Uniform linear combination `weight * sum_j target_j`.
pub fn be_lcu_average(specs: &[BlockEncodingSpec], weight: f64) -> Result<BlockEncodingSpec> {
    let first = specs.first().ok_or(Error::EmptyList)?;
    let (rows, cols) = (first.target.rows(), first.target.cols());
    let mut target = Mat::zeros(rows, cols);
    let mut alpha_max: f64 = 0.0;
    let mut eps_max: f64 = 0.0;
    let mut anc = 0;
    for s in specs {
        if s.target.rows() != rows || s.target.cols() != cols {
            return Err(Error::DimensionMismatch { expected: rows * cols, got: s.target.rows() * s.target.cols() });
        }
        target.axpy(weight, &s.target);
        alpha_max = alpha_max.max(s.alpha);
        eps_max = eps_max.max(s.epsilon);
        anc = anc.max(s.ancillas);
    }
    let count = specs.len();
    let lg = usize::BITS - (count - 1).leading_zeros();
    Ok(BlockEncodingSpec {
        target,
        alpha: count as f64 * weight * alpha_max,
        ancillas: anc + lg,
        epsilon: count as f64 * weight * eps_max,
    })
}

fn ceil_lg(x: usize) -> u32 {
    if x <= 1 {
        0
    } else {
        usize::BITS - (x - 1).leading_zeros()
    }
}

/// Truncation order, coarse step count, and fine step count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Krm {
    pub k: usize,
    pub r: usize,
    pub m: u64,
}

pub(crate) fn ceil_count(x: f64) -> u64 {
    if !x.is_finite() || x > 1e18 {
        u64::MAX
    } else {
        // Absorb rounding noise so exact integers are not bumped up.
        ((x * (1.0 - 1e-12)).ceil() as u64).max(1)
    }
}

fn require_unit(eps: f64, closed: bool) -> Result<()> {
    let ok = eps > 0.0 && if closed { eps <= 1.0 } else { eps < 1.0 };
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("accuracy {eps} outside the admissible range")))
    }
}

/// Smallest `(K, r, M)` for which the truncated propagators are `eps`-accurate.
pub fn choose_krm_phi(p: &SdeProblem, eps: f64) -> Result<Krm> {
    require_unit(eps, false)?;
    let b = &p.bounds;
    Ok(Krm {
        k: ((3.0 / eps).ln().ceil() as usize).max(7),
        r: ceil_count(b.alpha_a * p.t_end) as usize,
        m: ceil_count(4.0 * b.alpha_da / (b.alpha_a * b.alpha_a * eps)),
    })
}

/// Smallest `(K, r, M)` for which the approximate covariances are within `eps sigma² dt`.
pub fn choose_krm_sigma(p: &SdeProblem, eps: f64) -> Result<Krm> {
    require_unit(eps, true)?;
    let b = &p.bounds;
    let r = ceil_count(b.alpha_a * p.t_end) as usize;
    let dt = p.t_end / r as f64;
    let t1 = 24.0 * b.alpha_da / (b.alpha_a * b.alpha_a * eps);
    let t2 = 2.0 * (2.0 * b.alpha_a + b.alpha_dbbt / (b.sigma * b.sigma)) * dt / eps;
    Ok(Krm { k: ((18.0 / eps).ln().ceil() as usize).max(7), r, m: ceil_count(t1.max(t2)) })
}

/// `(lg(4 kappa ln(8/eps)) + 1)² ln(8/eps) / eps`, shared by the square-root parameters.
fn sqrt_budget_factor(kappa: f64, eps: f64) -> f64 {
    let l8 = (8.0 / eps).ln();
    let lg = (4.0 * kappa * l8).log2() + 1.0;
    lg * lg * l8 / eps
}

/// `(K_c, r_c, M_c)` for the covariance square root at accuracy `eps`.
pub fn choose_krm_sqrt(p: &SdeProblem, eps: f64) -> Result<Krm> {
    require_unit(eps, true)?;
    let kappa = p.require_dyson()?;
    let b = &p.bounds;
    let f = sqrt_budget_factor(kappa, eps);
    let pi = std::f64::consts::PI;
    let k = ((1152.0 * pi * f).ln().ceil() as usize).max(7);
    let r = ceil_count(4.0 * kappa * b.alpha_a * p.t_end) as usize;
    let lead = (24.0 * b.alpha_da / (b.alpha_a * b.alpha_a))
        .max(2.0 * (2.0 * b.alpha_a + b.alpha_dbbt / (b.sigma * b.sigma)) / b.alpha_a);
    Ok(Krm { k, r, m: ceil_count(lead * 64.0 * pi * f) })
}

/// Default ceiling on the fine grid used when the formula value is not affordable.
pub fn default_fine_cap(kind: DriftKind) -> u64 {
    match kind {
        DriftKind::Constant => 1 << 14,
        DriftKind::Commuting => 1 << 11,
        DriftKind::General => 1 << 8,
    }
}

/// Evaluator for the truncated Dyson propagators on a fixed grid.
pub struct DysonApprox<'a> {
    p: &'a SdeProblem,
    pub grid: TimeGrid,
    pub k: usize,
    /// `A^k / k!` for constant drift.
    powers: Vec<Mat>,
}

impl<'a> DysonApprox<'a> {
    pub fn new(p: &'a SdeProblem, grid: TimeGrid, k: usize) -> Self {
        let mut powers = Vec::new();
        if p.drift_kind == DriftKind::Constant {
            let a = p.a(0.0);
            powers.push(Mat::identity(p.n));
            for i in 1..=k {
                let next = a.matmul(&powers[i - 1]).scale(1.0 / i as f64);
                powers.push(next);
            }
        }
        DysonApprox { p, grid, k, powers }
    }

    /// The degree-`K` truncation of the time-ordered product of
    /// `exp(h A(tau_l))` over the fine points of `(n, j)`.
    pub fn phi(&self, n: usize, j: usize) -> Mat {
        let g = &self.grid;
        assert!(n < g.r && j < g.m, "index (n, j) = ({n}, {j}) outside the grid");
        let s = g.s(n, j);
        let span = g.t(n + 1) - s;
        let nn = self.p.n;
        match self.p.drift_kind {
            DriftKind::Constant => {
                let mut out = Mat::zeros(nn, nn);
                let mut x = 1.0;
                for pk in &self.powers {
                    out.axpy(x, pk);
                    x *= span;
                }
                out
            }
            DriftKind::Commuting => {
                let h = span / g.m as f64;
                let mut sum = Mat::zeros(nn, nn);
                for l in 0..g.m {
                    sum.axpy(1.0, &self.p.a(s + l as f64 * h));
                }
                truncated_exp(&sum.scale(h), self.k)
            }
            DriftKind::General => self.graded(s, span / g.m as f64),
        }
    }

    /// Graded product recursion: piece `k` collects all ordered products of
    /// total degree `k`. Multiplying on the left by the series of `exp(h A_l)`
    /// for ascending `l` keeps later times on the left.
    fn graded(&self, s: f64, h: f64) -> Mat {
        let nn = self.p.n;
        let k = self.k;
        let mut pieces: Vec<Mat> = (0..=k).map(|_| Mat::zeros(nn, nn)).collect();
        pieces[0] = Mat::identity(nn);
        let mut pow: Vec<Mat> = (0..=k).map(|_| Mat::zeros(nn, nn)).collect();
        let mut tmp = Mat::zeros(nn, nn);
        for l in 0..self.grid.m {
            let ha = self.p.a(s + l as f64 * h).scale(h);
            pow[0] = Mat::identity(nn);
            for c in 1..=k {
                let (lo, hi) = pow.split_at_mut(c);
                matmul_into(&ha, &lo[c - 1], &mut hi[0]);
                let inv = 1.0 / c as f64;
                hi[0].as_mut_slice().iter_mut().for_each(|v| *v *= inv);
            }
            for deg in (1..=k).rev() {
                for c in 1..=deg {
                    matmul_into(&pow[c], &pieces[deg - c], &mut tmp);
                    pieces[deg].axpy(1.0, &tmp);
                }
            }
        }
        let mut out = Mat::zeros(nn, nn);
        for piece in &pieces {
            out.axpy(1.0, piece);
        }
        out
    }

    /// Emulated encoding of the propagator with normalization `e`.
    pub fn phi_spec(&self, n: usize, j: usize) -> BlockEncodingSpec {
        let anc = self.k as u32 * (ceil_lg(self.grid.m) + ceil_lg(self.k + 1)) + 1;
        BlockEncodingSpec { target: self.phi(n, j), alpha: std::f64::consts::E, ancillas: anc, epsilon: 0.0 }
    }

    /// `sum_j Phi~_{n,j} B(s) Bᵀ(s) Phi~ᵀ_{n,j} dt_fine`.
    pub fn covariance(&self, n: usize) -> Mat {
        let g = &self.grid;
        let nn = self.p.n;
        let mut out = Mat::zeros(nn, nn);
        let bbt_const = if self.p.diffusion_constant { Some(self.p.bbt(0.0)) } else { None };
        let mut pb = Mat::zeros(nn, nn);
        let mut term = Mat::zeros(nn, nn);
        let w = g.fine_dt();
        for j in 0..g.m {
            let phi = self.phi(n, j);
            let bbt = match &bbt_const {
                Some(b) => b.clone(),
                None => self.p.bbt(g.s(n, j)),
            };
            matmul_into(&phi, &bbt, &mut pb);
            matmul_into(&pb, &phi.transpose(), &mut term);
            out.axpy(w, &term);
        }
        out.add(&out.transpose()).scale(0.5)
    }
}

/// `sum_{k <= K} X^k / k!` by Horner's rule.
pub fn truncated_exp(x: &Mat, k: usize) -> Mat {
    let nn = x.rows();
    let mut out = Mat::identity(nn);
    let mut tmp = Mat::zeros(nn, nn);
    for deg in (1..=k).rev() {
        matmul_into(x, &out, &mut tmp);
        out = Mat::identity(nn);
        out.axpy(1.0 / deg as f64, &tmp);
    }
    out
}

/// Single propagator `Phi~^{K,r,M}_{n,j}`.
pub fn truncated_dyson(p: &SdeProblem, grid: TimeGrid, k: usize, n: usize, j: usize) -> Mat {
    DysonApprox::new(p, grid, k).phi(n, j)
}

/// Single approximate covariance `Sigma~_n`.
pub fn approx_covariance(p: &SdeProblem, grid: TimeGrid, k: usize, n: usize) -> Mat {
    DysonApprox::new(p, grid, k).covariance(n)
}

/// RK4 step count used for reference propagators over a span.
pub fn reference_steps(span: f64) -> usize {
    (span * 512.0).ceil() as usize + 4
}

#[derive(Clone, Debug, Serialize)]
pub struct ErrorReport {
    pub model: String,
    pub eps_target: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub r: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub measured_error: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Measures `max_{n,j} ||Phi~_{n,j} - Phi(t_{n+1}, s_{n,j})||` against `eps`.
pub fn dyson_error_bound_check(p: &SdeProblem, grid: TimeGrid, k: usize, eps: f64) -> Result<ErrorReport> {
    let d = DysonApprox::new(p, grid, k);
    let mut worst: f64 = 0.0;
    for n in 0..grid.r {
        let t1 = grid.t(n + 1);
        for j in 0..grid.m {
            let s = grid.s(n, j);
            let exact = exact_phi(p, s, t1, reference_steps(t1 - s))?;
            worst = worst.max(spectral_norm(&d.phi(n, j).sub(&exact))?);
        }
    }
    Ok(ErrorReport {
        model: p.name.clone(),
        eps_target: eps,
        k,
        r: grid.r,
        m: grid.m,
        measured_error: worst,
        bound: eps,
        pass: worst <= eps,
    })
}

/// Exact step covariance `Sigma_n = Sigma(t_{n+1}, t_n)`.
pub fn exact_step_sigma(p: &SdeProblem, grid: &TimeGrid, n: usize) -> Result<Mat> {
    exact_sigma(p, grid.t(n), grid.t(n + 1), 32)
}

/// Measures `max_n ||Sigma~_n - Sigma_n||` against `eps sigma² dt`.
pub fn covariance_error_check(p: &SdeProblem, grid: TimeGrid, k: usize, eps: f64) -> Result<ErrorReport> {
    let d = DysonApprox::new(p, grid, k);
    let mut worst: f64 = 0.0;
    for n in 0..grid.r {
        let diff = d.covariance(n).sub(&exact_step_sigma(p, &grid, n)?);
        worst = worst.max(spectral_norm(&diff)?);
    }
    let bound = eps * p.bounds.sigma * p.bounds.sigma * grid.dt;
    Ok(ErrorReport {
        model: p.name.clone(),
        eps_target: eps,
        k,
        r: grid.r,
        m: grid.m,
        measured_error: worst,
        bound,
        pass: worst <= bound,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ContainmentReport {
    pub model: String,
    pub r: usize,
    pub lower: f64,
    pub upper: f64,
    pub min_eig: f64,
    pub max_eig: f64,
    pub pass: bool,
}

/// Absolute eigenvalue slack for containment checks.
pub const CONTAINMENT_SLACK: f64 = 1e-10;

/// Eigenvalues of every exact `Sigma_n` against `[sigma² dt/(2 kappa), sigma² dt]`.
pub fn eigen_containment(p: &SdeProblem, r: usize) -> Result<ContainmentReport> {
    let kappa = p.require_dyson()?;
    let grid = TimeGrid::new(p.t_end, r, 1);
    let s2dt = p.bounds.sigma * p.bounds.sigma * grid.dt;
    let (lower, upper) = (s2dt / (2.0 * kappa), s2dt);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for n in 0..r {
        let ev = sym_eigenvalues(&exact_step_sigma(p, &grid, n)?)?;
        lo = lo.min(ev[0]);
        hi = hi.max(*ev.last().unwrap());
    }
    Ok(ContainmentReport {
        model: p.name.clone(),
        r,
        lower,
        upper,
        min_eig: lo,
        max_eig: hi,
        pass: lo >= lower - CONTAINMENT_SLACK && hi <= upper + CONTAINMENT_SLACK,
    })
}

/// Root of an approximate covariance with its emulated encoding.
///
/// The eigenvalues of `cov` must lie in the containment interval widened by
/// `CONTAINMENT_SLACK + eps sigma² dt` (the approximation error allowed on `cov`).
/// The result is checked against the root of the exact step covariance.
pub fn sqrt_with_budget(
    cov: &Mat,
    p: &SdeProblem,
    grid: &TimeGrid,
    n: usize,
    eps: f64,
) -> Result<(Mat, BlockEncodingSpec)> {
    let s_exact = sqrt_psd(&exact_step_sigma(p, grid, n)?, 1e-12)?;
    let (s_tilde, spec, err) = contained_sqrt(cov, &s_exact, p, grid, n, eps)?;
    if err > spec.epsilon {
        return Err(Error::BoundViolation(format!(
            "step {n}: ||S~ - S|| = {err:.3e} exceeds eps sqrt(sigma² dt) = {:.3e}",
            spec.epsilon
        )));
    }
    Ok((s_tilde, spec))
}

/// Containment check and root of `cov`, returning the measured error against `s_exact`.
fn contained_sqrt(
    cov: &Mat,
    s_exact: &Mat,
    p: &SdeProblem,
    grid: &TimeGrid,
    n: usize,
    eps: f64,
) -> Result<(Mat, BlockEncodingSpec, f64)> {
    let kappa = p.require_dyson()?;
    let s2dt = p.bounds.sigma * p.bounds.sigma * grid.dt;
    let slack = CONTAINMENT_SLACK + eps * s2dt;
    let ev = sym_eigenvalues(cov)?;
    let (lo, hi) = (ev[0], *ev.last().unwrap());
    if lo < s2dt / (2.0 * kappa) - slack || hi > s2dt + slack {
        return Err(Error::Containment(format!(
            "step {n}: covariance eigenvalues [{lo:.6e}, {hi:.6e}] leave [{:.6e}, {:.6e}]; \
             the step count must satisfy r >= 4 kappa alpha_A T",
            s2dt / (2.0 * kappa),
            s2dt
        )));
    }
    let s_tilde = sqrt_psd(cov, slack.max(1e-12))?;
    let err = spectral_norm(&s_tilde.sub(s_exact))?;
    let spec = BlockEncodingSpec {
        target: s_tilde.clone(),
        alpha: 2.0 * s2dt.sqrt(),
        ancillas: 0,
        epsilon: eps * s2dt.sqrt(),
    };
    Ok((s_tilde, spec, err))
}

/// Random symmetric matrix with unit spectral norm drawn from `stream` at `offset`.
pub fn random_symmetric_unit(n: usize, stream: &PcgStream, offset: u64) -> Result<Mat> {
    let mut c = stream.cursor(offset + 1);
    let mut g = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            g[(i, j)] = c.next_normal();
        }
    }
    let sym = g.add(&g.transpose());
    let nrm = spectral_norm(&sym)?;
    Ok(sym.scale(1.0 / nrm))
}

/// Approximate covariances and roots for every coarse step.
#[derive(Clone, Debug)]
pub struct CovApprox {
    pub sigma_tilde: Vec<Mat>,
    pub s_tilde: Vec<Mat>,
    /// Roots of the exact step covariances.
    pub s_exact: Vec<Mat>,
    pub be_sigma: Vec<BlockEncodingSpec>,
    pub be_sqrt: Vec<BlockEncodingSpec>,
    /// `max_n ||Sigma~_n - Sigma_n||`.
    pub sigma_error: f64,
    /// `max_n ||S~_n - S_n||` after any injected perturbation.
    pub sqrt_error: f64,
}

impl CovApprox {
    /// Builds `Sigma~_n` and `S~_n` for all `n`. With `adversary`, each root is
    /// replaced by `S_n + eps sqrt(sigma² dt) P_n` for a random unit symmetric
    /// `P_n`, putting the root error exactly at its budget.
    pub fn build(d: &DysonApprox, p: &SdeProblem, eps: f64, adversary: Option<&PcgStream>) -> Result<Self> {
        let grid = d.grid;
        let s2 = p.bounds.sigma * p.bounds.sigma;
        let s2dt = s2 * grid.dt;
        let mut out = CovApprox {
            sigma_tilde: Vec::with_capacity(grid.r),
            s_tilde: Vec::with_capacity(grid.r),
            be_sigma: Vec::with_capacity(grid.r),
            be_sqrt: Vec::with_capacity(grid.r),
            s_exact: Vec::with_capacity(grid.r),
            sigma_error: 0.0,
            sqrt_error: 0.0,
        };
        // With constant drift and diffusion every step has the same covariance.
        let shared = p.drift_kind == DriftKind::Constant && p.diffusion_constant;
        let mut cached: Option<(Mat, Mat, Mat, BlockEncodingSpec, f64, f64)> = None;
        for n in 0..grid.r {
            let (cov, s_exact, root, spec, cov_err, root_err) = match (&cached, shared) {
                (Some(c), true) => c.clone(),
                _ => {
                    let cov = d.covariance(n);
                    let exact = exact_step_sigma(p, &grid, n)?;
                    let cov_err = spectral_norm(&cov.sub(&exact))?;
                    let s_exact = sqrt_psd(&exact, 1e-12)?;
                    let (root, spec, root_err) = contained_sqrt(&cov, &s_exact, p, &grid, n, eps)?;
                    let entry = (cov, s_exact, root, spec, cov_err, root_err);
                    if shared {
                        cached = Some(entry.clone());
                    }
                    entry
                }
            };
            out.sigma_error = out.sigma_error.max(cov_err);
            let s_tilde = match adversary {
                Some(stream) => {
                    let pert = random_symmetric_unit(p.n, stream, (n * p.n * p.n) as u64)?;
                    s_exact.add(&pert.scale(eps * s2dt.sqrt()))
                }
                None => root,
            };
            let err = if adversary.is_some() { spectral_norm(&s_tilde.sub(&s_exact))? } else { root_err };
            out.sqrt_error = out.sqrt_error.max(err);
            out.s_exact.push(s_exact);
            let e2 = std::f64::consts::E * std::f64::consts::E;
            out.be_sigma.push(BlockEncodingSpec { target: cov.clone(), alpha: e2 * s2dt, ancillas: spec.ancillas, epsilon: 0.0 });
            out.be_sqrt.push(BlockEncodingSpec { target: s_tilde.clone(), ..spec });
            out.sigma_tilde.push(cov);
            out.s_tilde.push(s_tilde);
        }
        Ok(out)
    }
}

/// `Delta~^{(i)}_n = S~_n clip(z^{(i)}_n)` together with its amplitude
/// normalization `1/(2 sqrt(N sigma² dt) U_SN)`.
pub fn noise_sample(
    p: &SdeProblem,
    grid: &TimeGrid,
    cov: &CovApprox,
    stream: &PcgStream,
    i: u64,
    n: usize,
    clip_bound: ClipBound,
) -> (Vec<f64>, f64) {
    let z: Vec<f64> = stream
        .noise_vector(i, n as u64, p.n, grid.r as u64)
        .into_iter()
        .map(|v| clip(v, clip_bound))
        .collect();
    let s2dt = p.bounds.sigma * p.bounds.sigma * grid.dt;
    let norm = 1.0 / (2.0 * (p.n as f64 * s2dt).sqrt() * clip_bound.u_sn);
    (cov.s_tilde[n].matvec(&z), norm)
}
