//! SDE problems `dX = A(t) X dt + B(t) dW`, their bound constants, time grids,
//! and independent reference solutions.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{log_norm, matrix_exp, spectral_norm, sym_eigenvalues, Mat};

pub type MatFn = Arc<dyn Fn(f64) -> Mat + Send + Sync>;

/// How the drift depends on time. Drives the choice of Dyson evaluation path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftKind {
    Constant,
    /// `A(s)` and `A(t)` commute for all `s, t`, so time ordering is irrelevant.
    Commuting,
    General,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    #[serde(rename = "alpha_A")]
    pub alpha_a: f64,
    pub eta: f64,
    pub sigma: f64,
    #[serde(rename = "kappa_BBT", default)]
    pub kappa_bbt: Option<f64>,
    #[serde(rename = "alpha_dA", default)]
    pub alpha_da: f64,
    #[serde(rename = "alpha_dBBT", default)]
    pub alpha_dbbt: f64,
}

/// Per-component data for models with diagonal drift and independent noise
/// channels; enables closed-form moments.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalOu {
    pub theta: Vec<f64>,
    pub sigma_b: Vec<f64>,
}

#[derive(Clone)]
pub struct SdeProblem {
    pub name: String,
    pub n: usize,
    pub m: usize,
    pub t_end: f64,
    pub drift: MatFn,
    pub diffusion: MatFn,
    pub x0: Vec<f64>,
    pub bounds: Bounds,
    pub drift_kind: DriftKind,
    pub diffusion_constant: bool,
    pub diagonal_ou: Option<DiagonalOu>,
}

impl fmt::Debug for SdeProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeProblem")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("m", &self.m)
            .field("t_end", &self.t_end)
            .field("x0", &self.x0)
            .field("bounds", &self.bounds)
            .field("drift_kind", &self.drift_kind)
            .finish()
    }
}

impl SdeProblem {
    /// Checks the structural invariants.
    pub fn validated(self) -> Result<Self> {
        let b = &self.bounds;
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(Error::InvalidInput(format!("horizon T = {} must be positive", self.t_end)));
        }
        if self.n == 0 || self.m == 0 || self.m > self.n {
            return Err(Error::InvalidInput(format!("need 1 <= m <= N, got N={}, m={}", self.n, self.m)));
        }
        if !(b.eta > 0.0) || b.eta > b.alpha_a {
            return Err(Error::InvalidInput(format!(
                "need 0 < eta <= alpha_A, got eta={}, alpha_A={}",
                b.eta, b.alpha_a
            )));
        }
        if !(b.sigma > 0.0) || b.alpha_da < 0.0 || b.alpha_dbbt < 0.0 {
            return Err(Error::InvalidInput("sigma must be positive and derivative bounds nonnegative".into()));
        }
        if let Some(k) = b.kappa_bbt {
            if !(k >= 1.0) {
                return Err(Error::InvalidInput(format!("kappa_BBT = {k} must be >= 1")));
            }
        }
        if self.x0.len() != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, got: self.x0.len() });
        }
        let a = (self.drift)(0.0);
        if a.rows() != self.n || a.cols() != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, got: a.rows() });
        }
        let bm = (self.diffusion)(0.0);
        if bm.rows() != self.n || bm.cols() != self.m {
            return Err(Error::DimensionMismatch { expected: self.m, got: bm.cols() });
        }
        Ok(self)
    }

    pub fn a(&self, t: f64) -> Mat {
        (self.drift)(t)
    }

    pub fn b(&self, t: f64) -> Mat {
        (self.diffusion)(t)
    }

    pub fn bbt(&self, t: f64) -> Mat {
        let b = self.b(t);
        b.matmul(&b.transpose())
    }

    pub fn x0_norm_sq(&self) -> f64 {
        self.x0.iter().map(|v| v * v).sum()
    }

    /// `max{1, eta T}`.
    pub fn max_one_eta_t(&self) -> f64 {
        (self.bounds.eta * self.t_end).max(1.0)
    }

    /// Fails unless `B Bᵀ` has a declared eigenvalue range, as the Dyson method requires.
    pub fn require_dyson(&self) -> Result<f64> {
        self.bounds.kappa_bbt.ok_or_else(|| {
            Error::AssumptionViolated(format!(
                "model '{}': B Bᵀ is not full rank (no kappa_BBT); the Dyson method needs \
                 eigenvalues of B Bᵀ in [sigma²/kappa, sigma²]",
                self.name
            ))
        })
    }
}

/// Uniform coarse grid with an optional fine subdivision.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    pub r: usize,
    pub m: usize,
    pub t_end: f64,
    pub dt: f64,
}

impl TimeGrid {
    pub fn new(t_end: f64, r: usize, m: usize) -> Self {
        assert!(r >= 1 && m >= 1);
        TimeGrid { r, m, t_end, dt: t_end / r as f64 }
    }

    pub fn t(&self, n: usize) -> f64 {
        if n == self.r {
            self.t_end
        } else {
            n as f64 * self.dt
        }
    }

    pub fn fine_dt(&self) -> f64 {
        self.dt / self.m as f64
    }

    pub fn s(&self, n: usize, j: usize) -> f64 {
        self.t(n) + j as f64 * self.fine_dt()
    }

    pub fn tau(&self, n: usize, j: usize, l: usize) -> f64 {
        let s = self.s(n, j);
        s + l as f64 * (self.t(n + 1) - s) / self.m as f64
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundsReport {
    pub model: String,
    pub samples: usize,
    pub max_norm_a: f64,
    pub max_log_norm_a: f64,
    pub max_norm_da: f64,
    pub min_eig_bbt: f64,
    pub max_eig_bbt: f64,
    pub max_norm_dbbt: f64,
    pub violations: Vec<String>,
    pub pass: bool,
}

/// Samples the declared bounds on a uniform grid. Violations are collected, not raised.
pub fn validate_bounds(p: &SdeProblem, samples: usize) -> Result<BoundsReport> {
    if samples < 2 {
        return Err(Error::InvalidInput("need at least 2 samples".into()));
    }
    let b = &p.bounds;
    let slack = |v: f64| v * (1.0 + 1e-10) + 1e-12;
    let fd = 1e-6 * p.t_end;
    let mut rep = BoundsReport {
        model: p.name.clone(),
        samples,
        max_norm_a: 0.0,
        max_log_norm_a: f64::NEG_INFINITY,
        max_norm_da: 0.0,
        min_eig_bbt: f64::INFINITY,
        max_eig_bbt: f64::NEG_INFINITY,
        max_norm_dbbt: 0.0,
        violations: Vec::new(),
        pass: true,
    };
    for k in 0..samples {
        let t = p.t_end * k as f64 / (samples - 1) as f64;
        let a = p.a(t);
        let na = spectral_norm(&a)?;
        let mu = log_norm(&a)?;
        let (lo, hi) = ((t - fd).max(0.0), (t + fd).min(p.t_end));
        let da = spectral_norm(&p.a(hi).sub(&p.a(lo)).scale(1.0 / (hi - lo)))?;
        let dbbt = spectral_norm(&p.bbt(hi).sub(&p.bbt(lo)).scale(1.0 / (hi - lo)))?;
        let ev = sym_eigenvalues(&p.bbt(t))?;
        rep.max_norm_a = rep.max_norm_a.max(na);
        rep.max_log_norm_a = rep.max_log_norm_a.max(mu);
        rep.max_norm_da = rep.max_norm_da.max(da);
        rep.max_norm_dbbt = rep.max_norm_dbbt.max(dbbt);
        rep.min_eig_bbt = rep.min_eig_bbt.min(ev[0]);
        rep.max_eig_bbt = rep.max_eig_bbt.max(*ev.last().unwrap());
        if na > slack(b.alpha_a) {
            rep.violations.push(format!("t={t}: ||A|| = {na} > alpha_A = {}", b.alpha_a));
        }
        if mu > -b.eta + 1e-12 * b.eta.max(1.0) {
            rep.violations.push(format!("t={t}: mu(A) = {mu} > -eta = {}", -b.eta));
        }
        // Finite differences carry O(fd) error; allow a matching slack.
        if da > slack(b.alpha_da) + 1e-5 {
            rep.violations.push(format!("t={t}: ||dA/dt|| = {da} > alpha_dA = {}", b.alpha_da));
        }
        if dbbt > slack(b.alpha_dbbt) + 1e-5 {
            rep.violations.push(format!("t={t}: ||d(BBᵀ)/dt|| = {dbbt} > alpha_dBBT = {}", b.alpha_dbbt));
        }
        let s2 = b.sigma * b.sigma;
        if *ev.last().unwrap() > slack(s2) {
            rep.violations.push(format!("t={t}: lambda_max(BBᵀ) = {} > sigma² = {s2}", ev.last().unwrap()));
        }
        if let Some(kappa) = b.kappa_bbt {
            if ev[0] < s2 / kappa * (1.0 - 1e-10) - 1e-12 {
                rep.violations.push(format!("t={t}: lambda_min(BBᵀ) = {} < sigma²/kappa = {}", ev[0], s2 / kappa));
            }
        }
    }
    rep.pass = rep.violations.is_empty();
    Ok(rep)
}

/// Extends the state dimension to the next power of two. The extra drift block
/// is `-eta I` (keeps the dissipativity bound) and the diffusion gains zero rows,
/// so padded components start and stay at 0.
pub fn pad_to_power_of_two(p: &SdeProblem) -> SdeProblem {
    let np = p.n.next_power_of_two();
    if np == p.n {
        return p.clone();
    }
    let extra = np - p.n;
    let eta = p.bounds.eta;
    let drift = p.drift.clone();
    let diffusion = p.diffusion.clone();
    let n = p.n;
    let m = p.m;
    let mut x0 = p.x0.clone();
    x0.resize(np, 0.0);
    let diagonal_ou = p.diagonal_ou.as_ref().map(|d| {
        let mut theta = d.theta.clone();
        theta.resize(np, eta);
        let mut sigma_b = d.sigma_b.clone();
        sigma_b.resize(np, 0.0);
        DiagonalOu { theta, sigma_b }
    });
    SdeProblem {
        name: format!("{}-padded{}", p.name, np),
        n: np,
        m,
        t_end: p.t_end,
        drift: Arc::new(move |t| drift(t).block_diag(&Mat::identity(extra).scale(-eta))),
        diffusion: Arc::new(move |t| {
            let mut out = Mat::zeros(n + extra, m);
            out.set_block(0, 0, &diffusion(t));
            out
        }),
        x0,
        bounds: Bounds { kappa_bbt: None, ..p.bounds },
        drift_kind: p.drift_kind,
        diffusion_constant: p.diffusion_constant,
        diagonal_ou,
    }
}

fn check_interval(p: &SdeProblem, s: f64, t: f64) -> Result<()> {
    if s > t || s < 0.0 || t > p.t_end * (1.0 + 1e-12) {
        return Err(Error::InvalidInterval { s, t });
    }
    Ok(())
}

/// Propagator `Phi(t, s)`. Constant drift uses the matrix exponential; otherwise
/// classical RK4 on `dPhi/dt = A(t) Phi` with `steps` steps.
pub fn exact_phi(p: &SdeProblem, s: f64, t: f64, steps: usize) -> Result<Mat> {
    check_interval(p, s, t)?;
    if s == t {
        return Ok(Mat::identity(p.n));
    }
    if p.drift_kind == DriftKind::Constant {
        return matrix_exp(&p.a(0.0).scale(t - s));
    }
    Ok(rk4_phi(p, s, t, steps.max(1)))
}

fn rk4_phi(p: &SdeProblem, s: f64, t: f64, steps: usize) -> Mat {
    let h = (t - s) / steps as f64;
    let mut phi = Mat::identity(p.n);
    for k in 0..steps {
        let tk = s + k as f64 * h;
        let a0 = p.a(tk);
        let am = p.a(tk + 0.5 * h);
        let a1 = p.a(tk + h);
        let k1 = a0.matmul(&phi);
        let mut y = phi.clone();
        y.axpy(0.5 * h, &k1);
        let k2 = am.matmul(&y);
        let mut y = phi.clone();
        y.axpy(0.5 * h, &k2);
        let k3 = am.matmul(&y);
        let mut y = phi.clone();
        y.axpy(h, &k3);
        let k4 = a1.matmul(&y);
        phi.axpy(h / 6.0, &k1);
        phi.axpy(h / 3.0, &k2);
        phi.axpy(h / 3.0, &k3);
        phi.axpy(h / 6.0, &k4);
    }
    phi
}

/// Gauss-Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, 0.0);
            for k in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * k + 1) as f64 * z * p1 - k as f64 * p2) / (k + 1) as f64;
            }
            dp = n as f64 * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Covariance `Sigma(t, s) = ∫_s^t Phi(t,u) B Bᵀ Phiᵀ(t,u) du` by composite
/// Gauss-Legendre with `quad_points` nodes per panel of length at most one.
pub fn exact_sigma(p: &SdeProblem, s: f64, t: f64, quad_points: usize) -> Result<Mat> {
    check_interval(p, s, t)?;
    let mut out = Mat::zeros(p.n, p.n);
    if s == t {
        return Ok(out);
    }
    let (xs, ws) = gauss_legendre(quad_points.max(1));
    let panels = (t - s).ceil().max(1.0) as usize;
    let plen = (t - s) / panels as f64;
    for k in 0..panels {
        let a = s + k as f64 * plen;
        for (x, w) in xs.iter().zip(&ws) {
            let u = a + 0.5 * plen * (x + 1.0);
            let steps = ((t - u) * 256.0).ceil() as usize + 8;
            let phi = exact_phi(p, u, t, steps)?;
            let pb = phi.matmul(&p.b(u));
            out.axpy(0.5 * plen * w, &pb.matmul(&pb.transpose()));
        }
    }
    let sym = out.add(&out.transpose()).scale(0.5);
    Ok(sym)
}

/// Mean and variance of the scalar OU process `dX = -theta X dt + sigma_b dW`.
pub fn ou_analytic_moments(theta: f64, sigma_b: f64, x0: f64, t: f64) -> (f64, f64) {
    assert!(theta > 0.0);
    let mean = (-theta * t).exp() * x0;
    let var = sigma_b * sigma_b * (-(-2.0 * theta * t).exp_m1()) / (2.0 * theta);
    (mean, var)
}

impl DiagonalOu {
    pub fn mean(&self, x0: &[f64], comp: usize, t: f64) -> f64 {
        (-self.theta[comp] * t).exp() * x0[comp]
    }

    /// `Cov(X_s^i, X_t^j)`; components are independent.
    pub fn cov(&self, ci: usize, s: f64, cj: usize, t: f64) -> f64 {
        if ci != cj {
            return 0.0;
        }
        let (lo, hi) = if s <= t { (s, t) } else { (t, s) };
        let th = self.theta[ci];
        let (_, var) = ou_analytic_moments(th, self.sigma_b[ci], 0.0, lo);
        (-th * (hi - lo)).exp() * var
    }
}

pub const BUILTIN_MODELS: [&str; 5] = ["ou", "diag-ou", "rotating", "time-dependent", "ou-degenerate"];

/// Diagonal OU with `B = diag(sigma_b)`.
pub fn diag_ou(name: &str, theta: &[f64], sigma_b: &[f64], x0: &[f64], t_end: f64) -> Result<SdeProblem> {
    let n = theta.len();
    if sigma_b.len() != n || x0.len() != n || n == 0 {
        return Err(Error::InvalidInput("theta, sigma_b and x0 must have equal nonzero length".into()));
    }
    if theta.iter().any(|&t| !(t > 0.0)) || sigma_b.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidInput("theta and sigma_b entries must be positive".into()));
    }
    let a = Mat::from_diag(&theta.iter().map(|t| -t).collect::<Vec<_>>());
    let b = Mat::from_diag(sigma_b);
    let smax = sigma_b.iter().copied().fold(0.0, f64::max);
    let smin = sigma_b.iter().copied().fold(f64::INFINITY, f64::min);
    SdeProblem {
        name: name.into(),
        n,
        m: n,
        t_end,
        drift: Arc::new(move |_| a.clone()),
        diffusion: Arc::new(move |_| b.clone()),
        x0: x0.to_vec(),
        bounds: Bounds {
            alpha_a: theta.iter().copied().fold(0.0, f64::max),
            eta: theta.iter().copied().fold(f64::INFINITY, f64::min),
            sigma: smax,
            kappa_bbt: Some((smax / smin).powi(2)),
            alpha_da: 0.0,
            alpha_dbbt: 0.0,
        },
        drift_kind: DriftKind::Constant,
        diffusion_constant: true,
        diagonal_ou: Some(DiagonalOu { theta: theta.to_vec(), sigma_b: sigma_b.to_vec() }),
    }
    .validated()
}

/// `A = -eta I + omega J` with `J` a block-diagonal rotation generator; `B = I`.
pub fn rotating(n: usize, eta: f64, omega: f64, x0: &[f64], t_end: f64) -> Result<SdeProblem> {
    if n % 2 != 0 {
        return Err(Error::InvalidInput("rotating model needs even N".into()));
    }
    let mut a = Mat::identity(n).scale(-eta);
    for k in (0..n).step_by(2) {
        a[(k, k + 1)] = omega;
        a[(k + 1, k)] = -omega;
    }
    SdeProblem {
        name: "rotating".into(),
        n,
        m: n,
        t_end,
        drift: Arc::new(move |_| a.clone()),
        diffusion: Arc::new(move |_| Mat::identity(n)),
        x0: x0.to_vec(),
        bounds: Bounds {
            alpha_a: (eta * eta + omega * omega).sqrt(),
            eta,
            sigma: 1.0,
            kappa_bbt: Some(1.0),
            alpha_da: 0.0,
            alpha_dbbt: 0.0,
        },
        drift_kind: DriftKind::Constant,
        diffusion_constant: true,
        diagonal_ou: None,
    }
    .validated()
}

/// Scalar model `A(t) = -(1 + t/2)`, `B(t) = sqrt(1 + t/2)` on `[0, 1]`.
pub fn time_dependent() -> Result<SdeProblem> {
    SdeProblem {
        name: "time-dependent".into(),
        n: 1,
        m: 1,
        t_end: 1.0,
        drift: Arc::new(|t| Mat::scalar(-(1.0 + 0.5 * t))),
        diffusion: Arc::new(|t| Mat::scalar((1.0 + 0.5 * t).sqrt())),
        x0: vec![1.0],
        bounds: Bounds {
            alpha_a: 1.5,
            eta: 1.0,
            sigma: 1.5f64.sqrt(),
            kappa_bbt: Some(1.5),
            alpha_da: 0.5,
            alpha_dbbt: 0.5,
        },
        drift_kind: DriftKind::Commuting,
        diffusion_constant: false,
        diagonal_ou: None,
    }
    .validated()
}

/// OU in `N = 4` driven by a single Brownian motion on the first component.
pub fn ou_degenerate() -> Result<SdeProblem> {
    let n = 4;
    let theta = 1.0;
    let mut b = Mat::zeros(n, 1);
    b[(0, 0)] = 1.0;
    SdeProblem {
        name: "ou-degenerate".into(),
        n,
        m: 1,
        t_end: 1.0,
        drift: Arc::new(move |_| Mat::identity(n).scale(-theta)),
        diffusion: Arc::new(move |_| b.clone()),
        x0: vec![1.0; n],
        bounds: Bounds { alpha_a: theta, eta: theta, sigma: 1.0, kappa_bbt: None, alpha_da: 0.0, alpha_dbbt: 0.0 },
        drift_kind: DriftKind::Constant,
        diffusion_constant: true,
        diagonal_ou: Some(DiagonalOu { theta: vec![theta; n], sigma_b: vec![1.0, 0.0, 0.0, 0.0] }),
    }
    .validated()
}

pub fn builtin(name: &str) -> Result<SdeProblem> {
    match name {
        "ou" => diag_ou("ou", &[1.0], &[1.0], &[1.0], 1.0),
        "diag-ou" => diag_ou("diag-ou", &[1.0, 1.25, 1.5, 1.75], &[1.0; 4], &[1.0; 4], 1.0),
        "rotating" => rotating(4, 1.0, 2.0, &[1.0, 0.0, 1.0, 0.0], 1.0),
        "time-dependent" => time_dependent(),
        "ou-degenerate" => ou_degenerate(),
        other => Err(Error::Config(format!(
            "unknown model '{other}'; built-in models: {}",
            BUILTIN_MODELS.join(", ")
        ))),
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDoc {
    #[serde(rename = "N")]
    pub n: usize,
    pub m: usize,
    #[serde(rename = "T")]
    pub t_end: f64,
    pub x0: Vec<f64>,
    pub model: ModelKind,
    pub bounds: Bounds,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelKind {
    /// Constant `A` (N×N) and `B` (N×m).
    Constant {
        #[serde(rename = "A")]
        a: Vec<Vec<f64>>,
        #[serde(rename = "B")]
        b: Vec<Vec<f64>>,
    },
    /// `A(t) = A0 + t A1`, `B(t) = B0 + t B1`.
    Affine {
        #[serde(rename = "A0")]
        a0: Vec<Vec<f64>>,
        #[serde(rename = "A1")]
        a1: Vec<Vec<f64>>,
        #[serde(rename = "B0")]
        b0: Vec<Vec<f64>>,
        #[serde(rename = "B1")]
        b1: Vec<Vec<f64>>,
    },
}

impl ModelDoc {
    pub fn into_problem(self, name: &str) -> Result<SdeProblem> {
        let (drift, diffusion, drift_kind, diffusion_constant): (MatFn, MatFn, DriftKind, bool) = match self.model {
            ModelKind::Constant { a, b } => {
                let a = Mat::from_rows(&a)?;
                let b = Mat::from_rows(&b)?;
                (Arc::new(move |_| a.clone()), Arc::new(move |_| b.clone()), DriftKind::Constant, true)
            }
            ModelKind::Affine { a0, a1, b0, b1 } => {
                let a0 = Mat::from_rows(&a0)?;
                let a1 = Mat::from_rows(&a1)?;
                let b0 = Mat::from_rows(&b0)?;
                let b1 = Mat::from_rows(&b1)?;
                if a0.rows() != a1.rows() || a0.cols() != a1.cols() || b0.rows() != b1.rows() || b0.cols() != b1.cols() {
                    return Err(Error::Config("affine model: A0/A1 and B0/B1 shapes must match".into()));
                }
                let comm = a0.matmul(&a1).sub(&a1.matmul(&a0)).max_abs();
                let kind = if a1.max_abs() == 0.0 {
                    DriftKind::Constant
                } else if comm <= 1e-14 * (1.0 + a0.max_abs() * a1.max_abs()) {
                    DriftKind::Commuting
                } else {
                    DriftKind::General
                };
                let bconst = b1.max_abs() == 0.0;
                let mut a1c = a1;
                let mut b1c = b1;
                if kind == DriftKind::Constant {
                    a1c = Mat::zeros(a0.rows(), a0.cols());
                }
                if bconst {
                    b1c = Mat::zeros(b0.rows(), b0.cols());
                }
                (
                    Arc::new(move |t| {
                        let mut m = a0.clone();
                        m.axpy(t, &a1c);
                        m
                    }),
                    Arc::new(move |t| {
                        let mut m = b0.clone();
                        m.axpy(t, &b1c);
                        m
                    }),
                    kind,
                    bconst,
                )
            }
        };
        SdeProblem {
            name: name.into(),
            n: self.n,
            m: self.m,
            t_end: self.t_end,
            drift,
            diffusion,
            x0: self.x0,
            bounds: self.bounds,
            drift_kind,
            diffusion_constant,
            diagonal_ou: None,
        }
        .validated()
        .map_err(|e| match e {
            Error::InvalidInput(s) | Error::Config(s) => Error::Config(s),
            Error::DimensionMismatch { expected, got } => {
                Error::Config(format!("model dimensions inconsistent: expected {expected}, got {got}"))
            }
            other => other,
        })
    }
}

/// Resolves a built-in name or a path to a JSON model document.
pub fn load_model(source: &str) -> Result<SdeProblem> {
    if BUILTIN_MODELS.contains(&source) {
        return builtin(source);
    }
    let path = std::path::Path::new(source);
    if !path.exists() {
        return builtin(source);
    }
    let text = std::fs::read_to_string(path)?;
    let doc: ModelDoc = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{source}: {e}")))?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("custom");
    doc.into_problem(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_endpoints() {
        let g = TimeGrid::new(1.0, 3, 4);
        assert_eq!(g.t(0), 0.0);
        assert_eq!(g.t(3), 1.0);
        assert_eq!(g.s(1, 0), g.t(1));
        assert!((g.tau(0, 0, 4) - g.t(1)).abs() < 1e-15);
        assert!((g.s(0, 2) - 2.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn validate_ou_passes() {
        let rep = validate_bounds(&builtin("ou").unwrap(), 11).unwrap();
        assert!(rep.pass, "{:?}", rep.violations);
    }

    #[test]
    fn validate_catches_eta() {
        let mut p = builtin("ou").unwrap();
        p.bounds.eta = 2.0;
        p.bounds.alpha_a = 2.0;
        let rep = validate_bounds(&p, 5).unwrap();
        assert!(!rep.pass);
        assert!(rep.violations.iter().any(|v| v.contains("mu(A)")));
    }

    #[test]
    fn validate_all_builtins() {
        for name in BUILTIN_MODELS {
            let rep = validate_bounds(&builtin(name).unwrap(), 33).unwrap();
            assert!(rep.pass, "{name}: {:?}", rep.violations);
        }
    }

    #[test]
    fn invariants_enforced() {
        let mut p = builtin("ou").unwrap();
        p.bounds.eta = 3.0;
        assert!(p.validated().is_err());
        assert!(diag_ou("x", &[1.0], &[1.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn pad_examples() {
        let p4 = builtin("diag-ou").unwrap();
        assert_eq!(pad_to_power_of_two(&p4).n, 4);
        let p3 = diag_ou("d3", &[1.0, 2.0, 3.0], &[1.0; 3], &[1.0; 3], 1.0).unwrap();
        let q = pad_to_power_of_two(&p3);
        assert_eq!(q.n, 4);
        assert_eq!(q.b(0.0).cols(), 3);
        assert_eq!(q.a(0.3)[(3, 3)], -1.0);
        assert_eq!(q.x0[3], 0.0);
        assert!(validate_bounds(&q, 5).unwrap().pass);
        let phi = exact_phi(&q, 0.0, 1.0, 1).unwrap();
        let x: Vec<f64> = phi.matvec(&q.x0);
        assert_eq!(x[3], 0.0);
    }

    #[test]
    fn phi_examples() {
        let p = builtin("ou").unwrap();
        assert_eq!(exact_phi(&p, 0.4, 0.4, 10).unwrap(), Mat::identity(1));
        assert!(matches!(exact_phi(&p, 0.5, 0.2, 10), Err(Error::InvalidInterval { .. })));
        let d = diag_ou("d", &[1.0, 2.0], &[1.0, 1.0], &[1.0, 1.0], 1.0).unwrap();
        let phi = exact_phi(&d, 0.0, 1.0, 1).unwrap();
        assert!(phi.sub(&Mat::from_diag(&[(-1.0f64).exp(), (-2.0f64).exp()])).max_abs() < 1e-14);
        let mut tv = time_dependent().unwrap();
        tv.drift = Arc::new(|t| Mat::scalar(-(1.0 + t)));
        tv.bounds.alpha_a = 2.0;
        let phi = exact_phi(&tv, 0.0, 1.0, 200).unwrap();
        assert!((phi[(0, 0)] - (-1.5f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn phi_cocycle_and_contraction() {
        let p = time_dependent().unwrap();
        let a = exact_phi(&p, 0.5, 1.0, 400).unwrap();
        let b = exact_phi(&p, 0.1, 0.5, 400).unwrap();
        let c = exact_phi(&p, 0.1, 1.0, 800).unwrap();
        assert!(a.matmul(&b).sub(&c).max_abs() < 1e-8);
        let r = builtin("rotating").unwrap();
        let phi = exact_phi(&r, 0.0, 0.7, 1).unwrap();
        assert!(spectral_norm(&phi).unwrap() <= (-0.7f64).exp() * (1.0 + 1e-12));
    }

    #[test]
    fn sigma_examples() {
        let zero_drift = SdeProblem {
            name: "bm".into(),
            n: 2,
            m: 2,
            t_end: 1.0,
            drift: Arc::new(|_| Mat::zeros(2, 2)),
            diffusion: Arc::new(|_| Mat::identity(2)),
            x0: vec![0.0; 2],
            bounds: Bounds { alpha_a: 1.0, eta: 1.0, sigma: 1.0, kappa_bbt: Some(1.0), alpha_da: 0.0, alpha_dbbt: 0.0 },
            drift_kind: DriftKind::Constant,
            diffusion_constant: true,
            diagonal_ou: None,
        };
        let s = exact_sigma(&zero_drift, 0.2, 0.7, 8).unwrap();
        assert!(s.sub(&Mat::identity(2).scale(0.5)).max_abs() < 1e-14);
        let ou = diag_ou("o", &[2.0], &[0.7], &[1.0], 1.0).unwrap();
        let s = exact_sigma(&ou, 0.0, 1.0, 32).unwrap();
        let want = 0.49 * (1.0 - (-4.0f64).exp()) / 4.0;
        assert!((s[(0, 0)] - want).abs() < 1e-12);
        let td = time_dependent().unwrap();
        let s = exact_sigma(&td, 0.0, 1.0, 32).unwrap();
        assert!(s[(0, 0)] > 0.0);
    }

    #[test]
    fn ou_moment_examples() {
        assert_eq!(ou_analytic_moments(1.0, 1.0, 3.0, 0.0), (3.0, 0.0));
        let (_, v) = ou_analytic_moments(1.0, 1.0, 0.0, 1e3);
        assert!((v - 0.5).abs() < 1e-15);
        let (m, v) = ou_analytic_moments(2.0, 1.0, 1.0, 1.0);
        assert!((m - (-2.0f64).exp()).abs() < 1e-16);
        assert!((v - (1.0 - (-4.0f64).exp()) / 4.0).abs() < 1e-16);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(5);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(8)).sum();
        assert!((s - 2.0 / 9.0).abs() < 1e-14);
    }

    #[test]
    fn json_model_roundtrip() {
        let doc = r#"{"N":2,"m":2,"T":1.0,"x0":[1,0],
            "model":{"kind":"constant","params":{"A":[[-1,0],[0,-2]],"B":[[1,0],[0,1]]}},
            "bounds":{"alpha_A":2,"eta":1,"sigma":1,"kappa_BBT":1}}"#;
        let d: ModelDoc = serde_json::from_str(doc).unwrap();
        let p = d.into_problem("c").unwrap();
        assert_eq!(p.drift_kind, DriftKind::Constant);
        let bad = doc.replace("\"T\"", "\"horizon\":1,\"T\"");
        assert!(serde_json::from_str::<ModelDoc>(&bad).is_err());
    }
}
