//! Expectation estimators over sampled history states: parameter plans,
//! observable tensors, overlap emulation, and moment and concentration checks.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::combinatorics::double_factorial_f64;
use crate::dyson::{ceil_count, choose_krm_sqrt, default_fine_cap};
use crate::em::{em_min_steps, strong_convergence, u_b_em, EmHistory};
use crate::error::{Error, Result};
use crate::history::{u_b_dyson, DysonHistory, HistoryConfig, QlssMode};
use crate::linalg::dot;
use crate::model::{SdeProblem, TimeGrid};
use crate::prng::{choose_usn, ClipBound, PcgStream};

pub const OVERLAP_STREAM_TAG: u64 = 0x4f56_4c50_0000_0003;
/// Largest sample count an estimator will run.
pub const MAX_SAMPLES: u64 = 100_000_000;
/// Largest amplitude vector that is materialized.
pub const MAX_STATE_LEN: usize = 1 << 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Multi,
    Terminal,
    Em,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Multi => "dyson_multi",
            Algorithm::Terminal => "dyson_terminal",
            Algorithm::Em => "em_multi",
        }
    }
}

/// Target accuracy, either absolute or relative to the typical size of `Y`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Accuracy {
    Absolute(f64),
    Relative(f64),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryDoc {
    idx: Vec<usize>,
    val: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ObservableDoc {
    d: usize,
    #[serde(default)]
    dims: Option<Vec<usize>>,
    entries: Vec<EntryDoc>,
    #[serde(default)]
    history: bool,
}

/// Sparse `d`-way tensor `C`. Indices address components of the terminal
/// state unless `history` is set, in which case they address the flattened
/// history vector `(X_0, ..., X_r)` directly.
#[derive(Clone, Debug, Serialize)]
pub struct ObservableTensor {
    pub d: usize,
    /// Per-axis index range.
    pub dims: Vec<usize>,
    pub entries: Vec<(Vec<usize>, f64)>,
    pub frob_norm: f64,
    pub history: bool,
}

impl ObservableTensor {
    /// Tensor with `dims` taken as one past the largest index on each axis.
    pub fn new(d: usize, entries: Vec<(Vec<usize>, f64)>, history: bool) -> Result<Self> {
        let mut dims = vec![1; d];
        for (idx, _) in &entries {
            for (a, &j) in dims.iter_mut().zip(idx) {
                *a = (*a).max(j + 1);
            }
        }
        Self::with_dims(d, dims, entries, history)
    }

    pub fn with_dims(d: usize, dims: Vec<usize>, entries: Vec<(Vec<usize>, f64)>, history: bool) -> Result<Self> {
        if dims.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: dims.len() });
        }
        if d == 0 {
            return Err(Error::InvalidInput("observable order d must be at least 1".into()));
        }
        let mut seen = HashSet::new();
        for (idx, val) in &entries {
            if idx.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: idx.len() });
            }
            for (&j, &a) in idx.iter().zip(&dims) {
                if j >= a {
                    return Err(Error::IndexOutOfRange { index: j, max: a.saturating_sub(1) });
                }
            }
            if !val.is_finite() {
                return Err(Error::InvalidInput("observable entries must be finite".into()));
            }
            if !seen.insert(idx.clone()) {
                return Err(Error::InvalidInput(format!("duplicate observable index {idx:?}")));
            }
        }
        let frob_norm = entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
        if frob_norm == 0.0 {
            return Err(Error::InvalidInput("observable tensor is zero".into()));
        }
        Ok(ObservableTensor { d, dims, entries, frob_norm, history })
    }

    /// Single unit entry on terminal component `j` repeated `d` times.
    pub fn terminal_power(d: usize, j: usize) -> Self {
        Self::new(d, vec![(vec![j; d], 1.0)], false).expect("unit entry is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ObservableDoc = serde_json::from_str(text).map_err(|e| Error::Config(format!("observable: {e}")))?;
        let entries = doc.entries.into_iter().map(|e| (e.idx, e.val)).collect();
        match doc.dims {
            Some(dims) => Self::with_dims(doc.d, dims, entries, doc.history),
            None => Self::new(doc.d, entries, doc.history),
        }
        .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &str) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn check_bound(&self, limit: usize) -> Result<()> {
        for (idx, _) in &self.entries {
            if let Some(&bad) = idx.iter().find(|&&j| j >= limit) {
                return Err(Error::IndexOutOfRange { index: bad, max: limit - 1 });
            }
        }
        Ok(())
    }

    /// Entries addressed into the history vector of `r` steps and block size `n`.
    pub fn lifted(&self, r: usize, n: usize) -> Result<Vec<(Vec<usize>, f64)>> {
        if self.history {
            self.check_bound((r + 1) * n)?;
            return Ok(self.entries.clone());
        }
        self.check_bound(n)?;
        Ok(self.entries.iter().map(|(idx, v)| (idx.iter().map(|j| r * n + j).collect(), *v)).collect())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EstimationPlan {
    pub mode: Algorithm,
    pub d: usize,
    pub eps: f64,
    pub eps_rel: Option<f64>,
    pub delta: f64,
    pub delta_prime: f64,
    #[serde(rename = "N_s")]
    pub n_s: u64,
    #[serde(rename = "U_SN")]
    pub u_sn: f64,
    pub eps_prime: f64,
    /// Accuracy driving `(K, M)` in the Dyson modes.
    pub varepsilon_prime: Option<f64>,
    pub r: usize,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    #[serde(rename = "M_formula")]
    pub m_formula: Option<u64>,
    #[serde(rename = "M")]
    pub m: Option<usize>,
    #[serde(rename = "R")]
    pub pad: usize,
    pub eps_oe: f64,
    #[serde(rename = "U_B")]
    pub u_b: f64,
    pub prefactor: f64,
    /// Factor mapping the overlap to the estimate.
    pub rescale: f64,
    pub c_frob: f64,
    pub c_st: Option<f64>,
    pub iterations: Option<usize>,
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("delta = {delta} must lie in (0, 1)")))
    }
}

fn check_rel(eps_rel: f64) -> Result<()> {
    if eps_rel > 0.0 && eps_rel < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("relative accuracy {eps_rel} must lie in (0, 1)")))
    }
}

fn sample_count(x: f64) -> Result<u64> {
    let n = ceil_count(x);
    if n > MAX_SAMPLES {
        return Err(Error::Infeasible(format!("plan needs {n} samples, above the limit {MAX_SAMPLES}")));
    }
    Ok(n)
}

fn dyson_plan(p: &SdeProblem, c: &ObservableTensor, acc: Accuracy, delta: f64, terminal: bool) -> Result<EstimationPlan> {
    check_delta(delta)?;
    p.require_dyson()?;
    if terminal && c.history {
        return Err(Error::InvalidInput("terminal estimation takes terminal-component observables only".into()));
    }
    let d = c.d;
    let df = double_factorial_f64(2 * d as i64 - 3);
    let b = &p.bounds;
    let (s2, t, nn) = (b.sigma * b.sigma, p.t_end, p.n as f64);
    let xs = p.x0_norm_sq();
    let big = xs + (nn + 2.0 * d as f64) * s2 * t;
    let r_c = choose_krm_sqrt(p, 1.0)?.r;
    let dh = d as f64 / 2.0;
    let (eps, eps_rel) = match acc {
        Accuracy::Absolute(e) if e > 0.0 => (e, None),
        Accuracy::Absolute(e) => return Err(Error::InvalidInput(format!("eps = {e} must be positive"))),
        Accuracy::Relative(er) => {
            check_rel(er)?;
            let scale = if terminal { 1.0 } else { r_c as f64 };
            ((scale * (xs + nn * s2 * t)).powf(dh) * c.frob_norm * er, Some(er))
        }
    };
    let steps_factor = if terminal { 1.0 } else { (r_c as f64 + 1.0).powf(dh) };
    let eps_prime = eps / (12.0 * 2f64.powi(d as i32) * d as f64 * df.sqrt() * steps_factor * big.powf(dh) * c.frob_norm);
    if eps_prime > 1.0 / 3.0 {
        return Err(Error::Infeasible(format!(
            "per-sample accuracy eps' = {eps_prime:.4e} exceeds 1/3; eps = {eps:.4e} is too large for this observable"
        )));
    }
    let delta_prime = delta / 2.0;
    let n_s = sample_count(2.0 / (delta_prime * eps_prime * eps_prime))?;
    let u_sn = choose_usn(r_c as u64, p.n, n_s, delta_prime).u_sn;
    let u2 = u_sn * u_sn;
    let rc = r_c as f64;
    let vp = ((b.eta * t).powi(2) / (8.0 * 3f64.sqrt() * rc * rc))
        .min(((xs + 4.0 * nn * s2 * t * u2) / (48.0 * nn * s2 * t * u2)).sqrt() * b.eta * t / rc)
        * eps_prime;
    let krm = choose_krm_sqrt(p, vp)?;
    let u_b = u_b_dyson(p, u_sn);
    let mx = p.max_one_eta_t();
    let r = krm.r as f64;
    let (pad, prefactor, rescale) = if terminal {
        let pad = (r / mx).round() as usize;
        let g = 2.0 * (4.0 * r / mx + pad as f64) * u_b;
        (pad, 1.0 / g, c.frob_norm * g.powi(d as i32) / (pad as f64 + 1.0).sqrt())
    } else {
        (0, mx / (8.0 * r * u_b), (8.0 * r * u_b / mx).powi(d as i32) * c.frob_norm)
    };
    if !terminal {
        c.lifted(krm.r, p.n)?;
    } else {
        c.lifted(0, p.n)?;
    }
    Ok(EstimationPlan {
        mode: if terminal { Algorithm::Terminal } else { Algorithm::Multi },
        d,
        eps,
        eps_rel,
        delta,
        delta_prime,
        n_s,
        u_sn,
        eps_prime,
        varepsilon_prime: Some(vp),
        r: krm.r,
        k: Some(krm.k),
        m_formula: Some(krm.m),
        m: Some(krm.m.min(default_fine_cap(p.drift_kind)) as usize),
        pad,
        eps_oe: eps / (2.0 * rescale),
        u_b,
        prefactor,
        rescale,
        c_frob: c.frob_norm,
        c_st: None,
        iterations: None,
    })
}

/// Parameters of the multi-time Dyson estimator.
pub fn plan_multi_time(p: &SdeProblem, c: &ObservableTensor, acc: Accuracy, delta: f64) -> Result<EstimationPlan> {
    dyson_plan(p, c, acc, delta, false)
}

/// Parameters of the terminal-time Dyson estimator with padding.
pub fn plan_terminal(p: &SdeProblem, c: &ObservableTensor, acc: Accuracy, delta: f64) -> Result<EstimationPlan> {
    dyson_plan(p, c, acc, delta, true)
}

/// Iteration cap for the joint choice of `r` and `eps'` in the EM plan.
pub const EM_PLAN_ITERATIONS: usize = 20;
/// Step counts above this are reported as infeasible.
pub const MAX_EM_STEPS: usize = 1 << 24;

/// Parameters of the EM estimator. `c_st` is the strong-error constant with
/// `max_n E||X^EM_n - X_{t_n}||² <= c_st / r²`.
pub fn plan_em(p: &SdeProblem, c: &ObservableTensor, acc: Accuracy, delta: f64, c_st: f64) -> Result<EstimationPlan> {
    check_delta(delta)?;
    if !(c_st >= 0.0 && c_st.is_finite()) {
        return Err(Error::InvalidInput(format!("strong-error constant {c_st} must be finite and nonnegative")));
    }
    let d = c.d;
    let df = double_factorial_f64(2 * d as i64 - 3);
    let b = &p.bounds;
    let (s2, t) = (b.sigma * b.sigma, p.t_end);
    let xs = p.x0_norm_sq();
    let big = xs + (p.m as f64 + 2.0 * d as f64) * s2 * t;
    let dh = d as f64 / 2.0;
    let coef = 2f64.powi(d as i32 + 1) * d as f64 * df.sqrt();
    let r0 = em_min_steps(p);
    let steps_for = |ep: f64| -> usize { r0.max(ceil_count(c_st / (ep * ep)).min(usize::MAX as u64) as usize) };
    let (r, eps, eps_prime, eps_rel, iterations) = match acc {
        Accuracy::Relative(er) => {
            check_rel(er)?;
            let ep = (er / coef).min(1.0);
            let r = steps_for(ep);
            if r > MAX_EM_STEPS {
                return Err(Error::Infeasible(format!("EM plan needs r = {r} steps")));
            }
            let eps = (r as f64 + 1.0).powf(dh) * big.powf(dh) * c.frob_norm * er;
            (r, eps, ep, Some(er), 1)
        }
        Accuracy::Absolute(e) if e > 0.0 => {
            let eps_at = |r: usize| (e / (coef * (r as f64 + 1.0).powf(dh) * big.powf(dh) * c.frob_norm)).min(1.0);
            let mut r = r0;
            let mut done = None;
            for it in 1..=EM_PLAN_ITERATIONS {
                let next = steps_for(eps_at(r));
                if next > MAX_EM_STEPS {
                    break;
                }
                if next == r {
                    done = Some(it);
                    break;
                }
                r = next;
            }
            let it = done.ok_or_else(|| {
                Error::Infeasible(format!(
                    "no step count r satisfies r >= C_st / eps'(r)² within {EM_PLAN_ITERATIONS} iterations; increase eps"
                ))
            })?;
            (r, e, eps_at(r), None, it)
        }
        Accuracy::Absolute(e) => return Err(Error::InvalidInput(format!("eps = {e} must be positive"))),
    };
    let delta_prime = delta / 2.0;
    let n_s = sample_count(16.0 / (d as f64 * delta_prime * eps_prime * eps_prime))?;
    let u_sn = choose_usn(r as u64, p.m, n_s, delta_prime).u_sn;
    let u_b = u_b_em(p, u_sn);
    let mx = p.max_one_eta_t();
    let rescale = (8.0 * r as f64 * u_b / mx).powi(d as i32) * c.frob_norm;
    c.lifted(r, p.n)?;
    Ok(EstimationPlan {
        mode: Algorithm::Em,
        d,
        eps,
        eps_rel,
        delta,
        delta_prime,
        n_s,
        u_sn,
        eps_prime,
        varepsilon_prime: None,
        r,
        k: None,
        m_formula: None,
        m: None,
        pad: 0,
        eps_oe: eps / (4.0 * rescale),
        u_b,
        prefactor: mx / (8.0 * r as f64 * u_b),
        rescale,
        c_frob: c.frob_norm,
        c_st: Some(c_st),
        iterations: Some(iterations),
    })
}

/// Step counts and path count used to estimate the strong-error constant.
pub const C_ST_STEPS: [usize; 4] = [8, 16, 32, 64];
pub const C_ST_PATHS: usize = 200;

/// Empirical strong-error constant `max_r r² MSE(r)`.
pub fn estimate_c_st(p: &SdeProblem, stream: &PcgStream) -> Result<f64> {
    Ok(strong_convergence(p, &C_ST_STEPS, C_ST_PATHS, stream)?.c_st)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverlapMode {
    Exact,
    Shot,
}

#[derive(Clone, Debug, Serialize)]
pub struct OverlapEstimate {
    pub value: f64,
    pub exact: f64,
    /// Query count `ceil(4 ln(1/delta) / eps_OE)`.
    pub queries: u64,
}

pub fn overlap_queries(eps_oe: f64, delta: f64) -> u64 {
    ceil_count(4.0 * (1.0 / delta).ln() / eps_oe)
}

/// Applies the overlap-estimation error model to an exact inner product.
/// Shot mode adds a Gaussian truncated at `eps_OE` with standard deviation `eps_OE / 3`.
pub fn overlap_from_exact(exact: f64, eps_oe: f64, delta: f64, mode: OverlapMode, stream: &PcgStream, offset: u64) -> OverlapEstimate {
    let queries = overlap_queries(eps_oe, delta);
    let value = match mode {
        OverlapMode::Exact => exact,
        OverlapMode::Shot => {
            let mut cur = stream.cursor(offset + 1);
            let z = loop {
                let z = cur.next_normal();
                if z.abs() <= 3.0 {
                    break z;
                }
            };
            exact + z * eps_oe / 3.0
        }
    };
    OverlapEstimate { value, exact, queries }
}

pub fn overlap_estimate(
    u: &[f64],
    v: &[f64],
    eps_oe: f64,
    delta: f64,
    mode: OverlapMode,
    stream: &PcgStream,
    offset: u64,
) -> Result<OverlapEstimate> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch { expected: u.len(), got: v.len() });
    }
    for w in [u, v] {
        let nrm = dot(w, w).sqrt();
        if nrm > 1.0 + 1e-12 {
            return Err(Error::InvalidInput(format!("state norm {nrm} exceeds 1")));
        }
    }
    Ok(overlap_from_exact(dot(u, v), eps_oe, delta, mode, stream, offset))
}

fn block_count(plan: &EstimationPlan) -> usize {
    plan.r + plan.pad + 1
}

fn state_len(n_s: usize, reg: usize, d: usize) -> Result<usize> {
    let mut len = 2 * n_s;
    for _ in 0..d {
        len = len.checked_mul(reg).ok_or(Error::TooLarge(usize::MAX))?;
    }
    if len > MAX_STATE_LEN {
        return Err(Error::TooLarge(len));
    }
    Ok(len)
}

fn flat_index(idx: &[usize], reg: usize) -> usize {
    idx.iter().fold(0, |acc, &j| acc * reg + j)
}

/// Observable state over (sample) ⊗ (flag) ⊗ (d registers of size `(r+R+1)N`),
/// for `n_s` samples.
pub fn build_observable_state(c: &ObservableTensor, plan: &EstimationPlan, n: usize, n_s: usize) -> Result<Vec<f64>> {
    let reg = block_count(plan) * n;
    let per = state_len(1, reg, c.d)?;
    let mut out = vec![0.0; state_len(n_s, reg, c.d)?];
    let amp = 1.0 / (n_s as f64).sqrt();
    let mut one = vec![0.0; per / 2];
    match plan.mode {
        Algorithm::Terminal => {
            let w = 1.0 / (c.frob_norm * (plan.pad as f64 + 1.0).sqrt());
            for slot in plan.r..=plan.r + plan.pad {
                for (idx, v) in &c.entries {
                    let lifted: Vec<usize> = idx.iter().map(|j| slot * n + j).collect();
                    one[flat_index(&lifted, reg)] += v * w;
                }
            }
        }
        _ => {
            for (idx, v) in c.lifted(plan.r, n)? {
                one[flat_index(&idx, reg)] += v / c.frob_norm;
            }
        }
    }
    for i in 0..n_s {
        for (k, a) in one.iter().enumerate() {
            out[i * per + k] = amp * a;
        }
    }
    Ok(out)
}

/// Superposition of `d`-fold history states `prefactor x_i` with the remaining
/// amplitude placed in the flag-1 branch.
pub fn build_history_superposition(states: &[Vec<f64>], prefactor: f64, d: usize) -> Result<Vec<f64>> {
    let n_s = states.len();
    let reg = states.first().ok_or(Error::EmptyList)?.len();
    let per = state_len(1, reg, d)?;
    let mut out = vec![0.0; state_len(n_s, reg, d)?];
    let amp = 1.0 / (n_s as f64).sqrt();
    for (i, x) in states.iter().enumerate() {
        let mut t = vec![1.0];
        for _ in 0..d {
            t = t.iter().flat_map(|a| x.iter().map(move |b| a * prefactor * b)).collect();
        }
        let mass: f64 = t.iter().map(|v| v * v).sum();
        if mass > 1.0 + 1e-12 {
            return Err(Error::InvalidInput(format!("history amplitude mass {mass} exceeds 1")));
        }
        for (k, v) in t.iter().enumerate() {
            out[i * per + k] = amp * v;
        }
        out[i * per + per / 2] = amp * (1.0 - mass).max(0.0).sqrt();
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct QueryLedger {
    pub overlap_queries: u64,
    pub history_oracle_uses: u64,
    pub observable_oracle_uses: u64,
    /// Drift-oracle uses per history state, by the displayed complexity structure.
    pub drift_uses_per_state: f64,
    pub drift_uses_total: f64,
}

pub fn query_ledger(plan: &EstimationPlan, p: &SdeProblem) -> QueryLedger {
    let q = overlap_queries(plan.eps_oe, plan.delta_prime);
    let mx = p.max_one_eta_t();
    let steps = plan.r as f64 / mx;
    let log = (steps / plan.eps_prime).ln().max(1.0);
    let per = match plan.k {
        Some(k) => k as f64 * steps * log,
        None => steps * log,
    };
    let uses = q * plan.d as u64;
    QueryLedger {
        overlap_queries: q,
        history_oracle_uses: uses,
        observable_oracle_uses: q,
        drift_uses_per_state: per,
        drift_uses_total: per * uses as f64,
    }
}

/// `E[prod_k X_{t_k}^{j_k}]` for a Gaussian process with the given means and covariance.
fn gaussian_product_moment(mean: &[f64], cov: &dyn Fn(usize, usize) -> f64) -> f64 {
    fn centered(rest: &[usize], cov: &dyn Fn(usize, usize) -> f64) -> f64 {
        if rest.is_empty() {
            return 1.0;
        }
        if rest.len() % 2 == 1 {
            return 0.0;
        }
        let first = rest[0];
        let mut total = 0.0;
        for k in 1..rest.len() {
            let mut others: Vec<usize> = rest[1..].to_vec();
            others.remove(k - 1);
            total += cov(first, rest[k]) * centered(&others, cov);
        }
        total
    }
    let d = mean.len();
    let mut total = 0.0;
    for mask in 0u32..(1 << d) {
        let mut prod = 1.0;
        let mut noise = Vec::new();
        for k in 0..d {
            if mask & (1 << k) != 0 {
                noise.push(k);
            } else {
                prod *= mean[k];
            }
        }
        if prod != 0.0 {
            total += prod * centered(&noise, cov);
        }
    }
    total
}

/// Analytic `E[Y]` on diagonal OU models; `None` elsewhere.
pub fn analytic_expectation(p: &SdeProblem, c: &ObservableTensor, r: usize) -> Option<f64> {
    let ou = p.diagonal_ou.as_ref()?;
    let grid = TimeGrid::new(p.t_end, r, 1);
    let mut total = 0.0;
    for (idx, val) in &c.entries {
        let pts: Vec<(f64, usize)> = idx
            .iter()
            .map(|&h| if c.history { (grid.t(h / p.n), h % p.n) } else { (p.t_end, h) })
            .collect();
        if pts.iter().any(|&(_, j)| j >= p.n) {
            return None;
        }
        let mean: Vec<f64> = pts.iter().map(|&(t, j)| ou.mean(&p.x0, j, t)).collect();
        let cov = |a: usize, b: usize| ou.cov(pts[a].1, pts[a].0, pts[b].1, pts[b].0);
        total += val * gaussian_product_moment(&mean, &cov);
    }
    Some(total)
}

enum Pipeline<'a> {
    Dyson(DysonHistory<'a>),
    Em(EmHistory<'a>),
}

#[derive(Clone, Debug, Serialize)]
pub struct EstimateReport {
    pub algorithm: Algorithm,
    pub model: String,
    pub mu_hat: f64,
    /// Sample average of `Y` over the emulated history states.
    pub y_hat: f64,
    pub overlap: OverlapEstimate,
    pub eps: f64,
    pub delta: f64,
    pub plan: EstimationPlan,
    pub query_ledger: QueryLedger,
    pub truth: Option<f64>,
    pub abs_error: Option<f64>,
    pub within_eps: Option<bool>,
}

/// A planned estimator with its history-state pipeline built once and shared
/// across independent runs.
pub struct Estimator<'a> {
    p: &'a SdeProblem,
    pub plan: EstimationPlan,
    pub observable: ObservableTensor,
    lifted: Vec<(Vec<usize>, f64)>,
    pipeline: Pipeline<'a>,
    pub overlap_mode: OverlapMode,
}

impl<'a> Estimator<'a> {
    pub fn new(
        p: &'a SdeProblem,
        c: &ObservableTensor,
        plan: EstimationPlan,
        qlss_mode: QlssMode,
        overlap_mode: OverlapMode,
    ) -> Result<Self> {
        if c.d != plan.d {
            return Err(Error::DimensionMismatch { expected: plan.d, got: c.d });
        }
        let clip = ClipBound { u_sn: plan.u_sn };
        let pipeline = match plan.mode {
            Algorithm::Multi | Algorithm::Terminal => Pipeline::Dyson(DysonHistory::build(
                p,
                HistoryConfig {
                    eps: plan.eps_prime,
                    padded: plan.mode == Algorithm::Terminal,
                    pad: plan.pad,
                    qlss_mode,
                    clip,
                    fine_cap: plan.m.map(|m| m as u64),
                    varepsilon: plan.varepsilon_prime,
                    aux_seed: 0,
                    aux_stream: 0,
                },
            )?),
            Algorithm::Em => Pipeline::Em(EmHistory::build(p, plan.r, plan.eps_prime, qlss_mode, clip, (0, 0))?),
        };
        let lifted = match plan.mode {
            Algorithm::Terminal => c.lifted(0, p.n)?,
            _ => c.lifted(plan.r, p.n)?,
        };
        Ok(Estimator { p, plan, observable: c.clone(), lifted, pipeline, overlap_mode })
    }

    pub fn sample_into(&self, stream: &PcgStream, i: u64, out: &mut Vec<f64>, buf: &mut Vec<f64>) -> Result<()> {
        match &self.pipeline {
            Pipeline::Dyson(h) => h.sample_raw_into(stream, i, out, buf),
            Pipeline::Em(h) => h.sample_raw_into(stream, i, out, buf),
        }
    }

    /// `Y` evaluated on one raw history vector; terminal mode averages over the tail blocks.
    pub fn y_of(&self, x: &[f64]) -> f64 {
        let n = self.p.n;
        let eval = |offset: usize| -> f64 {
            self.lifted.iter().map(|(idx, v)| v * idx.iter().map(|&j| x[offset + j]).product::<f64>()).sum()
        };
        match self.plan.mode {
            Algorithm::Terminal => {
                let slots = self.plan.r..=self.plan.r + self.plan.pad;
                slots.map(|s| eval(s * n)).sum::<f64>() / (self.plan.pad as f64 + 1.0)
            }
            _ => eval(0),
        }
    }

    /// Inner product of one sample's good branch with the observable state, without the `1/N_s` factor.
    pub fn overlap_term(&self, x: &[f64]) -> f64 {
        let n = self.p.n;
        let pf = self.plan.prefactor;
        let term = |offset: usize, w: f64| -> f64 {
            self.lifted.iter().map(|(idx, v)| v * w * idx.iter().map(|&j| pf * x[offset + j]).product::<f64>()).sum()
        };
        match self.plan.mode {
            Algorithm::Terminal => {
                let w = 1.0 / (self.observable.frob_norm * (self.plan.pad as f64 + 1.0).sqrt());
                (self.plan.r..=self.plan.r + self.plan.pad).map(|s| term(s * n, w)).sum()
            }
            _ => term(0, 1.0 / self.observable.frob_norm),
        }
    }

    /// `(Y_hat, overlap)` over samples `1..=n_s` of `stream`.
    pub fn sample_average(&self, stream: &PcgStream, n_s: u64) -> Result<(f64, f64)> {
        let (mut out, mut buf) = (Vec::new(), Vec::new());
        let (mut ys, mut ov) = (0.0, 0.0);
        for i in 1..=n_s {
            self.sample_into(stream, i, &mut out, &mut buf)?;
            ys += self.y_of(&out);
            ov += self.overlap_term(&out);
        }
        Ok((ys / n_s as f64, ov / n_s as f64))
    }

    pub fn run(&self, stream: &PcgStream) -> Result<EstimateReport> {
        let (y_hat, ov) = self.sample_average(stream, self.plan.n_s)?;
        let aux = PcgStream::new(stream.seed, stream.stream_id ^ OVERLAP_STREAM_TAG);
        let overlap = overlap_from_exact(ov, self.plan.eps_oe, self.plan.delta_prime, self.overlap_mode, &aux, 0);
        let mu_hat = self.plan.rescale * overlap.value;
        let truth = analytic_expectation(self.p, &self.observable, self.plan.r);
        let abs_error = truth.map(|t| (mu_hat - t).abs());
        Ok(EstimateReport {
            algorithm: self.plan.mode,
            model: self.p.name.clone(),
            mu_hat,
            y_hat,
            overlap,
            eps: self.plan.eps,
            delta: self.plan.delta,
            plan: self.plan.clone(),
            query_ledger: query_ledger(&self.plan, self.p),
            truth,
            abs_error,
            within_eps: abs_error.map(|e| e <= self.plan.eps),
        })
    }
}

#[derive(Clone, Debug)]
pub struct EstimateOptions {
    pub qlss_mode: QlssMode,
    pub overlap_mode: OverlapMode,
    /// Strong-error constant for the EM plan; estimated from the model when absent.
    pub c_st: Option<f64>,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        EstimateOptions { qlss_mode: QlssMode::Honest, overlap_mode: OverlapMode::Exact, c_st: None }
    }
}

pub fn plan_for(
    algorithm: Algorithm,
    p: &SdeProblem,
    c: &ObservableTensor,
    acc: Accuracy,
    delta: f64,
    c_st: Option<f64>,
    stream: &PcgStream,
) -> Result<EstimationPlan> {
    match algorithm {
        Algorithm::Multi => plan_multi_time(p, c, acc, delta),
        Algorithm::Terminal => plan_terminal(p, c, acc, delta),
        Algorithm::Em => {
            let c_st = match c_st {
                Some(v) => v,
                None => estimate_c_st(p, &PcgStream::new(stream.seed, stream.stream_id ^ C_ST_STREAM_TAG))?,
            };
            plan_em(p, c, acc, delta, c_st)
        }
    }
}

pub const C_ST_STREAM_TAG: u64 = 0x4353_5400_0000_0004;

fn estimate_with(
    algorithm: Algorithm,
    p: &SdeProblem,
    c: &ObservableTensor,
    acc: Accuracy,
    delta: f64,
    stream: &PcgStream,
    opts: &EstimateOptions,
) -> Result<EstimateReport> {
    let plan = plan_for(algorithm, p, c, acc, delta, opts.c_st, stream)?;
    Estimator::new(p, c, plan, opts.qlss_mode, opts.overlap_mode)?.run(stream)
}

pub fn estimate_multi_time(p: &SdeProblem, c: &ObservableTensor, acc: Accuracy, delta: f64, stream: &PcgStream, opts: &EstimateOptions) -> Result<EstimateReport> {
    estimate_with(Algorithm::Multi, p, c, acc, delta, stream, opts)
}

pub fn estimate_terminal(p: &SdeProblem, c: &ObservableTensor, acc: Accuracy, delta: f64, stream: &PcgStream, opts: &EstimateOptions) -> Result<EstimateReport> {
    estimate_with(Algorithm::Terminal, p, c, acc, delta, stream, opts)
}

pub fn estimate_em(p: &SdeProblem, c: &ObservableTensor, acc: Accuracy, delta: f64, stream: &PcgStream, opts: &EstimateOptions) -> Result<EstimateReport> {
    estimate_with(Algorithm::Em, p, c, acc, delta, stream, opts)
}

/// Closed-form bound on `E||X^{⊗d}||²` for the sampled quantity of each mode:
/// the whole history (multi, EM) or one terminal block (terminal).
pub fn moment_bound(p: &SdeProblem, mode: Algorithm, d: usize, r: usize, eps: f64) -> f64 {
    let s2t = p.bounds.sigma * p.bounds.sigma * p.t_end;
    let df = double_factorial_f64(2 * d as i64 - 1);
    let di = d as i32;
    match mode {
        Algorithm::Multi => {
            df * (1.0 + 3.0 * eps).powi(2 * di) * (r as f64 + 1.0).powi(di)
                * (p.x0_norm_sq() + (p.n + 2 * d) as f64 * s2t).powi(di)
        }
        Algorithm::Terminal => df * (1.0 + 3.0 * eps).powi(2 * di) * (p.x0_norm_sq() + (p.n + 2 * d) as f64 * s2t).powi(di),
        Algorithm::Em => {
            df * (1.0 + eps).powi(2 * di) * (r as f64 + 1.0).powi(di) * (p.x0_norm_sq() + (p.m + 2 * d) as f64 * s2t).powi(di)
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MomentReport {
    pub mode: Algorithm,
    pub d: usize,
    #[serde(rename = "N_s")]
    pub n_s: u64,
    pub estimate: f64,
    pub std_error: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Monte Carlo `E||X^{⊗d}||² = E||X||^{2d}` on the estimator's history states
/// against `moment_bound`; passes iff `estimate <= bound (1 + 3 SE/estimate)`.
pub fn moment_bound_check(est: &Estimator, d: usize, n_s: u64, stream: &PcgStream) -> Result<MomentReport> {
    if !(1..=3).contains(&d) || n_s < 2 {
        return Err(Error::InvalidInput(format!("moment check needs d in 1..=3 and N_s >= 2, got d={d}, N_s={n_s}")));
    }
    let plan = &est.plan;
    let nn = est.p.n;
    let (mut out, mut buf) = (Vec::new(), Vec::new());
    let (mut s, mut s2) = (0.0, 0.0);
    for i in 1..=n_s {
        est.sample_into(stream, i, &mut out, &mut buf)?;
        let sq: f64 = match plan.mode {
            Algorithm::Terminal => out[plan.r * nn..(plan.r + 1) * nn].iter().map(|v| v * v).sum(),
            _ => out.iter().map(|v| v * v).sum(),
        };
        let v = sq.powi(d as i32);
        s += v;
        s2 += v * v;
    }
    let n = n_s as f64;
    let mean = s / n;
    let var = (s2 / n - mean * mean).max(0.0) * n / (n - 1.0);
    let se = (var / n).sqrt();
    let bound = moment_bound(est.p, plan.mode, d, plan.r, plan.eps_prime);
    let rel_se = if mean > 0.0 { se / mean } else { 0.0 };
    Ok(MomentReport { mode: plan.mode, d, n_s, estimate: mean, std_error: se, bound, pass: mean <= bound * (1.0 + 3.0 * rel_se) })
}

/// Right-hand side of the sample-average error bound holding with probability `1 - delta`.
pub fn sample_average_bound(p: &SdeProblem, plan: &EstimationPlan, eps: f64, n_s: u64, delta: f64) -> f64 {
    let d = plan.d;
    let di = d as i32;
    let dh = d as f64 / 2.0;
    let df = double_factorial_f64(2 * d as i64 - 3).sqrt();
    let s2t = p.bounds.sigma * p.bounds.sigma * p.t_end;
    let cheb = (2.0 / (delta * n_s as f64)).sqrt();
    let r1 = plan.r as f64 + 1.0;
    match plan.mode {
        Algorithm::Multi | Algorithm::Terminal => {
            let big = p.x0_norm_sq() + (p.n + 2 * d) as f64 * s2t;
            let steps = if plan.mode == Algorithm::Multi { r1.powf(dh) } else { 1.0 };
            3.0 * d as f64 * df * (1.0 + 3.0 * eps).powi(di) * steps * big.powf(dh) * plan.c_frob * (eps + cheb)
        }
        Algorithm::Em => {
            let big = p.x0_norm_sq() + (p.m + 2 * d) as f64 * s2t;
            df * (1.0 + eps).powi(di - 1) * r1.powf(dh) * big.powf(dh) * plan.c_frob
                * ((2.0 * d as f64 - 1.0).sqrt() * (1.0 + eps) * cheb + d as f64 * eps)
                + em_bias_term(p, plan)
        }
    }
}

/// Time-discretization part of the EM sample-average bound.
pub fn em_bias_term(p: &SdeProblem, plan: &EstimationPlan) -> f64 {
    let d = plan.d;
    let df = double_factorial_f64(2 * d as i64 - 3).sqrt();
    let s2t = p.bounds.sigma * p.bounds.sigma * p.t_end;
    let big = p.x0_norm_sq() + (p.m + 2 * d) as f64 * s2t;
    let h = (d as f64 - 1.0) / 2.0;
    let c_st = plan.c_st.unwrap_or(0.0);
    d as f64 * df * (plan.r as f64 + 1.0).powf(h) * big.powf(h) * plan.c_frob * (c_st / plan.r as f64).sqrt()
}

#[derive(Clone, Debug, Serialize)]
pub struct ConcentrationReport {
    pub mode: Algorithm,
    pub repeats: usize,
    #[serde(rename = "N_s")]
    pub n_s: u64,
    pub delta: f64,
    pub bound: f64,
    pub truth: f64,
    pub violations: usize,
    pub frequency: f64,
    /// `3 sqrt(delta (1 - delta) / repeats)`.
    pub slack: f64,
    pub pass: bool,
}

/// Frequency over `repeats` independent streams with which `|Y_hat - E[Y]|`
/// exceeds the bound at `(eps', n_s, delta)`; passes iff it is at most `delta` plus binomial slack.
pub fn sample_average_bound_check(
    est: &Estimator,
    n_s: u64,
    delta: f64,
    repeats: usize,
    seed: u64,
) -> Result<ConcentrationReport> {
    if repeats < 100 {
        return Err(Error::InvalidInput(format!("need at least 100 repeats, got {repeats}")));
    }
    check_delta(delta)?;
    let truth = analytic_expectation(est.p, &est.observable, est.plan.r)
        .ok_or_else(|| Error::InvalidInput("sample-average check needs a model with closed-form moments".into()))?;
    let bound = sample_average_bound(est.p, &est.plan, est.plan.eps_prime, n_s, delta);
    let mut violations = 0;
    for k in 0..repeats {
        let stream = PcgStream::new(seed, k as u64 + 1);
        let (y_hat, _) = est.sample_average(&stream, n_s)?;
        if (y_hat - truth).abs() > bound {
            violations += 1;
        }
    }
    let frequency = violations as f64 / repeats as f64;
    let slack = 3.0 * (delta * (1.0 - delta) / repeats as f64).sqrt();
    Ok(ConcentrationReport {
        mode: est.plan.mode,
        repeats,
        n_s,
        delta,
        bound,
        truth,
        violations,
        frequency,
        slack,
        pass: frequency <= delta + slack,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin, ou_analytic_moments};

    fn ou() -> SdeProblem {
        builtin("ou").unwrap()
    }

    #[test]
    fn observable_parsing() {
        let c = ObservableTensor::from_json(r#"{"d":2,"entries":[{"idx":[0,1],"val":3.0},{"idx":[1,1],"val":4.0}]}"#).unwrap();
        assert_eq!(c.frob_norm, 5.0);
        assert_eq!(c.dims, vec![2, 2]);
        let sq: f64 = c.entries.iter().map(|(_, v)| v * v).sum();
        assert!((c.frob_norm.powi(2) - sq).abs() < 1e-12);
        assert!(ObservableTensor::from_json(r#"{"d":1,"dims":[2],"entries":[{"idx":[2],"val":1.0}]}"#).is_err());
        assert!(ObservableTensor::from_json(r#"{"d":1,"entries":[{"idx":[0],"val":1.0},{"idx":[0],"val":2.0}]}"#).is_err());
        assert!(ObservableTensor::from_json(r#"{"d":1,"entries":[{"idx":[0],"val":0.0}]}"#).is_err());
        assert!(ObservableTensor::from_json(r#"{"d":1,"entries":[],"extra":1}"#).is_err());
        assert!(ObservableTensor::from_json(r#"{"d":1,"entries":[{"idx":[0,1],"val":1.0}]}"#).is_err());
        let c = ObservableTensor::terminal_power(1, 2);
        assert_eq!(c.lifted(3, 4).unwrap()[0].0, vec![14]);
        assert!(matches!(c.lifted(3, 2), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn plan_multi_examples() {
        let p = ou();
        let c = ObservableTensor::terminal_power(1, 0);
        let plan = plan_multi_time(&p, &c, Accuracy::Absolute(0.5), 0.2).unwrap();
        assert_eq!(plan.delta_prime, 0.1);
        let rc = plan.r as f64;
        let big = p.x0_norm_sq() + 3.0 * p.bounds.sigma.powi(2) * p.t_end;
        let want = 0.5 / (24.0 * (rc + 1.0).sqrt() * big.sqrt());
        assert!((plan.eps_prime - want).abs() < 1e-15);
        assert!(plan.n_s as f64 >= 2.0 / (plan.delta_prime * plan.eps_prime.powi(2)));
        assert!(matches!(plan_multi_time(&p, &c, Accuracy::Absolute(1e3), 0.2), Err(Error::Infeasible(_))));
    }

    #[test]
    fn sample_count_example() {
        assert_eq!(sample_count(2.0 / (0.05 * 0.01)).unwrap(), 4000);
        assert_eq!(sample_count(16.0 / (0.05 * 0.01)).unwrap(), 32000);
    }

    #[test]
    fn plan_terminal_padding() {
        let p = ou();
        let c = ObservableTensor::terminal_power(1, 0);
        let plan = plan_terminal(&p, &c, Accuracy::Relative(0.5), 0.2).unwrap();
        // eta T = 1 here, so R = r_c.
        assert_eq!(plan.pad, plan.r);
        assert!(plan.pad as f64 <= 1.0 / (p.bounds.eta * p.t_end / plan.r as f64) + 1e-12);
        let mx = p.max_one_eta_t();
        let closed_form = (10.0 * plan.u_b * plan.r as f64 / mx).powi(1) / (plan.r as f64 / mx + 1.0).sqrt();
        assert!((plan.rescale - closed_form).abs() < 1e-9 * closed_form);
    }

    #[test]
    fn plan_em_fixed_point() {
        let p = ou();
        let c = ObservableTensor::terminal_power(1, 0);
        let plan = plan_em(&p, &c, Accuracy::Absolute(0.5), 0.2, 1e-3).unwrap();
        assert!(plan.iterations.unwrap() <= EM_PLAN_ITERATIONS);
        assert!(plan.r as f64 >= 1e-3 / plan.eps_prime.powi(2) - 1e-9);
        // For d = 1 the requirement r >= C_st / eps'(r)² grows linearly in r, so a large C_st has no fixed point.
        assert!(matches!(plan_em(&p, &c, Accuracy::Absolute(0.5), 0.2, 0.2), Err(Error::Infeasible(_))));
        let det = plan_em(&p, &c, Accuracy::Absolute(0.5), 0.2, 0.0).unwrap();
        assert_eq!(det.r, em_min_steps(&p));
        let rel = plan_em(&p, &c, Accuracy::Relative(0.5), 0.2, 0.2).unwrap();
        assert!((rel.eps_prime - 0.5 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn observable_state_examples() {
        let p = ou();
        let c = ObservableTensor::terminal_power(1, 0);
        let mut plan = plan_multi_time(&p, &c, Accuracy::Absolute(0.5), 0.2).unwrap();
        let v = build_observable_state(&c, &plan, 1, 3).unwrap();
        assert!((dot(&v, &v) - 1.0).abs() < 1e-12);
        let reg = plan.r + 1;
        assert!((v[plan.r] - 1.0 / 3f64.sqrt()).abs() < 1e-15);
        assert!((v[2 * reg + plan.r] - 1.0 / 3f64.sqrt()).abs() < 1e-15);
        plan.mode = Algorithm::Terminal;
        plan.pad = 1;
        let v = build_observable_state(&c, &plan, 1, 1).unwrap();
        assert!((v[plan.r] - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!((v[plan.r + 1] - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!((dot(&v, &v) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn overlap_examples() {
        let s = PcgStream::new(1, 1);
        let u = [1.0, 0.0];
        let v = [0.0, 1.0];
        assert_eq!(overlap_estimate(&u, &v, 0.1, 0.1, OverlapMode::Exact, &s, 0).unwrap().value, 0.0);
        assert_eq!(overlap_estimate(&u, &u, 0.1, 0.1, OverlapMode::Exact, &s, 0).unwrap().value, 1.0);
        assert!(overlap_estimate(&u, &[1.0], 0.1, 0.1, OverlapMode::Exact, &s, 0).is_err());
        let mut fails = 0;
        for k in 0..500 {
            let e = overlap_estimate(&u, &u, 0.05, 0.1, OverlapMode::Shot, &s, k * 64).unwrap();
            if (e.value - 1.0).abs() > 0.05 {
                fails += 1;
            }
        }
        assert!(fails as f64 / 500.0 <= 0.1 + 3.0 * (0.09f64 / 500.0).sqrt());
    }

    #[test]
    fn rescaled_overlap_identity() {
        let p = builtin("diag-ou").unwrap();
        let c = ObservableTensor::new(2, vec![(vec![0, 0], 1.0), (vec![1, 2], -0.5)], false).unwrap();
        for mode in [Algorithm::Multi, Algorithm::Terminal, Algorithm::Em] {
            let plan = plan_for(mode, &p, &c, Accuracy::Relative(0.9), 0.2, Some(0.5), &PcgStream::new(0, 0)).unwrap();
            let est = Estimator::new(&p, &c, plan.clone(), QlssMode::Honest, OverlapMode::Exact).unwrap();
            let s = PcgStream::new(3, 3);
            let (y, ov) = est.sample_average(&s, 200).unwrap();
            assert!((plan.rescale * ov - y).abs() <= 1e-10 * y.abs().max(1.0), "{mode:?}");
        }
    }

    #[test]
    fn materialized_overlap_matches_factorized() {
        let p = ou();
        let c = ObservableTensor::new(2, vec![(vec![0, 0], 1.0)], false).unwrap();
        for mode in [Algorithm::Multi, Algorithm::Terminal] {
            let plan = plan_for(mode, &p, &c, Accuracy::Relative(0.9), 0.2, None, &PcgStream::new(0, 0)).unwrap();
            let est = Estimator::new(&p, &c, plan.clone(), QlssMode::Honest, OverlapMode::Exact).unwrap();
            let s = PcgStream::new(4, 4);
            let n_s = 5;
            let states: Vec<Vec<f64>> = (1..=n_s)
                .map(|i| {
                    let (mut out, mut buf) = (Vec::new(), Vec::new());
                    est.sample_into(&s, i, &mut out, &mut buf).unwrap();
                    out
                })
                .collect();
            let hist = build_history_superposition(&states, plan.prefactor, 2).unwrap();
            let obs = build_observable_state(&c, &plan, 1, n_s as usize).unwrap();
            assert!((dot(&hist, &hist) - 1.0).abs() < 1e-12);
            let (_, ov) = est.sample_average(&s, n_s).unwrap();
            assert!((dot(&hist, &obs) - ov).abs() < 1e-14);
        }
    }

    #[test]
    fn analytic_oracles() {
        let p = ou();
        let (m, v) = ou_analytic_moments(1.0, 1.0, 1.0, 1.0);
        let c1 = ObservableTensor::terminal_power(1, 0);
        assert!((analytic_expectation(&p, &c1, 4).unwrap() - m).abs() < 1e-15);
        let c2 = ObservableTensor::terminal_power(2, 0);
        assert!((analytic_expectation(&p, &c2, 4).unwrap() - (m * m + v)).abs() < 1e-15);
        let want = (-2.0f64).exp() + (1.0 - (-2.0f64).exp()) / 2.0;
        assert!((analytic_expectation(&p, &c2, 4).unwrap() - want).abs() < 1e-14);
        // Fourth moment of a Gaussian: m^4 + 6 m² v + 3 v².
        let c4 = ObservableTensor::terminal_power(4, 0);
        let want = m.powi(4) + 6.0 * m * m * v + 3.0 * v * v;
        assert!((analytic_expectation(&p, &c4, 4).unwrap() - want).abs() < 1e-14);
        // Two-time covariance on history indices.
        let ch = ObservableTensor::new(2, vec![(vec![2, 4], 1.0)], true).unwrap();
        let (m2, v2) = ou_analytic_moments(1.0, 1.0, 1.0, 0.5);
        let want = m2 * m + (-0.5f64).exp() * v2;
        assert!((analytic_expectation(&p, &ch, 4).unwrap() - want).abs() < 1e-14);
        assert!(analytic_expectation(&builtin("rotating").unwrap(), &c1, 4).is_none());
    }

    #[test]
    fn moment_bound_free_motion_example() {
        // A = 0, B = I: E||X_hist||² = sum_n (||x0||² + n dt N) <= (r+1)(||x0||² + (N+2) T).
        let (r, n, x0sq, t) = (10usize, 3usize, 2.0, 1.5);
        let dt = t / r as f64;
        let exact: f64 = (0..=r).map(|k| x0sq + k as f64 * dt * n as f64).sum();
        assert!(exact <= (r as f64 + 1.0) * (x0sq + (n as f64 + 2.0) * t));
        let p = ou();
        for mode in [Algorithm::Multi, Algorithm::Terminal, Algorithm::Em] {
            let b: Vec<f64> = (1..=4).map(|d| moment_bound(&p, mode, d, 8, 0.01)).collect();
            assert!(b.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn chebyshev_limit_and_bias_scaling() {
        let p = ou();
        let c = ObservableTensor::terminal_power(1, 0);
        let plan = plan_multi_time(&p, &c, Accuracy::Absolute(0.5), 0.2).unwrap();
        let b0 = sample_average_bound(&p, &plan, 0.0, 1000, 0.2);
        let s2t = p.bounds.sigma.powi(2) * p.t_end;
        let want = 3.0 * ((plan.r + 1) as f64).sqrt() * (p.x0_norm_sq() + 3.0 * s2t).sqrt() * (2.0 / 200.0f64).sqrt();
        assert!((b0 - want).abs() < 1e-12);
        let mut em = plan_em(&p, &c, Accuracy::Absolute(0.5), 0.2, 1e-3).unwrap();
        let b1 = em_bias_term(&p, &em);
        em.r *= 4;
        assert!((em_bias_term(&p, &em) / b1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn terminal_and_multi_agree() {
        let p = ou();
        let c = ObservableTensor::terminal_power(1, 0);
        let opts = EstimateOptions::default();
        let s = PcgStream::new(21, 1);
        let a = estimate_multi_time(&p, &c, Accuracy::Absolute(0.3), 0.2, &s, &opts).unwrap();
        let b = estimate_terminal(&p, &c, Accuracy::Absolute(0.3), 0.2, &s, &opts).unwrap();
        assert!((a.mu_hat - b.mu_hat).abs() <= 0.6);
        assert!(b.query_ledger.overlap_queries < a.query_ledger.overlap_queries);
        assert!(a.within_eps.unwrap() && b.within_eps.unwrap());
    }

    #[test]
    fn em_runs_on_rank_deficient_model() {
        let p = builtin("ou-degenerate").unwrap();
        let c = ObservableTensor::terminal_power(1, 0);
        let s = PcgStream::new(2, 2);
        let opts = EstimateOptions { c_st: Some(0.5), ..Default::default() };
        let rep = estimate_em(&p, &c, Accuracy::Relative(0.9), 0.2, &s, &opts).unwrap();
        assert!(rep.mu_hat.is_finite());
        assert!(matches!(estimate_multi_time(&p, &c, Accuracy::Relative(0.9), 0.2, &s, &opts), Err(Error::AssumptionViolated(_))));
    }
}
