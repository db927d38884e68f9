//! Euler-Maruyama trajectories, the associated history system and its norm
//! bounds, strong-order measurement and EM history states.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::history::{assemble, forward_substitute, rhs, solve, HistoryState, HistorySystem, QlssMode, SystemKind, QLSS_STREAM_TAG};
use crate::linalg::{norm2, spectral_norm, Mat};
use crate::model::{SdeProblem, TimeGrid};
use crate::prng::{clip, ClipBound, PcgStream};

#[derive(Clone, Debug)]
pub struct EmTrajectory {
    pub states: Vec<Vec<f64>>,
    /// `B(t_n) sqrt(dt) z_n`.
    pub noise: Vec<Vec<f64>>,
    pub grid: TimeGrid,
}

/// Clipped `z_n` for sample `i >= 1`, read sequentially from the stream.
pub fn em_noise(p: &SdeProblem, grid: &TimeGrid, stream: &PcgStream, i: u64, clip_bound: ClipBound) -> Vec<Vec<f64>> {
    let (r, m) = (grid.r, p.m);
    let mut cur = stream.cursor((i - 1) * (r * m) as u64 + 1);
    (0..r).map(|_| (0..m).map(|_| clip(cur.next_normal(), clip_bound)).collect()).collect()
}

fn em_increments(p: &SdeProblem, grid: &TimeGrid, z: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let sq = grid.dt.sqrt();
    let b_const = p.diffusion_constant.then(|| p.b(0.0).scale(sq));
    z.iter()
        .enumerate()
        .map(|(n, zn)| match &b_const {
            Some(b) => b.matvec(zn),
            None => p.b(grid.t(n)).scale(sq).matvec(zn),
        })
        .collect()
}

/// `I + A(t_n) dt` for every step.
pub fn em_blocks(p: &SdeProblem, grid: &TimeGrid) -> Vec<Mat> {
    (0..grid.r)
        .map(|n| {
            let mut blk = p.a(grid.t(n)).scale(grid.dt);
            for k in 0..p.n {
                blk.as_mut_slice()[k * p.n + k] += 1.0;
            }
            blk
        })
        .collect()
}

pub fn em_trajectory(p: &SdeProblem, grid: TimeGrid, stream: &PcgStream, i: u64, clip_bound: ClipBound) -> EmTrajectory {
    let z = em_noise(p, &grid, stream, i, clip_bound);
    let noise = em_increments(p, &grid, &z);
    let blocks = em_blocks(p, &grid);
    let mut states = Vec::with_capacity(grid.r + 1);
    states.push(p.x0.clone());
    for n in 0..grid.r {
        let mut next = blocks[n].matvec(&states[n]);
        for (x, d) in next.iter_mut().zip(&noise[n]) {
            *x += d;
        }
        states.push(next);
    }
    EmTrajectory { states, noise, grid }
}

pub fn assemble_em_system(p: &SdeProblem, grid: &TimeGrid) -> Result<HistorySystem> {
    assemble(SystemKind::Em, em_blocks(p, grid), 0)
}

/// `ceil(4 alpha_A² T / eta)`, the smallest step count with `dt <= eta / (4 alpha_A²)`.
pub fn em_min_steps(p: &SdeProblem) -> usize {
    let b = &p.bounds;
    let x = 4.0 * b.alpha_a * b.alpha_a * p.t_end / b.eta;
    ((x * (1.0 - 1e-12)).ceil() as usize).max(1)
}

#[derive(Clone, Debug, Serialize)]
pub struct EmNormReport {
    pub model: String,
    pub r: usize,
    pub dt: f64,
    pub dt_limit: f64,
    pub skipped: Option<String>,
    pub norm: f64,
    pub norm_bound: f64,
    pub inv_norm: f64,
    pub inv_bound: f64,
    pub cond: f64,
    pub cond_bound: f64,
    /// `max_t ||I + A(t) dt||` over sampled `t`.
    pub step_norm: f64,
    pub step_bound: f64,
    pub pass: bool,
}

pub fn em_norm_report(p: &SdeProblem, grid: &TimeGrid) -> Result<EmNormReport> {
    let b = &p.bounds;
    let dt_limit = b.eta / (4.0 * b.alpha_a * b.alpha_a);
    let mx = (b.eta * grid.t_end).max(1.0);
    let r = grid.r as f64;
    let mut rep = EmNormReport {
        model: p.name.clone(),
        r: grid.r,
        dt: grid.dt,
        dt_limit,
        skipped: None,
        norm: f64::NAN,
        norm_bound: 3.0,
        inv_norm: f64::NAN,
        inv_bound: 4.0 * r / mx,
        cond: f64::NAN,
        cond_bound: 12.0 * r / mx,
        step_norm: f64::NAN,
        step_bound: 1.0 - b.eta * grid.dt / 4.0,
        pass: false,
    };
    if grid.dt > dt_limit * (1.0 + 1e-12) {
        rep.skipped = Some(format!(
            "dt = {:.6e} exceeds eta/(4 alpha_A²) = {dt_limit:.6e}; need r >= {}",
            grid.dt,
            em_min_steps(p)
        ));
        return Ok(rep);
    }
    let sys = assemble_em_system(p, grid)?;
    let sv = sys.dense()?.to_nalgebra().singular_values();
    let hi = sv.iter().copied().fold(0.0, f64::max);
    let lo = sv.iter().copied().fold(f64::INFINITY, f64::min);
    rep.norm = hi;
    rep.inv_norm = 1.0 / lo;
    rep.cond = hi / lo;
    let mut step: f64 = 0.0;
    let samples = 64;
    for k in 0..=samples {
        let t = grid.t_end * k as f64 / samples as f64;
        let mut blk = p.a(t).scale(grid.dt);
        for j in 0..p.n {
            blk.as_mut_slice()[j * p.n + j] += 1.0;
        }
        step = step.max(spectral_norm(&blk)?);
    }
    rep.step_norm = step;
    rep.pass = rep.norm <= rep.norm_bound
        && rep.inv_norm <= rep.inv_bound
        && rep.cond <= rep.cond_bound
        && rep.step_norm <= rep.step_bound + 1e-12;
    Ok(rep)
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceRow {
    pub r: usize,
    pub rms_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceReport {
    pub model: String,
    pub paths: usize,
    pub r_fine: usize,
    pub rows: Vec<ConvergenceRow>,
    pub slope: f64,
    /// `max_r r² MSE`, the empirical strong-error constant.
    pub c_st: f64,
}

/// RMS pathwise error of EM on each `r` against a fine EM reference at
/// `64 max(r_list)` steps driven by the same Brownian increments.
pub fn strong_convergence(p: &SdeProblem, r_list: &[usize], paths: usize, stream: &PcgStream) -> Result<ConvergenceReport> {
    if r_list.len() < 2 || paths == 0 {
        return Err(Error::InvalidInput("need at least two step counts and one path".into()));
    }
    let r_max = *r_list.iter().max().unwrap();
    let r_fine = 64 * r_max;
    for &r in r_list {
        if r == 0 || r_fine % r != 0 {
            return Err(Error::InvalidInput(format!("step count {r} must divide {r_fine}")));
        }
    }
    let (nn, m) = (p.n, p.m);
    let fine = TimeGrid::new(p.t_end, r_fine, 1);
    let fine_blocks = em_blocks(p, &fine);
    let fine_b: Vec<Mat> = if p.diffusion_constant {
        vec![p.b(0.0); 1]
    } else {
        (0..r_fine).map(|n| p.b(fine.t(n))).collect()
    };
    let coarse: Vec<(TimeGrid, Vec<Mat>, Vec<Mat>)> = r_list
        .iter()
        .map(|&r| {
            let g = TimeGrid::new(p.t_end, r, 1);
            let bs = (0..r).map(|n| p.b(g.t(n)).scale(g.dt.sqrt())).collect();
            (g, em_blocks(p, &g), bs)
        })
        .collect();
    // Squared error per r and coarse time, summed over paths.
    let mut sq: Vec<Vec<f64>> = r_list.iter().map(|&r| vec![0.0; r + 1]).collect();
    let sqdt = fine.dt.sqrt();
    let mut z = vec![vec![0.0; m]; r_fine];
    for path in 0..paths {
        let mut cur = stream.cursor(path as u64 * (r_fine * m) as u64 + 1);
        for zn in z.iter_mut() {
            for v in zn.iter_mut() {
                *v = cur.next_normal();
            }
        }
        let mut xf = Vec::with_capacity(r_fine + 1);
        xf.push(p.x0.clone());
        let mut noise = vec![0.0; nn];
        for n in 0..r_fine {
            let bn = if p.diffusion_constant { &fine_b[0] } else { &fine_b[n] };
            bn.matvec_into(&z[n], &mut noise);
            let mut next = fine_blocks[n].matvec(&xf[n]);
            for (x, d) in next.iter_mut().zip(&noise) {
                *x += sqdt * d;
            }
            xf.push(next);
        }
        for (ci, (g, blocks, bs)) in coarse.iter().enumerate() {
            let f = r_fine / g.r;
            let scale = 1.0 / (f as f64).sqrt();
            let mut x = p.x0.clone();
            let mut zc = vec![0.0; m];
            for n in 0..g.r {
                zc.iter_mut().for_each(|v| *v = 0.0);
                for zf in &z[n * f..(n + 1) * f] {
                    for (a, b) in zc.iter_mut().zip(zf) {
                        *a += b;
                    }
                }
                zc.iter_mut().for_each(|v| *v *= scale);
                let mut next = blocks[n].matvec(&x);
                for (xi, d) in next.iter_mut().zip(bs[n].matvec(&zc)) {
                    *xi += d;
                }
                x = next;
                let d: Vec<f64> = x.iter().zip(&xf[(n + 1) * f]).map(|(a, b)| a - b).collect();
                sq[ci][n + 1] += d.iter().map(|v| v * v).sum::<f64>();
            }
        }
    }
    let rows: Vec<ConvergenceRow> = r_list
        .iter()
        .zip(&sq)
        .map(|(&r, s)| ConvergenceRow { r, rms_error: (s.iter().copied().fold(0.0, f64::max) / paths as f64).sqrt() })
        .collect();
    let slope = loglog_slope(&rows);
    let c_st = rows.iter().map(|row| (row.r as f64 * row.rms_error).powi(2)).fold(0.0, f64::max);
    Ok(ConvergenceReport { model: p.name.clone(), paths, r_fine, rows, slope, c_st })
}

/// Least-squares slope of `ln rms_error` against `ln r`.
pub fn loglog_slope(rows: &[ConvergenceRow]) -> f64 {
    let pts: Vec<(f64, f64)> = rows.iter().map(|row| ((row.r as f64).ln(), row.rms_error.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// `sqrt(||x0||² + m sigma² T U_SN²)`.
pub fn u_b_em(p: &SdeProblem, u_sn: f64) -> f64 {
    let s2 = p.bounds.sigma * p.bounds.sigma;
    (p.x0_norm_sq() + p.m as f64 * s2 * p.t_end * u_sn * u_sn).sqrt()
}

#[derive(Clone, Debug)]
pub struct EmHistorySample {
    pub state: HistoryState,
    pub reference: Vec<f64>,
    pub deviation: f64,
    pub rhs_norm: f64,
}

/// EM history states for one problem, step count and accuracy.
pub struct EmHistory<'a> {
    p: &'a SdeProblem,
    pub grid: TimeGrid,
    pub system: HistorySystem,
    pub clip: ClipBound,
    pub eps: f64,
    pub mode: QlssMode,
    pub u_b: f64,
    pub prefactor: f64,
    pub qlss_eps: f64,
    qlss_stream: PcgStream,
    /// `B sqrt(dt)` when the diffusion is constant.
    b_scaled: Mat,
}

impl<'a> EmHistory<'a> {
    pub fn build(p: &'a SdeProblem, r: usize, eps: f64, mode: QlssMode, clip_bound: ClipBound, aux: (u64, u64)) -> Result<Self> {
        let r_min = em_min_steps(p);
        if r < r_min {
            return Err(Error::InvalidInput(format!("EM history needs r >= ceil(4 alpha_A² T / eta) = {r_min}, got {r}")));
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidInput(format!("eps = {eps} must be positive")));
        }
        if !clip_bound.u_sn.is_finite() {
            return Err(Error::InvalidInput("history states need a finite clip bound".into()));
        }
        let grid = TimeGrid::new(p.t_end, r, 1);
        let system = assemble_em_system(p, &grid)?;
        let u_b = u_b_em(p, clip_bound.u_sn);
        let mx = p.max_one_eta_t();
        Ok(EmHistory {
            p,
            grid,
            system,
            clip: clip_bound,
            eps,
            mode,
            u_b,
            prefactor: mx / (8.0 * r as f64 * u_b),
            qlss_eps: eps * mx / (8.0 * r as f64),
            qlss_stream: PcgStream::new(aux.0, aux.1 ^ QLSS_STREAM_TAG),
            b_scaled: p.b(0.0).scale(grid.dt.sqrt()),
        })
    }

    fn perturbation(&self) -> f64 {
        match self.mode {
            QlssMode::Honest => 0.0,
            QlssMode::Adversarial => self.eps,
        }
    }

    pub fn sample_raw(&self, stream: &PcgStream, i: u64) -> Result<Vec<f64>> {
        let z = em_noise(self.p, &self.grid, stream, i, self.clip);
        let b = rhs(&self.p.x0, &em_increments(self.p, &self.grid, &z), 0);
        solve(&self.system, &b, self.perturbation(), &self.qlss_stream, (i - 1) * self.system.dim() as u64)
    }

    /// Same as `sample_raw`, writing into `out` and reusing `buf` without allocating.
    pub fn sample_raw_into(&self, stream: &PcgStream, i: u64, out: &mut Vec<f64>, buf: &mut Vec<f64>) -> Result<()> {
        if self.perturbation() > 0.0 || !self.p.diffusion_constant {
            *out = self.sample_raw(stream, i)?;
            return Ok(());
        }
        let (nn, m, r) = (self.p.n, self.p.m, self.grid.r);
        out.clear();
        out.resize(self.system.dim(), 0.0);
        buf.resize(m.max(nn), 0.0);
        out[..nn].copy_from_slice(&self.p.x0);
        let mut cur = stream.cursor((i - 1) * (r * m) as u64 + 1);
        for n in 0..r {
            for v in buf[..m].iter_mut() {
                *v = clip(cur.next_normal(), self.clip);
            }
            self.b_scaled.matvec_into(&buf[..m], &mut out[(n + 1) * nn..(n + 2) * nn]);
        }
        forward_substitute(&self.system, out, &mut buf[..nn]);
        Ok(())
    }

    /// Sample `i` verified against the forward recursion with identical `z`.
    pub fn sample(&self, stream: &PcgStream, i: u64) -> Result<EmHistorySample> {
        let traj = em_trajectory(self.p, self.grid, stream, i, self.clip);
        let b = rhs(&self.p.x0, &traj.noise, 0);
        let rhs_norm = norm2(&b);
        if rhs_norm > self.u_b * (1.0 + 1e-12) {
            return Err(Error::BoundViolation(format!("||B_EM|| = {rhs_norm:.6e} exceeds U_B = {:.6e}", self.u_b)));
        }
        let qlss = self.perturbation();
        let raw = solve(&self.system, &b, qlss, &self.qlss_stream, (i - 1) * self.system.dim() as u64)?;
        let reference: Vec<f64> = traj.states.concat();
        let d: Vec<f64> = raw.iter().zip(&reference).map(|(a, b)| a - b).collect();
        let deviation = norm2(&d);
        let budget = self.u_b * self.eps;
        if deviation > budget {
            return Err(Error::BoundViolation(format!("EM history deviation {deviation:.6e} exceeds U_B eps = {budget:.6e}")));
        }
        Ok(EmHistorySample {
            state: HistoryState {
                raw,
                prefactor: self.prefactor,
                u_b: self.u_b,
                qlss_eps: self.qlss_eps,
                perturbation: qlss * rhs_norm,
            },
            reference,
            deviation,
            rhs_norm,
        })
    }
}

pub fn em_history_state(
    p: &SdeProblem,
    r: usize,
    stream: &PcgStream,
    i: u64,
    eps: f64,
    mode: QlssMode,
    clip_bound: ClipBound,
) -> Result<EmHistorySample> {
    EmHistory::build(p, r, eps, mode, clip_bound, (stream.seed, stream.stream_id))?.sample(stream, i)
}
