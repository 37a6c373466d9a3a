//! Optimal-parameter constructions, distance to the optimal manifold, and
//! the diagnostics behind the local convergence analysis.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionParams, Block, EffectiveParams};
use crate::error::{contract, Result};
use crate::linalg::{dot, Matrix};
use crate::prompt::{BlockLayout, Mode, Prompt};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Scaled optimal parameters together with the canonical (`c = 1`) effective pair.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimalConstruction<T> {
    pub params: AttentionParams<T>,
    pub canonical: EffectiveParams<T>,
    pub c: T,
}

impl<T: Scalar> OptimalConstruction<T> {
    pub fn layout(&self) -> BlockLayout {
        self.params.layout()
    }

    /// `(cP12*, c⁻¹V̄21*)`.
    pub fn effective(&self) -> EffectiveParams<T> {
        self.canonical.scaled(&self.c)
    }
}

fn canonical_p12<T: Scalar>(layout: &BlockLayout) -> Matrix<T> {
    let (d, m) = (layout.d, layout.m);
    let mut p = Matrix::zeros(layout.top(), layout.bottom());
    // w̃ = (1; λ; w): the w block starts after the constant and λ.
    let wc = 1 + m;
    for k in 0..d {
        p[(k, wc + k)] = -T::one();
        p[(d + k, wc + k)] = T::one();
    }
    p[(2 * d, 0)] = T::one();
    p
}

pub fn construct_sarsa_optimal<T: Scalar>(d: usize, alpha: T, c: T) -> Result<OptimalConstruction<T>> {
    if d == 0 {
        return Err(contract("d must be positive"));
    }
    if c.is_zero() {
        return Err(contract("the scale c must be nonzero"));
    }
    let layout = BlockLayout::sarsa(d);
    let mut v = Matrix::zeros(d, layout.top());
    for k in 0..d {
        v[(k, k)] = alpha.clone();
    }
    finish(layout, EffectiveParams { p12: canonical_p12(&layout), v21_bar: v }, c)
}

/// Readout rows are `(λ; w)`: `αI` on the score columns for `λ`, `βI` on the
/// `φ_V` columns for `w`.
pub fn construct_ac_optimal<T: Scalar>(d: usize, m: usize, alpha: T, beta: T, c: T) -> Result<OptimalConstruction<T>> {
    if d == 0 || m == 0 {
        return Err(contract("d and m must be positive"));
    }
    if c.is_zero() {
        return Err(contract("the scale c must be nonzero"));
    }
    let layout = BlockLayout::actor_critic(d, m);
    let mut v = Matrix::zeros(m + d, layout.top());
    for k in 0..m {
        v[(k, 2 * d + 1 + k)] = alpha.clone();
    }
    for k in 0..d {
        v[(m + k, k)] = beta.clone();
    }
    finish(layout, EffectiveParams { p12: canonical_p12(&layout), v21_bar: v }, c)
}

fn finish<T: Scalar>(layout: BlockLayout, canonical: EffectiveParams<T>, c: T) -> Result<OptimalConstruction<T>> {
    let params = AttentionParams::from_blocks(layout, &canonical.scaled(&c), None, None)?;
    Ok(OptimalConstruction { params, canonical, c })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldProjection {
    pub c_hat: f64,
    pub distance: f64,
    /// `(U, W)` = learned minus the nearest manifold point.
    pub residual: EffectiveParams<f64>,
    /// True when the nearest point is on the `c < 0` branch.
    pub negative_branch: bool,
    /// `⟨U,P12*⟩ − c⁻²⟨W,V̄21*⟩` at `|c_hat|`.
    pub normal_residual: f64,
    /// False when the minimiser sits on an endpoint of the search interval.
    pub interior: bool,
}

struct Objective {
    pa: f64,
    aa: f64,
    vb: f64,
    bb: f64,
    pp: f64,
    vv: f64,
}

impl Objective {
    fn new(x: &EffectiveParams<f64>, star: &EffectiveParams<f64>) -> Self {
        Self {
            pa: x.p12.frob_dot(&star.p12),
            aa: star.p12.frob_norm_sq(),
            vb: x.v21_bar.frob_dot(&star.v21_bar),
            bb: star.v21_bar.frob_norm_sq(),
            pp: x.p12.frob_norm_sq(),
            vv: x.v21_bar.frob_norm_sq(),
        }
    }

    /// `‖P − cA‖² + ‖V − B/c‖²`.
    fn value(&self, c: f64) -> f64 {
        (self.pp - 2.0 * c * self.pa + c * c * self.aa) + (self.vv - 2.0 * self.vb / c + self.bb / (c * c))
    }

    fn derivative(&self, c: f64) -> f64 {
        -2.0 * self.pa + 2.0 * c * self.aa + 2.0 * self.vb / (c * c) - 2.0 * self.bb / (c * c * c)
    }

    fn minimise(&self, lo: f64, hi: f64) -> f64 {
        const GRID: usize = 400;
        let (llo, lhi) = (lo.ln(), hi.ln());
        let at = |k: usize| (llo + (lhi - llo) * k as f64 / GRID as f64).exp();
        let best = (0..=GRID).min_by(|&a, &b| self.value(at(a)).total_cmp(&self.value(at(b)))).unwrap();
        let mut a = at(best.saturating_sub(1));
        let mut b = at((best + 1).min(GRID));
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        let mut x1 = b - phi * (b - a);
        let mut x2 = a + phi * (b - a);
        let (mut f1, mut f2) = (self.value(x1), self.value(x2));
        for _ in 0..200 {
            if b - a <= 1e-15 * b {
                break;
            }
            if f1 <= f2 {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - phi * (b - a);
                f1 = self.value(x1);
            } else {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + phi * (b - a);
                f2 = self.value(x2);
            }
        }
        let mut c = 0.5 * (a + b);
        // Refine on the stationarity condition when a sign change is bracketed.
        let (mut l, mut r) = (at(best.saturating_sub(1)), at((best + 1).min(GRID)));
        if self.derivative(l) < 0.0 && self.derivative(r) > 0.0 {
            for _ in 0..200 {
                let mid = 0.5 * (l + r);
                if mid <= l || mid >= r {
                    break;
                }
                if self.derivative(mid) < 0.0 {
                    l = mid;
                } else {
                    r = mid;
                }
            }
            // near the minimum the expanded objective is dominated by cancellation,
            // so the bracketed root is more accurate than any value comparison
            c = 0.5 * (l + r);
        }
        for edge in [lo, hi] {
            if self.value(edge) < self.value(c) {
                c = edge;
            }
        }
        c
    }
}

fn project_branch(x: &EffectiveParams<f64>, star: &EffectiveParams<f64>, lo: f64, hi: f64) -> (f64, f64) {
    let obj = Objective::new(x, star);
    let c = obj.minimise(lo, hi);
    (c, obj.value(c).max(0.0))
}

/// Nearest point of `{(cP12*, c⁻¹V̄21*) : |c| ∈ [c_lo, c_hi]}`.
pub fn project_to_manifold(
    effective: &EffectiveParams<f64>,
    canonical: &EffectiveParams<f64>,
    c_interval: (f64, f64),
) -> Result<ManifoldProjection> {
    let (lo, hi) = c_interval;
    if !(lo > 0.0 && lo.is_finite() && hi.is_finite()) {
        return Err(contract(format!("c interval must lie in (0, ∞), got [{lo}, {hi}]")));
    }
    if hi < lo {
        return Err(contract(format!("empty c interval [{lo}, {hi}]")));
    }
    if effective.p12.shape() != canonical.p12.shape() || effective.v21_bar.shape() != canonical.v21_bar.shape() {
        return Err(contract("effective parameters and construction have different shapes"));
    }
    let (c_pos, f_pos) = project_branch(effective, canonical, lo, hi);
    let negated = effective.scale(&-1.0);
    let (c_neg, f_neg) = project_branch(&negated, canonical, lo, hi);
    let (c_abs, negative_branch) = if f_neg < f_pos { (c_neg, true) } else { (c_pos, false) };
    let c_hat = if negative_branch { -c_abs } else { c_abs };
    let residual = effective.sub(&canonical.scaled(&c_hat));
    let distance = residual.norm_sq().sqrt();
    // The normal equation for the c < 0 branch is the same one written for (−U, −W) at |c|.
    let sign = if negative_branch { -1.0 } else { 1.0 };
    let normal_residual =
        sign * (residual.p12.frob_dot(&canonical.p12) - residual.v21_bar.frob_dot(&canonical.v21_bar) / (c_abs * c_abs));
    let interior = c_abs > lo && c_abs < hi;
    Ok(ManifoldProjection { c_hat, distance, residual, negative_branch, normal_residual, interior })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InertViolation {
    pub matrix: char,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InertReport {
    pub unchanged: bool,
    pub first_violation: Option<InertViolation>,
    pub violations: usize,
}

/// Bitwise comparison of `P11, P21, V11, V12` and the constant rows of `V21, V22`.
pub fn check_inert_blocks(before: &AttentionParams<f64>, after: &AttentionParams<f64>) -> Result<InertReport> {
    if before.layout() != after.layout() {
        return Err(contract("inert-block check needs identical layouts"));
    }
    let layout = before.layout();
    let (t, dim) = (layout.top(), layout.dim());
    let mut cells: Vec<(char, usize, usize)> = Vec::new();
    for r in 0..dim {
        for c in 0..t {
            cells.push(('P', r, c));
        }
    }
    for r in 0..t {
        for c in 0..dim {
            cells.push(('V', r, c));
        }
    }
    for c in 0..dim {
        cells.push(('V', t, c));
    }
    let mut first = None;
    let mut count = 0;
    for (which, r, c) in cells {
        let (a, b) = if which == 'P' { (before.p()[(r, c)], after.p()[(r, c)]) } else { (before.v()[(r, c)], after.v()[(r, c)]) };
        if a.to_bits() != b.to_bits() {
            count += 1;
            first.get_or_insert(InertViolation { matrix: which, row: r, col: c });
        }
    }
    Ok(InertReport { unchanged: count == 0, first_violation: first, violations: count })
}

/// Blocks that must stay exactly zero when the quadratic path is frozen.
pub fn quadratic_blocks_zero(params: &AttentionParams<f64>) -> bool {
    [Block::P22, Block::V22Bar].iter().all(|b| params.block(*b).as_slice().iter().all(|x| x.to_bits() == 0))
}

/// Boundedness, excitation and cancellation constants of the local analysis,
/// estimated from a Monte-Carlo sample of SARSA prompts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlConstants {
    pub b_phi: f64,
    pub b_r: f64,
    pub b_w_tilde: f64,
    pub b_sigma: f64,
    pub c_q: f64,
    pub kappa_w_tilde: f64,
    pub kappa_r: f64,
    pub kappa_q: f64,
    /// Largest sampled cancellation ratio; a lower bound on the true `ρ`.
    pub rho: f64,
    pub m0: f64,
    pub big_m0: f64,
    pub mu_r: f64,
    pub k_r: f64,
    pub lambda_r: f64,
    pub r: f64,
    /// `r < √m0 / (3 C_Q)`.
    pub in_regime: bool,
    pub violations: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlSettings {
    pub alpha: f64,
    pub c_minus: f64,
    pub c_plus: f64,
    pub r: f64,
    pub directions: usize,
    pub kappa_tol: f64,
}

impl Default for PlSettings {
    fn default() -> Self {
        Self { alpha: 0.2, c_minus: 0.05, c_plus: 20.0, r: 0.0, directions: 200, kappa_tol: 1e-12 }
    }
}

pub fn mu_r(m0: f64, big_m0: f64, c_q: f64, r: f64) -> f64 {
    let num = m0 - 3.0 * c_q * m0.sqrt() * r;
    let den = big_m0.sqrt() + c_q * r;
    num * num / (den * den)
}

pub fn k_r(b_sigma: f64, b_w_tilde: f64, c_minus: f64, c_plus: f64, d: usize, r: f64) -> f64 {
    let a = c_plus * ((2 * d + 1) as f64).sqrt() + r;
    let b = (d as f64).sqrt() / c_minus + r;
    2f64.sqrt() * b_sigma * b_w_tilde * (a * a + b * b).sqrt()
}

pub fn lambda_r(m0: f64, c_q: f64, r: f64) -> f64 {
    let x = m0.sqrt() - c_q * r;
    0.5 * x * x
}

impl PlConstants {
    /// Derived constants from the primitive bounds, excitation levels and `ρ`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_primitives(
        b_phi: f64,
        b_r: f64,
        b_w_tilde: f64,
        kappas: (f64, f64, f64),
        rho: f64,
        settings: &PlSettings,
        d: usize,
    ) -> Self {
        let (kappa_w_tilde, kappa_r, kappa_q) = kappas;
        let (cm, cp, alpha, r) = (settings.c_minus, settings.c_plus, settings.alpha, settings.r);
        let b_sigma = 2.0 * b_phi * b_phi + b_r * b_r;
        let c_q = 0.5 * b_sigma * b_w_tilde;
        let m0 = (1.0 - rho) * (alpha * alpha * kappa_r * kappa_w_tilde / (cp * cp)).min(cm * cm * kappa_q);
        let big_m0 = b_sigma * b_sigma * b_w_tilde * b_w_tilde * (alpha * alpha / (cm * cm) + 2.0 * cp * cp);
        let mut violations = Vec::new();
        for (name, k) in [("parameter excitation (κ_w̃)", kappa_w_tilde), ("Bellman-regressor excitation (κ_R)", kappa_r), ("TD-target excitation (κ_q)", kappa_q)] {
            if k <= settings.kappa_tol {
                violations.push(format!("{name}: estimate {k:.3e} is not positive"));
            }
        }
        if rho >= 1.0 {
            violations.push(format!("no destructive cancellation: sampled ratio {rho:.3} reaches 1"));
        }
        let in_regime = m0 > 0.0 && r < m0.sqrt() / (3.0 * c_q);
        Self {
            b_phi,
            b_r,
            b_w_tilde,
            b_sigma,
            c_q,
            kappa_w_tilde,
            kappa_r,
            kappa_q,
            rho,
            m0,
            big_m0,
            mu_r: mu_r(m0, big_m0, c_q, r),
            k_r: k_r(b_sigma, b_w_tilde, cm, cp, d, r),
            lambda_r: lambda_r(m0, c_q, r),
            r,
            in_regime,
            violations,
        }
    }
}

/// Per-sample quantities used by the constant estimates.
struct ZStats {
    w_tilde: Vec<f64>,
    /// `R = (1/n) Σ φ_i x_iᵀ`, `d × (2d+1)`.
    reg: Matrix<f64>,
    /// `b = Σ̂ P12* w̃`.
    b: Vec<f64>,
}

fn z_stats(prompt: &Prompt<f64>, p_star: &Matrix<f64>) -> ZStats {
    let d = prompt.layout().d;
    let sigma = prompt.sigma_hat();
    let w_tilde = prompt.w_tilde();
    let reg = sigma.block(0..d, 0..sigma.cols());
    let b = sigma.matvec(&p_star.matvec(&w_tilde));
    ZStats { w_tilde, reg, b }
}

/// Estimates [`PlConstants`] from `n_samples` SARSA prompts drawn by `sampler`.
pub fn estimate_pl_constants(
    mut sampler: impl FnMut(&mut Rng) -> Result<Prompt<f64>>,
    n_samples: usize,
    settings: &PlSettings,
    rng: &mut Rng,
) -> Result<PlConstants> {
    if n_samples < 100 {
        return Err(contract("PL constant estimation needs at least 100 samples"));
    }
    if !(settings.c_minus > 0.0 && settings.c_plus >= settings.c_minus) {
        return Err(contract("invalid c interval"));
    }
    let mut prompts = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let p = sampler(rng)?;
        if p.mode() != Mode::Sarsa {
            return Err(contract("PL constants are defined for SARSA prompts"));
        }
        prompts.push(p);
    }
    let layout = prompts[0].layout();
    let d = layout.d;
    if prompts.iter().any(|p| p.layout() != layout) {
        return Err(contract("sampled prompts have inconsistent layouts"));
    }
    let star = construct_sarsa_optimal(d, settings.alpha, 1.0)?.canonical;
    let (mut b_phi, mut b_r, mut b_w) = (0f64, 0f64, 0f64);
    let top = layout.top();
    let mut e_ww = Matrix::zeros(d + 1, d + 1);
    let mut e_rr = Matrix::zeros(top, top);
    let mut e_bb = Matrix::zeros(top, top);
    let inv = 1.0 / n_samples as f64;
    let mut stats = Vec::with_capacity(n_samples);
    for p in &prompts {
        for i in 0..p.n() {
            let x = p.x(i);
            b_phi = b_phi.max(dot(&x[..d], &x[..d]).sqrt()).max(dot(&x[d..2 * d], &x[d..2 * d]).sqrt());
            b_r = b_r.max(x[2 * d].abs());
        }
        let z = z_stats(p, &star.p12);
        b_w = b_w.max(dot(&z.w_tilde, &z.w_tilde).sqrt());
        e_ww.add_outer(&inv, &z.w_tilde, &z.w_tilde);
        e_rr = e_rr.add(&z.reg.transpose().matmul(&z.reg).scale(&inv));
        e_bb.add_outer(&inv, &z.b, &z.b);
        stats.push(z);
    }
    let kappas = (e_ww.min_symmetric_eigenvalue(), e_rr.min_symmetric_eigenvalue(), e_bb.min_symmetric_eigenvalue());
    let rho = estimate_rho(&stats, &star, settings, rng);
    Ok(PlConstants::from_primitives(b_phi, b_r, b_w, kappas, rho, settings, d))
}

/// Largest `|E⟨RUw̃, Wb⟩| / √(E‖RUw̃‖² E‖Wb‖²)` over random normal directions.
fn estimate_rho(stats: &[ZStats], star: &EffectiveParams<f64>, settings: &PlSettings, rng: &mut Rng) -> f64 {
    let mut best = 0f64;
    let (lo, hi) = (settings.c_minus.ln(), settings.c_plus.ln());
    for _ in 0..settings.directions {
        let c = if hi > lo { rng.random_range(lo..=hi).exp() } else { settings.c_minus };
        let mut u: Matrix<f64> = Matrix::from_fn(star.p12.rows(), star.p12.cols(), |_, _| rng.sample(StandardNormal));
        let mut w: Matrix<f64> = Matrix::from_fn(star.v21_bar.rows(), star.v21_bar.cols(), |_, _| rng.sample(StandardNormal));
        // remove the tangent component (P12*, −c⁻²V̄21*)
        let tp = &star.p12;
        let tv = star.v21_bar.scale(&(-1.0 / (c * c)));
        let coef = (u.frob_dot(tp) + w.frob_dot(&tv)) / (tp.frob_norm_sq() + tv.frob_norm_sq());
        u = u.sub(&tp.scale(&coef));
        w = w.sub(&tv.scale(&coef));
        let (mut cross, mut aa, mut bb) = (0.0, 0.0, 0.0);
        for z in stats {
            let a = z.reg.matvec(&u.matvec(&z.w_tilde));
            let b = w.matvec(&z.b);
            cross += dot(&a, &b);
            aa += dot(&a, &a);
            bb += dot(&b, &b);
        }
        if aa > 0.0 && bb > 0.0 {
            best = best.max(cross.abs() / (aa * bb).sqrt());
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlLogEntry {
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlTrajectoryReport {
    /// `½‖∇L‖² / L` per step; `None` where `L < 1e-14`.
    pub ratios: Vec<Option<f64>>,
    pub running_min: Vec<Option<f64>>,
    /// Smallest observed ratio, an empirical PL constant.
    pub empirical_pl: Option<f64>,
    pub below_mu_r: usize,
    pub skipped: usize,
    /// `(rate, r²)` of an exponential fit `L(t) ≈ L(0) e^{−rate·t}`.
    pub fitted_rate: Option<(f64, f64)>,
}

pub fn pl_trajectory_check(log: &[PlLogEntry], mu_r: Option<f64>) -> PlTrajectoryReport {
    let mut ratios = Vec::with_capacity(log.len());
    let mut running_min = Vec::with_capacity(log.len());
    let mut cur: Option<f64> = None;
    let mut below = 0;
    let mut skipped = 0;
    for e in log {
        if e.loss < 1e-14 {
            skipped += 1;
            ratios.push(None);
        } else {
            let q = 0.5 * e.grad_norm * e.grad_norm / e.loss;
            if mu_r.is_some_and(|m| q < m) {
                below += 1;
            }
            cur = Some(cur.map_or(q, |c: f64| c.min(q)));
            ratios.push(Some(q));
        }
        running_min.push(cur);
    }
    let losses: Vec<f64> = log.iter().map(|e| e.loss).collect();
    PlTrajectoryReport { ratios, running_min, empirical_pl: cur, below_mu_r: below, skipped, fitted_rate: fit_exponential_rate(&losses) }
}

/// Least-squares slope of `ln L` against the step index, as `(rate, r²)` with
/// `L ≈ A e^{−rate·t}`. Entries below `1e-300` are ignored.
pub fn fit_exponential_rate(losses: &[f64]) -> Option<(f64, f64)> {
    let pts: Vec<(f64, f64)> = losses.iter().enumerate().filter(|(_, l)| **l > 1e-300 && l.is_finite()).map(|(t, l)| (t as f64, l.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some((-slope, r2))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureMetrics {
    pub projection: ManifoldProjection,
    pub cos_p12: f64,
    pub cos_v21_bar: f64,
    /// Norm of entries where the canonical pattern is zero, over the total norm.
    pub off_pattern_mass: f64,
}

fn cosine(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    let den = a.frob_norm() * b.frob_norm();
    if den == 0.0 { 0.0 } else { a.frob_dot(b) / den }
}

pub fn structure_recovery_metrics(
    learned: &EffectiveParams<f64>,
    canonical: &EffectiveParams<f64>,
    c_interval: (f64, f64),
) -> Result<StructureMetrics> {
    let projection = project_to_manifold(learned, canonical, c_interval)?;
    let c = projection.c_hat;
    let target = canonical.scaled(&c);
    let cos_p12 = cosine(&learned.p12, &target.p12);
    let cos_v21_bar = cosine(&learned.v21_bar, &target.v21_bar);
    let mut off = 0.0;
    for (x, s) in learned.to_flat().iter().zip(canonical.to_flat()) {
        if s == 0.0 {
            off += x * x;
        }
    }
    let total = learned.norm_sq();
    let off_pattern_mass = if total == 0.0 { 0.0 } else { (off / total).sqrt() };
    Ok(StructureMetrics { projection, cos_p12, cos_v21_bar, off_pattern_mass })
}

/// Heatmap export: one CSV line per row.
pub fn matrix_csv(m: &Matrix<f64>) -> String {
    let mut out = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
