//! Dense operator-splitting (ADMM) solver for convex QPs
//!
//! ```text
//! minimize ½xᵀPx + qᵀx + Σᵢ wᵢ·max(0, lᵢ − aᵢx)   subject to   l ≤ Ax ≤ u
//! ```
//!
//! Rows with `wᵢ > 0` have a soft lower bound: violating it costs `wᵢ` per
//! unit (an exact penalty) instead of making the problem infeasible. The
//! penalty is handled in the `z` step by its proximal map, so soft rows add
//! no variables.
//!
//! Iterates in the reduced-KKT form with Ruiz equilibration,
//! over-relaxation and adaptive step size, detects primal infeasibility from
//! the dual iterates, and finishes with an active-set polish that solves the
//! equality-constrained KKT system for the guessed active rows.

use nalgebra::{DMatrix, DVector};

const RHO_EQ_SCALE: f64 = 1e3;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a: DMatrix<f64>,
    pub l: DVector<f64>,
    pub u: DVector<f64>,
    /// Per-row penalty on lower-bound violation; 0 for a hard row.
    pub penalty: DVector<f64>,
}

impl QpProblem {
    /// A problem whose rows are all hard.
    pub fn new(p: DMatrix<f64>, q: DVector<f64>, a: DMatrix<f64>, l: DVector<f64>, u: DVector<f64>) -> Self {
        let penalty = DVector::zeros(l.len());
        Self { p, q, a, l, u, penalty }
    }

    pub fn with_penalty(mut self, penalty: DVector<f64>) -> Self {
        self.penalty = penalty;
        self
    }

    fn soft(&self, i: usize) -> bool {
        self.penalty[i] > 0.0
    }
    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn m(&self) -> usize {
        self.l.len()
    }

    /// Objective including the penalty of soft rows.
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        let ax = &self.a * x;
        let pen: f64 = (0..self.m())
            .filter(|i| self.soft(*i))
            .map(|i| self.penalty[i] * (self.l[i] - ax[i]).max(0.0))
            .sum();
        0.5 * x.dot(&(&self.p * x)) + self.q.dot(x) + pen
    }

    /// Per-row violation of the lower bound of soft rows.
    pub fn slack(&self, x: &DVector<f64>) -> Vec<f64> {
        let ax = &self.a * x;
        (0..self.m())
            .map(|i| if self.soft(i) { (self.l[i] - ax[i]).max(0.0) } else { 0.0 })
            .collect()
    }

    /// Largest violation of a hard bound (soft lower bounds excluded).
    pub fn infeasibility(&self, x: &DVector<f64>) -> f64 {
        let ax = &self.a * x;
        (0..self.m())
            .map(|i| {
                let low = if self.soft(i) { 0.0 } else { self.l[i] - ax[i] };
                low.max(ax[i] - self.u[i]).max(0.0)
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub rho: f64,
    pub sigma: f64,
    /// Over-relaxation factor in (0, 2).
    pub relaxation: f64,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub eps_pinf: f64,
    pub max_iter: usize,
    pub adapt_interval: usize,
    pub polish: bool,
    /// Feasibility tolerance accepted for a polished point.
    pub polish_tol: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            rho: 0.1,
            sigma: 1e-6,
            relaxation: 1.6,
            eps_abs: 1e-6,
            eps_rel: 1e-6,
            eps_pinf: 1e-7,
            max_iter: 4000,
            adapt_interval: 25,
            polish: true,
            polish_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    MaxIter,
    PrimalInfeasible,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub prim_res: f64,
    pub dual_res: f64,
    pub polished: bool,
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

struct Factor {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

fn factor(prob: &QpProblem, sigma: f64, rho: &DVector<f64>) -> Option<Factor> {
    let n = prob.n();
    let mut k = prob.p.clone();
    for i in 0..n {
        k[(i, i)] += sigma;
    }
    // Aᵀ diag(ρ) A
    let mut scaled = prob.a.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row *= rho[i];
    }
    k.gemm_tr(1.0, &prob.a, &scaled, 1.0);
    nalgebra::Cholesky::new(k).map(|chol| Factor { chol })
}

fn rho_vector(prob: &QpProblem, rho: f64) -> DVector<f64> {
    DVector::from_iterator(
        prob.m(),
        (0..prob.m()).map(|i| {
            let (l, u) = (prob.l[i], prob.u[i]);
            if l == f64::NEG_INFINITY && u == f64::INFINITY {
                RHO_MIN
            } else if l == u {
                rho * RHO_EQ_SCALE
            } else {
                rho
            }
        }),
    )
}

/// Row and column views of a mostly-zero matrix, for the iteration's
/// products.
struct Sparse {
    rows: Vec<Vec<(usize, f64)>>,
    cols: Vec<Vec<(usize, f64)>>,
}

impl Sparse {
    fn new(m: &DMatrix<f64>) -> Self {
        let mut rows = vec![Vec::new(); m.nrows()];
        let mut cols = vec![Vec::new(); m.ncols()];
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                let v = m[(i, j)];
                if v != 0.0 {
                    rows[i].push((j, v));
                    cols[j].push((i, v));
                }
            }
        }
        Sparse { rows, cols }
    }

    fn mul(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.rows.len(),
            self.rows.iter().map(|r| r.iter().map(|(j, v)| v * x[*j]).sum::<f64>()),
        )
    }

    fn tr_mul(&self, y: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.cols.len(),
            self.cols.iter().map(|c| c.iter().map(|(i, v)| v * y[*i]).sum::<f64>()),
        )
    }
}

/// Diagonal equilibration `x = D x̄`, rows scaled by `E`, cost by `c`.
struct Scaling {
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
}

const RUIZ_ITERS: usize = 15;
const SCALE_MIN: f64 = 1e-4;
const SCALE_MAX: f64 = 1e4;

fn equilibrate(prob: &QpProblem) -> (QpProblem, Scaling) {
    let n = prob.n();
    let m = prob.m();
    let mut p = prob.p.clone();
    let mut a = prob.a.clone();
    let mut q = prob.q.clone();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    let inv_sqrt = |norm: f64| {
        if norm < SCALE_MIN {
            1.0
        } else {
            (1.0 / norm.sqrt()).clamp(SCALE_MIN, SCALE_MAX)
        }
    };
    for _ in 0..RUIZ_ITERS {
        let dd = DVector::from_iterator(
            n,
            (0..n).map(|j| inv_sqrt(p.column(j).amax().max(a.column(j).amax()))),
        );
        let de = DVector::from_iterator(m, (0..m).map(|i| inv_sqrt(a.row(i).amax())));
        for j in 0..n {
            for i in 0..n {
                p[(i, j)] *= dd[i] * dd[j];
            }
            for i in 0..m {
                a[(i, j)] *= de[i] * dd[j];
            }
            q[j] *= dd[j];
        }
        d.component_mul_assign(&dd);
        e.component_mul_assign(&de);
    }
    let mean_col = if n > 0 {
        (0..n).map(|j| p.column(j).amax()).sum::<f64>() / n as f64
    } else {
        1.0
    };
    let c = (1.0 / mean_col.max(inf_norm(&q)).max(SCALE_MIN)).clamp(SCALE_MIN, SCALE_MAX);
    p *= c;
    q *= c;
    let l = prob.l.component_mul(&e);
    let u = prob.u.component_mul(&e);
    // w·max(0, l − aᵢx) = (w/eᵢ)·max(0, l̄ − āᵢx̄), then the cost scale.
    let penalty = prob.penalty.component_div(&e) * c;
    (QpProblem { p, q, a, l, u, penalty }, Scaling { d, e, c })
}

/// Solves `prob`, optionally warm-started from a previous primal/dual pair.
pub fn solve(
    prob: &QpProblem,
    settings: &QpSettings,
    warm: Option<(&DVector<f64>, &DVector<f64>)>,
) -> QpSolution {
    let n = prob.n();
    let m = prob.m();
    let (sp, sc) = equilibrate(prob);
    let (mut x, mut y) = match warm {
        Some((x0, y0)) if x0.len() == n && y0.len() == m => (
            x0.component_div(&sc.d),
            y0.component_div(&sc.e) * sc.c,
        ),
        _ => (DVector::zeros(n), DVector::zeros(m)),
    };
    // Projection onto [l, u], or for soft rows the proximal map of
    // w·max(0, l − z) + indicator(z ≤ u) with step 1/ρᵢ.
    let prox = |v: &DVector<f64>, rho: &DVector<f64>| {
        DVector::from_iterator(
            m,
            (0..m).map(|i| {
                let vi = v[i].min(sp.u[i]);
                if vi >= sp.l[i] {
                    vi
                } else if sp.penalty[i] > 0.0 {
                    let shifted = vi + sp.penalty[i] / rho[i];
                    shifted.min(sp.l[i])
                } else {
                    sp.l[i]
                }
            }),
        )
    };
    let unscale = |x: &DVector<f64>, z: &DVector<f64>, y: &DVector<f64>| {
        (
            x.component_mul(&sc.d),
            z.component_div(&sc.e),
            y.component_mul(&sc.e) / sc.c,
        )
    };
    let a_sp = Sparse::new(&sp.a);
    let p_sp = Sparse::new(&sp.p);
    let mut rho = settings.rho;
    let mut rho_vec = rho_vector(&sp, rho);
    let mut z = prox(&a_sp.mul(&x), &DVector::from_element(m, f64::INFINITY));
    let mut fac = match factor(&sp, settings.sigma, &rho_vec) {
        Some(f) => f,
        None => {
            return QpSolution {
                x: x.component_mul(&sc.d),
                y: DVector::zeros(m),
                status: QpStatus::MaxIter,
                iterations: 0,
                prim_res: f64::INFINITY,
                dual_res: f64::INFINITY,
                polished: false,
            }
        }
    };

    let alpha = settings.relaxation;
    let mut status = QpStatus::MaxIter;
    let mut prim_res = f64::INFINITY;
    let mut dual_res = f64::INFINITY;
    let mut iterations = 0;
    let mut last_tried: Option<Vec<(usize, Side)>> = None;

    for iter in 1..=settings.max_iter {
        iterations = iter;
        let rz = rho_vec.component_mul(&z) - &y;
        let rhs = settings.sigma * &x - &sp.q + a_sp.tr_mul(&rz);
        let x_tilde = fac.chol.solve(&rhs);
        let z_tilde = a_sp.mul(&x_tilde);

        let x_new = alpha * &x_tilde + (1.0 - alpha) * &x;
        let z_hat = alpha * &z_tilde + (1.0 - alpha) * &z;
        let z_new = prox(&(&z_hat + y.component_div(&rho_vec)), &rho_vec);
        let y_new = &y + rho_vec.component_mul(&(&z_hat - &z_new));
        let delta_y = &y_new - &y;

        x = x_new;
        z = z_new;
        y = y_new;

        // Residuals and tolerances on the unscaled problem.
        let ax = a_sp.mul(&x);
        let px = p_sp.mul(&x);
        let aty = a_sp.tr_mul(&y);
        prim_res = inf_norm(&(&ax - &z).component_div(&sc.e));
        dual_res = inf_norm(&(&px + &sp.q + &aty).component_div(&sc.d)) / sc.c;
        let eps_prim = settings.eps_abs
            + settings.eps_rel
                * inf_norm(&ax.component_div(&sc.e)).max(inf_norm(&z.component_div(&sc.e)));
        let eps_dual = settings.eps_abs
            + settings.eps_rel / sc.c
                * inf_norm(&px.component_div(&sc.d))
                    .max(inf_norm(&aty.component_div(&sc.d)))
                    .max(inf_norm(&sp.q.component_div(&sc.d)));
        if prim_res <= eps_prim && dual_res <= eps_dual {
            status = QpStatus::Solved;
            break;
        }
        if primal_infeasible(&sp, &delta_y, settings.eps_pinf) {
            status = QpStatus::PrimalInfeasible;
            break;
        }

        if settings.adapt_interval > 0 && iter % settings.adapt_interval == 0 {
            // An early polish that passes the optimality checks is exact.
            if settings.polish {
                let (ux, uz, uy) = unscale(&x, &z, &y);
                let active = guess_active(prob, &uz, &uy);
                if last_tried.as_ref() != Some(&active) {
                    let mut trial = QpSolution {
                        x: ux,
                        y: uy,
                        status: QpStatus::MaxIter,
                        iterations,
                        prim_res,
                        dual_res,
                        polished: false,
                    };
                    polish_with(prob, settings, &active, &mut trial);
                    if trial.polished {
                        return trial;
                    }
                    last_tried = Some(active);
                }
            }
            let prim_scale = inf_norm(&ax).max(inf_norm(&z)).max(1e-10);
            let dual_scale = inf_norm(&px)
                .max(inf_norm(&aty))
                .max(inf_norm(&sp.q))
                .max(1e-10);
            let sprim = inf_norm(&(&ax - &z));
            let sdual = inf_norm(&(&px + &sp.q + &aty));
            let ratio = ((sprim / prim_scale) / (sdual / dual_scale).max(1e-16)).sqrt();
            let new_rho = (rho * ratio).clamp(RHO_MIN, RHO_MAX);
            if new_rho > 5.0 * rho || new_rho < rho / 5.0 {
                let new_vec = rho_vector(&sp, new_rho);
                if let Some(f) = factor(&sp, settings.sigma, &new_vec) {
                    rho = new_rho;
                    rho_vec = new_vec;
                    fac = f;
                }
            }
        }
    }

    let (ux, uz, uy) = unscale(&x, &z, &y);
    let mut sol = QpSolution {
        x: ux,
        y: uy,
        status,
        iterations,
        prim_res,
        dual_res,
        polished: false,
    };
    if settings.polish && status != QpStatus::PrimalInfeasible {
        polish(prob, settings, &uz, &mut sol);
    }
    sol
}

/// Certificate check on the last dual step `δy`: `Aᵀδy ≈ 0` together with
/// `uᵀδy⁺ + lᵀδy⁻ < 0` proves that no `x` satisfies the bounds.
fn primal_infeasible(prob: &QpProblem, delta_y: &DVector<f64>, eps: f64) -> bool {
    let norm = inf_norm(delta_y);
    if norm < 1e-12 {
        return false;
    }
    let dy = delta_y / norm;
    if inf_norm(&prob.a.tr_mul(&dy)) > eps {
        return false;
    }
    let mut support = 0.0;
    for i in 0..prob.m() {
        if dy[i] > eps {
            if prob.u[i] == f64::INFINITY {
                return false;
            }
            support += prob.u[i] * dy[i];
        } else if dy[i] < -eps {
            if prob.l[i] == f64::NEG_INFINITY || prob.soft(i) {
                return false;
            }
            support += prob.l[i] * dy[i];
        }
    }
    support < -eps
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Side {
    Lower,
    Upper,
    /// A soft row below its bound, carrying its full penalty.
    Violated,
}

/// Constraints whose dual pushes them onto a bound, and soft rows the
/// proximal step left below theirs.
fn guess_active(prob: &QpProblem, z: &DVector<f64>, y: &DVector<f64>) -> Vec<(usize, Side)> {
    let mut active = Vec::new();
    for i in 0..prob.m() {
        if prob.soft(i) && z[i] < prob.l[i] {
            active.push((i, Side::Violated));
        } else if z[i] - prob.l[i] < -y[i] {
            active.push((i, Side::Lower));
        } else if prob.u[i] - z[i] < y[i] {
            active.push((i, Side::Upper));
        }
    }
    active
}

/// Guesses the active set from the ADMM iterate and solves the KKT system of
/// the equality-constrained problem on it. The polished point replaces the
/// iterate only when it is feasible and its multipliers have the right sign.
fn polish(prob: &QpProblem, settings: &QpSettings, z: &DVector<f64>, sol: &mut QpSolution) {
    let active = guess_active(prob, z, &sol.y);
    polish_with(prob, settings, &active, sol);
}

const POLISH_ROUNDS: usize = 3;

fn polish_with(prob: &QpProblem, settings: &QpSettings, active: &[(usize, Side)], sol: &mut QpSolution) {
    if let Some((x, y)) = refine(prob, settings, active.to_vec(), &sol.y.clone()) {
        accept(prob, sol, x, y);
        sol.status = QpStatus::Solved;
        return;
    }
    // Retry once with an active set read off the primal iterate alone.
    if sol.status != QpStatus::Solved {
        return;
    }
    let ax = &prob.a * &sol.x;
    let tol = 1e-6 * (1.0 + inf_norm(&ax));
    let guess: Vec<(usize, Side)> = (0..prob.m())
        .filter_map(|i| {
            if prob.soft(i) && ax[i] < prob.l[i] - tol {
                Some((i, Side::Violated))
            } else if (ax[i] - prob.l[i]).abs() <= tol && sol.y[i] <= 0.0 {
                Some((i, Side::Lower))
            } else if (prob.u[i] - ax[i]).abs() <= tol && sol.y[i] >= 0.0 {
                Some((i, Side::Upper))
            } else {
                None
            }
        })
        .collect();
    if let Some((x, y)) = refine(prob, settings, guess, &sol.y.clone()) {
        accept(prob, sol, x, y);
    }
}

fn accept(prob: &QpProblem, sol: &mut QpSolution, x: DVector<f64>, full_y: DVector<f64>) {
    sol.prim_res = prob.infeasibility(&x);
    sol.dual_res = inf_norm(&(&prob.p * &x + &prob.q + prob.a.tr_mul(&full_y)));
    sol.x = x;
    sol.y = full_y;
    sol.polished = true;
}

/// Solves the KKT system on `active`, then repairs the guess a few times:
/// soft rows whose multiplier exceeds the penalty become violated, violated
/// rows that end up feasible return to their bound, rows with a wrong-sign
/// multiplier leave and violated rows join. Returns the point and its full
/// dual vector once the optimality checks pass.
fn refine(
    prob: &QpProblem,
    settings: &QpSettings,
    mut active: Vec<(usize, Side)>,
    duals: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let mut duals = duals.clone();
    for _ in 0..POLISH_ROUNDS {
        trim(prob, &mut active, &duals);
        if active.iter().filter(|(_, s)| *s != Side::Violated).count() > prob.n() {
            return None;
        }
        let (x, y) = kkt_solve(prob, &active)?;
        if accept_polish(prob, settings, &active, &x, &y) {
            let full = expand_duals(prob, &active, &y);
            return Some((x, full));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return None;
        }
        let full = expand_duals(prob, &active, &y);
        let ax = &prob.a * &x;
        let tol = settings.polish_tol * (1.0 + inf_norm(&ax));
        let mut side: Vec<Option<Side>> = vec![None; prob.m()];
        for (i, s) in &active {
            side[*i] = Some(*s);
        }
        let mut next = Vec::new();
        for i in 0..prob.m() {
            let yi = full[i];
            let new = match side[i] {
                Some(Side::Lower) if prob.l[i] == prob.u[i] => Some(Side::Lower),
                Some(Side::Lower) if prob.soft(i) && yi < -prob.penalty[i] => Some(Side::Violated),
                Some(Side::Lower) if yi > 0.0 => None,
                Some(Side::Upper) if yi < 0.0 => None,
                Some(Side::Violated) if ax[i] > prob.l[i] + tol => Some(Side::Lower),
                Some(s) => Some(s),
                None if ax[i] < prob.l[i] - tol => Some(if prob.soft(i) { Side::Violated } else { Side::Lower }),
                None if ax[i] > prob.u[i] + tol => Some(Side::Upper),
                None => None,
            };
            if let Some(s) = new {
                next.push((i, s));
            }
        }
        if next == active {
            return None;
        }
        active = next;
        duals = full;
    }
    None
}

/// With more bound rows than variables the KKT system is overdetermined.
/// Soft rows with the most negative multipliers are the likeliest to be
/// violated at the optimum, so they are released first.
fn trim(prob: &QpProblem, active: &mut [(usize, Side)], duals: &DVector<f64>) {
    let bound = active.iter().filter(|(_, s)| *s != Side::Violated).count();
    if bound <= prob.n() {
        return;
    }
    let mut soft: Vec<usize> = (0..active.len())
        .filter(|&k| active[k].1 == Side::Lower && prob.soft(active[k].0))
        .collect();
    soft.sort_by(|&a, &b| duals[active[a].0].total_cmp(&duals[active[b].0]));
    for k in soft.into_iter().take(bound - prob.n()) {
        active[k].1 = Side::Violated;
    }
}

/// Full dual vector: solved multipliers on active rows, `−w` on violated
/// soft rows.
fn expand_duals(prob: &QpProblem, active: &[(usize, Side)], y: &DVector<f64>) -> DVector<f64> {
    let mut full = DVector::zeros(prob.m());
    let mut k = 0;
    for (i, side) in active {
        if *side == Side::Violated {
            full[*i] = -prob.penalty[*i];
        } else {
            full[*i] = y[k];
            k += 1;
        }
    }
    full
}

fn accept_polish(
    prob: &QpProblem,
    settings: &QpSettings,
    active: &[(usize, Side)],
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> bool {
    if !x.iter().all(|v| v.is_finite()) {
        return false;
    }
    let ax = &prob.a * x;
    let scale = 1.0 + inf_norm(&ax);
    let ftol = settings.polish_tol * scale;
    if prob.infeasibility(x) > ftol {
        return false;
    }
    let ytol = 1e-9 * (1.0 + inf_norm(y));
    let mut k = 0;
    let mut violated = vec![false; prob.m()];
    for (i, side) in active {
        if *side == Side::Violated {
            // Must really sit below its bound.
            if ax[*i] > prob.l[*i] + ftol {
                return false;
            }
            violated[*i] = true;
            continue;
        }
        let yi = y[k];
        k += 1;
        if prob.l[*i] == prob.u[*i] {
            continue;
        }
        let ok = match side {
            Side::Lower => yi <= ytol && (!prob.soft(*i) || yi >= -prob.penalty[*i] - ytol),
            Side::Upper => yi >= -ytol,
            Side::Violated => unreachable!(),
        };
        if !ok {
            return false;
        }
    }
    // Soft rows left out of the guess must not be violated.
    (0..prob.m()).all(|i| violated[i] || !prob.soft(i) || ax[i] >= prob.l[i] - ftol)
}

/// Solves `[P Aₐᵀ; Aₐ 0][x; y] = [−q; bₐ]` with light regularization and
/// iterative refinement.
fn kkt_solve(prob: &QpProblem, active: &[(usize, Side)]) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = prob.n();
    let mut q = prob.q.clone();
    let mut rows = Vec::new();
    for (i, side) in active {
        if *side == Side::Violated {
            // The penalty contributes −w·aᵢ to the gradient.
            q -= prob.penalty[*i] * prob.a.row(*i).transpose();
        } else {
            rows.push((*i, *side));
        }
    }
    let k = rows.len();
    let dim = n + k;
    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(&prob.p);
    let mut rhs = DVector::zeros(dim);
    for i in 0..n {
        rhs[i] = -q[i];
    }
    for (r, (i, side)) in rows.iter().enumerate() {
        for c in 0..n {
            let v = prob.a[(*i, c)];
            kkt[(n + r, c)] = v;
            kkt[(c, n + r)] = v;
        }
        rhs[n + r] = match side {
            Side::Lower => prob.l[*i],
            Side::Upper => prob.u[*i],
            Side::Violated => unreachable!(),
        };
    }
    let delta = 1e-10;
    let mut reg = kkt.clone();
    for i in 0..n {
        reg[(i, i)] += delta;
    }
    for i in n..dim {
        reg[(i, i)] -= delta;
    }
    let lu = reg.lu();
    let mut sol = lu.solve(&rhs)?;
    for _ in 0..5 {
        let resid = &rhs - &kkt * &sol;
        if inf_norm(&resid) < 1e-14 {
            break;
        }
        sol += lu.solve(&resid)?;
    }
    let x = sol.rows(0, n).into_owned();
    let y = sol.rows(n, k).into_owned();
    Some((x, y))
}
