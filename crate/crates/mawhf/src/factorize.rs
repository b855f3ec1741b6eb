//! Fixed-point solvers for the supremum and infimum factorizations.
//!
//! The supremum side iterates on `M = E e^{ξ̄(θ_s)C}` (column rate convention:
//! `M_kr = E_k[e^{c_r ξ̄(θ_s)}; x(θ_s)=r]`): each sweep recomputes the atom
//! `p₊(s) = s(sI + M Λ F̄₀(0))^{-1} P_s` and re-derives `M` from the drawdown
//! transform assembled out of half-line projections of the exact `Φ(s,·)`.
//! Those projections do not change across sweeps, so they are computed once
//! per `(model, s)` and every iteration is plain matrix algebra. The infimum
//! side mirrors this with the row-rate convention
//! `m̌_kr = E_k[e^{c_k ξ⁻(θ_s)}; x(θ_s)=r]`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::inversion::{
    exp_smooth_convolution, minus_projection_moment, projections_for, ContourSide, ContourTable,
    GriddedDistribution, Projections, SmoothSide,
};
use crate::linalg;
use crate::model::{Model, Orientation};
use crate::spectral::CumulantEvaluator;
use crate::{Error, Result};

/// Real probe set used for identity checks and transform cross-checks.
pub const ALPHA_PROBES: usize = 32;

pub fn alpha_probes() -> Vec<f64> {
    (0..ALPHA_PROBES)
        .map(|i| {
            let u = (i as f64 + 0.5) / ALPHA_PROBES as f64;
            -6.0 + 12.0 * u
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixedPointInit {
    /// Start from `E e^{ξ̄ C} = I` (zero drawdown).
    Identity,
    /// Start from the zero matrix.
    Zero,
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub max_iterations: usize,
    pub tolerance: f64,
    pub init: FixedPointInit,
    /// Re-run from the other initialization and require agreement.
    pub check_uniqueness: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            max_iterations: 500,
            tolerance: 1e-12,
            init: FixedPointInit::Identity,
            check_uniqueness: true,
        }
    }
}

/// Solved supremum factorization: the atom of `ξ⁺(θ_s)` at zero, its
/// complement, the drawdown exponential moment, the matrix tail exponent of
/// `P{ξ⁺(θ_s) > x} = q₊ e^{-D x}`, and the drawdown distribution grid.
#[derive(Debug, Clone)]
pub struct SupFactorization {
    pub s: f64,
    pub p_plus: DMatrix<f64>,
    pub q_plus: DMatrix<f64>,
    /// `M = E e^{ξ̄(θ_s) C}`, entries in `[0,1]`.
    pub drawdown_exp_moment: DMatrix<f64>,
    /// `D_sup = P_s^{-1} C p₊(s)`; eigenvalues have positive real part.
    pub tail_exponent: DMatrix<f64>,
    /// Distribution function of the drawdown `ξ̄(θ_s)` on `x <= 0`; the atom
    /// field carries the mass at zero.
    pub minus_dist: GriddedDistribution,
    pub iterations: usize,
    pub residual: f64,
    pub residual_history: Vec<f64>,
    ps: DMatrix<f64>,
    rates: Vec<f64>,
}

impl SupFactorization {
    /// `Φ₊(s,α) = (C - iα)(p₊ P_s^{-1} C - iα)^{-1} p₊`.
    pub fn phi_sup(&self, alpha: Complex64) -> Result<DMatrix<Complex64>> {
        let m = self.ps.nrows();
        let ia = Complex64::new(0.0, 1.0) * alpha;
        let ps_inv_c = linalg::solve(&self.ps, &diag(&self.rates), "P_s inverse")?;
        let inner = linalg::to_complex(&(&self.p_plus * ps_inv_c))
            - DMatrix::<Complex64>::identity(m, m) * ia;
        let inv = linalg::guarded_inverse(&inner, "supremum transform")?;
        let c_minus_ia =
            linalg::to_complex(&diag(&self.rates)) - DMatrix::<Complex64>::identity(m, m) * ia;
        Ok(c_minus_ia * inv * linalg::to_complex(&self.p_plus))
    }

    /// `P{ξ⁺(θ_s) > x, ·} = q₊ e^{-D_sup x}` for `x > 0`.
    pub fn sup_tail(&self, x: f64) -> DMatrix<f64> {
        assert!(x >= 0.0);
        &self.q_plus * linalg::expm(&(&self.tail_exponent * (-x)))
    }

    /// First-passage transform `T⁺(s,x) = q₊ P_s^{-1} e^{-C p₊ P_s^{-1} x}`.
    pub fn t_plus(&self, x: f64) -> Result<DMatrix<f64>> {
        if x < 0.0 {
            return Err(Error::Unsupported("T⁺ is defined for levels x > 0".into()));
        }
        let ps_inv = linalg::guarded_inverse(&self.ps, "P_s inverse")?;
        let exponent = diag(&self.rates) * &self.p_plus * &ps_inv;
        Ok(&self.q_plus * &ps_inv * linalg::expm(&(exponent * (-x))))
    }

    /// Transform of the drawdown law from the grid (atom included).
    pub fn phi_drawdown(&self, alpha: f64) -> DMatrix<Complex64> {
        self.minus_dist.retransform(alpha)
    }

    pub fn resolvent(&self) -> &DMatrix<f64> {
        &self.ps
    }
}

/// Solved infimum factorization: the atom of the drawup `ξ̌(θ_s)` at zero, its
/// complement, the infimum exponential moment, the tail exponent of
/// `P{ξ̌(θ_s) > x} = e^{-D x} q̌₊`, and the infimum distribution grid.
#[derive(Debug, Clone)]
pub struct InfFactorization {
    pub s: f64,
    pub p_check_plus: DMatrix<f64>,
    pub q_check_plus: DMatrix<f64>,
    /// `m̌ = E e^{C ξ⁻(θ_s)}` (row rates), entries in `[0,1]`.
    pub infimum_exp_moment: DMatrix<f64>,
    /// `D_inf = p̌₊ C P_s^{-1}`.
    pub tail_exponent: DMatrix<f64>,
    /// Distribution function of `ξ⁻(θ_s)` on `x <= 0`; the atom field carries
    /// `P{ξ⁻(θ_s) = 0}` (nonzero only in zero-drift mode).
    pub min_dist: GriddedDistribution,
    pub iterations: usize,
    pub residual: f64,
    pub residual_history: Vec<f64>,
    ps: DMatrix<f64>,
    rates: Vec<f64>,
}

impl InfFactorization {
    /// `Φ⁺(s,α) = p̌₊ (C P_s^{-1} p̌₊ - iα)^{-1} (C - iα)`.
    pub fn phi_drawup(&self, alpha: Complex64) -> Result<DMatrix<Complex64>> {
        let m = self.ps.nrows();
        let ia = Complex64::new(0.0, 1.0) * alpha;
        let ps_inv = linalg::guarded_inverse(&self.ps, "P_s inverse")?;
        let inner = linalg::to_complex(&(diag(&self.rates) * &ps_inv * &self.p_check_plus))
            - DMatrix::<Complex64>::identity(m, m) * ia;
        let inv = linalg::guarded_inverse(&inner, "drawup transform")?;
        let c_minus_ia =
            linalg::to_complex(&diag(&self.rates)) - DMatrix::<Complex64>::identity(m, m) * ia;
        Ok(linalg::to_complex(&self.p_check_plus) * inv * c_minus_ia)
    }

    /// `P{ξ̌(θ_s) > x, ·} = e^{-D_inf x} q̌₊` for `x > 0`.
    pub fn drawup_tail(&self, x: f64) -> DMatrix<f64> {
        assert!(x >= 0.0);
        linalg::expm(&(&self.tail_exponent * (-x))) * &self.q_check_plus
    }

    /// First-passage transform `T⁻(s,x) = P₋(s,x) P_s^{-1}` for `x < 0`.
    pub fn t_minus(&self, x: f64) -> Result<DMatrix<f64>> {
        if x > 0.0 {
            return Err(Error::Unsupported("T⁻ is defined for levels x < 0".into()));
        }
        let ps_inv = linalg::guarded_inverse(&self.ps, "P_s inverse")?;
        Ok(self.min_dist.cdf_at(x) * ps_inv)
    }

    /// Transform of the infimum law from the grid (atom included).
    pub fn phi_inf(&self, alpha: f64) -> DMatrix<Complex64> {
        self.min_dist.retransform(alpha)
    }

    pub fn resolvent(&self) -> &DMatrix<f64> {
        &self.ps
    }
}

fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(v.len(), v.len(), |k, r| if k == r { v[k] } else { 0.0 })
}

/// Iteration-independent projection data shared by both fixed points.
struct ProjectionData {
    /// `[Φ]₋(-ic_r)` plus the atom of the law at zero, per state rate.
    w0: Vec<DMatrix<f64>>,
    /// `[(C-iα)^{-1}Φ]₋(-ic_r)` (left smoothing), per state rate.
    v_left: Vec<DMatrix<f64>>,
    /// `[Φ(C-iα)^{-1}]₋(-ic_k)` (right smoothing), per state rate.
    v_right: Vec<DMatrix<f64>>,
}

fn real_checked(mat: &DMatrix<Complex64>, what: &str) -> DMatrix<f64> {
    let imag = mat.iter().map(|x| x.im.abs()).fold(0.0, f64::max);
    debug_assert!(imag < 1e-7, "{what}: imaginary residue {imag}");
    linalg::real_part(mat)
}

fn projection_data(model: &Model, proj: &Projections) -> ProjectionData {
    let m = model.m();
    let rates = &model.spec().c;
    let atom = match proj {
        Projections::Trivial { .. } => None,
        Projections::Table(t) => Some(t.atom().clone()),
    };
    let mut w0 = Vec::with_capacity(m);
    let mut v_left = Vec::with_capacity(m);
    let mut v_right = Vec::with_capacity(m);
    for &c in rates {
        let alpha0 = Complex64::new(0.0, -c);
        let mut w = real_checked(&proj.minus_transform(alpha0), "minus transform");
        match (&atom, proj) {
            (Some(a), _) => w += a,
            (None, Projections::Trivial { .. }) => {
                // no table: the whole law below zero is the atom at zero
                w += &trivial_atom(model);
            }
            _ => {}
        }
        w0.push(w);
        v_left.push(real_checked(
            &proj.smoothed_minus_transform(alpha0, rates, SmoothSide::Left),
            "left smoothed transform",
        ));
        v_right.push(real_checked(
            &proj.smoothed_minus_transform(alpha0, rates, SmoothSide::Right),
            "right smoothed transform",
        ));
    }
    ProjectionData { w0, v_left, v_right }
}

fn trivial_atom(model: &Model) -> DMatrix<f64> {
    crate::asymptotics::xi_atom_at_zero(model, f64::NAN).unwrap_or_else(|_| {
        DMatrix::zeros(model.m(), model.m())
    })
}

struct FixedPointOutcome {
    moment: DMatrix<f64>,
    iterations: usize,
    residual: f64,
    history: Vec<f64>,
}

fn run_fixed_point(
    m: usize,
    init: FixedPointInit,
    opts: &SolveOptions,
    mut update: impl FnMut(&DMatrix<f64>) -> Result<DMatrix<f64>>,
) -> Result<FixedPointOutcome> {
    let mut cur = match init {
        FixedPointInit::Identity => DMatrix::identity(m, m),
        FixedPointInit::Zero => DMatrix::zeros(m, m),
    };
    let mut history = Vec::new();
    let mut prev_res = f64::INFINITY;
    for it in 1..=opts.max_iterations {
        let next = update(&cur)?;
        let res = linalg::max_abs(&(&next - &cur));
        history.push(res);
        if res < opts.tolerance {
            return Ok(FixedPointOutcome { moment: next, iterations: it, residual: res, history });
        }
        cur = if res > prev_res {
            // oscillation: damp the step
            (&cur + &next) * 0.5
        } else {
            next
        };
        prev_res = res;
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iterations,
        residual: *history.last().unwrap_or(&f64::NAN),
        history,
    })
}

/// One sweep of the supremum fixed point given the current moment matrix.
fn sup_step(
    model: &Model,
    s: f64,
    ps: &DMatrix<f64>,
    data: &ProjectionData,
    m_cur: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let m = model.m();
    let spec = model.spec();
    // p₊ = s (sI + M Λ F̄₀(0))^{-1} P_s
    let mut lhs = DMatrix::identity(m, m) * s;
    for k in 0..m {
        for r in 0..m {
            lhs[(k, r)] += m_cur[(k, r)] * spec.lambda[r] * spec.pos_weight[r];
        }
    }
    let p_plus = linalg::solve(&lhs, ps, "supremum atom")? * s;
    let q_plus = ps - &p_plus;
    // X P = A  <=>  X = A P^{-1}: solve the transposed system
    let solve_right = |a: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        Ok(linalg::solve(&p_plus.transpose(), &a.transpose(), "p₊ inverse")?.transpose())
    };
    let xb = solve_right(ps)?;
    let xq = solve_right(&q_plus)?;
    let c = diag(&spec.c);
    let mut m_next = DMatrix::zeros(m, m);
    for r in 0..m {
        let col = &xb * &data.w0[r] - &xq * &c * &data.v_left[r];
        for k in 0..m {
            m_next[(k, r)] = col[(k, r)];
        }
    }
    Ok((m_next, p_plus, q_plus))
}

/// One sweep of the infimum fixed point.
fn inf_step(
    model: &Model,
    s: f64,
    ps: &DMatrix<f64>,
    data: &ProjectionData,
    m_cur: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let m = model.m();
    let spec = model.spec();
    // p̌₊ = s P_s (sI + Λ F̄₀(0) m̌)^{-1}
    let mut rhs = DMatrix::identity(m, m) * s;
    for k in 0..m {
        for r in 0..m {
            rhs[(k, r)] += spec.lambda[k] * spec.pos_weight[k] * m_cur[(k, r)];
        }
    }
    // p̌ = s P_s rhs^{-1}: solve rhs^T X^T = P_s^T
    let p_check = linalg::solve(&rhs.transpose(), &ps.transpose(), "infimum atom")?.transpose() * s;
    let q_check = ps - &p_check;
    let pc_lu = p_check.clone().lu();
    let solve_left = |a: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        pc_lu
            .solve(a)
            .ok_or(Error::IllConditioned { context: "p̌₊ inverse", cond: f64::INFINITY })
    };
    let inv_ps = solve_left(ps)?; // p̌^{-1} P_s
    let inv_q = solve_left(&q_check)?; // p̌^{-1} q̌
    let c = diag(&spec.c);
    let mut m_next = DMatrix::zeros(m, m);
    for k in 0..m {
        let row = &data.w0[k] * &inv_ps - &data.v_right[k] * &c * &inv_q;
        for r in 0..m {
            m_next[(k, r)] = row[(k, r)];
        }
    }
    Ok((m_next, p_check, q_check))
}

fn check_tail_exponent(d: &DMatrix<f64>) -> Result<()> {
    let min_re = linalg::eigenvalues(d).iter().map(|e| e.re).fold(f64::INFINITY, f64::min);
    if min_re <= 0.0 {
        return Err(Error::InvalidTailExponent(min_re));
    }
    Ok(())
}

/// The distribution grid of `ξ(θ_s)` restricted to `x <= 0`, built from the
/// upper contour table (zero grid for models with no mass below zero).
fn negative_xi_grid(model: &Model, s: f64, proj: &Projections) -> Result<GriddedDistribution> {
    let m = model.m();
    match proj {
        Projections::Trivial { .. } => Ok(GriddedDistribution {
            s,
            x0: -1.0,
            dx: 0.5,
            n_nodes: 3,
            m,
            values: vec![0.0; 3 * m * m],
            atom0: crate::asymptotics::xi_atom_at_zero(model, s)?,
            err_estimate: 0.0,
        }),
        Projections::Table(t) => {
            let (x0, dx, values) = t.half_grid();
            let n_nodes = values.len() / (m * m);
            Ok(GriddedDistribution {
                s,
                x0,
                dx,
                n_nodes,
                m,
                values,
                atom0: t.atom().clone(),
                err_estimate: 0.0,
            })
        }
    }
}

fn solve_sup_inner(
    model: &Model,
    s: f64,
    proj: &Projections,
    data: &ProjectionData,
    opts: &SolveOptions,
) -> Result<SupFactorization> {
    let ps = model.resolvent_ps(s)?;
    let m = model.m();
    let mut latest: Option<(DMatrix<f64>, DMatrix<f64>)> = None;
    let outcome = run_fixed_point(m, opts.init, opts, |cur| {
        let (next, p, q) = sup_step(model, s, &ps, data, cur)?;
        latest = Some((p, q));
        Ok(next)
    })?;
    if opts.check_uniqueness {
        let other = match opts.init {
            FixedPointInit::Identity => FixedPointInit::Zero,
            FixedPointInit::Zero => FixedPointInit::Identity,
        };
        let alt = run_fixed_point(m, other, opts, |cur| {
            Ok(sup_step(model, s, &ps, data, cur)?.0)
        })?;
        let gap = linalg::max_abs(&(&alt.moment - &outcome.moment));
        if gap > 1e-10 {
            return Err(Error::AmbiguousFixedPoint { gap });
        }
    }
    let (m_fix, p_plus, q_plus) = sup_step(model, s, &ps, data, &outcome.moment)
        .map(|(mm, p, q)| (mm, p, q))?;
    let _ = m_fix;
    let spec = model.spec();
    let ps_inv = linalg::guarded_inverse(&ps, "P_s inverse")?;
    let tail_exponent = &ps_inv * diag(&spec.c) * &p_plus;
    check_tail_exponent(&tail_exponent)?;

    // drawdown grid: P⁻(s,x) = P_s p₊^{-1} P(s,x) - q₊ p₊^{-1} C G(x), x < 0
    let xi_neg = negative_xi_grid(model, s, proj)?;
    let solve_right = |a: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        Ok(linalg::solve(&p_plus.transpose(), &a.transpose(), "p₊ inverse")?.transpose())
    };
    let xb = solve_right(&ps)?;
    let xq = solve_right(&q_plus)? * diag(&spec.c);
    let minus_dist = combine_grid(&xi_neg, &xb, &xq, SmoothSide::Left, &spec.c, &ps, s)?;

    Ok(SupFactorization {
        s,
        p_plus,
        q_plus,
        drawdown_exp_moment: outcome.moment,
        tail_exponent,
        minus_dist,
        iterations: outcome.iterations,
        residual: outcome.residual,
        residual_history: outcome.history,
        ps,
        rates: spec.c.clone(),
    })
}

fn solve_inf_inner(
    model: &Model,
    s: f64,
    proj: &Projections,
    data: &ProjectionData,
    opts: &SolveOptions,
) -> Result<InfFactorization> {
    let ps = model.resolvent_ps(s)?;
    let m = model.m();
    let outcome = run_fixed_point(m, opts.init, opts, |cur| {
        Ok(inf_step(model, s, &ps, data, cur)?.0)
    })?;
    if opts.check_uniqueness {
        let other = match opts.init {
            FixedPointInit::Identity => FixedPointInit::Zero,
            FixedPointInit::Zero => FixedPointInit::Identity,
        };
        let alt = run_fixed_point(m, other, opts, |cur| {
            Ok(inf_step(model, s, &ps, data, cur)?.0)
        })?;
        let gap = linalg::max_abs(&(&alt.moment - &outcome.moment));
        if gap > 1e-10 {
            return Err(Error::AmbiguousFixedPoint { gap });
        }
    }
    let (_, p_check, q_check) = inf_step(model, s, &ps, data, &outcome.moment)?;
    let spec = model.spec();
    let ps_inv = linalg::guarded_inverse(&ps, "P_s inverse")?;
    let tail_exponent = &p_check * diag(&spec.c) * &ps_inv;
    check_tail_exponent(&tail_exponent)?;

    // infimum grid: P₋(s,x) = P(s,x) p̌^{-1} P_s - G̃(x) C p̌^{-1} q̌, x < 0
    let xi_neg = negative_xi_grid(model, s, proj)?;
    let pc_lu = p_check.clone().lu();
    let inv_ps = pc_lu
        .solve(&ps)
        .ok_or(Error::IllConditioned { context: "p̌₊ inverse", cond: f64::INFINITY })?;
    let inv_q = pc_lu
        .solve(&q_check)
        .ok_or(Error::IllConditioned { context: "p̌₊ inverse", cond: f64::INFINITY })?;
    let right_factor = diag(&spec.c) * &inv_q;
    let min_dist =
        combine_grid_right(&xi_neg, &inv_ps, &right_factor, &spec.c, &ps, s)?;

    Ok(InfFactorization {
        s,
        p_check_plus: p_check,
        q_check_plus: q_check,
        infimum_exp_moment: outcome.moment,
        tail_exponent,
        min_dist,
        iterations: outcome.iterations,
        residual: outcome.residual,
        residual_history: outcome.history,
        ps,
        rates: spec.c.clone(),
    })
}

/// `out(x) = XB · P(x) - XQ · G(x)` over the negative grid (left smoothing).
fn combine_grid(
    xi_neg: &GriddedDistribution,
    xb: &DMatrix<f64>,
    xq: &DMatrix<f64>,
    side: SmoothSide,
    rates: &[f64],
    ps: &DMatrix<f64>,
    s: f64,
) -> Result<GriddedDistribution> {
    let m = xi_neg.m;
    let n = xi_neg.n_nodes;
    let mut values = vec![0.0; n * m * m];
    let mut smooth = vec![DMatrix::<f64>::zeros(m, m); n];
    smooth_all(xi_neg, rates, side, &mut smooth);
    for l in 0..n {
        let p = xi_neg.matrix_at(l);
        let out = xb * &p - xq * &smooth[l];
        for k in 0..m {
            for r in 0..m {
                values[(l * m + k) * m + r] = out[(k, r)];
            }
        }
    }
    let last = DMatrix::from_fn(m, m, |k, r| values[((n - 1) * m + k) * m + r]);
    let atom = ps - &last;
    Ok(GriddedDistribution {
        s,
        x0: xi_neg.x0,
        dx: xi_neg.dx,
        n_nodes: n,
        m,
        values,
        atom0: atom,
        err_estimate: xi_neg.err_estimate,
    })
}

/// `out(x) = P(x) · INVPS - G̃(x) · RIGHT` over the negative grid (right smoothing).
fn combine_grid_right(
    xi_neg: &GriddedDistribution,
    inv_ps: &DMatrix<f64>,
    right: &DMatrix<f64>,
    rates: &[f64],
    ps: &DMatrix<f64>,
    s: f64,
) -> Result<GriddedDistribution> {
    let m = xi_neg.m;
    let n = xi_neg.n_nodes;
    let mut values = vec![0.0; n * m * m];
    let mut smooth = vec![DMatrix::<f64>::zeros(m, m); n];
    smooth_all(xi_neg, rates, SmoothSide::Right, &mut smooth);
    for l in 0..n {
        let p = xi_neg.matrix_at(l);
        let out = &p * inv_ps - &smooth[l] * right;
        for k in 0..m {
            for r in 0..m {
                values[(l * m + k) * m + r] = out[(k, r)];
            }
        }
    }
    let last = DMatrix::from_fn(m, m, |k, r| values[((n - 1) * m + k) * m + r]);
    let atom = ps - &last;
    Ok(GriddedDistribution {
        s,
        x0: xi_neg.x0,
        dx: xi_neg.dx,
        n_nodes: n,
        m,
        values,
        atom0: atom,
        err_estimate: xi_neg.err_estimate,
    })
}

/// Exponential smoothing of the whole grid in one sweep per entry.
fn smooth_all(
    dist: &GriddedDistribution,
    rates: &[f64],
    side: SmoothSide,
    out: &mut [DMatrix<f64>],
) {
    let m = dist.m;
    for k in 0..m {
        for r in 0..m {
            let c = match side {
                SmoothSide::Left => rates[k],
                SmoothSide::Right => rates[r],
            };
            let mut acc = dist.value(0, k, r) / c;
            out[0][(k, r)] = acc;
            for l in 1..dist.n_nodes {
                let e = (-c * dist.dx).exp();
                let w0 = -(-c * dist.dx).exp_m1() / c;
                let p0 = dist.value(l - 1, k, r);
                let p1 = dist.value(l, k, r);
                let slope = (p1 - p0) / dist.dx;
                acc = acc * e + p0 * w0 + slope * (dist.dx - w0) / c;
                out[l][(k, r)] = acc;
            }
        }
    }
}

/// Supremum factorization of a native (upper-semi-continuous) model.
pub fn solve_sup(model: &Model, s: f64) -> Result<SupFactorization> {
    solve_sup_with(model, s, &SolveOptions::default())
}

pub fn solve_sup_with(model: &Model, s: f64, opts: &SolveOptions) -> Result<SupFactorization> {
    require_native(model, "solve_sup_mirrored")?;
    let proj = projections_for(model, s)?;
    let data = projection_data(model, &proj);
    solve_sup_inner(model, s, &proj, &data, opts)
}

/// Infimum factorization of a native (upper-semi-continuous) model.
pub fn solve_inf(model: &Model, s: f64) -> Result<InfFactorization> {
    solve_inf_with(model, s, &SolveOptions::default())
}

pub fn solve_inf_with(model: &Model, s: f64, opts: &SolveOptions) -> Result<InfFactorization> {
    require_native(model, "solve_inf_mirrored")?;
    let proj = projections_for(model, s)?;
    let data = projection_data(model, &proj);
    solve_inf_inner(model, s, &proj, &data, opts)
}

fn require_native(model: &Model, dual_name: &str) -> Result<()> {
    if model.orientation() == Orientation::LowerSemiContinuous {
        return Err(Error::Unsupported(format!(
            "mirrored (lower-semi-continuous) specs are served by {dual_name}, which applies the duality Φ±_(1)(s,α) = Φ∓(s,-α)"
        )));
    }
    Ok(())
}

/// Supremum laws of a mirrored model from the infimum factorization of its
/// pre-image: `ξ₁⁺(θ_s) = -ξ⁻(θ_s)`, so `P{ξ₁⁺ > x} = P₋(s,-x)` and
/// `Φ₊^{(1)}(s,α) = Φ₋(s,-α)`.
pub struct MirroredSupremum {
    pub dual: InfFactorization,
}

impl MirroredSupremum {
    pub fn sup_tail(&self, x: f64) -> DMatrix<f64> {
        assert!(x >= 0.0);
        self.dual.min_dist.cdf_at(-x)
    }

    pub fn phi_sup(&self, alpha: f64) -> DMatrix<Complex64> {
        self.dual.phi_inf(-alpha)
    }
}

/// Infimum laws of a mirrored model from the supremum factorization of its
/// pre-image: `ξ₁⁻(θ_s) = -ξ⁺(θ_s)` and `Φ₋^{(1)}(s,α) = Φ₊(s,-α)`.
pub struct MirroredInfimum {
    pub dual: SupFactorization,
}

impl MirroredInfimum {
    pub fn inf_cdf(&self, x: f64) -> Result<DMatrix<f64>> {
        assert!(x <= 0.0);
        // P{-ξ⁺ < x} = P{ξ⁺ > -x}
        Ok(self.dual.sup_tail(-x))
    }

    pub fn phi_inf(&self, alpha: Complex64) -> Result<DMatrix<Complex64>> {
        self.dual.phi_sup(-alpha)
    }
}

pub fn solve_sup_mirrored(model: &Model, s: f64) -> Result<MirroredSupremum> {
    if model.orientation() != Orientation::LowerSemiContinuous {
        return Err(Error::Unsupported("solve_sup_mirrored expects a mirrored spec".into()));
    }
    let pre = Model::new(crate::model::usc_preimage(model.spec()))?;
    Ok(MirroredSupremum { dual: solve_inf(&pre, s)? })
}

pub fn solve_inf_mirrored(model: &Model, s: f64) -> Result<MirroredInfimum> {
    if model.orientation() != Orientation::LowerSemiContinuous {
        return Err(Error::Unsupported("solve_inf_mirrored expects a mirrored spec".into()));
    }
    let pre = Model::new(crate::model::usc_preimage(model.spec()))?;
    Ok(MirroredInfimum { dual: solve_sup(&pre, s)? })
}

/// Joint report: both factorizations plus the factorization-identity
/// residuals over the real probe grid.
#[derive(Debug)]
pub struct FactorizeReport {
    pub s: f64,
    pub sup: SupFactorization,
    pub inf: InfFactorization,
    /// `max_α ‖Φ - Φ₊ P_s^{-1} Φ⁻‖∞` over the probes.
    pub identity_residual_sup_form: f64,
    /// `max_α ‖Φ - Φ₋ P_s^{-1} Φ⁺‖∞` over the probes.
    pub identity_residual_inf_form: f64,
}

pub fn factorize_report(model: &Model, s: f64) -> Result<FactorizeReport> {
    require_native(model, "solve_sup_mirrored / solve_inf_mirrored")?;
    let proj = projections_for(model, s)?;
    let data = projection_data(model, &proj);
    let opts = SolveOptions::default();
    let sup = solve_sup_inner(model, s, &proj, &data, &opts)?;
    let inf = solve_inf_inner(model, s, &proj, &data, &opts)?;
    let (res_sup, res_inf) = identity_residuals(model, s, &sup, &inf, &proj)?;
    Ok(FactorizeReport {
        s,
        sup,
        inf,
        identity_residual_sup_form: res_sup,
        identity_residual_inf_form: res_inf,
    })
}

/// Checks both forms of the factorization identity on the real probe grid,
/// assembling the complement transforms from half-line projections of the
/// exact `Φ` rather than from the identity itself.
pub(crate) fn identity_residuals(
    model: &Model,
    s: f64,
    sup: &SupFactorization,
    inf: &InfFactorization,
    proj: &Projections,
) -> Result<(f64, f64)> {
    let eval = CumulantEvaluator::new(model)?;
    let ps = &sup.ps;
    let spec = model.spec();
    let c = diag(&spec.c);
    let atom = match proj {
        Projections::Trivial { .. } => trivial_atom(model),
        Projections::Table(t) => t.atom().clone(),
    };
    let solve_right = |a: &DMatrix<f64>, b: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        Ok(linalg::solve(&b.transpose(), &a.transpose(), "identity check")?.transpose())
    };
    let xb = solve_right(ps, &sup.p_plus)?;
    let xq = solve_right(&sup.q_plus, &sup.p_plus)? * &c;
    let pc_lu = inf.p_check_plus.clone().lu();
    let inv_ps = pc_lu
        .solve(ps)
        .ok_or(Error::IllConditioned { context: "identity check", cond: f64::INFINITY })?;
    let inv_q = pc_lu
        .solve(&inf.q_check_plus)
        .ok_or(Error::IllConditioned { context: "identity check", cond: f64::INFINITY })?;
    let right = &c * &inv_q;

    let ps_inv_c = linalg::guarded_inverse(&linalg::to_complex(ps), "P_s inverse")?;
    let mut res_sup: f64 = 0.0;
    let mut res_inf: f64 = 0.0;
    for &a in &alpha_probes() {
        let alpha = Complex64::new(a, 0.0);
        let phi = eval.phi(s, alpha)?;
        let w = proj.minus_transform(alpha) + linalg::to_complex(&atom);
        let v_l = proj.smoothed_minus_transform(alpha, &spec.c, SmoothSide::Left);
        let v_r = proj.smoothed_minus_transform(alpha, &spec.c, SmoothSide::Right);
        // Φ⁻ from the sup side projections
        let phi_draw = linalg::to_complex(&xb) * &w - linalg::to_complex(&xq) * &v_l;
        let phi_sup = sup.phi_sup(alpha)?;
        let lhs = &phi_sup * &ps_inv_c * &phi_draw;
        res_sup = res_sup.max(linalg::max_abs(&(&lhs - &phi)));
        // Φ₋ from the inf side projections
        let phi_min = &w * linalg::to_complex(&inv_ps) - &v_r * linalg::to_complex(&right);
        let phi_up = inf.phi_drawup(alpha)?;
        let rhs = &phi_min * &ps_inv_c * &phi_up;
        res_inf = res_inf.max(linalg::max_abs(&(&rhs - &phi)));
    }
    Ok((res_sup, res_inf))
}

/// Independent route to the supremum transform through the explicit
/// convolution of the drawdown grid with the upward jump tail, compared
/// against the matrix-exponential form on the probe grid.
#[derive(Debug, Clone)]
pub struct ConvolutionCrossCheck {
    pub max_deviation: f64,
    pub probes: Vec<f64>,
}

pub fn phi_plus_general(
    model: &Model,
    s: f64,
    sup: &SupFactorization,
) -> Result<ConvolutionCrossCheck> {
    let m = model.m();
    let spec = model.spec();
    let ps = &sup.ps;
    let dist = &sup.minus_dist;

    // K(s,x) = ∫ dP⁻(s,y) K̄0(x-y) tabulated on x > 0 by Stieltjes summation
    // over the drawdown grid (exponential kernel factored exactly).
    let mut weight = dist.atom0.clone(); // atom of the drawdown at zero
    let mut weights = vec![DMatrix::<f64>::zeros(m, m); 1];
    weights[0] = weight.clone();
    for r in 0..m {
        let c = spec.c[r];
        for k in 0..m {
            let mut acc = 0.0;
            for l in 1..dist.n_nodes {
                let dp = dist.value(l, k, r) - dist.value(l - 1, k, r);
                let y_mid = dist.x(l) - 0.5 * dist.dx;
                acc += dp * (c * y_mid).exp();
            }
            weight[(k, r)] += acc;
        }
    }

    let c_min = model.c_min_active();
    if !c_min.is_finite() {
        // no upward jumps at all: Φ₊ = P_s on both routes
        return Ok(ConvolutionCrossCheck { max_deviation: 0.0, probes: alpha_probes() });
    }
    let x_top = 36.0 / c_min;
    let n_x = 4096;
    let hx = x_top / n_x as f64;
    let k_at = |x: f64| -> DMatrix<f64> {
        DMatrix::from_fn(m, m, |k, r| {
            weight[(k, r)] * spec.lambda[r] * spec.pos_weight[r] * (-spec.c[r] * x).exp()
        })
    };

    let probes = alpha_probes();
    let mut max_dev: f64 = 0.0;
    for &a in &probes {
        let ia = Complex64::new(0.0, a);
        // k(s,α) = ∫_0^∞ e^{iαx} K(s,x) dx by Simpson plus the analytic tail
        let mut acc = DMatrix::<Complex64>::zeros(m, m);
        for i in 0..=n_x {
            let x = i as f64 * hx;
            let w = if i == 0 || i == n_x {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let kx = k_at(x);
            let phase = (ia * x).exp() * (w * hx / 3.0);
            acc += linalg::to_complex(&kx) * phase;
        }
        let tail_base = k_at(x_top);
        let tail = DMatrix::from_fn(m, m, |k, r| {
            linalg::to_complex(&tail_base)[(k, r)] * (ia * x_top).exp()
                / (Complex64::new(spec.c[r], 0.0) - ia)
        });
        let k_alpha = acc + tail;
        // Φ₊ = (I - iα k(s,α)/s)^{-1} P_s
        let lhs = DMatrix::<Complex64>::identity(m, m) - k_alpha * (ia / s);
        let inv = linalg::guarded_inverse(&lhs, "convolution route")?;
        let phi_conv = inv * linalg::to_complex(ps);
        let phi_me = sup.phi_sup(Complex64::new(a, 0.0))?;
        max_dev = max_dev.max(linalg::max_abs(&(phi_conv - phi_me)));
    }
    Ok(ConvolutionCrossCheck { max_deviation: max_dev, probes })
}

/// Access to projections for callers that need raw half-line transforms at
/// real probes alongside a factorization (testing and reporting).
pub(crate) fn projections(model: &Model, s: f64) -> Result<Projections> {
    projections_for(model, s)
}

pub(crate) use crate::inversion::Projections as ProjectionsAlias;
