//! Small-kill-rate limits: the law of the all-time infimum, ruin curves, and
//! the zero-drift atoms.
//!
//! Everything is driven by the limit matrix `Ř₊ = lim_{s→0} s p̌₊^{-1}(s) P_s`,
//! computed two ways and cross-checked: Richardson extrapolation of the raw
//! product along a geometric ladder of kill rates, and the algebraic identity
//! `s p̌₊^{-1}(s) P_s = sI + Λ F̄₀(0) m̌(s)` which reduces the limit to the
//! extrapolated infimum moment.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::factorize::{solve_inf_with_projections, InfFactorization, SolveOptions};
use crate::inversion::{projections_for, GriddedDistribution, Projections, SmoothSide};
use crate::linalg;
use crate::model::{DriftClass, Model};
use crate::spectral::CumulantEvaluator;
use crate::{Error, Result};

/// Kill-rate ladder used for every s → 0 extrapolation.
pub const S_LADDER: [f64; 5] = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5];

const ROUTE_TOL: f64 = 1e-4;

/// Atom of the law of `ξ(θ_s)` at zero. Zero for strictly negative drifts; in
/// zero-drift mode it is `s (sI + Λ - N(f(0) - I))^{-1}`.
pub(crate) fn xi_atom_at_zero(model: &Model, s: f64) -> Result<DMatrix<f64>> {
    let m = model.m();
    match model.drift_class() {
        DriftClass::AllNegative => Ok(DMatrix::zeros(m, m)),
        DriftClass::AllZero => p_tilde0(model, s),
        DriftClass::Mixed => Err(Error::Unsupported(
            "mixed zero/negative drifts are not supported".into(),
        )),
    }
}

/// `P̃⁰(s) = s (sI + Λ - N(f(0) - I))^{-1}`: the probability of sitting at the
/// origin at the exponential horizon (zero-drift mode).
pub fn p_tilde0(model: &Model, s: f64) -> Result<DMatrix<f64>> {
    if model.drift_class() != DriftClass::AllZero {
        return Err(Error::Unsupported("the atom formula requires all drifts to vanish".into()));
    }
    assert!(s > 0.0, "atom formula requires s > 0");
    Ok(atom_denominator(model, s)? * s)
}

/// `(sI + Λ - N(f(0) - I))^{-1}`.
fn atom_denominator(model: &Model, s: f64) -> Result<DMatrix<f64>> {
    let m = model.m();
    let spec = model.spec();
    let mut mat = DMatrix::<f64>::zeros(m, m);
    for k in 0..m {
        mat[(k, k)] = s + spec.lambda[k] + spec.nu[k];
        for r in 0..m {
            mat[(k, r)] -= spec.nu[k] * model.f0()[(k, r)];
        }
    }
    linalg::guarded_inverse(&mat, "zero-drift atom")
}

/// Report for the limit matrix `Ř₊`, carrying both routes and their gap.
#[derive(Debug, Clone)]
pub struct RCheckReport {
    /// Primary value (algebraic route through the extrapolated moment).
    pub r_check: DMatrix<f64>,
    /// Richardson extrapolation of `s p̌₊^{-1}(s) P_s` along the ladder.
    pub route_direct: DMatrix<f64>,
    /// `Λ F̄₀(0) m̌(0⁺)` from the extrapolated infimum moment.
    pub route_algebraic: DMatrix<f64>,
    pub discrepancy: f64,
    pub extrapolation_error: f64,
    pub s_ladder: Vec<f64>,
}

struct LadderData {
    infs: Vec<InfFactorization>,
    projections: Vec<Projections>,
}

fn solve_ladder(model: &Model) -> Result<LadderData> {
    let mut infs = Vec::new();
    let mut projections = Vec::new();
    for &s in S_LADDER.iter() {
        let proj = projections_for(model, s)?;
        // continuation along the ladder keeps iteration counts low at tiny s
        let opts = SolveOptions { max_iterations: 2000, ..Default::default() };
        let inf = solve_inf_with_projections(model, s, &proj, &opts)?;
        infs.push(inf);
        projections.push(proj);
    }
    Ok(LadderData { infs, projections })
}

fn require_positive_drift(model: &Model) -> Result<f64> {
    let stats = model.drift_stats()?;
    if stats.m1 <= 0.0 {
        return Err(Error::NonpositiveDrift { m1: stats.m1 });
    }
    Ok(stats.m1)
}

fn extrapolate_matrix(ladder: &[f64], mats: &[DMatrix<f64>]) -> (DMatrix<f64>, f64) {
    let m = mats[0].nrows();
    let mut out = DMatrix::zeros(m, m);
    let mut err: f64 = 0.0;
    for k in 0..m {
        for r in 0..m {
            let ys: Vec<f64> = mats.iter().map(|mat| mat[(k, r)]).collect();
            let (v, e) = linalg::richardson_to_zero(ladder, &ys);
            out[(k, r)] = v;
            err = err.max(e);
        }
    }
    (out, err)
}

/// `Ř₊ = lim_{s→0} s p̌₊^{-1}(s) P_s`, both routes cross-checked.
pub fn limit_r_check(model: &Model) -> Result<RCheckReport> {
    require_positive_drift(model)?;
    let data = solve_ladder(model)?;
    limit_r_check_from(model, &data)
}

fn limit_r_check_from(model: &Model, data: &LadderData) -> Result<RCheckReport> {
    let spec = model.spec();
    let m = model.m();
    // route (i): raw product s p̌₊^{-1} P_s per rung
    let mut direct_mats = Vec::new();
    let mut moment_mats = Vec::new();
    for (inf, &s) in data.infs.iter().zip(S_LADDER.iter()) {
        let prod = inf
            .p_check_plus
            .clone()
            .lu()
            .solve(inf.resolvent())
            .ok_or(Error::IllConditioned { context: "Ř₊ route", cond: f64::INFINITY })?
            * s;
        direct_mats.push(prod);
        moment_mats.push(inf.infimum_exp_moment.clone());
    }
    let ladder: Vec<f64> = S_LADDER.to_vec();
    let (route_direct, err_a) = extrapolate_matrix(&ladder, &direct_mats);
    let (moment0, err_b) = extrapolate_matrix(&ladder, &moment_mats);
    let route_algebraic = DMatrix::from_fn(m, m, |k, r| {
        spec.lambda[k] * spec.pos_weight[k] * moment0[(k, r)]
    });
    let discrepancy = linalg::max_abs(&(&route_direct - &route_algebraic));
    if discrepancy > ROUTE_TOL {
        return Err(Error::ExtrapolationDiverged { gap: discrepancy });
    }
    Ok(RCheckReport {
        r_check: route_algebraic.clone(),
        route_direct,
        route_algebraic,
        discrepancy,
        extrapolation_error: err_a.max(err_b),
        s_ladder: ladder,
    })
}

/// Transform of the all-time infimum at a real argument `r > 0`.
#[derive(Debug, Clone)]
pub struct InfTransform {
    /// `E e^{rξ⁻}` (full law, atom included).
    pub full: DMatrix<f64>,
    /// `E [e^{rξ⁻}; ξ⁻ < 0]`.
    pub strictly_negative: DMatrix<f64>,
    /// `P{ξ⁻ = 0}`; zero whenever some drift is strictly negative.
    pub p_minus: DMatrix<f64>,
}

/// `E e^{rξ⁻} = r K^{-1}(r) (C - rI)^{-1} Ř₊`, the s → 0 limit of the killed
/// transform; the strictly negative part subtracts the atom.
pub fn inf_transform_limit(model: &Model, r: f64) -> Result<InfTransform> {
    let report = limit_r_check(model)?;
    inf_transform_with(model, r, &report.r_check)
}

pub fn inf_transform_with(model: &Model, r: f64, r_check: &DMatrix<f64>) -> Result<InfTransform> {
    require_positive_drift(model)?;
    if r <= 0.0 {
        return Err(Error::OutsideStrip { point: format!("r = {r}") });
    }
    let full_c = inf_transform_complex(model, Complex64::new(r, 0.0), r_check)?;
    let full = linalg::real_part(&full_c);
    let p_minus = p_minus_matrix(model, r_check)?;
    Ok(InfTransform { strictly_negative: &full - &p_minus, full, p_minus })
}

fn inf_transform_complex(
    model: &Model,
    r: Complex64,
    r_check: &DMatrix<f64>,
) -> Result<DMatrix<Complex64>> {
    let eval = CumulantEvaluator::new(model)?;
    let m = model.m();
    let k = eval.psi_z(r)?;
    let k_inv = linalg::guarded_inverse(&k, "K(r) inverse").map_err(|_| Error::OutsideStrip {
        point: format!("r = {r} is a root of det K"),
    })?;
    let spec = model.spec();
    let c_minus_r = DMatrix::from_fn(m, m, |i, j| {
        if i == j { Complex64::new(spec.c[i], 0.0) - r } else { Complex64::default() }
    });
    let c_inv = linalg::guarded_inverse(&c_minus_r, "C - rI inverse")
        .map_err(|_| Error::OutsideStrip { point: format!("r = {r} hits an upward rate") })?;
    Ok(k_inv * r * c_inv * linalg::to_complex(r_check))
}

/// `p₋ = (Λ - N(f(0) - I))^{-1} Ř₊` in zero-drift mode, zero otherwise.
fn p_minus_matrix(model: &Model, r_check: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = model.m();
    match model.drift_class() {
        DriftClass::AllNegative => Ok(DMatrix::zeros(m, m)),
        DriftClass::AllZero => {
            let spec = model.spec();
            let mut mat = DMatrix::<f64>::zeros(m, m);
            for k in 0..m {
                mat[(k, k)] = spec.lambda[k] + spec.nu[k];
                for r in 0..m {
                    mat[(k, r)] -= spec.nu[k] * model.f0()[(k, r)];
                }
            }
            Ok(linalg::guarded_inverse(&mat, "p₋ denominator")? * r_check)
        }
        DriftClass::Mixed => Err(Error::Unsupported(
            "mixed zero/negative drifts are not supported".into(),
        )),
    }
}

/// Zero-drift atoms: the horizon atom `P̃⁰(s)` (when `s` is given) and the
/// all-time infimum atom `p₋`.
#[derive(Debug, Clone)]
pub struct ZeroDriftAtoms {
    pub p_tilde0: Option<DMatrix<f64>>,
    pub p_minus: DMatrix<f64>,
}

pub fn zero_drift_atoms(model: &Model, s: Option<f64>) -> Result<ZeroDriftAtoms> {
    if model.drift_class() != DriftClass::AllZero {
        return Err(Error::Unsupported(
            "zero-drift atoms require every drift to vanish (A = 0)".into(),
        ));
    }
    let p_tilde = s.map(|s| p_tilde0(model, s)).transpose()?;
    let report = limit_r_check(model)?;
    let p_minus = p_minus_matrix(model, &report.r_check)?;
    Ok(ZeroDriftAtoms { p_tilde0: p_tilde, p_minus })
}

/// The limiting law of the all-time infimum on a grid of levels `x < 0`.
#[derive(Debug, Clone)]
pub struct RuinCurve {
    pub xs: Vec<f64>,
    /// `P{ξ⁻ < x, ·}` per level.
    pub values: Vec<DMatrix<f64>>,
    pub r_check: DMatrix<f64>,
    pub p_minus: DMatrix<f64>,
    pub extrapolation_error: f64,
    pub s_ladder: Vec<f64>,
}

impl RuinCurve {
    /// Ruin probability `P{ξ⁻ < -u}` summed over terminal states.
    pub fn ruin_probability(&self, idx: usize, start: usize) -> f64 {
        self.values[idx].row(start).sum()
    }
}

/// Computes `P{ξ⁻ < x}` for levels `x < 0` by evaluating the killed infimum
/// law along the kill-rate ladder in the scale-stable form
/// `P₋(s,x) = [P(s,x)/s](sI + ΛF̄₀(0)m̌) - [G̃(s,x)/s] C Λ F̄₀(0) m̌`
/// and extrapolating to `s = 0`; cross-checked against the Laplace-inverted
/// transform on three interior levels.
pub fn ruin_curve(model: &Model, xs: &[f64]) -> Result<RuinCurve> {
    require_positive_drift(model)?;
    if xs.is_empty() || xs.iter().any(|&x| x >= 0.0) {
        return Err(Error::Unsupported("ruin levels must be strictly negative".into()));
    }
    let m = model.m();
    let spec = model.spec();
    let data = solve_ladder(model)?;
    let report = limit_r_check_from(model, &data)?;

    let mut per_rung: Vec<Vec<DMatrix<f64>>> = Vec::new();
    for (idx, &s) in S_LADDER.iter().enumerate() {
        let inf = &data.infs[idx];
        let rung = match &data.projections[idx] {
            Projections::Trivial { .. } => {
                vec![DMatrix::<f64>::zeros(m, m); xs.len()]
            }
            Projections::Table(table) => {
                let (x0, dx, neg) = table.half_grid();
                let n_nodes = neg.len() / (m * m);
                let scaled: Vec<f64> = neg.iter().map(|v| v / s).collect();
                let grid = GriddedDistribution {
                    s,
                    x0,
                    dx,
                    n_nodes,
                    m,
                    values: scaled,
                    atom0: DMatrix::zeros(m, m),
                    err_estimate: 0.0,
                };
                // sI + Λ F̄₀(0) m̌ and C Λ F̄₀(0) m̌
                let mut first = DMatrix::<f64>::identity(m, m) * s;
                let mut second = DMatrix::<f64>::zeros(m, m);
                for k in 0..m {
                    let w = spec.lambda[k] * spec.pos_weight[k];
                    for r in 0..m {
                        first[(k, r)] += w * inf.infimum_exp_moment[(k, r)];
                        second[(k, r)] = spec.c[k] * w * inf.infimum_exp_moment[(k, r)];
                    }
                }
                xs.iter()
                    .map(|&x| {
                        let p_over_s = grid.cdf_at(x);
                        let g_over_s = crate::inversion::exp_smooth_convolution(
                            &grid,
                            &spec.c,
                            x,
                            SmoothSide::Right,
                        );
                        &p_over_s * &first - &g_over_s * &second
                    })
                    .collect()
            }
        };
        per_rung.push(rung);
    }

    let ladder: Vec<f64> = S_LADDER.to_vec();
    let mut values = Vec::with_capacity(xs.len());
    let mut extrap_err: f64 = 0.0;
    for i in 0..xs.len() {
        let mats: Vec<DMatrix<f64>> = per_rung.iter().map(|r| r[i].clone()).collect();
        let (v, e) = extrapolate_matrix(&ladder, &mats);
        values.push(v.map(|x| x.clamp(0.0, 1.0)));
        extrap_err = extrap_err.max(e);
    }

    let p_minus = p_minus_matrix(model, &report.r_check)?;

    // cross-check three interior levels against the Laplace-inverted transform
    let picks = cross_check_indices(xs.len());
    for &i in &picks {
        let t = -xs[i];
        let inverted = survival_by_euler(model, t, &report.r_check)?;
        let gap = linalg::max_abs(&(&inverted - &values[i]));
        if gap > 1e-3 {
            return Err(Error::ExtrapolationDiverged { gap });
        }
    }

    Ok(RuinCurve {
        xs: xs.to_vec(),
        values,
        r_check: report.r_check,
        p_minus,
        extrapolation_error: extrap_err,
        s_ladder: ladder,
    })
}

fn cross_check_indices(n: usize) -> Vec<usize> {
    if n <= 3 {
        (0..n).collect()
    } else {
        vec![n / 4, n / 2, 3 * n / 4]
    }
}

/// `P{ξ⁻ < -t}` via Abate–Whitt Euler inversion of the survival transform
/// `Ŝ(w) = (P₀-mass - E e^{-w(-ξ⁻)}) / w` applied entrywise.
pub(crate) fn survival_by_euler(
    model: &Model,
    t: f64,
    r_check: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    const A: f64 = 18.4;
    const N_TERMS: usize = 20;
    const M_AVG: usize = 12;
    let m = model.m();
    // full mass of the limiting law: lim_{r→0} r K^{-1}(r)(C-r)^{-1} Ř₊
    // = (1/m₁) P₀ C^{-1} Ř₊
    let stats = model.drift_stats()?;
    let spec = model.spec();
    let mass = DMatrix::from_fn(m, m, |k, r| {
        (0..m).map(|j| stats.p0[(k, j)] / spec.c[j] * r_check[(j, r)]).sum::<f64>() / stats.m1
    });
    // E e^{-wT} with T = -ξ⁻ is the infimum transform at argument w.
    let s_hat = |w: Complex64| -> Result<DMatrix<Complex64>> {
        let f = inf_transform_complex(model, w, r_check)?;
        Ok((linalg::to_complex(&mass) - f) / w)
    };

    let mut partial = Vec::with_capacity(N_TERMS + M_AVG + 1);
    let base = s_hat(Complex64::new(A / (2.0 * t), 0.0))?.map(|x| x.re) * 0.5;
    let mut acc = base;
    for k in 1..=(N_TERMS + M_AVG) {
        let w = Complex64::new(A / (2.0 * t), k as f64 * std::f64::consts::PI / t);
        let term = s_hat(w)?.map(|x| x.re) * if k % 2 == 0 { 1.0 } else { -1.0 };
        acc += term;
        if k >= N_TERMS {
            partial.push(acc.clone());
        }
    }
    // binomial (Euler) averaging of the last partial sums
    let mut avg = DMatrix::<f64>::zeros(m, m);
    let mut binom = 1.0f64;
    let mut total = 0.0;
    for (j, p) in partial.iter().enumerate() {
        if j > 0 {
            binom = binom * (M_AVG - j + 1) as f64 / j as f64;
        }
        avg += p * binom;
        total += binom;
    }
    avg /= total;
    Ok(avg.map(|x| x * (A / 2.0).exp() / t))
}
