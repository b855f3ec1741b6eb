//! Recovery of the law of `ξ(θ_s)` from its transform, plus the half-line
//! projection and exponential-smoothing primitives the factorization solvers
//! are built on.
//!
//! The transform is inverted on a damped contour `Im α = δ`. A closed-form
//! reference transform with the same `1/α` asymptotics (a matrix-exponential
//! density produced by the drift pencil) is subtracted first, so the numerical
//! part of every integrand is absolutely integrable with an `O(t^{-3})` tail;
//! the reference's grid values, half-line moments, and smoothed moments are
//! all restored analytically. Truncation is corrected by a fitted power-law
//! tail. The contour height is chosen by bisection on an M-matrix test of
//! `sI - K(∓v)`, which keeps the contour strictly between the real axis and
//! the nearest resolvent singularity without any complex root finding.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;

use crate::linalg;
use crate::model::{DriftClass, Model, Orientation};
use crate::spectral::CumulantEvaluator;
use crate::{Error, Result};

const ALIAS_LOG: f64 = 30.0;
const T_MIN: f64 = 1500.0;
const MAX_SAMPLES: usize = 1 << 21;
const RETRANSFORM_TOL: f64 = 1e-6;

/// Grid controls for [`invert_xi_distribution`]. `x_span` is the half-width of
/// the x-grid; the default is `40 / (smallest tail-exponent estimate)` from
/// the upward rates and negative-mixture rates. The sample count may be grown
/// automatically to keep the quadrature window long enough.
#[derive(Debug, Clone)]
pub struct GridParams {
    pub x_span: Option<f64>,
    pub n_samples: usize,
}

impl Default for GridParams {
    fn default() -> Self {
        GridParams { x_span: None, n_samples: 1 << 16 }
    }
}

/// Matrix-valued distribution function of `ξ(θ_s)` on a uniform x-grid, with
/// the atom at zero kept separate (nonzero only in zero-drift mode). Values
/// are the open distribution function `P{ξ(θ_s) < x, x(θ_s) = r | x(0) = k}`.
#[derive(Debug, Clone)]
pub struct GriddedDistribution {
    pub s: f64,
    pub x0: f64,
    pub dx: f64,
    pub n_nodes: usize,
    pub m: usize,
    /// Row-major `[node][k][r]`.
    pub values: Vec<f64>,
    pub atom0: DMatrix<f64>,
    /// Grid truncation / re-transform residual estimate.
    pub err_estimate: f64,
}

impl GriddedDistribution {
    pub fn x(&self, l: usize) -> f64 {
        self.x0 + l as f64 * self.dx
    }

    pub fn value(&self, l: usize, k: usize, r: usize) -> f64 {
        self.values[(l * self.m + k) * self.m + r]
    }

    pub fn matrix_at(&self, l: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.m, self.m, |k, r| self.value(l, k, r))
    }

    /// Linear interpolation of the distribution function at `x`.
    pub fn cdf_at(&self, x: f64) -> DMatrix<f64> {
        let pos = (x - self.x0) / self.dx;
        if pos <= 0.0 {
            return self.matrix_at(0);
        }
        let last = self.n_nodes - 1;
        if pos >= last as f64 {
            return self.matrix_at(last);
        }
        let l = pos.floor() as usize;
        let w = pos - l as f64;
        self.matrix_at(l) * (1.0 - w) + self.matrix_at(l + 1) * w
    }

    /// Index of the node at `x = 0`.
    pub fn zero_node(&self) -> usize {
        let i = (-self.x0 / self.dx).round() as usize;
        debug_assert!(self.x(i).abs() < 1e-9 * self.dx.max(1.0));
        i
    }

    /// Transform of the gridded measure (including the atom) at a real probe,
    /// used for round-trip checks against the exact `Φ(s, α)`.
    pub fn retransform(&self, alpha: f64) -> DMatrix<Complex64> {
        let m = self.m;
        let ia = Complex64::new(0.0, alpha);
        let mut out = DMatrix::<Complex64>::zeros(m, m);
        for k in 0..m {
            for r in 0..m {
                let f = |l: usize| (ia * self.x(l)).exp() * self.value(l, k, r);
                // integration by parts: ∫ e^{iαx} dP = [e^{iαx} P] - iα ∫ e^{iαx} P dx
                let mut simpson = Complex64::default();
                let last = self.n_nodes - 1;
                let mut l = 0;
                while l + 2 <= last {
                    simpson += (f(l) + f(l + 1) * 4.0 + f(l + 2)) * (self.dx / 3.0);
                    l += 2;
                }
                if l < last {
                    simpson += (f(l) + f(l + 1)) * (self.dx / 2.0);
                }
                let boundary = f(last) - f(0);
                out[(k, r)] = boundary - ia * simpson + self.atom0[(k, r)];
            }
        }
        out
    }
}

/// `∫_{(-∞,0)} e^{cx} dP(s,x)` by Stieltjes quadrature on the grid; the atom
/// at zero is excluded (open-interval convention).
pub fn minus_projection_moment(dist: &GriddedDistribution, c: f64) -> DMatrix<f64> {
    assert!(c > 0.0, "projection moment requires c > 0");
    let i0 = dist.zero_node();
    let m = dist.m;
    DMatrix::from_fn(m, m, |k, r| {
        // ∫_{(-∞,0)} e^{cx} dP = P(0^-) - c ∫_{-∞}^0 e^{cx} P(x) dx
        let f = |l: usize| (c * dist.x(l)).exp() * dist.value(l, k, r);
        let mut integral = 0.0;
        let mut l = 0;
        while l + 2 <= i0 {
            integral += (f(l) + 4.0 * f(l + 1) + f(l + 2)) * (dist.dx / 3.0);
            l += 2;
        }
        if l < i0 {
            integral += (f(l) + f(l + 1)) * (dist.dx / 2.0);
        }
        // below-grid tail, with P approximately constant there
        integral += dist.value(0, k, r) * (c * dist.x(0)).exp() / c;
        dist.value(i0, k, r) - c * integral
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmoothSide {
    /// `∫_0^∞ e^{-Cy} P(s, x-y) dy` — the kernel rate follows the row index.
    Left,
    /// `∫_0^∞ P(s, x-y) e^{-Cy} dy` — the kernel rate follows the column index.
    Right,
}

/// `∫_0^∞ e^{-Cy} P(s, x−y) dy` (or its right-multiplied mirror) at a single
/// abscissa, by exact piecewise-linear convolution with the exponential kernel.
pub fn exp_smooth_convolution(
    dist: &GriddedDistribution,
    rates: &[f64],
    x: f64,
    side: SmoothSide,
) -> DMatrix<f64> {
    let m = dist.m;
    assert_eq!(rates.len(), m, "one rate per state");
    DMatrix::from_fn(m, m, |k, r| {
        let c = match side {
            SmoothSide::Left => rates[k],
            SmoothSide::Right => rates[r],
        };
        smooth_entry(dist, k, r, c, x)
    })
}

/// Running exponential convolution for one entry up to abscissa `x`.
fn smooth_entry(dist: &GriddedDistribution, k: usize, r: usize, c: f64, x: f64) -> f64 {
    // I(x) = ∫_{-∞}^x e^{-c(x-u)} P(u) du; result is I(x) with P linear
    // between nodes and constant below the grid.
    let p = |l: usize| dist.value(l, k, r);
    let mut acc = p(0) / c; // constant extension below the grid
    let mut xl = dist.x(0);
    let mut l = 0;
    let last = dist.n_nodes - 1;
    while l < last && dist.x(l + 1) <= x {
        let h = dist.dx;
        acc = step_linear(acc, p(l), p(l + 1), c, h);
        l += 1;
        xl = dist.x(l);
    }
    if x > xl {
        let h = x - xl;
        let frac = if l < last { (p(l + 1) - p(l)) / dist.dx } else { 0.0 };
        let p_end = p(l) + frac * h;
        acc = step_linear(acc, p(l), p_end, c, h);
    }
    acc
}

/// One exact update of `I ← e^{-ch} I + ∫_0^h e^{-c(h-τ)} P(τ) dτ` for linear P.
fn step_linear(acc: f64, p0: f64, p1: f64, c: f64, h: f64) -> f64 {
    if h == 0.0 {
        return acc;
    }
    let e = (-c * h).exp();
    let w0 = -(-c * h).exp_m1() / c; // (1 - e^{-ch})/c
    let slope = (p1 - p0) / h;
    acc * e + p0 * w0 + slope * (h - w0) / c
}

pub(crate) enum Projections {
    /// No mass below zero at all (monotone zero-drift models).
    Trivial { m: usize },
    Table(Box<ContourTable>),
}

impl Projections {
    pub(crate) fn minus_transform(&self, alpha0: Complex64) -> DMatrix<Complex64> {
        match self {
            Projections::Trivial { m } => DMatrix::zeros(*m, *m),
            Projections::Table(t) => t.minus_transform(alpha0),
        }
    }

    pub(crate) fn smoothed_minus_transform(
        &self,
        alpha0: Complex64,
        rates: &[f64],
        side: SmoothSide,
    ) -> DMatrix<Complex64> {
        match self {
            Projections::Trivial { m } => DMatrix::zeros(*m, *m),
            Projections::Table(t) => t.smoothed_minus_transform(alpha0, rates, side),
        }
    }
}

/// Builds the projection machinery for a model at kill rate `s`.
pub(crate) fn projections_for(model: &Model, s: f64) -> Result<Projections> {
    match support_class(model)? {
        SupportClass::NoNegativePart => Ok(Projections::Trivial { m: model.m() }),
        SupportClass::General => {
            let table = ContourTable::build(model, s, ContourSide::Upper, None, 1 << 16)?;
            Ok(Projections::Table(Box::new(table)))
        }
    }
}

enum SupportClass {
    NoNegativePart,
    General,
}

fn support_class(model: &Model) -> Result<SupportClass> {
    match model.drift_class() {
        DriftClass::AllNegative => Ok(SupportClass::General),
        DriftClass::AllZero => {
            if model.has_negative_mass() {
                Err(Error::Unsupported(
                    "zero-drift models with genuinely negative jumps are outside the implemented class"
                        .into(),
                ))
            } else {
                Ok(SupportClass::NoNegativePart)
            }
        }
        DriftClass::Mixed => Err(Error::Unsupported(
            "mixed zero/negative drifts are not supported by the transform-inversion machinery"
                .into(),
        )),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ContourSide {
    /// `Im α = δ > 0`; resolves the negative half-line.
    Upper,
    /// `Im α = δ < 0`; resolves the positive tail.
    Lower,
}

enum RefKind {
    /// Drift-pencil reference `s (G - iαA)^{-1}` with exact negative-half-line
    /// objects; requires strictly negative drifts.
    Pencil {
        h_ref: DMatrix<f64>,
        a_inv: DVector<f64>,
        /// `s H^{-1}`, cached for distribution-function restoration.
        sh_inv: DMatrix<f64>,
    },
    /// Constant reference (the atom of the law at zero); its open negative
    /// half-line objects all vanish.
    Constant,
}

/// Sampled remainder `Φ(s, ·+iδ) - Φ_ref(·+iδ)` on a uniform contour grid,
/// with closed-form restoration of the reference parts.
pub(crate) struct ContourTable {
    pub s: f64,
    pub delta: f64,
    pub step: f64,
    pub n: usize,
    pub m: usize,
    samples: Vec<Complex64>,
    reference: RefKind,
    atom: DMatrix<f64>,
}

/// True iff the Perron eigenvalue of `K(z)` lies strictly below `s`, via the
/// M-matrix characterization of `sI - K(z)` (no eigensolve needed).
fn perron_below(eval: &CumulantEvaluator, s: f64, z: f64) -> bool {
    let k = match eval.psi_z(Complex64::new(z, 0.0)) {
        Ok(k) => linalg::real_part(&k),
        Err(_) => return false,
    };
    let m = k.nrows();
    let b = DMatrix::identity(m, m) * s - &k;
    for i in 0..m {
        if b[(i, i)] <= 0.0 {
            return false;
        }
    }
    let ones = DMatrix::from_element(m, 1, 1.0);
    match b.lu().solve(&ones) {
        Some(x) => x.iter().all(|&v| v > 0.0),
        None => false,
    }
}

impl ContourTable {
    pub(crate) fn build(
        model: &Model,
        s: f64,
        side: ContourSide,
        span_min: Option<f64>,
        n_pref: usize,
    ) -> Result<Self> {
        assert!(s > 0.0);
        if model.orientation() == Orientation::LowerSemiContinuous {
            return Err(Error::Unsupported(
                "contour tables operate on the upper-semi-continuous pre-image".into(),
            ));
        }
        let eval = CumulantEvaluator::new(model)?;
        let m = model.m();

        // Contour height: half the verified clearance to the nearest
        // resolvent root, bounded by the mixture / jump-rate poles.
        let (delta, reference) = match side {
            ContourSide::Upper => {
                let cap = 0.45 * model.mu_min().min(16.0);
                let mut d = cap.min(2.0);
                while !perron_below(&eval, s, -2.0 * d) {
                    d *= 0.5;
                    if d < 1e-7 {
                        return Err(Error::Unsupported(
                            "could not place the upper inversion contour".into(),
                        ));
                    }
                }
                (d, pencil_reference(model, s)?)
            }
            ContourSide::Lower => {
                let cap = 0.45 * model.c_min_active().min(16.0);
                let mut d = cap.min(2.0);
                while !perron_below(&eval, s, 2.0 * d) {
                    d *= 0.5;
                    if d < 1e-7 {
                        return Err(Error::Unsupported(
                            "could not place the lower inversion contour".into(),
                        ));
                    }
                }
                (-d, pencil_reference(model, s)?)
            }
        };

        let h_alias = 2.0 * std::f64::consts::PI * delta.abs() / ALIAS_LOG * 0.9;
        let step = match span_min {
            Some(span) => h_alias.min(2.0 * std::f64::consts::PI / span),
            None => h_alias,
        };
        let mut n = n_pref.next_power_of_two().max(1 << 12);
        while (n as f64) * step / 2.0 < T_MIN {
            n *= 2;
            if n > MAX_SAMPLES {
                return Err(Error::GridTooCoarse { residual: f64::INFINITY, tolerance: RETRANSFORM_TOL });
            }
        }

        let atom = crate::asymptotics::xi_atom_at_zero(model, s)?;
        let mut samples = vec![Complex64::default(); n * m * m];
        let chunk = 512;
        let errors: Vec<Result<()>> = samples
            .par_chunks_mut(chunk * m * m)
            .enumerate()
            .map(|(ci, buf)| {
                let jstart = ci * chunk;
                for (local, j) in (jstart..(jstart + buf.len() / (m * m))).enumerate() {
                    let t = (j as f64 - n as f64 / 2.0) * step;
                    let alpha = Complex64::new(t, delta);
                    let phi = eval.phi(s, alpha)?;
                    let phi_ref = reference_value(&reference, model, s, alpha, &atom)?;
                    for k in 0..m {
                        for r in 0..m {
                            buf[(local * m + k) * m + r] = phi[(k, r)] - phi_ref[(k, r)];
                        }
                    }
                }
                Ok(())
            })
            .collect();
        for e in errors {
            e?;
        }

        Ok(ContourTable { s, delta, step, n, m, samples, reference, atom })
    }

    fn t(&self, j: usize) -> f64 {
        (j as f64 - self.n as f64 / 2.0) * self.step
    }

    pub(crate) fn span(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.step
    }

    pub(crate) fn atom(&self) -> &DMatrix<f64> {
        &self.atom
    }

    fn sample(&self, j: usize, k: usize, r: usize) -> Complex64 {
        self.samples[(j * self.m + k) * self.m + r]
    }

    /// `[Φ(s,·)]_-(α₀) = ∫_{(-∞,0)} e^{iα₀ x} dP(s,x)`, exact up to the fitted
    /// truncation tail. Valid for `Im α₀ <= 0` (and real probes).
    pub(crate) fn minus_transform(&self, alpha0: Complex64) -> DMatrix<Complex64> {
        debug_assert!(self.delta > 0.0, "minus projections need the upper contour");
        let rem = self.weighted_sum(|t| {
            let den = Complex64::new(self.delta, -(t)) + Complex64::new(0.0, 1.0) * alpha0;
            1.0 / den
        });
        self.ref_minus(alpha0) + rem
    }

    /// Smoothed projections `[(C-iα)^{-1}Φ]_-(α₀)` (Left) and
    /// `[Φ(C-iα)^{-1}]_-(α₀)` (Right).
    pub(crate) fn smoothed_minus_transform(
        &self,
        alpha0: Complex64,
        rates: &[f64],
        side: SmoothSide,
    ) -> DMatrix<Complex64> {
        debug_assert!(self.delta > 0.0);
        let m = self.m;
        let scale = |t: f64, k: usize, r: usize| {
            let c = match side {
                SmoothSide::Left => rates[k],
                SmoothSide::Right => rates[r],
            };
            1.0 / Complex64::new(c + self.delta, -t)
        };
        let w = |t: f64| {
            let den = Complex64::new(self.delta, -t) + Complex64::new(0.0, 1.0) * alpha0;
            1.0 / den
        };
        let mut out = DMatrix::<Complex64>::zeros(m, m);
        let fit = self.tail_window();
        for k in 0..m {
            for r in 0..m {
                let mut acc = Complex64::default();
                for j in 0..self.n {
                    let t = self.t(j);
                    acc += self.sample(j, k, r) * scale(t, k, r) * w(t);
                }
                let g = |j: usize| {
                    let t = self.t(j);
                    self.sample(j, k, r) * scale(t, k, r) * w(t)
                };
                out[(k, r)] = acc * self.step / (2.0 * std::f64::consts::PI) + self.tail_fit(&g, fit);
            }
        }
        out + self.ref_smoothed(alpha0, rates, side)
    }

    /// Weighted trapezoid sum `(h/2π) Σ w(t_j) rem_j` with fitted tails.
    fn weighted_sum(&self, w: impl Fn(f64) -> Complex64 + Sync) -> DMatrix<Complex64> {
        let m = self.m;
        let fit = self.tail_window();
        DMatrix::from_fn(m, m, |k, r| {
            let mut acc = Complex64::default();
            for j in 0..self.n {
                acc += self.sample(j, k, r) * w(self.t(j));
            }
            let g = |j: usize| self.sample(j, k, r) * w(self.t(j));
            acc * self.step / (2.0 * std::f64::consts::PI) + self.tail_fit(&g, fit)
        })
    }

    fn tail_window(&self) -> usize {
        (self.n / 64).clamp(64, 1024)
    }

    /// Power-law continuation of the truncated tails: estimate the decay
    /// exponent from two trailing blocks and integrate the fit beyond the
    /// window.
    fn tail_fit(&self, g: &dyn Fn(usize) -> Complex64, win: usize) -> Complex64 {
        let two_pi = 2.0 * std::f64::consts::PI;
        let mut total = Complex64::default();
        for side in 0..2 {
            let idx = |i: usize| if side == 0 { self.n - 1 - i } else { i };
            let half = win / 2;
            let mut b1 = Complex64::default();
            let mut b2 = Complex64::default();
            let mut t1 = 0.0;
            let mut t2 = 0.0;
            for i in 0..half {
                b2 += g(idx(i));
                t2 += self.t(idx(i)).abs();
                b1 += g(idx(i + half));
                t1 += self.t(idx(i + half)).abs();
            }
            b1 /= half as f64;
            b2 /= half as f64;
            t1 /= half as f64;
            t2 /= half as f64;
            if b2.norm() < 1e-300 || b1.norm() < 1e-300 {
                continue;
            }
            let p = ((b1.norm() / b2.norm()).ln() / (t2 / t1).ln()).clamp(1.2, 8.0);
            let t_edge = self.t(idx(0)).abs() + self.step / 2.0;
            // ∫_T^∞ g ≈ g(t̄₂) (t̄₂/T)^p T / (p-1)
            let tail = b2 * (t2 / t_edge).powf(p) * t_edge / (p - 1.0);
            total += tail / two_pi;
        }
        total
    }

    /// `∫_{(-∞,0)} e^{iα₀x} p_ref(x) dx = -s (iα₀ I - H)^{-1} A^{-1}`.
    fn ref_minus(&self, alpha0: Complex64) -> DMatrix<Complex64> {
        match &self.reference {
            RefKind::Constant => DMatrix::zeros(self.m, self.m),
            RefKind::Pencil { h_ref, a_inv, .. } => {
                let ia = Complex64::new(0.0, 1.0) * alpha0;
                let m = self.m;
                let mat = DMatrix::from_fn(m, m, |k, r| {
                    ia * if k == r { 1.0 } else { 0.0 } - Complex64::new(h_ref[(k, r)], 0.0)
                });
                let inv = mat.try_inverse().expect("reference resolvent is regular below the strip");
                let mut out = inv * Complex64::new(-self.s, 0.0);
                for k in 0..m {
                    for r in 0..m {
                        out[(k, r)] *= a_inv[r];
                    }
                }
                out
            }
        }
    }

    fn ref_smoothed(
        &self,
        alpha0: Complex64,
        rates: &[f64],
        side: SmoothSide,
    ) -> DMatrix<Complex64> {
        match &self.reference {
            RefKind::Constant => DMatrix::zeros(self.m, self.m),
            RefKind::Pencil { h_ref, .. } => {
                let m = self.m;
                let base = self.ref_minus(alpha0); // -s (iα₀ - H)^{-1} A^{-1}
                match side {
                    SmoothSide::Left => {
                        // rows of (c_k I - H)^{-1} applied on the left
                        let mut x_l = DMatrix::<f64>::zeros(m, m);
                        for k in 0..m {
                            let mat = DMatrix::from_fn(m, m, |i, j| {
                                rates[k] * if i == j { 1.0 } else { 0.0 } - h_ref[(i, j)]
                            });
                            let mut e = DVector::zeros(m);
                            e[k] = 1.0;
                            let row = mat
                                .transpose()
                                .lu()
                                .solve(&e)
                                .expect("c I - H is an M-matrix");
                            for j in 0..m {
                                x_l[(k, j)] = row[j];
                            }
                        }
                        linalg::to_complex(&x_l) * base
                    }
                    SmoothSide::Right => {
                        // columns: (c_j I - H)^{-1} base[:, j]
                        let mut out = DMatrix::<Complex64>::zeros(m, m);
                        for j in 0..m {
                            let mat = DMatrix::from_fn(m, m, |p, q| {
                                rates[j] * if p == q { 1.0 } else { 0.0 } - h_ref[(p, q)]
                            });
                            let lu = mat.lu();
                            let re: DVector<f64> = DVector::from_fn(m, |p, _| base[(p, j)].re);
                            let im: DVector<f64> = DVector::from_fn(m, |p, _| base[(p, j)].im);
                            let xr = lu.solve(&re).expect("c I - H is an M-matrix");
                            let xi = lu.solve(&im).expect("c I - H is an M-matrix");
                            for p in 0..m {
                                out[(p, j)] = Complex64::new(xr[p], xi[p]);
                            }
                        }
                        out
                    }
                }
            }
        }
    }

    /// Distribution function on the half-grid of its side via FFT; returns
    /// `(x0, dx, values)` where values run over nodes `x <= 0` (upper side)
    /// or the tail `P{ξ(θ_s) >= x}` on nodes `x >= 0` (lower side).
    pub(crate) fn half_grid(&self) -> (f64, f64, Vec<f64>) {
        let n = self.n;
        let m = self.m;
        let dx = self.span() / n as f64;
        let half = n / 2 + 1;
        let mut out = vec![0.0; half * m * m];
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n);
        let upper = self.delta > 0.0;

        let mut buf = vec![Complex64::default(); n];
        for k in 0..m {
            for r in 0..m {
                for j in 0..n {
                    let t = self.t(j);
                    let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                    buf[j] = self.sample(j, k, r) / Complex64::new(self.delta, -t) * sign;
                }
                fft.process(&mut buf);
                for l in 0..half {
                    // upper side: nodes x = (l - n/2) dx <= 0 at FFT index l;
                    // lower side: nodes x = l' dx >= 0 at FFT index l' + n/2.
                    let (idx, x) = if upper {
                        (l, (l as f64 - n as f64 / 2.0) * dx)
                    } else {
                        if l + n / 2 >= n {
                            continue; // aliased top node; tail is negligible there
                        }
                        (l + n / 2, l as f64 * dx)
                    };
                    let sign = if idx % 2 == 0 { 1.0 } else { -1.0 };
                    let v = buf[idx] * sign * self.step / (2.0 * std::f64::consts::PI);
                    let damped = v.re * (self.delta * x).exp();
                    let cell = (l * m + k) * m + r;
                    out[cell] = if upper { damped } else { -damped };
                }
            }
        }

        // restore the reference distribution function on the negative side
        if upper {
            if let RefKind::Pencil { h_ref, a_inv, sh_inv } = &self.reference {
                let step_mat = linalg::expm(&(h_ref * (-dx)));
                let mut cur = DMatrix::<f64>::zeros(m, m);
                let checkpoint = 2048;
                for l in 0..half {
                    let x = (l as f64 - n as f64 / 2.0) * dx;
                    if l % checkpoint == 0 {
                        cur = linalg::expm(&(h_ref * (-x)));
                    } else {
                        cur = &cur * &step_mat;
                    }
                    let base = sh_inv * &cur;
                    for k in 0..m {
                        for r in 0..m {
                            out[(l * m + k) * m + r] += base[(k, r)] * a_inv[r];
                        }
                    }
                }
            }
        }
        let x0 = if upper { -(n as f64) / 2.0 * dx } else { 0.0 };
        (x0, dx, out)
    }
}

fn pencil_reference(model: &Model, s: f64) -> Result<RefKind> {
    match model.drift_class() {
        DriftClass::AllNegative => {
            let m = model.m();
            let spec = model.spec();
            // G = sI + Λ + N - K0({0})
            let mut g = DMatrix::<f64>::zeros(m, m);
            for k in 0..m {
                g[(k, k)] = s + spec.lambda[k] + spec.nu[k]
                    - spec.lambda[k] * (1.0 - spec.pos_weight[k]) * spec.neg_jump[k].mass_at_zero();
                for r in 0..m {
                    g[(k, r)] -= spec.nu[k] * model.f0()[(k, r)];
                }
            }
            let a_inv = DVector::from_fn(m, |k, _| 1.0 / spec.a[k]);
            let mut h_ref = g.clone();
            for k in 0..m {
                for r in 0..m {
                    h_ref[(k, r)] *= a_inv[k];
                }
            }
            let sh_inv = linalg::guarded_inverse(&h_ref, "drift pencil")? * s;
            Ok(RefKind::Pencil { h_ref, a_inv, sh_inv })
        }
        DriftClass::AllZero => Ok(RefKind::Constant),
        DriftClass::Mixed => Err(Error::Unsupported(
            "mixed zero/negative drifts are not supported by the transform-inversion machinery".into(),
        )),
    }
}

fn reference_value(
    reference: &RefKind,
    model: &Model,
    s: f64,
    alpha: Complex64,
    atom: &DMatrix<f64>,
) -> Result<DMatrix<Complex64>> {
    match reference {
        RefKind::Constant => Ok(linalg::to_complex(atom)),
        RefKind::Pencil { .. } => {
            let m = model.m();
            let spec = model.spec();
            // rebuild G - iαA cheaply
            let ia = Complex64::new(0.0, 1.0) * alpha;
            let mut mat = DMatrix::<Complex64>::zeros(m, m);
            for k in 0..m {
                for r in 0..m {
                    let mut v = Complex64::new(-spec.nu[k] * model.f0()[(k, r)], 0.0);
                    if k == r {
                        v += Complex64::new(
                            s + spec.lambda[k] + spec.nu[k]
                                - spec.lambda[k]
                                    * (1.0 - spec.pos_weight[k])
                                    * spec.neg_jump[k].mass_at_zero(),
                            0.0,
                        );
                        v -= ia * spec.a[k];
                    }
                    mat[(k, r)] = v;
                }
            }
            let inv = mat
                .try_inverse()
                .ok_or(Error::IllConditioned { context: "reference pencil", cond: f64::INFINITY })?;
            Ok(inv * Complex64::new(s, 0.0))
        }
    }
}

/// Inverts `Φ(s, ·)` into the matrix distribution function of `ξ(θ_s)` on a
/// symmetric grid. The atom at zero (zero-drift mode) is computed analytically
/// and excluded from the grid values. Self-reports a grid-too-coarse error
/// when the re-transform residual exceeds `1e-6`.
pub fn invert_xi_distribution(
    model: &Model,
    s: f64,
    params: &GridParams,
) -> Result<GriddedDistribution> {
    if model.orientation() == Orientation::LowerSemiContinuous {
        let pre = Model::new(crate::model::usc_preimage(model.spec()))?;
        let base = invert_xi_distribution(&pre, s, params)?;
        return Ok(mirror_distribution(&base, &pre, s));
    }
    let class = support_class(model)?;
    let has_positive = model.active().iter().any(|&a| a);
    let span_half = params.x_span.unwrap_or_else(|| {
        let rate = model.c_min_active().min(model.mu_min()).min(2.0);
        40.0 / rate
    });
    let span = 2.0 * span_half;
    let atom = crate::asymptotics::xi_atom_at_zero(model, s)?;
    let m = model.m();
    let ps = model.resolvent_ps(s)?;

    let (x0, dx, n_nodes, mut values) = match class {
        SupportClass::General => {
            let upper = ContourTable::build(model, s, ContourSide::Upper, Some(span), params.n_samples)?;
            let (x0, dx, neg) = upper.half_grid();
            let half = neg.len() / (m * m);
            let n_nodes = 2 * (half - 1) + 1;
            let mut values = vec![0.0; n_nodes * m * m];
            values[..neg.len()].copy_from_slice(&neg);
            if has_positive {
                let lower =
                    ContourTable::build(model, s, ContourSide::Lower, Some(upper.span()), upper.n)?;
                if (lower.span() - upper.span()).abs() > 1e-9 * upper.span() || lower.n != upper.n {
                    return Err(Error::Unsupported(
                        "mismatched contour grids between the upper and lower sides".into(),
                    ));
                }
                let (_, _, tail) = lower.half_grid();
                for l in 1..half {
                    for k in 0..m {
                        for r in 0..m {
                            let t = tail[(l * m + k) * m + r];
                            values[((half - 1 + l) * m + k) * m + r] = ps[(k, r)] - t;
                        }
                    }
                }
            } else {
                // no upward jumps: all mass sits at or below zero
                for l in 1..half {
                    for k in 0..m {
                        for r in 0..m {
                            values[((half - 1 + l) * m + k) * m + r] = ps[(k, r)] - atom[(k, r)];
                        }
                    }
                }
            }
            (x0, dx, n_nodes, values)
        }
        SupportClass::NoNegativePart => {
            let lower = ContourTable::build(model, s, ContourSide::Lower, Some(span), params.n_samples)?;
            let (_, dx, tail) = lower.half_grid();
            let half = tail.len() / (m * m);
            let n_nodes = 2 * (half - 1) + 1;
            let mut values = vec![0.0; n_nodes * m * m];
            for l in 1..half {
                for k in 0..m {
                    for r in 0..m {
                        let t = tail[(l * m + k) * m + r];
                        values[((half - 1 + l) * m + k) * m + r] = ps[(k, r)] - t;
                    }
                }
            }
            ((-(half as f64 - 1.0)) * dx, dx, n_nodes, values)
        }
    };

    // clamp rounding noise at the left edge and the zero node
    let zero = (n_nodes - 1) / 2;
    for l in [0usize, zero] {
        for cell in (l * m * m)..((l + 1) * m * m) {
            if values[cell] < 0.0 && values[cell] > -1e-9 {
                values[cell] = 0.0;
            }
        }
    }

    let mut dist = GriddedDistribution {
        s,
        x0,
        dx,
        n_nodes,
        m,
        values,
        atom0: atom,
        err_estimate: 0.0,
    };

    // round-trip self-check against the exact transform
    let eval = CumulantEvaluator::new(model)?;
    let mut residual: f64 = 0.0;
    for i in 0..32 {
        let alpha = -6.0 + 12.0 * (i as f64 + 0.5) / 32.0;
        let back = dist.retransform(alpha);
        let exact = eval.phi(s, Complex64::new(alpha, 0.0))?;
        residual = residual.max(linalg::max_abs(&(back - exact)));
    }
    dist.err_estimate = residual;
    if residual > RETRANSFORM_TOL {
        return Err(Error::GridTooCoarse { residual, tolerance: RETRANSFORM_TOL });
    }
    Ok(dist)
}

fn mirror_distribution(base: &GriddedDistribution, pre: &Model, s: f64) -> GriddedDistribution {
    let m = base.m;
    let ps = pre.resolvent_ps(s).expect("validated model");
    let n = base.n_nodes;
    let mut values = vec![0.0; n * m * m];
    for l in 0..n {
        let lm = n - 1 - l;
        for k in 0..m {
            for r in 0..m {
                // P{-ξ < x} = P_s - P{ξ < -x} - atom·1{-x >= 0}
                let closed = base.value(lm, k, r)
                    + if base.x(lm) >= 0.0 { base.atom0[(k, r)] } else { 0.0 };
                values[(l * m + k) * m + r] = (ps[(k, r)] - closed).max(0.0);
            }
        }
    }
    GriddedDistribution {
        s,
        x0: -(base.x0 + (n - 1) as f64 * base.dx),
        dx: base.dx,
        n_nodes: n,
        m,
        values,
        atom0: base.atom0.clone(),
        err_estimate: base.err_estimate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelSpec, NegativeMixture};
    use approx::assert_relative_eq;

    fn pure_drift() -> Model {
        let mut spec = ModelSpec::scalar(-1.0, 0.0, 2.0, 0.0, NegativeMixture::default());
        spec.pos_weight = vec![0.0];
        Model::new(spec).unwrap()
    }

    #[test]
    fn pure_drift_distribution_is_exponential_in_x() {
        // ξ(θ_s) = -θ_s for unit downward drift: P(1, x) = e^x on x < 0.
        let model = pure_drift();
        let dist = invert_xi_distribution(&model, 1.0, &GridParams::default()).unwrap();
        for x in [-3.0, -1.0, -0.25] {
            let v = dist.cdf_at(x)[(0, 0)];
            assert_relative_eq!(v, x.exp(), epsilon = 1e-7);
        }
        assert_relative_eq!(dist.cdf_at(-1.0)[(0, 0)], (-1.0f64).exp(), epsilon = 1e-7);
        // total mass reaches one at the right edge
        let last = dist.matrix_at(dist.n_nodes - 1)[(0, 0)];
        assert_relative_eq!(last, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn benchmark_distribution_matches_closed_form() {
        // a=-1, λ=1, c=2, s=1: density B e^{√2 x} below zero, A e^{-√2 x} above.
        let model =
            Model::new(ModelSpec::scalar(-1.0, 1.0, 2.0, 1.0, NegativeMixture::default())).unwrap();
        let dist = invert_xi_distribution(&model, 1.0, &GridParams::default()).unwrap();
        let r2 = 2.0f64.sqrt();
        let b = (2.0 + r2) / (2.0 * r2);
        let a = (2.0 - r2) / (2.0 * r2);
        for x in [-2.0, -0.5, -0.1] {
            let expected = b / r2 * (r2 * x).exp();
            assert_relative_eq!(dist.cdf_at(x)[(0, 0)], expected, epsilon = 1e-8);
        }
        for x in [0.4, 1.5] {
            let expected = 1.0 - a / r2 * (-r2 * x).exp();
            assert_relative_eq!(dist.cdf_at(x)[(0, 0)], expected, epsilon = 1e-8);
        }
    }

    #[test]
    fn minus_projection_of_pure_drift() {
        let model = pure_drift();
        let dist = invert_xi_distribution(&model, 1.0, &GridParams::default()).unwrap();
        // ∫ e^{2x} d(e^x) over x<0 = 1/3
        let w = minus_projection_moment(&dist, 2.0);
        assert_relative_eq!(w[(0, 0)], 1.0 / 3.0, epsilon = 1e-7);
        // c -> 0 limit approaches the negative mass
        let w_small = minus_projection_moment(&dist, 1e-6);
        assert_relative_eq!(w_small[(0, 0)], 1.0, epsilon = 1e-4);
    }

    #[test]
    fn minus_projection_decreases_in_c() {
        let model =
            Model::new(ModelSpec::scalar(-1.0, 3.0, 2.0, 1.0, NegativeMixture::default())).unwrap();
        let dist = invert_xi_distribution(&model, 1.0, &GridParams::default()).unwrap();
        let mut prev = f64::INFINITY;
        for c in [0.5, 1.0, 2.0, 4.0] {
            let w = minus_projection_moment(&dist, c)[(0, 0)];
            assert!(w < prev);
            prev = w;
        }
    }

    #[test]
    fn smooth_convolution_closed_forms() {
        let model = pure_drift();
        let dist = invert_xi_distribution(&model, 1.0, &GridParams::default()).unwrap();
        // ∫_0^∞ e^{-2y} e^{x-y} dy = e^x / 3 at x = -1
        let g = exp_smooth_convolution(&dist, &[2.0], -1.0, SmoothSide::Left);
        assert_relative_eq!(g[(0, 0)], (-1.0f64).exp() / 3.0, epsilon = 1e-6);
        let g = exp_smooth_convolution(&dist, &[2.0], -1.0, SmoothSide::Right);
        assert_relative_eq!(g[(0, 0)], (-1.0f64).exp() / 3.0, epsilon = 1e-6);
    }

    #[test]
    fn smooth_convolution_of_constant_is_inverse_rate() {
        // P ≡ 1 -> ∫_0^∞ e^{-cy} dy = 1/c; P ≡ 0 -> 0.
        let ones = GriddedDistribution {
            s: 1.0,
            x0: -10.0,
            dx: 0.01,
            n_nodes: 2001,
            m: 1,
            values: vec![1.0; 2001],
            atom0: DMatrix::zeros(1, 1),
            err_estimate: 0.0,
        };
        let g = exp_smooth_convolution(&ones, &[2.5], 3.0, SmoothSide::Left);
        assert_relative_eq!(g[(0, 0)], 1.0 / 2.5, epsilon = 1e-12);
        let zeros = GriddedDistribution { values: vec![0.0; 2001], ..ones };
        let g = exp_smooth_convolution(&zeros, &[2.5], 3.0, SmoothSide::Left);
        assert_eq!(g[(0, 0)], 0.0);
    }

    #[test]
    fn entries_are_monotone_distribution_functions() {
        let mut spec = ModelSpec::two_state([1.0, 1.0], [-1.0, -0.5], [1.0, 2.0], [2.0, 3.0]);
        spec.pos_weight = vec![1.0, 0.6];
        spec.neg_jump[1] = NegativeMixture {
            components: vec![crate::model::MixtureComponent {
                w: 1.0,
                kind: crate::model::ComponentKind::Erlang { rate: 1.5, shape: 2 },
            }],
        };
        let model = Model::new(spec).unwrap();
        let dist = invert_xi_distribution(&model, 1.0, &GridParams::default()).unwrap();
        for k in 0..2 {
            for r in 0..2 {
                let mut prev = -1e-9;
                for l in (0..dist.n_nodes).step_by(16) {
                    let v = dist.value(l, k, r);
                    assert!(v >= prev - 1e-9, "entry ({k},{r}) not monotone at node {l}");
                    prev = v;
                }
            }
        }
        // left edge is negligible, right edge row sums match P_s
        let ps = model.resolvent_ps(1.0).unwrap();
        for k in 0..2 {
            let mut left = 0.0;
            let mut right = 0.0;
            for r in 0..2 {
                left += dist.value(0, k, r);
                right += dist.value(dist.n_nodes - 1, k, r);
            }
            assert!(left <= 1e-6);
            assert_relative_eq!(right, ps.row(k).sum(), epsilon = 1e-6);
        }
    }

    #[test]
    fn halving_the_grid_step_stays_within_error_budget() {
        let model =
            Model::new(ModelSpec::scalar(-1.0, 1.0, 2.0, 1.0, NegativeMixture::default())).unwrap();
        let coarse = invert_xi_distribution(
            &model,
            1.0,
            &GridParams { x_span: None, n_samples: 1 << 15 },
        )
        .unwrap();
        let fine = invert_xi_distribution(
            &model,
            1.0,
            &GridParams { x_span: None, n_samples: 1 << 16 },
        )
        .unwrap();
        let probe = [-2.0, -1.0, -0.3, 0.5, 1.5];
        for &x in &probe {
            let d = (coarse.cdf_at(x)[(0, 0)] - fine.cdf_at(x)[(0, 0)]).abs();
            assert!(d < 4.0 * coarse.err_estimate.max(1e-9), "change {d} exceeds budget");
        }
    }

    #[test]
    fn exact_projections_match_grid_quadrature() {
        let model =
            Model::new(ModelSpec::scalar(-1.0, 3.0, 2.0, 1.0, NegativeMixture::default())).unwrap();
        let table = ContourTable::build(&model, 1.0, ContourSide::Upper, None, 1 << 16).unwrap();
        let dist = invert_xi_distribution(&model, 1.0, &GridParams::default()).unwrap();
        let c = 2.0;
        let exact = table.minus_transform(Complex64::new(0.0, -c));
        let grid = minus_projection_moment(&dist, c);
        assert_relative_eq!(exact[(0, 0)].re, grid[(0, 0)], epsilon = 2e-6);
        assert!(exact[(0, 0)].im.abs() < 1e-10);
        // closed form: β/(c+η) with β=(2+η)/..., η=1+√3
        let eta = 1.0 + 3.0f64.sqrt();
        let beta = (2.0 + eta) / (eta - (3.0f64.sqrt() - 1.0));
        assert_relative_eq!(exact[(0, 0)].re, beta / (c + eta), epsilon = 1e-9);
    }

    #[test]
    fn mirrored_model_grid_reflects() {
        let spec = ModelSpec::scalar(-1.0, 1.0, 2.0, 1.0, NegativeMixture::default());
        let model = Model::new(spec.clone()).unwrap();
        let mirrored = Model::new(crate::model::mirror_model(&spec)).unwrap();
        let dist = invert_xi_distribution(&model, 1.0, &GridParams::default()).unwrap();
        let mdist = invert_xi_distribution(&mirrored, 1.0, &GridParams::default()).unwrap();
        for x in [-1.5, -0.4, 0.7, 2.0] {
            let direct = dist.cdf_at(-x)[(0, 0)];
            let refl = mdist.cdf_at(x)[(0, 0)];
            assert_relative_eq!(refl, 1.0 - direct, epsilon = 1e-6);
        }
    }
}
