//! The matrix cumulant `Ψ(α)`, the killed-process transform `Φ(s,α)`, the
//! real-argument cumulant `K(r) = Ψ(-ir)`, and the upward jump tail.
//!
//! For the atom/Erlang mixture family every ingredient is available in closed
//! form, so evaluation is exact up to rounding. All matrix inverses go through
//! partial-pivot elimination with a condition guard.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::linalg;
use crate::model::{Model, ModelSpec, Orientation};
use crate::{Error, Result};

const POLE_TOL: f64 = 1e-9;

/// Closed-form evaluator for the cumulant and its derived transforms.
/// Immutable after construction; concurrent evaluation is safe.
#[derive(Debug, Clone)]
pub struct CumulantEvaluator {
    usc: Model,
    /// +1 for the native orientation, -1 for a mirrored spec: `Ψ_(1)(α) = Ψ(-α)`.
    sign: f64,
    strip: (f64, f64),
}

impl CumulantEvaluator {
    pub fn new(model: &Model) -> Result<Self> {
        let (usc, sign) = match model.orientation() {
            Orientation::UpperSemiContinuous => (model.clone(), 1.0),
            Orientation::LowerSemiContinuous => {
                (Model::new(crate::model::usc_preimage(model.spec()))?, -1.0)
            }
        };
        let strip = (-usc.c_min_active(), usc.mu_min());
        Ok(CumulantEvaluator { usc, sign, strip })
    }

    pub fn from_spec(spec: &ModelSpec) -> Result<Self> {
        Self::new(&Model::new(spec.clone())?)
    }

    pub fn model(&self) -> &Model {
        &self.usc
    }

    /// Admissible horizontal strip for `Im α` (native orientation): the
    /// transform is analytic for `strip.0 < Im α < strip.1`.
    pub fn strip(&self) -> (f64, f64) {
        if self.sign > 0.0 {
            self.strip
        } else {
            (-self.strip.1, -self.strip.0)
        }
    }

    /// `Ψ` as a function of `z = iα` for the USC pre-image. Real `z` in
    /// `(-mu_min, c_min)` gives the real cumulant `K(z)`.
    pub(crate) fn psi_z(&self, z: Complex64) -> Result<DMatrix<Complex64>> {
        let spec = self.usc.spec();
        let m = spec.m;
        for k in 0..m {
            if self.usc.active()[k] && (Complex64::new(spec.c[k], 0.0) - z).norm() < POLE_TOL {
                return Err(Error::OutsideStrip { point: format!("z = {}", z) });
            }
        }
        for (k, mix) in spec.neg_jump.iter().enumerate() {
            if spec.lambda[k] * (1.0 - spec.pos_weight[k]) > 0.0 {
                for comp in &mix.components {
                    if let crate::model::ComponentKind::Erlang { rate, .. } = comp.kind {
                        if (Complex64::new(rate, 0.0) + z).norm() < POLE_TOL {
                            return Err(Error::OutsideStrip { point: format!("z = {}", z) });
                        }
                    }
                }
            }
        }
        let mut out = DMatrix::<Complex64>::zeros(m, m);
        for k in 0..m {
            let lam = spec.lambda[k];
            let pw = spec.pos_weight[k];
            let mut diag = z * spec.a[k];
            if lam > 0.0 {
                let mut jump = Complex64::new(0.0, 0.0);
                if pw > 0.0 {
                    jump += pw * Complex64::new(spec.c[k], 0.0) / (Complex64::new(spec.c[k], 0.0) - z);
                }
                if pw < 1.0 {
                    jump += (1.0 - pw) * spec.neg_jump[k].mgf(z);
                }
                diag += lam * (jump - 1.0);
            }
            out[(k, k)] = diag - spec.nu[k];
            for r in 0..m {
                let p = self.usc.embedded()[(k, r)];
                if p > 0.0 {
                    let mgf = match self.usc.switch_law(k, r) {
                        Some(law) => {
                            Complex64::new(law.atom0, 0.0)
                                + (1.0 - law.atom0)
                                    * law.neg.as_ref().map(|mx| mx.mgf(z)).unwrap_or_else(|| 1.0.into())
                        }
                        None => Complex64::new(1.0, 0.0),
                    };
                    out[(k, r)] += spec.nu[k] * p * mgf;
                }
            }
        }
        Ok(out)
    }

    /// The cumulant matrix `Ψ(α)` for complex `α` in the admissible strip.
    pub fn psi(&self, alpha: Complex64) -> Result<DMatrix<Complex64>> {
        let z = Complex64::new(0.0, 1.0) * alpha * self.sign;
        self.psi_z(z)
    }

    /// `Φ(s, α) = s (sI - Ψ(α))^{-1}`, the transform of `ξ(θ_s)`.
    pub fn phi(&self, s: f64, alpha: Complex64) -> Result<DMatrix<Complex64>> {
        assert!(s > 0.0, "phi requires s > 0");
        let m = self.usc.m();
        let a = DMatrix::<Complex64>::identity(m, m) * Complex64::new(s, 0.0) - self.psi(alpha)?;
        let inv = linalg::guarded_inverse(&a, "resolvent transform").map_err(|e| match e {
            Error::IllConditioned { cond, .. } => Error::OutsideStrip {
                point: format!("α = {} (sI - Ψ singular, cond ≈ {:.2e})", alpha, cond),
            },
            other => other,
        })?;
        Ok(inv * Complex64::new(s, 0.0))
    }

    /// `Φ_t(α) = exp(t Ψ(α))`.
    pub fn phi_t(&self, t: f64, alpha: Complex64) -> Result<DMatrix<Complex64>> {
        let psi = self.psi(alpha)?;
        Ok(linalg::expm(&psi.map(|x| x * t)))
    }

    /// Real cumulant `K(r) = Ψ(-ir)`. Values beyond the analyticity strip are
    /// the meromorphic continuation of the closed form; poles are rejected.
    pub fn k_real(&self, r: f64) -> Result<DMatrix<f64>> {
        let z = Complex64::new(r * self.sign, 0.0);
        let psi = self.psi_z(z)?;
        Ok(linalg::real_part(&psi))
    }

    /// Tail of the upward jump measure: `K̄0(x) = Λ F̄0(0) e^{-Cx}` (diagonal),
    /// `x > 0`.
    pub fn k0_tail(&self, x: f64) -> DMatrix<f64> {
        assert!(x > 0.0, "tail defined for x > 0");
        let spec = self.usc.spec();
        let m = spec.m;
        DMatrix::from_fn(m, m, |k, r| {
            if k == r {
                spec.lambda[k] * spec.pos_weight[k] * (-spec.c[k] * x).exp()
            } else {
                0.0
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NegativeMixture;
    use approx::assert_relative_eq;

    fn scalar_eval(a: f64, lambda: f64, c: f64) -> CumulantEvaluator {
        let spec = ModelSpec::scalar(a, lambda, c, 1.0, NegativeMixture::default());
        CumulantEvaluator::from_spec(&spec).unwrap()
    }

    #[test]
    fn psi_at_zero_is_generator() {
        let mut spec = ModelSpec::two_state([1.0, 1.0], [-1.0, -0.5], [1.0, 2.0], [2.0, 3.0]);
        spec.neg_jump[0] = NegativeMixture {
            components: vec![crate::model::MixtureComponent {
                w: 1.0,
                kind: crate::model::ComponentKind::Erlang { rate: 2.0, shape: 2 },
            }],
        };
        spec.pos_weight = vec![0.6, 1.0];
        let model = Model::new(spec).unwrap();
        let eval = CumulantEvaluator::new(&model).unwrap();
        let psi0 = eval.psi(Complex64::new(0.0, 0.0)).unwrap();
        let diff = linalg::real_part(&psi0) - model.generator();
        assert!(linalg::max_abs(&diff) < 1e-12);
        assert!(psi0.iter().all(|x| x.im.abs() < 1e-14));
    }

    #[test]
    fn scalar_cumulant_closed_form() {
        // a=-1, lambda=1, c=2: K(u) = u(u-1)/(2-u)
        let eval = scalar_eval(-1.0, 1.0, 2.0);
        for u in [0.25, 0.5, 1.0, 1.5] {
            let k = eval.k_real(u).unwrap()[(0, 0)];
            assert_relative_eq!(k, u * (u - 1.0) / (2.0 - u), epsilon = 1e-13);
        }
        // at u = 1 the cumulant vanishes
        assert!(eval.k_real(1.0).unwrap()[(0, 0)].abs() < 1e-14);
    }

    #[test]
    fn scalar_k_value() {
        // a=-1, lambda=3, c=2: K(1) = 1*2/(2-1) = 2
        let eval = scalar_eval(-1.0, 3.0, 2.0);
        assert_relative_eq!(eval.k_real(1.0).unwrap()[(0, 0)], 2.0, epsilon = 1e-13);
    }

    #[test]
    fn conjugate_symmetry_on_real_axis() {
        let eval = scalar_eval(-1.0, 3.0, 2.0);
        for al in [0.3, 1.7, 5.0] {
            let p = eval.psi(Complex64::new(al, 0.0)).unwrap()[(0, 0)];
            let pm = eval.psi(Complex64::new(-al, 0.0)).unwrap()[(0, 0)];
            assert_relative_eq!(p.re, pm.re, epsilon = 1e-13);
            assert_relative_eq!(p.im, -pm.im, epsilon = 1e-13);
        }
    }

    #[test]
    fn phi_at_zero_is_resolvent_and_scalar_benchmark_point() {
        let mut spec = ModelSpec::two_state([1.0, 1.0], [-1.0, -0.5], [1.0, 2.0], [2.0, 3.0]);
        spec.nu = vec![2.0, 3.0];
        spec.embedded = vec![vec![0.5, 0.5], vec![0.25, 0.75]];
        let model = Model::new(spec).unwrap();
        let eval = CumulantEvaluator::new(&model).unwrap();
        let phi0 = eval.phi(1.0, Complex64::new(0.0, 0.0)).unwrap();
        let ps = model.resolvent_ps(1.0).unwrap();
        assert!(linalg::max_abs(&(linalg::real_part(&phi0) - ps)) < 1e-12);

        // scalar benchmark: Psi(-i) = 0 so Phi = 1 at u = 1
        let eval = scalar_eval(-1.0, 1.0, 2.0);
        let phi = eval.phi(1.0, Complex64::new(0.0, -1.0)).unwrap()[(0, 0)];
        assert_relative_eq!(phi.re, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn phi_tends_to_identity_for_large_s() {
        let eval = scalar_eval(-1.0, 1.0, 2.0);
        let alpha = Complex64::new(1.0, 0.0);
        let phi = eval.phi(1e3, alpha).unwrap();
        let psi_norm = linalg::max_abs(&eval.psi(alpha).unwrap());
        let dev = linalg::max_abs(&(phi - DMatrix::identity(1, 1).map(|x: f64| Complex64::new(x, 0.0))));
        assert!(dev < 1e-2 * psi_norm);
    }

    #[test]
    fn row_sums_match_jump_transform_terms() {
        // Row sums of Ψ(α) reduce to ψ_k(α) + ν_k(Σ_r p_kr χ̂_kr(α) - 1);
        // assemble that independently and compare.
        let mut spec = ModelSpec::two_state([1.5, 0.8], [-1.0, -0.5], [1.0, 2.0], [2.0, 3.0]);
        spec.pos_weight = vec![0.5, 1.0];
        spec.neg_jump[0] = NegativeMixture {
            components: vec![crate::model::MixtureComponent {
                w: 1.0,
                kind: crate::model::ComponentKind::Erlang { rate: 1.5, shape: 1 },
            }],
        };
        let model = Model::new(spec.clone()).unwrap();
        let eval = CumulantEvaluator::new(&model).unwrap();
        for al in [0.0, 0.9, 2.3] {
            let alpha = Complex64::new(al, 0.0);
            let psi = eval.psi(alpha).unwrap();
            let z = Complex64::new(0.0, 1.0) * alpha;
            for k in 0..2 {
                let row: Complex64 = psi.row(k).iter().copied().sum();
                let jump = spec.pos_weight[k] * Complex64::new(spec.c[k], 0.0)
                    / (Complex64::new(spec.c[k], 0.0) - z)
                    + (1.0 - spec.pos_weight[k]) * spec.neg_jump[k].mgf(z);
                let expected = z * spec.a[k] + spec.lambda[k] * (jump - 1.0);
                assert!((row - expected).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn k0_tail_values() {
        let eval = scalar_eval(-1.0, 3.0, 2.0);
        assert_relative_eq!(eval.k0_tail(1.0)[(0, 0)], 3.0 * (-2.0f64).exp(), epsilon = 1e-13);
        assert_relative_eq!(eval.k0_tail(1e-12)[(0, 0)], 3.0, epsilon = 1e-9);
        let spec = ModelSpec::scalar(-1.0, 3.0, 2.0, 0.0, NegativeMixture::atom(-1.0));
        let eval = CumulantEvaluator::from_spec(&spec).unwrap();
        assert_eq!(eval.k0_tail(0.7)[(0, 0)], 0.0);
    }

    #[test]
    fn k_derivative_at_zero_matches_m1_matrix() {
        let mut spec = ModelSpec::two_state([1.0, 2.0], [-1.0, -0.5], [1.0, 2.0], [2.0, 3.0]);
        spec.pos_weight = vec![0.8, 1.0];
        spec.neg_jump[0] = NegativeMixture {
            components: vec![crate::model::MixtureComponent {
                w: 1.0,
                kind: crate::model::ComponentKind::Erlang { rate: 2.5, shape: 3 },
            }],
        };
        let model = Model::new(spec).unwrap();
        let eval = CumulantEvaluator::new(&model).unwrap();
        let stats = model.drift_stats().unwrap();
        let h = 1e-5;
        let diff = (eval.k_real(h).unwrap() - eval.k_real(-h).unwrap()) / (2.0 * h);
        let err = linalg::max_abs(&(&diff - &stats.m1_matrix));
        assert!(err < 1e-6 * (1.0 + linalg::max_abs(&stats.m1_matrix)));
    }

    #[test]
    fn resolvent_limit_of_scaled_inverse_cumulant() {
        // r K^{-1}(r) -> P0 / m1 as r -> 0 when m1 != 0.
        let model =
            Model::new(ModelSpec::scalar(-1.0, 3.0, 2.0, 1.0, NegativeMixture::default())).unwrap();
        let eval = CumulantEvaluator::new(&model).unwrap();
        let stats = model.drift_stats().unwrap();
        let r = 1e-4;
        let k = eval.k_real(r).unwrap();
        let scaled = linalg::guarded_inverse(&k, "test").unwrap() * r;
        let target = &stats.p0 / stats.m1;
        assert!(linalg::max_abs(&(&scaled - &target)) < 1e-3);
    }

    #[test]
    fn semigroup_consistency_by_quadrature() {
        // s ∫ e^{-st} e^{tΨ(α)} dt == Φ(s,α), trapezoid over a long window.
        let mut spec = ModelSpec::two_state([1.0, 1.0], [-1.0, -0.5], [1.0, 2.0], [2.0, 3.0]);
        spec.pos_weight = vec![1.0, 0.5];
        spec.neg_jump[1] = NegativeMixture {
            components: vec![crate::model::MixtureComponent {
                w: 1.0,
                kind: crate::model::ComponentKind::Erlang { rate: 2.0, shape: 1 },
            }],
        };
        let eval = CumulantEvaluator::from_spec(&spec).unwrap();
        let s = 1.3;
        let alpha = Complex64::new(0.7, 0.0);
        let psi = eval.psi(alpha).unwrap();
        let h = 0.002;
        let t_max = 30.0 / s;
        let steps = (t_max / h) as usize;
        let e_step = linalg::expm(&psi.map(|x| x * h));
        let mut acc = DMatrix::<Complex64>::zeros(2, 2);
        let mut cur = DMatrix::<Complex64>::identity(2, 2);
        for j in 0..=steps {
            let w = if j == 0 || j == steps { 0.5 } else { 1.0 };
            let t = j as f64 * h;
            acc += cur.map(|x| x * Complex64::new(w * (-s * t).exp(), 0.0));
            cur = &cur * &e_step;
        }
        let quad = acc.map(|x| x * Complex64::new(s * h, 0.0));
        let phi = eval.phi(s, alpha).unwrap();
        assert!(linalg::max_abs(&(quad - phi)) < 1e-6);
    }

    #[test]
    fn mirrored_spec_evaluates_reflected_cumulant() {
        let spec = ModelSpec::two_state([1.0, 1.0], [-1.0, -0.5], [1.0, 2.0], [2.0, 3.0]);
        let eval = CumulantEvaluator::from_spec(&spec).unwrap();
        let mirrored = CumulantEvaluator::from_spec(&crate::model::mirror_model(&spec)).unwrap();
        let alpha = Complex64::new(0.8, 0.1);
        let a = eval.psi(-alpha).unwrap();
        let b = mirrored.psi(alpha).unwrap();
        assert!(linalg::max_abs(&(a - b)) < 1e-13);
    }
}
