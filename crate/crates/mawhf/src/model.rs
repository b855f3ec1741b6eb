//! Model definition, validation, and static chain quantities.
//!
//! A model is a finite ergodic Markov chain `x(t)` (sojourn rates `nu`,
//! embedded transitions `embedded`) together with per-state additive dynamics
//! for `ξ(t)`: a drift `a[k] <= 0`, Poisson jumps at rate `lambda[k]` that are
//! exponential upward with probability `pos_weight[k]` (rate `c[k]`) and drawn
//! from a `NegativeMixture` otherwise, plus optional non-positive switch jumps
//! fired when the chain moves from state `k` to state `r`.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
const MASS_TOL: f64 = 1e-12;

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

/// One component of a [`NegativeMixture`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub w: f64,
    #[serde(flatten)]
    pub kind: ComponentKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ComponentKind {
    /// Point mass at `x <= 0`.
    Atom { x: f64 },
    /// Erlang(rate, shape) reflected onto the negative half-line.
    Erlang { rate: f64, shape: u32 },
}

/// A probability law supported on `(-inf, 0]`, given as a mixture of atoms and
/// reflected Erlang components. Dense in the negative laws while keeping the
/// characteristic function in closed form.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NegativeMixture {
    pub components: Vec<MixtureComponent>,
}

impl NegativeMixture {
    pub fn atom(x: f64) -> Self {
        NegativeMixture {
            components: vec![MixtureComponent { w: 1.0, kind: ComponentKind::Atom { x } }],
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.components.iter().map(|c| c.w).sum()
    }

    pub fn mean(&self) -> f64 {
        self.components
            .iter()
            .map(|c| {
                c.w * match c.kind {
                    ComponentKind::Atom { x } => x,
                    ComponentKind::Erlang { rate, shape } => -(shape as f64) / rate,
                }
            })
            .sum()
    }

    /// `E exp(z X)` for `Re z > -min rate`; `z = iα` gives the characteristic
    /// function.
    pub fn mgf(&self, z: Complex64) -> Complex64 {
        self.components
            .iter()
            .map(|c| {
                Complex64::new(c.w, 0.0)
                    * match c.kind {
                        ComponentKind::Atom { x } => (z * x).exp(),
                        ComponentKind::Erlang { rate, shape } => {
                            (Complex64::new(rate, 0.0) / (rate + z)).powu(shape)
                        }
                    }
            })
            .sum()
    }

    /// Smallest Erlang rate, or `+inf` when the mixture is purely atomic.
    pub fn min_rate(&self) -> f64 {
        self.components
            .iter()
            .filter_map(|c| match c.kind {
                ComponentKind::Erlang { rate, .. } => Some(rate),
                ComponentKind::Atom { .. } => None,
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Mass placed exactly at zero.
    pub fn mass_at_zero(&self) -> f64 {
        self.components
            .iter()
            .filter_map(|c| match c.kind {
                ComponentKind::Atom { x } if x == 0.0 => Some(c.w),
                _ => None,
            })
            .sum()
    }
}

/// Law of the jump fired when the chain switches from one state to another:
/// an atom at zero plus a negative mixture carrying the rest of the mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchJumpLaw {
    pub from: usize,
    pub to: usize,
    pub atom0: f64,
    #[serde(default)]
    pub neg: Option<NegativeMixture>,
}

/// Orientation of the stored process. `mirror_model` flips it; downstream
/// solvers dispatch on it so that a mirrored spec reproduces the dual
/// factorization under `x -> -x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// Upward motion only by exponential jumps (the native class).
    #[default]
    UpperSemiContinuous,
    /// Mirror image: stored jump fields describe the pre-image; `a` is the
    /// mirrored drift itself.
    LowerSemiContinuous,
}

/// Full parameterization of the two-dimensional process; the single source of
/// truth. Serializes to the versioned JSON document accepted by the CLI.
///
/// State indices in `switch_jump` entries are 1-based in the JSON file and in
/// this struct, matching the state space `{1..m}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default = "default_schema")]
    pub mawhf_schema: u32,
    pub m: usize,
    pub nu: Vec<f64>,
    pub embedded: Vec<Vec<f64>>,
    pub a: Vec<f64>,
    #[serde(default)]
    pub b2: Option<Vec<f64>>,
    pub lambda: Vec<f64>,
    pub c: Vec<f64>,
    pub pos_weight: Vec<f64>,
    pub neg_jump: Vec<NegativeMixture>,
    #[serde(default)]
    pub switch_jump: Vec<SwitchJumpLaw>,
    #[serde(default)]
    pub zero_drift: bool,
    #[serde(default)]
    pub orientation: Orientation,
}

impl ModelSpec {
    /// Two-state scaffold used widely in tests; symmetric chain, no switch
    /// jumps, purely positive exponential jumps.
    pub fn two_state(nu: [f64; 2], a: [f64; 2], lambda: [f64; 2], c: [f64; 2]) -> Self {
        ModelSpec {
            mawhf_schema: SCHEMA_VERSION,
            m: 2,
            nu: nu.to_vec(),
            embedded: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            a: a.to_vec(),
            b2: None,
            lambda: lambda.to_vec(),
            c: c.to_vec(),
            pos_weight: vec![1.0, 1.0],
            neg_jump: vec![NegativeMixture::default(), NegativeMixture::default()],
            switch_jump: vec![],
            zero_drift: false,
            orientation: Orientation::UpperSemiContinuous,
        }
    }

    /// Single-state process: drift `a`, jumps at rate `lambda`, upward
    /// exponential with rate `c` with probability `pos_weight`, otherwise the
    /// given negative mixture.
    pub fn scalar(a: f64, lambda: f64, c: f64, pos_weight: f64, neg: NegativeMixture) -> Self {
        ModelSpec {
            mawhf_schema: SCHEMA_VERSION,
            m: 1,
            nu: vec![1.0],
            embedded: vec![vec![1.0]],
            a: vec![a],
            b2: None,
            lambda: vec![lambda],
            c: vec![c],
            pos_weight: vec![pos_weight],
            neg_jump: vec![neg],
            switch_jump: vec![],
            zero_drift: a == 0.0,
            orientation: Orientation::UpperSemiContinuous,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, field: &str, message: impl Into<String>) {
        self.violations.push(Violation { field: field.to_string(), message: message.into() });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "ok");
        }
        for v in &self.violations {
            writeln!(f, "  {}: {}", v.field, v.message)?;
        }
        Ok(())
    }
}

/// Checks every structural invariant of a spec. Violations are data, not
/// failures: the report lists each offending field with the broken rule.
pub fn validate_model(spec: &ModelSpec) -> ValidationReport {
    let mut rep = ValidationReport::default();
    let m = spec.m;
    if spec.mawhf_schema != SCHEMA_VERSION {
        rep.push("mawhf_schema", format!("unsupported schema version {}", spec.mawhf_schema));
    }
    if m < 1 {
        rep.push("m", "need at least one chain state");
        return rep;
    }
    for (name, len) in [
        ("nu", spec.nu.len()),
        ("a", spec.a.len()),
        ("lambda", spec.lambda.len()),
        ("c", spec.c.len()),
        ("pos_weight", spec.pos_weight.len()),
        ("neg_jump", spec.neg_jump.len()),
        ("embedded", spec.embedded.len()),
    ] {
        if len != m {
            rep.push(name, format!("expected {} entries, found {}", m, len));
        }
    }
    if let Some(b2) = &spec.b2 {
        if b2.len() != m {
            rep.push("b2", format!("expected {} entries, found {}", m, b2.len()));
        } else if b2.iter().any(|&b| b != 0.0) {
            rep.push("b2", "Brownian variances must be identically zero");
        }
    }
    if !rep.is_ok() {
        return rep;
    }

    for (k, &nu) in spec.nu.iter().enumerate() {
        if !(nu > 0.0) || !nu.is_finite() {
            rep.push("nu", format!("state {}: sojourn rate must be positive", k + 1));
        }
    }
    for (k, row) in spec.embedded.iter().enumerate() {
        if row.len() != m {
            rep.push("embedded", format!("row {} has {} entries, expected {}", k + 1, row.len(), m));
            continue;
        }
        if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            rep.push("embedded", format!("row {}: entries must be nonnegative", k + 1));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > MASS_TOL {
            rep.push("embedded", format!("row stochasticity violated in row {} (sum = {})", k + 1, sum));
        }
    }
    // Drift signs depend on orientation; LSC stores the mirrored drift itself.
    let usc_drift = |ak: f64| match spec.orientation {
        Orientation::UpperSemiContinuous => ak,
        Orientation::LowerSemiContinuous => -ak,
    };
    let mut all_degenerate = true;
    for (k, &ak) in spec.a.iter().enumerate() {
        let d = usc_drift(ak);
        if spec.zero_drift {
            if d > 0.0 || !d.is_finite() {
                rep.push("a", format!("state {}: drift must be non-positive in zero_drift mode", k + 1));
            }
        } else if !(d < 0.0) || !d.is_finite() {
            rep.push("a", format!("state {}: drift must be negative", k + 1));
        }
        if d != 0.0 {
            all_degenerate = false;
        }
    }
    for (k, &lam) in spec.lambda.iter().enumerate() {
        if lam < 0.0 || !lam.is_finite() {
            rep.push("lambda", format!("state {}: jump intensity must be nonnegative", k + 1));
        }
        if lam > 0.0 {
            all_degenerate = false;
        }
    }
    if spec.zero_drift && all_degenerate {
        rep.push("a", "all dynamics degenerate: zero drift with no jump activity anywhere");
    }
    for (k, &c) in spec.c.iter().enumerate() {
        if !(c > 0.0) || !c.is_finite() {
            rep.push("c", format!("state {}: upward jump rate must be positive", k + 1));
        }
    }
    for (k, &w) in spec.pos_weight.iter().enumerate() {
        if !(0.0..=1.0).contains(&w) {
            rep.push("pos_weight", format!("state {}: probability must lie in [0,1]", k + 1));
        }
    }
    for (k, mix) in spec.neg_jump.iter().enumerate() {
        let needs_mass = spec.lambda[k] > 0.0 && spec.pos_weight[k] < 1.0;
        validate_mixture(&mut rep, &format!("neg_jump[{}]", k + 1), mix, needs_mass);
    }
    let mut seen = std::collections::BTreeSet::new();
    for law in &spec.switch_jump {
        let field = format!("switch_jump[{}->{}]", law.from, law.to);
        if law.from < 1 || law.from > m || law.to < 1 || law.to > m {
            rep.push(&field, "state indices must lie in 1..=m");
            continue;
        }
        if !seen.insert((law.from, law.to)) {
            rep.push(&field, "duplicate switch-jump law for this transition");
        }
        if !(0.0..=1.0).contains(&law.atom0) {
            rep.push(&field, "atom0 must lie in [0,1]");
        }
        let residual = 1.0 - law.atom0;
        match &law.neg {
            Some(mix) => {
                validate_mixture(&mut rep, &field, mix, residual > MASS_TOL);
            }
            None => {
                if residual > MASS_TOL {
                    rep.push(&field, format!("mass 1 - atom0 = {} has no negative mixture", residual));
                }
            }
        }
    }

    // Irreducibility of the chain: strong connectivity of positive entries of Q.
    let q = generator_unchecked(spec);
    if !linalg::strongly_connected(&q, 0.0) {
        rep.push("embedded", "chain is reducible: positive entries of the generator are not strongly connected");
    }
    rep
}

fn validate_mixture(rep: &mut ValidationReport, field: &str, mix: &NegativeMixture, needs_mass: bool) {
    if !needs_mass && mix.components.is_empty() {
        return;
    }
    if needs_mass && mix.components.is_empty() {
        rep.push(field, "mixture carries probability mass but has no components");
        return;
    }
    for (i, comp) in mix.components.iter().enumerate() {
        if !(comp.w > 0.0) || !comp.w.is_finite() {
            rep.push(field, format!("component {}: weight must be positive", i));
        }
        match comp.kind {
            ComponentKind::Atom { x } => {
                if x > 0.0 || !x.is_finite() {
                    rep.push(field, format!("component {}: atom must sit at x <= 0", i));
                }
            }
            ComponentKind::Erlang { rate, shape } => {
                if !(rate > 0.0) || !rate.is_finite() {
                    rep.push(field, format!("component {}: Erlang rate must be positive", i));
                }
                if shape < 1 {
                    rep.push(field, format!("component {}: Erlang shape must be >= 1", i));
                }
            }
        }
    }
    let mass = mix.total_mass();
    if (mass - 1.0).abs() > MASS_TOL {
        rep.push(field, format!("mixture mass must be 1 (found {})", mass));
    }
}

fn generator_unchecked(spec: &ModelSpec) -> DMatrix<f64> {
    let m = spec.m;
    DMatrix::from_fn(m, m, |k, r| {
        let p = spec.embedded[k][r];
        spec.nu[k] * (p - if k == r { 1.0 } else { 0.0 })
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriftClass {
    AllNegative,
    AllZero,
    Mixed,
}

/// A validated model with derived static quantities cached. All downstream
/// operations take `&Model`; values are immutable and safe to share across
/// threads.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    embedded: DMatrix<f64>,
    generator: DMatrix<f64>,
    switch: BTreeMap<(usize, usize), SwitchJumpLaw>,
    /// `P{χ_kr = 0, next = r | cur = k}`: embedded mass times the switch atom at 0.
    f0: DMatrix<f64>,
    active: Vec<bool>,
    mu_min: f64,
    drift_class: DriftClass,
    has_negative_mass: bool,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let report = validate_model(&spec);
        if !report.is_ok() {
            return Err(Error::Validation(report));
        }
        let m = spec.m;
        let embedded = DMatrix::from_fn(m, m, |k, r| spec.embedded[k][r]);
        let generator = generator_unchecked(&spec);
        let mut switch = BTreeMap::new();
        for law in &spec.switch_jump {
            switch.insert((law.from - 1, law.to - 1), law.clone());
        }
        let f0 = DMatrix::from_fn(m, m, |k, r| {
            let atom0 = switch
                .get(&(k, r))
                .map(|law| {
                    law.atom0
                        + law.neg.as_ref().map(|mx| (1.0 - law.atom0) * mx.mass_at_zero()).unwrap_or(0.0)
                })
                .unwrap_or(1.0);
            embedded[(k, r)] * atom0
        });
        let active: Vec<bool> =
            (0..m).map(|k| spec.lambda[k] * spec.pos_weight[k] > 0.0).collect();
        let mut mu_min = f64::INFINITY;
        for (k, mix) in spec.neg_jump.iter().enumerate() {
            if spec.lambda[k] * (1.0 - spec.pos_weight[k]) > 0.0 {
                mu_min = mu_min.min(mix.min_rate());
            }
        }
        for law in switch.values() {
            if let Some(mix) = &law.neg {
                if (1.0 - law.atom0) > 0.0 && embedded[(law.from - 1, law.to - 1)] > 0.0 {
                    mu_min = mu_min.min(mix.min_rate());
                }
            }
        }
        let usc_a: Vec<f64> = match spec.orientation {
            Orientation::UpperSemiContinuous => spec.a.clone(),
            Orientation::LowerSemiContinuous => spec.a.iter().map(|x| -x).collect(),
        };
        let drift_class = if usc_a.iter().all(|&a| a < 0.0) {
            DriftClass::AllNegative
        } else if usc_a.iter().all(|&a| a == 0.0) {
            DriftClass::AllZero
        } else {
            DriftClass::Mixed
        };
        let mut has_negative_mass = false;
        for k in 0..m {
            if spec.lambda[k] * (1.0 - spec.pos_weight[k]) > 0.0
                && spec.neg_jump[k].mass_at_zero() < 1.0 - MASS_TOL
            {
                has_negative_mass = true;
            }
        }
        for law in switch.values() {
            if embedded[(law.from - 1, law.to - 1)] > 0.0 && law.atom0 < 1.0 - MASS_TOL {
                if let Some(mix) = &law.neg {
                    if mix.mass_at_zero() < 1.0 - MASS_TOL {
                        has_negative_mass = true;
                    }
                }
            }
        }
        Ok(Model {
            spec,
            embedded,
            generator,
            switch,
            f0,
            active,
            mu_min,
            drift_class,
            has_negative_mass,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn m(&self) -> usize {
        self.spec.m
    }

    pub fn orientation(&self) -> Orientation {
        self.spec.orientation
    }

    /// Chain generator `Q = N (P - I)`; rows sum to zero.
    pub fn generator(&self) -> &DMatrix<f64> {
        &self.generator
    }

    pub fn embedded(&self) -> &DMatrix<f64> {
        &self.embedded
    }

    pub fn switch_law(&self, k: usize, r: usize) -> Option<&SwitchJumpLaw> {
        self.switch.get(&(k, r))
    }

    /// Drift vector of the process in its native orientation.
    pub fn drift(&self) -> &[f64] {
        &self.spec.a
    }

    /// Drift vector of the upper-semi-continuous pre-image.
    pub fn usc_drift(&self, k: usize) -> f64 {
        match self.spec.orientation {
            Orientation::UpperSemiContinuous => self.spec.a[k],
            Orientation::LowerSemiContinuous => -self.spec.a[k],
        }
    }

    /// States whose upward-exponential channel carries positive rate mass.
    pub fn active(&self) -> &[bool] {
        &self.active
    }

    /// Smallest Erlang rate among all negative mixtures in play (`+inf` when
    /// every downward jump is atomic or absent).
    pub fn mu_min(&self) -> f64 {
        self.mu_min
    }

    pub fn c_min_active(&self) -> f64 {
        (0..self.m())
            .filter(|&k| self.active[k])
            .map(|k| self.spec.c[k])
            .fold(f64::INFINITY, f64::min)
    }

    pub fn drift_class(&self) -> DriftClass {
        self.drift_class
    }

    /// True when some genuinely negative jump mass exists (state or switch jumps).
    pub fn has_negative_mass(&self) -> bool {
        self.has_negative_mass
    }

    /// `P{χ_kr = 0, next = r | cur = k}` as a matrix (includes transitions
    /// without an explicit law, whose jump is identically zero).
    pub fn f0(&self) -> &DMatrix<f64> {
        &self.f0
    }

    /// Resolvent of the chain alone: `P_s = s (sI - Q)^{-1}`.
    pub fn resolvent_ps(&self, s: f64) -> Result<DMatrix<f64>> {
        assert!(s > 0.0, "resolvent requires s > 0");
        let m = self.m();
        let a = DMatrix::identity(m, m) * s - &self.generator;
        Ok(linalg::guarded_inverse(&a, "chain resolvent")? * s)
    }

    /// Stationary distribution and the first-moment quantities derived from it.
    pub fn drift_stats(&self) -> Result<DriftStats> {
        let m = self.m();
        // Solve pi Q = 0 with the normalization sum(pi) = 1 replacing the last
        // (redundant) equation.
        let mut b = self.generator.transpose();
        for j in 0..m {
            b[(m - 1, j)] = 1.0;
        }
        let mut rhs = DVector::zeros(m);
        rhs[m - 1] = 1.0;
        let pi = b
            .lu()
            .solve(&rhs)
            .ok_or(Error::IllConditioned { context: "stationary distribution", cond: f64::INFINITY })?;

        let spec = &self.spec;
        let sign = match spec.orientation {
            Orientation::UpperSemiContinuous => 1.0,
            Orientation::LowerSemiContinuous => -1.0,
        };
        let state_jump_mean = |k: usize| -> f64 {
            spec.lambda[k]
                * (spec.pos_weight[k] / spec.c[k]
                    + (1.0 - spec.pos_weight[k]) * spec.neg_jump[k].mean())
        };
        let switch_mean = |k: usize, r: usize| -> f64 {
            self.switch
                .get(&(k, r))
                .map(|law| {
                    (1.0 - law.atom0) * law.neg.as_ref().map(|mx| mx.mean()).unwrap_or(0.0)
                })
                .unwrap_or(0.0)
        };
        // Per-transition means and M1 = A + ∫ x dK0(x) coincide entrywise for
        // this jump structure.
        let per_transition = DMatrix::from_fn(m, m, |k, r| {
            let diag = if k == r { self.usc_drift(k) + state_jump_mean(k) } else { 0.0 };
            sign * (diag + spec.nu[k] * self.embedded[(k, r)] * switch_mean(k, r))
        });
        let m1_matrix = per_transition.clone();
        let m1 = (0..m).map(|k| pi[k] * per_transition.row(k).sum()).sum();
        let p0 = DMatrix::from_fn(m, m, |_, r| pi[r]);
        Ok(DriftStats { pi, per_transition, m1, m1_matrix, p0 })
    }
}

/// Stationary vector and first-moment matrices of the additive part.
#[derive(Debug, Clone)]
pub struct DriftStats {
    /// Stationary row vector of the chain.
    pub pi: DVector<f64>,
    /// Per-transition mean displacement matrix.
    pub per_transition: DMatrix<f64>,
    /// Mean drift `m1 = sum_k pi_k sum_r m_kr`.
    pub m1: f64,
    /// `M1 = A + ∫ x dK0(x)`.
    pub m1_matrix: DMatrix<f64>,
    /// Limit of the resolvent: every row equals `pi`.
    pub p0: DMatrix<f64>,
}

/// The mirror image `-ξ(t)`: spatially negated process, flagged with the
/// opposite orientation. Involution: `mirror_model(mirror_model(s)) == s`.
pub fn mirror_model(spec: &ModelSpec) -> ModelSpec {
    let mut out = spec.clone();
    out.a = spec.a.iter().map(|x| -x).collect();
    out.orientation = match spec.orientation {
        Orientation::UpperSemiContinuous => Orientation::LowerSemiContinuous,
        Orientation::LowerSemiContinuous => Orientation::UpperSemiContinuous,
    };
    out
}

/// The upper-semi-continuous pre-image of a mirrored spec (identity on USC specs).
pub fn usc_preimage(spec: &ModelSpec) -> ModelSpec {
    match spec.orientation {
        Orientation::UpperSemiContinuous => spec.clone(),
        Orientation::LowerSemiContinuous => mirror_model(spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) fn symmetric_two_state() -> ModelSpec {
        ModelSpec::two_state([1.0, 1.0], [-1.0, -1.0], [1.0, 1.0], [2.0, 2.0])
    }

    #[test]
    fn valid_two_state_passes() {
        assert!(validate_model(&symmetric_two_state()).is_ok());
    }

    #[test]
    fn positive_drift_is_rejected() {
        let mut spec = symmetric_two_state();
        spec.a[0] = 0.5;
        let rep = validate_model(&spec);
        assert!(!rep.is_ok());
        assert!(rep.violations.iter().any(|v| v.field == "a" && v.message.contains("negative")));
    }

    #[test]
    fn non_stochastic_row_is_rejected_naming_embedded() {
        let mut spec = symmetric_two_state();
        spec.embedded[0] = vec![0.0, 0.9];
        let rep = validate_model(&spec);
        assert!(rep.violations.iter().any(|v| v.field == "embedded" && v.message.contains("stochasticity")));
    }

    #[test]
    fn reducible_chain_is_rejected() {
        let mut spec = symmetric_two_state();
        spec.embedded = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let rep = validate_model(&spec);
        assert!(rep.violations.iter().any(|v| v.message.contains("reducible")));
    }

    #[test]
    fn generator_matches_direct_substitution() {
        let model = Model::new(symmetric_two_state()).unwrap();
        let q = model.generator();
        let expected = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]);
        assert!(linalg::max_abs(&(q - expected)) < 1e-15);
        for k in 0..2 {
            assert!(q.row(k).sum().abs() < 1e-12);
        }
    }

    #[test]
    fn generator_single_state_is_zero() {
        let model = Model::new(ModelSpec::scalar(-1.0, 1.0, 2.0, 1.0, NegativeMixture::default()))
            .unwrap();
        assert_eq!(model.generator()[(0, 0)], 0.0);
    }

    #[test]
    fn generator_weighted_rates() {
        let mut spec = symmetric_two_state();
        spec.nu = vec![2.0, 3.0];
        spec.embedded = vec![vec![0.5, 0.5], vec![0.25, 0.75]];
        let model = Model::new(spec).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.75, -0.75]);
        assert!(linalg::max_abs(&(model.generator() - expected)) < 1e-14);
    }

    #[test]
    fn resolvent_two_state_hand_inverse() {
        let model = Model::new(symmetric_two_state()).unwrap();
        let ps = model.resolvent_ps(1.0).unwrap();
        // (I - Q)^{-1} for Q = [[-1,1],[1,-1]] is (1/3)[[2,1],[1,2]]
        let expected = DMatrix::from_row_slice(2, 2, &[2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0]);
        assert!(linalg::max_abs(&(&ps - expected)) < 1e-12);
    }

    #[test]
    fn resolvent_rows_sum_to_one_and_tend_to_identity() {
        let mut spec = symmetric_two_state();
        spec.nu = vec![2.0, 3.0];
        spec.embedded = vec![vec![0.5, 0.5], vec![0.25, 0.75]];
        let model = Model::new(spec).unwrap();
        for s in [0.1, 1.0, 10.0] {
            let ps = model.resolvent_ps(s).unwrap();
            for k in 0..2 {
                assert_relative_eq!(ps.row(k).sum(), 1.0, epsilon = 1e-12);
            }
            assert!(ps.iter().all(|&x| x >= -1e-14));
        }
        let ps = model.resolvent_ps(1e6).unwrap();
        assert!(linalg::max_abs(&(&ps - DMatrix::identity(2, 2))) < 1e-5);
    }

    #[test]
    fn resolvent_small_s_approaches_stationary_rows() {
        let mut spec = symmetric_two_state();
        spec.nu = vec![2.0, 3.0];
        spec.embedded = vec![vec![0.5, 0.5], vec![0.25, 0.75]];
        let model = Model::new(spec).unwrap();
        let stats = model.drift_stats().unwrap();
        let ps = model.resolvent_ps(1e-6).unwrap();
        assert!(linalg::max_abs(&(&ps - &stats.p0)) < 1e-4);
    }

    #[test]
    fn stationary_asymmetric_chain() {
        let mut spec = symmetric_two_state();
        spec.nu = vec![1.0, 0.75];
        spec.embedded = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        // Q = [[-1, 1], [0.75, -0.75]] -> pi = (3/7, 4/7)
        let model = Model::new(spec).unwrap();
        let stats = model.drift_stats().unwrap();
        assert_relative_eq!(stats.pi[0], 3.0 / 7.0, epsilon = 1e-12);
        assert_relative_eq!(stats.pi[1], 4.0 / 7.0, epsilon = 1e-12);
        // pi Q = 0
        let residual = stats.pi.transpose() * model.generator();
        assert!(residual.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn scalar_mean_drift() {
        let model = Model::new(ModelSpec::scalar(-1.0, 3.0, 2.0, 1.0, NegativeMixture::default()))
            .unwrap();
        let stats = model.drift_stats().unwrap();
        assert_relative_eq!(stats.m1, 0.5, epsilon = 1e-12);
        // m1 equals pi-weighted row sums of the per-transition means
        let recomputed: f64 =
            (0..1).map(|k| stats.pi[k] * stats.per_transition.row(k).sum()).sum();
        assert_relative_eq!(stats.m1, recomputed, epsilon = 1e-10);
    }

    #[test]
    fn mirror_is_involution_and_flips_m1() {
        let mut spec = symmetric_two_state();
        spec.lambda = vec![1.0, 2.0];
        spec.c = vec![2.0, 3.0];
        spec.a = vec![-1.0, -0.5];
        let mirrored = mirror_model(&spec);
        assert_eq!(mirror_model(&mirrored), spec);
        assert_eq!(mirrored.orientation, Orientation::LowerSemiContinuous);
        let m1 = Model::new(spec).unwrap().drift_stats().unwrap().m1;
        let m1m = Model::new(mirrored).unwrap().drift_stats().unwrap().m1;
        assert_relative_eq!(m1m, -m1, epsilon = 1e-12);
    }

    #[test]
    fn spec_round_trips_through_json() {
        let mut spec = symmetric_two_state();
        spec.pos_weight = vec![0.7, 1.0];
        spec.neg_jump[0] = NegativeMixture {
            components: vec![
                MixtureComponent { w: 0.4, kind: ComponentKind::Atom { x: -0.5 } },
                MixtureComponent { w: 0.6, kind: ComponentKind::Erlang { rate: 2.0, shape: 2 } },
            ],
        };
        spec.switch_jump = vec![SwitchJumpLaw {
            from: 1,
            to: 2,
            atom0: 0.5,
            neg: Some(NegativeMixture::atom(-1.0)),
        }];
        let text = serde_json::to_string(&spec).unwrap();
        let back: ModelSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
        assert!(text.contains("\"mawhf_schema\":1"));
    }

    #[test]
    fn f0_counts_atoms_at_zero() {
        let mut spec = symmetric_two_state();
        spec.switch_jump = vec![SwitchJumpLaw {
            from: 1,
            to: 2,
            atom0: 0.25,
            neg: Some(NegativeMixture::atom(-1.0)),
        }];
        let model = Model::new(spec).unwrap();
        assert_relative_eq!(model.f0()[(0, 1)], 0.25, epsilon = 1e-15);
        assert_relative_eq!(model.f0()[(1, 0)], 1.0, epsilon = 1e-15);
    }
}
