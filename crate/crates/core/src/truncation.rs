//! The `(mu, h)` truncation machinery.
//!
//! A [`TruncationPolicy`] bundles an envelope `mu` (strictly increasing,
//! dominating the coefficient norms on balls), its inverse, and a strictly
//! decreasing bound function `h` on `(0, delta_star]`. A policy must pass
//! [`validate_policy`] before it can be used: the result is an
//! [`AdmissiblePolicy`], and only that type can build a
//! [`TruncationContext`].
//!
//! For a step `delta` the context caches the barrier `mu^{-1}(h(delta))`.
//! States outside the ball of that radius are projected radially onto it
//! before any coefficient is evaluated, so every truncated coefficient is
//! bounded by `h(delta)` as long as `mu` really dominates the coefficients on
//! the ball of radius `barrier` (see [`check_envelope`]).

use std::fmt;
use std::ops::Deref;
use std::sync::Arc;

use rand::Rng;

use crate::model::{finite_or_err, seeded_rng, SdeSystem, StateVector};
use crate::{norm, Error, Result};

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Default number of points on the validation grids.
pub const DEFAULT_GRID_POINTS: usize = 64;

/// The validation step grid spans `[GRID_SPAN * delta_star, delta_star]`.
const GRID_SPAN: f64 = 1e-8;

/// Relative slack on the inequality conditions, absorbing rounding at equality.
const REL_SLACK: f64 = 1e-12;

/// Relative tolerance on `mu(mu_inv(v)) = v`.
const ROUND_TRIP_TOL: f64 = 1e-10;

/// `mu(u) = scale * u^exponent`, `h(delta) = delta^-epsilon`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerFamily {
    pub scale: f64,
    pub exponent: f64,
    pub epsilon: f64,
}

impl PowerFamily {
    /// Whether the rate condition `h(delta) >= mu((delta^p h(delta)^{2p})^{-1/(q-p)})`
    /// holds for all small `delta`, i.e.
    /// `(2 a p / (q - p) + 1) epsilon >= a p / (q - p)` with `a` the exponent.
    pub fn rate_condition_holds(&self, p: f64, q: f64) -> bool {
        if !(q > p && p >= 1.0) {
            return false;
        }
        let k = self.exponent * p / (q - p);
        (2.0 * k + 1.0) * self.epsilon >= k
    }

    /// Smallest `q` for which [`Self::rate_condition_holds`] is true at `p`.
    pub fn min_q(&self, p: f64) -> f64 {
        p + self.exponent * p * (1.0 - 2.0 * self.epsilon).max(0.0) / self.epsilon
    }
}

#[derive(Clone)]
pub struct TruncationPolicy {
    mu: ScalarFn,
    mu_inv: ScalarFn,
    h: ScalarFn,
    delta_star: f64,
    label: String,
    family: Option<PowerFamily>,
}

impl fmt::Debug for TruncationPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TruncationPolicy")
            .field("label", &self.label)
            .field("delta_star", &self.delta_star)
            .field("family", &self.family)
            .finish()
    }
}

impl TruncationPolicy {
    /// A policy from arbitrary evaluables. Nothing is checked until validation.
    pub fn new(label: impl Into<String>, mu: ScalarFn, mu_inv: ScalarFn, h: ScalarFn, delta_star: f64) -> Self {
        TruncationPolicy {
            mu,
            mu_inv,
            h,
            delta_star,
            label: label.into(),
            family: None,
        }
    }

    /// The power family with closed-form inverse `mu^{-1}(v) = (v / scale)^{1/exponent}`.
    pub fn power(scale: f64, exponent: f64, epsilon: f64, delta_star: f64) -> Result<Self> {
        if !(scale > 0.0 && exponent > 0.0 && epsilon > 0.0) {
            return Err(Error::usage("power family needs positive scale, exponent and epsilon"));
        }
        let inv_exp = 1.0 / exponent;
        let label = if scale == 1.0 {
            format!("power: mu=u^{exponent}, h=delta^-{epsilon}")
        } else {
            format!("power: mu={scale}*u^{exponent}, h=delta^-{epsilon}")
        };
        Ok(TruncationPolicy {
            mu: Arc::new(move |u| scale * u.powf(exponent)),
            mu_inv: Arc::new(move |v| (v / scale).powf(inv_exp)),
            h: Arc::new(move |d| d.powf(-epsilon)),
            delta_star,
            label,
            family: Some(PowerFamily {
                scale,
                exponent,
                epsilon,
            }),
        })
    }

    pub fn mu(&self, u: f64) -> f64 {
        (self.mu)(u)
    }

    pub fn mu_inv(&self, v: f64) -> f64 {
        (self.mu_inv)(v)
    }

    pub fn h(&self, delta: f64) -> f64 {
        (self.h)(delta)
    }

    pub fn delta_star(&self) -> f64 {
        self.delta_star
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn family(&self) -> Option<PowerFamily> {
        self.family
    }
}

/// Outcome of one admissibility condition. `worst_value` is the quantity
/// compared against its threshold at `worst_at` (a step or a grid value).
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionResult {
    pub name: &'static str,
    pub passed: bool,
    pub worst_value: f64,
    pub worst_at: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub label: String,
    pub grid_points: usize,
    pub conditions: Vec<ConditionResult>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.conditions.iter().all(|c| c.passed)
    }

    pub fn failed(&self) -> impl Iterator<Item = &ConditionResult> {
        self.conditions.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "policy '{}' ({} grid points):", self.label, self.grid_points)?;
        for c in &self.conditions {
            write!(
                f,
                " [{}] {} (worst {:.6e} at {:.6e});",
                if c.passed { "ok" } else { "FAIL" },
                c.name,
                c.worst_value,
                c.worst_at
            )?;
        }
        Ok(())
    }
}

pub const COND_H_AT_DELTA_STAR: &str = "h(delta*) >= mu(1)";
pub const COND_QUARTER_ROOT: &str = "delta^(1/4) h(delta) <= 1";
pub const COND_ROUND_TRIP: &str = "mu(mu_inv(v)) = v";
pub const COND_MU_INCREASING: &str = "mu strictly increasing";
pub const COND_H_DECREASING: &str = "h strictly decreasing";

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| {
            if i + 1 == n {
                hi
            } else {
                (a + (b - a) * i as f64 / (n - 1) as f64).exp()
            }
        })
        .collect()
}

/// A policy that passed [`validate_policy`].
#[derive(Clone, Debug)]
pub struct AdmissiblePolicy {
    policy: TruncationPolicy,
    report: ValidationReport,
}

impl AdmissiblePolicy {
    pub fn report(&self) -> &ValidationReport {
        &self.report
    }

    pub fn policy(&self) -> &TruncationPolicy {
        &self.policy
    }
}

impl Deref for AdmissiblePolicy {
    type Target = TruncationPolicy;

    fn deref(&self) -> &TruncationPolicy {
        &self.policy
    }
}

/// Checks the policy conditions on logarithmic grids and returns the policy
/// wrapped as admissible, or [`Error::PolicyRejected`] carrying the report.
pub fn validate_policy(policy: TruncationPolicy, grid_points: usize) -> Result<AdmissiblePolicy> {
    if grid_points < 2 {
        return Err(Error::usage("validation needs at least two grid points"));
    }
    let report = validation_report(&policy, grid_points);
    if report.passed() {
        Ok(AdmissiblePolicy { policy, report })
    } else {
        Err(Error::PolicyRejected(Box::new(report)))
    }
}

fn validation_report(policy: &TruncationPolicy, n: usize) -> ValidationReport {
    let ds = policy.delta_star;
    let mut conditions = Vec::with_capacity(5);

    if !(ds > 0.0 && ds <= 1.0) {
        conditions.push(ConditionResult {
            name: "delta* in (0, 1]",
            passed: false,
            worst_value: ds,
            worst_at: ds,
        });
        return ValidationReport {
            label: policy.label.clone(),
            grid_points: n,
            conditions,
        };
    }

    let mu1 = policy.mu(1.0);
    let h_star = policy.h(ds);
    conditions.push(ConditionResult {
        name: COND_H_AT_DELTA_STAR,
        passed: h_star.is_finite() && h_star >= mu1 * (1.0 - REL_SLACK),
        worst_value: h_star - mu1,
        worst_at: ds,
    });

    let deltas = log_grid(GRID_SPAN * ds, ds, n);
    let (mut worst_q, mut worst_q_at) = (f64::NEG_INFINITY, ds);
    for &d in &deltas {
        let v = d.powf(0.25) * policy.h(d);
        if !(v <= worst_q) {
            worst_q = v;
            worst_q_at = d;
        }
    }
    conditions.push(ConditionResult {
        name: COND_QUARTER_ROOT,
        passed: worst_q <= 1.0 + REL_SLACK,
        worst_value: worst_q,
        worst_at: worst_q_at,
    });

    let v_hi = policy.h(deltas[0]).max(10.0 * mu1);
    let (mut worst_rt, mut worst_rt_at) = (0.0_f64, mu1);
    for v in log_grid(mu1, v_hi, n) {
        let rel = ((policy.mu(policy.mu_inv(v)) - v) / v).abs();
        if !(rel <= worst_rt) {
            worst_rt = rel;
            worst_rt_at = v;
        }
    }
    conditions.push(ConditionResult {
        name: COND_ROUND_TRIP,
        passed: worst_rt <= ROUND_TRIP_TOL,
        worst_value: worst_rt,
        worst_at: worst_rt_at,
    });

    let u_hi = policy.mu_inv(v_hi).max(2.0);
    let mut us = vec![0.0];
    us.extend(log_grid(1e-3, u_hi, n));
    let (mut mu_ok, mut mu_at, mut mu_gap) = (true, 0.0, f64::INFINITY);
    for w in us.windows(2) {
        let gap = policy.mu(w[1]) - policy.mu(w[0]);
        if !(gap > 0.0) && mu_ok {
            mu_ok = false;
            mu_at = w[1];
        }
        mu_gap = mu_gap.min(gap);
    }
    conditions.push(ConditionResult {
        name: COND_MU_INCREASING,
        passed: mu_ok,
        worst_value: mu_gap,
        worst_at: mu_at,
    });

    let (mut h_ok, mut h_at, mut h_gap) = (true, ds, f64::INFINITY);
    for w in deltas.windows(2) {
        let gap = policy.h(w[0]) - policy.h(w[1]);
        if !(gap > 0.0) && h_ok {
            h_ok = false;
            h_at = w[1];
        }
        h_gap = h_gap.min(gap);
    }
    conditions.push(ConditionResult {
        name: COND_H_DECREASING,
        passed: h_ok,
        worst_value: h_gap,
        worst_at: h_at,
    });

    ValidationReport {
        label: policy.label.clone(),
        grid_points: n,
        conditions,
    }
}

/// An admissible policy fixed at one step size.
#[derive(Clone, Debug)]
pub struct TruncationContext {
    policy: AdmissiblePolicy,
    step: f64,
    barrier: f64,
    bound: f64,
}

impl TruncationContext {
    pub fn new(policy: &AdmissiblePolicy, step: f64) -> Result<Self> {
        if !(step > 0.0 && step <= policy.delta_star()) {
            return Err(Error::usage(format!(
                "step {step} outside (0, {}]",
                policy.delta_star()
            )));
        }
        let bound = policy.h(step);
        let barrier = policy.mu_inv(bound);
        if !(barrier > 0.0 && barrier.is_finite()) {
            return Err(Error::usage(format!("barrier {barrier} at step {step} is not positive")));
        }
        let back = policy.mu(barrier);
        if !((back - bound).abs() <= ROUND_TRIP_TOL * bound) {
            return Err(Error::usage(format!(
                "mu(barrier) = {back} does not reproduce h(step) = {bound}"
            )));
        }
        Ok(TruncationContext {
            policy: policy.clone(),
            step,
            barrier,
            bound,
        })
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// `mu^{-1}(h(step))`.
    pub fn barrier(&self) -> f64 {
        self.barrier
    }

    /// `h(step)`.
    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn policy(&self) -> &AdmissiblePolicy {
        &self.policy
    }

    /// Writes `(|x| ^ barrier) x / |x|` into `out`; returns whether `x` was
    /// moved. Inside the ball the copy is bitwise, and the projected point
    /// always has computed norm `<= barrier`, so projecting twice is exact.
    #[inline]
    pub fn project_into(&self, x: &[f64], out: &mut [f64]) -> bool {
        let n = norm(x);
        if n <= self.barrier {
            out.copy_from_slice(x);
            return false;
        }
        let s = self.barrier / n;
        for (o, v) in out.iter_mut().zip(x) {
            *o = v * s;
        }
        let mut tries = 0;
        while norm(out) > self.barrier {
            for o in out.iter_mut() {
                *o = if *o > 0.0 { o.next_down() } else if *o < 0.0 { o.next_up() } else { 0.0 };
            }
            tries += 1;
            debug_assert!(tries < 64);
        }
        true
    }
}

/// The radial projection onto the ball of radius `ctx.barrier()`; zero maps to zero.
pub fn truncate_point(ctx: &TruncationContext, x: &[f64]) -> StateVector {
    let mut out = vec![0.0; x.len()];
    ctx.project_into(x, &mut out);
    StateVector(out)
}

fn check_input(system: &SdeSystem, x: &[f64]) -> Result<()> {
    if x.len() != system.state_dim() {
        return Err(Error::usage(format!(
            "state has length {}, expected {}",
            x.len(),
            system.state_dim()
        )));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NumericDomain {
            what: "input state".into(),
            coord: i,
        });
    }
    Ok(())
}

/// `f~(x) = f(truncate_point(x))`.
pub fn truncated_drift(ctx: &TruncationContext, system: &SdeSystem, x: &[f64]) -> Result<StateVector> {
    check_input(system, x)?;
    let z = truncate_point(ctx, x);
    let mut out = vec![0.0; x.len()];
    system.drift_into(&z, &mut out);
    finite_or_err(out, "truncated drift")
}

/// `g~_j(x) = g_j(truncate_point(x))`.
pub fn truncated_diffusion(ctx: &TruncationContext, system: &SdeSystem, x: &[f64], j: usize) -> Result<StateVector> {
    check_input(system, x)?;
    system.check_column(j)?;
    let z = truncate_point(ctx, x);
    let mut out = vec![0.0; x.len()];
    system.diffusion_into(&z, j, &mut out);
    finite_or_err(out, "truncated diffusion")
}

/// `G~_j^l(x) = G_j^l(truncate_point(x))`.
pub fn truncated_deriv(
    ctx: &TruncationContext,
    system: &SdeSystem,
    x: &[f64],
    j: usize,
    l: usize,
) -> Result<StateVector> {
    check_input(system, x)?;
    system.check_column(j)?;
    system.check_coord(l)?;
    let z = truncate_point(ctx, x);
    let mut out = vec![0.0; x.len()];
    system.deriv_into(&z, j, l, &mut out);
    finite_or_err(out, "truncated diffusion derivative")
}

/// Largest of `|f~(x)|`, `|g~_j(x)|`, `|G~_j^l(x)|` over all `j`, `l`.
pub fn truncated_coefficient_max(ctx: &TruncationContext, system: &SdeSystem, x: &[f64]) -> f64 {
    let mut z = vec![0.0; x.len()];
    ctx.project_into(x, &mut z);
    coefficient_max(system, &z)
}

/// Largest of `|f(x)|`, `|g_j(x)|`, `|G_j^l(x)|`.
pub fn coefficient_max(system: &SdeSystem, x: &[f64]) -> f64 {
    let mut buf = vec![0.0; x.len()];
    system.drift_into(x, &mut buf);
    let mut worst = norm(&buf);
    for j in 0..system.noise_dim() {
        system.diffusion_into(x, j, &mut buf);
        worst = worst.max(norm(&buf));
        for l in 0..system.state_dim() {
            system.deriv_into(x, j, l, &mut buf);
            worst = worst.max(norm(&buf));
        }
    }
    worst
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvelopeSample {
    pub radius: f64,
    /// Largest coefficient norm seen on the sampled points with `|x| <= radius`.
    pub coefficient_max: f64,
    pub mu: f64,
}

impl EnvelopeSample {
    pub fn holds(&self) -> bool {
        self.coefficient_max <= self.mu
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvelopeReport {
    pub samples: Vec<EnvelopeSample>,
}

impl EnvelopeReport {
    pub fn holds(&self) -> bool {
        self.samples.iter().all(EnvelopeSample::holds)
    }
}

/// The radii at which the envelope is sampled for a context: 2, 4, 8 and the barrier.
pub fn envelope_radii(ctx: &TruncationContext) -> Vec<f64> {
    vec![2.0, 4.0, 8.0, ctx.barrier()]
}

/// Samples `sup_{|x| <= u} (|f| v |g_j| v |G_j^l|) <= mu(u)` at each radius,
/// using points on the sphere of radius `u` (including the coordinate axes)
/// and at fractions 3/4, 1/2, 1/4 of it.
pub fn check_envelope(
    system: &SdeSystem,
    policy: &TruncationPolicy,
    radii: &[f64],
    directions: usize,
    seed: u64,
) -> EnvelopeReport {
    let d = system.state_dim();
    let mut rng = seeded_rng(seed);
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for i in 0..d {
        for s in [1.0, -1.0] {
            let mut e = vec![0.0; d];
            e[i] = s;
            dirs.push(e);
        }
    }
    while dirs.len() < directions.max(2 * d) {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let n = norm(&v);
        if n > 1e-3 && n <= 1.0 {
            dirs.push(v.into_iter().map(|c| c / n).collect());
        }
    }
    let samples = radii
        .iter()
        .map(|&u| {
            let mut worst = 0.0_f64;
            for dir in &dirs {
                for frac in [1.0, 0.75, 0.5, 0.25] {
                    let x: Vec<f64> = dir.iter().map(|c| c * u * frac).collect();
                    worst = worst.max(coefficient_max(system, &x));
                }
            }
            EnvelopeSample {
                radius: u,
                coefficient_max: worst,
                mu: policy.mu(u),
            }
        })
        .collect();
    EnvelopeReport { samples }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_model;

    fn quintic_policy() -> AdmissiblePolicy {
        validate_policy(TruncationPolicy::power(1.0, 5.0, 0.1, 1.0).unwrap(), DEFAULT_GRID_POINTS).unwrap()
    }

    fn cond<'a>(r: &'a ValidationReport, name: &str) -> &'a ConditionResult {
        r.conditions.iter().find(|c| c.name == name).unwrap()
    }

    #[test]
    fn quintic_policy_admissible_with_boundary_equality() {
        let p = quintic_policy();
        let c = cond(p.report(), COND_H_AT_DELTA_STAR);
        assert!(c.passed);
        assert_eq!(c.worst_value, 0.0);
        assert_eq!(p.h(1.0), p.mu(1.0));
        let q = cond(p.report(), COND_QUARTER_ROOT);
        // delta^0.15 is maximised at delta* = 1
        assert!((q.worst_value - 1.0).abs() < 1e-15);
    }

    #[test]
    fn large_epsilon_rejected() {
        let err = validate_policy(TruncationPolicy::power(1.0, 5.0, 0.3, 1.0).unwrap(), 64).unwrap_err();
        let Error::PolicyRejected(report) = err else {
            panic!("expected rejection")
        };
        let failed: Vec<_> = report.failed().map(|c| c.name).collect();
        assert_eq!(failed, vec![COND_QUARTER_ROOT]);
        let q = cond(&report, COND_QUARTER_ROOT);
        // worst at the smallest grid step 1e-8: (1e-8)^-0.05
        assert!((q.worst_value - 1e-8_f64.powf(-0.05)).abs() < 1e-9);
        assert!((q.worst_at - 1e-8).abs() < 1e-20);
    }

    #[test]
    fn quarter_epsilon_accepted_at_equality() {
        assert!(validate_policy(TruncationPolicy::power(1.0, 5.0, 0.25, 1.0).unwrap(), 64).is_ok());
    }

    #[test]
    fn bad_policies_rejected() {
        // h(delta*) < mu(1)
        let p = TruncationPolicy::power(2.0, 5.0, 0.1, 1.0).unwrap();
        assert!(validate_policy(p, 64).is_err());
        // wrong inverse
        let p = TruncationPolicy::new(
            "bad-inverse",
            Arc::new(|u| u.powi(5)),
            Arc::new(|v| v.powf(0.25)),
            Arc::new(|d| d.powf(-0.1)),
            1.0,
        );
        let Err(Error::PolicyRejected(r)) = validate_policy(p, 64) else {
            panic!()
        };
        assert!(!cond(&r, COND_ROUND_TRIP).passed);
        // non-monotone h
        let p = TruncationPolicy::new(
            "flat-h",
            Arc::new(|u| u),
            Arc::new(|v| v),
            Arc::new(|_| 1.0),
            1.0,
        );
        let Err(Error::PolicyRejected(r)) = validate_policy(p, 64) else {
            panic!()
        };
        assert!(!cond(&r, COND_H_DECREASING).passed);
        assert!(validate_policy(TruncationPolicy::power(1.0, 5.0, 0.1, 1.5).unwrap(), 64).is_err());
        assert!(validate_policy(TruncationPolicy::power(1.0, 5.0, 0.1, 1.0).unwrap(), 1).is_err());
    }

    #[test]
    fn context_barrier_and_bound() {
        let p = quintic_policy();
        let ctx = TruncationContext::new(&p, 2f64.powi(-10)).unwrap();
        assert!((ctx.barrier() - 2f64.powf(0.2)).abs() < 1e-14);
        assert!((ctx.bound() - 2.0).abs() < 1e-14);
        assert!(TruncationContext::new(&p, 0.0).is_err());
        assert!(TruncationContext::new(&p, 1.5).is_err());
    }

    #[test]
    fn truncate_point_examples() {
        let ctx = TruncationContext::new(&quintic_policy(), 2f64.powi(-10)).unwrap();
        assert_eq!(truncate_point(&ctx, &[0.5]).0, vec![0.5]);
        let t = truncate_point(&ctx, &[2.0]);
        assert!((t[0] - 1.148_698_354_997_035).abs() < 1e-12);
        let t = truncate_point(&ctx, &[-7.0]);
        assert!((t[0] + 1.148_698_354_997_035).abs() < 1e-12);
        assert_eq!(truncate_point(&ctx, &[0.0]).0, vec![0.0]);
        assert_eq!(truncate_point(&ctx, &[0.0, 0.0, 0.0]).0, vec![0.0; 3]);
    }

    #[test]
    fn truncated_coefficient_examples() {
        let sys = builtin_model("paper-example").unwrap();
        let ctx = TruncationContext::new(&quintic_policy(), 2f64.powi(-10)).unwrap();
        let f = truncated_drift(&ctx, &sys, &[2.0]).unwrap();
        assert!((f[0] - (-0.851_301_645_002_965)).abs() < 1e-12, "{}", f[0]);
        let g = truncated_diffusion(&ctx, &sys, &[2.0], 0).unwrap();
        assert!((g[0] - 1.319_507_910_772_894).abs() < 1e-12, "{}", g[0]);
        assert_eq!(truncated_drift(&ctx, &sys, &[1.0]).unwrap().0, vec![0.0]);
        let dg = truncated_deriv(&ctx, &sys, &[2.0], 0, 0).unwrap();
        assert!((dg[0] - 2.0 * 2f64.powf(0.2)).abs() < 1e-12);
        assert!(truncated_deriv(&ctx, &sys, &[2.0], 0, 1).is_err());
        assert!(truncated_diffusion(&ctx, &sys, &[2.0], 3).is_err());
        assert!(truncated_drift(&ctx, &sys, &[f64::INFINITY]).is_err());
    }

    #[test]
    fn barrier_monotone_in_step() {
        let p = quintic_policy();
        let mut prev = 0.0;
        for k in 0..30 {
            let ctx = TruncationContext::new(&p, 2f64.powi(-k)).unwrap();
            assert!(ctx.barrier() > prev);
            prev = ctx.barrier();
        }
    }

    #[test]
    fn rate_condition() {
        let fam = PowerFamily {
            scale: 1.0,
            exponent: 5.0,
            epsilon: 0.1,
        };
        // (10p/(q-p) + 1) eps >= 5p/(q-p): at p = 1 need q >= 1 + 5*0.8/0.1 = 41
        assert!((fam.min_q(1.0) - 41.0).abs() < 1e-12);
        assert!(fam.rate_condition_holds(1.0, 41.0));
        assert!(!fam.rate_condition_holds(1.0, 40.0));
        assert!(!fam.rate_condition_holds(1.0, 0.5));
    }

    #[test]
    fn envelope_check_flags_small_barrier() {
        // mu(u) = u^5 dominates |f| v |g| v |g'| only for u >= 2^(1/4);
        // at delta = 2^-10 the barrier 2^0.2 is below that and |G~| = 2b > b^5.
        let sys = builtin_model("paper-example").unwrap();
        let p = quintic_policy();
        let coarse = TruncationContext::new(&p, 2f64.powi(-10)).unwrap();
        let rep = check_envelope(&sys, &p, &envelope_radii(&coarse), 8, 1);
        assert!(rep.samples[..3].iter().all(EnvelopeSample::holds));
        assert!(!rep.samples[3].holds());
        let fine = TruncationContext::new(&p, 2f64.powi(-13)).unwrap();
        assert!(check_envelope(&sys, &p, &envelope_radii(&fine), 8, 1).holds());
    }

    #[test]
    fn bound_holds_where_envelope_holds() {
        let sys = builtin_model("paper-example").unwrap();
        let p = quintic_policy();
        let mut rng = seeded_rng(99);
        for k in 13..21 {
            let ctx = TruncationContext::new(&p, 2f64.powi(-k)).unwrap();
            for _ in 0..2000 {
                let x: f64 = rng.random_range(-50.0..50.0);
                assert!(truncated_coefficient_max(&ctx, &sys, &[x]) <= ctx.bound() * (1.0 + 1e-12));
            }
        }
    }
}
