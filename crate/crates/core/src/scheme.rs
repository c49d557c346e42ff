//! One-step maps and the path driver.
//!
//! All four schemes share one evaluator. For the Milstein pair the update at
//! elapsed time `s` inside a step, with partial increments `w = B(t_k + s) - B(t_k)`, is
//!
//! ```text
//! Y(s) = Y_k + f(z) s + sum_j g_j(z) w_j
//!        + 1/2 sum_{j1,j2} L^{j1} g_{j2}(z) (w_{j1} w_{j2} - [j1 == j2] s)
//! ```
//!
//! where `z` is `Y_k` projected onto the truncation ball (truncated schemes)
//! or `Y_k` itself (classical scheme). The one-step map is this expression at
//! `s = delta`, so the continuous interpolant meets the step map bitwise at
//! the right endpoint, and truncated and classical Milstein agree bitwise
//! whenever no projection happens.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::brownian::{BrownianPath, PathGrid};
use crate::model::{finite_or_err, SdeSystem, StateVector};
use crate::truncation::TruncationContext;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    TruncatedMilstein,
    ClassicalMilstein,
    TruncatedEuler,
    EulerMaruyama,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [
        Scheme::TruncatedMilstein,
        Scheme::ClassicalMilstein,
        Scheme::TruncatedEuler,
        Scheme::EulerMaruyama,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::TruncatedMilstein => "truncated-milstein",
            Scheme::ClassicalMilstein => "classical-milstein",
            Scheme::TruncatedEuler => "truncated-euler",
            Scheme::EulerMaruyama => "euler-maruyama",
        }
    }

    pub fn is_truncated(self) -> bool {
        matches!(self, Scheme::TruncatedMilstein | Scheme::TruncatedEuler)
    }

    pub fn is_milstein(self) -> bool {
        matches!(self, Scheme::TruncatedMilstein | Scheme::ClassicalMilstein)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|sch| sch.as_str() == s)
            .ok_or_else(|| {
                Error::usage(format!(
                    "unknown scheme '{s}'; available: {}",
                    Scheme::ALL.map(Scheme::as_str).join(", ")
                ))
            })
    }
}

/// Reusable evaluator for one scheme on one system. Holds scratch buffers so
/// stepping does not allocate.
pub struct Stepper<'a> {
    system: &'a SdeSystem,
    ctx: Option<&'a TruncationContext>,
    scheme: Scheme,
    z: Vec<f64>,
    f: Vec<f64>,
    /// `g[j * d + i] = g_{i,j}(z)`
    g: Vec<f64>,
    /// `dg[(j * d + l) * d + i] = (G_j^l(z))_i`
    dg: Vec<f64>,
}

impl<'a> Stepper<'a> {
    pub fn new(system: &'a SdeSystem, scheme: Scheme, ctx: Option<&'a TruncationContext>) -> Result<Self> {
        match (scheme.is_truncated(), ctx.is_some()) {
            (true, false) => return Err(Error::usage(format!("scheme {scheme} needs a truncation context"))),
            (false, true) => return Err(Error::usage(format!("scheme {scheme} takes no truncation context"))),
            _ => {}
        }
        let (d, m) = (system.state_dim(), system.noise_dim());
        Ok(Stepper {
            system,
            ctx,
            scheme,
            z: vec![0.0; d],
            f: vec![0.0; d],
            g: vec![0.0; m * d],
            dg: if scheme.is_milstein() { vec![0.0; m * d * d] } else { Vec::new() },
        })
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    fn evaluate(&mut self, y: &[f64]) {
        let (d, m) = (self.system.state_dim(), self.system.noise_dim());
        match self.ctx {
            Some(ctx) => {
                ctx.project_into(y, &mut self.z);
            }
            None => self.z.copy_from_slice(y),
        }
        self.system.drift_into(&self.z, &mut self.f);
        for j in 0..m {
            self.system.diffusion_into(&self.z, j, &mut self.g[j * d..(j + 1) * d]);
        }
        if self.scheme.is_milstein() {
            for j in 0..m {
                for l in 0..d {
                    let at = (j * d + l) * d;
                    self.system.deriv_into(&self.z, j, l, &mut self.dg[at..at + d]);
                }
            }
        }
    }

    /// State after elapsed time `s` with partial increments `w`; at
    /// `s = delta`, `w = Delta B_k` this is the one-step map.
    pub fn advance(&mut self, y: &[f64], w: &[f64], s: f64, out: &mut [f64]) {
        self.evaluate(y);
        let (d, m) = (self.system.state_dim(), self.system.noise_dim());
        for i in 0..d {
            let mut acc = y[i] + self.f[i] * s;
            for j in 0..m {
                acc += self.g[j * d + i] * w[j];
            }
            out[i] = acc;
        }
        if !self.scheme.is_milstein() {
            return;
        }
        for j1 in 0..m {
            for j2 in 0..m {
                let mut weight = w[j1] * w[j2];
                if j1 == j2 {
                    weight -= s;
                }
                let half = 0.5 * weight;
                // L^{j1} g_{j2} = sum_l g_{l,j1} G_{j2}^l
                for l in 0..d {
                    let c = self.g[j1 * d + l] * half;
                    let col = &self.dg[(j2 * d + l) * d..(j2 * d + l + 1) * d];
                    for i in 0..d {
                        out[i] += c * col[i];
                    }
                }
            }
        }
    }
}

fn check_step_args(system: &SdeSystem, y: &[f64], db: &[f64]) -> Result<()> {
    if y.len() != system.state_dim() || db.len() != system.noise_dim() {
        return Err(Error::usage(format!(
            "expected state of length {} and increment of length {}",
            system.state_dim(),
            system.noise_dim()
        )));
    }
    Ok(())
}

fn check_ctx_step(ctx: &TruncationContext, delta: f64) -> Result<()> {
    if (ctx.step() - delta).abs() > 1e-12 * delta {
        return Err(Error::usage(format!(
            "step {delta} does not match truncation context step {}",
            ctx.step()
        )));
    }
    Ok(())
}

fn one_step(
    system: &SdeSystem,
    scheme: Scheme,
    ctx: Option<&TruncationContext>,
    y: &[f64],
    db: &[f64],
    delta: f64,
) -> Result<StateVector> {
    check_step_args(system, y, db)?;
    if let Some(ctx) = ctx {
        check_ctx_step(ctx, delta)?;
    }
    let mut stepper = Stepper::new(system, scheme, ctx)?;
    let mut out = vec![0.0; y.len()];
    stepper.advance(y, db, delta, &mut out);
    finite_or_err(out, "step result")
}

pub fn truncated_milstein_step(
    system: &SdeSystem,
    ctx: &TruncationContext,
    y: &[f64],
    db: &[f64],
    delta: f64,
) -> Result<StateVector> {
    one_step(system, Scheme::TruncatedMilstein, Some(ctx), y, db, delta)
}

/// Commutative-noise Milstein step with untruncated coefficients.
pub fn classical_milstein_step(system: &SdeSystem, y: &[f64], db: &[f64], delta: f64) -> Result<StateVector> {
    one_step(system, Scheme::ClassicalMilstein, None, y, db, delta)
}

pub fn truncated_euler_step(
    system: &SdeSystem,
    ctx: &TruncationContext,
    y: &[f64],
    db: &[f64],
    delta: f64,
) -> Result<StateVector> {
    one_step(system, Scheme::TruncatedEuler, Some(ctx), y, db, delta)
}

pub fn euler_maruyama_step(system: &SdeSystem, y: &[f64], db: &[f64], delta: f64) -> Result<StateVector> {
    one_step(system, Scheme::EulerMaruyama, None, y, db, delta)
}

/// Continuous truncated Milstein interpolant at `t_k + s`, given `Y_k` and
/// `B(t_k + s) - B(t_k)`.
pub fn interpolate_within_step(
    system: &SdeSystem,
    ctx: &TruncationContext,
    y_k: &[f64],
    db_partial: &[f64],
    s: f64,
) -> Result<StateVector> {
    check_step_args(system, y_k, db_partial)?;
    if !(0.0..=ctx.step()).contains(&s) {
        return Err(Error::usage(format!("s = {s} outside [0, {}]", ctx.step())));
    }
    let mut stepper = Stepper::new(system, Scheme::TruncatedMilstein, Some(ctx))?;
    let mut out = vec![0.0; y_k.len()];
    stepper.advance(y_k, db_partial, s, &mut out);
    finite_or_err(out, "interpolated state")
}

/// Iterates `Y_0 ..= Y_N` of `path`.
#[derive(Clone, Debug)]
pub struct Trajectory {
    grid: PathGrid,
    dim: usize,
    states: Vec<f64>,
    scheme: Scheme,
    ctx: Option<TruncationContext>,
    blow_up: Option<usize>,
}

impl Trajectory {
    pub fn grid(&self) -> PathGrid {
        self.grid
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn context(&self) -> Option<&TruncationContext> {
        self.ctx.as_ref()
    }

    /// Number of stored rows: `N + 1`, or fewer after a blow-up.
    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.states.chunks_exact(self.dim)
    }

    /// Index of the first non-finite state, if any. The trajectory stops there.
    pub fn blow_up(&self) -> Option<usize> {
        self.blow_up
    }

    pub fn terminal(&self) -> Option<&[f64]> {
        match self.blow_up {
            Some(_) => None,
            None => Some(self.state(self.grid.steps())),
        }
    }
}

fn check_path(system: &SdeSystem, scheme: Scheme, path: &BrownianPath, ctx: Option<&TruncationContext>) -> Result<()> {
    if path.noise_dim() != system.noise_dim() {
        return Err(Error::usage(format!(
            "path has {} noise columns, system has {}",
            path.noise_dim(),
            system.noise_dim()
        )));
    }
    match (scheme.is_truncated(), ctx) {
        (true, None) => Err(Error::usage(format!("scheme {scheme} needs a truncation context"))),
        (false, Some(_)) => Err(Error::usage(format!("scheme {scheme} takes no truncation context"))),
        (true, Some(ctx)) => check_ctx_step(ctx, path.grid().step()),
        (false, None) => Ok(()),
    }
}

/// Folds the step map over `path`, calling `visit(k, Y_k)` for every finite
/// iterate including `Y_0`. Returns the first non-finite index, if any, and
/// stops there.
pub fn integrate(
    system: &SdeSystem,
    scheme: Scheme,
    path: &BrownianPath,
    ctx: Option<&TruncationContext>,
    mut visit: impl FnMut(usize, &[f64]),
) -> Result<Option<usize>> {
    check_path(system, scheme, path, ctx)?;
    let mut stepper = Stepper::new(system, scheme, ctx)?;
    let delta = path.grid().step();
    let mut y = system.initial_state().to_vec();
    let mut next = vec![0.0; y.len()];
    visit(0, &y);
    for k in 0..path.grid().steps() {
        stepper.advance(&y, path.increment(k), delta, &mut next);
        if next.iter().any(|v| !v.is_finite()) {
            return Ok(Some(k + 1));
        }
        std::mem::swap(&mut y, &mut next);
        visit(k + 1, &y);
    }
    Ok(None)
}

/// Whole-path simulation keeping every iterate.
pub fn simulate(
    system: &SdeSystem,
    scheme: Scheme,
    path: &BrownianPath,
    ctx: Option<&TruncationContext>,
) -> Result<Trajectory> {
    let d = system.state_dim();
    let mut states = Vec::with_capacity((path.grid().steps() + 1) * d);
    let mut rows = 0;
    let blow_up = integrate(system, scheme, path, ctx, |_, y| {
        states.extend_from_slice(y);
        rows += 1;
    })?;
    if let Some(k) = blow_up {
        debug_assert_eq!(rows, k);
        // keep the offending row for inspection
        let mut stepper = Stepper::new(system, scheme, ctx)?;
        let mut bad = vec![0.0; d];
        let prev = states[(k - 1) * d..k * d].to_vec();
        stepper.advance(&prev, path.increment(k - 1), path.grid().step(), &mut bad);
        states.extend_from_slice(&bad);
    }
    Ok(Trajectory {
        grid: path.grid(),
        dim: d,
        states,
        scheme,
        ctx: ctx.cloned(),
        blow_up,
    })
}
