//! SDE instances `dx = f(x) dt + sum_j g_j(x) dB^j`, the `L^{j1} g_{j2}`
//! operator, and sampling-based diagnostics.
//!
//! Coefficients are plain callables that write into caller-provided buffers,
//! so the integrators can run allocation-free. The derivative callable
//! returns the column `G_j^l(x) = d g_j / d x^l`; there is no automatic
//! differentiation, so [`derivative_consistency`] exists to catch a wrong
//! analytic derivative.
//!
//! The assumption checkers are falsifiers: they sample point pairs from a box
//! and report the worst observed `lhs / rhs`. A ratio above one refutes the
//! candidate constants; a ratio below one proves nothing.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Deref;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{norm, Error, Result};

/// `f`: writes the drift at `x` into `out`.
pub type DriftFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// `g_j`: writes diffusion column `j` at `x` into `out`.
pub type DiffusionFn = Arc<dyn Fn(&[f64], usize, &mut [f64]) + Send + Sync>;
/// `G_j^l`: writes the derivative of column `j` along coordinate `l` into `out`.
pub type DiffusionDerivFn = Arc<dyn Fn(&[f64], usize, usize, &mut [f64]) + Send + Sync>;
/// Closed-form solution `x(t)` given `t` and the Brownian value `B(t)`.
pub type ExactFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// Names accepted by [`builtin_model`].
pub const MODEL_NAMES: [&str; 3] = ["paper-example", "gbm", "linear-2d-diagonal"];

/// Default sampling box for the diagnostics.
pub const DEFAULT_BOX: SampleBox = SampleBox { lo: -3.0, hi: 3.0 };

/// Default absolute tolerance for [`check_commutativity`].
pub const DEFAULT_COMMUTATIVITY_TOL: f64 = 1e-9;

/// A point in model state space.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector(pub Vec<f64>);

impl StateVector {
    pub fn zeros(dim: usize) -> Self {
        StateVector(vec![0.0; dim])
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for StateVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for StateVector {
    fn from(v: Vec<f64>) -> Self {
        StateVector(v)
    }
}

/// One autonomous SDE instance with `d`-dimensional state and `m` noise columns.
#[derive(Clone)]
pub struct SdeSystem {
    state_dim: usize,
    noise_dim: usize,
    drift: DriftFn,
    diffusion: DiffusionFn,
    diffusion_deriv: DiffusionDerivFn,
    initial_state: Vec<f64>,
    label: String,
    exact: Option<ExactFn>,
}

impl fmt::Debug for SdeSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeSystem")
            .field("label", &self.label)
            .field("state_dim", &self.state_dim)
            .field("noise_dim", &self.noise_dim)
            .field("initial_state", &self.initial_state)
            .field("has_exact_solution", &self.exact.is_some())
            .finish()
    }
}

impl SdeSystem {
    pub fn new(
        label: impl Into<String>,
        initial_state: Vec<f64>,
        noise_dim: usize,
        drift: DriftFn,
        diffusion: DiffusionFn,
        diffusion_deriv: DiffusionDerivFn,
    ) -> Result<Self> {
        let state_dim = initial_state.len();
        if state_dim == 0 || noise_dim == 0 {
            return Err(Error::usage("state and noise dimensions must be positive"));
        }
        if let Some(i) = initial_state.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericDomain {
                what: "initial state".into(),
                coord: i,
            });
        }
        Ok(SdeSystem {
            state_dim,
            noise_dim,
            drift,
            diffusion,
            diffusion_deriv,
            initial_state,
            label: label.into(),
            exact: None,
        })
    }

    /// Attach a closed-form solution used as an exact reference in experiments.
    pub fn with_exact_solution(mut self, exact: ExactFn) -> Self {
        self.exact = Some(exact);
        self
    }

    pub fn with_initial_state(mut self, x0: Vec<f64>) -> Result<Self> {
        if x0.len() != self.state_dim {
            return Err(Error::usage(format!(
                "initial state has length {}, expected {}",
                x0.len(),
                self.state_dim
            )));
        }
        self.initial_state = x0;
        Ok(self)
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn initial_state(&self) -> &[f64] {
        &self.initial_state
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn has_exact_solution(&self) -> bool {
        self.exact.is_some()
    }

    #[inline]
    pub(crate) fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out)
    }

    #[inline]
    pub(crate) fn diffusion_into(&self, x: &[f64], j: usize, out: &mut [f64]) {
        (self.diffusion)(x, j, out)
    }

    #[inline]
    pub(crate) fn deriv_into(&self, x: &[f64], j: usize, l: usize, out: &mut [f64]) {
        (self.diffusion_deriv)(x, j, l, out)
    }

    pub(crate) fn exact_into(&self, t: f64, brownian: &[f64], out: &mut [f64]) -> bool {
        match &self.exact {
            Some(exact) => {
                exact(t, brownian, out);
                true
            }
            None => false,
        }
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.state_dim {
            return Err(Error::usage(format!(
                "state has length {}, expected {}",
                x.len(),
                self.state_dim
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

    pub(crate) fn check_column(&self, j: usize) -> Result<()> {
        if j >= self.noise_dim {
            return Err(Error::usage(format!(
                "noise column {j} out of range 0..{}",
                self.noise_dim
            )));
        }
        Ok(())
    }

    pub(crate) fn check_coord(&self, l: usize) -> Result<()> {
        if l >= self.state_dim {
            return Err(Error::usage(format!(
                "coordinate {l} out of range 0..{}",
                self.state_dim
            )));
        }
        Ok(())
    }

    /// `f(x)`.
    pub fn drift(&self, x: &[f64]) -> Result<StateVector> {
        self.check_point(x)?;
        let mut out = vec![0.0; self.state_dim];
        self.drift_into(x, &mut out);
        finite_or_err(out, "drift")
    }

    /// `g_j(x)`, with `j` zero-based.
    pub fn diffusion(&self, x: &[f64], j: usize) -> Result<StateVector> {
        self.check_point(x)?;
        self.check_column(j)?;
        let mut out = vec![0.0; self.state_dim];
        self.diffusion_into(x, j, &mut out);
        finite_or_err(out, "diffusion")
    }

    /// `G_j^l(x) = d g_j(x) / d x^l`, with `j` and `l` zero-based.
    pub fn diffusion_deriv(&self, x: &[f64], j: usize, l: usize) -> Result<StateVector> {
        self.check_point(x)?;
        self.check_column(j)?;
        self.check_coord(l)?;
        let mut out = vec![0.0; self.state_dim];
        self.deriv_into(x, j, l, &mut out);
        finite_or_err(out, "diffusion derivative")
    }
}

pub(crate) fn finite_or_err(v: Vec<f64>, what: &str) -> Result<StateVector> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(coord) => Err(Error::NumericDomain {
            what: what.to_string(),
            coord,
        }),
        None => Ok(StateVector(v)),
    }
}

/// `L^{j1} g_{j2}(x) = sum_l g_{l,j1}(x) G_{j2}^l(x)`, indices zero-based.
pub fn eval_l_operator(system: &SdeSystem, x: &[f64], j1: usize, j2: usize) -> Result<StateVector> {
    system.check_point(x)?;
    system.check_column(j1)?;
    system.check_column(j2)?;
    let d = system.state_dim();
    let mut g = vec![0.0; d];
    let mut col = vec![0.0; d];
    let mut out = vec![0.0; d];
    system.diffusion_into(x, j1, &mut g);
    for (l, &gl) in g.iter().enumerate() {
        system.deriv_into(x, j2, l, &mut col);
        for (o, c) in out.iter_mut().zip(&col) {
            *o += gl * c;
        }
    }
    finite_or_err(out, "L operator")
}

/// Axis-aligned sampling box `[lo, hi]^d`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleBox {
    pub lo: f64,
    pub hi: f64,
}

impl Default for SampleBox {
    fn default() -> Self {
        DEFAULT_BOX
    }
}

impl SampleBox {
    fn draw(&self, rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| rng.random_range(self.lo..=self.hi)).collect()
    }
}

pub(crate) fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CommutativityCheck {
    pub commutes: bool,
    pub worst_residual: f64,
}

/// Samples points and reports the largest `|L^{j1} g_{l,j2} - L^{j2} g_{l,j1}|`.
pub fn check_commutativity(
    system: &SdeSystem,
    samples: usize,
    seed: u64,
    tol: f64,
    sample_box: SampleBox,
) -> Result<CommutativityCheck> {
    if samples == 0 {
        return Err(Error::usage("commutativity check needs at least one sample"));
    }
    let m = system.noise_dim();
    let mut rng = seeded_rng(seed);
    let mut worst = 0.0_f64;
    for _ in 0..samples {
        let x = sample_box.draw(&mut rng, system.state_dim());
        for j1 in 0..m {
            for j2 in (j1 + 1)..m {
                let a = eval_l_operator(system, &x, j1, j2)?;
                let b = eval_l_operator(system, &x, j2, j1)?;
                for (u, v) in a.iter().zip(b.iter()) {
                    worst = worst.max((u - v).abs());
                }
            }
        }
    }
    Ok(CommutativityCheck {
        commutes: worst <= tol,
        worst_residual: worst,
    })
}

/// Candidate constants for the growth assumptions. `alpha3` defaults to `k2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CandidateConstants {
    pub k1: f64,
    pub k2: f64,
    pub r: f64,
    pub alpha3: Option<f64>,
}

/// Worst observed `lhs / rhs` for one condition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditionCheck {
    pub max_lhs_over_rhs: f64,
    pub violated: bool,
}

impl ConditionCheck {
    fn from_ratio(max_lhs_over_rhs: f64) -> Self {
        ConditionCheck {
            max_lhs_over_rhs,
            violated: max_lhs_over_rhs > 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssumptionReport {
    pub checked_pairs: usize,
    /// Polynomial Lipschitz bound on `f`, `g_j` and `L^{j1} g_{j2}` with `K2`, `r`.
    pub local_lipschitz: ConditionCheck,
    /// One-sided Khasminskii-type bound with `K1` at the given `p`.
    pub khasminskii: ConditionCheck,
    /// `|f_l'| v |f_l''| v |g_{l,n}'| v |g_{l,n}''| <= alpha3 (1 + |x|^{r+1})`.
    pub derivative_growth: ConditionCheck,
    pub p: f64,
    pub sample_seed: u64,
}

impl AssumptionReport {
    pub fn any_violated(&self) -> bool {
        self.local_lipschitz.violated || self.khasminskii.violated || self.derivative_growth.violated
    }
}

/// Samples `(x, y)` pairs from `sample_box` and evaluates the growth
/// assumptions as ratios. Second derivatives come from central differences
/// of the supplied callables.
pub fn check_assumptions(
    system: &SdeSystem,
    constants: CandidateConstants,
    p: f64,
    samples: usize,
    seed: u64,
    sample_box: SampleBox,
) -> Result<AssumptionReport> {
    let CandidateConstants { k1, k2, r, alpha3 } = constants;
    let alpha3 = alpha3.unwrap_or(k2);
    if !(k1 > 0.0 && k2 > 0.0 && r > 0.0 && alpha3 > 0.0) {
        return Err(Error::usage("candidate constants must be positive"));
    }
    if !(p >= 1.0) {
        return Err(Error::usage("p must be at least 1"));
    }
    let d = system.state_dim();
    let m = system.noise_dim();
    let mut rng = seeded_rng(seed);
    let mut lip = 0.0_f64;
    let mut khas = f64::NEG_INFINITY;
    let mut growth = 0.0_f64;
    let mut checked = 0;

    let mut fx = vec![0.0; d];
    let mut fy = vec![0.0; d];
    let mut gx = vec![0.0; d];
    let mut gy = vec![0.0; d];

    for _ in 0..samples {
        let x = sample_box.draw(&mut rng, d);
        let y = sample_box.draw(&mut rng, d);
        let diff: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        let dist = norm(&diff);
        if dist == 0.0 {
            continue;
        }
        checked += 1;

        system.drift_into(&x, &mut fx);
        system.drift_into(&y, &mut fy);
        let df: Vec<f64> = fx.iter().zip(&fy).map(|(a, b)| a - b).collect();
        let mut worst_lhs = norm(&df);
        let mut g_sq = 0.0;
        for j in 0..m {
            system.diffusion_into(&x, j, &mut gx);
            system.diffusion_into(&y, j, &mut gy);
            let dg = gx.iter().zip(&gy).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            g_sq += dg;
            worst_lhs = worst_lhs.max(dg.sqrt());
        }
        for j1 in 0..m {
            for j2 in 0..m {
                let lx = eval_l_operator(system, &x, j1, j2)?;
                let ly = eval_l_operator(system, &y, j1, j2)?;
                let dl: Vec<f64> = lx.iter().zip(ly.iter()).map(|(a, b)| a - b).collect();
                worst_lhs = worst_lhs.max(norm(&dl));
            }
        }
        let lip_rhs = k2 * (1.0 + norm(&x).powf(r) + norm(&y).powf(r)) * dist;
        lip = lip.max(worst_lhs / lip_rhs);

        let inner: f64 = diff.iter().zip(&df).map(|(a, b)| a * b).sum();
        let khas_lhs = inner + (2.0 * p - 1.0) * g_sq;
        khas = khas.max(khas_lhs / (k1 * dist * dist));

        let growth_rhs = alpha3 * (1.0 + norm(&x).powf(r + 1.0));
        growth = growth.max(derivative_magnitude(system, &x) / growth_rhs);
    }
    if checked == 0 {
        khas = 0.0;
    }
    Ok(AssumptionReport {
        checked_pairs: checked,
        local_lipschitz: ConditionCheck::from_ratio(lip),
        khasminskii: ConditionCheck::from_ratio(khas),
        derivative_growth: ConditionCheck::from_ratio(growth),
        p,
        sample_seed: seed,
    })
}

/// Largest of `|f_l'|`, `|f_l''|`, `|g_{l,n}'|`, `|g_{l,n}''|` over `l`, `n`
/// (gradient and Hessian in Frobenius norm).
fn derivative_magnitude(system: &SdeSystem, x: &[f64]) -> f64 {
    let d = system.state_dim();
    let m = system.noise_dim();
    let h = 1e-4 * (1.0 + norm(x));
    let mut xp = x.to_vec();
    let mut a = vec![0.0; d];
    let mut b = vec![0.0; d];

    // Jacobian of f by central differences: jac[i][l] = d f_l / d x^i.
    let mut jac_f = vec![vec![0.0; d]; d];
    // Hessians of f_l: hess_f[l][i][k].
    let mut hess_f = vec![vec![vec![0.0; d]; d]; d];
    // Analytic Jacobian of g_{., n}: gcols[n][i] = G_n^i.
    let mut gcols = vec![vec![vec![0.0; d]; d]; m];
    // Hessians of g_{l,n} from differences of G: hess_g[n][l][i][k].
    let mut hess_g = vec![vec![vec![vec![0.0; d]; d]; d]; m];

    for i in 0..d {
        xp[i] = x[i] + h;
        system.drift_into(&xp, &mut a);
        xp[i] = x[i] - h;
        system.drift_into(&xp, &mut b);
        xp[i] = x[i];
        for l in 0..d {
            jac_f[i][l] = (a[l] - b[l]) / (2.0 * h);
        }
        for n in 0..m {
            system.deriv_into(x, n, i, &mut gcols[n][i]);
        }
    }
    let mut ja = vec![0.0; d];
    let mut jb = vec![0.0; d];
    for i in 0..d {
        for k in 0..d {
            // d^2 f / dx^i dx^k by a four-point stencil
            let mut acc = vec![0.0; d];
            for (si, sk, w) in [(1.0, 1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0), (-1.0, -1.0, 1.0)] {
                xp.copy_from_slice(x);
                xp[i] += si * h;
                xp[k] += sk * h;
                system.drift_into(&xp, &mut a);
                for l in 0..d {
                    acc[l] += w * a[l];
                }
            }
            for l in 0..d {
                hess_f[l][i][k] = acc[l] / (4.0 * h * h);
            }
        }
        xp.copy_from_slice(x);
        for n in 0..m {
            for k in 0..d {
                xp[k] = x[k] + h;
                system.deriv_into(&xp, n, i, &mut ja);
                xp[k] = x[k] - h;
                system.deriv_into(&xp, n, i, &mut jb);
                xp[k] = x[k];
                for l in 0..d {
                    hess_g[n][l][i][k] = (ja[l] - jb[l]) / (2.0 * h);
                }
            }
        }
    }

    let mut worst = 0.0_f64;
    for l in 0..d {
        let grad: f64 = (0..d).map(|i| jac_f[i][l].powi(2)).sum::<f64>().sqrt();
        let hess: f64 = hess_f[l].iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(grad).max(hess);
        for n in 0..m {
            let ggrad: f64 = (0..d).map(|i| gcols[n][i][l].powi(2)).sum::<f64>().sqrt();
            let ghess: f64 = hess_g[n][l].iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
            worst = worst.max(ggrad).max(ghess);
        }
    }
    worst
}

/// Largest `|G_j^l(x) - (g_j(x + h e_l) - g_j(x - h e_l)) / 2h| / (1 + |G_j^l(x)|)`
/// over sampled points, columns and coordinates.
pub fn derivative_consistency(
    system: &SdeSystem,
    samples: usize,
    seed: u64,
    h: f64,
    sample_box: SampleBox,
) -> f64 {
    let d = system.state_dim();
    let mut rng = seeded_rng(seed);
    let mut worst = 0.0_f64;
    let mut analytic = vec![0.0; d];
    let mut plus = vec![0.0; d];
    let mut minus = vec![0.0; d];
    for _ in 0..samples {
        let x = sample_box.draw(&mut rng, d);
        let mut xp = x.clone();
        for j in 0..system.noise_dim() {
            for l in 0..d {
                system.deriv_into(&x, j, l, &mut analytic);
                xp[l] = x[l] + h;
                system.diffusion_into(&xp, j, &mut plus);
                xp[l] = x[l] - h;
                system.diffusion_into(&xp, j, &mut minus);
                xp[l] = x[l];
                let err: Vec<f64> = (0..d)
                    .map(|i| analytic[i] - (plus[i] - minus[i]) / (2.0 * h))
                    .collect();
                worst = worst.max(norm(&err) / (1.0 + norm(&analytic)));
            }
        }
    }
    worst
}

/// Named scalar parameters for built-in models.
pub type ModelParams = BTreeMap<String, f64>;

/// A built-in model with default parameters.
pub fn builtin_model(name: &str) -> Result<SdeSystem> {
    builtin_model_with(name, &ModelParams::new())
}

/// A built-in model with parameter overrides.
///
/// * `paper-example`: `f(x) = x - x^5`, `g(x) = x^2`; params `x0` (1).
/// * `gbm`: `f(x) = a x`, `g(x) = sigma x`; params `a` (0.05), `sigma` (0.2), `x0` (1).
/// * `linear-2d-diagonal`: `f(x) = a x`, `g_1 = (s1 x^1, 0)`, `g_2 = (0, s2 x^2)`;
///   params `a` (-0.5), `sigma1` (1), `sigma2` (1), `x0_1` (1), `x0_2` (1).
pub fn builtin_model_with(name: &str, params: &ModelParams) -> Result<SdeSystem> {
    let allowed: &[&str] = match name {
        "paper-example" => &["x0"],
        "gbm" => &["a", "sigma", "x0"],
        "linear-2d-diagonal" => &["a", "sigma1", "sigma2", "x0_1", "x0_2"],
        other => {
            return Err(Error::usage(format!(
                "unknown model '{other}'; available: {}",
                MODEL_NAMES.join(", ")
            )))
        }
    };
    if let Some(bad) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(Error::usage(format!(
            "model '{name}' has no parameter '{bad}'; accepted: {}",
            allowed.join(", ")
        )));
    }
    let get = |key: &str, default: f64| params.get(key).copied().unwrap_or(default);

    match name {
        "paper-example" => SdeSystem::new(
            "paper-example",
            vec![get("x0", 1.0)],
            1,
            Arc::new(|x, out| {
                let v = x[0];
                out[0] = v - v.powi(5);
            }),
            Arc::new(|x, _, out| out[0] = x[0] * x[0]),
            Arc::new(|x, _, _, out| out[0] = 2.0 * x[0]),
        ),
        "gbm" => {
            let (a, sigma) = (get("a", 0.05), get("sigma", 0.2));
            let x0 = get("x0", 1.0);
            let sys = SdeSystem::new(
                "gbm",
                vec![x0],
                1,
                Arc::new(move |x, out| out[0] = a * x[0]),
                Arc::new(move |x, _, out| out[0] = sigma * x[0]),
                Arc::new(move |_, _, _, out| out[0] = sigma),
            )?;
            Ok(sys.with_exact_solution(Arc::new(move |t, w, out| {
                out[0] = x0 * ((a - 0.5 * sigma * sigma) * t + sigma * w[0]).exp();
            })))
        }
        "linear-2d-diagonal" => {
            let a = get("a", -0.5);
            let sig = [get("sigma1", 1.0), get("sigma2", 1.0)];
            let x0 = [get("x0_1", 1.0), get("x0_2", 1.0)];
            let sys = SdeSystem::new(
                "linear-2d-diagonal",
                x0.to_vec(),
                2,
                Arc::new(move |x, out| {
                    out[0] = a * x[0];
                    out[1] = a * x[1];
                }),
                Arc::new(move |x, j, out| {
                    out[0] = 0.0;
                    out[1] = 0.0;
                    out[j] = sig[j] * x[j];
                }),
                Arc::new(move |_, j, l, out| {
                    out[0] = 0.0;
                    out[1] = 0.0;
                    if j == l {
                        out[j] = sig[j];
                    }
                }),
            )?;
            Ok(sys.with_exact_solution(Arc::new(move |t, w, out| {
                for i in 0..2 {
                    out[i] = x0[i] * ((a - 0.5 * sig[i] * sig[i]) * t + sig[i] * w[i]).exp();
                }
            })))
        }
        _ => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_model(d: usize, m: usize) -> SdeSystem {
        SdeSystem::new(
            "zero",
            vec![1.0; d],
            m,
            Arc::new(|_, out| out.fill(0.0)),
            Arc::new(|_, _, out| out.fill(0.0)),
            Arc::new(|_, _, _, out| out.fill(0.0)),
        )
        .unwrap()
    }

    fn two_by_two(g: fn(&[f64], usize, &mut [f64]), dg: fn(&[f64], usize, usize, &mut [f64])) -> SdeSystem {
        SdeSystem::new(
            "2x2",
            vec![1.0, 1.0],
            2,
            Arc::new(|_, out| out.fill(0.0)),
            Arc::new(g),
            Arc::new(dg),
        )
        .unwrap()
    }

    #[test]
    fn l_operator_quintic_example() {
        let sys = builtin_model("paper-example").unwrap();
        let v = eval_l_operator(&sys, &[1.0], 0, 0).unwrap();
        assert_eq!(v.0, vec![2.0]);
        let mut rng = seeded_rng(7);
        for _ in 0..100 {
            let x: f64 = rng.random_range(-2.0..2.0);
            let v = eval_l_operator(&sys, &[x], 0, 0).unwrap();
            let want = 2.0 * x.powi(3);
            assert!((v[0] - want).abs() <= 1e-12 * want.abs().max(f64::MIN_POSITIVE));
        }
    }

    #[test]
    fn l_operator_matches_finite_differences() {
        let sys = builtin_model("paper-example").unwrap();
        for x in [-1.7, -0.3, 0.4, 1.0, 2.2] {
            let h = 1e-6;
            let g = x * x;
            let dg = ((x + h) * (x + h) - (x - h) * (x - h)) / (2.0 * h);
            let v = eval_l_operator(&sys, &[x], 0, 0).unwrap();
            assert!((v[0] - g * dg).abs() < 1e-6 * (1.0 + v[0].abs()));
        }
    }

    #[test]
    fn l_operator_gbm() {
        let sys = builtin_model_with("gbm", &ModelParams::from([("sigma".to_string(), 0.5)])).unwrap();
        let v = eval_l_operator(&sys, &[2.0], 0, 0).unwrap();
        assert!((v[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn l_operator_zero_diffusion() {
        let sys = zero_model(3, 2);
        let v = eval_l_operator(&sys, &[1.0, -2.0, 0.5], 1, 0).unwrap();
        assert_eq!(v.0, vec![0.0; 3]);
    }

    #[test]
    fn l_operator_errors() {
        let sys = builtin_model("paper-example").unwrap();
        assert!(matches!(eval_l_operator(&sys, &[1.0], 1, 0), Err(Error::Usage(_))));
        assert!(matches!(
            eval_l_operator(&sys, &[f64::NAN], 0, 0),
            Err(Error::NumericDomain { coord: 0, .. })
        ));
        let overflow = eval_l_operator(&sys, &[1e200], 0, 0);
        assert!(matches!(overflow, Err(Error::NumericDomain { .. })));
    }

    #[test]
    fn commutativity() {
        let scalar = builtin_model("paper-example").unwrap();
        let c = check_commutativity(&scalar, 50, 1, DEFAULT_COMMUTATIVITY_TOL, DEFAULT_BOX).unwrap();
        assert!(c.commutes);
        assert_eq!(c.worst_residual, 0.0);

        let diag = two_by_two(
            |x, j, out| {
                out.fill(0.0);
                out[j] = x[j];
            },
            |_, j, l, out| {
                out.fill(0.0);
                if j == l {
                    out[j] = 1.0;
                }
            },
        );
        let c = check_commutativity(&diag, 200, 2, DEFAULT_COMMUTATIVITY_TOL, DEFAULT_BOX).unwrap();
        assert!(c.commutes);

        // g_1 = (x^2, 0), g_2 = (0, x^1): L^1 g_2 = (0, x^2), L^2 g_1 = (x^1, 0)
        let skew = two_by_two(
            |x, j, out| {
                out.fill(0.0);
                if j == 0 {
                    out[0] = x[1];
                } else {
                    out[1] = x[0];
                }
            },
            |_, j, l, out| {
                out.fill(0.0);
                if j == 0 && l == 1 {
                    out[0] = 1.0;
                }
                if j == 1 && l == 0 {
                    out[1] = 1.0;
                }
            },
        );
        let c = check_commutativity(&skew, 200, 3, DEFAULT_COMMUTATIVITY_TOL, DEFAULT_BOX).unwrap();
        assert!(!c.commutes);
        assert!(c.worst_residual > 1.0);

        assert!(check_commutativity(&skew, 0, 3, 1e-9, DEFAULT_BOX).is_err());
    }

    #[test]
    fn builtin_models_commute() {
        for name in MODEL_NAMES {
            let sys = builtin_model(name).unwrap();
            let c = check_commutativity(&sys, 100, 11, DEFAULT_COMMUTATIVITY_TOL, DEFAULT_BOX).unwrap();
            assert!(c.commutes, "{name}");
        }
    }

    #[test]
    fn derivatives_consistent_for_builtins() {
        let b = SampleBox { lo: -2.0, hi: 2.0 };
        for name in MODEL_NAMES {
            let sys = builtin_model(name).unwrap();
            let worst = derivative_consistency(&sys, 100, 5, 1e-5, b);
            assert!(worst <= 1e-4, "{name}: {worst}");
        }
    }

    #[test]
    fn wrong_derivative_detected() {
        let sys = SdeSystem::new(
            "bad",
            vec![1.0],
            1,
            Arc::new(|_, out| out[0] = 0.0),
            Arc::new(|x, _, out| out[0] = x[0] * x[0]),
            Arc::new(|x, _, _, out| out[0] = x[0]),
        )
        .unwrap();
        assert!(derivative_consistency(&sys, 20, 5, 1e-5, DEFAULT_BOX) > 1e-2);
    }

    #[test]
    fn assumptions_quintic_example() {
        let sys = builtin_model("paper-example").unwrap();
        let c = CandidateConstants {
            k1: 5.0,
            k2: 20.0,
            r: 4.0,
            alpha3: None,
        };
        let rep = check_assumptions(&sys, c, 1.0, 10_000, 3, DEFAULT_BOX).unwrap();
        assert!(!rep.any_violated(), "{rep:?}");
        assert_eq!(rep.checked_pairs, 10_000);
        assert!(rep.khasminskii.max_lhs_over_rhs > 0.0);

        let tiny = CandidateConstants { k2: 1e-6, ..c };
        let rep = check_assumptions(&sys, tiny, 1.0, 1000, 3, DEFAULT_BOX).unwrap();
        assert!(rep.local_lipschitz.violated);
    }

    #[test]
    fn assumptions_khasminskii_constant_depends_on_p() {
        // K1 = 1 + 4(2p - 1)^2 holds for every p; K1 = 5 fails at p = 3.
        let sys = builtin_model("paper-example").unwrap();
        let c = CandidateConstants {
            k1: 1.0 + 4.0 * 25.0,
            k2: 20.0,
            r: 4.0,
            alpha3: None,
        };
        assert!(!check_assumptions(&sys, c, 3.0, 5000, 9, DEFAULT_BOX).unwrap().khasminskii.violated);
        let c = CandidateConstants { k1: 5.0, ..c };
        assert!(check_assumptions(&sys, c, 3.0, 5000, 9, DEFAULT_BOX).unwrap().khasminskii.violated);
    }

    #[test]
    fn assumptions_zero_model() {
        let sys = zero_model(2, 2);
        let c = CandidateConstants {
            k1: 1.0,
            k2: 1.0,
            r: 1.0,
            alpha3: None,
        };
        let rep = check_assumptions(&sys, c, 1.0, 500, 1, DEFAULT_BOX).unwrap();
        assert!(!rep.any_violated());
        assert_eq!(rep.local_lipschitz.max_lhs_over_rhs, 0.0);
        assert_eq!(rep.khasminskii.max_lhs_over_rhs, 0.0);
        assert_eq!(rep.derivative_growth.max_lhs_over_rhs, 0.0);
    }

    #[test]
    fn builtin_values() {
        let sys = builtin_model("paper-example").unwrap();
        assert_eq!(sys.drift(&[1.0]).unwrap().0, vec![0.0]);
        assert_eq!(sys.diffusion(&[2.0], 0).unwrap().0, vec![4.0]);
        assert_eq!(sys.initial_state(), &[1.0]);
        assert_eq!((sys.state_dim(), sys.noise_dim()), (1, 1));

        let err = builtin_model("heston").unwrap_err().to_string();
        assert!(err.contains("paper-example") && err.contains("gbm"));
        let bad = ModelParams::from([("sigma".to_string(), 1.0)]);
        assert!(builtin_model_with("paper-example", &bad).is_err());
    }
}
