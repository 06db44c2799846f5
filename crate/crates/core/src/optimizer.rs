//! Outer training loops: the Hessian-free iteration (full gradient, one
//! mini-batch curvature operator, Krylov solve, direction selection,
//! Armijo line search, Levenberg-Marquardt damping) in its CG /
//! Bi-CG-STAB / Gauss-Newton / Hybrid variants, plus the mini-batch SGD
//! baseline, with epoch and communication-round accounting on every
//! record.

use std::time::Instant;

use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::krylov::{
    bicgstab, cg_truncated, select_direction, CurvatureKind, CurvatureOperator, CurvatureTag,
};
use crate::linalg::{axpy, dot, Vector};
use crate::model::{self, init_params, NetworkSpec, ParameterVector};
use crate::parallel::{BatchAssignment, ParallelExecutor};

const LAMBDA_MIN: f64 = 1e-8;
const LAMBDA_MAX: f64 = 1e8;
const LAMBDA_BOOST: f64 = 1.5;
const LAMBDA_DROP: f64 = 2.0 / 3.0;

/// Training algorithm selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Sgd,
    HfCg,
    HfBicgstab,
    GnCg,
    Hybrid,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Sgd => "sgd",
            Method::HfCg => "hf_cg",
            Method::HfBicgstab => "hf_bicgstab",
            Method::GnCg => "gn_cg",
            Method::Hybrid => "hybrid",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Method::Sgd),
            "hf_cg" => Ok(Method::HfCg),
            "hf_bicgstab" => Ok(Method::HfBicgstab),
            "gn_cg" => Ok(Method::GnCg),
            "hybrid" => Ok(Method::Hybrid),
            other => Err(Error::InvalidConfig(format!(
                "unknown method '{other}' (expected sgd, hf_cg, hf_bicgstab, gn_cg or hybrid)"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// All knobs of one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub method: Method,
    pub batch_size: usize,
    pub lambda0: f64,
    pub armijo_c: f64,
    pub armijo_shrink: f64,
    pub max_backtracks: usize,
    pub warm_start_decay: f64,
    pub max_cg_iter: usize,
    pub cg_tol: f64,
    pub sgd_learning_rate: f64,
    pub max_outer_iter: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// A config with the documented defaults for everything except the
    /// method and batch size, which have no sensible universal values.
    pub fn new(method: Method, batch_size: usize) -> Self {
        TrainConfig {
            method,
            batch_size,
            lambda0: 1e-2,
            armijo_c: 1e-4,
            armijo_shrink: 0.5,
            max_backtracks: 20,
            warm_start_decay: 0.7,
            max_cg_iter: 5,
            cg_tol: 1e-8,
            sgd_learning_rate: 0.1,
            max_outer_iter: 100,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.lambda0 >= 0.0 && self.lambda0.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda0 must be a finite nonnegative scalar, got {}",
                self.lambda0
            )));
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "armijo_c must lie in (0,1), got {}",
                self.armijo_c
            )));
        }
        if !(self.armijo_shrink > 0.0 && self.armijo_shrink < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "armijo_shrink must lie in (0,1), got {}",
                self.armijo_shrink
            )));
        }
        if self.max_backtracks == 0 {
            return Err(Error::InvalidConfig("max_backtracks must be ≥ 1".into()));
        }
        if !(self.warm_start_decay >= 0.0 && self.warm_start_decay <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "warm_start_decay must lie in [0,1], got {}",
                self.warm_start_decay
            )));
        }
        if self.max_cg_iter == 0 {
            return Err(Error::InvalidConfig("max_cg_iter must be ≥ 1".into()));
        }
        if !(self.cg_tol > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "cg_tol must be positive, got {}",
                self.cg_tol
            )));
        }
        if !(self.sgd_learning_rate > 0.0 && self.sgd_learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "sgd_learning_rate must be a finite positive scalar, got {}",
                self.sgd_learning_rate
            )));
        }
        Ok(())
    }
}

/// Mutable state threaded through outer iterations. The epoch, round and
/// wall-clock tallies ride along so a step function stays a pure
/// state-in/state-out map; `current_loss` caches f(θ) (an accepted
/// line-search trial already evaluated it).
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub theta: ParameterVector,
    pub lambda: f64,
    pub prev_direction: Vector,
    pub iteration: usize,
    pub hybrid_use_gn_next: bool,
    pub current_loss: Option<f64>,
    pub epochs_consumed: f64,
    pub comm_rounds: u64,
    pub wall_ms: f64,
}

impl OptimizerState {
    pub fn new(theta: ParameterVector, lambda0: f64) -> Result<Self> {
        if !(lambda0 >= 0.0 && lambda0.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be a finite nonnegative scalar, got {lambda0}"
            )));
        }
        let dim = theta.len();
        Ok(OptimizerState {
            theta,
            lambda: lambda0,
            prev_direction: Vector::zeros(dim),
            iteration: 0,
            hybrid_use_gn_next: false,
            current_loss: None,
            epochs_consumed: 0.0,
            comm_rounds: 0,
            wall_ms: 0.0,
        })
    }

    /// Fresh state for a run: seeded initial parameters and λ₀ from the
    /// config.
    pub fn fresh(spec: &NetworkSpec, cfg: &TrainConfig) -> Result<Self> {
        OptimizerState::new(init_params(spec, cfg.seed), cfg.lambda0)
    }
}

/// One row of a training log. The tallies are cumulative over the run, so
/// they are nondecreasing across records.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub k: usize,
    pub train_loss: f64,
    pub train_error: f64,
    /// NaN when the run has no test set.
    pub test_error: f64,
    /// The damping value used by this iteration (NaN for SGD).
    pub lambda: f64,
    /// Accepted step length (0 when the line search rejected; the learning
    /// rate for SGD).
    pub alpha: f64,
    pub inner_iterations: usize,
    pub curvature_tag: Option<CurvatureTag>,
    /// Which curvature matrix backed this iteration's operator.
    pub operator_base: Option<CurvatureKind>,
    pub converged: bool,
    pub epochs_consumed: f64,
    pub comm_rounds: u64,
    pub wall_ms: f64,
}

/// Outcome of a backtracking line search.
#[derive(Debug, Clone, Copy)]
pub struct ArmijoOutcome {
    pub alpha: f64,
    pub accepted: bool,
    /// Objective evaluations spent on trial points (f(θ) itself is the
    /// caller's `f0` and is not re-evaluated here).
    pub evals: usize,
    /// Objective value at the accepted point (= f0 when rejected).
    pub f_trial: f64,
}

/// Backtracking Armijo search: starting from α=1 and shrinking
/// geometrically, accepts the first α with f(θ+αδ) ≤ f0 + c·α·gᵀδ.
///
/// `f_at_step(α)` must evaluate the objective at θ+αδ; a non-finite
/// evaluation counts as a failed trial rather than an error, so the search
/// can back off from overflow territory.
pub fn armijo_search<F>(
    mut f_at_step: F,
    f0: f64,
    g: &Vector,
    delta: &Vector,
    cfg: &TrainConfig,
) -> Result<ArmijoOutcome>
where
    F: FnMut(f64) -> Result<f64>,
{
    let gd = dot(g, delta)?;
    if gd >= 0.0 {
        return Err(Error::NonDescentDirection(gd));
    }
    let mut alpha = 1.0;
    let mut evals = 0;
    for _ in 0..cfg.max_backtracks {
        let f = match f_at_step(alpha) {
            Ok(f) => f,
            Err(Error::NonFinite(_)) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        evals += 1;
        if f <= f0 + cfg.armijo_c * alpha * gd {
            return Ok(ArmijoOutcome {
                alpha,
                accepted: true,
                evals,
                f_trial: f,
            });
        }
        alpha *= cfg.armijo_shrink;
    }
    Ok(ArmijoOutcome {
        alpha: 0.0,
        accepted: false,
        evals,
        f_trial: f0,
    })
}

/// Levenberg-Marquardt damping update from the actual-vs-predicted
/// reduction ratio ρ: shrink λ by 2/3 when the model was trustworthy
/// (ρ > 3/4), boost by 3/2 when it was poor (ρ < 1/4) or ρ is non-finite
/// (zero predicted reduction), and clamp to [1e-8, 1e8].
pub fn adjust_damping(lambda: f64, rho: f64) -> f64 {
    let next = if !rho.is_finite() || rho < 0.25 {
        lambda * LAMBDA_BOOST
    } else if rho > 0.75 {
        lambda * LAMBDA_DROP
    } else {
        lambda
    };
    next.clamp(LAMBDA_MIN, LAMBDA_MAX)
}

/// The local quadratic model m(d) = f0 + gᵀd + ½·dᵀ(A d). Costs one
/// operator application.
pub fn quadratic_model(g: &Vector, a: &CurvatureOperator, d: &Vector, f0: f64) -> Result<f64> {
    let ad = a.apply(d)?;
    Ok(f0 + dot(g, d)? + 0.5 * dot(d, &ad)?)
}

/// Where an iteration's curvature operator comes from. The production
/// source is the executor itself (mini-batch HVP/GNVP reduces); tests can
/// substitute synthetic operators to script solver behaviour.
pub trait CurvatureSource {
    fn operator<'a>(
        &'a self,
        kind: CurvatureKind,
        lambda: f64,
        theta: &'a ParameterVector,
        assignment: &'a BatchAssignment,
    ) -> CurvatureOperator<'a>;
}

impl CurvatureSource for ParallelExecutor {
    fn operator<'a>(
        &'a self,
        kind: CurvatureKind,
        lambda: f64,
        theta: &'a ParameterVector,
        assignment: &'a BatchAssignment,
    ) -> CurvatureOperator<'a> {
        let dim = self.spec().num_params();
        CurvatureOperator::new(dim, lambda, kind, move |v: &Vector| match kind {
            CurvatureKind::ExactHessian => self.distributed_hvp(theta, v, assignment),
            CurvatureKind::GaussNewton => self.distributed_gnvp(theta, v, assignment),
        })
    }
}

fn charge_epochs(comm: &mut u64, epochs: &mut f64, rounds: u64, epochs_each: f64) {
    *comm += rounds;
    *epochs += rounds as f64 * epochs_each;
}

/// One outer Hessian-free iteration (see `hf_step_with_operator` for the
/// mechanics); curvature comes from the executor's mini-batch reduces.
pub fn hf_step(
    state: &OptimizerState,
    cfg: &TrainConfig,
    exec: &ParallelExecutor,
    rng: &mut ChaCha8Rng,
) -> Result<(OptimizerState, IterationRecord)> {
    hf_step_with_operator(state, cfg, exec, exec, rng)
}

/// One outer iteration with an explicit curvature source:
///
/// 1. reduce the full gradient g over all shards;
/// 2. draw one mini-batch, fixed for the whole inner solve, and build
///    B = base(θ, batch) + λI, where the base is the exact Hessian
///    (hf_cg, hf_bicgstab), Gauss-Newton (gn_cg), or the hybrid rule's
///    pick;
/// 3. solve B d = −g with the configured Krylov solver, warm-started from
///    η·δ_{k−1} when k > 0;
/// 4. select the best descent direction among the solve's candidates;
/// 5. find α by Armijo backtracking on the full objective;
/// 6. θ ← θ + αδ (unchanged when the search rejects, which boosts λ);
/// 7. adjust λ from the actual-vs-predicted reduction ratio;
/// 8. hybrid only: a negative-curvature tag makes the next iteration use
///    the Gauss-Newton base, and the iteration after reverts.
///
/// Accounting: the gradient reduce and every full-set line-search trial
/// cost 1.0 epoch and 1 round each; every operator application costs b/n
/// epochs and 1 round. The per-record train/test error diagnostics are
/// free, as is the one-off f(θ₀) bootstrap.
pub fn hf_step_with_operator<S: CurvatureSource>(
    state: &OptimizerState,
    cfg: &TrainConfig,
    exec: &ParallelExecutor,
    curvature: &S,
    rng: &mut ChaCha8Rng,
) -> Result<(OptimizerState, IterationRecord)> {
    let start = Instant::now();
    cfg.validate()?;
    if cfg.method == Method::Sgd {
        return Err(Error::InvalidConfig(
            "hf_step does not drive SGD; use sgd_train".into(),
        ));
    }
    let k = state.iteration;
    let n = exec.n() as f64;
    let b_frac = cfg.batch_size as f64 / n;
    let mut epochs = state.epochs_consumed;
    let mut comm = state.comm_rounds;

    let f0 = match state.current_loss {
        Some(f) => f,
        None => exec.full_loss(&state.theta)?,
    };

    // (1) Full gradient.
    let g = exec.distributed_gradient(&state.theta)?;
    charge_epochs(&mut comm, &mut epochs, 1, 1.0);

    if g.norm() == 0.0 {
        // Stationary point: report convergence, leave θ and λ alone.
        let wall_ms = state.wall_ms + start.elapsed().as_secs_f64() * 1e3;
        let record = IterationRecord {
            k,
            train_loss: f0,
            train_error: exec.full_error(&state.theta)?,
            test_error: f64::NAN,
            lambda: state.lambda,
            alpha: 0.0,
            inner_iterations: 0,
            curvature_tag: None,
            operator_base: None,
            converged: true,
            epochs_consumed: epochs,
            comm_rounds: comm,
            wall_ms,
        };
        let mut next = state.clone();
        next.iteration = k + 1;
        next.current_loss = Some(f0);
        next.epochs_consumed = epochs;
        next.comm_rounds = comm;
        next.wall_ms = wall_ms;
        return Ok((next, record));
    }

    // (2) Mini-batch curvature operator.
    let assignment = exec.sample_assignment(cfg.batch_size, rng)?;
    let kind = match cfg.method {
        Method::HfCg | Method::HfBicgstab => CurvatureKind::ExactHessian,
        Method::GnCg => CurvatureKind::GaussNewton,
        Method::Hybrid => {
            if state.hybrid_use_gn_next {
                CurvatureKind::GaussNewton
            } else {
                CurvatureKind::ExactHessian
            }
        }
        Method::Sgd => unreachable!("rejected above"),
    };
    let op = curvature.operator(kind, state.lambda, &state.theta, &assignment);

    // (3) Inner solve of B d = −g.
    let rhs = g.scale(-1.0);
    let x0 = if k > 0 && cfg.warm_start_decay > 0.0 {
        state.prev_direction.scale(cfg.warm_start_decay)
    } else {
        Vector::zeros(g.len())
    };
    let result = match cfg.method {
        Method::HfBicgstab => bicgstab(&op, &rhs, &x0, cfg.max_cg_iter, cfg.cg_tol)?,
        _ => cg_truncated(&op, &rhs, &x0, cfg.max_cg_iter, cfg.cg_tol)?,
    };
    charge_epochs(&mut comm, &mut epochs, result.operator_applications as u64, b_frac);

    // (4) Direction selection over the solve's candidate pool.
    let sel = select_direction(&result, &g, &op)?;
    charge_epochs(&mut comm, &mut epochs, sel.operator_applications as u64, b_frac);
    let delta = sel.direction;
    let gd = dot(&g, &delta)?;

    // (5) Armijo backtracking on the full objective.
    let outcome = armijo_search(
        |alpha| {
            let trial = ParameterVector::from_vector_unchecked(axpy(
                alpha,
                &delta,
                state.theta.theta(),
            )?);
            exec.full_loss(&trial)
        },
        f0,
        &g,
        &delta,
        cfg,
    )?;
    charge_epochs(&mut comm, &mut epochs, outcome.evals as u64, 1.0);

    // (6)–(7) Step and damping.
    let (theta_next, f_next, lambda_next) = if outcome.accepted {
        let theta_next = ParameterVector::from_vector_unchecked(axpy(
            outcome.alpha,
            &delta,
            state.theta.theta(),
        )?);
        // Predicted reduction of the quadratic model, using the curvature
        // value cached during selection (no extra operator application):
        // m(0) − m(αδ) = −(α·gᵀδ + ½α²·δᵀBδ).
        let predicted = -(outcome.alpha * gd
            + 0.5 * outcome.alpha * outcome.alpha * sel.curvature);
        let rho = (f0 - outcome.f_trial) / predicted;
        (
            theta_next,
            outcome.f_trial,
            adjust_damping(state.lambda, rho),
        )
    } else {
        // Rejected: keep θ, recover through stronger damping.
        (
            state.theta.clone(),
            f0,
            (state.lambda * LAMBDA_BOOST).clamp(LAMBDA_MIN, LAMBDA_MAX),
        )
    };

    // (8) Hybrid switching for the next iteration.
    let hybrid_use_gn_next =
        cfg.method == Method::Hybrid && sel.tag == CurvatureTag::NegativeCurvature;

    let train_error = exec.full_error(&theta_next)?;
    let wall_ms = state.wall_ms + start.elapsed().as_secs_f64() * 1e3;
    let record = IterationRecord {
        k,
        train_loss: f_next,
        train_error,
        test_error: f64::NAN,
        lambda: state.lambda,
        alpha: outcome.alpha,
        inner_iterations: result.iterations,
        curvature_tag: Some(sel.tag),
        operator_base: Some(kind),
        converged: false,
        epochs_consumed: epochs,
        comm_rounds: comm,
        wall_ms,
    };
    let next = OptimizerState {
        theta: theta_next,
        lambda: lambda_next,
        prev_direction: delta,
        iteration: k + 1,
        hybrid_use_gn_next,
        current_loss: Some(f_next),
        epochs_consumed: epochs,
        comm_rounds: comm,
        wall_ms,
    };
    Ok((next, record))
}

/// Mini-batch SGD baseline: per update, draw b samples (b/N per worker),
/// reduce the mini-batch gradient and step θ ← θ − lr·g. One record per
/// epoch (⌊n/b⌋ updates); each update costs 2 communication rounds
/// (reduce + broadcast) and b/n epochs.
pub fn sgd_train(
    cfg: &TrainConfig,
    exec: &ParallelExecutor,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<IterationRecord>> {
    sgd_train_inner(cfg, exec, None, rng, &mut |_| {})
}

fn sgd_train_inner(
    cfg: &TrainConfig,
    exec: &ParallelExecutor,
    test_set: Option<&Dataset>,
    rng: &mut ChaCha8Rng,
    on_record: &mut dyn FnMut(&IterationRecord),
) -> Result<Vec<IterationRecord>> {
    cfg.validate()?;
    if cfg.method != Method::Sgd {
        return Err(Error::InvalidConfig(format!(
            "sgd_train got method {}",
            cfg.method
        )));
    }
    let n = exec.n();
    if cfg.batch_size > n {
        return Err(Error::InvalidConfig(format!(
            "batch size {} exceeds dataset size {n}",
            cfg.batch_size
        )));
    }
    let start = Instant::now();
    let spec = exec.spec();
    let mut theta = init_params(spec, cfg.seed);
    let updates_per_epoch = n / cfg.batch_size;
    let b_frac = cfg.batch_size as f64 / n as f64;
    let mut records = Vec::with_capacity(cfg.max_outer_iter);
    let mut epochs = 0.0;
    let mut comm = 0u64;
    for e in 0..cfg.max_outer_iter {
        for _ in 0..updates_per_epoch {
            let assignment = exec.sample_assignment(cfg.batch_size, rng)?;
            let g = exec.minibatch_gradient(&theta, &assignment)?;
            theta = ParameterVector::from_vector_unchecked(axpy(
                -cfg.sgd_learning_rate,
                &g,
                theta.theta(),
            )?);
            epochs += b_frac;
            comm += 2;
        }
        let record = IterationRecord {
            k: e,
            train_loss: exec.full_loss(&theta)?,
            train_error: exec.full_error(&theta)?,
            test_error: match test_set {
                Some(t) => model::classification_error(spec, &theta, &t.inputs, &t.targets)?,
                None => f64::NAN,
            },
            lambda: f64::NAN,
            alpha: cfg.sgd_learning_rate,
            inner_iterations: updates_per_epoch,
            curvature_tag: None,
            operator_base: None,
            converged: false,
            epochs_consumed: epochs,
            comm_rounds: comm,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        on_record(&record);
        records.push(record);
    }
    Ok(records)
}

/// Runs a full training session: validates the config, initialises θ from
/// the seed, dispatches to SGD or the Hessian-free loop, and evaluates the
/// optional test set after every iteration (a free diagnostic). Stops at
/// max_outer_iter or on convergence.
pub fn train(
    cfg: &TrainConfig,
    exec: &ParallelExecutor,
    test_set: Option<&Dataset>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<IterationRecord>> {
    train_with_callback(cfg, exec, test_set, rng, |_| {})
}

/// `train`, invoking `on_record` as each record is produced so callers can
/// flush logs incrementally (records collected before an error are still
/// delivered through the callback).
pub fn train_with_callback<C>(
    cfg: &TrainConfig,
    exec: &ParallelExecutor,
    test_set: Option<&Dataset>,
    rng: &mut ChaCha8Rng,
    mut on_record: C,
) -> Result<Vec<IterationRecord>>
where
    C: FnMut(&IterationRecord),
{
    cfg.validate()?;
    if cfg.method == Method::Sgd {
        return sgd_train_inner(cfg, exec, test_set, rng, &mut on_record);
    }
    if cfg.batch_size > exec.n() {
        return Err(Error::InvalidConfig(format!(
            "batch size {} exceeds dataset size {}",
            cfg.batch_size,
            exec.n()
        )));
    }
    let spec = exec.spec();
    let mut state = OptimizerState::fresh(spec, cfg)?;
    // Bootstrap f(θ₀) once; accepted line-search trials keep the cache
    // warm from here on.
    state.current_loss = Some(exec.full_loss(&state.theta)?);
    let mut records = Vec::with_capacity(cfg.max_outer_iter);
    for _ in 0..cfg.max_outer_iter {
        let (next, mut record) = hf_step(&state, cfg, exec, rng)?;
        if let Some(test) = test_set {
            record.test_error =
                model::classification_error(spec, &next.theta, &test.inputs, &test.targets)?;
        }
        let converged = record.converged;
        on_record(&record);
        records.push(record);
        state = next;
        if converged {
            break;
        }
    }
    Ok(records)
}
