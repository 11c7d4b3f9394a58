//! The activation-maximization driver.
//!
//! For a target unit (layer l, channel c) the objective is
//!
//!   channel_sum(a_l(x), c) / (rho_l^2 * amax_{l,c})
//!     - sum over streams of (lambda_b * N_B + lambda_tv * R_TV)
//!
//! maximized over both inputs by iterated ascent: random spatial jitter of
//! the inputs (offsets drawn in [0, layer stride)), one shared forward pass,
//! reverse accumulation to both streams, analytic regularizer gradients,
//! un-jitter of the total gradient so the moment buffers stay aligned with
//! input coordinates, an ADAM or plain step, and radial projection of every
//! position's channel vector back onto the allowed ball. The step size is
//! cut to a third at floor(N/2) and floor(3N/4); the run stops early once
//! the windowed-mean objective moves by less than a relative tolerance over
//! one window. Everything is deterministic given the seed.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::network::{CalibrationTable, NetworkGraph, UnitRef};
use crate::regularizers::{
    r_b_gradient, r_b_value, r_tv_gradient, r_tv_value, RegularizerConfig,
};
use crate::tensor::SpatiotemporalTensor;

/// Everything that determines one maximization run.
#[derive(Debug, Clone, PartialEq)]
pub struct MaximizationConfig {
    pub unit: UnitRef,
    pub reg_app: RegularizerConfig,
    pub reg_mot: RegularizerConfig,
    /// Ascent iterations (upper bound when convergence stops the run early).
    pub iterations: usize,
    /// Initial step size; decayed by 1/3 at floor(N/2) and floor(3N/4).
    pub eta0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Random spatial shift of the inputs each iteration.
    pub jitter: bool,
    /// Jitter offset range; `None` derives it from the target layer stride.
    pub jitter_range: Option<usize>,
    /// Use raw gradient steps instead of ADAM (fixed eta0, no decay).
    pub plain_ascent: bool,
    pub seed: u64,
    /// Standard deviation of the Gaussian noise init.
    pub init_scale: f64,
    /// Convergence window length w.
    pub window: usize,
    /// Relative tolerance on the windowed-mean objective change.
    pub tol_rel: f64,
}

impl MaximizationConfig {
    /// Defaults for a network with the given input size: 400 iterations,
    /// eta0 = 0.05 B, init scale B/10, ADAM(0.9, 0.999, 1e-8), jitter on,
    /// window 25 at relative tolerance 1e-4.
    pub fn new(unit: UnitRef, input_height: usize, input_width: usize) -> Self {
        let reg_app = RegularizerConfig::appearance_defaults(input_height, input_width);
        let reg_mot = RegularizerConfig::motion_defaults(input_height, input_width);
        let eta0 = 0.05 * reg_app.bound;
        let init_scale = reg_app.bound / 10.0;
        Self {
            unit,
            reg_app,
            reg_mot,
            iterations: 400,
            eta0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            jitter: true,
            jitter_range: None,
            plain_ascent: false,
            seed: 0,
            init_scale,
            window: 25,
            tol_rel: 1e-4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.reg_app.validate()?;
        self.reg_mot.validate()?;
        if self.window == 0 {
            return Err(Error::config("window must be >= 1".to_string()));
        }
        if self.iterations < self.window {
            return Err(Error::config(format!(
                "iterations ({}) must be >= window ({})",
                self.iterations, self.window
            )));
        }
        if !(self.eta0 > 0.0) || !self.eta0.is_finite() {
            return Err(Error::config(format!("eta0 must be > 0, got {}", self.eta0)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config(format!(
                "ADAM betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if !(self.init_scale >= 0.0) || !self.init_scale.is_finite() {
            return Err(Error::config(format!(
                "init_scale must be >= 0, got {}",
                self.init_scale
            )));
        }
        if !(self.tol_rel >= 0.0) {
            return Err(Error::config(format!(
                "tol_rel must be >= 0, got {}",
                self.tol_rel
            )));
        }
        if self.jitter_range == Some(0) {
            return Err(Error::config("jitter_range must be >= 1".to_string()));
        }
        Ok(())
    }

    /// Full parameter dump as `key=value` text; what run bundles echo.
    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        kv.set("unit", &self.unit);
        kv.set("seed", self.seed);
        kv.set("iterations", self.iterations);
        kv.set("eta0", self.eta0);
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("epsilon", self.epsilon);
        kv.set("jitter", self.jitter);
        match self.jitter_range {
            Some(n) => kv.set("jitter_range", n),
            None => kv.set("jitter_range", "auto"),
        }
        kv.set("plain_ascent", self.plain_ascent);
        kv.set("init_scale", self.init_scale);
        kv.set("window", self.window);
        kv.set("tol_rel", self.tol_rel);
        kv.set("reg.B", self.reg_app.bound);
        kv.set("reg.alpha", self.reg_app.alpha);
        kv.set("reg.kappa", self.reg_mot.kappa);
        kv.set("reg.chi", self.reg_mot.chi);
        kv.set("reg.lambda_b", self.reg_app.lambda_b);
        kv.set("reg.lambda_tv_app", self.reg_app.lambda_tv);
        kv.set("reg.lambda_tv_mot", self.reg_mot.lambda_tv);
        kv.set("reg_app.kappa", self.reg_app.kappa);
        kv.set("reg_app.chi", self.reg_app.chi);
        kv.set("reg_mot.B", self.reg_mot.bound);
        kv.set("reg_mot.alpha", self.reg_mot.alpha);
        kv.set("reg_mot.lambda_b", self.reg_mot.lambda_b);
        kv
    }
}

/// Decomposed objective value at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub value: f64,
    pub activation_term: f64,
    pub reg_term: f64,
}

fn regularizer_term(x: &SpatiotemporalTensor, cfg: &RegularizerConfig) -> f64 {
    let mut term = 0.0;
    if cfg.lambda_b > 0.0 {
        term += cfg.lambda_b * r_b_value(x, cfg);
    }
    if cfg.lambda_tv > 0.0 {
        term += cfg.lambda_tv * r_tv_value(x, cfg.kappa, cfg.chi);
    }
    term
}

/// Evaluates the maximization objective at the given inputs:
/// `value = activation_term - reg_term`.
pub fn objective(
    net: &NetworkGraph,
    table: &CalibrationTable,
    x_app: &SpatiotemporalTensor,
    x_mot: &SpatiotemporalTensor,
    cfg: &MaximizationConfig,
) -> Result<ObjectiveValue> {
    let amax = table.require(&cfg.unit)?;
    let rho = net.receptive_field(&cfg.unit.layer)? as f64;
    let acts = net.forward(x_app, x_mot)?;
    let act_sum = acts[&cfg.unit.layer].channel_sum(cfg.unit.channel)?;
    let activation_term = act_sum / (rho * rho * amax);
    let reg_term = regularizer_term(x_app, &cfg.reg_app) + regularizer_term(x_mot, &cfg.reg_mot);
    Ok(ObjectiveValue {
        value: activation_term - reg_term,
        activation_term,
        reg_term,
    })
}

/// Outcome of one maximization run.
#[derive(Debug, Clone, PartialEq)]
pub struct MaximizationResult {
    pub x_app: SpatiotemporalTensor,
    pub x_mot: SpatiotemporalTensor,
    pub objective_trace: Vec<f64>,
    pub activation_trace: Vec<f64>,
    pub reg_trace: Vec<f64>,
    pub eta_trace: Vec<f64>,
    pub iterations_run: usize,
    pub converged: bool,
    pub unit: UnitRef,
    pub config: MaximizationConfig,
}

impl MaximizationResult {
    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().expect("at least one iteration")
    }

    /// Writes the on-disk bundle: `x_app.stt`, `x_mot.stt`, `trace.csv`
    /// (iteration, objective, activation_term, reg_term, eta) and the full
    /// echoed configuration as `config.kv`.
    pub fn write_bundle(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        self.x_app.write_stt(dir.join("x_app.stt"))?;
        self.x_mot.write_stt(dir.join("x_mot.stt"))?;

        let mut csv = String::from("iteration,objective,activation_term,reg_term,eta\n");
        for i in 0..self.iterations_run {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                i + 1,
                self.objective_trace[i],
                self.activation_trace[i],
                self.reg_trace[i],
                self.eta_trace[i]
            ));
        }
        let trace_path = dir.join("trace.csv");
        std::fs::write(&trace_path, csv)
            .map_err(|e| Error::io(trace_path.display().to_string(), e))?;

        let mut kv = self.config.to_kv();
        kv.set("result.iterations_run", self.iterations_run);
        kv.set("result.converged", self.converged);
        kv.set("result.final_objective", self.final_objective());
        kv.write(dir.join("config.kv"))
    }
}

fn gaussian_tensor(
    h: usize,
    w: usize,
    t: usize,
    c: usize,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SpatiotemporalTensor> {
    let normal = Normal::new(0.0, scale.max(0.0))
        .map_err(|_| Error::config(format!("bad init scale {scale}")))?;
    SpatiotemporalTensor::from_vec(h, w, t, c, (0..h * w * t * c).map(|_| normal.sample(rng)).collect())
}

/// Rescales any position whose channel vector exceeds the radius back onto
/// the sphere.
fn project_onto_ball(x: &mut SpatiotemporalTensor, bound: f64) {
    let c = x.channels();
    for chunk in x.data_mut().chunks_exact_mut(c) {
        let sq: f64 = chunk.iter().map(|v| v * v).sum();
        if sq > bound * bound {
            let scale = bound / sq.sqrt();
            for v in chunk {
                *v *= scale;
            }
        }
    }
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    fn step(
        &mut self,
        x: &mut SpatiotemporalTensor,
        grad: &SpatiotemporalTensor,
        eta: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        t: usize,
    ) {
        let bc1 = 1.0 - beta1.powi(t as i32);
        let bc2 = 1.0 - beta2.powi(t as i32);
        for ((x, g), (m, v)) in x
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *x += eta * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
}

/// Gradient of the per-stream objective contribution at the (shifted) input.
fn stream_gradient(
    raw: SpatiotemporalTensor,
    x_shifted: &SpatiotemporalTensor,
    activation_scale: f64,
    cfg: &RegularizerConfig,
) -> Result<SpatiotemporalTensor> {
    let mut g = raw.scaled(activation_scale);
    if cfg.lambda_b > 0.0 {
        let gb = r_b_gradient(x_shifted, cfg)?;
        g.add_scaled(&gb, -cfg.lambda_b)?;
    }
    if cfg.lambda_tv > 0.0 {
        let gtv = r_tv_gradient(x_shifted, cfg.kappa, cfg.chi);
        g.add_scaled(&gtv, -cfg.lambda_tv)?;
    }
    Ok(g)
}

/// Runs one maximization job. Deterministic given the config seed.
pub fn maximize(
    net: &NetworkGraph,
    table: &CalibrationTable,
    cfg: &MaximizationConfig,
) -> Result<MaximizationResult> {
    cfg.validate()?;
    let amax = table.require(&cfg.unit)?;
    let rho = net.receptive_field(&cfg.unit.layer)? as f64;
    let stride = net.layer_stride(&cfg.unit.layer)?;
    let jitter_span = cfg.jitter_range.unwrap_or(stride).max(1);
    let activation_scale = 1.0 / (rho * rho * amax);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w, _, _) = net.appearance_shape();
    let frames = net.frames();
    let mut x_app = gaussian_tensor(h, w, 1, 3, cfg.init_scale, &mut rng)?;
    let mut x_mot = gaussian_tensor(h, w, frames, 2, cfg.init_scale, &mut rng)?;

    let mut adam_app = AdamState::new(x_app.len());
    let mut adam_mot = AdamState::new(x_mot.len());

    let mut objective_trace = Vec::with_capacity(cfg.iterations);
    let mut activation_trace = Vec::with_capacity(cfg.iterations);
    let mut reg_trace = Vec::with_capacity(cfg.iterations);
    let mut eta_trace = Vec::with_capacity(cfg.iterations);

    let mut eta = cfg.eta0;
    let mut converged = false;

    for iter in 1..=cfg.iterations {
        if !cfg.plain_ascent {
            if iter == cfg.iterations / 2 {
                eta /= 3.0;
            }
            if iter == (3 * cfg.iterations) / 4 {
                eta /= 3.0;
            }
        }

        let (dy, dx) = if cfg.jitter && jitter_span > 1 {
            (
                rng.gen_range(0..jitter_span) as i64,
                rng.gen_range(0..jitter_span) as i64,
            )
        } else {
            (0, 0)
        };
        let xs_app = x_app.circular_shift(dy, dx);
        let xs_mot = x_mot.circular_shift(dy, dx);

        let (acts, g_app_raw, g_mot_raw) = net.forward_backward(&cfg.unit, &xs_app, &xs_mot)?;
        let act_sum = acts[&cfg.unit.layer].channel_sum(cfg.unit.channel)?;
        let activation_term = act_sum * activation_scale;
        let reg_term =
            regularizer_term(&xs_app, &cfg.reg_app) + regularizer_term(&xs_mot, &cfg.reg_mot);
        let value = activation_term - reg_term;

        objective_trace.push(value);
        activation_trace.push(activation_term);
        reg_trace.push(reg_term);
        eta_trace.push(eta);

        if !value.is_finite() {
            return Err(Error::NonFiniteObjective {
                iteration: iter,
                objective_trace,
                activation_trace,
            });
        }

        let g_app = stream_gradient(g_app_raw, &xs_app, activation_scale, &cfg.reg_app)?
            .circular_shift(-dy, -dx);
        let g_mot = stream_gradient(g_mot_raw, &xs_mot, activation_scale, &cfg.reg_mot)?
            .circular_shift(-dy, -dx);

        if cfg.plain_ascent {
            x_app.add_scaled(&g_app, eta)?;
            x_mot.add_scaled(&g_mot, eta)?;
        } else {
            adam_app.step(&mut x_app, &g_app, eta, cfg.beta1, cfg.beta2, cfg.epsilon, iter);
            adam_mot.step(&mut x_mot, &g_mot, eta, cfg.beta1, cfg.beta2, cfg.epsilon, iter);
        }

        project_onto_ball(&mut x_app, cfg.reg_app.bound);
        project_onto_ball(&mut x_mot, cfg.reg_mot.bound);

        if iter >= 2 * cfg.window {
            let w = cfg.window;
            let recent: f64 = objective_trace[iter - w..iter].iter().sum::<f64>() / w as f64;
            let previous: f64 =
                objective_trace[iter - 2 * w..iter - w].iter().sum::<f64>() / w as f64;
            let rel = (recent - previous).abs() / previous.abs().max(1e-12);
            if rel < cfg.tol_rel {
                converged = true;
                break;
            }
        }
    }

    let iterations_run = objective_trace.len();
    Ok(MaximizationResult {
        x_app,
        x_mot,
        objective_trace,
        activation_trace,
        reg_trace,
        eta_trace,
        iterations_run,
        converged,
        unit: cfg.unit.clone(),
        config: cfg.clone(),
    })
}

/// Runs a batch of jobs against one shared network and calibration table,
/// spreading independent jobs over up to `workers` threads. Results come
/// back in job order; a failing job is recorded in its slot without
/// aborting the rest. Scheduling never affects per-job determinism because
/// each job owns its RNG.
pub fn run_batch(
    net: &NetworkGraph,
    table: &CalibrationTable,
    jobs: &[MaximizationConfig],
    workers: usize,
) -> Vec<Result<MaximizationResult>> {
    if jobs.is_empty() {
        return Vec::new();
    }
    let workers = workers.max(1).min(jobs.len());
    if workers == 1 {
        return jobs.iter().map(|job| maximize(net, table, job)).collect();
    }
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<MaximizationResult>>> = Vec::new();
    slots.resize_with(jobs.len(), || None);
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                let next = &next;
                scope.spawn(move || {
                    let mut done = Vec::new();
                    loop {
                        let idx = next.fetch_add(1, Ordering::Relaxed);
                        if idx >= jobs.len() {
                            break;
                        }
                        done.push((idx, maximize(net, table, &jobs[idx])));
                    }
                    done
                })
            })
            .collect();
        for handle in handles {
            for (idx, result) in handle.join().expect("worker panicked") {
                slots[idx] = Some(result);
            }
        }
    });
    slots.into_iter().map(|slot| slot.expect("job ran")).collect()
}
