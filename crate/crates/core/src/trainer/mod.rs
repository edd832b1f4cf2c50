//! Stochastic SC-PEIRA: minibatch feature statistics tracked by EMA buffers,
//! a frozen ridge predictor built from the buffers, and momentum SGD on the
//! encoder parameters.

mod mlp;
mod onehot;

pub use mlp::{mlp_backprop_check, Mlp, MlpEncoder};
pub use onehot::OneHotEncoder;

use crate::cca::{exact_cca, principal_angles, CcaDecomposition};
use crate::diagnostics::{effective_rank_of, min_active_alignment, MetricsLog, MetricsRow};
use crate::distributions::{sample, JointTable, SamplePairs};
use crate::equilibria::r_max;
use crate::error::{LabError, Result};
use crate::matstack::{sym_eig, Mat};
use crate::objectives::{check_lambda, optimal_predictor, peira_objective, EncoderPair, Moments, Predictor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Standard deviation of the entries of a freshly initialized one-hot table.
pub const ONEHOT_INIT_SCALE: f64 = 0.1;
/// Relative eigenvalue floor defining the active modes of `Σ` in the logs.
pub const ACTIVE_MODE_TOL: f64 = 1e-6;
/// Cap on the default size of the pre-sampled training set.
pub const MAX_DEFAULT_SAMPLES: usize = 1 << 20;

/// EMA-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Onehot,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub k: usize,
    pub lambda: f64,
    pub batch_size: usize,
    pub eta_init: f64,
    pub eta_min: f64,
    pub steps: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub schedule: Schedule,
    pub encoder: EncoderKind,
    /// Hidden-layer widths of the MLP encoder.
    #[serde(default)]
    pub mlp_widths: Vec<usize>,
    #[serde(default)]
    pub shared_encoder: bool,
    /// Global-norm gradient clip; off when `None`.
    #[serde(default)]
    pub clip: Option<f64>,
    pub seed: u64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Size of the pre-sampled training set; defaults to
    /// `min(batch_size · steps, MAX_DEFAULT_SAMPLES)`.
    #[serde(default)]
    pub samples: Option<usize>,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_log_every() -> usize {
    50
}

impl TrainerConfig {
    /// One-hot encoders, cosine EMA schedule from 1 to 0.05, momentum 0.9.
    pub fn new(k: usize, lambda: f64, batch_size: usize, steps: usize, lr: f64, seed: u64) -> Self {
        TrainerConfig {
            k,
            lambda,
            batch_size,
            eta_init: 1.0,
            eta_min: 0.05,
            steps,
            lr,
            momentum: default_momentum(),
            schedule: Schedule::Cosine,
            encoder: EncoderKind::Onehot,
            mlp_widths: Vec::new(),
            shared_encoder: false,
            clip: None,
            seed,
            log_every: default_log_every(),
            samples: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        let bad = |msg: &str| Err(LabError::domain(msg.to_string()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.eta_min > 0.0 && self.eta_min <= self.eta_init && self.eta_init <= 1.0) {
            return bad("EMA rates must satisfy 0 < eta_min <= eta_init <= 1");
        }
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive and finite");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if let Some(c) = self.clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad("clip must be positive and finite");
            }
        }
        if self.log_every == 0 {
            return bad("log_every must be at least 1");
        }
        if self.encoder == EncoderKind::Mlp && self.mlp_widths.contains(&0) {
            return bad("mlp_widths must be positive");
        }
        if self.sample_count() < self.batch_size {
            return bad("samples must be at least batch_size");
        }
        Ok(())
    }

    pub fn sample_count(&self) -> usize {
        self.samples
            .unwrap_or_else(|| self.batch_size.saturating_mul(self.steps).min(MAX_DEFAULT_SAMPLES))
    }
}

/// EMA rate at `step`: constant `η_init`, or cosine from `η_init` to `η_min`.
pub fn ema_rate(step: usize, cfg: &TrainerConfig) -> f64 {
    match cfg.schedule {
        Schedule::Constant => cfg.eta_init,
        Schedule::Cosine => {
            let t = step as f64 / cfg.steps as f64;
            cfg.eta_min + (cfg.eta_init - cfg.eta_min) * 0.5 * (1.0 + (PI * t).cos())
        }
    }
}

/// Running estimates of `Σ` and `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaBuffers {
    pub sigma: Mat<f64>,
    pub noise: Mat<f64>,
    pub initialized: bool,
}

impl EmaBuffers {
    pub fn new(k: usize) -> Self {
        EmaBuffers {
            sigma: Mat::zeros(k, k),
            noise: Mat::zeros(k, k),
            initialized: false,
        }
    }

    /// `B ← (1−η)B + η·batch`; the first update copies the batch (`η = 1`).
    /// Returns the rate used.
    pub fn update(&mut self, batch: &Moments<f64>, eta: f64) -> f64 {
        let eta = if self.initialized { eta } else { 1.0 };
        self.sigma = self.sigma.scale(1.0 - eta).axpy(eta, &batch.sigma).symmetrize();
        self.noise = self.noise.scale(1.0 - eta).axpy(eta, &batch.noise).symmetrize();
        self.initialized = true;
        eta
    }

    pub fn moments(&self) -> Moments<f64> {
        Moments {
            sigma: self.sigma.clone(),
            noise: self.noise.clone(),
        }
    }
}

/// A parametric map from discrete states to `k`-dimensional features.
pub trait Encoder: Clone {
    fn k(&self) -> usize;
    /// Number of discrete input states.
    fn domain(&self) -> usize;
    /// Features of `states` as a `k × B` matrix.
    fn forward(&self, states: &[usize]) -> Mat<f64>;
    /// Parameter gradient of `Σ_b ⟨grad[:, b], f(states[b])⟩`.
    fn backward(&self, states: &[usize], grad: &Mat<f64>) -> Vec<f64>;
    fn num_params(&self) -> usize;
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, p: &[f64]);

    /// Features of every state, `k × domain`.
    fn table(&self) -> Mat<f64> {
        self.forward(&(0..self.domain()).collect::<Vec<_>>())
    }
}

/// Either encoder family, chosen at run time.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyEncoder {
    OneHot(OneHotEncoder),
    Mlp(MlpEncoder),
}

macro_rules! dispatch {
    ($self:ident, $e:ident => $body:expr) => {
        match $self {
            AnyEncoder::OneHot($e) => $body,
            AnyEncoder::Mlp($e) => $body,
        }
    };
}

impl Encoder for AnyEncoder {
    fn k(&self) -> usize {
        dispatch!(self, e => e.k())
    }
    fn domain(&self) -> usize {
        dispatch!(self, e => e.domain())
    }
    fn forward(&self, states: &[usize]) -> Mat<f64> {
        dispatch!(self, e => e.forward(states))
    }
    fn backward(&self, states: &[usize], grad: &Mat<f64>) -> Vec<f64> {
        dispatch!(self, e => e.backward(states, grad))
    }
    fn num_params(&self) -> usize {
        dispatch!(self, e => e.num_params())
    }
    fn params(&self) -> Vec<f64> {
        dispatch!(self, e => e.params())
    }
    fn set_params(&mut self, p: &[f64]) {
        dispatch!(self, e => e.set_params(p))
    }
}

/// The two view encoders, or one encoder shared by both views.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSet<E> {
    pub x: E,
    pub y: Option<E>,
}

impl<E: Encoder> EncoderSet<E> {
    pub fn separate(x: E, y: E) -> Result<Self> {
        if x.k() != y.k() {
            return Err(LabError::dim("view encoders must share the feature dimension"));
        }
        Ok(EncoderSet { x, y: Some(y) })
    }

    pub fn shared(e: E) -> Self {
        EncoderSet { x: e, y: None }
    }

    pub fn is_shared(&self) -> bool {
        self.y.is_none()
    }

    pub fn k(&self) -> usize {
        self.x.k()
    }

    pub fn y(&self) -> &E {
        self.y.as_ref().unwrap_or(&self.x)
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.x.params();
        if let Some(y) = &self.y {
            p.extend(y.params());
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let nx = self.x.num_params();
        self.x.set_params(&p[..nx]);
        if let Some(y) = &mut self.y {
            y.set_params(&p[nx..]);
        }
    }

    /// Tabulated encoders on the full domains.
    pub fn population(&self) -> EncoderPair<f64> {
        EncoderPair {
            u: self.x.table(),
            v: self.y().table(),
        }
    }
}

/// Index pairs with weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub xs: Vec<usize>,
    pub ys: Vec<usize>,
    pub weights: Vec<f64>,
}

impl Batch {
    pub fn uniform(xs: Vec<usize>, ys: Vec<usize>) -> Self {
        let w = 1.0 / xs.len() as f64;
        let weights = vec![w; xs.len()];
        Batch { xs, ys, weights }
    }

    /// Every cell of the table weighted by its probability.
    pub fn population(table: &JointTable<f64>) -> Self {
        let (mut xs, mut ys, mut weights) = (Vec::new(), Vec::new(), Vec::new());
        for x in 0..table.nx() {
            for y in 0..table.ny() {
                xs.push(x);
                ys.push(y);
                weights.push(table.prob(x, y));
            }
        }
        Batch { xs, ys, weights }
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }
}

/// Encoders, statistics buffers and optimizer velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<E> {
    pub encoders: EncoderSet<E>,
    pub buffers: EmaBuffers,
    pub velocity: Vec<f64>,
    pub step: usize,
}

impl<E: Encoder> TrainState<E> {
    pub fn new(encoders: EncoderSet<E>) -> Self {
        let k = encoders.k();
        let n = encoders.params().len();
        TrainState {
            encoders,
            buffers: EmaBuffers::new(k),
            velocity: vec![0.0; n],
            step: 0,
        }
    }
}

/// Quantities produced by one update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub eta: f64,
    pub predictor: Predictor<f64>,
    pub grad_norm: f64,
}

/// `Σ_b w_b a_b c_bᵀ`.
fn weighted_outer(a: &Mat<f64>, c: &Mat<f64>, w: &[f64]) -> Mat<f64> {
    let aw = Mat::from_fn(a.rows(), a.cols(), |i, b| a[(i, b)] * w[b]);
    &aw * &c.transpose()
}

/// One SC-PEIRA update: batch statistics into the buffers, frozen predictor
/// from the buffers, gradient of the empirical auxiliary loss, clip and
/// momentum step.
pub fn sc_peira_step<E: Encoder>(state: &mut TrainState<E>, batch: &Batch, cfg: &TrainerConfig) -> Result<StepReport> {
    if batch.is_empty() || batch.ys.len() != batch.len() || batch.weights.len() != batch.len() {
        return Err(LabError::dim("batch index and weight lists must be nonempty and of equal length"));
    }
    let lambda = cfg.lambda;
    let enc = &state.encoders;
    let fx = enc.x.forward(&batch.xs);
    let fy = enc.y().forward(&batch.ys);
    let cross = weighted_outer(&fx, &fy, &batch.weights);
    let stats = Moments {
        sigma: &cross + &cross.transpose(),
        noise: &weighted_outer(&fx, &fx, &batch.weights) + &weighted_outer(&fy, &fy, &batch.weights),
    };
    if !(stats.sigma.is_finite() && stats.noise.is_finite()) {
        return Err(LabError::TrainingDiverged {
            step: state.step,
            detail: "non-finite batch feature statistics".into(),
        });
    }
    let eta = state.buffers.update(&stats, ema_rate(state.step, cfg));
    let predictor = optimal_predictor(&state.buffers.moments(), lambda)?;

    let qp = &predictor.q * &predictor.p;
    let a = (&qp + &qp.transpose()).scale(0.5);
    let q = predictor.q.symmetrize();
    let field = |own: &Mat<f64>, other: &Mat<f64>| {
        let g = (&a * own).axpy(-1.0, &(&q * other)).axpy(lambda, own);
        Mat::from_fn(g.rows(), g.cols(), |r, b| g[(r, b)] * batch.weights[b])
    };
    let (gu, gv) = (field(&fx, &fy), field(&fy, &fx));
    let mut grad = match &enc.y {
        None => {
            let mut g = enc.x.backward(&batch.xs, &gu);
            g.iter_mut().zip(enc.x.backward(&batch.ys, &gv)).for_each(|(a, b)| *a += b);
            g
        }
        Some(y) => {
            let mut g = enc.x.backward(&batch.xs, &gu);
            g.extend(y.backward(&batch.ys, &gv));
            g
        }
    };
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !grad_norm.is_finite() {
        return Err(LabError::TrainingDiverged {
            step: state.step,
            detail: format!(
                "non-finite gradient; buffer traces Tr(Sigma) = {:e}, Tr(N) = {:e}",
                state.buffers.sigma.trace(),
                state.buffers.noise.trace()
            ),
        });
    }
    if let Some(c) = cfg.clip {
        if grad_norm > c {
            grad.iter_mut().for_each(|g| *g *= c / grad_norm);
        }
    }
    let mut params = state.encoders.params();
    for ((p, v), g) in params.iter_mut().zip(state.velocity.iter_mut()).zip(&grad) {
        *v = cfg.momentum * *v + g;
        *p -= cfg.lr * *v;
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(LabError::TrainingDiverged {
            step: state.step,
            detail: format!("non-finite parameters after update (gradient norm {grad_norm:e})"),
        });
    }
    state.encoders.set_params(&params);
    state.step += 1;
    Ok(StepReport { eta, predictor, grad_norm })
}

/// Population quantities used for logging when the generating table is known.
struct Oracle<'a> {
    table: &'a JointTable<f64>,
    cca: CcaDecomposition<f64>,
    r: usize,
}

fn metrics_row<E: Encoder>(
    state: &TrainState<E>,
    report: &StepReport,
    cfg: &TrainerConfig,
    oracle: Option<&Oracle>,
) -> Result<MetricsRow> {
    let buffered = state.buffers.moments();
    let objective_buffered =
        -0.5 * report.predictor.p.trace() + 0.5 * cfg.lambda * buffered.noise.trace();
    let sv: Vec<f64> = sym_eig(&buffered.noise)?.values.iter().map(|v| v.max(0.0).sqrt()).collect();
    let erank = effective_rank_of(&sv).unwrap_or(0.0);
    let min_alignment = min_active_alignment(&buffered, ACTIVE_MODE_TOL)?;
    let (objective_population, principal_angle_max) = match oracle {
        Some(o) => {
            let pair = state.encoders.population();
            let obj = peira_objective(&pair, o.table, cfg.lambda)?;
            (Some(obj), Some(principal_angles(&pair, &o.cca, o.r)?.max()))
        }
        None => (None, None),
    };
    Ok(MetricsRow {
        step: state.step,
        eta: report.eta,
        objective_buffered,
        objective_population,
        erank,
        min_alignment,
        principal_angle_max,
    })
}

/// Trained encoders, final buffers and the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<E> {
    pub state: TrainState<E>,
    pub log: MetricsLog,
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream)
}

/// Fresh encoders of the configured family.
pub fn init_encoders(cfg: &TrainerConfig, nx: usize, ny: usize) -> Result<EncoderSet<AnyEncoder>> {
    let make = |n: usize, stream: u64| -> Result<AnyEncoder> {
        let seed = stream_seed(cfg.seed, stream);
        Ok(match cfg.encoder {
            EncoderKind::Onehot => AnyEncoder::OneHot(OneHotEncoder::random(cfg.k, n, ONEHOT_INIT_SCALE, seed)?),
            EncoderKind::Mlp => AnyEncoder::Mlp(MlpEncoder::random(n, &cfg.mlp_widths, cfg.k, seed)?),
        })
    };
    if cfg.shared_encoder {
        if nx != ny {
            return Err(LabError::domain(format!(
                "a shared encoder needs identical view domains, got {nx} and {ny} states"
            )));
        }
        Ok(EncoderSet::shared(make(nx, 1)?))
    } else {
        EncoderSet::separate(make(nx, 1)?, make(ny, 2)?)
    }
}

/// Runs `cfg.steps` updates over epoch-wise reshuffles of `data`, dropping
/// each epoch's last partial batch. Population metrics are logged when
/// `oracle` is given.
pub fn train_with<E: Encoder>(
    encoders: EncoderSet<E>,
    data: &SamplePairs,
    cfg: &TrainerConfig,
    oracle: Option<&JointTable<f64>>,
) -> Result<TrainOutcome<E>> {
    cfg.validate()?;
    if encoders.k() != cfg.k {
        return Err(LabError::dim("encoder feature dimension differs from k"));
    }
    if data.len() < cfg.batch_size {
        return Err(LabError::domain("fewer samples than one batch"));
    }
    let oracle = match oracle {
        Some(table) => {
            let cca = exact_cca(table)?;
            let r = r_max(&cca.c, cfg.lambda, cfg.k);
            Some(Oracle { table, cca, r })
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 3));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let mut state = TrainState::new(encoders);
    let mut log = MetricsLog::default();
    for step in 0..cfg.steps {
        if cursor + cfg.batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + cfg.batch_size];
        cursor += cfg.batch_size;
        let batch = Batch::uniform(idx.iter().map(|&i| data.xs[i]).collect(), idx.iter().map(|&i| data.ys[i]).collect());
        let report = sc_peira_step(&mut state, &batch, cfg)?;
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            log.rows.push(metrics_row(&state, &report, cfg, oracle.as_ref())?);
        }
    }
    Ok(TrainOutcome { state, log })
}

/// Samples a training set from `table`, initializes encoders and trains with
/// population metrics.
pub fn train(table: &JointTable<f64>, cfg: &TrainerConfig) -> Result<TrainOutcome<AnyEncoder>> {
    cfg.validate()?;
    let encoders = init_encoders(cfg, table.nx(), table.ny())?;
    let data = sample(table, cfg.sample_count(), stream_seed(cfg.seed, 4))?;
    train_with(encoders, &data, cfg, Some(table))
}
