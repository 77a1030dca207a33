//! Soft-token refinement routed through an anchor-interval basis.
//!
//! Each step takes a raw optimizer update of the soft-token variable and
//! replaces it by its ridge-weighted least-squares fit in a blockwise
//! piecewise-affine basis over the anchor intervals. The ridge weight of an
//! interval shrinks as its endpoint anchors' residuals grow, so correction is
//! spent where anchors are still violated.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::scaffold::{
    anchor_loss, build_intervals, AnchorSet, IntervalPartition, Motion, ROOT_JOINT,
};
use crate::tmd::{Codebook, TokenSeq};

/// Continuous token embeddings being refined, with their generated initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTokens {
    u: DMatrix<f64>,
    u0: DMatrix<f64>,
}

impl SoftTokens {
    pub fn new(u0: DMatrix<f64>) -> Result<Self> {
        if u0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("soft tokens"));
        }
        Ok(Self { u: u0.clone(), u0 })
    }

    /// Current value `u`.
    pub fn values(&self) -> &DMatrix<f64> {
        &self.u
    }

    /// Initial value `u⁰`; fixed for the lifetime of the variable.
    pub fn initial(&self) -> &DMatrix<f64> {
        &self.u0
    }

    pub fn tokens(&self) -> usize {
        self.u.nrows()
    }

    pub fn dim(&self) -> usize {
        self.u.ncols()
    }

    /// Same initialization, different current value.
    pub fn with_values(&self, u: DMatrix<f64>) -> Result<Self> {
        if u.shape() != self.u0.shape() {
            return Err(Error::Shape(format!("{:?} vs {:?}", u.shape(), self.u0.shape())));
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("soft tokens"));
        }
        Ok(Self { u, u0: self.u0.clone() })
    }
}

/// `u⁰ = E[z]`: embedding lookup.
pub fn soft_init(z: &TokenSeq, cb: &Codebook) -> Result<SoftTokens> {
    let e = cb.embeddings();
    let mut u = DMatrix::zeros(z.len(), cb.dim());
    for (n, &id) in z.ids().iter().enumerate() {
        if id >= cb.size() {
            return Err(Error::TokenOutOfRange { id, size: cb.size() });
        }
        u.row_mut(n).copy_from(&e.row(id));
    }
    SoftTokens::new(u)
}

/// Differentiable map from soft tokens to motion.
pub trait DecoderModel: Sync {
    fn tokens(&self) -> usize;
    fn token_dim(&self) -> usize;
    fn frames(&self) -> usize;
    fn joints(&self) -> usize;

    fn decode(&self, u: &DMatrix<f64>) -> Result<Motion>;

    /// Vector-Jacobian product of `decode` at `u` with a motion-shaped cotangent.
    fn vjp(&self, u: &DMatrix<f64>, cotangent: &Motion) -> Result<DMatrix<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    #[serde(rename = "gd")]
    GradientDescent,
    HeavyBall { momentum: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub gamma_sm: f64,
    pub gamma_tr: f64,
    pub gamma_feas: f64,
    /// Ridge weight of the routed solve.
    pub lambda: f64,
    /// Root speed limit of the feasibility hinge, meters per frame.
    pub v_max: f64,
    /// Optimizer learning rate η.
    pub step_size: f64,
    pub steps: usize,
    pub optimizer: Optimizer,
    /// Activity tolerance; the anchor family's tolerance when unset.
    pub tolerance: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            gamma_sm: 0.1,
            gamma_tr: 0.01,
            gamma_feas: 0.0,
            lambda: 0.1,
            v_max: 0.05,
            step_size: 0.01,
            steps: 200,
            optimizer: Optimizer::GradientDescent,
            tolerance: None,
        }
    }
}

/// Named step-count presets, `rs100`, `rs200` and `rs500`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Rs100,
    Rs200,
    Rs500,
}

impl Preset {
    pub fn steps(self) -> usize {
        match self {
            Preset::Rs100 => 100,
            Preset::Rs200 => 200,
            Preset::Rs500 => 500,
        }
    }

    pub fn config(self) -> SolverConfig {
        SolverConfig { steps: self.steps(), ..SolverConfig::default() }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gamma_sm", self.gamma_sm),
            ("gamma_tr", self.gamma_tr),
            ("gamma_feas", self.gamma_feas),
            ("lambda", self.lambda),
            ("v_max", self.v_max),
            ("step_size", self.step_size),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Domain(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if let Optimizer::HeavyBall { momentum } = self.optimizer {
            if !(0.0..1.0).contains(&momentum) {
                return Err(Error::Domain(format!("momentum must lie in [0, 1), got {momentum}")));
            }
        }
        if let Some(tol) = self.tolerance {
            if !(tol.is_finite() && tol > 0.0) {
                return Err(Error::Domain(format!("tolerance must be > 0, got {tol}")));
            }
        }
        Ok(())
    }
}

/// Unweighted objective terms and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveParts {
    pub anchor: f64,
    pub smooth: f64,
    pub trust: f64,
    pub feasibility: f64,
    pub total: f64,
}

fn check_decoder(dec: &dyn DecoderModel, u: &SoftTokens, anchors: &AnchorSet) -> Result<()> {
    if (u.tokens(), u.dim()) != (dec.tokens(), dec.token_dim()) {
        return Err(Error::Shape(format!(
            "soft tokens are {}x{}, decoder expects {}x{}",
            u.tokens(),
            u.dim(),
            dec.tokens(),
            dec.token_dim()
        )));
    }
    anchors.family().check_joints(dec.joints())?;
    anchors.check_frames(dec.frames())
}

fn check_lengths(frames: usize, cfg: &SolverConfig) -> Result<()> {
    if cfg.gamma_sm > 0.0 && frames < 3 {
        return Err(Error::Domain(format!("smoothness needs at least 3 frames, got {frames}")));
    }
    if cfg.gamma_feas > 0.0 && frames < 2 {
        return Err(Error::Domain(format!("feasibility needs at least 2 frames, got {frames}")));
    }
    Ok(())
}

/// Mean squared second difference of the controlled trajectory.
pub fn smoothness_loss(motion: &Motion, anchors: &AnchorSet) -> f64 {
    let fam = anchors.family();
    let frames = motion.frames();
    if frames < 3 {
        return 0.0;
    }
    let d = fam.dim();
    let mut total = 0.0;
    for t in 0..frames - 2 {
        let (a, b, c) = (fam.observe_frame(motion, t), fam.observe_frame(motion, t + 1), fam.observe_frame(motion, t + 2));
        total += (0..d).map(|k| (c[k] - 2.0 * b[k] + a[k]).powi(2)).sum::<f64>();
    }
    total / (frames - 2) as f64
}

/// Mean squared excess of root speed over `v_max`.
pub fn feasibility_loss(motion: &Motion, v_max: f64) -> f64 {
    let frames = motion.frames();
    let mut total = 0.0;
    for t in 0..frames - 1 {
        let (a, b) = (motion.point(t, ROOT_JOINT), motion.point(t + 1, ROOT_JOINT));
        let speed = (0..3).map(|k| (b[k] - a[k]).powi(2)).sum::<f64>().sqrt();
        total += (speed - v_max).max(0.0).powi(2);
    }
    total / (frames - 1) as f64
}

fn objective_at(u: &SoftTokens, motion: &Motion, anchors: &AnchorSet, cfg: &SolverConfig) -> Result<ObjectiveParts> {
    check_lengths(motion.frames(), cfg)?;
    let anchor = anchor_loss(motion, anchors)?;
    let smooth = smoothness_loss(motion, anchors);
    let trust = (u.values() - u.initial()).norm_squared();
    let feasibility = feasibility_loss(motion, cfg.v_max);
    let total = anchor + cfg.gamma_sm * smooth + cfg.gamma_tr * trust + cfg.gamma_feas * feasibility;
    Ok(ObjectiveParts { anchor, smooth, trust, feasibility, total })
}

/// Refinement objective `J(u)` and its terms.
pub fn objective(
    u: &SoftTokens,
    dec: &dyn DecoderModel,
    anchors: &AnchorSet,
    cfg: &SolverConfig,
) -> Result<ObjectiveParts> {
    check_decoder(dec, u, anchors)?;
    let motion = dec.decode(u.values())?;
    objective_at(u, &motion, anchors, cfg)
}

/// Motion-space cotangent of the anchor, smoothness and feasibility terms.
fn motion_cotangent(motion: &Motion, anchors: &AnchorSet, cfg: &SolverConfig) -> Result<Motion> {
    let fam = anchors.family();
    let (joint, axes) = (fam.joint(), fam.axes());
    let frames = motion.frames();
    let mut g = Motion::zeros(frames, motion.joints())?;

    for a in anchors.anchors() {
        let obs = fam.observe_frame(motion, a.frame);
        for (k, &axis) in axes.iter().enumerate() {
            g.add(a.frame, joint, axis, 2.0 * (obs[k] - a.target[k]));
        }
    }

    if cfg.gamma_sm > 0.0 {
        let scale = 2.0 * cfg.gamma_sm / (frames - 2) as f64;
        for t in 0..frames - 2 {
            let (a, b, c) = (fam.observe_frame(motion, t), fam.observe_frame(motion, t + 1), fam.observe_frame(motion, t + 2));
            for (k, &axis) in axes.iter().enumerate() {
                let s = scale * (c[k] - 2.0 * b[k] + a[k]);
                g.add(t, joint, axis, s);
                g.add(t + 1, joint, axis, -2.0 * s);
                g.add(t + 2, joint, axis, s);
            }
        }
    }

    if cfg.gamma_feas > 0.0 {
        let scale = 2.0 * cfg.gamma_feas / (frames - 1) as f64;
        for t in 0..frames - 1 {
            let (a, b) = (motion.point(t, ROOT_JOINT), motion.point(t + 1, ROOT_JOINT));
            let v = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            let speed = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            let excess = speed - cfg.v_max;
            if excess > 0.0 && speed > 0.0 {
                for (axis, vk) in v.iter().enumerate() {
                    let gk = scale * excess * vk / speed;
                    g.add(t + 1, ROOT_JOINT, axis, gk);
                    g.add(t, ROOT_JOINT, axis, -gk);
                }
            }
        }
    }
    Ok(g)
}

fn gradient_at(
    u: &SoftTokens,
    motion: &Motion,
    dec: &dyn DecoderModel,
    anchors: &AnchorSet,
    cfg: &SolverConfig,
) -> Result<DMatrix<f64>> {
    check_lengths(motion.frames(), cfg)?;
    let cot = motion_cotangent(motion, anchors, cfg)?;
    let mut grad = dec.vjp(u.values(), &cot)?;
    if cfg.gamma_tr > 0.0 {
        grad += (u.values() - u.initial()) * (2.0 * cfg.gamma_tr);
    }
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("objective gradient"));
    }
    Ok(grad)
}

/// Exact gradient of `J` with respect to the soft tokens.
pub fn grad_objective(
    u: &SoftTokens,
    dec: &dyn DecoderModel,
    anchors: &AnchorSet,
    cfg: &SolverConfig,
) -> Result<DMatrix<f64>> {
    check_decoder(dec, u, anchors)?;
    let motion = dec.decode(u.values())?;
    gradient_at(u, &motion, dec, anchors, cfg)
}

/// Momentum buffer carried between optimizer steps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    velocity: Option<DMatrix<f64>>,
}

/// Raw update `Δ = OptStep(u; J) − u`; the update is returned, not applied.
pub fn opt_step(grad: &DMatrix<f64>, cfg: &SolverConfig, state: &mut OptimizerState) -> Result<DMatrix<f64>> {
    match cfg.optimizer {
        Optimizer::GradientDescent => Ok(grad * -cfg.step_size),
        Optimizer::HeavyBall { momentum } => {
            let v = match state.velocity.take() {
                Some(v) if v.shape() == grad.shape() => v * momentum - grad * cfg.step_size,
                Some(v) => {
                    return Err(Error::Shape(format!("velocity {:?} vs gradient {:?}", v.shape(), grad.shape())))
                }
                None => grad * -cfg.step_size,
            };
            state.velocity = Some(v.clone());
            Ok(v)
        }
    }
}

/// Blockwise transport/slope basis over token positions.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix {
    matrix: DMatrix<f64>,
    token_interval: Vec<Option<usize>>,
}

impl BasisMatrix {
    /// L×2|I|; columns `2i` and `2i+1` belong to interval `i`.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Interval owning each token, `None` when its center lies past the last frame.
    pub fn token_interval(&self) -> &[Option<usize>] {
        &self.token_interval
    }

    pub fn intervals(&self) -> usize {
        self.matrix.ncols() / 2
    }

    pub fn tokens(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Center frame of token `n` at `frames_per_token` frames per token.
pub fn token_center(n: usize, frames_per_token: usize) -> f64 {
    (n * frames_per_token) as f64 + (frames_per_token as f64 - 1.0) / 2.0
}

/// Builds the interval basis. Token `n` belongs to the interval containing its
/// center frame; within it, `s = (center − start) / (end − start)` and the
/// entries are `(1, 2s − 1)`.
pub fn build_basis(intervals: &IntervalPartition, tokens: usize, frames_per_token: usize) -> Result<BasisMatrix> {
    if frames_per_token == 0 {
        return Err(Error::Domain("frames per token must be positive".into()));
    }
    if tokens * frames_per_token < intervals.last_frame() + 1 {
        return Err(Error::Shape(format!(
            "{tokens} tokens x {frames_per_token} frames do not cover frame {}",
            intervals.last_frame()
        )));
    }
    let list = intervals.intervals();
    if let Some(i) = list.iter().position(|iv| iv.is_empty()) {
        return Err(Error::Domain(format!("interval {i} is empty")));
    }
    let mut matrix = DMatrix::zeros(tokens, 2 * list.len());
    let mut token_interval = Vec::with_capacity(tokens);
    for n in 0..tokens {
        let center = token_center(n, frames_per_token);
        let owner = intervals.locate(center);
        if let Some(i) = owner {
            let iv = list[i];
            let s = (center - iv.start as f64) / iv.len() as f64;
            matrix[(n, 2 * i)] = 1.0;
            matrix[(n, 2 * i + 1)] = 2.0 * s - 1.0;
        }
        token_interval.push(owner);
    }
    Ok(BasisMatrix { matrix, token_interval })
}

/// Per-interval correction budgets in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityVector(Vec<f64>);

impl ActivityVector {
    /// Values are clipped into `[0, 1]`.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("activity"));
        }
        Ok(Self(values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mean(&self) -> f64 {
        if self.0.is_empty() {
            0.0
        } else {
            self.0.iter().sum::<f64>() / self.0.len() as f64
        }
    }
}

/// `a_i = clip(max(e_L, e_R) / ρ, 0, 1)` where `e_L`, `e_R` are the control
/// errors of the anchors at the interval's endpoints. An endpoint without an
/// anchor contributes zero.
pub fn activities(
    motion: &Motion,
    anchors: &AnchorSet,
    intervals: &IntervalPartition,
    tolerance: f64,
) -> Result<ActivityVector> {
    if !(tolerance.is_finite() && tolerance > 0.0) {
        return Err(Error::Domain(format!("tolerance must be > 0, got {tolerance}")));
    }
    anchors.check_motion(motion)?;
    let fam = anchors.family();
    let d = fam.dim();
    let error_at = |frame: usize| {
        anchors.at_frame(frame).map_or(0.0, |n| {
            let obs = fam.observe_frame(motion, frame);
            let a = &anchors.anchors()[n];
            (0..d).map(|k| (obs[k] - a.target[k]).powi(2)).sum::<f64>().sqrt()
        })
    };
    ActivityVector::new(
        intervals
            .intervals()
            .iter()
            .map(|iv| error_at(iv.start).max(error_at(iv.end)) / tolerance)
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Routed {
    /// `Δ* = B α*`.
    pub delta: DMatrix<f64>,
    /// 2|I|×d_u coefficients; rows of zero basis columns are 0.
    pub alpha: DMatrix<f64>,
}

const PINV_TOLERANCE: f64 = 1e-12;

/// Ridge-routed projection of a raw update onto the interval basis:
/// `α* = argmin ‖Δ − Bα‖² + λ Σ (1 − a_i) ‖α_i‖²`.
///
/// Solved through the normal equations `(BᵀB + λW) α = BᵀΔ` by Cholesky.
/// Basis columns that are identically zero (intervals that own no token)
/// are left out and get `α = 0`. With `λ = 0` the system is solved by SVD
/// and a rank-deficient basis is an error. With `λ > 0`, a system that is
/// still singular (fully active intervals whose two columns are collinear)
/// falls back to the minimum-norm pseudo-inverse solution.
pub fn route(delta: &DMatrix<f64>, basis: &BasisMatrix, activity: &ActivityVector, lambda: f64) -> Result<Routed> {
    let b = basis.matrix();
    if delta.nrows() != b.nrows() {
        return Err(Error::Shape(format!("update has {} rows, basis {}", delta.nrows(), b.nrows())));
    }
    if activity.len() != basis.intervals() {
        return Err(Error::Shape(format!("{} activities for {} intervals", activity.len(), basis.intervals())));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Domain(format!("lambda must be finite and nonnegative, got {lambda}")));
    }
    if delta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("raw update"));
    }

    let live: Vec<usize> = (0..b.ncols()).filter(|&c| b.column(c).iter().any(|&x| x != 0.0)).collect();
    let mut alpha = DMatrix::zeros(b.ncols(), delta.ncols());
    if live.is_empty() {
        return Ok(Routed { delta: DMatrix::zeros(delta.nrows(), delta.ncols()), alpha });
    }
    let bl = b.select_columns(&live);
    let mut normal = bl.tr_mul(&bl);
    for (k, &c) in live.iter().enumerate() {
        normal[(k, k)] += lambda * (1.0 - activity.values()[c / 2]);
    }
    let rhs = bl.tr_mul(delta);

    let solved = if lambda > 0.0 {
        match normal.clone().cholesky() {
            Some(chol) => chol.solve(&rhs),
            None => pinv_solve(normal, &rhs, false)?,
        }
    } else {
        pinv_solve(normal, &rhs, true)?
    };
    for (k, &c) in live.iter().enumerate() {
        alpha.row_mut(c).copy_from(&solved.row(k));
    }
    Ok(Routed { delta: b * &alpha, alpha })
}

fn pinv_solve(normal: DMatrix<f64>, rhs: &DMatrix<f64>, reject_rank_deficient: bool) -> Result<DMatrix<f64>> {
    let svd = normal.svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = PINV_TOLERANCE * smax.max(f64::MIN_POSITIVE);
    if reject_rank_deficient && svd.singular_values.iter().any(|&s| s <= cutoff) {
        return Err(Error::Singular("basis is rank-deficient and lambda = 0".into()));
    }
    svd.solve(rhs, cutoff).map_err(|e| Error::Singular(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineTraceRow {
    pub step: usize,
    pub objective: f64,
    pub anchor_loss: f64,
    pub mean_activity: f64,
    pub update_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineRun {
    pub tokens: SoftTokens,
    pub trace: Vec<RefineTraceRow>,
}

impl RefineRun {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("step,objective,anchor_loss,mean_activity,update_norm\n");
        for r in &self.trace {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step, r.objective, r.anchor_loss, r.mean_activity, r.update_norm
            ));
        }
        out
    }
}

/// Runs `cfg.steps` routed updates starting from `init`.
///
/// The basis is built once from `intervals`; activities, objective and
/// gradient are re-evaluated from the decoded motion at every step. Trace row
/// `k` records the state before update `k` is applied.
pub fn refine(
    init: &SoftTokens,
    dec: &dyn DecoderModel,
    anchors: &AnchorSet,
    intervals: &IntervalPartition,
    cfg: &SolverConfig,
    frames_per_token: usize,
) -> Result<RefineRun> {
    cfg.validate()?;
    check_decoder(dec, init, anchors)?;
    check_lengths(dec.frames(), cfg)?;
    let basis = build_basis(intervals, dec.tokens(), frames_per_token)?;
    let tolerance = cfg.tolerance.unwrap_or(anchors.family().tolerance());
    let mut u = init.clone();
    let mut state = OptimizerState::default();
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let motion = dec.decode(u.values())?;
        let activity = activities(&motion, anchors, intervals, tolerance)?;
        let parts = objective_at(&u, &motion, anchors, cfg)?;
        let grad = gradient_at(&u, &motion, dec, anchors, cfg)?;
        let raw = opt_step(&grad, cfg, &mut state)?;
        let routed = route(&raw, &basis, &activity, cfg.lambda)?;
        trace.push(RefineTraceRow {
            step: step + 1,
            objective: parts.total,
            anchor_loss: parts.anchor,
            mean_activity: activity.mean(),
            update_norm: routed.delta.norm(),
        });
        u = u.with_values(u.values() + routed.delta)?;
    }
    Ok(RefineRun { tokens: u, trace })
}

/// Refines independent instances sharing one decoder and configuration.
/// Intervals are built from each instance's anchors.
pub fn refine_batch(
    instances: &[(SoftTokens, AnchorSet)],
    dec: &dyn DecoderModel,
    cfg: &SolverConfig,
    frames_per_token: usize,
    exec: Execution,
) -> Result<Vec<RefineRun>> {
    par::map_slice(instances, exec, |(init, anchors)| {
        let intervals = build_intervals(anchors, dec.frames())?;
        refine(init, dec, anchors, &intervals, cfg, frames_per_token)
    })
    .into_iter()
    .collect()
}
