//! Synthetic stand-in for a pretrained motion prior: toy motions, separated
//! codebooks, a window tokenizer, a linear decoder, test denoisers and the
//! control-error metric.

use nalgebra::DMatrix;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::anchorkv::gaussian;
use crate::error::{Error, Result};
use crate::routesolver::DecoderModel;
use crate::scaffold::{AnchorSet, Motion};
use crate::tmd::{Codebook, Denoiser, DenoiserContext, Proposal, TokenSeq};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MotionKind {
    /// Root moves at constant velocity from the origin, meters per frame.
    Line { velocity: [f64; 3] },
    /// Root circles the origin in the horizontal plane.
    Circle { radius: f64, period: f64 },
    /// Root oscillates vertically.
    Sinusoid { amplitude: f64, period: f64 },
    /// Gaussian root steps with the given standard deviation per axis.
    RandomWalk { step: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthTask {
    pub motion: MotionKind,
    pub frames: usize,
    pub joints: usize,
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SynthTask {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 8 {
            return Err(Error::Domain(format!("tasks need at least 8 frames, got {}", self.frames)));
        }
        if self.joints == 0 {
            return Err(Error::Domain("tasks need at least one joint".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Domain(format!("noise must be nonnegative, got {}", self.noise)));
        }
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Domain(format!("{name} must be positive, got {v}")))
            }
        };
        match self.motion {
            MotionKind::Line { velocity } if velocity.iter().any(|v| !v.is_finite()) => {
                Err(Error::NonFinite("line velocity"))
            }
            MotionKind::Line { .. } => Ok(()),
            MotionKind::Circle { radius, period } => positive("radius", radius).and(positive("period", period)),
            MotionKind::Sinusoid { amplitude, period } => {
                positive("amplitude", amplitude).and(positive("period", period))
            }
            MotionKind::RandomWalk { step } => positive("step", step),
        }
    }
}

/// Fixed offset of joint `j` from the root, meters.
pub fn rig_offset(joint: usize) -> [f64; 3] {
    if joint == 0 {
        return [0.0; 3];
    }
    let a = joint as f64 * 1.3;
    [0.15 * a.cos(), 0.1 * joint as f64, 0.15 * a.sin()]
}

pub fn make_motion(task: &SynthTask) -> Result<Motion> {
    task.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let tau = std::f64::consts::TAU;
    let mut walk = [0.0; 3];
    let roots: Vec<[f64; 3]> = (0..task.frames)
        .map(|t| {
            let tf = t as f64;
            let mut root = match task.motion {
                MotionKind::Line { velocity } => velocity.map(|v| v * tf),
                MotionKind::Circle { radius, period } => {
                    let th = tau * tf / period;
                    [radius * th.cos(), 0.0, radius * th.sin()]
                }
                MotionKind::Sinusoid { amplitude, period } => [0.0, amplitude * (tau * tf / period).sin(), 0.0],
                MotionKind::RandomWalk { step } => {
                    if t > 0 {
                        for w in walk.iter_mut() {
                            *w += step * rng.sample::<f64, _>(StandardNormal);
                        }
                    }
                    walk
                }
            };
            if task.noise > 0.0 {
                for r in root.iter_mut() {
                    *r += task.noise * rng.sample::<f64, _>(StandardNormal);
                }
            }
            root
        })
        .collect();
    Motion::from_fn(task.frames, task.joints, |t, j| {
        let off = rig_offset(j);
        [roots[t][0] + off[0], roots[t][1] + off[1], roots[t][2] + off[2]]
    })
}

const CODEBOOK_ATTEMPTS: usize = 100_000;

/// Unit-norm codebook with pairwise cosine similarity at most `1 − separation`.
///
/// Rows are drawn one at a time and rejected while too close to an accepted
/// row. `separation = 1` asks for mutually orthogonal rows, which are built
/// directly by Gram–Schmidt.
pub fn make_codebook(vocab: usize, dim: usize, separation: f64, seed: u64) -> Result<Codebook> {
    if vocab < 2 || dim == 0 {
        return Err(Error::Domain(format!("need vocab >= 2 and dim >= 1, got {vocab}x{dim}")));
    }
    if !(0.0..=1.0).contains(&separation) {
        return Err(Error::Domain(format!("separation must lie in [0, 1], got {separation}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(vocab);
    let max_cos = 1.0 - separation;
    let unit = |v: Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    if separation >= 1.0 {
        if vocab > dim {
            return Err(Error::Infeasible(format!("{vocab} orthogonal rows do not fit in {dim} dimensions")));
        }
        while rows.len() < vocab {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            for r in &rows {
                let p = dot(&v, r);
                v.iter_mut().zip(r).for_each(|(x, y)| *x -= p * y);
            }
            if v.iter().map(|x| x * x).sum::<f64>() > 1e-12 {
                rows.push(unit(v));
            }
        }
    } else {
        let mut attempts = 0;
        while rows.len() < vocab {
            attempts += 1;
            if attempts > CODEBOOK_ATTEMPTS {
                return Err(Error::Infeasible(format!(
                    "no {vocab}x{dim} codebook with separation {separation} after {CODEBOOK_ATTEMPTS} draws"
                )));
            }
            let v = unit((0..dim).map(|_| rng.sample(StandardNormal)).collect());
            if rows.iter().all(|r| dot(&v, r) <= max_cos) {
                rows.push(v);
            }
        }
    }
    Codebook::new(DMatrix::from_row_iterator(vocab, dim, rows.into_iter().flatten()))
}

/// Linear decoder `vec(motion) = Wᵀ vec(u)` with row-major vectorization.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDecoder {
    tokens: usize,
    token_dim: usize,
    frames: usize,
    joints: usize,
    /// (L·d_u)×(T·J·3)
    weights: DMatrix<f64>,
}

impl LinearDecoder {
    pub fn new(tokens: usize, token_dim: usize, frames: usize, joints: usize, weights: DMatrix<f64>) -> Result<Self> {
        if frames < 2 || joints == 0 || tokens == 0 || token_dim == 0 {
            return Err(Error::Shape(format!("degenerate decoder {tokens}x{token_dim} -> {frames}x{joints}x3")));
        }
        if weights.shape() != (tokens * token_dim, frames * joints * 3) {
            return Err(Error::Shape(format!(
                "weights are {:?}, expected ({}, {})",
                weights.shape(),
                tokens * token_dim,
                frames * joints * 3
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("decoder weights"));
        }
        Ok(Self { tokens, token_dim, frames, joints, weights })
    }

    /// Dense Gaussian weights; unit-norm token rows decode to unit-variance coordinates.
    pub fn random<R: Rng + ?Sized>(
        tokens: usize,
        token_dim: usize,
        frames: usize,
        joints: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = gaussian(tokens * token_dim, frames * joints * 3, (tokens as f64).sqrt().recip(), rng);
        Self::new(tokens, token_dim, frames, joints, w)
    }

    /// Every frame of token `n`'s window decodes to `u_n · rig`, where `rig` is
    /// d_u×3J and maps a token embedding to all joint positions.
    pub fn windowed(tokens: usize, frames_per_token: usize, rig: &DMatrix<f64>) -> Result<Self> {
        let (token_dim, width) = rig.shape();
        if width == 0 || width % 3 != 0 {
            return Err(Error::Shape(format!("rig width {width} is not a positive multiple of 3")));
        }
        let joints = width / 3;
        let frames = tokens * frames_per_token;
        let mut w = DMatrix::zeros(tokens * token_dim, frames * width);
        for n in 0..tokens {
            for t in n * frames_per_token..(n + 1) * frames_per_token {
                w.view_mut((n * token_dim, t * width), (token_dim, width)).copy_from(rig);
            }
        }
        Self::new(tokens, token_dim, frames, joints, w)
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    fn check_input(&self, u: &DMatrix<f64>) -> Result<()> {
        if u.shape() != (self.tokens, self.token_dim) {
            return Err(Error::Shape(format!("decoder input {:?}, expected ({}, {})", u.shape(), self.tokens, self.token_dim)));
        }
        Ok(())
    }
}

// nalgebra is column-major; vec(u) is taken row-major.
fn row_major(u: &DMatrix<f64>) -> nalgebra::DVector<f64> {
    nalgebra::DVector::from_iterator(u.len(), u.transpose().iter().copied())
}

impl DecoderModel for LinearDecoder {
    fn tokens(&self) -> usize {
        self.tokens
    }

    fn token_dim(&self) -> usize {
        self.token_dim
    }

    fn frames(&self) -> usize {
        self.frames
    }

    fn joints(&self) -> usize {
        self.joints
    }

    fn decode(&self, u: &DMatrix<f64>) -> Result<Motion> {
        self.check_input(u)?;
        let out = self.weights.tr_mul(&row_major(u));
        Motion::new(self.frames, self.joints, out.as_slice().to_vec())
    }

    fn vjp(&self, u: &DMatrix<f64>, cotangent: &Motion) -> Result<DMatrix<f64>> {
        self.check_input(u)?;
        if (cotangent.frames(), cotangent.joints()) != (self.frames, self.joints) {
            return Err(Error::Shape("cotangent does not match decoder output".into()));
        }
        let g = nalgebra::DVector::from_column_slice(cotangent.as_slice());
        let back = &self.weights * g;
        Ok(DMatrix::from_row_slice(self.tokens, self.token_dim, back.as_slice()))
    }
}

/// Random d_u×3J rig for [`LinearDecoder::windowed`], unit-variance on unit inputs.
pub fn random_rig<R: Rng + ?Sized>(token_dim: usize, joints: usize, rng: &mut R) -> DMatrix<f64> {
    gaussian(token_dim, 3 * joints, 1.0, rng)
}

/// Encoder paired with a windowed decoder's rig: its pseudo-inverse (3J×d_u).
pub fn paired_encoder(rig: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    rig.clone().pseudo_inverse(1e-12).map_err(|e| Error::Singular(e.to_string()))
}

/// Window-mean frame features projected by `encoder` and snapped to the
/// nearest codebook row (Euclidean, lowest id on ties). A ragged last window
/// repeats the final frame.
pub fn tokenize(motion: &Motion, cb: &Codebook, frames_per_token: usize, encoder: &DMatrix<f64>) -> Result<TokenSeq> {
    if frames_per_token == 0 {
        return Err(Error::Domain("frames per token must be positive".into()));
    }
    let width = motion.joints() * 3;
    if encoder.shape() != (width, cb.dim()) {
        return Err(Error::Shape(format!("encoder is {:?}, expected ({width}, {})", encoder.shape(), cb.dim())));
    }
    let frames = motion.frames();
    let tokens = frames.div_ceil(frames_per_token);
    let data = motion.as_slice();
    let mut ids = Vec::with_capacity(tokens);
    for n in 0..tokens {
        let mut mean = nalgebra::RowDVector::zeros(width);
        for t in n * frames_per_token..(n + 1) * frames_per_token {
            let src = t.min(frames - 1);
            for c in 0..width {
                mean[c] += data[src * width + c];
            }
        }
        mean /= frames_per_token as f64;
        let z = mean * encoder;
        let mut best = (0, f64::INFINITY);
        for (i, row) in cb.embeddings().row_iter().enumerate() {
            let d = (&z - row).norm_squared();
            if d < best.1 {
                best = (i, d);
            }
        }
        ids.push(best.0);
    }
    TokenSeq::new(ids, cb.size())
}

/// Mean control-space distance to the anchor targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlError {
    /// Meters; 0 when there are no anchors.
    pub mean: f64,
    pub anchors: usize,
}

impl ControlError {
    pub fn is_empty(&self) -> bool {
        self.anchors == 0
    }
}

pub fn control_error(motion: &Motion, anchors: &AnchorSet) -> Result<ControlError> {
    anchors.check_motion(motion)?;
    let fam = anchors.family();
    let d = fam.dim();
    let total: f64 = anchors
        .anchors()
        .iter()
        .map(|a| {
            let obs = fam.observe_frame(motion, a.frame);
            (0..d).map(|k| (obs[k] - a.target[k]).powi(2)).sum::<f64>().sqrt()
        })
        .sum();
    let n = anchors.len();
    Ok(ControlError { mean: if n == 0 { 0.0 } else { total / n as f64 }, anchors: n })
}

/// `k` distinct frames drawn uniformly from `0..frames`, sorted.
pub fn sample_anchor_frames<R: Rng + ?Sized>(frames: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k > frames {
        return Err(Error::Domain(format!("cannot place {k} anchors in {frames} frames")));
    }
    let mut out = index::sample(rng, frames, k).into_vec();
    out.sort_unstable();
    Ok(out)
}

/// Returns the clean sequence with each id replaced, with probability
/// `confusion`, by a uniformly random id.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    clean: TokenSeq,
    confusion: f64,
    vocab: usize,
    rng: ChaCha8Rng,
}

pub fn oracle_denoiser(clean: TokenSeq, confusion: f64, vocab: usize, seed: u64) -> Result<OracleDenoiser> {
    if !(0.0..1.0).contains(&confusion) {
        return Err(Error::Domain(format!("confusion must lie in [0, 1), got {confusion}")));
    }
    if let Some(&id) = clean.ids().iter().find(|&&id| id >= vocab) {
        return Err(Error::TokenOutOfRange { id, size: vocab });
    }
    Ok(OracleDenoiser { clean, confusion, vocab, rng: ChaCha8Rng::seed_from_u64(seed) })
}

impl Denoiser for OracleDenoiser {
    fn predict(&mut self, _state: &TokenSeq, _t: f64, _context: &DenoiserContext) -> Result<Proposal> {
        if self.confusion == 0.0 {
            return Ok(Proposal::Ids(self.clean.ids().to_vec()));
        }
        let ids = self
            .clean
            .ids()
            .iter()
            .map(|&id| if self.rng.gen::<f64>() < self.confusion { self.rng.gen_range(0..self.vocab) } else { id })
            .collect();
        Ok(Proposal::Ids(ids))
    }
}

/// Proposes uniformly random ids at every query.
#[derive(Debug, Clone)]
pub struct UniformDenoiser {
    vocab: usize,
    rng: ChaCha8Rng,
}

impl UniformDenoiser {
    pub fn new(vocab: usize, seed: u64) -> Self {
        Self { vocab, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl Denoiser for UniformDenoiser {
    fn predict(&mut self, state: &TokenSeq, _t: f64, _context: &DenoiserContext) -> Result<Proposal> {
        Ok(Proposal::Ids((0..state.len()).map(|_| self.rng.gen_range(0..self.vocab)).collect()))
    }
}

/// Shape of the synthetic prior: codebook, windowed decoder and paired encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub vocab: usize,
    pub token_dim: usize,
    pub tokens: usize,
    pub frames_per_token: usize,
    pub joints: usize,
    pub separation: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self { vocab: 32, token_dim: 16, tokens: 16, frames_per_token: 4, joints: 6, separation: 0.3 }
    }
}

impl WorldSpec {
    pub fn frames(&self) -> usize {
        self.tokens * self.frames_per_token
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub spec: WorldSpec,
    pub codebook: Codebook,
    pub decoder: LinearDecoder,
    pub encoder: DMatrix<f64>,
}

impl World {
    /// Codebook from `codebook_seed`, rig from `rig_seed`.
    pub fn build(spec: WorldSpec, codebook_seed: u64, rig_seed: u64) -> Result<Self> {
        let codebook = make_codebook(spec.vocab, spec.token_dim, spec.separation, codebook_seed)?;
        let rig = random_rig(spec.token_dim, spec.joints, &mut ChaCha8Rng::seed_from_u64(rig_seed));
        let decoder = LinearDecoder::windowed(spec.tokens, spec.frames_per_token, &rig)?;
        let encoder = paired_encoder(&rig)?;
        Ok(Self { spec, codebook, decoder, encoder })
    }

    pub fn tokenize(&self, motion: &Motion) -> Result<TokenSeq> {
        tokenize(motion, &self.codebook, self.spec.frames_per_token, &self.encoder)
    }
}
