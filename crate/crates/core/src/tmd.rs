//! Metric-guided discrete token flow over a finite codebook.
//!
//! Tokens are corrupted along a path that concentrates on the clean token in
//! the codebook's cosine metric, and sampling runs a continuous-time jump
//! process whose rates only ever move a token closer to the current clean
//! proposal.

use nalgebra::DMatrix;
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchorkv::{ConditionMemory, TextContext};
use crate::error::{Error, Result};
use crate::par::{self, Execution};

/// Anchor-loss weight in the controlled training objective.
pub const DEFAULT_ANCHOR_WEIGHT: f64 = 0.3;

/// Finite embedding table with a precomputed pairwise metric.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    embeddings: DMatrix<f64>,
    // d(i, j) = (2 - 2 cos(e_i, e_j))^2
    distances: DMatrix<f64>,
}

impl Codebook {
    pub fn new(embeddings: DMatrix<f64>) -> Result<Self> {
        let (v, d) = embeddings.shape();
        if v == 0 || d == 0 {
            return Err(Error::InvalidCodebook(format!("empty codebook {v}x{d}")));
        }
        if embeddings.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidCodebook("non-finite embedding".into()));
        }
        let norms: Vec<f64> = embeddings.row_iter().map(|r| r.norm()).collect();
        if let Some(i) = norms.iter().position(|&n| n == 0.0) {
            return Err(Error::InvalidCodebook(format!("embedding {i} has zero norm")));
        }
        let distances = DMatrix::from_fn(v, v, |i, j| {
            if i == j {
                return 0.0;
            }
            let cos = (embeddings.row(i).dot(&embeddings.row(j)) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            (2.0 - 2.0 * cos).powi(2)
        });
        Ok(Self { embeddings, distances })
    }

    pub fn size(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn embeddings(&self) -> &DMatrix<f64> {
        &self.embeddings
    }

    pub fn cosine(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.embeddings.row(i), self.embeddings.row(j));
        a.dot(&b) / (a.norm() * b.norm())
    }

    fn check(&self, id: usize) -> Result<()> {
        if id >= self.size() {
            return Err(Error::TokenOutOfRange { id, size: self.size() });
        }
        Ok(())
    }

    #[inline]
    fn dist(&self, i: usize, j: usize) -> f64 {
        self.distances[(i, j)]
    }
}

/// `d(i, x1) = (2 − 2 cos(e_i, e_x1))²`.
pub fn metric_distance(cb: &Codebook, i: usize, x1: usize) -> Result<f64> {
    cb.check(i)?;
    cb.check(x1)?;
    Ok(cb.dist(i, x1))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<usize>);

impl TokenSeq {
    pub fn new(ids: Vec<usize>, vocab: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Shape("token sequence must be non-empty".into()));
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::TokenOutOfRange { id, size: vocab });
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Fraction of positions equal to `other`.
    pub fn match_rate(&self, other: &TokenSeq) -> f64 {
        let hits = self.0.iter().zip(&other.0).filter(|(a, b)| a == b).count();
        hits as f64 / self.0.len().max(other.0.len()) as f64
    }
}

/// Corruption schedule `β(t) = c (t / (1 − t))^a` and its uniform time grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TmdSchedule {
    pub exponent: f64,
    pub scale: f64,
    pub steps: usize,
    pub t_max: f64,
    /// Overrides the grid step `t_max / steps` when set.
    pub step_size: Option<f64>,
}

impl Default for TmdSchedule {
    fn default() -> Self {
        Self { exponent: 0.9, scale: 3.0, steps: 64, t_max: 1.0 - 1e-3, step_size: None }
    }
}

impl TmdSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.exponent > 0.0 && self.exponent.is_finite()) {
            return Err(Error::Domain(format!("exponent must be > 0, got {}", self.exponent)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Domain(format!("scale must be > 0, got {}", self.scale)));
        }
        if self.steps == 0 {
            return Err(Error::Domain("schedule needs at least one step".into()));
        }
        if !(self.t_max > 0.0 && self.t_max < 1.0) {
            return Err(Error::Domain(format!("t_max must lie in (0, 1), got {}", self.t_max)));
        }
        if let Some(h) = self.step_size {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::Domain(format!("step size must be > 0, got {h}")));
            }
        }
        Ok(())
    }

    pub fn beta(&self, t: f64) -> Result<f64> {
        if !(0.0..1.0).contains(&t) {
            return Err(Error::Domain(format!("beta is defined on [0, 1), got t = {t}")));
        }
        Ok(self.scale * (t / (1.0 - t)).powf(self.exponent))
    }

    /// `β'(t) = c a (t/(1−t))^(a−1) / (1−t)²`, defined for `0 < t < 1`.
    pub fn beta_prime(&self, t: f64) -> Result<f64> {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::Domain(format!("beta' is defined on (0, 1), got t = {t}")));
        }
        let odds = t / (1.0 - t);
        Ok(self.scale * self.exponent * odds.powf(self.exponent - 1.0) / ((1.0 - t) * (1.0 - t)))
    }

    pub fn step_size(&self) -> f64 {
        self.step_size.unwrap_or(self.t_max / self.steps as f64)
    }

    /// Sampling times `t_k = k · t_max / K` for `k = 1..=K`.
    pub fn grid(&self) -> Vec<f64> {
        (1..=self.steps).map(|k| k as f64 * self.t_max / self.steps as f64).collect()
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=self.t_max).contains(&t) {
            return Err(Error::Domain(format!("t = {t} outside [0, {}]", self.t_max)));
        }
        Ok(())
    }
}

fn softmin_into(cb: &Codebook, x1: usize, beta: f64, out: &mut [f64]) {
    let v = cb.size();
    let min = (0..v).map(|i| cb.dist(i, x1)).fold(f64::INFINITY, f64::min);
    let mut total = 0.0;
    for (i, o) in out.iter_mut().enumerate() {
        *o = (-beta * (cb.dist(i, x1) - min)).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// `q_t(· | x1)`.
pub fn corruption_dist(cb: &Codebook, x1: usize, t: f64, sched: &TmdSchedule) -> Result<Vec<f64>> {
    cb.check(x1)?;
    sched.check_time(t)?;
    let mut q = vec![0.0; cb.size()];
    softmin_into(cb, x1, sched.beta(t)?, &mut q);
    Ok(q)
}

/// Independent per-position draws from `q_t(· | clean_n)`.
pub fn corrupt<R: Rng + ?Sized>(
    clean: &TokenSeq,
    t: f64,
    cb: &Codebook,
    sched: &TmdSchedule,
    rng: &mut R,
) -> Result<TokenSeq> {
    sched.check_time(t)?;
    let beta = sched.beta(t)?;
    let mut q = vec![0.0; cb.size()];
    let mut out = Vec::with_capacity(clean.len());
    for &x1 in clean.ids() {
        cb.check(x1)?;
        softmin_into(cb, x1, beta, &mut q);
        out.push(draw(&q, rng));
    }
    Ok(TokenSeq(out))
}

fn draw<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    WeightedIndex::new(weights).expect("weights have positive mass").sample(rng)
}

/// Denoising cross-entropy: summed negative log-softmax at the clean ids.
pub fn denoise_loss(logits: &DMatrix<f64>, clean: &TokenSeq) -> Result<f64> {
    if logits.nrows() != clean.len() {
        return Err(Error::Shape(format!("{} logit rows for {} tokens", logits.nrows(), clean.len())));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let v = logits.ncols();
    let mut loss = 0.0;
    for (row, &id) in logits.row_iter().zip(clean.ids()) {
        if id >= v {
            return Err(Error::TokenOutOfRange { id, size: v });
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        loss += lse - row[id];
    }
    Ok(loss)
}

/// `L_CE + λ_anc · L_anc^sup`.
pub fn training_objective(ce: f64, anchor_sup: f64, anchor_weight: f64) -> f64 {
    ce + anchor_weight * anchor_sup
}

fn rates_into(cb: &Codebook, x_t: usize, proposal: usize, beta: f64, beta_prime: f64, out: &mut [f64]) -> f64 {
    softmin_into(cb, proposal, beta, out);
    let current = cb.dist(x_t, proposal);
    let mut total = 0.0;
    for (i, o) in out.iter_mut().enumerate() {
        let gain = current - cb.dist(i, proposal);
        // q_t underflows for far tokens late in the schedule; clamping keeps
        // the rate positive on every descent candidate.
        *o = if gain > 0.0 { o.max(f64::MIN_POSITIVE) * beta_prime * gain } else { 0.0 };
        total += *o;
    }
    total
}

/// `u_t(i | x_t, x̂1) = q_t(i | x̂1) β'(t) [d(x_t, x̂1) − d(i, x̂1)]_+`.
pub fn jump_rates(cb: &Codebook, x_t: usize, proposal: usize, t: f64, sched: &TmdSchedule) -> Result<Vec<f64>> {
    cb.check(x_t)?;
    cb.check(proposal)?;
    sched.check_time(t)?;
    let mut out = vec![0.0; cb.size()];
    rates_into(cb, x_t, proposal, sched.beta(t)?, sched.beta_prime(t)?, &mut out);
    Ok(out)
}

/// One jump step of size `h`. Each position updates with probability
/// `1 − exp(−h λ_t)` and then jumps to a token drawn from the normalized rates.
/// Returns the new sequence and the number of updated positions.
pub fn step<R: Rng + ?Sized>(
    x_t: &TokenSeq,
    proposal: &TokenSeq,
    t: f64,
    h: f64,
    cb: &Codebook,
    sched: &TmdSchedule,
    rng: &mut R,
) -> Result<(TokenSeq, usize)> {
    if x_t.len() != proposal.len() {
        return Err(Error::Shape(format!("state has {} tokens, proposal {}", x_t.len(), proposal.len())));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Domain(format!("step size must be > 0, got {h}")));
    }
    sched.check_time(t)?;
    let (beta, beta_prime) = (sched.beta(t)?, sched.beta_prime(t)?);
    let mut rates = vec![0.0; cb.size()];
    let mut next = Vec::with_capacity(x_t.len());
    let mut updates = 0;
    for (&cur, &target) in x_t.ids().iter().zip(proposal.ids()) {
        cb.check(cur)?;
        cb.check(target)?;
        let total = rates_into(cb, cur, target, beta, beta_prime, &mut rates);
        if total > 0.0 && rng.gen::<f64>() < -(-h * total).exp_m1() {
            next.push(draw(&rates, rng));
            updates += 1;
        } else {
            next.push(cur);
        }
    }
    Ok((TokenSeq(next), updates))
}

/// A clean-token proposal: hard ids or per-position logits.
#[derive(Debug, Clone, PartialEq)]
pub enum Proposal {
    Ids(Vec<usize>),
    Logits(DMatrix<f64>),
}

impl Proposal {
    /// Hard ids; logits are reduced by argmax with the lowest id winning ties.
    pub fn into_ids(self) -> Vec<usize> {
        match self {
            Proposal::Ids(ids) => ids,
            Proposal::Logits(l) => l
                .row_iter()
                .map(|row| {
                    let mut best = 0;
                    for (i, &x) in row.iter().enumerate() {
                        if x > row[best] {
                            best = i;
                        }
                    }
                    best
                })
                .collect(),
        }
    }
}

/// Condition passed through to the denoiser untouched.
#[derive(Debug, Clone, Default)]
pub struct DenoiserContext {
    pub memory: Option<ConditionMemory>,
    pub text: Option<TextContext>,
}

/// Clean-token predictor queried once per sampling step.
pub trait Denoiser {
    fn predict(&mut self, state: &TokenSeq, t: f64, context: &DenoiserContext) -> Result<Proposal>;
}

impl<D: Denoiser + ?Sized> Denoiser for &mut D {
    fn predict(&mut self, state: &TokenSeq, t: f64, context: &DenoiserContext) -> Result<Proposal> {
        (**self).predict(state, t, context)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleTraceRow {
    pub step: usize,
    pub t: f64,
    pub updates: usize,
    /// Mean metric distance from the updated state to the proposal.
    pub mean_d: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRun {
    pub tokens: TokenSeq,
    pub trace: Vec<SampleTraceRow>,
}

impl SampleRun {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("step,t,updates,mean_d\n");
        for r in &self.trace {
            out.push_str(&format!("{},{},{},{}\n", r.step, r.t, r.updates, r.mean_d));
        }
        out
    }
}

/// Runs the sampler from uniformly random tokens over the schedule's grid.
pub fn sample<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &mut D,
    len: usize,
    cb: &Codebook,
    sched: &TmdSchedule,
    context: &DenoiserContext,
    rng: &mut R,
) -> Result<SampleRun> {
    sched.validate()?;
    if len == 0 {
        return Err(Error::Shape("sequence length must be positive".into()));
    }
    let v = cb.size();
    let mut state = TokenSeq((0..len).map(|_| rng.gen_range(0..v)).collect());
    let h = sched.step_size();
    let mut trace = Vec::with_capacity(sched.steps);
    for (k, t) in sched.grid().into_iter().enumerate() {
        let ids = denoiser.predict(&state, t, context)?.into_ids();
        if ids.len() != len {
            return Err(Error::Shape(format!("denoiser returned {} ids for {len} tokens", ids.len())));
        }
        let proposal = TokenSeq::new(ids, v)?;
        let (next, updates) = step(&state, &proposal, t, h, cb, sched, rng)?;
        let mean_d = next.ids().iter().zip(proposal.ids()).map(|(&a, &b)| cb.dist(a, b)).sum::<f64>() / len as f64;
        trace.push(SampleTraceRow { step: k + 1, t, updates, mean_d });
        state = next;
    }
    Ok(SampleRun { tokens: state, trace })
}

/// Independent sampler runs, one per seed. Run `i` uses
/// `ChaCha8Rng::seed_from_u64(seeds[i])` and its own denoiser from `make`, so
/// results do not depend on the execution mode.
pub fn sample_batch<D, F>(
    seeds: &[u64],
    make: F,
    len: usize,
    cb: &Codebook,
    sched: &TmdSchedule,
    context: &DenoiserContext,
    exec: Execution,
) -> Result<Vec<SampleRun>>
where
    D: Denoiser,
    F: Fn(u64) -> D + Sync + Send,
{
    par::map_slice(seeds, exec, |&seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample(&mut make(seed), len, cb, sched, context, &mut rng)
    })
    .into_iter()
    .collect()
}
