//! Command-line pipeline: run configuration, seed substreams and the
//! `sample`, `refine` and `bench` commands.
//!
//! One run seed drives every stochastic stage. Stage `s` draws from
//! `ChaCha8Rng::seed_from_u64(substream(seed, s))`, where [`substream`]
//! applies one SplitMix64 finalizer round to `seed ^ (s · 0x9E3779B97F4A7C15)`.
//! The synthetic motion additionally adds the task's own `seed` field, so two
//! tasks in one run can differ.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchorkv::{encode_memory, gaussian};
use crate::error::{Error, Result};
use crate::io::ArrayDoc;
use crate::routesolver::{refine, soft_init, DecoderModel, Preset, RefineRun, SolverConfig};
use crate::scaffold::{
    anchor_loss, build_features, build_intervals, residuals, supervised_anchor_loss, Anchor, AnchorSet, ControlFamily,
    FamilyTag, Motion,
};
use crate::synthworld::{
    control_error, make_motion, oracle_denoiser, sample_anchor_frames, MotionKind, SynthTask, UniformDenoiser, World,
    WorldSpec,
};
use crate::tmd::{sample, Denoiser, DenoiserContext, SampleRun, TmdSchedule, TokenSeq};

/// Named stochastic stages of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Motion = 1,
    Codebook = 2,
    Rig = 3,
    Anchors = 4,
    Denoiser = 5,
    Sampler = 6,
    Memory = 7,
}

pub fn substream(seed: u64, stream: Stream) -> u64 {
    let mut z = seed ^ (stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream(seed, stream))
}

/// Where anchors come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Placement {
    /// `K` distinct frames drawn uniformly; targets read off the task motion.
    Sample(usize),
    /// Given frames; targets read off the task motion.
    Frames(Vec<usize>),
    /// Explicit frames and targets.
    Targets(Vec<TargetDoc>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetDoc {
    pub frame: usize,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorSpec {
    pub family: FamilyTag,
    #[serde(default)]
    pub joint: Option<usize>,
    #[serde(default)]
    pub tolerance: Option<f64>,
    pub placement: Placement,
}

impl AnchorSpec {
    pub fn family(&self) -> Result<ControlFamily> {
        let fam = ControlFamily::new(self.family.to_kind(self.joint)?, crate::scaffold::DEFAULT_TOLERANCE)?;
        match self.tolerance {
            Some(tol) => fam.with_tolerance(tol),
            None => Ok(fam),
        }
    }

    fn validate(&self, frames: usize, joints: usize) -> Result<()> {
        self.family()?.check_joints(joints)?;
        match &self.placement {
            Placement::Sample(k) if *k == 0 || *k > frames => {
                Err(Error::InvalidAnchors(format!("cannot sample {k} anchors from {frames} frames")))
            }
            Placement::Frames(fs) if fs.iter().any(|&f| f >= frames) => {
                Err(Error::InvalidAnchors(format!("anchor frames must be below {frames}")))
            }
            Placement::Targets(ts) => {
                let set = self.explicit(ts)?;
                set.check_frames(frames)
            }
            _ => Ok(()),
        }
    }

    fn explicit(&self, targets: &[TargetDoc]) -> Result<AnchorSet> {
        let fam = self.family()?;
        let anchors = targets
            .iter()
            .map(|t| Anchor { frame: t.frame, selector: fam.joint(), target: t.target.clone() })
            .collect();
        AnchorSet::new(fam, anchors)
    }

    /// Builds the anchor set against the task motion.
    pub fn build(&self, motion: &Motion, seed: u64) -> Result<AnchorSet> {
        let fam = self.family()?;
        match &self.placement {
            Placement::Sample(k) => {
                let frames = sample_anchor_frames(motion.frames(), *k, &mut stream_rng(seed, Stream::Anchors))?;
                AnchorSet::from_motion(motion, fam, &frames)
            }
            Placement::Frames(fs) => {
                let mut fs = fs.clone();
                fs.sort_unstable();
                AnchorSet::from_motion(motion, fam, &fs)
            }
            Placement::Targets(ts) => self.explicit(ts),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DenoiserSpec {
    /// Clean task tokens with per-position confusion.
    Oracle {
        #[serde(default)]
        confusion: f64,
    },
    Uniform,
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        DenoiserSpec::Oracle { confusion: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSpec {
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_bench_steps")]
    pub refine_steps: Vec<usize>,
}

fn default_repeats() -> usize {
    3
}

fn default_bench_steps() -> Vec<usize> {
    vec![0, 100, 200, 500]
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self { repeats: default_repeats(), refine_steps: default_bench_steps() }
    }
}

fn default_support_radius() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: SynthTask,
    #[serde(default)]
    pub world: WorldSpec,
    pub anchors: AnchorSpec,
    #[serde(default)]
    pub denoiser: DenoiserSpec,
    #[serde(default)]
    pub schedule: TmdSchedule,
    #[serde(default)]
    pub solver: SolverConfig,
    /// δ, the half-width of each anchor's supervision window.
    #[serde(default = "default_support_radius")]
    pub support_radius: usize,
    /// Start refinement from these ids instead of sampling.
    #[serde(default)]
    pub tokens: Option<Vec<usize>>,
    #[serde(default)]
    pub seed: u64,
    /// Output directory; `--out` takes precedence.
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub bench: BenchSpec,
}

impl RunConfig {
    /// Line motion, Root3D control with 4 sampled anchors, 16 tokens of 4 frames.
    pub fn standard() -> Self {
        let world = WorldSpec::default();
        Self {
            task: SynthTask {
                motion: MotionKind::Line { velocity: [0.02, 0.0, 0.01] },
                frames: world.frames(),
                joints: world.joints,
                noise: 0.0,
                seed: 0,
            },
            world,
            anchors: AnchorSpec { family: FamilyTag::Root3D, joint: None, tolerance: None, placement: Placement::Sample(4) },
            denoiser: DenoiserSpec::default(),
            schedule: TmdSchedule::default(),
            solver: SolverConfig::default(),
            support_radius: default_support_radius(),
            tokens: None,
            seed: 0,
            out: None,
            bench: BenchSpec::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        let w = &self.world;
        if w.vocab < 2 || w.token_dim == 0 || w.tokens == 0 || w.frames_per_token == 0 || w.joints == 0 {
            return Err(Error::Domain(format!("degenerate world {w:?}")));
        }
        if self.task.frames != w.frames() || self.task.joints != w.joints {
            return Err(Error::Shape(format!(
                "task is {}x{} but the world decodes {} tokens x {} frames = {} frames of {} joints",
                self.task.frames,
                self.task.joints,
                w.tokens,
                w.frames_per_token,
                w.frames(),
                w.joints
            )));
        }
        self.anchors.validate(self.task.frames, self.task.joints)?;
        if let DenoiserSpec::Oracle { confusion } = self.denoiser {
            if !(0.0..1.0).contains(&confusion) {
                return Err(Error::Domain(format!("confusion must lie in [0, 1), got {confusion}")));
            }
        }
        self.schedule.validate()?;
        self.solver.validate()?;
        if let Some(ids) = &self.tokens {
            TokenSeq::new(ids.clone(), w.vocab)?;
            if ids.len() != w.tokens {
                return Err(Error::Shape(format!("{} tokens given, world has {}", ids.len(), w.tokens)));
            }
        }
        if self.bench.repeats == 0 {
            return Err(Error::Domain("bench repeats must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a command needs, built deterministically from the config.
pub struct Prepared {
    pub world: World,
    pub target: Motion,
    pub clean: TokenSeq,
    pub anchors: AnchorSet,
    pub context: DenoiserContext,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let seed = cfg.seed;
    let world = World::build(cfg.world, substream(seed, Stream::Codebook), substream(seed, Stream::Rig))?;
    let task = SynthTask { seed: substream(seed, Stream::Motion).wrapping_add(cfg.task.seed), ..cfg.task };
    let target = make_motion(&task)?;
    let clean = world.tokenize(&target)?;
    let anchors = cfg.anchors.build(&target, seed)?;
    let features = build_features(&anchors, target.frames())?;
    let w_in = gaussian(features.width(), cfg.world.token_dim, 1.0, &mut stream_rng(seed, Stream::Memory));
    let memory = encode_memory(&features, cfg.world.frames_per_token, &w_in)?;
    let context = DenoiserContext { memory: Some(memory), text: None };
    Ok(Prepared { world, target, clean, anchors, context })
}

pub fn sample_tokens(cfg: &RunConfig, prep: &Prepared) -> Result<SampleRun> {
    let mut denoiser: Box<dyn Denoiser> = match cfg.denoiser {
        DenoiserSpec::Oracle { confusion } => Box::new(oracle_denoiser(
            prep.clean.clone(),
            confusion,
            cfg.world.vocab,
            substream(cfg.seed, Stream::Denoiser),
        )?),
        DenoiserSpec::Uniform => Box::new(UniformDenoiser::new(cfg.world.vocab, substream(cfg.seed, Stream::Denoiser))),
    };
    sample(
        denoiser.as_mut(),
        cfg.world.tokens,
        &prep.world.codebook,
        &cfg.schedule,
        &prep.context,
        &mut stream_rng(cfg.seed, Stream::Sampler),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub token_match: f64,
    pub control_error: f64,
    /// False when there are no anchors and `control_error` is the 0 convention.
    pub control_error_defined: bool,
    pub anchors: usize,
    pub steps: usize,
    pub tokens: usize,
    pub vocab: usize,
}

pub struct SampleOutput {
    pub summary: SampleSummary,
    pub run: SampleRun,
    pub motion: Motion,
}

pub fn run_sample(cfg: &RunConfig) -> Result<SampleOutput> {
    let prep = prepare(cfg)?;
    let run = sample_tokens(cfg, &prep)?;
    let motion = prep.world.decoder.decode(soft_init(&run.tokens, &prep.world.codebook)?.values())?;
    let err = control_error(&motion, &prep.anchors)?;
    let summary = SampleSummary {
        token_match: run.tokens.match_rate(&prep.clean),
        control_error: err.mean,
        control_error_defined: !err.is_empty(),
        anchors: err.anchors,
        steps: cfg.schedule.steps,
        tokens: cfg.world.tokens,
        vocab: cfg.world.vocab,
    };
    Ok(SampleOutput { summary, run, motion })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineSummary {
    pub control_error_before: f64,
    pub control_error_after: f64,
    pub control_error_defined: bool,
    pub anchor_loss_before: f64,
    pub anchor_loss_after: f64,
    pub supervised_anchor_loss_before: f64,
    pub supervised_anchor_loss_after: f64,
    pub residual_norms_before: Vec<f64>,
    pub residual_norms_after: Vec<f64>,
    pub token_match: f64,
    pub anchors: usize,
    pub intervals: usize,
    pub steps: usize,
}

pub struct RefineOutput {
    pub summary: RefineSummary,
    pub sample: Option<SampleRun>,
    pub refine: RefineRun,
    pub before: Motion,
    pub after: Motion,
    pub anchors: AnchorSet,
}

pub fn run_refine(cfg: &RunConfig) -> Result<RefineOutput> {
    let prep = prepare(cfg)?;
    let (tokens, sample_run) = match &cfg.tokens {
        Some(ids) => (TokenSeq::new(ids.clone(), cfg.world.vocab)?, None),
        None => {
            let run = sample_tokens(cfg, &prep)?;
            (run.tokens.clone(), Some(run))
        }
    };
    let init = soft_init(&tokens, &prep.world.codebook)?;
    let dec = &prep.world.decoder;
    let before = dec.decode(init.values())?;
    let intervals = build_intervals(&prep.anchors, before.frames())?;
    let res_before = residuals(&before, &prep.anchors)?;
    let refined = refine(&init, dec, &prep.anchors, &intervals, &cfg.solver, cfg.world.frames_per_token)?;
    let after = dec.decode(refined.tokens.values())?;
    let err_before = control_error(&before, &prep.anchors)?;
    let err_after = control_error(&after, &prep.anchors)?;
    let delta = cfg.support_radius;
    let summary = RefineSummary {
        control_error_before: err_before.mean,
        control_error_after: err_after.mean,
        control_error_defined: !err_before.is_empty(),
        anchor_loss_before: anchor_loss(&before, &prep.anchors)?,
        anchor_loss_after: anchor_loss(&after, &prep.anchors)?,
        supervised_anchor_loss_before: supervised_anchor_loss(&before, &prep.target, &prep.anchors, delta)?,
        supervised_anchor_loss_after: supervised_anchor_loss(&after, &prep.target, &prep.anchors, delta)?,
        residual_norms_before: res_before.norms(),
        residual_norms_after: residuals(&after, &prep.anchors)?.norms(),
        token_match: tokens.match_rate(&prep.clean),
        anchors: prep.anchors.len(),
        intervals: intervals.len(),
        steps: cfg.solver.steps,
    };
    Ok(RefineOutput { summary, sample: sample_run, refine: refined, before, after, anchors: prep.anchors })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub setting: String,
    pub steps: usize,
    pub time_per_sample_s: f64,
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("setting,steps,time_per_sample_s\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.9}\n", r.setting, r.steps, r.time_per_sample_s));
    }
    out
}

/// Mean wall time of sampling and of refinement at each configured step count.
pub fn run_bench(cfg: &RunConfig) -> Result<Vec<BenchRow>> {
    let prep = prepare(cfg)?;
    let reps = cfg.bench.repeats;
    let mut rows = Vec::new();
    let start = Instant::now();
    let mut tokens = prep.clean.clone();
    for _ in 0..reps {
        tokens = std::hint::black_box(sample_tokens(cfg, &prep)?).tokens;
    }
    rows.push(BenchRow {
        setting: "sample".into(),
        steps: cfg.schedule.steps,
        time_per_sample_s: start.elapsed().as_secs_f64() / reps as f64,
    });
    let init = soft_init(&tokens, &prep.world.codebook)?;
    let intervals = build_intervals(&prep.anchors, prep.target.frames())?;
    for &steps in &cfg.bench.refine_steps {
        let solver = SolverConfig { steps, ..cfg.solver };
        let start = Instant::now();
        for _ in 0..reps {
            std::hint::black_box(refine(
                &init,
                &prep.world.decoder,
                &prep.anchors,
                &intervals,
                &solver,
                cfg.world.frames_per_token,
            )?);
        }
        rows.push(BenchRow {
            setting: format!("rs{steps}"),
            steps,
            time_per_sample_s: start.elapsed().as_secs_f64() / reps as f64,
        });
    }
    Ok(rows)
}

#[derive(Debug, Parser)]
#[command(name = "anchorroute", version, about = "Sparse-anchor motion synthesis on synthetic tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// JSON run configuration; the standard synthetic task when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Refinement step preset; replaces `solver.steps`.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample tokens, decode them and write the motion and sampler trace.
    Sample(CommonArgs),
    /// Sample (or take given) tokens and refine them against the anchors.
    Refine(CommonArgs),
    /// Time sampling and refinement.
    Bench(CommonArgs),
}

/// Failure classes with distinct exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

pub fn load_config(args: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<RunConfig>(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::standard(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out = Some(out.clone());
    }
    if let Some(p) = args.preset {
        cfg.solver.steps = p.steps();
    }
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_motion(path: &Path, m: &Motion) -> Result<()> {
    ArrayDoc::from_motion(m).save(path)
}

#[derive(Serialize)]
struct TokenDoc<'a> {
    ids: &'a [usize],
}

#[derive(Serialize)]
struct Timing {
    wall_time_s: f64,
}

pub fn cmd_sample(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = out_dir(cfg)?;
    let out = run_sample(cfg)?;
    write_json(&dir.join("summary.json"), &out.summary)?;
    fs::write(dir.join("trace.csv"), out.run.trace_csv())?;
    write_json(&dir.join("tokens.json"), &TokenDoc { ids: out.run.tokens.ids() })?;
    write_motion(&dir.join("motion.json"), &out.motion)?;
    Ok(dir)
}

/// Writes everything except `timing.json`, which holds the only
/// run-dependent value and is kept apart so the rest stays byte-stable.
pub fn cmd_refine(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = out_dir(cfg)?;
    let start = Instant::now();
    let out = run_refine(cfg)?;
    let wall = start.elapsed().as_secs_f64();
    write_json(&dir.join("summary.json"), &out.summary)?;
    fs::write(dir.join("trace.csv"), out.refine.trace_csv())?;
    if let Some(run) = &out.sample {
        fs::write(dir.join("sample_trace.csv"), run.trace_csv())?;
    }
    fs::write(dir.join("anchors.json"), out.anchors.to_json()?)?;
    write_motion(&dir.join("motion_before.json"), &out.before)?;
    write_motion(&dir.join("motion.json"), &out.after)?;
    write_json(&dir.join("timing.json"), &Timing { wall_time_s: wall })?;
    Ok(dir)
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = out_dir(cfg)?;
    fs::write(dir.join("bench.csv"), bench_csv(&run_bench(cfg)?))?;
    Ok(dir)
}

pub fn run(cli: Cli) -> Result<PathBuf, CliError> {
    let (args, cmd): (_, fn(&RunConfig) -> Result<PathBuf>) = match &cli.command {
        Command::Sample(a) => (a, cmd_sample),
        Command::Refine(a) => (a, cmd_refine),
        Command::Bench(a) => (a, cmd_bench),
    };
    let cfg = load_config(args)?;
    Ok(cmd(&cfg)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substreams_differ_and_repeat() {
        let s: Vec<u64> = [Stream::Motion, Stream::Codebook, Stream::Rig, Stream::Anchors, Stream::Denoiser, Stream::Sampler, Stream::Memory]
            .iter()
            .map(|&k| substream(7, k))
            .collect();
        let mut u = s.clone();
        u.sort_unstable();
        u.dedup();
        assert_eq!(u.len(), s.len());
        assert_eq!(substream(7, Stream::Rig), s[2]);
        assert_ne!(substream(8, Stream::Rig), s[2]);
    }

    #[test]
    fn standard_config_round_trips_strictly() {
        let cfg = RunConfig::standard();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["solver"]["bogus"] = 1.into();
        assert!(RunConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = RunConfig::from_json(
            r#"{"task":{"motion":{"kind":"circle","radius":1.0,"period":32},"frames":64,"joints":6},
                "anchors":{"family":"planar_root","placement":{"frames":[0,20,40,63]}}}"#,
        )
        .unwrap();
        assert_eq!(cfg.support_radius, 2);
        assert_eq!(cfg.schedule, TmdSchedule::default());
        assert_eq!(cfg.solver, SolverConfig::default());
    }

    #[test]
    fn inconsistent_shapes_are_config_errors() {
        let mut cfg = RunConfig::standard();
        cfg.task.frames = 60;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::standard();
        cfg.anchors.placement = Placement::Frames(vec![64]);
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::standard();
        cfg.anchors = AnchorSpec { family: FamilyTag::BodyPoint, joint: Some(6), tolerance: None, placement: Placement::Sample(2) };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sampled_anchors_come_from_the_task_motion() {
        let cfg = RunConfig::standard();
        let prep = prepare(&cfg).unwrap();
        assert_eq!(prep.anchors.len(), 4);
        assert_eq!(control_error(&prep.target, &prep.anchors).unwrap().mean, 0.0);
        assert_eq!(prep.context.memory.as_ref().unwrap().tokens(), cfg.world.tokens);
    }

    #[test]
    fn given_tokens_skip_sampling() {
        let mut cfg = RunConfig::standard();
        let prep = prepare(&cfg).unwrap();
        cfg.tokens = Some(prep.clean.ids().to_vec());
        cfg.solver.steps = 0;
        let out = run_refine(&cfg).unwrap();
        assert!(out.sample.is_none());
        assert_eq!(out.summary.token_match, 1.0);
        assert_eq!(out.summary.control_error_before, out.summary.control_error_after);
    }

    #[test]
    fn bench_csv_format() {
        let rows = [BenchRow { setting: "rs100".into(), steps: 100, time_per_sample_s: 0.5 }];
        assert_eq!(bench_csv(&rows), "setting,steps,time_per_sample_s\nrs100,100,0.500000000\n");
    }
}
