//! Anchor scaffold: motions, control families, anchor sets and everything
//! derived from them before and after generation (condition features,
//! support supervision, residuals and interval partitions).

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spline::NaturalSpline;

/// Tolerance used when an anchor document does not carry one, meters.
pub const DEFAULT_TOLERANCE: f64 = 0.05;

/// Frame-indexed 3D joint positions, stored row-major as `[frame][joint][xyz]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Motion {
    frames: usize,
    joints: usize,
    positions: Vec<f64>,
}

impl Motion {
    pub fn new(frames: usize, joints: usize, positions: Vec<f64>) -> Result<Self> {
        if frames < 2 {
            return Err(Error::InvalidMotion(format!("need at least 2 frames, got {frames}")));
        }
        if joints == 0 {
            return Err(Error::InvalidMotion("need at least one joint".into()));
        }
        if positions.len() != frames * joints * 3 {
            return Err(Error::InvalidMotion(format!(
                "expected {} values for {frames}x{joints}x3, got {}",
                frames * joints * 3,
                positions.len()
            )));
        }
        if positions.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("motion positions"));
        }
        Ok(Self { frames, joints, positions })
    }

    pub fn zeros(frames: usize, joints: usize) -> Result<Self> {
        Self::new(frames, joints, vec![0.0; frames * joints * 3])
    }

    pub fn from_fn(
        frames: usize,
        joints: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Result<Self> {
        let mut positions = Vec::with_capacity(frames * joints * 3);
        for t in 0..frames {
            for j in 0..joints {
                positions.extend_from_slice(&f(t, j));
            }
        }
        Self::new(frames, joints, positions)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.positions
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.positions
    }

    #[inline]
    pub fn index(&self, frame: usize, joint: usize, axis: usize) -> usize {
        (frame * self.joints + joint) * 3 + axis
    }

    pub fn point(&self, frame: usize, joint: usize) -> [f64; 3] {
        let i = self.index(frame, joint, 0);
        [self.positions[i], self.positions[i + 1], self.positions[i + 2]]
    }

    pub fn same_shape(&self, other: &Motion) -> bool {
        self.frames == other.frames && self.joints == other.joints
    }

    // Cotangent accumulation; callers only add finite values.
    pub(crate) fn add(&mut self, frame: usize, joint: usize, axis: usize, value: f64) {
        let i = self.index(frame, joint, axis);
        self.positions[i] += value;
    }
}

/// Which geometric quantity a family controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FamilyKind {
    /// Root joint xyz.
    Root3D,
    /// Root joint (x, z), the horizontal plane.
    PlanarRoot,
    /// A single body joint's xyz.
    BodyPoint { joint: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlFamily {
    kind: FamilyKind,
    tolerance: f64,
}

pub const ROOT_JOINT: usize = 0;
const XYZ: [usize; 3] = [0, 1, 2];
const XZ: [usize; 2] = [0, 2];

impl ControlFamily {
    pub fn new(kind: FamilyKind, tolerance: f64) -> Result<Self> {
        if !(tolerance.is_finite() && tolerance > 0.0) {
            return Err(Error::InvalidFamily(format!("tolerance must be > 0, got {tolerance}")));
        }
        Ok(Self { kind, tolerance })
    }

    pub fn root3d() -> Self {
        Self { kind: FamilyKind::Root3D, tolerance: DEFAULT_TOLERANCE }
    }

    pub fn planar_root() -> Self {
        Self { kind: FamilyKind::PlanarRoot, tolerance: DEFAULT_TOLERANCE }
    }

    pub fn body_point(joint: usize) -> Self {
        Self { kind: FamilyKind::BodyPoint { joint }, tolerance: DEFAULT_TOLERANCE }
    }

    pub fn with_tolerance(self, tolerance: f64) -> Result<Self> {
        Self::new(self.kind, tolerance)
    }

    pub fn kind(&self) -> FamilyKind {
        self.kind
    }

    /// Residual tolerance ρ_f, meters.
    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    /// Control-space dimension d_f.
    pub fn dim(&self) -> usize {
        self.axes().len()
    }

    /// Joint observed by this family.
    pub fn joint(&self) -> usize {
        match self.kind {
            FamilyKind::BodyPoint { joint } => joint,
            _ => ROOT_JOINT,
        }
    }

    /// Motion axes that make up the observation, in order.
    pub fn axes(&self) -> &'static [usize] {
        match self.kind {
            FamilyKind::PlanarRoot => &XZ,
            _ => &XYZ,
        }
    }

    pub fn check_joints(&self, joints: usize) -> Result<()> {
        if self.joint() >= joints {
            return Err(Error::InvalidFamily(format!(
                "joint {} out of range for {joints} joints",
                self.joint()
            )));
        }
        Ok(())
    }

    /// Observation at one frame; only the first `dim()` entries are meaningful.
    pub fn observe_frame(&self, motion: &Motion, frame: usize) -> [f64; 3] {
        let p = motion.point(frame, self.joint());
        let mut out = [0.0; 3];
        for (o, &axis) in out.iter_mut().zip(self.axes()) {
            *o = p[axis];
        }
        out
    }
}

/// O_f: the per-frame observation as a T×d_f matrix.
pub fn observe(motion: &Motion, family: &ControlFamily) -> Result<DMatrix<f64>> {
    family.check_joints(motion.joints())?;
    let d = family.dim();
    Ok(DMatrix::from_fn(motion.frames(), d, |t, k| motion.point(t, family.joint())[family.axes()[k]]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub frame: usize,
    /// Controlled component: the observed joint index.
    pub selector: usize,
    pub target: Vec<f64>,
}

/// Sparse anchors of one family, sorted by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    family: ControlFamily,
    anchors: Vec<Anchor>,
}

impl AnchorSet {
    pub fn new(family: ControlFamily, mut anchors: Vec<Anchor>) -> Result<Self> {
        let d = family.dim();
        for a in &anchors {
            if a.target.len() != d {
                return Err(Error::InvalidAnchors(format!(
                    "anchor at frame {} has {} components, family needs {d}",
                    a.frame,
                    a.target.len()
                )));
            }
            if a.target.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("anchor target"));
            }
            if a.selector != family.joint() {
                return Err(Error::InvalidAnchors(format!(
                    "anchor at frame {} selects joint {}, family observes joint {}",
                    a.frame,
                    a.selector,
                    family.joint()
                )));
            }
        }
        anchors.sort_by_key(|a| (a.frame, a.selector));
        if let Some(w) = anchors.windows(2).find(|w| (w[0].frame, w[0].selector) == (w[1].frame, w[1].selector)) {
            return Err(Error::InvalidAnchors(format!("duplicate anchor at frame {}", w[0].frame)));
        }
        Ok(Self { family, anchors })
    }

    /// Anchors at `frames` whose targets are the family observation of `motion`.
    pub fn from_motion(motion: &Motion, family: ControlFamily, frames: &[usize]) -> Result<Self> {
        family.check_joints(motion.joints())?;
        let d = family.dim();
        let anchors = frames
            .iter()
            .map(|&frame| {
                if frame >= motion.frames() {
                    return Err(Error::InvalidAnchors(format!("frame {frame} out of range")));
                }
                Ok(Anchor {
                    frame,
                    selector: family.joint(),
                    target: family.observe_frame(motion, frame)[..d].to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(family, anchors)
    }

    pub fn empty(family: ControlFamily) -> Self {
        Self { family, anchors: Vec::new() }
    }

    pub fn family(&self) -> &ControlFamily {
        &self.family
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.family.dim()
    }

    /// Index of the anchor placed at `frame`, if any.
    pub fn at_frame(&self, frame: usize) -> Option<usize> {
        self.anchors.binary_search_by_key(&frame, |a| a.frame).ok()
    }

    pub fn check_frames(&self, frames: usize) -> Result<()> {
        match self.anchors.last() {
            Some(a) if a.frame >= frames => Err(Error::InvalidAnchors(format!(
                "anchor frame {} out of range for {frames} frames",
                a.frame
            ))),
            _ => Ok(()),
        }
    }

    pub fn check_motion(&self, motion: &Motion) -> Result<()> {
        self.family.check_joints(motion.joints())?;
        self.check_frames(motion.frames())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&AnchorSetDoc::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str::<AnchorSetDoc>(text)?.try_into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FamilyTag {
    #[serde(rename = "root3d")]
    Root3D,
    #[serde(rename = "planar_root")]
    PlanarRoot,
    #[serde(rename = "body_point")]
    BodyPoint,
}

/// On-disk anchor set: `{"family", "joint"?, "tolerance"?, "anchors": [{"frame", "target"}]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorSetDoc {
    pub family: FamilyTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    pub anchors: Vec<AnchorDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorDoc {
    pub frame: usize,
    pub target: Vec<f64>,
}

impl FamilyTag {
    pub fn to_kind(self, joint: Option<usize>) -> Result<FamilyKind> {
        match (self, joint) {
            (FamilyTag::Root3D, None) => Ok(FamilyKind::Root3D),
            (FamilyTag::PlanarRoot, None) => Ok(FamilyKind::PlanarRoot),
            (FamilyTag::BodyPoint, Some(joint)) => Ok(FamilyKind::BodyPoint { joint }),
            (FamilyTag::BodyPoint, None) => {
                Err(Error::InvalidFamily("body_point requires a joint index".into()))
            }
            (_, Some(_)) => Err(Error::InvalidFamily("joint is only valid for body_point".into())),
        }
    }
}

impl From<&AnchorSet> for AnchorSetDoc {
    fn from(set: &AnchorSet) -> Self {
        let (family, joint) = match set.family.kind {
            FamilyKind::Root3D => (FamilyTag::Root3D, None),
            FamilyKind::PlanarRoot => (FamilyTag::PlanarRoot, None),
            FamilyKind::BodyPoint { joint } => (FamilyTag::BodyPoint, Some(joint)),
        };
        Self {
            family,
            joint,
            tolerance: Some(set.family.tolerance),
            anchors: set
                .anchors
                .iter()
                .map(|a| AnchorDoc { frame: a.frame, target: a.target.clone() })
                .collect(),
        }
    }
}

impl TryFrom<AnchorSetDoc> for AnchorSet {
    type Error = Error;

    fn try_from(doc: AnchorSetDoc) -> Result<Self> {
        let kind = doc.family.to_kind(doc.joint)?;
        let family = ControlFamily::new(kind, doc.tolerance.unwrap_or(DEFAULT_TOLERANCE))?;
        let anchors = doc
            .anchors
            .into_iter()
            .map(|a| Anchor { frame: a.frame, selector: family.joint(), target: a.target })
            .collect();
        AnchorSet::new(family, anchors)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sum of squared control-space distances between the motion and every anchor target.
pub fn anchor_loss(motion: &Motion, anchors: &AnchorSet) -> Result<f64> {
    anchors.check_motion(motion)?;
    let fam = anchors.family();
    let d = fam.dim();
    Ok(anchors
        .anchors()
        .iter()
        .map(|a| sq_dist(&fam.observe_frame(motion, a.frame)[..d], &a.target))
        .sum())
}

/// Interpolation prior over the anchors and the mask of frames where it is defined.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpPrior {
    /// T×d_f, zero outside the mask.
    pub values: DMatrix<f64>,
    pub mask: Vec<f64>,
}

/// Natural cubic spline per component through the anchors (three or more),
/// linear with two, constant with one. Defined only between the first and
/// last anchor frame.
pub fn interp_prior(anchors: &AnchorSet, frames: usize) -> Result<InterpPrior> {
    if frames == 0 {
        return Err(Error::Domain("prior needs at least one frame".into()));
    }
    anchors.check_frames(frames)?;
    let d = anchors.dim();
    let mut values = DMatrix::zeros(frames, d);
    let mut mask = vec![0.0; frames];
    let list = anchors.anchors();
    let (Some(first), Some(last)) = (list.first(), list.last()) else {
        return Ok(InterpPrior { values, mask });
    };
    // Anchors are unique per frame, so knots are strictly increasing.
    let xs: Vec<f64> = list.iter().map(|a| a.frame as f64).collect();
    for k in 0..d {
        let ys: Vec<f64> = list.iter().map(|a| a.target[k]).collect();
        match list.len() {
            1 => values[(first.frame, k)] = ys[0],
            2 => {
                let span = xs[1] - xs[0];
                for t in first.frame..=last.frame {
                    let w = (t as f64 - xs[0]) / span;
                    values[(t, k)] = (1.0 - w) * ys[0] + w * ys[1];
                }
            }
            _ => {
                let spline = NaturalSpline::fit(&xs, &ys).expect("strictly increasing knots");
                for t in first.frame..=last.frame {
                    values[(t, k)] = spline.eval(t as f64);
                }
            }
        }
        // knots are reproduced exactly
        for a in list {
            values[(a.frame, k)] = a.target[k];
        }
    }
    mask[first.frame..=last.frame].iter_mut().for_each(|m| *m = 1.0);
    Ok(InterpPrior { values, mask })
}

/// Per-frame anchor-condition features `[m_a⊙a, m_p⊙p, Δp, m_p, m_a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaffoldFeatures {
    dim_f: usize,
    /// T×(3d_f+2)
    matrix: DMatrix<f64>,
}

impl ScaffoldFeatures {
    pub fn from_matrix(dim_f: usize, matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.ncols() != 3 * dim_f + 2 {
            return Err(Error::Shape(format!(
                "feature width {} does not match 3*{dim_f}+2",
                matrix.ncols()
            )));
        }
        Ok(Self { dim_f, matrix })
    }

    pub fn dim_f(&self) -> usize {
        self.dim_f
    }

    pub fn width(&self) -> usize {
        3 * self.dim_f + 2
    }

    pub fn frames(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn row(&self, t: usize) -> Vec<f64> {
        self.matrix.row(t).iter().copied().collect()
    }

    pub fn anchor_value(&self, t: usize) -> Vec<f64> {
        self.slot(t, 0)
    }

    pub fn prior_value(&self, t: usize) -> Vec<f64> {
        self.slot(t, 1)
    }

    pub fn prior_diff(&self, t: usize) -> Vec<f64> {
        self.slot(t, 2)
    }

    pub fn prior_mask(&self, t: usize) -> f64 {
        self.matrix[(t, 3 * self.dim_f)]
    }

    pub fn anchor_mask(&self, t: usize) -> f64 {
        self.matrix[(t, 3 * self.dim_f + 1)]
    }

    fn slot(&self, t: usize, i: usize) -> Vec<f64> {
        (0..self.dim_f).map(|k| self.matrix[(t, i * self.dim_f + k)]).collect()
    }
}

pub fn build_features(anchors: &AnchorSet, frames: usize) -> Result<ScaffoldFeatures> {
    let prior = interp_prior(anchors, frames)?;
    let d = anchors.dim();
    let mut m = DMatrix::zeros(frames, 3 * d + 2);
    for a in anchors.anchors() {
        for k in 0..d {
            m[(a.frame, k)] = a.target[k];
        }
        m[(a.frame, 3 * d + 1)] = 1.0;
    }
    for t in 0..frames {
        let mp = prior.mask[t];
        m[(t, 3 * d)] = mp;
        for k in 0..d {
            m[(t, d + k)] = mp * prior.values[(t, k)];
        }
        // The difference is zero at the sequence start and wherever the
        // previous frame lies outside the prior's support.
        if t > 0 && mp > 0.0 && prior.mask[t - 1] > 0.0 {
            for k in 0..d {
                m[(t, 2 * d + k)] = prior.values[(t, k)] - prior.values[(t - 1, k)];
            }
        }
    }
    ScaffoldFeatures::from_matrix(d, m)
}

/// Nearest-anchor assignment over the local support `U_δ`; ties go to the lower anchor index.
pub fn support_assignment(anchors: &AnchorSet, radius: usize, frames: usize) -> BTreeMap<usize, usize> {
    let mut out = BTreeMap::new();
    for t in 0..frames {
        let mut best: Option<(usize, usize)> = None;
        for (n, a) in anchors.anchors().iter().enumerate() {
            let dist = t.abs_diff(a.frame);
            if dist <= radius && best.is_none_or(|(_, bd)| dist < bd) {
                best = Some((n, dist));
            }
        }
        if let Some((n, _)) = best {
            out.insert(t, n);
        }
    }
    out
}

/// Support-frame loss against ground-truth observations.
pub fn supervised_anchor_loss(
    motion: &Motion,
    gt_motion: &Motion,
    anchors: &AnchorSet,
    radius: usize,
) -> Result<f64> {
    if !motion.same_shape(gt_motion) {
        return Err(Error::Shape(format!(
            "motion is {}x{}, ground truth is {}x{}",
            motion.frames(),
            motion.joints(),
            gt_motion.frames(),
            gt_motion.joints()
        )));
    }
    anchors.check_motion(motion)?;
    let fam = anchors.family();
    let d = fam.dim();
    // All anchors of a set share one selector, so the assigned anchor's subspace is the family's.
    Ok(support_assignment(anchors, radius, motion.frames())
        .keys()
        .map(|&t| sq_dist(&fam.observe_frame(motion, t)[..d], &fam.observe_frame(gt_motion, t)[..d]))
        .sum())
}

/// Anchors of a generated motion paired with their residuals `observation − target`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualScaffold {
    pub anchors: AnchorSet,
    pub residuals: Vec<Vec<f64>>,
}

impl ResidualScaffold {
    pub fn squared_norm_sum(&self) -> f64 {
        self.residuals.iter().flatten().map(|r| r * r).sum()
    }

    pub fn norms(&self) -> Vec<f64> {
        self.residuals.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
    }
}

pub fn residuals(motion: &Motion, anchors: &AnchorSet) -> Result<ResidualScaffold> {
    anchors.check_motion(motion)?;
    let fam = anchors.family();
    let d = fam.dim();
    let residuals = anchors
        .anchors()
        .iter()
        .map(|a| {
            let obs = fam.observe_frame(motion, a.frame);
            (0..d).map(|k| obs[k] - a.target[k]).collect()
        })
        .collect();
    Ok(ResidualScaffold { anchors: anchors.clone(), residuals })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub start: usize,
    pub end: usize,
}

impl Interval {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Contiguous cover of `[0, T−1]` by intervals between consecutive anchor frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntervalPartition {
    intervals: Vec<Interval>,
}

impl IntervalPartition {
    pub fn from_intervals(intervals: Vec<Interval>) -> Result<Self> {
        if intervals.is_empty() {
            return Err(Error::Domain("partition needs at least one interval".into()));
        }
        if intervals.iter().any(Interval::is_empty) {
            return Err(Error::Domain("zero-length interval".into()));
        }
        if intervals.first().map(|i| i.start) != Some(0)
            || intervals.windows(2).any(|w| w[0].end != w[1].start)
        {
            return Err(Error::Domain("intervals must be contiguous from frame 0".into()));
        }
        Ok(Self { intervals })
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.intervals
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn last_frame(&self) -> usize {
        self.intervals.last().map_or(0, |i| i.end)
    }

    /// Interval holding a (possibly fractional) frame position. Intervals are
    /// right-open except the last, which includes `T−1`.
    pub fn locate(&self, position: f64) -> Option<usize> {
        let n = self.intervals.len();
        self.intervals.iter().enumerate().find_map(|(i, iv)| {
            let (s, e) = (iv.start as f64, iv.end as f64);
            let inside = position >= s && (position < e || (i + 1 == n && position <= e));
            inside.then_some(i)
        })
    }
}

pub fn build_intervals(anchors: &AnchorSet, frames: usize) -> Result<IntervalPartition> {
    if frames < 2 {
        return Err(Error::Domain(format!("intervals need at least 2 frames, got {frames}")));
    }
    anchors.check_frames(frames)?;
    let mut ends: Vec<usize> = std::iter::once(0)
        .chain(anchors.anchors().iter().map(|a| a.frame))
        .chain(std::iter::once(frames - 1))
        .collect();
    ends.sort_unstable();
    ends.dedup();
    IntervalPartition::from_intervals(
        ends.windows(2).map(|w| Interval { start: w[0], end: w[1] }).collect(),
    )
}
