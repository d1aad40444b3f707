//! Motion sequences of 3DMM coefficients and the 64+6 parameter layout.
//!
//! A full frame holds 64 facial parameters followed by 6 head-pose
//! parameters. Thirteen of the facial parameters encode the mouth region;
//! which thirteen is configurable because the underlying morphable-model
//! basis assigns them, not this crate. The remaining 51 facial parameters
//! form the expression slice and indices 64..70 the pose slice.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FACIAL_DIM: usize = 64;
pub const POSE_DIM: usize = 6;
pub const TOTAL_DIM: usize = FACIAL_DIM + POSE_DIM;
pub const MOUTH_DIM: usize = 13;
pub const EXPRESSION_DIM: usize = FACIAL_DIM - MOUTH_DIM;

/// Minimum per-dimension standard deviation kept in [`NormalizationStats`].
pub const STD_FLOOR: f64 = 1e-8;

const VALID_DIMS: [usize; 4] = [POSE_DIM, MOUTH_DIM, EXPRESSION_DIM, TOTAL_DIM];

/// Which of the three submodels a sliced sequence belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Lips,
    Expression,
    Pose,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Lips, ModelKind::Expression, ModelKind::Pose];

    pub fn dim(self) -> usize {
        match self {
            ModelKind::Lips => MOUTH_DIM,
            ModelKind::Expression => EXPRESSION_DIM,
            ModelKind::Pose => POSE_DIM,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Lips => "lips",
            ModelKind::Expression => "expression",
            ModelKind::Pose => "pose",
        }
    }

    pub fn parse(s: &str) -> Option<ModelKind> {
        match s {
            "lips" => Some(ModelKind::Lips),
            "expression" => Some(ModelKind::Expression),
            "pose" => Some(ModelKind::Pose),
            _ => None,
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Assignment of the 70 columns to mouth, expression, and pose slices.
///
/// `mouth_indices` is an ordered pick of 13 distinct facial columns; the
/// expression indices are the remaining facial columns in ascending order;
/// pose is always the trailing 64..70 block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterLayout {
    mouth_indices: Vec<usize>,
    expression_indices: Vec<usize>,
}

impl ParameterLayout {
    /// Mouth occupies the first 13 facial columns.
    pub fn standard() -> Self {
        ParameterLayout::with_mouth_indices((0..MOUTH_DIM).collect()).expect("standard layout")
    }

    pub fn with_mouth_indices(mouth_indices: Vec<usize>) -> Result<Self> {
        if mouth_indices.len() != MOUTH_DIM {
            return Err(Error::dimension(
                "mouth indices",
                MOUTH_DIM,
                mouth_indices.len(),
            ));
        }
        let mut seen = [false; FACIAL_DIM];
        for &i in &mouth_indices {
            if i >= FACIAL_DIM {
                return Err(Error::contract(format!(
                    "mouth index {i} outside facial range 0..{FACIAL_DIM}"
                )));
            }
            if seen[i] {
                return Err(Error::contract(format!("duplicate mouth index {i}")));
            }
            seen[i] = true;
        }
        let expression_indices = (0..FACIAL_DIM).filter(|&i| !seen[i]).collect();
        Ok(ParameterLayout {
            mouth_indices,
            expression_indices,
        })
    }

    pub fn mouth_indices(&self) -> &[usize] {
        &self.mouth_indices
    }

    pub fn expression_indices(&self) -> &[usize] {
        &self.expression_indices
    }

    pub fn pose_range(&self) -> Range<usize> {
        FACIAL_DIM..TOTAL_DIM
    }

    /// Column indices of `kind` within the full 70-dim frame.
    pub fn indices(&self, kind: ModelKind) -> Vec<usize> {
        match kind {
            ModelKind::Lips => self.mouth_indices.clone(),
            ModelKind::Expression => self.expression_indices.clone(),
            ModelKind::Pose => self.pose_range().collect(),
        }
    }

    /// Checks the partition invariant; deserialized layouts go through here.
    pub fn validate(&self) -> Result<()> {
        let rebuilt = ParameterLayout::with_mouth_indices(self.mouth_indices.clone())?;
        if rebuilt.expression_indices != self.expression_indices {
            return Err(Error::contract(
                "expression indices are not the ordered complement of mouth indices",
            ));
        }
        Ok(())
    }
}

impl Default for ParameterLayout {
    fn default() -> Self {
        ParameterLayout::standard()
    }
}

/// A sequence of motion-parameter frames, row-major `[frames × dim]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionSequence {
    dim: usize,
    fps: f64,
    values: Vec<f64>,
}

impl MotionSequence {
    /// `dim` must be one of 6, 13, 51, 70 and every value finite.
    pub fn new(dim: usize, values: Vec<f64>, fps: f64) -> Result<Self> {
        if !VALID_DIMS.contains(&dim) {
            return Err(Error::dimension("motion dim", "one of 6/13/51/70", dim));
        }
        if values.is_empty() || values.len() % dim != 0 {
            return Err(Error::dimension(
                "motion values",
                format!("nonzero multiple of {dim}"),
                values.len(),
            ));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("motion sequence values".into()));
        }
        Ok(MotionSequence { dim, fps, values })
    }

    pub fn zeros(frames: usize, dim: usize, fps: f64) -> Result<Self> {
        MotionSequence::new(dim, vec![0.0; frames * dim], fps)
    }

    pub fn num_frames(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn first_frame(&self) -> &[f64] {
        self.frame(0)
    }

    pub fn last_frame(&self) -> &[f64] {
        self.frame(self.num_frames() - 1)
    }

    #[cfg(test)]
    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// Select the columns of one submodel, preserving layout order.
pub fn slice_motion(
    full: &MotionSequence,
    kind: ModelKind,
    layout: &ParameterLayout,
) -> Result<MotionSequence> {
    if full.dim() != TOTAL_DIM {
        return Err(Error::dimension("slice_motion input", TOTAL_DIM, full.dim()));
    }
    let cols = layout.indices(kind);
    let n = full.num_frames();
    let mut values = Vec::with_capacity(n * cols.len());
    for i in 0..n {
        let frame = full.frame(i);
        for &c in &cols {
            values.push(frame[c]);
        }
    }
    MotionSequence::new(kind.dim(), values, full.fps())
}

/// Inverse of [`slice_motion`]: reassemble a full 70-dim sequence from the
/// three submodel slices.
pub fn merge_motion(
    lips: &MotionSequence,
    expression: &MotionSequence,
    pose: &MotionSequence,
    layout: &ParameterLayout,
) -> Result<MotionSequence> {
    for (seq, kind) in [
        (lips, ModelKind::Lips),
        (expression, ModelKind::Expression),
        (pose, ModelKind::Pose),
    ] {
        if seq.dim() != kind.dim() {
            return Err(Error::dimension(kind.name(), kind.dim(), seq.dim()));
        }
    }
    let n = lips.num_frames();
    if expression.num_frames() != n || pose.num_frames() != n {
        return Err(Error::contract(format!(
            "merge_motion frame counts differ: lips {n}, expression {}, pose {}",
            expression.num_frames(),
            pose.num_frames()
        )));
    }
    if lips.fps() != expression.fps() || lips.fps() != pose.fps() {
        return Err(Error::contract("merge_motion fps differ across slices"));
    }
    let mut values = vec![0.0; n * TOTAL_DIM];
    for i in 0..n {
        let out = &mut values[i * TOTAL_DIM..(i + 1) * TOTAL_DIM];
        for (k, &c) in layout.mouth_indices().iter().enumerate() {
            out[c] = lips.frame(i)[k];
        }
        for (k, &c) in layout.expression_indices().iter().enumerate() {
            out[c] = expression.frame(i)[k];
        }
        out[FACIAL_DIM..].copy_from_slice(pose.frame(i));
    }
    MotionSequence::new(TOTAL_DIM, values, lips.fps())
}

/// Per-column mean and standard deviation for z-scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl NormalizationStats {
    pub fn identity(dim: usize) -> Self {
        NormalizationStats {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Pooled moments over every frame of every sequence. Standard
    /// deviations are clamped up to [`STD_FLOOR`] so constant columns
    /// stay usable.
    pub fn fit<'a>(seqs: impl IntoIterator<Item = &'a MotionSequence>) -> Result<Self> {
        let mut iter = seqs.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::contract("fit needs at least one sequence"))?;
        let dim = first.dim();
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let mut count = 0usize;
        for seq in std::iter::once(first).chain(iter) {
            if seq.dim() != dim {
                return Err(Error::dimension("fit sequence dim", dim, seq.dim()));
            }
            for i in 0..seq.num_frames() {
                for (j, &v) in seq.frame(i).iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
            }
            count += seq.num_frames();
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / n - m * m).max(0.0)).sqrt().max(STD_FLOOR))
            .collect();
        Ok(NormalizationStats { mean, std })
    }

    pub fn from_parts(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        let stats = NormalizationStats { mean, std };
        stats.validate()?;
        Ok(stats)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() {
            return Err(Error::dimension(
                "stats std",
                self.mean.len(),
                self.std.len(),
            ));
        }
        if !self.mean.iter().all(|v| v.is_finite()) || !self.std.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("normalization stats".into()));
        }
        if let Some(s) = self.std.iter().find(|s| **s < STD_FLOOR) {
            return Err(Error::contract(format!(
                "std {s} below floor {STD_FLOOR}"
            )));
        }
        Ok(())
    }

    /// Restrict 70-dim stats to the columns of one submodel.
    pub fn slice(&self, kind: ModelKind, layout: &ParameterLayout) -> Result<NormalizationStats> {
        if self.dim() != TOTAL_DIM {
            return Err(Error::dimension("stats slice input", TOTAL_DIM, self.dim()));
        }
        let cols = layout.indices(kind);
        Ok(NormalizationStats {
            mean: cols.iter().map(|&c| self.mean[c]).collect(),
            std: cols.iter().map(|&c| self.std[c]).collect(),
        })
    }

    pub fn normalize(&self, x: &MotionSequence) -> Result<MotionSequence> {
        self.apply(x, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, x: &MotionSequence) -> Result<MotionSequence> {
        self.apply(x, |v, m, s| v * s + m)
    }

    fn apply(
        &self,
        x: &MotionSequence,
        f: impl Fn(f64, f64, f64) -> f64,
    ) -> Result<MotionSequence> {
        self.validate()?;
        if x.dim() != self.dim() {
            return Err(Error::dimension("normalize", self.dim(), x.dim()));
        }
        let values = x
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let j = i % self.dim();
                f(v, self.mean[j], self.std[j])
            })
            .collect();
        MotionSequence::new(x.dim(), values, x.fps())
    }
}
