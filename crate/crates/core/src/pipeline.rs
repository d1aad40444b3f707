//! Inference-time assembly: run the three submodels from noise over a
//! condition bundle, stitch chunks into long sequences, optionally freeze
//! head pose, and export motion for an external renderer.
//!
//! Long sequences are generated recursively in non-overlapping chunks.
//! Chunk k > 1 is conditioned on the last generated frame of chunk k-1 as
//! its first-frame condition; there is no crossfade, continuity rests
//! entirely on that conditioning plus the pose model's first-frame loss.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::ConditionBundle;
use crate::dataset::{atomic_write, f32_bytes, f64s_from_f32_bytes};
use crate::denoiser::DenoiserModel;
use crate::diffusion::ScheduleSpec;
use crate::motion::{merge_motion, ModelKind, MotionSequence, ParameterLayout, MOUTH_DIM, TOTAL_DIM};
use crate::numerics::Tensor;
use crate::{Error, Result};

/// The three trained submodels used jointly at inference time.
#[derive(Debug, Clone)]
pub struct ModelSet {
    pub lips: DenoiserModel,
    pub expression: DenoiserModel,
    pub pose: DenoiserModel,
}

impl ModelSet {
    pub fn new(lips: DenoiserModel, expression: DenoiserModel, pose: DenoiserModel) -> Result<Self> {
        let set = ModelSet {
            lips,
            expression,
            pose,
        };
        set.validate()?;
        Ok(set)
    }

    fn members(&self) -> [(&DenoiserModel, ModelKind); 3] {
        [
            (&self.lips, ModelKind::Lips),
            (&self.expression, ModelKind::Expression),
            (&self.pose, ModelKind::Pose),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (model, kind) in self.members() {
            if model.config().kind != kind {
                return Err(Error::contract(format!(
                    "{} slot holds a {} model",
                    kind,
                    model.config().kind
                )));
            }
        }
        let lips = self.lips.config();
        for model in [&self.expression, &self.pose] {
            let c = model.config();
            if c.audio_dim != lips.audio_dim || c.text_dim != lips.text_dim || c.vocab != lips.vocab
            {
                return Err(Error::contract(
                    "models disagree on condition dimensions".to_string(),
                ));
            }
        }
        Ok(())
    }

    /// Longest chunk every model accepts.
    pub fn max_chunk(&self) -> usize {
        self.members()
            .iter()
            .map(|(m, _)| m.config().n_max)
            .min()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadPoseMode {
    Generated,
    Frozen,
}

#[derive(Debug, Clone)]
pub struct GenerationRequest {
    /// Conditions covering at least `total_frames` frames; its
    /// `first_frame` is the full 70-parameter identity frame.
    pub bundle: ConditionBundle,
    /// Frames per chunk.
    pub chunk: usize,
    pub total_frames: usize,
    pub seed: u64,
    pub head_pose: HeadPoseMode,
    pub schedule: ScheduleSpec,
    pub fps: f64,
}

/// Euclidean norm of the frame jump at a chunk boundary, split by
/// parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeamDeviation {
    pub lips: f64,
    pub expression: f64,
    pub pose: f64,
}

#[derive(Debug, Clone)]
pub struct GenerationResult {
    pub motion: MotionSequence,
    /// Half-open frame ranges, one per chunk, tiling 0..total_frames.
    pub boundaries: Vec<(usize, usize)>,
    /// One entry per internal chunk boundary.
    pub seams: Vec<SeamDeviation>,
}

fn group_norm(delta: &[f64], indices: &[usize]) -> f64 {
    indices.iter().map(|&c| delta[c] * delta[c]).sum::<f64>().sqrt()
}

fn seam_deviations(
    motion: &MotionSequence,
    boundaries: &[(usize, usize)],
    layout: &ParameterLayout,
) -> Vec<SeamDeviation> {
    let pose_cols: Vec<usize> = layout.pose_range().collect();
    boundaries
        .iter()
        .skip(1)
        .map(|&(start, _)| {
            let prev = motion.frame(start - 1);
            let here = motion.frame(start);
            let delta: Vec<f64> = here.iter().zip(prev).map(|(a, b)| a - b).collect();
            SeamDeviation {
                lips: group_norm(&delta, layout.mouth_indices()),
                expression: group_norm(&delta, layout.expression_indices()),
                pose: group_norm(&delta, &pose_cols),
            }
        })
        .collect()
}

/// Generate `total_frames` frames of full motion from Gaussian noise.
///
/// Within a chunk the three models sample independently over the same
/// condition window (in the fixed order lips, expression, pose, one
/// shared rng stream); chunks run sequentially because each hands its
/// last frame to the next as the first-frame condition.
pub fn generate_talking_motion(
    models: &ModelSet,
    layout: &ParameterLayout,
    request: &GenerationRequest,
) -> Result<GenerationResult> {
    models.validate()?;
    layout.validate()?;
    if request.total_frames == 0 {
        return Err(Error::contract("total_frames must be >= 1"));
    }
    if request.chunk < 2 {
        return Err(Error::contract(format!(
            "chunk length must be >= 2, got {}",
            request.chunk
        )));
    }
    let max_chunk = models.max_chunk();
    if request.chunk > max_chunk {
        return Err(Error::contract(format!(
            "chunk {} exceeds model n_max {max_chunk}",
            request.chunk
        )));
    }
    if request.bundle.num_frames() < request.total_frames {
        return Err(Error::contract(format!(
            "conditions cover {} frames, need {}",
            request.bundle.num_frames(),
            request.total_frames
        )));
    }
    if request.bundle.first_frame.len() != TOTAL_DIM {
        return Err(Error::dimension(
            "identity frame",
            TOTAL_DIM,
            request.bundle.first_frame.len(),
        ));
    }
    if !(request.fps.is_finite() && request.fps > 0.0) {
        return Err(Error::contract("fps must be positive"));
    }
    let schedule = request.schedule.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
    let (_, audio_dim) = request.bundle.audio.dims2()?;

    let mut values = Vec::with_capacity(request.total_frames * TOTAL_DIM);
    let mut boundaries = Vec::new();
    let mut handoff = request.bundle.first_frame.clone();
    let mut start = 0;
    while start < request.total_frames {
        let len = request.chunk.min(request.total_frames - start);
        let audio_window = request.bundle.audio.data()[start * audio_dim..(start + len) * audio_dim].to_vec();
        let window = ConditionBundle {
            audio: Tensor::new(vec![len, audio_dim], audio_window)?,
            phonemes: request.bundle.phonemes[start..start + len].to_vec(),
            text_embedding: request.bundle.text_embedding.clone(),
            first_frame: Vec::new(),
        };
        let mut slices = Vec::with_capacity(3);
        for (model, kind) in models.members() {
            let mut bundle = window.clone();
            bundle.first_frame = layout.indices(kind).iter().map(|&c| handoff[c]).collect();
            slices.push(model.sample_sequence(&bundle, &schedule, len, request.fps, &mut rng)?);
        }
        let merged = merge_motion(&slices[0], &slices[1], &slices[2], layout)?;
        values.extend_from_slice(merged.values());
        handoff = merged.last_frame().to_vec();
        boundaries.push((start, start + len));
        start += len;
    }

    let mut motion = MotionSequence::new(TOTAL_DIM, values, request.fps)?;
    if request.head_pose == HeadPoseMode::Frozen {
        motion = freeze_head_pose(&motion, layout)?;
    }
    let seams = seam_deviations(&motion, &boundaries, layout);
    Ok(GenerationResult {
        motion,
        boundaries,
        seams,
    })
}

/// Replace the pose columns of every frame with the first frame's pose;
/// facial columns pass through bit-identically.
pub fn freeze_head_pose(motion: &MotionSequence, layout: &ParameterLayout) -> Result<MotionSequence> {
    if motion.dim() != TOTAL_DIM {
        return Err(Error::dimension("freeze_head_pose", TOTAL_DIM, motion.dim()));
    }
    let pose_cols: Vec<usize> = layout.pose_range().collect();
    let first: Vec<f64> = pose_cols.iter().map(|&c| motion.frame(0)[c]).collect();
    let mut values = motion.values().to_vec();
    for k in 1..motion.num_frames() {
        for (j, &c) in pose_cols.iter().enumerate() {
            values[k * TOTAL_DIM + c] = first[j];
        }
    }
    MotionSequence::new(TOTAL_DIM, values, motion.fps())
}

const EXPORT_MAGIC: &[u8; 4] = b"FMRX";
const EXPORT_VERSION: u32 = 1;

/// Write motion in the renderer input format: a fixed header (frame
/// count, fps, mouth column indices) followed by the frames as row-major
/// little-endian f32. Values round to f32; everything else round-trips
/// exactly.
pub fn export_for_renderer(
    motion: &MotionSequence,
    layout: &ParameterLayout,
    path: &Path,
) -> Result<()> {
    if motion.dim() != TOTAL_DIM {
        return Err(Error::dimension("render export", TOTAL_DIM, motion.dim()));
    }
    layout.validate()?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(EXPORT_MAGIC);
    bytes.extend_from_slice(&EXPORT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(motion.num_frames() as u32).to_le_bytes());
    bytes.extend_from_slice(&(TOTAL_DIM as u32).to_le_bytes());
    bytes.extend_from_slice(&motion.fps().to_le_bytes());
    bytes.extend_from_slice(&(MOUTH_DIM as u32).to_le_bytes());
    for &c in layout.mouth_indices() {
        bytes.extend_from_slice(&(c as u32).to_le_bytes());
    }
    bytes.extend_from_slice(&f32_bytes(motion.values()));
    atomic_write(path, &bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("render export truncated".to_string()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Read a file written by [`export_for_renderer`].
pub fn read_render_export(path: &Path) -> Result<(MotionSequence, ParameterLayout)> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4)? != EXPORT_MAGIC {
        return Err(Error::Format("not a render export".to_string()));
    }
    let version = r.u32()?;
    if version != EXPORT_VERSION {
        return Err(Error::Format(format!("unsupported export version {version}")));
    }
    let frames = r.u32()? as usize;
    let dim = r.u32()? as usize;
    if dim != TOTAL_DIM {
        return Err(Error::Format(format!("export dim {dim}, expected {TOTAL_DIM}")));
    }
    let fps = r.f64()?;
    let mouth_count = r.u32()? as usize;
    if mouth_count != MOUTH_DIM {
        return Err(Error::Format(format!(
            "export lists {mouth_count} mouth columns, expected {MOUTH_DIM}"
        )));
    }
    let mut mouth = Vec::with_capacity(mouth_count);
    for _ in 0..mouth_count {
        mouth.push(r.u32()? as usize);
    }
    let layout =
        ParameterLayout::with_mouth_indices(mouth).map_err(|e| Error::Format(e.to_string()))?;
    let payload = r.take(frames * TOTAL_DIM * 4)?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "render export has {} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let motion = MotionSequence::new(TOTAL_DIM, f64s_from_f32_bytes(payload), fps)?;
    Ok((motion, layout))
}
