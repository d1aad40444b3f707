//! Clip storage and the synthetic dataset generator.
//!
//! A dataset is a directory holding one JSON manifest plus raw binary
//! array files per clip: motion N x 70 and audio N x D_a as little-endian
//! f32, phonemes as little-endian i32, text embedding as f32. Values are
//! held as f64 in memory; the generator quantizes through f32 so that
//! write/read round trips are bit-exact.
//!
//! The synthetic data has a deliberate causal structure: phonemes drive
//! the lips columns, the text embedding drives the expression columns,
//! and pose is an independent smoothed random walk. Audio features are a
//! fixed projection of the one-hot phoneme plus small noise, so audio and
//! phonemes carry the same signal.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditioning::VOCAB_SIZE;
use crate::motion::{MotionSequence, ParameterLayout, EXPRESSION_DIM, MOUTH_DIM, TOTAL_DIM};
use crate::numerics::Tensor;
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// One clip held in memory: motion plus aligned conditioning arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub id: String,
    /// N x 70 motion in raw dataset units.
    pub motion: MotionSequence,
    /// N x D_a audio features.
    pub audio: Tensor,
    /// Per-frame token ids, length N.
    pub phonemes: Vec<u32>,
    /// Per-clip transcript embedding, length D_s.
    pub text_embedding: Vec<f64>,
}

impl Clip {
    pub fn num_frames(&self) -> usize {
        self.motion.num_frames()
    }

    pub fn validate(&self, audio_dim: usize, text_dim: usize, vocab: usize) -> Result<()> {
        let n = self.motion.num_frames();
        if self.motion.dim() != TOTAL_DIM {
            return Err(Error::dimension("clip motion", TOTAL_DIM, self.motion.dim()));
        }
        let (an, ad) = self.audio.dims2()?;
        if an != n || ad != audio_dim {
            return Err(Error::dimension(
                "clip audio",
                format!("{n}x{audio_dim}"),
                format!("{an}x{ad}"),
            ));
        }
        if self.phonemes.len() != n {
            return Err(Error::dimension("clip phonemes", n, self.phonemes.len()));
        }
        if self.text_embedding.len() != text_dim {
            return Err(Error::dimension(
                "clip text embedding",
                text_dim,
                self.text_embedding.len(),
            ));
        }
        for &p in &self.phonemes {
            if p as usize >= vocab {
                return Err(Error::Vocabulary {
                    id: p as i64,
                    vocab,
                });
            }
        }
        if !self.audio.all_finite() || !self.text_embedding.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("clip {}", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Test,
}

/// A stored array: file name relative to the dataset directory plus the
/// SHA-256 of the file bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayRef {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub id: String,
    pub frames: usize,
    pub fps: f64,
    pub split: SplitTag,
    pub motion: ArrayRef,
    pub audio: ArrayRef,
    pub phonemes: ArrayRef,
    pub text: ArrayRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub audio_dim: usize,
    pub text_dim: usize,
    pub vocab: usize,
    pub clips: Vec<ClipEntry>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        atomic_write(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        Ok(manifest)
    }

    pub fn entries(&self, split: Option<SplitTag>) -> impl Iterator<Item = &ClipEntry> {
        self.clips
            .iter()
            .filter(move |e| split.is_none_or(|s| e.split == s))
    }
}

/// Knobs for the synthetic generator. All randomness flows from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub clips: usize,
    pub frames: usize,
    pub seed: u64,
    /// Frames a phoneme is held, drawn uniformly from [dwell_min, dwell_max].
    pub dwell_min: usize,
    pub dwell_max: usize,
    /// Rate of the critically damped lips response toward the phoneme target.
    pub lips_stiffness: f64,
    /// Amplitude scale of the expression sinusoids.
    pub expression_scale: f64,
    /// Innovation scale of the pose random walk.
    pub pose_walk_scale: f64,
    pub audio_dim: usize,
    pub text_dim: usize,
    pub fps: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            clips: 200,
            frames: 96,
            seed: 0,
            dwell_min: 3,
            dwell_max: 10,
            lips_stiffness: 1.8,
            expression_scale: 0.5,
            pose_walk_scale: 0.01,
            audio_dim: 32,
            text_dim: 64,
            fps: 25.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clips == 0 || self.frames == 0 {
            return Err(Error::contract("synthetic spec needs clips >= 1, frames >= 1"));
        }
        if self.dwell_min < 1 || self.dwell_max < self.dwell_min {
            return Err(Error::contract("dwell range must satisfy 1 <= min <= max"));
        }
        for (name, v) in [
            ("lips_stiffness", self.lips_stiffness),
            ("expression_scale", self.expression_scale),
            ("pose_walk_scale", self.pose_walk_scale),
            ("fps", self.fps),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::contract(format!("{name} must be positive, got {v}")));
            }
        }
        if self.audio_dim == 0 || self.text_dim == 0 {
            return Err(Error::contract("audio_dim and text_dim must be >= 1"));
        }
        Ok(())
    }
}

/// Dataset-wide latent parameters, drawn once from [`SyntheticSpec::seed`].
pub(crate) struct SyntheticParams {
    /// Per-token 13-dim lips target, indexed by token id.
    pub lip_targets: Vec<Vec<f64>>,
    /// Row j: weights mapping the text embedding to expression column j's frequency.
    pub expr_freq_w: Vec<Vec<f64>>,
    pub expr_phase_w: Vec<Vec<f64>>,
    pub expr_amp: Vec<f64>,
    /// D_a x V projection of the one-hot phoneme into audio features.
    pub audio_proj: Vec<Vec<f64>>,
}

const EXPR_BASE_FREQ: f64 = 0.15;
const POSE_WALK_SMOOTHING: f64 = 0.8;
const AUDIO_NOISE: f64 = 0.01;

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub(crate) fn draw_params(spec: &SyntheticSpec, rng: &mut impl Rng) -> SyntheticParams {
    let expr_dim = EXPRESSION_DIM;
    let freq_scale = 0.03 / (spec.text_dim as f64).sqrt();
    let phase_scale = 1.0 / (spec.text_dim as f64).sqrt();
    SyntheticParams {
        lip_targets: (0..VOCAB_SIZE)
            .map(|_| (0..MOUTH_DIM).map(|_| normal(rng)).collect())
            .collect(),
        expr_freq_w: (0..expr_dim)
            .map(|_| (0..spec.text_dim).map(|_| normal(rng) * freq_scale).collect())
            .collect(),
        expr_phase_w: (0..expr_dim)
            .map(|_| (0..spec.text_dim).map(|_| normal(rng) * phase_scale).collect())
            .collect(),
        expr_amp: (0..expr_dim)
            .map(|_| spec.expression_scale * rng.gen_range(0.5..1.5))
            .collect(),
        audio_proj: (0..spec.audio_dim)
            .map(|_| (0..VOCAB_SIZE).map(|_| normal(rng)).collect())
            .collect(),
    }
}

/// Expand a random phoneme string into per-frame tokens using the dwell
/// model: each token is held for a uniform number of frames.
pub(crate) fn draw_phoneme_frames(spec: &SyntheticSpec, rng: &mut impl Rng) -> Vec<u32> {
    let mut out = Vec::with_capacity(spec.frames);
    while out.len() < spec.frames {
        let token = rng.gen_range(1..VOCAB_SIZE as u32);
        let dwell = rng.gen_range(spec.dwell_min..=spec.dwell_max);
        for _ in 0..dwell.min(spec.frames - out.len()) {
            out.push(token);
        }
    }
    out
}

fn quantize(x: f64) -> f64 {
    x as f32 as f64
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Deterministic given (params, phonemes, text); the rng feeds only the
/// pose walk and audio noise.
pub(crate) fn synthesize_clip(
    spec: &SyntheticSpec,
    layout: &ParameterLayout,
    params: &SyntheticParams,
    id: String,
    phonemes: &[u32],
    text: &[f64],
    rng: &mut impl Rng,
) -> Result<Clip> {
    let n = phonemes.len();
    let mut motion = vec![0.0; n * TOTAL_DIM];

    // Lips: exact discrete step of a critically damped second-order
    // system pulled toward the current phoneme's target.
    let omega = spec.lips_stiffness;
    let decay = (-omega).exp();
    let mut y = params.lip_targets[phonemes[0] as usize].clone();
    let mut v = vec![0.0; MOUTH_DIM];
    for (k, &tok) in phonemes.iter().enumerate() {
        if k > 0 {
            let target = &params.lip_targets[tok as usize];
            for j in 0..MOUTH_DIM {
                let a = y[j] - target[j];
                let b = v[j] + omega * a;
                y[j] = target[j] + (a + b) * decay;
                v[j] = (b - omega * (a + b)) * decay;
            }
        }
        for (j, &col) in layout.mouth_indices().iter().enumerate() {
            motion[k * TOTAL_DIM + col] = y[j];
        }
    }

    // Expression: per-column sinusoid with frequency and phase linear in
    // the text embedding.
    for (j, &col) in layout.expression_indices().iter().enumerate() {
        let freq = EXPR_BASE_FREQ + dot(&params.expr_freq_w[j], text);
        let phase = dot(&params.expr_phase_w[j], text);
        let amp = params.expr_amp[j];
        for k in 0..n {
            motion[k * TOTAL_DIM + col] = amp * (freq * k as f64 + phase).sin();
        }
    }

    // Pose: AR(1)-smoothed Gaussian random walk per column.
    let pose_cols: Vec<usize> = layout.pose_range().collect();
    let mut pose: Vec<f64> = (0..pose_cols.len()).map(|_| 0.3 * normal(rng)).collect();
    let mut step = vec![0.0; pose_cols.len()];
    for k in 0..n {
        if k > 0 {
            for j in 0..pose_cols.len() {
                step[j] = POSE_WALK_SMOOTHING * step[j] + spec.pose_walk_scale * normal(rng);
                pose[j] += step[j];
            }
        }
        for (j, &col) in pose_cols.iter().enumerate() {
            motion[k * TOTAL_DIM + col] = pose[j];
        }
    }

    let mut audio = vec![0.0; n * spec.audio_dim];
    for (k, &tok) in phonemes.iter().enumerate() {
        for i in 0..spec.audio_dim {
            audio[k * spec.audio_dim + i] =
                quantize(params.audio_proj[i][tok as usize] + AUDIO_NOISE * normal(rng));
        }
    }

    for v in &mut motion {
        *v = quantize(*v);
    }
    let clip = Clip {
        id,
        motion: MotionSequence::new(TOTAL_DIM, motion, spec.fps)?,
        audio: Tensor::new(vec![n, spec.audio_dim], audio)?,
        phonemes: phonemes.to_vec(),
        text_embedding: text.iter().map(|&x| quantize(x)).collect(),
    };
    clip.validate(spec.audio_dim, spec.text_dim, VOCAB_SIZE)?;
    Ok(clip)
}

/// Generate the full clip set in memory. Same spec, same clips, bit for bit.
pub fn synthesize_clips(spec: &SyntheticSpec, layout: &ParameterLayout) -> Result<Vec<Clip>> {
    spec.validate()?;
    layout.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let params = draw_params(spec, &mut rng);
    let mut clips = Vec::with_capacity(spec.clips);
    for i in 0..spec.clips {
        let phonemes = draw_phoneme_frames(spec, &mut rng);
        let text: Vec<f64> = (0..spec.text_dim).map(|_| normal(&mut rng)).collect();
        clips.push(synthesize_clip(
            spec,
            layout,
            &params,
            format!("clip{i:04}"),
            &phonemes,
            &text,
            &mut rng,
        )?);
    }
    Ok(clips)
}

pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub(crate) fn f32_bytes(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub(crate) fn f64s_from_f32_bytes(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

fn i32_bytes(tokens: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(tokens.len() * 4);
    for &t in tokens {
        out.extend_from_slice(&(t as i32).to_le_bytes());
    }
    out
}

fn tokens_from_i32_bytes(bytes: &[u8], context: &str) -> Result<Vec<u32>> {
    bytes
        .chunks_exact(4)
        .map(|c| {
            let v = i32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            u32::try_from(v).map_err(|_| Error::Integrity(format!("{context}: negative token {v}")))
        })
        .collect()
}

fn sha_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

fn write_array(dir: &Path, file: String, bytes: &[u8]) -> Result<ArrayRef> {
    atomic_write(&dir.join(&file), bytes)?;
    Ok(ArrayRef {
        file,
        sha256: sha_hex(bytes),
    })
}

/// Write one clip's array files; returns the manifest entry.
pub fn write_clip(dir: &Path, clip: &Clip, split: SplitTag) -> Result<ClipEntry> {
    let id = &clip.id;
    Ok(ClipEntry {
        id: id.clone(),
        frames: clip.num_frames(),
        fps: clip.motion.fps(),
        split,
        motion: write_array(
            dir,
            format!("{id}.motion.f32"),
            &f32_bytes(clip.motion.values()),
        )?,
        audio: write_array(dir, format!("{id}.audio.f32"), &f32_bytes(clip.audio.data()))?,
        phonemes: write_array(dir, format!("{id}.phonemes.i32"), &i32_bytes(&clip.phonemes))?,
        text: write_array(
            dir,
            format!("{id}.text.f32"),
            &f32_bytes(&clip.text_embedding),
        )?,
    })
}

fn read_array(dir: &Path, array: &ArrayRef, expected_len: usize) -> Result<Vec<u8>> {
    let path = dir.join(&array.file);
    let bytes = fs::read(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.clone()),
        _ => Error::Io(e),
    })?;
    if bytes.len() != expected_len {
        return Err(Error::Integrity(format!(
            "{}: expected {expected_len} bytes, found {}",
            array.file,
            bytes.len()
        )));
    }
    let digest = sha_hex(&bytes);
    if digest != array.sha256 {
        return Err(Error::Integrity(format!("{}: checksum mismatch", array.file)));
    }
    Ok(bytes)
}

/// Read one clip back; verifies lengths and checksums.
pub fn read_clip(dir: &Path, manifest: &DatasetManifest, entry: &ClipEntry) -> Result<Clip> {
    let n = entry.frames;
    let motion = f64s_from_f32_bytes(&read_array(dir, &entry.motion, n * TOTAL_DIM * 4)?);
    let audio = f64s_from_f32_bytes(&read_array(dir, &entry.audio, n * manifest.audio_dim * 4)?);
    let phoneme_bytes = read_array(dir, &entry.phonemes, n * 4)?;
    let phonemes = tokens_from_i32_bytes(&phoneme_bytes, &entry.phonemes.file)?;
    let text = f64s_from_f32_bytes(&read_array(dir, &entry.text, manifest.text_dim * 4)?);
    let clip = Clip {
        id: entry.id.clone(),
        motion: MotionSequence::new(TOTAL_DIM, motion, entry.fps)?,
        audio: Tensor::new(vec![n, manifest.audio_dim], audio)?,
        phonemes,
        text_embedding: text,
    };
    clip.validate(manifest.audio_dim, manifest.text_dim, manifest.vocab)?;
    Ok(clip)
}

/// Generate, write, and describe a synthetic dataset rooted at `dir`.
/// All clips start in the train split; see [`split_dataset`].
pub fn generate_synthetic_dataset(
    spec: &SyntheticSpec,
    layout: &ParameterLayout,
    dir: &Path,
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let clips = synthesize_clips(spec, layout)?;
    let mut entries = Vec::with_capacity(clips.len());
    for clip in &clips {
        entries.push(write_clip(dir, clip, SplitTag::Train)?);
    }
    let manifest = DatasetManifest {
        audio_dim: spec.audio_dim,
        text_dim: spec.text_dim,
        vocab: VOCAB_SIZE,
        clips: entries,
    };
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Deterministically split a manifest into disjoint train/test manifests.
pub fn split_dataset(
    manifest: &DatasetManifest,
    ratio: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::contract(format!(
            "split ratio must lie in (0, 1), got {ratio}"
        )));
    }
    let n = manifest.clips.len();
    let train_n = (n as f64 * ratio).round() as usize;
    if train_n == 0 || train_n == n {
        return Err(Error::Degenerate(format!(
            "split of {n} clips at ratio {ratio} leaves an empty side"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let train_ids: BTreeSet<usize> = order[..train_n].iter().copied().collect();
    let mut train = DatasetManifest {
        audio_dim: manifest.audio_dim,
        text_dim: manifest.text_dim,
        vocab: manifest.vocab,
        clips: Vec::new(),
    };
    let mut test = train.clone();
    for (i, entry) in manifest.clips.iter().enumerate() {
        let mut entry = entry.clone();
        if train_ids.contains(&i) {
            entry.split = SplitTag::Train;
            train.clips.push(entry);
        } else {
            entry.split = SplitTag::Test;
            test.clips.push(entry);
        }
    }
    Ok((train, test))
}

/// Load clips of one split (or all) from a dataset directory.
pub fn load_clips(
    dir: &Path,
    manifest: &DatasetManifest,
    split: Option<SplitTag>,
) -> Result<Vec<Clip>> {
    manifest
        .entries(split)
        .map(|entry| read_clip(dir, manifest, entry))
        .collect()
}
