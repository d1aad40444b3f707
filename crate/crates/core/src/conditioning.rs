//! Encoders for the conditioning signals: per-frame audio features, a
//! per-frame phoneme token sequence, a transcript embedding, and the first
//! motion frame, plus the diffusion timestep. Their encoded tokens are
//! concatenated into one labeled cross-attention memory.

use serde::{Deserialize, Serialize};

use crate::denoiser::net::{encoder_block, linear, sinusoidal_positions, timestep_embedding, Binding};
use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Phoneme vocabulary: padding, 39 ARPAbet-style phonemes, silence.
pub const VOCAB_SIZE: usize = 41;
pub const PAD_TOKEN: u32 = 0;
pub const SIL_TOKEN: u32 = 40;
/// Ids of actual phonemes, excluding padding and silence.
pub const PHONEME_TOKENS: std::ops::Range<u32> = 1..40;

/// Raw per-clip conditioning inputs, all in dataset units.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    /// N×D_a precomputed speech features.
    pub audio: Tensor,
    /// Per-frame token ids, length N.
    pub phonemes: Vec<u32>,
    /// Transcript embedding, length D_s.
    pub text_embedding: Vec<f64>,
    /// First motion frame for this model's slice, length d.
    pub first_frame: Vec<f64>,
}

impl ConditionBundle {
    pub fn num_frames(&self) -> usize {
        self.phonemes.len()
    }

    /// All-zero conditions (phonemes all padding); the unconditional
    /// baseline trains and samples with these.
    pub fn zeroed(config: &DenoiserConfig, frames: usize) -> Self {
        ConditionBundle {
            audio: Tensor::zeros(&[frames, config.audio_dim]),
            phonemes: vec![PAD_TOKEN; frames],
            text_embedding: vec![0.0; config.text_dim],
            first_frame: vec![0.0; config.kind.dim()],
        }
    }

    pub fn validate(&self, config: &DenoiserConfig) -> Result<()> {
        let n = self.phonemes.len();
        if n == 0 {
            return Err(Error::contract("condition bundle with zero frames"));
        }
        let (an, ad) = self.audio.dims2()?;
        if an != n || ad != config.audio_dim {
            return Err(Error::dimension(
                "audio features",
                format!("{n}x{}", config.audio_dim),
                format!("{an}x{ad}"),
            ));
        }
        if !self.audio.all_finite() {
            return Err(Error::NonFinite("audio features".into()));
        }
        for &id in &self.phonemes {
            if id as usize >= config.vocab {
                return Err(Error::Vocabulary {
                    id: id as i64,
                    vocab: config.vocab,
                });
            }
        }
        if self.text_embedding.len() != config.text_dim {
            return Err(Error::dimension(
                "text embedding",
                config.text_dim,
                self.text_embedding.len(),
            ));
        }
        if self.first_frame.len() != config.kind.dim() {
            return Err(Error::dimension(
                "first frame",
                config.kind.dim(),
                self.first_frame.len(),
            ));
        }
        if !self.text_embedding.iter().all(|v| v.is_finite())
            || !self.first_frame.iter().all(|v| v.is_finite())
        {
            return Err(Error::NonFinite("condition bundle".into()));
        }
        Ok(())
    }
}

/// Which conditioning signal a memory token came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentLabel {
    Audio,
    Phoneme,
    Text,
    FirstFrame,
    Timestep,
}

/// The assembled cross-attention memory: M×H token matrix (graph-scoped)
/// with one segment label per token, M = 2N+3.
pub struct ConditionMemory {
    pub tokens: Var,
    pub labels: Vec<SegmentLabel>,
}

pub(crate) fn encode_phonemes(
    g: &mut Graph,
    b: &Binding,
    config: &DenoiserConfig,
    ids: &[u32],
) -> Result<Var> {
    let mut idx = Vec::with_capacity(ids.len());
    for &id in ids {
        if id as usize >= config.vocab {
            return Err(Error::Vocabulary {
                id: id as i64,
                vocab: config.vocab,
            });
        }
        idx.push(id as usize);
    }
    let emb = g.embedding(b.var("phoneme.embed"), &idx)?;
    let pos = g.constant(sinusoidal_positions(ids.len(), config.hidden));
    let mut x = g.add(emb, pos)?;
    for i in 0..config.encoder_blocks {
        x = encoder_block(g, b, &format!("phoneme.block{i}"), config.heads, x)?;
    }
    Ok(x)
}

pub(crate) fn encode_audio(
    g: &mut Graph,
    b: &Binding,
    config: &DenoiserConfig,
    audio: &Tensor,
) -> Result<Var> {
    let (n, d) = audio.dims2()?;
    if d != config.audio_dim {
        return Err(Error::dimension("audio width", config.audio_dim, d));
    }
    let a = g.constant(audio.clone());
    let proj = linear(g, b, "audio.proj", a)?;
    let pos = g.constant(sinusoidal_positions(n, config.hidden));
    let mut x = g.add(proj, pos)?;
    for i in 0..config.encoder_blocks {
        x = encoder_block(g, b, &format!("audio.block{i}"), config.heads, x)?;
    }
    Ok(x)
}

pub(crate) fn encode_text(
    g: &mut Graph,
    b: &Binding,
    config: &DenoiserConfig,
    text: &[f64],
) -> Result<Var> {
    if text.len() != config.text_dim {
        return Err(Error::dimension("text width", config.text_dim, text.len()));
    }
    let s = g.constant(Tensor::new(vec![1, text.len()], text.to_vec())?);
    linear(g, b, "text.proj", s)
}

/// Two-layer MLP with tanh between; zero input and zero biases give a zero
/// token because tanh is odd.
pub(crate) fn encode_first_frame(
    g: &mut Graph,
    b: &Binding,
    config: &DenoiserConfig,
    frame: &[f64],
) -> Result<Var> {
    if frame.len() != config.kind.dim() {
        return Err(Error::dimension(
            "first frame width",
            config.kind.dim(),
            frame.len(),
        ));
    }
    let x = g.constant(Tensor::new(vec![1, frame.len()], frame.to_vec())?);
    let h = linear(g, b, "first.lin1", x)?;
    let h = g.tanh(h);
    linear(g, b, "first.lin2", h)
}

pub(crate) fn encode_timestep(
    g: &mut Graph,
    b: &Binding,
    config: &DenoiserConfig,
    t: usize,
) -> Result<Var> {
    let e = g.constant(timestep_embedding(t, config.hidden));
    linear(g, b, "time.proj", e)
}

/// Concatenate [audio; phonemes; text; first frame; timestep] tokens.
/// `first_frame` is expected already normalized to the model's stats.
pub(crate) fn assemble_memory(
    g: &mut Graph,
    b: &Binding,
    config: &DenoiserConfig,
    bundle: &ConditionBundle,
    first_frame: &[f64],
    t: usize,
) -> Result<ConditionMemory> {
    let n = bundle.num_frames();
    let audio = encode_audio(g, b, config, &bundle.audio)?;
    let phonemes = encode_phonemes(g, b, config, &bundle.phonemes)?;
    let text = encode_text(g, b, config, &bundle.text_embedding)?;
    let first = encode_first_frame(g, b, config, first_frame)?;
    let time = encode_timestep(g, b, config, t)?;
    let tokens = g.concat_rows(&[audio, phonemes, text, first, time])?;
    let mut labels = Vec::with_capacity(2 * n + 3);
    labels.extend(std::iter::repeat(SegmentLabel::Audio).take(n));
    labels.extend(std::iter::repeat(SegmentLabel::Phoneme).take(n));
    labels.push(SegmentLabel::Text);
    labels.push(SegmentLabel::FirstFrame);
    labels.push(SegmentLabel::Timestep);
    debug_assert_eq!(labels.len(), 2 * n + 3);
    Ok(ConditionMemory { tokens, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::net::{init_params, Params};
    use crate::denoiser::{denoiser_param_schema, DenoiserConfig};
    use crate::motion::ModelKind;
    use crate::numerics::tests_rng;
    use rand::Rng;

    fn tiny_config() -> DenoiserConfig {
        DenoiserConfig {
            kind: ModelKind::Pose,
            hidden: 16,
            layers: 1,
            heads: 2,
            encoder_blocks: 1,
            n_max: 16,
            vocab: VOCAB_SIZE,
            audio_dim: 8,
            text_dim: 12,
        }
    }

    fn tiny_params(config: &DenoiserConfig, seed: u64) -> Params {
        let mut rng = tests_rng(seed);
        init_params(&denoiser_param_schema(config), &mut rng)
    }

    fn random_bundle(config: &DenoiserConfig, frames: usize, seed: u64) -> ConditionBundle {
        let mut rng = tests_rng(seed);
        let audio = Tensor::new(
            vec![frames, config.audio_dim],
            (0..frames * config.audio_dim)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )
        .unwrap();
        ConditionBundle {
            audio,
            phonemes: (0..frames)
                .map(|_| rng.gen_range(1..config.vocab as u32))
                .collect(),
            text_embedding: (0..config.text_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            first_frame: (0..config.kind.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn phoneme_encoding_shape_and_sensitivity() {
        let config = tiny_config();
        let params = tiny_params(&config, 1);
        let encode = |ids: &[u32]| {
            let mut g = Graph::new();
            let b = Binding::bind(&mut g, &params, false);
            let out = encode_phonemes(&mut g, &b, &config, ids).unwrap();
            g.value(out).clone()
        };
        let single = encode(&[5]);
        assert_eq!(single.shape(), &[1, 16]);
        let base = encode(&[3, 7, 7, 12]);
        let changed = encode(&[3, 7, 9, 12]);
        assert!(base.data() != changed.data());
        let permuted = encode(&[12, 7, 7, 3]);
        assert!(base.data() != permuted.data(), "positions are inactive");
    }

    #[test]
    fn phoneme_out_of_vocabulary_errors() {
        let config = tiny_config();
        let params = tiny_params(&config, 2);
        let mut g = Graph::new();
        let b = Binding::bind(&mut g, &params, false);
        let err = encode_phonemes(&mut g, &b, &config, &[3, 41]).unwrap_err();
        assert!(matches!(err, Error::Vocabulary { id: 41, .. }));
    }

    #[test]
    fn audio_encoding_shape_and_determinism() {
        let config = tiny_config();
        let params = tiny_params(&config, 3);
        let bundle = random_bundle(&config, 4, 4);
        let run = || {
            let mut g = Graph::new();
            let b = Binding::bind(&mut g, &params, false);
            let out = encode_audio(&mut g, &b, &config, &bundle.audio).unwrap();
            g.value(out).clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[4, 16]);
        assert_eq!(a.data(), run().data());
        let mut g = Graph::new();
        let b = Binding::bind(&mut g, &params, false);
        let bad = Tensor::zeros(&[4, 9]);
        assert!(encode_audio(&mut g, &b, &config, &bad).is_err());
    }

    #[test]
    fn zero_audio_equals_zero_embedding_path() {
        let config = tiny_config();
        let params = tiny_params(&config, 5);
        let encode = |audio: &Tensor| {
            let mut g = Graph::new();
            let b = Binding::bind(&mut g, &params, false);
            let out = encode_audio(&mut g, &b, &config, audio).unwrap();
            g.value(out).clone()
        };
        let a = encode(&Tensor::zeros(&[3, 8]));
        let b = encode(&Tensor::zeros(&[3, 8]));
        assert_eq!(a.data(), b.data());
        let c = encode(&Tensor::new(vec![3, 8], vec![0.1; 24]).unwrap());
        assert!(a.data() != c.data());
    }

    #[test]
    fn text_projection_basis_probe() {
        let config = tiny_config();
        let params = tiny_params(&config, 6);
        let w = params.get("text.proj.w").clone();
        let bias = params.get("text.proj.b").clone();
        for i in [0usize, 5, 11] {
            let mut e = vec![0.0; config.text_dim];
            e[i] = 1.0;
            let mut g = Graph::new();
            let b = Binding::bind(&mut g, &params, false);
            let out = encode_text(&mut g, &b, &config, &e).unwrap();
            let got = g.value(out);
            assert_eq!(got.shape(), &[1, 16]);
            for j in 0..16 {
                let want = w.at(i, j) + bias.data()[j];
                assert!((got.at(0, j) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn first_frame_zero_maps_to_zero_token() {
        let config = tiny_config();
        let params = tiny_params(&config, 7);
        let mut g = Graph::new();
        let b = Binding::bind(&mut g, &params, false);
        let out = encode_first_frame(&mut g, &b, &config, &[0.0; 6]).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn first_frame_distinct_inputs_distinct_tokens() {
        let config = tiny_config();
        let params = tiny_params(&config, 8);
        let encode = |frame: &[f64]| {
            let mut g = Graph::new();
            let b = Binding::bind(&mut g, &params, false);
            let out = encode_first_frame(&mut g, &b, &config, frame).unwrap();
            g.value(out).clone()
        };
        let a = encode(&[0.3, -0.2, 0.5, 0.0, 0.1, -0.4]);
        let b = encode(&[0.3, -0.2, 0.5, 0.0, 0.1, -0.3]);
        assert!(a.data() != b.data());
    }

    #[test]
    fn memory_layout_and_timestep_probe() {
        let config = tiny_config();
        let params = tiny_params(&config, 9);
        let bundle = random_bundle(&config, 4, 10);
        let build = |t: usize| {
            let mut g = Graph::new();
            let b = Binding::bind(&mut g, &params, false);
            let mem = assemble_memory(&mut g, &b, &config, &bundle, &bundle.first_frame, t).unwrap();
            (g.value(mem.tokens).clone(), mem.labels)
        };
        let (tokens, labels) = build(5);
        assert_eq!(tokens.shape(), &[11, 16]);
        assert_eq!(labels.len(), 11);
        assert_eq!(labels[0..4], [SegmentLabel::Audio; 4]);
        assert_eq!(labels[4..8], [SegmentLabel::Phoneme; 4]);
        assert_eq!(
            labels[8..],
            [
                SegmentLabel::Text,
                SegmentLabel::FirstFrame,
                SegmentLabel::Timestep
            ]
        );
        let (other, _) = build(9);
        for row in 0..10 {
            assert_eq!(tokens.row(row), other.row(row), "row {row} moved with t");
        }
        assert!(tokens.row(10) != other.row(10));
    }

    #[test]
    fn bundle_validation_catches_mismatches() {
        let config = tiny_config();
        let good = random_bundle(&config, 4, 11);
        good.validate(&config).unwrap();
        let mut bad = good.clone();
        bad.phonemes.push(3);
        assert!(bad.validate(&config).is_err());
        let mut bad = good.clone();
        bad.text_embedding.pop();
        assert!(bad.validate(&config).is_err());
        let mut bad = good.clone();
        bad.first_frame = vec![0.0; 5];
        assert!(bad.validate(&config).is_err());
        let mut bad = good.clone();
        bad.phonemes[0] = 41;
        assert!(bad.validate(&config).is_err());
        let zeroed = ConditionBundle::zeroed(&config, 4);
        zeroed.validate(&config).unwrap();
        assert_eq!(zeroed.num_frames(), 4);
    }
}
