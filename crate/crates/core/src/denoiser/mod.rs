//! Transformer denoiser: a decoder over the noised motion sequence with
//! self-attention, cross-attention to the condition memory, and an x0
//! prediction head. All attention is the factorized efficient variant.

mod attention;
mod io;
pub(crate) mod net;

pub use attention::{efficient_attention, efficient_attention_values};
pub use io::{load_model, save_model};
pub use net::Binding;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{assemble_memory, ConditionBundle};
use crate::diffusion::{sample_chain, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::motion::{ModelKind, MotionSequence, NormalizationStats};
use crate::numerics::{Graph, Tensor, Var};

use net::{
    decoder_block, decoder_block_specs, encoder_block_specs, init_params, linear, linear_specs,
    sinusoidal_positions, zero_linear_specs, Init, ParamSpec, Params,
};

/// Architecture and condition-dimension settings for one submodel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub kind: ModelKind,
    /// Model width H.
    pub hidden: usize,
    /// Decoder block count.
    pub layers: usize,
    pub heads: usize,
    /// Self-attention blocks in each condition encoder.
    pub encoder_blocks: usize,
    /// Longest supported sequence.
    pub n_max: usize,
    /// Phoneme vocabulary size.
    pub vocab: usize,
    /// Audio feature width D_a.
    pub audio_dim: usize,
    /// Text embedding width D_s.
    pub text_dim: usize,
}

impl DenoiserConfig {
    /// Paper-scale defaults, sized for pretrained speech (768) and text
    /// (512) extractor widths.
    pub fn paper_scale(kind: ModelKind) -> Self {
        DenoiserConfig {
            kind,
            hidden: 256,
            layers: 8,
            heads: 4,
            encoder_blocks: 2,
            n_max: 256,
            vocab: crate::conditioning::VOCAB_SIZE,
            audio_dim: 768,
            text_dim: 512,
        }
    }

    /// Small configuration for CPU training on the synthetic dataset.
    pub fn desk(kind: ModelKind) -> Self {
        DenoiserConfig {
            kind,
            hidden: 32,
            layers: 2,
            heads: 4,
            encoder_blocks: 2,
            n_max: 64,
            vocab: crate::conditioning::VOCAB_SIZE,
            audio_dim: 32,
            text_dim: 64,
        }
    }

    /// Motion dimension d for this model's kind.
    pub fn motion_dim(&self) -> usize {
        self.kind.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.hidden % 2 != 0 {
            return Err(Error::contract(format!(
                "hidden width {} must be positive and even",
                self.hidden
            )));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::contract(format!(
                "hidden width {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::contract("at least one decoder layer required"));
        }
        if self.n_max == 0 {
            return Err(Error::contract("n_max must be positive"));
        }
        if self.vocab < 2 || self.audio_dim == 0 || self.text_dim == 0 {
            return Err(Error::contract("condition dimensions must be positive"));
        }
        Ok(())
    }
}

pub(crate) fn denoiser_param_schema(config: &DenoiserConfig) -> Vec<ParamSpec> {
    let h = config.hidden;
    let d = config.motion_dim();
    let mut specs = Vec::new();
    linear_specs(&mut specs, "input_proj", d, h);
    for i in 0..config.layers {
        decoder_block_specs(&mut specs, &format!("decoder.block{i}"), h);
    }
    zero_linear_specs(&mut specs, "output_proj", h, d);
    linear_specs(&mut specs, "time.proj", h, h);
    linear_specs(&mut specs, "audio.proj", config.audio_dim, h);
    for i in 0..config.encoder_blocks {
        encoder_block_specs(&mut specs, &format!("audio.block{i}"), h);
    }
    specs.push(ParamSpec {
        name: "phoneme.embed".into(),
        shape: vec![config.vocab, h],
        init: Init::FanIn(h),
    });
    for i in 0..config.encoder_blocks {
        encoder_block_specs(&mut specs, &format!("phoneme.block{i}"), h);
    }
    linear_specs(&mut specs, "text.proj", config.text_dim, h);
    linear_specs(&mut specs, "first.lin1", d, h);
    linear_specs(&mut specs, "first.lin2", h, h);
    specs
}

/// One trained (or initializing) denoiser with its normalization stats.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    config: DenoiserConfig,
    stats: NormalizationStats,
    params: Params,
}

impl DenoiserModel {
    /// Fresh model. The output projection starts at zero so the initial
    /// prediction is the normalized-data mean; everything else uses
    /// fan-in-scaled uniform draws from `rng`.
    pub fn init(
        config: DenoiserConfig,
        stats: NormalizationStats,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        stats.validate()?;
        if stats.dim() != config.motion_dim() {
            return Err(Error::dimension(
                "stats dim",
                config.motion_dim(),
                stats.dim(),
            ));
        }
        let params = init_params(&denoiser_param_schema(&config), rng);
        Ok(DenoiserModel {
            config,
            stats,
            params,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn stats(&self) -> &NormalizationStats {
        &self.stats
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Parameter names in their canonical (sorted) order.
    pub fn param_names(&self) -> Vec<String> {
        self.params.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn param_tensor(&self, name: &str) -> Option<&Tensor> {
        self.params.lookup(name)
    }

    /// Mutable access to one parameter tensor, e.g. for perturbation
    /// studies. Shapes must be preserved by the caller.
    pub fn param_tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.lookup_mut(name)
    }

    pub(crate) fn params(&self) -> &Params {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub(crate) fn from_parts(
        config: DenoiserConfig,
        stats: NormalizationStats,
        params: Params,
    ) -> Self {
        DenoiserModel {
            config,
            stats,
            params,
        }
    }

    /// Re-draw every parameter, including the normally zero output
    /// projection and the layer-norm gains (kept near one). Gradient
    /// checks use this: at the zero init the output projection blocks all
    /// upstream gradients, which would make a finite-difference comparison
    /// vacuous.
    pub fn randomize(&mut self, rng: &mut impl Rng) {
        let names: Vec<String> = self.params.iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            let tensor = self.params.get_mut(&name);
            let shape = tensor.shape().to_vec();
            *tensor = if name.ends_with(".g") {
                let data = (0..shape.iter().product())
                    .map(|_| 1.0 + rng.gen_range(-0.2..0.2))
                    .collect();
                Tensor::new(shape, data).expect("gain shape")
            } else if shape.len() == 2 {
                Tensor::fan_in_init(&shape, shape[0], rng)
            } else {
                let data = (0..shape.iter().product())
                    .map(|_| rng.gen_range(-0.1..0.1))
                    .collect();
                Tensor::new(shape, data).expect("bias shape")
            };
        }
    }

    /// Register every parameter as a graph leaf; `trainable` asks for
    /// gradients.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Binding {
        Binding::bind(g, &self.params, trainable)
    }

    /// Graph-level forward pass: noised input `x_t` (N×d, normalized
    /// units) to the x0 prediction. The bundle's first frame is raw and is
    /// normalized here before encoding.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        b: &Binding,
        x_t: Var,
        bundle: &ConditionBundle,
        t: usize,
    ) -> Result<Var> {
        let config = &self.config;
        let (n, d) = g.value(x_t).dims2()?;
        if d != config.motion_dim() {
            return Err(Error::dimension("denoiser input", config.motion_dim(), d));
        }
        if n > config.n_max {
            return Err(Error::contract(format!(
                "sequence length {n} exceeds n_max {}",
                config.n_max
            )));
        }
        if n != bundle.num_frames() {
            return Err(Error::dimension("bundle frames", n, bundle.num_frames()));
        }
        bundle.validate(config)?;
        let first_norm: Vec<f64> = bundle
            .first_frame
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.stats.mean()[i]) / self.stats.std()[i])
            .collect();
        let memory = assemble_memory(g, b, config, bundle, &first_norm, t)?;
        let proj = linear(g, b, "input_proj", x_t)?;
        let pos = g.constant(sinusoidal_positions(n, config.hidden));
        let mut h = g.add(proj, pos)?;
        for i in 0..config.layers {
            h = decoder_block(
                g,
                b,
                &format!("decoder.block{i}"),
                config.heads,
                h,
                memory.tokens,
            )?;
        }
        linear(g, b, "output_proj", h)
    }

    /// Predict the clean sample from a noised one, both in normalized
    /// units. Deterministic given weights and inputs.
    pub fn predict_x0(
        &self,
        x_t: &MotionSequence,
        t: usize,
        bundle: &ConditionBundle,
    ) -> Result<MotionSequence> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(Tensor::new(
            vec![x_t.num_frames(), x_t.dim()],
            x_t.values().to_vec(),
        )?);
        let out = self.forward_graph(&mut g, &b, x, bundle, t)?;
        MotionSequence::new(x_t.dim(), g.value(out).data().to_vec(), x_t.fps())
    }

    /// Ancestral sampling from pure noise, conditioned on `bundle`;
    /// returns a sequence in raw dataset units.
    pub fn sample_sequence(
        &self,
        bundle: &ConditionBundle,
        schedule: &DiffusionSchedule,
        frames: usize,
        fps: f64,
        rng: &mut impl Rng,
    ) -> Result<MotionSequence> {
        let normalized = sample_chain(
            frames,
            self.config.motion_dim(),
            fps,
            schedule,
            rng,
            |x_t, t| self.predict_x0(x_t, t, bundle),
        )?;
        self.stats.denormalize(&normalized)
    }
}
