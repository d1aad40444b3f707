use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

use super::attention::efficient_attention;

/// Named parameter tensors, iterated in name order everywhere so that
/// initialization, serialization, and optimizer state all line up.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Params {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: String, value: Tensor) {
        self.map.insert(name, value);
    }

    #[cfg(test)]
    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn lookup_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }
}

/// Parameters bound into a graph as leaves for one forward pass.
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub(crate) fn bind(g: &mut Graph, params: &Params, trainable: bool) -> Self {
        let mut vars = BTreeMap::new();
        for (name, tensor) in params.iter() {
            vars.insert(name.clone(), g.leaf(tensor.clone(), trainable));
        }
        Binding { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Init {
    /// Uniform in ±sqrt(1/fan_in).
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

pub(crate) fn linear_specs(out: &mut Vec<ParamSpec>, name: &str, din: usize, dout: usize) {
    out.push(ParamSpec {
        name: format!("{name}.w"),
        shape: vec![din, dout],
        init: Init::FanIn(din),
    });
    out.push(ParamSpec {
        name: format!("{name}.b"),
        shape: vec![dout],
        init: Init::Zeros,
    });
}

pub(crate) fn zero_linear_specs(out: &mut Vec<ParamSpec>, name: &str, din: usize, dout: usize) {
    out.push(ParamSpec {
        name: format!("{name}.w"),
        shape: vec![din, dout],
        init: Init::Zeros,
    });
    out.push(ParamSpec {
        name: format!("{name}.b"),
        shape: vec![dout],
        init: Init::Zeros,
    });
}

pub(crate) fn norm_specs(out: &mut Vec<ParamSpec>, name: &str, h: usize) {
    out.push(ParamSpec {
        name: format!("{name}.g"),
        shape: vec![h],
        init: Init::Ones,
    });
    out.push(ParamSpec {
        name: format!("{name}.b"),
        shape: vec![h],
        init: Init::Zeros,
    });
}

pub(crate) fn attention_specs(out: &mut Vec<ParamSpec>, prefix: &str, h: usize) {
    for proj in ["q", "k", "v", "o"] {
        linear_specs(out, &format!("{prefix}.{proj}"), h, h);
    }
}

pub(crate) fn ffn_specs(out: &mut Vec<ParamSpec>, prefix: &str, h: usize) {
    linear_specs(out, &format!("{prefix}.lin1"), h, 4 * h);
    linear_specs(out, &format!("{prefix}.lin2"), 4 * h, h);
}

pub(crate) fn encoder_block_specs(out: &mut Vec<ParamSpec>, prefix: &str, h: usize) {
    norm_specs(out, &format!("{prefix}.ln1"), h);
    attention_specs(out, &format!("{prefix}.attn"), h);
    norm_specs(out, &format!("{prefix}.ln2"), h);
    ffn_specs(out, &format!("{prefix}.ffn"), h);
}

pub(crate) fn decoder_block_specs(out: &mut Vec<ParamSpec>, prefix: &str, h: usize) {
    norm_specs(out, &format!("{prefix}.ln1"), h);
    attention_specs(out, &format!("{prefix}.self_attn"), h);
    norm_specs(out, &format!("{prefix}.ln2"), h);
    attention_specs(out, &format!("{prefix}.cross_attn"), h);
    norm_specs(out, &format!("{prefix}.ln3"), h);
    ffn_specs(out, &format!("{prefix}.ffn"), h);
}

pub(crate) fn init_params(specs: &[ParamSpec], rng: &mut impl Rng) -> Params {
    let mut params = Params::new();
    for spec in specs {
        let tensor = match spec.init {
            Init::FanIn(fan_in) => Tensor::fan_in_init(&spec.shape, fan_in, rng),
            Init::Zeros => Tensor::zeros(&spec.shape),
            Init::Ones => Tensor::new(spec.shape.clone(), vec![1.0; spec.shape.iter().product()])
                .expect("ones init"),
        };
        params.insert(spec.name.clone(), tensor);
    }
    params
}

/// `x·W + b` with `x: n×din`, `W: din×dout`, `b: dout`.
pub(crate) fn linear(g: &mut Graph, b: &Binding, name: &str, x: Var) -> Result<Var> {
    let w = b.var(&format!("{name}.w"));
    let bias = b.var(&format!("{name}.b"));
    let h = g.matmul(x, w)?;
    g.add_bias(h, bias)
}

pub(crate) fn layer_norm(g: &mut Graph, b: &Binding, name: &str, x: Var) -> Result<Var> {
    let gain = b.var(&format!("{name}.g"));
    let bias = b.var(&format!("{name}.b"));
    g.layer_norm(x, gain, bias)
}

/// Multi-head efficient attention: heads split the width, attend
/// independently, and their outputs are concatenated and projected.
pub(crate) fn multi_head_attention(
    g: &mut Graph,
    b: &Binding,
    prefix: &str,
    heads: usize,
    x_q: Var,
    x_kv: Var,
) -> Result<Var> {
    let q = linear(g, b, &format!("{prefix}.q"), x_q)?;
    let k = linear(g, b, &format!("{prefix}.k"), x_kv)?;
    let v = linear(g, b, &format!("{prefix}.v"), x_kv)?;
    let (_, h) = g.value(q).dims2()?;
    if h % heads != 0 {
        return Err(Error::contract(format!(
            "width {h} not divisible by {heads} heads"
        )));
    }
    let dh = h / heads;
    let mut outs = Vec::with_capacity(heads);
    for i in 0..heads {
        let qh = g.slice_cols(q, i * dh, dh)?;
        let kh = g.slice_cols(k, i * dh, dh)?;
        let vh = g.slice_cols(v, i * dh, dh)?;
        outs.push(efficient_attention(g, qh, kh, vh)?);
    }
    let cat = g.concat_cols(&outs)?;
    linear(g, b, &format!("{prefix}.o"), cat)
}

pub(crate) fn feed_forward(g: &mut Graph, b: &Binding, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, b, &format!("{prefix}.lin1"), x)?;
    let h = g.gelu(h);
    linear(g, b, &format!("{prefix}.lin2"), h)
}

/// Pre-layer-norm self-attention block with residuals.
pub(crate) fn encoder_block(
    g: &mut Graph,
    b: &Binding,
    prefix: &str,
    heads: usize,
    x: Var,
) -> Result<Var> {
    let n1 = layer_norm(g, b, &format!("{prefix}.ln1"), x)?;
    let a = multi_head_attention(g, b, &format!("{prefix}.attn"), heads, n1, n1)?;
    let h = g.add(x, a)?;
    let n2 = layer_norm(g, b, &format!("{prefix}.ln2"), h)?;
    let f = feed_forward(g, b, &format!("{prefix}.ffn"), n2)?;
    g.add(h, f)
}

/// Pre-layer-norm block with self-attention, cross-attention to `memory`,
/// and a feed-forward, each behind a residual.
pub(crate) fn decoder_block(
    g: &mut Graph,
    b: &Binding,
    prefix: &str,
    heads: usize,
    x: Var,
    memory: Var,
) -> Result<Var> {
    let n1 = layer_norm(g, b, &format!("{prefix}.ln1"), x)?;
    let a = multi_head_attention(g, b, &format!("{prefix}.self_attn"), heads, n1, n1)?;
    let h = g.add(x, a)?;
    let n2 = layer_norm(g, b, &format!("{prefix}.ln2"), h)?;
    let c = multi_head_attention(g, b, &format!("{prefix}.cross_attn"), heads, n2, memory)?;
    let h = g.add(h, c)?;
    let n3 = layer_norm(g, b, &format!("{prefix}.ln3"), h)?;
    let f = feed_forward(g, b, &format!("{prefix}.ffn"), n3)?;
    g.add(h, f)
}

/// Standard sinusoidal table: row `pos` holds interleaved
/// sin(pos·w_i), cos(pos·w_i) with w_i = 10000^(-2i/h). Requires even h.
pub(crate) fn sinusoidal_positions(n: usize, h: usize) -> Tensor {
    let mut data = vec![0.0; n * h];
    for pos in 0..n {
        fill_sinusoid(&mut data[pos * h..(pos + 1) * h], pos as f64);
    }
    Tensor::new(vec![n, h], data).expect("position table")
}

/// Sinusoidal embedding of the scalar timestep, as a 1×h row.
pub(crate) fn timestep_embedding(t: usize, h: usize) -> Tensor {
    let mut data = vec![0.0; h];
    fill_sinusoid(&mut data, t as f64);
    Tensor::new(vec![1, h], data).expect("timestep embedding")
}

fn fill_sinusoid(row: &mut [f64], pos: f64) {
    let h = row.len();
    for i in 0..h / 2 {
        let freq = 10000f64.powf(-2.0 * i as f64 / h as f64);
        let angle = pos * freq;
        row[2 * i] = angle.sin();
        row[2 * i + 1] = angle.cos();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tests_rng;

    fn toy_params(h: usize) -> (Params, Vec<ParamSpec>) {
        let mut specs = Vec::new();
        encoder_block_specs(&mut specs, "blk", h);
        let mut rng = tests_rng(100);
        (init_params(&specs, &mut rng), specs)
    }

    #[test]
    fn init_respects_specs() {
        let (params, specs) = toy_params(8);
        assert_eq!(params.len(), specs.len());
        for spec in &specs {
            let t = params.get(&spec.name);
            assert_eq!(t.shape(), &spec.shape[..]);
            match spec.init {
                Init::Zeros => assert!(t.data().iter().all(|&v| v == 0.0)),
                Init::Ones => assert!(t.data().iter().all(|&v| v == 1.0)),
                Init::FanIn(fan_in) => {
                    let bound = (1.0 / fan_in as f64).sqrt();
                    assert!(t.data().iter().all(|&v| v.abs() <= bound));
                    assert!(t.data().iter().any(|&v| v != 0.0));
                }
            }
        }
    }

    #[test]
    fn encoder_block_keeps_shape_and_is_deterministic() {
        let (params, _) = toy_params(8);
        let run = || {
            let mut g = Graph::new();
            let b = Binding::bind(&mut g, &params, false);
            let x = g.constant(sinusoidal_positions(5, 8));
            let y = encoder_block(&mut g, &b, "blk", 2, x).unwrap();
            g.value(y).clone()
        };
        let a = run();
        let c = run();
        assert_eq!(a.shape(), &[5, 8]);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&c));
    }

    #[test]
    fn decoder_block_attends_to_memory() {
        let mut specs = Vec::new();
        decoder_block_specs(&mut specs, "dec", 8);
        let mut rng = tests_rng(101);
        let params = init_params(&specs, &mut rng);
        let run = |mem_scale: f64| {
            let mut g = Graph::new();
            let b = Binding::bind(&mut g, &params, false);
            let x = g.constant(sinusoidal_positions(4, 8));
            let mem = g.constant(sinusoidal_positions(6, 8).map(|v| v * mem_scale));
            let y = decoder_block(&mut g, &b, "dec", 2, x, mem).unwrap();
            g.value(y).clone()
        };
        let a = run(1.0);
        let b = run(-1.0);
        assert!(a.data().iter().zip(b.data()).any(|(x, y)| x != y));
    }

    #[test]
    fn sinusoid_first_column_pair() {
        let t = sinusoidal_positions(3, 4);
        assert_eq!(t.at(0, 0), 0.0);
        assert_eq!(t.at(0, 1), 1.0);
        assert!((t.at(2, 0) - 2f64.sin()).abs() < 1e-15);
        assert!((t.at(2, 1) - 2f64.cos()).abs() < 1e-15);
        let e = timestep_embedding(7, 4);
        assert!((e.at(0, 0) - 7f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn distinct_positions_get_distinct_rows() {
        let t = sinusoidal_positions(16, 8);
        for a in 0..16 {
            for b in (a + 1)..16 {
                assert!(t.row(a) != t.row(b), "rows {a} and {b} collide");
            }
        }
    }
}
