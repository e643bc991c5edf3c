//! Four coupled Transformer-XL stream networks.
//!
//! Each stream (on2on, on2off, pitch, velocity) owns an embedding table, a
//! resize linear, a stack of relative-attention blocks with its own segment
//! memory, and an output head. The networks interact only through their
//! inputs: pitch reads the two time-stream embeddings next to its own, and
//! velocity reads those plus pitch's. Training sums the four cross-entropies.

mod attention;
mod config;
mod memory;
mod posenc;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use attention::{
    causal_mask, rel_attention, transformer_block, AttentionWeights, AttnShape, BlockWeights, Dropout,
    LAYER_NORM_EPS,
};
pub use config::{FfnResidual, ModelConfig};
pub use memory::StreamMemory;
pub use posenc::sinusoid_rows;

use crate::codec::Stream;
use crate::tensor::{Checkpoint, CheckpointError, Graph, Scalar, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Streams whose embeddings are concatenated into each stream's input,
/// own stream first.
pub fn coupled_inputs(s: Stream) -> &'static [Stream] {
    match s {
        Stream::On2On => &[Stream::On2On],
        Stream::On2Off => &[Stream::On2Off],
        Stream::Pitch => &[Stream::Pitch, Stream::On2On, Stream::On2Off],
        Stream::Velocity => &[Stream::Velocity, Stream::On2On, Stream::On2Off, Stream::Pitch],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
}

impl<T: Scalar> ParamStore<T> {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    fn add(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.names.push(name);
        self.values.push(Arc::new(Tensor::zeros(shape)));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Arc<Tensor<T>>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Arc<Tensor<T>>] {
        &mut self.values
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn element_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerIds {
    query: ParamId,
    key_content: ParamId,
    key_position: ParamId,
    value: ParamId,
    out_weight: ParamId,
    out_bias: ParamId,
    content_bias: ParamId,
    position_bias: ParamId,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
    proj_weight: ParamId,
    proj_bias: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
}

impl LayerIds {
    fn bind(&self, b: &[Var]) -> BlockWeights {
        BlockWeights {
            attn: AttentionWeights {
                query: b[self.query.0],
                key_content: b[self.key_content.0],
                key_position: b[self.key_position.0],
                value: b[self.value.0],
                out_weight: b[self.out_weight.0],
                out_bias: b[self.out_bias.0],
                content_bias: b[self.content_bias.0],
                position_bias: b[self.position_bias.0],
            },
            ln1_gain: b[self.ln1_gain.0],
            ln1_bias: b[self.ln1_bias.0],
            ffn_w1: b[self.ffn_w1.0],
            ffn_b1: b[self.ffn_b1.0],
            ffn_w2: b[self.ffn_w2.0],
            ffn_b2: b[self.ffn_b2.0],
            proj_weight: b[self.proj_weight.0],
            proj_bias: b[self.proj_bias.0],
            ln2_gain: b[self.ln2_gain.0],
            ln2_bias: b[self.ln2_bias.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct StreamIds {
    embedding: ParamId,
    resize_weight: ParamId,
    resize_bias: ParamId,
    layers: Vec<LayerIds>,
    head_weight: ParamId,
    head_bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Logit handles of one forward pass plus the memory to carry forward.
pub struct ForwardOutput<T> {
    pub logits: [Var; 4],
    pub memory: StreamMemory<T>,
}

/// Per-stream and summed cross-entropy handles.
pub struct JointLoss {
    pub total: Var,
    pub per_stream: [Var; 4],
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    kind: String,
    model: ModelConfig,
}

pub const MODEL_CHECKPOINT_KIND: &str = "mtxl-model";

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    inits: Vec<Init>,
    streams: Vec<StreamIds>,
}

impl<T: Scalar> Model<T> {
    /// Weights and u/v drawn from N(0, init_std); biases and layer-norm
    /// shifts zero; layer-norm gains one.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut m = Self::zeroed(config)?;
        m.initialize(seed);
        Ok(m)
    }

    /// Every parameter at its deterministic initial value (weights zero).
    pub fn zeroed(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut inits = Vec::new();
        let mut add = |name: String, shape: &[usize], init: Init| {
            inits.push(init);
            let id = params.add(name, shape);
            if init == Init::Ones {
                Arc::make_mut(&mut params.values[id.0])
                    .data_mut()
                    .iter_mut()
                    .for_each(|x| *x = T::one());
            }
            id
        };
        let d = config.d_model;
        let a = config.attn_dim();
        let mut streams = Vec::with_capacity(4);
        for s in Stream::ALL {
            let p = s.name();
            let vocab = config.vocab_sizes[s.index()];
            let width = coupled_inputs(s).len() * d;
            let embedding = add(format!("{p}.embedding"), &[vocab, d], Init::Normal);
            let resize_weight = add(format!("{p}.resize.weight"), &[width, d], Init::Normal);
            let resize_bias = add(format!("{p}.resize.bias"), &[1, d], Init::Zeros);
            let layers = (0..config.n_layers)
                .map(|n| {
                    let l = format!("{p}.layer{n}");
                    LayerIds {
                        query: add(format!("{l}.attn.query"), &[d, a], Init::Normal),
                        key_content: add(format!("{l}.attn.key_content"), &[d, a], Init::Normal),
                        key_position: add(format!("{l}.attn.key_position"), &[d, a], Init::Normal),
                        value: add(format!("{l}.attn.value"), &[d, a], Init::Normal),
                        out_weight: add(format!("{l}.attn.out.weight"), &[a, d], Init::Normal),
                        out_bias: add(format!("{l}.attn.out.bias"), &[1, d], Init::Zeros),
                        content_bias: add(format!("{l}.attn.content_bias"), &[1, a], Init::Normal),
                        position_bias: add(format!("{l}.attn.position_bias"), &[1, a], Init::Normal),
                        ln1_gain: add(format!("{l}.ln1.gain"), &[1, d], Init::Ones),
                        ln1_bias: add(format!("{l}.ln1.bias"), &[1, d], Init::Zeros),
                        ffn_w1: add(format!("{l}.ffn.w1"), &[d, config.d_ff], Init::Normal),
                        ffn_b1: add(format!("{l}.ffn.b1"), &[1, config.d_ff], Init::Zeros),
                        ffn_w2: add(format!("{l}.ffn.w2"), &[config.d_ff, d], Init::Normal),
                        ffn_b2: add(format!("{l}.ffn.b2"), &[1, d], Init::Zeros),
                        proj_weight: add(format!("{l}.proj.weight"), &[d, d], Init::Normal),
                        proj_bias: add(format!("{l}.proj.bias"), &[1, d], Init::Zeros),
                        ln2_gain: add(format!("{l}.ln2.gain"), &[1, d], Init::Ones),
                        ln2_bias: add(format!("{l}.ln2.bias"), &[1, d], Init::Zeros),
                    }
                })
                .collect();
            let head_weight = add(format!("{p}.head.weight"), &[d, vocab], Init::Normal);
            let head_bias = add(format!("{p}.head.bias"), &[1, vocab], Init::Zeros);
            streams.push(StreamIds {
                embedding,
                resize_weight,
                resize_bias,
                layers,
                head_weight,
                head_bias,
            });
        }
        Ok(Self {
            config,
            params,
            inits,
            streams,
        })
    }

    fn initialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, self.config.init_std).expect("validated std");
        for (value, init) in self.params.values.iter_mut().zip(&self.inits) {
            let t = Arc::make_mut(value);
            match init {
                Init::Normal => t
                    .data_mut()
                    .iter_mut()
                    .for_each(|x| *x = T::from_f64_lossy(normal.sample(&mut rng))),
                Init::Zeros => t.data_mut().iter_mut().for_each(|x| *x = T::zero()),
                Init::Ones => t.data_mut().iter_mut().for_each(|x| *x = T::one()),
            }
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Same architecture with a different memory length.
    pub fn with_mem_len(&self, mem_len: usize) -> Self {
        let mut m = self.clone();
        m.config.mem_len = mem_len;
        m
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: ParamStore {
                names: self.params.names.clone(),
                values: self.params.values.iter().map(|v| Arc::new(v.cast())).collect(),
            },
            inits: self.inits.clone(),
            streams: self.streams.clone(),
        }
    }

    /// Registers every parameter as a trainable leaf; the returned handles
    /// are indexed by [`ParamId`].
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.values.iter().map(|v| g.param(Arc::clone(v))).collect()
    }

    /// Registers every parameter as a constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params
            .values
            .iter()
            .map(|v| g.constant_shared(Arc::clone(v)))
            .collect()
    }

    pub fn empty_memory(&self) -> StreamMemory<T> {
        StreamMemory::empty(self.config.n_layers, self.config.d_model)
    }

    /// Runs all four networks over one segment. `tokens[s]` are the inputs
    /// of stream `s` (equal lengths); logits at row `i` predict position
    /// `i + 1`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        bound: &[Var],
        tokens: [&[u32]; 4],
        memory: &StreamMemory<T>,
        dropout: &mut Dropout<'_>,
    ) -> Result<ForwardOutput<T>, ModelError> {
        let cfg = &self.config;
        let len = tokens[0].len();
        if len == 0 || tokens.iter().any(|t| t.len() != len) {
            return Err(ModelError::Input(format!(
                "segment lengths must be equal and positive, got {:?}",
                tokens.map(<[u32]>::len)
            )));
        }
        if bound.len() != self.params.len() {
            return Err(ModelError::Input("parameters bound to a different model".into()));
        }
        memory.check(cfg.n_layers, cfg.d_model)?;
        let mem_rows = memory.len();

        let distances: Vec<i64> = (0..(mem_rows + len) as i64).collect();
        let positions = g.constant(sinusoid_rows(&distances, cfg.d_model)?);
        let mask = causal_mask::<T>(len, mem_rows);
        let shape = AttnShape {
            n_heads: cfg.n_heads,
            head_dim: cfg.head_dim,
        };

        let mut embedded = Vec::with_capacity(4);
        for s in Stream::ALL {
            let ids: Vec<usize> = tokens[s.index()].iter().map(|&t| t as usize).collect();
            embedded.push(g.embedding(bound[self.streams[s.index()].embedding.0], &ids)?);
        }

        let mut logits = Vec::with_capacity(4);
        let mut layer_inputs: [Vec<Arc<Tensor<T>>>; 4] = Default::default();
        for s in Stream::ALL {
            let ids = &self.streams[s.index()];
            let parts: Vec<Var> = coupled_inputs(s).iter().map(|c| embedded[c.index()]).collect();
            let joined = if parts.len() == 1 {
                parts[0]
            } else {
                g.concat_cols(&parts)?
            };
            let x = g.matmul(joined, bound[ids.resize_weight.0])?;
            let mut x = g.add_row(x, bound[ids.resize_bias.0])?;
            x = dropout.apply(g, x);
            for (n, layer) in ids.layers.iter().enumerate() {
                layer_inputs[s.index()].push(g.shared_value(x));
                let mem = memory.layer(s, n).filter(|_| mem_rows > 0).map(|m| g.constant_shared(m));
                x = transformer_block(
                    g,
                    x,
                    mem,
                    &layer.bind(bound),
                    shape,
                    positions,
                    &mask,
                    cfg.ffn_residual,
                    dropout,
                )?;
            }
            let y = g.matmul(x, bound[ids.head_weight.0])?;
            logits.push(g.add_row(y, bound[ids.head_bias.0])?);
        }
        let memory = memory.advanced(&layer_inputs, cfg.mem_len)?;
        let logits = [logits[0], logits[1], logits[2], logits[3]];
        Ok(ForwardOutput { logits, memory })
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let meta = serde_json::to_string(&ModelMeta {
            kind: MODEL_CHECKPOINT_KIND.into(),
            model: self.config.clone(),
        })
        .expect("config serializes");
        let mut ck = Checkpoint::new(meta);
        for (n, v) in self.params.names.iter().zip(&self.params.values) {
            ck.push(n.clone(), (**v).clone());
        }
        ck
    }

    /// Rebuilds a model from a checkpoint; extra tensors are ignored.
    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self, ModelError> {
        let meta: ModelMeta = serde_json::from_str(&ck.meta)
            .map_err(|e| ModelError::Config(format!("checkpoint metadata: {e}")))?;
        let mut m = Self::zeroed(meta.model)?;
        for i in 0..m.params.len() {
            let t = ck.get(&m.params.names[i])?;
            if t.shape() != m.params.values[i].shape() {
                return Err(ModelError::Config(format!(
                    "{} has shape {:?}, expected {:?}",
                    m.params.names[i],
                    t.shape(),
                    m.params.values[i].shape()
                )));
            }
            m.params.values[i] = Arc::new(t.clone());
        }
        Ok(m)
    }
}

/// Checkpoint metadata's model config without loading tensors.
pub fn checkpoint_model_config(meta: &str) -> Result<ModelConfig, ModelError> {
    let m: ModelMeta =
        serde_json::from_str(meta).map_err(|e| ModelError::Config(format!("checkpoint metadata: {e}")))?;
    Ok(m.model)
}

/// Sum of the four streams' mean cross-entropies over rows flagged `valid`.
pub fn joint_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: &[Var; 4],
    targets: [&[u32]; 4],
    valid: &[bool],
) -> Result<JointLoss, ModelError> {
    let mut per_stream = [logits[0]; 4];
    for s in Stream::ALL {
        let t: Vec<usize> = targets[s.index()].iter().map(|&x| x as usize).collect();
        if t.len() != valid.len() {
            return Err(ModelError::Input(format!(
                "{} targets: {} entries for {} positions",
                s.name(),
                t.len(),
                valid.len()
            )));
        }
        per_stream[s.index()] = g.cross_entropy(logits[s.index()], &t, valid)?;
    }
    let a = g.add(per_stream[0], per_stream[1])?;
    let b = g.add(per_stream[2], per_stream[3])?;
    let total = g.add(a, b)?;
    Ok(JointLoss { total, per_stream })
}
