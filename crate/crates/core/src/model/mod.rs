//! Encoder-decoder and decoder-only Transformer language models.
//!
//! Both families run on the [`Tape`] so that the same code path serves
//! training, evaluation and gradient checking. A forward pass can capture
//! every layer output and can overwrite decoder layer outputs through an
//! installed transform.

mod checkpoint;
mod config;

pub use checkpoint::{read_tensor_file, write_tensor_file, CheckpointHeader, TensorFile, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Ablations, Activation, Family, ModelConfig, PositionalEncoding};

use crate::autodiff::{AttentionShape, Tape, Var};
use crate::error::{ArithError, Result};
use crate::rng::RngState;
use crate::tasks::{vocab, Token};
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;

/// Initialisation scheme, recorded in run manifests.
pub fn init_scheme(family: Family) -> &'static str {
    match family {
        Family::EncoderDecoder => "weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)), embeddings N(0, 1)/sqrt(d_model), biases 0, norms (1, 0)",
        Family::DecoderOnly => "weights and embeddings N(0, 0.02), residual projections N(0, 0.02/sqrt(2L)), no biases, norm gains 1",
    }
}

/// Transform applied in place to one sample's concatenated layer output.
pub type Overwrite<T> = Arc<dyn Fn(&mut [T]) + Send + Sync>;

/// Which positions contribute to the loss of a decoder-only model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMask {
    #[default]
    CompletionOnly,
    /// Every next-token position of the concatenated sequence.
    FullSequence,
}

#[derive(Clone, Copy, Debug)]
struct Lin {
    w: usize,
    b: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: usize,
    b: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
struct Attn {
    q: Lin,
    k: Lin,
    v: Lin,
    o: Lin,
}

#[derive(Clone, Copy, Debug)]
struct Ffn {
    up: Lin,
    down: Lin,
}

#[derive(Clone, Debug)]
struct Block {
    self_attn: Option<(Attn, Norm)>,
    cross_attn: Option<(Attn, Norm)>,
    ffn: Option<(Ffn, Norm)>,
}

#[derive(Clone, Debug)]
struct Layout {
    src_emb: Option<usize>,
    tgt_emb: usize,
    pos_emb: Option<usize>,
    encoder: Vec<Block>,
    enc_norm: Option<Norm>,
    decoder: Vec<Block>,
    dec_norm: Norm,
    head: Lin,
}

struct Builder<'a, T: Scalar> {
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    rng: &'a mut RngState,
    d: usize,
    bias: bool,
    /// `Some(std)` selects Gaussian init with this residual-projection std.
    gaussian: Option<f64>,
}

impl<T: Scalar> Builder<'_, T> {
    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    fn matrix(&mut self, rows: usize, cols: usize, residual: bool) -> Vec<T> {
        match self.gaussian {
            Some(res_std) => {
                let std = if residual { res_std } else { 0.02 };
                (0..rows * cols).map(|_| T::of(self.rng.normal() * std)).collect()
            }
            None => {
                let bound = 1.0 / (rows as f64).sqrt();
                (0..rows * cols).map(|_| T::of(self.rng.uniform_range(-bound, bound))).collect()
            }
        }
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Lin {
        self.linear_init(name, fan_in, fan_out, bias, false)
    }

    fn linear_init(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool, residual: bool) -> Lin {
        let data = self.matrix(fan_in, fan_out, residual);
        let w = self.push(format!("{name}.w"), Tensor::new(vec![fan_in, fan_out], data).unwrap());
        let b = bias.then(|| self.push(format!("{name}.b"), Tensor::zeros(&[fan_out])));
        Lin { w, b }
    }

    fn norm(&mut self, name: &str) -> Norm {
        let ones = Tensor::new(vec![self.d], vec![T::one(); self.d]).unwrap();
        let g = self.push(format!("{name}.g"), ones);
        let b = self.bias.then(|| self.push(format!("{name}.b"), Tensor::zeros(&[self.d])));
        Norm { g, b }
    }

    fn embedding(&mut self, name: &str, rows: usize) -> usize {
        let data = match self.gaussian {
            Some(_) => self.matrix(rows, self.d, false),
            None => {
                let std = 1.0 / (self.d as f64).sqrt();
                (0..rows * self.d).map(|_| T::of(self.rng.normal() * std)).collect()
            }
        };
        self.push(name.to_string(), Tensor::new(vec![rows, self.d], data).unwrap())
    }

    fn attn(&mut self, name: &str) -> Attn {
        let d = self.d;
        Attn {
            q: self.linear(&format!("{name}.q"), d, d, self.bias),
            k: self.linear(&format!("{name}.k"), d, d, self.bias),
            v: self.linear(&format!("{name}.v"), d, d, self.bias),
            o: self.linear_init(&format!("{name}.o"), d, d, self.bias, true),
        }
    }

    fn ffn(&mut self, name: &str, d_ff: usize) -> Ffn {
        let d = self.d;
        Ffn {
            up: self.linear(&format!("{name}.up"), d, d_ff, self.bias),
            down: self.linear_init(&format!("{name}.down"), d_ff, d, self.bias, true),
        }
    }
}

/// Per-layer outputs of one batch, each `[batch · len · d_model]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerActivations<T: Scalar = f32> {
    pub batch: usize,
    pub d_model: usize,
    pub enc_len: usize,
    pub dec_len: usize,
    pub enc: Vec<Vec<T>>,
    pub dec: Vec<Vec<T>>,
}

impl<T: Scalar> LayerActivations<T> {
    /// Concatenated embeddings of `sample` after encoder layer `layer` (1-based).
    pub fn enc_vector(&self, layer: usize, sample: usize) -> Result<&[T]> {
        let data = layer
            .checked_sub(1)
            .and_then(|i| self.enc.get(i))
            .ok_or(ArithError::LayerRange {
                index: layer,
                count: self.enc.len(),
            })?;
        let n = self.enc_len * self.d_model;
        Ok(&data[sample * n..(sample + 1) * n])
    }

    /// Concatenated embeddings of `sample` after decoder layer `layer` (1-based).
    pub fn dec_vector(&self, layer: usize, sample: usize) -> Result<&[T]> {
        let data = layer
            .checked_sub(1)
            .and_then(|i| self.dec.get(i))
            .ok_or(ArithError::LayerRange {
                index: layer,
                count: self.dec.len(),
            })?;
        let n = self.dec_len * self.d_model;
        Ok(&data[sample * n..(sample + 1) * n])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Rows {
    /// One row per completion token: `prefix_len + 1` rows per sample.
    Completion,
    /// Only the last position of each sample.
    Last,
    /// Every next-token position of a decoder-only sequence.
    Full,
}

struct Pass<'a, T: Scalar> {
    dropout: Option<(f64, &'a mut RngState)>,
    capture: bool,
    acts: LayerActivations<T>,
}

impl<T: Scalar> Pass<'_, T> {
    fn eval(capture: bool) -> Pass<'static, T> {
        Pass {
            dropout: None,
            capture,
            acts: LayerActivations::default(),
        }
    }
}

/// Teacher-forced logits for a batch, `rows_per_sample × vocab` per sample.
#[derive(Clone, Debug)]
pub struct BatchLogits<T: Scalar = f32> {
    pub logits: Vec<T>,
    pub rows_per_sample: usize,
    pub vocab: usize,
    pub activations: Option<LayerActivations<T>>,
}

impl<T: Scalar> BatchLogits<T> {
    pub fn row(&self, sample: usize, pos: usize) -> &[T] {
        let start = (sample * self.rows_per_sample + pos) * self.vocab;
        &self.logits[start..start + self.vocab]
    }

    pub fn argmax(&self, sample: usize, pos: usize) -> Token {
        argmax(self.row(sample, pos))
    }
}

/// Index of the largest logit; ties go to the lowest token id.
pub fn argmax<T: Scalar>(row: &[T]) -> Token {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best as Token
}

/// Standard sin/cos encoding with geometric wavelengths.
pub fn sinusoidal_pe(position: usize, d_model: usize) -> Vec<f64> {
    (0..d_model)
        .map(|j| {
            let i = (j / 2) as f64;
            let angle = position as f64 / 10000f64.powf(2.0 * i / d_model as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

pub const EVAL_CHUNK: usize = 256;

pub struct Model<T: Scalar = f32> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    layout: Layout,
    hooks: Vec<Option<Overwrite<T>>>,
}

impl<T: Scalar> Clone for Model<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.clone(),
            layout: self.layout.clone(),
            hooks: self.hooks.clone(),
        }
    }
}

impl<T: Scalar> fmt::Debug for Model<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("parameters", &self.parameter_count())
            .field("hooks", &self.hooks.iter().filter(|h| h.is_some()).count())
            .finish()
    }
}

fn flatten(rows: &[&[Token]], what: &'static str) -> Result<(Vec<usize>, usize)> {
    let len = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != len) {
        return Err(ArithError::Contract(format!("{what} sequences must share one length")));
    }
    Ok((rows.iter().flat_map(|r| r.iter().map(|&t| t as usize)).collect(), len))
}

impl<T: Scalar> Model<T> {
    pub fn build(config: ModelConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let v = config.vocab_size;
        let ab = config.ablations;
        let mut b = Builder {
            names: Vec::new(),
            params: Vec::new(),
            rng,
            d,
            bias: config.bias,
            gaussian: (config.family == Family::DecoderOnly).then(|| 0.02 / ((2 * config.decoder_layers.max(1)) as f64).sqrt()),
        };
        let layout = match config.family {
            Family::EncoderDecoder => {
                let src_emb = Some(b.embedding("src_emb", v));
                let tgt_emb = b.embedding("tgt_emb", v);
                let pos_emb = (config.positional_encoding == PositionalEncoding::Learned)
                    .then(|| b.embedding("pos_emb", config.max_positions));
                let enc_layers = if ab.squeeze_encoder { 0 } else { config.encoder_layers };
                let mut encoder = Vec::with_capacity(enc_layers);
                for i in 0..enc_layers {
                    let p = format!("enc.{i}");
                    encoder.push(Block {
                        self_attn: (!ab.no_attention).then(|| (b.attn(&format!("{p}.attn")), b.norm(&format!("{p}.norm1")))),
                        cross_attn: None,
                        ffn: (!ab.no_ffn).then(|| (b.ffn(&format!("{p}.ffn"), config.d_ff), b.norm(&format!("{p}.norm2")))),
                    });
                }
                let enc_norm = (enc_layers > 0).then(|| b.norm("enc.norm"));
                let mut decoder = Vec::with_capacity(config.decoder_layers);
                for i in 0..config.decoder_layers {
                    let p = format!("dec.{i}");
                    decoder.push(Block {
                        self_attn: (!ab.no_attention).then(|| (b.attn(&format!("{p}.self")), b.norm(&format!("{p}.norm1")))),
                        cross_attn: (!ab.no_attention).then(|| (b.attn(&format!("{p}.cross")), b.norm(&format!("{p}.norm2")))),
                        ffn: (!ab.no_ffn).then(|| (b.ffn(&format!("{p}.ffn"), config.d_ff), b.norm(&format!("{p}.norm3")))),
                    });
                }
                let dec_norm = b.norm("dec.norm");
                let head = b.linear("head", d, v, config.bias);
                Layout {
                    src_emb,
                    tgt_emb,
                    pos_emb,
                    encoder,
                    enc_norm,
                    decoder,
                    dec_norm,
                    head,
                }
            }
            Family::DecoderOnly => {
                let tgt_emb = b.embedding("wte", v);
                let pos_emb = (config.positional_encoding == PositionalEncoding::Learned)
                    .then(|| b.embedding("wpe", config.max_positions));
                let mut decoder = Vec::with_capacity(config.decoder_layers);
                for i in 0..config.decoder_layers {
                    let p = format!("h.{i}");
                    decoder.push(Block {
                        self_attn: (!ab.no_attention).then(|| {
                            let n = b.norm(&format!("{p}.ln1"));
                            (b.attn(&format!("{p}.attn")), n)
                        }),
                        cross_attn: None,
                        ffn: (!ab.no_ffn).then(|| {
                            let n = b.norm(&format!("{p}.ln2"));
                            (b.ffn(&format!("{p}.mlp"), config.d_ff), n)
                        }),
                    });
                }
                let dec_norm = b.norm("ln_f");
                let head = b.linear("lm_head", d, v, false);
                Layout {
                    src_emb: None,
                    tgt_emb,
                    pos_emb,
                    encoder: Vec::new(),
                    enc_norm: None,
                    decoder,
                    dec_norm,
                    head,
                }
            }
        };
        let Builder { names, params, .. } = b;
        let hooks = vec![None; config.decoder_layers];
        Ok(Self {
            config,
            names,
            params,
            layout,
            hooks,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    /// Replaces parameter data from `(name, tensor)` pairs; every name must
    /// exist and shapes must match.
    pub fn load_params<U: Scalar>(&mut self, tensors: &[(String, Tensor<U>)]) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(ArithError::Format(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                tensors.len()
            )));
        }
        for (name, t) in tensors {
            let i = self
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| ArithError::Format(format!("unknown parameter {name}")))?;
            if self.params[i].shape() != t.shape() {
                return Err(ArithError::Shape {
                    op: "load_params",
                    left: self.params[i].shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            self.params[i] = t.cast();
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            layout: self.layout.clone(),
            hooks: vec![None; self.hooks.len()],
        }
    }

    /// Handle whose forward passes replace the output of decoder layer
    /// `layer` (1-based) by `transform` applied to each sample's
    /// concatenated position embeddings.
    pub fn with_overwrite(&self, layer: usize, transform: Overwrite<T>) -> Result<Model<T>> {
        if layer == 0 || layer > self.layout.decoder.len() {
            return Err(ArithError::LayerRange {
                index: layer,
                count: self.layout.decoder.len(),
            });
        }
        let mut m = self.clone();
        m.hooks[layer - 1] = Some(transform);
        Ok(m)
    }

    pub fn clear_overwrites(&mut self) {
        self.hooks.iter_mut().for_each(|h| *h = None);
    }

    /// Registers every parameter on `tape`, tracked when `track` is set.
    pub fn bind(&self, tape: &mut Tape<T>, track: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                let t = if track { p.clone().tracked() } else { p.clone() };
                tape.leaf(&t)
            })
            .collect()
    }

    fn linear(&self, tape: &mut Tape<T>, p: &[Var], l: Lin, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[l.w])?;
        match l.b {
            Some(b) => tape.add_bias(y, p[b]),
            None => Ok(y),
        }
    }

    fn norm(&self, tape: &mut Tape<T>, p: &[Var], n: Norm, x: Var) -> Result<Var> {
        let beta = match n.b {
            Some(b) => p[b],
            None => tape.constant(&[self.config.d_model], vec![T::zero(); self.config.d_model])?,
        };
        tape.layer_norm(x, p[n.g], beta)
    }

    fn drop(&self, tape: &mut Tape<T>, x: Var, pass: &mut Pass<'_, T>) -> Var {
        match pass.dropout.as_mut() {
            Some((p, rng)) => tape.dropout(x, *p, rng),
            None => x,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attend(&self, tape: &mut Tape<T>, p: &[Var], a: Attn, xq: Var, xkv: Var, batch: usize, q_len: usize, k_len: usize, causal: bool) -> Result<Var> {
        let q = self.linear(tape, p, a.q, xq)?;
        let k = self.linear(tape, p, a.k, xkv)?;
        let v = self.linear(tape, p, a.v, xkv)?;
        let shape = AttentionShape {
            batch,
            q_len,
            k_len,
            heads: self.config.num_heads,
            causal,
        };
        let h = tape.attention(q, k, v, shape)?;
        self.linear(tape, p, a.o, h)
    }

    fn feed_forward(&self, tape: &mut Tape<T>, p: &[Var], f: Ffn, x: Var, pass: &mut Pass<'_, T>, inner_dropout: bool) -> Result<Var> {
        let h = self.linear(tape, p, f.up, x)?;
        let h = match self.config.activation {
            Activation::Relu => tape.relu(h),
            Activation::Gelu => tape.gelu(h),
        };
        let h = if inner_dropout { self.drop(tape, h, pass) } else { h };
        self.linear(tape, p, f.down, h)
    }

    fn embed(&self, tape: &mut Tape<T>, p: &[Var], table: usize, ids: &[usize], batch: usize, len: usize) -> Result<Var> {
        if len > self.config.max_positions {
            return Err(ArithError::Index {
                what: "sequence position",
                index: len - 1,
                limit: self.config.max_positions,
            });
        }
        let x = tape.embedding(p[table], ids)?;
        let d = self.config.d_model;
        match self.config.positional_encoding {
            PositionalEncoding::None => Ok(x),
            PositionalEncoding::Sinusoidal => {
                let mut pe = Vec::with_capacity(batch * len * d);
                let rows: Vec<Vec<f64>> = (0..len).map(|i| sinusoidal_pe(i, d)).collect();
                for _ in 0..batch {
                    for row in &rows {
                        pe.extend(row.iter().map(|&v| T::of(v)));
                    }
                }
                let c = tape.constant(&[batch * len, d], pe)?;
                tape.add(x, c)
            }
            PositionalEncoding::Learned => {
                let table = self.layout.pos_emb.expect("learned positions allocate a table");
                let pos: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
                let pe = tape.embedding(p[table], &pos)?;
                tape.add(x, pe)
            }
        }
    }

    fn post_layer(&self, tape: &mut Tape<T>, x: Var, layer: usize, pass: &mut Pass<'_, T>, len: usize) -> Result<Var> {
        let mut x = x;
        if let Some(hook) = &self.hooks[layer] {
            let mut data = tape.value(x).to_vec();
            for chunk in data.chunks_mut(len * self.config.d_model) {
                hook(chunk);
            }
            let shape = tape.shape(x).to_vec();
            x = tape.constant(&shape, data)?;
        }
        if pass.capture {
            pass.acts.dec.push(tape.value(x).to_vec());
        }
        Ok(x)
    }

    /// Encoder stack; returns the memory `[batch·prompt_len, d]`.
    fn encode(&self, tape: &mut Tape<T>, p: &[Var], src: &[usize], batch: usize, len: usize, pass: &mut Pass<'_, T>) -> Result<Var> {
        let table = self.layout.src_emb.expect("encoder-decoder has a source embedding");
        let x = self.embed(tape, p, table, src, batch, len)?;
        let mut x = self.drop(tape, x, pass);
        for block in &self.layout.encoder {
            if let Some((a, n)) = block.self_attn {
                let h = self.attend(tape, p, a, x, x, batch, len, len, false)?;
                let h = self.drop(tape, h, pass);
                let s = tape.add(x, h)?;
                x = self.norm(tape, p, n, s)?;
            }
            if let Some((f, n)) = block.ffn {
                let h = self.feed_forward(tape, p, f, x, pass, true)?;
                let h = self.drop(tape, h, pass);
                let s = tape.add(x, h)?;
                x = self.norm(tape, p, n, s)?;
            }
            if pass.capture {
                pass.acts.enc.push(tape.value(x).to_vec());
            }
        }
        if let Some(n) = self.layout.enc_norm {
            x = self.norm(tape, p, n, x)?;
        }
        Ok(x)
    }

    /// Runs the model and returns logits for the requested rows.
    ///
    /// `prefix` holds the first `prefix_len` completion tokens of every
    /// sample. `memory` short-circuits the encoder with precomputed values.
    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        prompts: &[usize],
        prompt_len: usize,
        prefix: &[usize],
        prefix_len: usize,
        batch: usize,
        rows: Rows,
        memory: Option<&[T]>,
        pass: &mut Pass<'_, T>,
    ) -> Result<Var> {
        let d = self.config.d_model;
        pass.acts.batch = batch;
        pass.acts.d_model = d;
        let (mut x, seq_len, out_rows): (Var, usize, Vec<usize>) = match self.config.family {
            Family::EncoderDecoder => {
                let mem = match memory {
                    Some(m) => tape.constant(&[batch * prompt_len, d], m.to_vec())?,
                    None => self.encode(tape, p, prompts, batch, prompt_len, pass)?,
                };
                pass.acts.enc_len = prompt_len;
                let len = prefix_len + 1;
                let mut ids = Vec::with_capacity(batch * len);
                for s in 0..batch {
                    ids.push(vocab::START as usize);
                    ids.extend_from_slice(&prefix[s * prefix_len..(s + 1) * prefix_len]);
                }
                let x = self.embed(tape, p, self.layout.tgt_emb, &ids, batch, len)?;
                let mut x = self.drop(tape, x, pass);
                for (i, block) in self.layout.decoder.iter().enumerate() {
                    if let Some((a, n)) = block.self_attn {
                        let h = self.attend(tape, p, a, x, x, batch, len, len, true)?;
                        let h = self.drop(tape, h, pass);
                        let s = tape.add(x, h)?;
                        x = self.norm(tape, p, n, s)?;
                    }
                    if let Some((a, n)) = block.cross_attn {
                        let h = self.attend(tape, p, a, x, mem, batch, len, prompt_len, false)?;
                        let h = self.drop(tape, h, pass);
                        let s = tape.add(x, h)?;
                        x = self.norm(tape, p, n, s)?;
                    }
                    if let Some((f, n)) = block.ffn {
                        let h = self.feed_forward(tape, p, f, x, pass, true)?;
                        let h = self.drop(tape, h, pass);
                        let s = tape.add(x, h)?;
                        x = self.norm(tape, p, n, s)?;
                    }
                    x = self.post_layer(tape, x, i, pass, len)?;
                }
                let out = match rows {
                    Rows::Completion | Rows::Full => (0..batch * len).collect(),
                    Rows::Last => (0..batch).map(|s| s * len + len - 1).collect(),
                };
                (x, len, out)
            }
            Family::DecoderOnly => {
                let len = prompt_len + prefix_len;
                let mut ids = Vec::with_capacity(batch * len);
                for s in 0..batch {
                    ids.extend_from_slice(&prompts[s * prompt_len..(s + 1) * prompt_len]);
                    ids.extend_from_slice(&prefix[s * prefix_len..(s + 1) * prefix_len]);
                }
                let x = self.embed(tape, p, self.layout.tgt_emb, &ids, batch, len)?;
                let mut x = self.drop(tape, x, pass);
                for (i, block) in self.layout.decoder.iter().enumerate() {
                    if let Some((a, n)) = block.self_attn {
                        let h = self.norm(tape, p, n, x)?;
                        let h = self.attend(tape, p, a, h, h, batch, len, len, true)?;
                        let h = self.drop(tape, h, pass);
                        x = tape.add(x, h)?;
                    }
                    if let Some((f, n)) = block.ffn {
                        let h = self.norm(tape, p, n, x)?;
                        let h = self.feed_forward(tape, p, f, h, pass, false)?;
                        let h = self.drop(tape, h, pass);
                        x = tape.add(x, h)?;
                    }
                    x = self.post_layer(tape, x, i, pass, len)?;
                }
                let out = match rows {
                    Rows::Completion => (0..batch)
                        .flat_map(|s| (prompt_len - 1..len).map(move |j| s * len + j))
                        .collect(),
                    Rows::Last => (0..batch).map(|s| s * len + len - 1).collect(),
                    Rows::Full => (0..batch * len).collect(),
                };
                (x, len, out)
            }
        };
        pass.acts.dec_len = seq_len;
        let n = self.layout.dec_norm;
        x = self.norm(tape, p, n, x)?;
        let x = if out_rows.len() == batch * seq_len {
            x
        } else {
            tape.gather_rows(x, &out_rows)?
        };
        self.linear(tape, p, self.layout.head, x)
    }

    /// Builds the training loss for a batch on `tape`. Dropout is active
    /// when `rng` is given.
    pub fn loss_graph(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        prompts: &[&[Token]],
        targets: &[&[Token]],
        mask: LossMask,
        rng: Option<&mut RngState>,
    ) -> Result<Var> {
        let (src, plen) = flatten(prompts, "prompt")?;
        let (tgt, m) = flatten(targets, "target")?;
        if prompts.len() != targets.len() || m == 0 {
            return Err(ArithError::Contract("loss needs matching, non-empty targets".into()));
        }
        let batch = prompts.len();
        let prefix: Vec<usize> = (0..batch).flat_map(|s| tgt[s * m..s * m + m - 1].to_vec()).collect();
        let mut pass = Pass {
            dropout: rng.map(|r| (self.config.dropout, r)),
            capture: false,
            acts: LayerActivations::default(),
        };
        let full = mask == LossMask::FullSequence && self.config.family == Family::DecoderOnly;
        let rows = if full { Rows::Full } else { Rows::Completion };
        let logits = self.run(tape, p, &src, plen, &prefix, m - 1, batch, rows, None, &mut pass)?;
        let labels: Vec<usize> = if full {
            (0..batch)
                .flat_map(|s| {
                    src[s * plen + 1..(s + 1) * plen]
                        .iter()
                        .chain(&tgt[s * m..(s + 1) * m])
                        .copied()
                        .collect::<Vec<_>>()
                })
                .collect()
        } else {
            tgt
        };
        tape.cross_entropy(logits, &labels)
    }

    /// Teacher-forced evaluation pass (no dropout) over a batch.
    pub fn teacher_forced_batch(&self, prompts: &[&[Token]], targets: &[&[Token]], capture: bool) -> Result<BatchLogits<T>> {
        let (src, plen) = flatten(prompts, "prompt")?;
        let (tgt, m) = flatten(targets, "target")?;
        if prompts.len() != targets.len() || m == 0 {
            return Err(ArithError::Contract("teacher forcing needs matching, non-empty targets".into()));
        }
        let batch = prompts.len();
        let prefix: Vec<usize> = (0..batch).flat_map(|s| tgt[s * m..s * m + m - 1].to_vec()).collect();
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let mut pass = Pass::eval(capture);
        let logits = self.run(&mut tape, &p, &src, plen, &prefix, m - 1, batch, Rows::Completion, None, &mut pass)?;
        Ok(BatchLogits {
            logits: tape.value(logits).to_vec(),
            rows_per_sample: m,
            vocab: self.config.vocab_size,
            activations: capture.then_some(pass.acts),
        })
    }

    /// Logits at every completion position plus captured layer outputs.
    pub fn forward_teacher_forced(&self, prompt: &[Token], target: &[Token]) -> Result<(Tensor<T>, LayerActivations<T>)> {
        let out = self.teacher_forced_batch(&[prompt], &[target], true)?;
        let logits = Tensor::new(vec![target.len(), out.vocab], out.logits)?;
        Ok((logits, out.activations.unwrap_or_default()))
    }

    pub fn greedy_generate(&self, prompt: &[Token], m: usize) -> Result<Vec<Token>> {
        Ok(self.greedy_generate_batch(&[prompt], m)?.remove(0))
    }

    /// Autoregressive argmax decoding of exactly `m` tokens per prompt.
    pub fn greedy_generate_batch(&self, prompts: &[&[Token]], m: usize) -> Result<Vec<Vec<Token>>> {
        if m == 0 {
            return Err(ArithError::Contract("generation length must be positive".into()));
        }
        let mut out = Vec::with_capacity(prompts.len());
        for chunk in prompts.chunks(EVAL_CHUNK) {
            out.extend(self.generate_chunk(chunk, m)?);
        }
        Ok(out)
    }

    fn generate_chunk(&self, prompts: &[&[Token]], m: usize) -> Result<Vec<Vec<Token>>> {
        let (src, plen) = flatten(prompts, "prompt")?;
        let batch = prompts.len();
        let memory = match self.config.family {
            Family::EncoderDecoder => {
                let mut tape = Tape::new();
                let p = self.bind(&mut tape, false);
                let mem = self.encode(&mut tape, &p, &src, batch, plen, &mut Pass::eval(false))?;
                Some(tape.value(mem).to_vec())
            }
            Family::DecoderOnly => None,
        };
        let mut generated: Vec<Vec<Token>> = vec![Vec::with_capacity(m); batch];
        let mut prefix: Vec<usize> = Vec::new();
        for step in 0..m {
            let mut tape = Tape::new();
            let p = self.bind(&mut tape, false);
            let logits = self.run(&mut tape, &p, &src, plen, &prefix, step, batch, Rows::Last, memory.as_deref(), &mut Pass::eval(false))?;
            let vals = tape.value(logits);
            let v = self.config.vocab_size;
            let mut next_prefix = Vec::with_capacity(batch * (step + 1));
            for s in 0..batch {
                let tok = argmax(&vals[s * v..(s + 1) * v]);
                generated[s].push(tok);
                next_prefix.extend_from_slice(&prefix[s * step..(s + 1) * step]);
                next_prefix.push(tok as usize);
            }
            prefix = next_prefix;
        }
        Ok(generated)
    }
}

#[cfg(test)]
mod tests;
