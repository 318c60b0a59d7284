//! The keyword-conditioned Transformer-CTC network.
//!
//! The keyword encoder embeds the (pivot-wrapped) keyword phones and runs
//! self-attention blocks over them. The speech encoder projects spliced
//! features, then every block applies multi-head self-attention over speech
//! frames, single-head cross-attention from speech frames (queries) to the
//! keyword memory (keys and values), and a linear + layer norm + ReLU
//! sub-block. Each sub-block is pre-normalized and wrapped in a residual
//! connection. A final projection yields per-frame vocabulary logits.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub speech_blocks: usize,
    pub keyword_blocks: usize,
    pub sa_heads: usize,
    pub ca_heads: usize,
    pub input_dim: usize,
    pub vocab_size: usize,
    /// One cross-attention key/value projection shared by every speech block.
    #[serde(default)]
    pub share_ca_kv: bool,
    /// Dropout on sub-block outputs during training.
    #[serde(default)]
    pub dropout: f64,
    /// Add sinusoidal positional encodings to both encoders' inputs.
    #[serde(default = "default_true")]
    pub positional: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    /// The full-size configuration: 256-dim, 8 speech blocks, 4 keyword blocks.
    pub fn full_scale(vocab_size: usize) -> Self {
        Self {
            d_model: 256,
            speech_blocks: 8,
            keyword_blocks: 4,
            sa_heads: 4,
            ca_heads: 1,
            input_dim: 200,
            vocab_size,
            share_ca_kv: false,
            dropout: 0.0,
            positional: true,
        }
    }

    /// Reduced configuration that trains in minutes on one CPU core.
    pub fn desk_scale(vocab_size: usize) -> Self {
        Self {
            d_model: 32,
            speech_blocks: 3,
            keyword_blocks: 2,
            ..Self::full_scale(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.sa_heads == 0 || self.ca_heads == 0 {
            return Err(Error::Config("d_model and head counts must be positive".into()));
        }
        if self.d_model % self.sa_heads != 0 || self.d_model % self.ca_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by heads ({} self, {} cross)",
                self.d_model, self.sa_heads, self.ca_heads
            )));
        }
        if self.vocab_size < 3 {
            return Err(Error::Config(format!("vocab_size {} < 3", self.vocab_size)));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Learnable-scalar totals for a configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub speech_encoder: usize,
    pub keyword_encoder: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.speech_encoder + self.keyword_encoder
    }
}

/// Exact number of learnable scalars for `cfg`, computed without building the
/// model.
pub fn count_parameters(cfg: &ModelConfig) -> ParamCount {
    let d = cfg.d_model;
    let v = cfg.vocab_size;
    let ln = 2 * d;
    let nonlinear = ln + d * d + d + ln;
    let ca_kv = 2 * d * d;
    let speech_block = ln + 4 * d * d + ln + 2 * d * d + if cfg.share_ca_kv { 0 } else { ca_kv } + nonlinear;
    let speech = cfg.input_dim * d
        + d
        + cfg.speech_blocks * speech_block
        + if cfg.share_ca_kv { ca_kv } else { 0 }
        + ln
        + d * v
        + v;
    let keyword_block = ln + 4 * d * d + nonlinear;
    let keyword = v * d + cfg.keyword_blocks * keyword_block + ln;
    ParamCount {
        speech_encoder: speech,
        keyword_encoder: keyword,
    }
}

/// Fixed sinusoidal encodings: `PE[t,2i] = sin(t/10000^(2i/d))`,
/// `PE[t,2i+1] = cos(t/10000^(2i/d))`.
pub fn positional_encoding(t_len: usize, d_model: usize) -> Result<Tensor> {
    if t_len == 0 || d_model == 0 {
        return Err(Error::DegenerateInput(
            "positional encoding needs T ≥ 1 and d ≥ 1".into(),
        ));
    }
    let mut data = vec![0.0; t_len * d_model];
    for t in 0..t_len {
        for j in 0..d_model {
            let i2 = (j - j % 2) as f64;
            let angle = t as f64 / 10000f64.powf(i2 / d_model as f64);
            data[t * d_model + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![t_len, d_model], data)
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

/// Which attention a recorded map came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionKind {
    KeywordSelf,
    SpeechSelf,
    Cross,
}

/// Attention weights of one head, `tq × tk`, row-major.
#[derive(Clone, Debug)]
pub struct AttentionMap {
    pub kind: AttentionKind,
    pub block: usize,
    pub head: usize,
    pub tq: usize,
    pub tk: usize,
    pub weights: Vec<f64>,
}

/// Query/key/value/output projections of one (multi-head) attention.
#[derive(Clone, Copy, Debug)]
pub struct AttentionModule {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    heads: usize,
}

impl AttentionModule {
    /// Registers `prefix.{wq,wk,wv,wo}` in `store`. `shared_kv` reuses
    /// existing key/value projections.
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        shared_kv: Option<(ParamId, ParamId)>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "{heads} heads do not divide d_model {d_model}"
            )));
        }
        let wq = store.insert(format!("{prefix}.wq"), init_matrix(d_model, d_model, rng)?)?;
        let (wk, wv) = match shared_kv {
            Some(kv) => kv,
            None => (
                store.insert(format!("{prefix}.wk"), init_matrix(d_model, d_model, rng)?)?,
                store.insert(format!("{prefix}.wv"), init_matrix(d_model, d_model, rng)?)?,
            ),
        };
        let wo = store.insert(format!("{prefix}.wo"), init_matrix(d_model, d_model, rng)?)?;
        Ok(Self {
            wq,
            wk,
            wv,
            wo,
            heads,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// `softmax(Q Kᵀ / √d_k) V` per head, heads concatenated then projected.
    /// Queries come from `q_in: [Tq×d]`, keys and values from `kv_in: [Tk×d]`.
    /// Self-attention is the case `kv_in == q_in`. No masking.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q_in: Var,
        kv_in: Var,
        mut record: Option<&mut Vec<Vec<f64>>>,
    ) -> Result<Var> {
        let tk = g.shape(kv_in)[0];
        if tk == 0 {
            return Err(Error::DegenerateInput("attention over an empty memory".into()));
        }
        let d = g.value(q_in).cols();
        let dk = d / self.heads;
        let wq = g.param(store, self.wq);
        let wk = g.param(store, self.wk);
        let wv = g.param(store, self.wv);
        let wo = g.param(store, self.wo);
        let q = g.matmul(q_in, wq)?;
        let k = g.matmul(kv_in, wk)?;
        let v = g.matmul(kv_in, wv)?;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dk, dk)?,
                    g.slice_cols(k, h * dk, dk)?,
                    g.slice_cols(v, h * dk, dk)?,
                )
            };
            let scores = g.matmul_t(qh, kh)?;
            let scores = g.scale(scores, scale);
            let weights = g.softmax(scores, 1)?;
            if let Some(rec) = record.as_deref_mut() {
                rec.push(g.value(weights).data().to_vec());
            }
            outs.push(g.matmul(weights, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        g.matmul(cat, wo)
    }
}

#[derive(Clone, Copy, Debug)]
struct NonLinear {
    linear: Linear,
    norm: Norm,
}

#[derive(Clone, Copy, Debug)]
struct SpeechBlock {
    sa_norm: Norm,
    sa: AttentionModule,
    ca_norm: Norm,
    ca: AttentionModule,
    nl_norm: Norm,
    nl: NonLinear,
}

#[derive(Clone, Copy, Debug)]
struct KeywordBlock {
    sa_norm: Norm,
    sa: AttentionModule,
    nl_norm: Norm,
    nl: NonLinear,
}

/// Per-call options for a forward pass.
#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Collect every attention map.
    pub record_attention: bool,
    /// Randomness for dropout; `None` disables dropout.
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
}

pub struct ForwardOutput {
    /// `[T×V]` unnormalized frame scores.
    pub logits: Var,
    pub attention: Vec<AttentionMap>,
}

/// Keyword encoder plus speech encoder, with all parameters.
#[derive(Clone, Debug)]
pub struct TcAsrModel {
    cfg: ModelConfig,
    params: ParamStore,
    embedding: ParamId,
    keyword_blocks: Vec<KeywordBlock>,
    keyword_final: Norm,
    input: Linear,
    speech_blocks: Vec<SpeechBlock>,
    speech_final: Norm,
    output: Linear,
}

fn init_matrix(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let bound = (1.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("bound is positive");
    Tensor::new(
        vec![fan_in, fan_out],
        (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect(),
    )
}

fn linear(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Linear> {
    let w = store.insert(format!("{name}.w"), init_matrix(fan_in, fan_out, rng)?)?;
    let b = store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out])?)?;
    Ok(Linear { w, b: Some(b) })
}

fn norm(store: &mut ParamStore, name: &str, d: usize) -> Result<Norm> {
    Ok(Norm {
        gamma: store.insert(format!("{name}.gamma"), Tensor::filled(&[d], 1.0)?)?,
        beta: store.insert(format!("{name}.beta"), Tensor::zeros(&[d])?)?,
    })
}

fn nonlinear(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Result<NonLinear> {
    Ok(NonLinear {
        linear: linear(store, &format!("{name}.linear"), d, d, rng)?,
        norm: norm(store, &format!("{name}.ln"), d)?,
    })
}

impl TcAsrModel {
    /// Builds a freshly initialized model. Same `cfg` and `seed` give
    /// bit-identical parameters.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;

        let emb_dist = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive std");
        let embedding = store.insert(
            "keyword.embedding",
            Tensor::new(
                vec![cfg.vocab_size, d],
                (0..cfg.vocab_size * d).map(|_| emb_dist.sample(&mut rng)).collect(),
            )?,
        )?;
        let mut keyword_blocks = Vec::with_capacity(cfg.keyword_blocks);
        for i in 0..cfg.keyword_blocks {
            let p = format!("keyword.block{i}");
            keyword_blocks.push(KeywordBlock {
                sa_norm: norm(&mut store, &format!("{p}.sa_norm"), d)?,
                sa: AttentionModule::build(&mut store, &format!("{p}.sa"), d, cfg.sa_heads, None, &mut rng)?,
                nl_norm: norm(&mut store, &format!("{p}.nl_norm"), d)?,
                nl: nonlinear(&mut store, &format!("{p}.nl"), d, &mut rng)?,
            });
        }
        let keyword_final = norm(&mut store, "keyword.final_norm", d)?;

        let input = linear(&mut store, "speech.input", cfg.input_dim, d, &mut rng)?;
        let shared_kv = if cfg.share_ca_kv {
            Some((
                store.insert("speech.ca_shared.wk", init_matrix(d, d, &mut rng)?)?,
                store.insert("speech.ca_shared.wv", init_matrix(d, d, &mut rng)?)?,
            ))
        } else {
            None
        };
        let mut speech_blocks = Vec::with_capacity(cfg.speech_blocks);
        for i in 0..cfg.speech_blocks {
            let p = format!("speech.block{i}");
            speech_blocks.push(SpeechBlock {
                sa_norm: norm(&mut store, &format!("{p}.sa_norm"), d)?,
                sa: AttentionModule::build(&mut store, &format!("{p}.sa"), d, cfg.sa_heads, None, &mut rng)?,
                ca_norm: norm(&mut store, &format!("{p}.ca_norm"), d)?,
                ca: AttentionModule::build(&mut store, &format!("{p}.ca"), d, cfg.ca_heads, shared_kv, &mut rng)?,
                nl_norm: norm(&mut store, &format!("{p}.nl_norm"), d)?,
                nl: nonlinear(&mut store, &format!("{p}.nl"), d, &mut rng)?,
            });
        }
        let speech_final = norm(&mut store, "speech.final_norm", d)?;
        let output = linear(&mut store, "speech.output", d, cfg.vocab_size, &mut rng)?;

        Ok(Self {
            cfg,
            params: store,
            embedding,
            keyword_blocks,
            keyword_final,
            input,
            speech_blocks,
            speech_final,
            output,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces all parameter values; names and shapes must match.
    pub fn load_params(&mut self, other: &ParamStore) -> Result<()> {
        self.params.load_values(other)
    }

    pub fn parameter_count(&self) -> ParamCount {
        let speech = self
            .params
            .iter()
            .filter(|p| p.name.starts_with("speech."))
            .map(|p| p.value.numel())
            .sum();
        let keyword = self
            .params
            .iter()
            .filter(|p| p.name.starts_with("keyword."))
            .map(|p| p.value.numel())
            .sum();
        ParamCount {
            speech_encoder: speech,
            keyword_encoder: keyword,
        }
    }

    fn apply_linear(&self, g: &mut Graph, x: Var, l: Linear) -> Result<Var> {
        let w = g.param(&self.params, l.w);
        let y = g.matmul(x, w)?;
        match l.b {
            Some(b) => {
                let b = g.param(&self.params, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    fn apply_norm(&self, g: &mut Graph, x: Var, n: Norm) -> Result<Var> {
        let gamma = g.param(&self.params, n.gamma);
        let beta = g.param(&self.params, n.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }

    fn apply_nonlinear(&self, g: &mut Graph, x: Var, nl: NonLinear) -> Result<Var> {
        let h = self.apply_linear(g, x, nl.linear)?;
        let h = self.apply_norm(g, h, nl.norm)?;
        Ok(g.relu(h))
    }

    fn dropout(&self, g: &mut Graph, x: Var, opts: &mut ForwardOptions<'_>) -> Result<Var> {
        let p = self.cfg.dropout;
        let Some(rng) = opts.dropout_rng.as_deref_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..g.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let m = g.constant(Tensor::new(g.shape(x).to_vec(), mask)?);
        g.mul(x, m)
    }

    fn add_positions(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if !self.cfg.positional {
            return Ok(x);
        }
        let t = g.shape(x)[0];
        let pe = g.constant(positional_encoding(t, self.cfg.d_model)?);
        g.add(x, pe)
    }

    fn record(
        out: &mut Vec<AttentionMap>,
        raw: Vec<Vec<f64>>,
        kind: AttentionKind,
        block: usize,
        tq: usize,
        tk: usize,
    ) {
        for (head, weights) in raw.into_iter().enumerate() {
            out.push(AttentionMap {
                kind,
                block,
                head,
                tq,
                tk,
                weights,
            });
        }
    }

    /// Encodes keyword phone ids (already pivot-wrapped if pivots are used)
    /// into the `[Lk×d]` memory read by every cross-attention.
    pub fn encode_keyword(
        &self,
        g: &mut Graph,
        phones: &[usize],
        opts: &mut ForwardOptions<'_>,
        maps: &mut Vec<AttentionMap>,
    ) -> Result<Var> {
        if phones.is_empty() {
            return Err(Error::DegenerateInput("empty keyword".into()));
        }
        let table = g.param(&self.params, self.embedding);
        let mut x = g.embedding(table, phones)?;
        x = self.add_positions(g, x)?;
        let l = phones.len();
        for (i, blk) in self.keyword_blocks.iter().enumerate() {
            let h = self.apply_norm(g, x, blk.sa_norm)?;
            let mut raw = Vec::new();
            let a = blk.sa.forward(g, &self.params, h, h, opts.record_attention.then_some(&mut raw))?;
            Self::record(maps, raw, AttentionKind::KeywordSelf, i, l, l);
            let a = self.dropout(g, a, opts)?;
            x = g.add(x, a)?;
            let h = self.apply_norm(g, x, blk.nl_norm)?;
            let n = self.apply_nonlinear(g, h, blk.nl)?;
            let n = self.dropout(g, n, opts)?;
            x = g.add(x, n)?;
        }
        self.apply_norm(g, x, self.keyword_final)
    }

    /// Runs the speech encoder over `[T×input_dim]` features with keyword
    /// memory `memory`, returning `[T×V]` logits.
    pub fn encode_speech(
        &self,
        g: &mut Graph,
        feats: &Tensor,
        memory: Var,
        opts: &mut ForwardOptions<'_>,
        maps: &mut Vec<AttentionMap>,
    ) -> Result<Var> {
        let t = match feats.shape() {
            [t, f] if *f == self.cfg.input_dim => *t,
            s => {
                return Err(Error::Dimension(format!(
                    "speech features {s:?} do not match input_dim {}",
                    self.cfg.input_dim
                )))
            }
        };
        if t < 1 {
            return Err(Error::DegenerateInput("no speech frames".into()));
        }
        let lk = g.shape(memory)[0];
        if lk == 0 {
            return Err(Error::DegenerateInput("empty keyword memory".into()));
        }
        let f = g.constant(feats.clone());
        let mut x = self.apply_linear(g, f, self.input)?;
        x = self.add_positions(g, x)?;
        for (i, blk) in self.speech_blocks.iter().enumerate() {
            let h = self.apply_norm(g, x, blk.sa_norm)?;
            let mut raw = Vec::new();
            let a = blk.sa.forward(g, &self.params, h, h, opts.record_attention.then_some(&mut raw))?;
            Self::record(maps, raw, AttentionKind::SpeechSelf, i, t, t);
            let a = self.dropout(g, a, opts)?;
            x = g.add(x, a)?;

            let h = self.apply_norm(g, x, blk.ca_norm)?;
            let mut raw = Vec::new();
            let c = blk.ca.forward(g, &self.params, h, memory, opts.record_attention.then_some(&mut raw))?;
            Self::record(maps, raw, AttentionKind::Cross, i, t, lk);
            let c = self.dropout(g, c, opts)?;
            x = g.add(x, c)?;

            let h = self.apply_norm(g, x, blk.nl_norm)?;
            let n = self.apply_nonlinear(g, h, blk.nl)?;
            let n = self.dropout(g, n, opts)?;
            x = g.add(x, n)?;
        }
        let h = self.apply_norm(g, x, self.speech_final)?;
        self.apply_linear(g, h, self.output)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        feats: &Tensor,
        keyword: &[usize],
        mut opts: ForwardOptions<'_>,
    ) -> Result<ForwardOutput> {
        let mut attention = Vec::new();
        let memory = self.encode_keyword(g, keyword, &mut opts, &mut attention)?;
        let logits = self.encode_speech(g, feats, memory, &mut opts, &mut attention)?;
        Ok(ForwardOutput { logits, attention })
    }

    /// Builds the CTC training loss for one example.
    pub fn loss(
        &self,
        g: &mut Graph,
        feats: &Tensor,
        keyword: &[usize],
        target: &[usize],
        opts: ForwardOptions<'_>,
    ) -> Result<Var> {
        let out = self.forward(g, feats, keyword, opts)?;
        let lp = g.log_softmax(out.logits);
        g.ctc_loss(lp, target)
    }

    /// Per-frame log probabilities for inference.
    pub fn log_probs(&self, feats: &Tensor, keyword: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, feats, keyword, ForwardOptions::default())?;
        let lp = g.log_softmax(out.logits);
        Ok(g.value(lp).clone())
    }
}

pub const ATTN_MAGIC: &[u8; 5] = b"ATTN1";

/// `"ATTN1" | n_maps (u32) | { block | tq | tk (u32) | tq·tk f64 weights } * n_maps`,
/// little-endian.
pub fn encode_attention_maps(maps: &[&AttentionMap]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(ATTN_MAGIC);
    out.extend_from_slice(&(maps.len() as u32).to_le_bytes());
    for m in maps {
        for v in [m.block, m.tq, m.tk] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for w in &m.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }
    out
}

/// Writes the cross-attention maps of `maps` to `path`.
pub fn write_cross_attention(maps: &[AttentionMap], path: impl AsRef<Path>) -> Result<()> {
    let cross: Vec<&AttentionMap> = maps.iter().filter(|m| m.kind == AttentionKind::Cross).collect();
    fs::write(path, encode_attention_maps(&cross))?;
    Ok(())
}

/// Reads `(block, tq, tk, weights)` records.
pub fn decode_attention_maps(bytes: &[u8]) -> Result<Vec<(usize, usize, usize, Vec<f64>)>> {
    let mut r = crate::checkpoint::Reader::new(bytes);
    r.expect_magic(ATTN_MAGIC)?;
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let block = r.u32()? as usize;
        let tq = r.u32()? as usize;
        let tk = r.u32()? as usize;
        let mut w = Vec::with_capacity(tq * tk);
        for _ in 0..tq * tk {
            w.push(r.f64()?);
        }
        out.push((block, tq, tk, w));
    }
    r.finish()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(vocab: usize) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            speech_blocks: 2,
            keyword_blocks: 1,
            sa_heads: 2,
            ca_heads: 1,
            input_dim: 6,
            vocab_size: vocab,
            share_ca_kv: false,
            dropout: 0.0,
            positional: true,
        }
    }

    #[test]
    fn positional_examples() {
        let pe = positional_encoding(3, 8).unwrap();
        for j in 0..8 {
            let expect = if j % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(pe.get(&[0, j]).unwrap(), expect);
        }
        assert!((pe.get(&[1, 0]).unwrap() - 0.84147).abs() < 1e-5);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn counted_parameters_match_built_model() {
        for share in [false, true] {
            let cfg = ModelConfig {
                share_ca_kv: share,
                ..tiny(7)
            };
            let m = TcAsrModel::new(cfg.clone(), 1).unwrap();
            assert_eq!(m.parameter_count(), count_parameters(&cfg));
            assert_eq!(m.params().scalar_count(), count_parameters(&cfg).total());
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(7);
        c.sa_heads = 3;
        assert!(TcAsrModel::new(c, 0).is_err());
        assert!(TcAsrModel::new(tiny(2), 0).is_err());
    }

    #[test]
    fn empty_keyword_is_rejected() {
        let m = TcAsrModel::new(tiny(7), 0).unwrap();
        let feats = Tensor::zeros(&[4, 6]).unwrap();
        assert!(matches!(m.log_probs(&feats, &[]), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn attention_file_round_trip() {
        let m = TcAsrModel::new(tiny(7), 3).unwrap();
        let feats = Tensor::filled(&[5, 6], 0.25).unwrap();
        let mut g = Graph::new();
        let out = m
            .forward(
                &mut g,
                &feats,
                &[5, 1, 2, 6],
                ForwardOptions {
                    record_attention: true,
                    dropout_rng: None,
                },
            )
            .unwrap();
        let cross: Vec<&AttentionMap> =
            out.attention.iter().filter(|a| a.kind == AttentionKind::Cross).collect();
        assert_eq!(cross.len(), 2);
        let bytes = encode_attention_maps(&cross);
        let back = decode_attention_maps(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!((back[1].0, back[1].1, back[1].2), (1, 5, 4));
        assert_eq!(back[1].3, cross[1].weights);
    }
}
