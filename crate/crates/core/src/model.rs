//! Decoder-only transformer over POVM outcome tokens.
//!
//! Context and positional information travel in separate streams: token
//! embeddings feed the value path, while each block scores positions with its
//! own query/key projections of the constant sinusoidal table. Heads are
//! concatenated without an output projection and there is no layer norm, so
//! a block holds exactly `13d² + 5d` parameters.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datagen::Vocab;
use crate::error::{Error, Result};
use crate::linalg::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    /// Parameter-free skip connections around attention and FFN.
    #[serde(default = "default_true")]
    pub residual: bool,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_true() -> bool {
    true
}

fn default_init_std() -> f64 {
    0.02
}

impl ModelConfig {
    pub fn new(
        layers: usize,
        d_model: usize,
        heads: usize,
        seq_len: usize,
        vocab_size: usize,
    ) -> Self {
        Self {
            layers,
            d_model,
            heads,
            seq_len,
            vocab_size,
            residual: true,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Validation(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.seq_len < 3 {
            return Err(Error::Validation(format!(
                "seq_len {} is below 3",
                self.seq_len
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::Validation(format!(
                "vocab_size {} is below 4",
                self.vocab_size
            )));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::Validation(format!(
                "init_std {} is invalid",
                self.init_std
            )));
        }
        Ok(())
    }

    /// `(13d² + 5d)·L + d·|V|`.
    pub fn expected_params(&self) -> usize {
        let d = self.d_model;
        (13 * d * d + 5 * d) * self.layers + d * self.vocab_size
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wq_pos: Tensor,
    pub wk_pos: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

const BLOCK_NAMES: [&str; 9] = ["wq", "wk", "wv", "wq_pos", "wk_pos", "w1", "b1", "w2", "b2"];

impl BlockParams {
    fn zeros(d: usize) -> Self {
        Self {
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wq_pos: Tensor::zeros(&[d, d]),
            wk_pos: Tensor::zeros(&[d, d]),
            w1: Tensor::zeros(&[d, 4 * d]),
            b1: Tensor::zeros(&[4 * d]),
            w2: Tensor::zeros(&[4 * d, d]),
            b2: Tensor::zeros(&[d]),
        }
    }

    fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wq_pos,
            &self.wk_pos,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wq_pos,
            &mut self.wk_pos,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmQstModel {
    config: ModelConfig,
    token_embedding: Tensor,
    positional: Tensor,
    blocks: Vec<BlockParams>,
}

/// `PE[pos, 2i] = sin(pos / 10000^{2i/d})`, `PE[pos, 2i+1] = cos(…)`, 0-based positions.
pub fn sinusoidal_table(seq_len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; seq_len * d];
    for pos in 0..seq_len {
        for c in 0..d {
            let pair = (c / 2 * 2) as f64;
            let angle = pos as f64 / 10000_f64.powf(pair / d as f64);
            data[pos * d + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![seq_len, d], data).expect("consistent shape")
}

/// Additive causal mask: `0` on and below the diagonal, `-inf` above.
pub fn causal_mask(seq: usize) -> Tensor {
    let mut data = vec![0.0; seq * seq];
    for i in 0..seq {
        for j in i + 1..seq {
            data[i * seq + j] = f64::NEG_INFINITY;
        }
    }
    Tensor::new(vec![seq, seq], data).expect("consistent shape")
}

/// Tape handles of every trainable tensor, in [`LmQstModel::named_params`] order.
pub struct ParamVars(pub Vec<Var>);

impl LmQstModel {
    /// Normal(0, init_std) weights, zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut model = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal =
            Normal::new(0.0, config.init_std).map_err(|e| Error::Validation(e.to_string()))?;
        let mut fill = |t: &mut Tensor| {
            t.data_mut()
                .iter_mut()
                .for_each(|x| *x = normal.sample(&mut rng))
        };
        fill(&mut model.token_embedding);
        for b in &mut model.blocks {
            for (name, t) in BLOCK_NAMES.iter().zip(b.tensors_mut()) {
                if !name.starts_with('b') {
                    fill(t);
                }
            }
        }
        Ok(model)
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        Ok(Self {
            config,
            token_embedding: Tensor::zeros(&[config.vocab_size, d]),
            positional: sinusoidal_table(config.seq_len, d),
            blocks: (0..config.layers).map(|_| BlockParams::zeros(d)).collect(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn token_embedding(&self) -> &Tensor {
        &self.token_embedding
    }

    pub fn positional_table(&self) -> &Tensor {
        &self.positional
    }

    pub fn blocks(&self) -> &[BlockParams] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [BlockParams] {
        &mut self.blocks
    }

    pub fn token_embedding_mut(&mut self) -> &mut Tensor {
        &mut self.token_embedding
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding".to_string(), &self.token_embedding)];
        for (l, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_NAMES.iter().zip(b.tensors()) {
                out.push((format!("block{l}.{name}"), t));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        let v = self.config.vocab_size;
        match tokens.iter().find(|&&t| t >= v) {
            Some(&id) => Err(Error::TokenOutOfRange { id, vocab: v }),
            None => Ok(()),
        }
    }

    /// Records the forward pass of `batch` sequences of length `seq` (≤ S) and
    /// returns per-position log-probabilities `[batch·seq, |V|]`.
    pub fn forward_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        tokens: &[usize],
        batch: usize,
        seq: usize,
        requires_grad: bool,
    ) -> Result<(ParamVars, Var)> {
        let cfg = &self.config;
        if seq == 0 || seq > cfg.seq_len || tokens.len() != batch * seq {
            return Err(Error::Shape {
                op: "forward",
                lhs: vec![tokens.len()],
                rhs: vec![batch, seq],
            });
        }
        self.check_tokens(tokens)?;
        let (d, h) = (cfg.d_model, cfg.heads);
        let inv_scale = 1.0 / ((2 * d) as f64).sqrt();

        let emb = tape.borrowed(&self.token_embedding, requires_grad);
        let mut vars = vec![emb];
        let pos_rows: Vec<usize> = (0..seq).collect();
        let pos_table = tape.borrowed(&self.positional, false);
        let pos = tape.gather_rows(pos_table, &pos_rows)?;
        let mask = causal_mask(seq);

        let mut x = tape.gather_rows(emb, tokens)?;
        for block in &self.blocks {
            let p: Vec<Var> = block
                .tensors()
                .into_iter()
                .map(|t| tape.borrowed(t, requires_grad))
                .collect();
            vars.extend(&p);
            let [wq, wk, wv, wq_pos, wk_pos, w1, b1, w2, b2] = p[..] else {
                unreachable!()
            };

            let q = tape.matmul(x, wq)?;
            let k = tape.matmul(x, wk)?;
            let v = tape.matmul(x, wv)?;
            let q = tape.split_heads(q, batch, seq, h)?;
            let k = tape.split_heads(k, batch, seq, h)?;
            let v = tape.split_heads(v, batch, seq, h)?;
            let scores = tape.batch_matmul(q, k, true)?;
            let scores = tape.scale(scores, inv_scale);

            // positional scores depend on positions only: [h, seq, seq], shared by the batch
            let qp = tape.matmul(pos, wq_pos)?;
            let kp = tape.matmul(pos, wk_pos)?;
            let qp = tape.split_heads(qp, 1, seq, h)?;
            let kp = tape.split_heads(kp, 1, seq, h)?;
            let pscores = tape.batch_matmul(qp, kp, true)?;
            let pscores = tape.scale(pscores, inv_scale);

            let scores = tape.add_bias(scores, pscores)?;
            let weights = tape.softmax_rows(scores, Some(&mask))?;
            let z = tape.batch_matmul(weights, v, false)?;
            let z = tape.merge_heads(z, batch, seq, h)?;
            let z = if cfg.residual { tape.add(x, z)? } else { z };

            let f = tape.matmul(z, w1)?;
            let f = tape.add_bias(f, b1)?;
            let f = tape.relu(f);
            let f = tape.matmul(f, w2)?;
            let f = tape.add_bias(f, b2)?;
            x = if cfg.residual { tape.add(z, f)? } else { f };
        }
        let logits = tape.matmul_t(x, emb, true)?;
        let logp = tape.log_softmax_rows(logits);
        Ok((ParamVars(vars), logp))
    }

    /// Log-conditionals `[batch·seq, |V|]` without gradient bookkeeping.
    pub fn log_conditionals(&self, tokens: &[usize], batch: usize, seq: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (_, logp) = self.forward_tape(&mut tape, tokens, batch, seq, false)?;
        Ok(tape.value(logp).clone())
    }

    /// Conditionals for one full-length sequence: row `i` is `p(x_{i+1} | b_1..b_i)`.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor> {
        if tokens.len() != self.config.seq_len {
            return Err(Error::Shape {
                op: "forward",
                lhs: vec![tokens.len()],
                rhs: vec![self.config.seq_len],
            });
        }
        let mut t = self.log_conditionals(tokens, 1, tokens.len())?;
        t.data_mut().iter_mut().for_each(|x| *x = x.exp());
        Ok(t)
    }

    /// `Σ log p(b_{i+1} | b_1..b_i)` over positions whose target is not pad.
    pub fn sequence_log_prob(&self, tokens: &[usize], vocab: Vocab) -> Result<f64> {
        let logp = self.log_conditionals(tokens, 1, tokens.len())?;
        let v = self.config.vocab_size;
        let mut total = 0.0;
        for i in 0..tokens.len() - 1 {
            let target = tokens[i + 1];
            if target == vocab.pad() {
                continue;
            }
            total += logp.data()[i * v + target];
        }
        Ok(total)
    }

    /// Mean-over-sequences NLL on the tape, and the number of scored tokens.
    pub fn nll_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        tokens: &[usize],
        batch: usize,
        vocab: Vocab,
        requires_grad: bool,
    ) -> Result<(ParamVars, Var, usize)> {
        let seq = self.config.seq_len;
        let (vars, logp) = self.forward_tape(tape, tokens, batch, seq, requires_grad)?;
        let v = self.config.vocab_size;
        let w = -1.0 / batch as f64;
        let mut picks = Vec::with_capacity(batch * (seq - 1));
        for b in 0..batch {
            for i in 0..seq - 1 {
                let target = tokens[b * seq + i + 1];
                if target != vocab.pad() {
                    picks.push(((b * seq + i) * v + target, w));
                }
            }
        }
        let scored = picks.len();
        let loss = tape.pick(logp, picks)?;
        Ok((vars, loss, scored))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        put_u32(&mut out, CKPT_VERSION);
        let c = &self.config;
        for x in [
            c.layers,
            c.d_model,
            c.heads,
            c.seq_len,
            c.vocab_size,
            usize::from(c.residual),
        ] {
            put_u32(&mut out, x as u32);
        }
        out.extend_from_slice(&c.init_std.to_le_bytes());
        let params = self.named_params();
        put_u32(&mut out, params.len() as u32);
        for (name, t) in params {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len() as u32);
            for &dim in t.shape() {
                put_u32(&mut out, dim as u32);
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CKPT_MAGIC.len() + 8 || &bytes[..CKPT_MAGIC.len()] != CKPT_MAGIC {
            return Err(Error::Format("not an LMQST checkpoint".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Format("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader {
            buf: body,
            pos: CKPT_MAGIC.len(),
        };
        let version = r.u32()?;
        if version > CKPT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version} is newer than supported {CKPT_VERSION}"
            )));
        }
        let mut dims = [0usize; 6];
        for x in dims.iter_mut() {
            *x = r.u32()? as usize;
        }
        let init_std = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let config = ModelConfig {
            layers: dims[0],
            d_model: dims[1],
            heads: dims[2],
            seq_len: dims[3],
            vocab_size: dims[4],
            residual: dims[5] != 0,
            init_std,
        };
        let mut model = Self::zeros(config)?;
        let count = r.u32()? as usize;
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        if count != names.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {count} tensors, config implies {}",
                names.len()
            )));
        }
        for (expected, slot) in names.iter().zip(model.params_mut()) {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            if name != expected {
                return Err(Error::Format(format!(
                    "expected tensor {expected}, found {name}"
                )));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|x| x as usize))
                .collect::<Result<Vec<_>>>()?;
            if shape != slot.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {shape:?}, expected {:?}",
                    slot.shape()
                )));
            }
            let raw = r.take(slot.numel() * 8)?;
            for (x, chunk) in slot.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
                *x = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        Ok(model)
    }
}

const CKPT_MAGIC: &[u8] = b"LMQST";
const CKPT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}
