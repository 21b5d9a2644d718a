use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, AttnIdx, DenseIdx, FfnIdx, KvCache, NormIdx, MASKED};
use super::vocab::{EOS, PAD, SOS};
use super::CodecError;
use crate::diffcore::{kernels, Axis, ParamStore, Tape, Tensor, Var};

pub const ENCODER_GROUP: u32 = 0;
pub const QUANTIZER_GROUP: u32 = 1;
pub const SHARED_DECODER_GROUP: u32 = 2;

/// Parameter group of receiver `n`.
pub fn receiver_group(n: usize) -> u32 {
    SHARED_DECODER_GROUP + 1 + n as u32
}

/// Network sizes shared by the transmitter and every receiver.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Transformer width.
    pub d_model: usize,
    /// Width of the continuous code before quantization.
    pub code_dim: usize,
    /// Bits per code row.
    pub bits: usize,
    pub ffn_hidden: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Longest sentence content; sources carry one extra end marker.
    pub max_len: usize,
    /// Append the fading magnitude as an extra dequantizer input column.
    #[serde(default)]
    pub csi: bool,
}

impl ModelConfig {
    pub fn desk(vocab_size: usize, max_len: usize) -> Self {
        Self {
            vocab_size,
            d_model: 32,
            code_dim: 16,
            bits: 16,
            ffn_hidden: 64,
            enc_layers: 1,
            dec_layers: 1,
            max_len,
            csi: false,
        }
    }

    /// Longest encoder input and longest decoded sequence.
    pub fn max_steps(&self) -> usize {
        self.max_len + 1
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("code_dim", self.code_dim),
            ("bits", self.bits),
            ("ffn_hidden", self.ffn_hidden),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(CodecError::Config(format!("{name} must be positive")));
        }
        if self.vocab_size <= EOS as usize + 1 {
            return Err(CodecError::Config("vocabulary holds no content tokens".into()));
        }
        Ok(())
    }

    fn dequantizer_inputs(&self) -> usize {
        self.bits + usize::from(self.csi)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderLayout {
    tokens: usize,
    positions: usize,
    blocks: Vec<(AttnIdx, FfnIdx)>,
    norm: NormIdx,
    out: DenseIdx,
}

/// Semantic and channel encoder followed by the bit quantizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Transmitter {
    config: ModelConfig,
    encoder: ParamStore,
    quantizer: ParamStore,
    layout: EncoderLayout,
    quant: DenseIdx,
}

impl Transmitter {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self, CodecError> {
        config.validate()?;
        let d = config.d_model;
        let emb_std = (1.0 / d as f64).sqrt();
        let mut enc = ParamStore::new(ENCODER_GROUP);
        let tokens = enc.add_normal("enc.tokens", config.vocab_size, d, emb_std, rng);
        let positions = enc.add_normal("enc.positions", config.max_steps(), d, emb_std, rng);
        let blocks = (0..config.enc_layers)
            .map(|l| {
                (
                    layers::add_attention(&mut enc, &format!("enc.{l}.attn"), d, rng),
                    layers::add_ffn(&mut enc, &format!("enc.{l}.ffn"), d, config.ffn_hidden, rng),
                )
            })
            .collect();
        let norm = layers::add_norm(&mut enc, "enc.norm", d);
        let out = layers::add_dense(&mut enc, "enc.code", d, config.code_dim, rng);
        let mut quantizer = ParamStore::new(QUANTIZER_GROUP);
        let quant = layers::add_dense(&mut quantizer, "quant", config.code_dim, config.bits, rng);
        Ok(Self {
            config: config.clone(),
            encoder: enc,
            quantizer,
            layout: EncoderLayout {
                tokens,
                positions,
                blocks,
                norm,
                out,
            },
            quant,
        })
    }

    /// Rebuilds the layout for `config` and adopts the given parameters.
    pub fn from_stores(config: &ModelConfig, encoder: ParamStore, quantizer: ParamStore) -> Result<Self, CodecError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t = Self::new(config, &mut rng)?;
        check_compatible(&t.encoder, &encoder)?;
        check_compatible(&t.quantizer, &quantizer)?;
        t.encoder = encoder.regrouped(ENCODER_GROUP);
        t.quantizer = quantizer.regrouped(QUANTIZER_GROUP);
        Ok(t)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &ParamStore {
        &self.encoder
    }

    pub fn encoder_mut(&mut self) -> &mut ParamStore {
        &mut self.encoder
    }

    pub fn quantizer(&self) -> &ParamStore {
        &self.quantizer
    }

    pub fn quantizer_mut(&mut self) -> &mut ParamStore {
        &mut self.quantizer
    }

    fn check_source(&self, source: &[u32]) -> Result<(), CodecError> {
        if source.is_empty() || source.len() > self.config.max_steps() {
            return Err(CodecError::SourceLength {
                len: source.len(),
                max: self.config.max_steps(),
            });
        }
        if let Some(&id) = source.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(CodecError::OutOfVocabulary {
                id,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Continuous code of `source` (token ids including the end marker) on
    /// `tape`, given the encoder leaves `p`.
    pub fn encode_on_tape(&self, tape: &mut Tape, p: &[Var], source: &[u32]) -> Result<Var, CodecError> {
        self.check_source(source)?;
        let ids: Vec<usize> = source.iter().map(|&i| i as usize).collect();
        let l = &self.layout;
        let e = tape.embedding(p[l.tokens], &ids)?;
        let pos = tape.slice(p[l.positions], Axis::Rows, 0, ids.len())?;
        let mut h = tape.add(e, pos)?;
        for &(attn, ff) in &l.blocks {
            h = layers::attention(tape, p, attn, h, None, None)?;
            h = layers::ffn(tape, p, ff, h)?;
        }
        let h = layers::norm(tape, p, l.norm, h)?;
        let x = layers::dense(tape, p, l.out, h)?;
        Ok(tape.relu(x))
    }

    /// Deterministic continuous code, `T × code_dim`.
    pub fn encode(&self, source: &[u32]) -> Result<Tensor, CodecError> {
        let mut tape = Tape::new();
        let p = self.encoder.bind(&mut tape, false);
        let x = self.encode_on_tape(&mut tape, &p, source)?;
        Ok(tape.value(x).clone())
    }

    /// Quantizer pre-activations on the tape.
    pub fn quantizer_logits_on_tape(&self, tape: &mut Tape, q: &[Var], code: Var) -> Result<Var, CodecError> {
        Ok(layers::dense(tape, q, self.quant, code)?)
    }

    pub fn quantizer_logits(&self, code: &Tensor) -> Result<Tensor, CodecError> {
        if code.cols() != self.config.code_dim || !code.all_finite() {
            return Err(CodecError::Shape {
                what: "code",
                expected: self.config.code_dim,
                got: code.cols(),
            });
        }
        Ok(layers::dense_plain(&self.quantizer, self.quant, code))
    }

    /// `1[z > 0]` of the quantizer projection.
    pub fn quantize(&self, code: &Tensor) -> Result<Tensor, CodecError> {
        Ok(threshold(&self.quantizer_logits(code)?))
    }
}

pub fn threshold(z: &Tensor) -> Tensor {
    let (r, c) = z.dims();
    Tensor::from_vec(r, c, z.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect())
}

fn check_compatible(fresh: &ParamStore, loaded: &ParamStore) -> Result<(), CodecError> {
    if fresh.names() != loaded.names() {
        return Err(CodecError::Checkpoint("parameter names do not match the architecture".into()));
    }
    for i in 0..fresh.len() {
        if fresh.tensor(i).shape() != loaded.tensor(i).shape() {
            return Err(CodecError::Checkpoint(format!(
                "parameter {} has shape {:?}, expected {:?}",
                fresh.name(i),
                loaded.tensor(i).shape(),
                fresh.tensor(i).shape()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
struct DecoderLayout {
    dequant_in: DenseIdx,
    dequant_out: DenseIdx,
    memory_positions: usize,
    tokens: usize,
    positions: usize,
    blocks: Vec<(AttnIdx, AttnIdx, FfnIdx)>,
    norm: NormIdx,
    out: DenseIdx,
}

/// Dequantizer, semantic decoder and output distribution of one receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct Receiver {
    config: ModelConfig,
    store: ParamStore,
    layout: DecoderLayout,
    output_mask: Tensor,
}

impl Receiver {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, group: u32, rng: &mut R) -> Result<Self, CodecError> {
        config.validate()?;
        let d = config.d_model;
        let emb_std = (1.0 / d as f64).sqrt();
        let mut s = ParamStore::new(group);
        let dequant_in = layers::add_dense(&mut s, "dq.in", config.dequantizer_inputs(), config.code_dim, rng);
        let dequant_out = layers::add_dense(&mut s, "dq.out", config.code_dim, d, rng);
        let memory_positions = s.add_normal("dec.memory_positions", config.max_steps(), d, emb_std, rng);
        let tokens = s.add_normal("dec.tokens", config.vocab_size, d, emb_std, rng);
        let positions = s.add_normal("dec.positions", config.max_steps(), d, emb_std, rng);
        let blocks = (0..config.dec_layers)
            .map(|l| {
                (
                    layers::add_attention(&mut s, &format!("dec.{l}.self"), d, rng),
                    layers::add_attention(&mut s, &format!("dec.{l}.cross"), d, rng),
                    layers::add_ffn(&mut s, &format!("dec.{l}.ffn"), d, config.ffn_hidden, rng),
                )
            })
            .collect();
        let norm = layers::add_norm(&mut s, "dec.norm", d);
        let out = layers::add_dense(&mut s, "dec.logits", d, config.vocab_size, rng);
        let mut mask = vec![0.0; config.vocab_size];
        mask[PAD as usize] = MASKED;
        mask[SOS as usize] = MASKED;
        Ok(Self {
            config: config.clone(),
            store: s,
            layout: DecoderLayout {
                dequant_in,
                dequant_out,
                memory_positions,
                tokens,
                positions,
                blocks,
                norm,
                out,
            },
            output_mask: Tensor::row(mask),
        })
    }

    pub fn from_store(config: &ModelConfig, store: ParamStore) -> Result<Self, CodecError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut r = Self::new(config, store.group(), &mut rng)?;
        check_compatible(&r.store, &store)?;
        r.store = store;
        Ok(r)
    }

    /// Same parameters under another group id.
    pub fn regrouped(&self, group: u32) -> Self {
        Self {
            store: self.store.regrouped(group),
            ..self.clone()
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Expected input width of the dequantizer.
    pub fn input_width(&self) -> usize {
        self.config.dequantizer_inputs()
    }

    fn check_received(&self, rows: usize, cols: usize) -> Result<(), CodecError> {
        if cols != self.input_width() {
            return Err(CodecError::Shape {
                what: "received frame",
                expected: self.input_width(),
                got: cols,
            });
        }
        if rows == 0 || rows > self.config.max_steps() {
            return Err(CodecError::SourceLength {
                len: rows,
                max: self.config.max_steps(),
            });
        }
        Ok(())
    }

    /// Decoder memory from a received frame (soft values, plus the CSI column
    /// when configured).
    pub fn dequantize_on_tape(&self, tape: &mut Tape, p: &[Var], received: Var) -> Result<Var, CodecError> {
        let (rows, cols) = tape.value(received).dims();
        self.check_received(rows, cols)?;
        let l = &self.layout;
        let h = layers::dense(tape, p, l.dequant_in, received)?;
        let h = tape.relu(h);
        let h = layers::dense(tape, p, l.dequant_out, h)?;
        let h = tape.relu(h);
        let pos = tape.slice(p[l.memory_positions], Axis::Rows, 0, rows)?;
        Ok(tape.add(h, pos)?)
    }

    pub fn dequantize(&self, received: &Tensor) -> Result<Tensor, CodecError> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let y = tape.constant(received.clone());
        let m = self.dequantize_on_tape(&mut tape, &p, y)?;
        Ok(tape.value(m).clone())
    }

    /// Teacher-forced log-probabilities of several token sequences that share
    /// one memory. Each sequence is the emitted tokens (usually ending in the
    /// end marker); rows are stacked in sequence order, one per emitted token.
    pub fn sequence_log_probs_on_tape(
        &self,
        tape: &mut Tape,
        p: &[Var],
        memory: Var,
        sequences: &[&[u32]],
    ) -> Result<Var, CodecError> {
        let mut inputs = Vec::new();
        let mut positions = Vec::new();
        let mut owner = Vec::new();
        for (s, seq) in sequences.iter().enumerate() {
            if seq.is_empty() || seq.len() > self.config.max_steps() {
                return Err(CodecError::SourceLength {
                    len: seq.len(),
                    max: self.config.max_steps(),
                });
            }
            for t in 0..seq.len() {
                let prev = if t == 0 { SOS } else { seq[t - 1] };
                if prev as usize >= self.config.vocab_size {
                    return Err(CodecError::OutOfVocabulary {
                        id: prev,
                        size: self.config.vocab_size,
                    });
                }
                inputs.push(prev as usize);
                positions.push(t);
                owner.push(s);
            }
        }
        let n = inputs.len();
        let mut mask = vec![MASKED; n * n];
        for i in 0..n {
            for j in 0..=i {
                if owner[j] == owner[i] {
                    mask[i * n + j] = 0.0;
                }
            }
        }
        let mask = Tensor::from_vec(n, n, mask);

        let l = &self.layout;
        let e = tape.embedding(p[l.tokens], &inputs)?;
        let pe = tape.embedding(p[l.positions], &positions)?;
        let mut h = tape.add(e, pe)?;
        for &(self_attn, cross, ff) in &l.blocks {
            h = layers::attention(tape, p, self_attn, h, None, Some(&mask))?;
            h = layers::attention(tape, p, cross, h, Some(memory), None)?;
            h = layers::ffn(tape, p, ff, h)?;
        }
        let h = layers::norm(tape, p, l.norm, h)?;
        let logits = layers::dense(tape, p, l.out, h)?;
        let m = tape.constant(self.output_mask.clone());
        let logits = tape.add(logits, m)?;
        Ok(tape.log_softmax(logits))
    }

    /// Incremental decoding state for one memory.
    pub fn start(&self, memory: &Tensor) -> DecoderState<'_> {
        let cross = self
            .layout
            .blocks
            .iter()
            .map(|&(_, c, _)| KvCache::over(&self.store, c, memory))
            .collect();
        DecoderState {
            rx: self,
            cross,
            own: vec![KvCache::empty(self.config.d_model); self.layout.blocks.len()],
            step: 0,
        }
    }
}

/// Cached autoregressive decoder: feeds one token per call.
#[derive(Debug, Clone)]
pub struct DecoderState<'a> {
    rx: &'a Receiver,
    cross: Vec<KvCache>,
    own: Vec<KvCache>,
    step: usize,
}

impl DecoderState<'_> {
    pub fn step_index(&self) -> usize {
        self.step
    }

    /// Log-probabilities of the next token after feeding `prev`.
    pub fn next_log_probs(&mut self, prev: u32) -> Vec<f64> {
        let rx = self.rx;
        let s = &rx.store;
        let l = &rx.layout;
        let tok = s.tensor(l.tokens);
        let pos = s.tensor(l.positions);
        let mut h: Vec<f64> = tok
            .row_slice(prev as usize)
            .iter()
            .zip(pos.row_slice(self.step))
            .map(|(a, b)| a + b)
            .collect();
        for (b, &(self_attn, cross, ff)) in l.blocks.iter().enumerate() {
            let a = layers::norm_row(s, self_attn.norm, &h);
            self.own[b].push(s, self_attn, &a);
            h = layers::attend_row(s, self_attn, &h, &a, &self.own[b]);
            let c = layers::norm_row(s, cross.norm, &h);
            h = layers::attend_row(s, cross, &h, &c, &self.cross[b]);
            h = layers::ffn_row(s, ff, &h);
        }
        let h = layers::norm_row(s, l.norm, &h);
        let w = s.tensor(l.out.w);
        let mut logits = kernels::vec_mat(&h, w.data(), Some(s.tensor(l.out.b).data()), w.cols());
        kernels::add_in_place(&mut logits, rx.output_mask.data());
        kernels::log_softmax_in_place(&mut logits);
        self.step += 1;
        logits
    }
}
