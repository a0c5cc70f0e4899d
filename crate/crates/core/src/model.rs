//! The attentional encoder-decoder: a 2-layer bidirectional LSTM encoder,
//! a 2-layer LSTM decoder with dot attention and input feeding, and a
//! softmax output layer.
//!
//! Source vectors are the concatenated forward/backward top-layer states
//! (width 2H). Dot attention needs decoder-state width, so a learned
//! projection maps each source vector to H once after encoding; the same
//! projection of the last source vector initializes the decoder's first
//! hidden layer. The attentional vector d̃ = tanh(W_c·[c; d]) is fed back
//! into the next decoder input (input feeding) and multiplied by W_s for
//! the output distribution.
//!
//! All forward passes run on a [`Tape`]; the trainer re-records per batch
//! and calls backward, while inference records with constant (non-leaf)
//! parameters. Padding is handled by carry-through LSTM updates and by
//! masking attention scores to −1e9 on padded positions.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

/// Width configuration of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    /// Width of the learned input embeddings (both sides).
    pub embed_dim: usize,
    /// LSTM hidden width; source vectors are twice this.
    pub hidden_dim: usize,
}

const INIT_RANGE: f64 = 0.08;
const ATTN_MASK_NEG: f64 = -1e9;

/// All trainable tensors, in a fixed registration order that doubles as
/// the [`ParamId`] space and the checkpoint manifest order.
#[derive(Debug, Clone)]
pub struct ModelParams {
    dims: ModelDims,
    names: Vec<&'static str>,
    tensors: Vec<Tensor>,
    pub init_seed: u64,
}

// Registration order; keep in sync with `ModelParams::new`.
const P_SRC_EMBED: usize = 0;
const P_TGT_EMBED: usize = 1;
const P_ENC_L1_FWD: usize = 2; // wx, wh, b
const P_ENC_L1_BWD: usize = 5;
const P_ENC_L2_FWD: usize = 8;
const P_ENC_L2_BWD: usize = 11;
const P_DEC_L1: usize = 14;
const P_DEC_L2: usize = 17;
const P_W_P: usize = 20;
const P_W_C: usize = 21;
const P_W_S: usize = 22;
const PARAM_COUNT: usize = 23;

impl ModelParams {
    /// Fresh parameters, every entry uniform in (−0.08, 0.08), drawn in
    /// registration order from a ChaCha stream seeded with `seed`.
    pub fn new(dims: ModelDims, seed: u64) -> ModelParams {
        assert!(dims.src_vocab > 0 && dims.tgt_vocab > 0);
        assert!(dims.embed_dim > 0 && dims.hidden_dim > 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (e, h) = (dims.embed_dim, dims.hidden_dim);

        struct Registry {
            names: Vec<&'static str>,
            tensors: Vec<Tensor>,
        }
        impl Registry {
            fn reg(&mut self, name: &'static str, shape: &[usize], rng: &mut ChaCha8Rng) {
                self.names.push(name);
                self.tensors
                    .push(Tensor::rand_uniform(shape, -INIT_RANGE, INIT_RANGE, rng));
            }
            fn reg_lstm(
                &mut self,
                wx: &'static str,
                wh: &'static str,
                b: &'static str,
                input: usize,
                h: usize,
                rng: &mut ChaCha8Rng,
            ) {
                self.reg(wx, &[4 * h, input], rng);
                self.reg(wh, &[4 * h, h], rng);
                self.reg(b, &[1, 4 * h], rng);
            }
        }
        let mut r = Registry {
            names: Vec::with_capacity(PARAM_COUNT),
            tensors: Vec::with_capacity(PARAM_COUNT),
        };
        r.reg("src_embed", &[dims.src_vocab, e], &mut rng);
        r.reg("tgt_embed", &[dims.tgt_vocab, e], &mut rng);
        r.reg_lstm("enc.l1.fwd.wx", "enc.l1.fwd.wh", "enc.l1.fwd.b", e, h, &mut rng);
        r.reg_lstm("enc.l1.bwd.wx", "enc.l1.bwd.wh", "enc.l1.bwd.b", e, h, &mut rng);
        r.reg_lstm("enc.l2.fwd.wx", "enc.l2.fwd.wh", "enc.l2.fwd.b", 2 * h, h, &mut rng);
        r.reg_lstm("enc.l2.bwd.wx", "enc.l2.bwd.wh", "enc.l2.bwd.b", 2 * h, h, &mut rng);
        r.reg_lstm("dec.l1.wx", "dec.l1.wh", "dec.l1.b", e + h, h, &mut rng);
        r.reg_lstm("dec.l2.wx", "dec.l2.wh", "dec.l2.b", h, h, &mut rng);
        r.reg("w_p", &[h, 2 * h], &mut rng);
        r.reg("w_c", &[h, 3 * h], &mut rng);
        r.reg("w_s", &[dims.tgt_vocab, h], &mut rng);
        debug_assert_eq!(r.tensors.len(), PARAM_COUNT);
        ModelParams {
            dims,
            names: r.names,
            tensors: r.tensors,
            init_seed: seed,
        }
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn names(&self) -> &[&'static str] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors.iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| *n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Place every parameter on the tape — as trainable leaves for the
    /// trainer, or as constants for inference.
    pub fn on_tape(&self, tape: &mut Tape, trainable: bool) -> TapedModel {
        let vars = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if trainable {
                    tape.param(t.clone(), ParamId(i))
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        TapedModel {
            dims: self.dims,
            vars,
        }
    }
}

/// Dropout policy for one forward pass. `Off` records no dropout nodes at
/// all, so inference graphs are identical to a p=0 training graph.
pub enum Dropout<'a> {
    Off,
    On { p: f64, rng: &'a mut ChaCha8Rng },
}

impl Dropout<'_> {
    fn apply(&mut self, tape: &mut Tape, v: Var) -> Var {
        match self {
            Dropout::Off => v,
            Dropout::On { p, rng } => {
                let shape = tape.value(v).shape().to_vec();
                let n: usize = shape.iter().product();
                let mask = Tensor::new(
                    shape,
                    (0..n).map(|_| f64::from(rng.gen::<f64>() >= *p)).collect(),
                );
                tape.dropout(v, &mask, *p)
            }
        }
    }
}

/// Model parameters materialized on a tape.
pub struct TapedModel {
    dims: ModelDims,
    vars: Vec<Var>,
}

struct LstmVars {
    wx: Var,
    wh: Var,
    b: Var,
}

/// Everything the decoder needs from the source side.
pub struct EncoderOutput {
    /// Per position j: concatenated bidirectional state, `[B × 2H]`.
    pub source_vectors: Vec<Var>,
    /// Per position j: the H-wide projection used for dot scores, `[B × H]`.
    pub projected: Vec<Var>,
    /// Additive attention mask, 0 on real positions, −1e9 on padding.
    score_mask: Tensor,
    /// Projection of each row's final source vector, `[B × H]`.
    pub init_hidden: Var,
}

impl EncoderOutput {
    pub fn src_len(&self) -> usize {
        self.source_vectors.len()
    }
}

/// Recurrent decoder state (batched rows). `Var`s are cheap indices, so
/// the state is freely copyable — beams fork by copying.
#[derive(Clone, Copy)]
pub struct DecoderState {
    h1: Var,
    c1: Var,
    h2: Var,
    c2: Var,
    /// Previous attentional vector d̃ (zeros at step 0): input feeding.
    pub feed: Var,
    pub step: usize,
}

impl TapedModel {
    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    fn lstm(&self, base: usize) -> LstmVars {
        LstmVars {
            wx: self.vars[base],
            wh: self.vars[base + 1],
            b: self.vars[base + 2],
        }
    }

    /// One LSTM cell update over a batch. Rows with mask 0 carry their
    /// previous state through unchanged.
    fn lstm_step(
        &self,
        tape: &mut Tape,
        cell: &LstmVars,
        x: Var,
        h: Var,
        c: Var,
        mask_col: &[f64],
    ) -> (Var, Var) {
        let hd = self.dims.hidden_dim;
        let xg = tape.matmul_nt(x, cell.wx);
        let hg = tape.matmul_nt(h, cell.wh);
        let lin = tape.add(xg, hg);
        let gates = tape.add_row(lin, cell.b);
        let i_g = tape.slice_cols(gates, 0, hd);
        let f_g = tape.slice_cols(gates, hd, 2 * hd);
        let g_g = tape.slice_cols(gates, 2 * hd, 3 * hd);
        let o_g = tape.slice_cols(gates, 3 * hd, 4 * hd);
        let i = tape.sigmoid(i_g);
        let f = tape.sigmoid(f_g);
        let g = tape.tanh(g_g);
        let o = tape.sigmoid(o_g);
        let fc = tape.mul(f, c);
        let ig = tape.mul(i, g);
        let c_new = tape.add(fc, ig);
        let ct = tape.tanh(c_new);
        let h_new = tape.mul(o, ct);

        if mask_col.iter().all(|&m| m == 1.0) {
            return (h_new, c_new);
        }
        let b = mask_col.len();
        let keep = tape.constant(Tensor::new(vec![b, 1], mask_col.to_vec()));
        let carry = tape.constant(Tensor::new(
            vec![b, 1],
            mask_col.iter().map(|m| 1.0 - m).collect(),
        ));
        let hk = tape.scale_rows(h_new, keep);
        let hc = tape.scale_rows(h, carry);
        let h_out = tape.add(hk, hc);
        let ck = tape.scale_rows(c_new, keep);
        let cc = tape.scale_rows(c, carry);
        let c_out = tape.add(ck, cc);
        (h_out, c_out)
    }

    /// Run the bidirectional encoder over padded id rows.
    ///
    /// `source_ids`/`source_mask` are `[B][J]`; every row must contain at
    /// least one real token.
    pub fn encode(
        &self,
        tape: &mut Tape,
        source_ids: &[Vec<u32>],
        source_mask: &[Vec<f64>],
        dropout: &mut Dropout,
    ) -> EncoderOutput {
        let b = source_ids.len();
        assert!(b > 0, "encode: empty batch");
        let j_len = source_ids[0].len();
        assert!(
            source_mask
                .iter()
                .all(|row| row.iter().sum::<f64>() >= 1.0),
            "encode: a row consists entirely of padding"
        );

        let col_ids = |j: usize| -> Vec<u32> { source_ids.iter().map(|r| r[j]).collect() };
        let col_mask = |j: usize| -> Vec<f64> { source_mask.iter().map(|r| r[j]).collect() };

        // embedded inputs per position
        let embedded: Vec<Var> = (0..j_len)
            .map(|j| {
                let e = tape.embedding_lookup(self.vars[P_SRC_EMBED], &col_ids(j));
                dropout.apply(tape, e)
            })
            .collect();

        let h = self.dims.hidden_dim;
        let zeros = || Tensor::zeros(&[b, h]);
        let run_direction = |tape: &mut Tape, cell: &LstmVars, inputs: &[Var], forward: bool| {
            let mut hv = tape.constant(zeros());
            let mut cv = tape.constant(zeros());
            let mut out: Vec<Option<Var>> = vec![None; j_len];
            let order: Vec<usize> = if forward {
                (0..j_len).collect()
            } else {
                (0..j_len).rev().collect()
            };
            for j in order {
                let (nh, nc) = self.lstm_step(tape, cell, inputs[j], hv, cv, &col_mask(j));
                hv = nh;
                cv = nc;
                out[j] = Some(hv);
            }
            out.into_iter().map(|v| v.unwrap()).collect::<Vec<Var>>()
        };

        let l1f = run_direction(tape, &self.lstm(P_ENC_L1_FWD), &embedded, true);
        let l1b = run_direction(tape, &self.lstm(P_ENC_L1_BWD), &embedded, false);
        let layer2_in: Vec<Var> = (0..j_len)
            .map(|j| {
                let u = tape.concat_cols(&[l1f[j], l1b[j]]);
                dropout.apply(tape, u)
            })
            .collect();
        let l2f = run_direction(tape, &self.lstm(P_ENC_L2_FWD), &layer2_in, true);
        let l2b = run_direction(tape, &self.lstm(P_ENC_L2_BWD), &layer2_in, false);

        let source_vectors: Vec<Var> = (0..j_len)
            .map(|j| tape.concat_cols(&[l2f[j], l2b[j]]))
            .collect();
        let projected: Vec<Var> = source_vectors
            .iter()
            .map(|&s| tape.matmul_nt(s, self.vars[P_W_P]))
            .collect();

        // additive score mask and per-row final positions
        let mut score_mask = Tensor::zeros(&[b, j_len]);
        let mut init_hidden: Option<Var> = None;
        for j in 0..j_len {
            let mut lastpos = vec![0.0; b];
            let mut any = false;
            for (row, m) in source_mask.iter().enumerate() {
                if m[j] == 0.0 {
                    score_mask.set(row, j, ATTN_MASK_NEG);
                }
                let len = m.iter().filter(|&&x| x == 1.0).count();
                if j + 1 == len {
                    lastpos[row] = 1.0;
                    any = true;
                }
            }
            if any {
                let sel = tape.constant(Tensor::new(vec![b, 1], lastpos));
                let picked = tape.scale_rows(projected[j], sel);
                init_hidden = Some(match init_hidden {
                    Some(acc) => tape.add(acc, picked),
                    None => picked,
                });
            }
        }

        EncoderOutput {
            source_vectors,
            projected,
            score_mask,
            init_hidden: init_hidden.expect("every row has a final position"),
        }
    }

    /// Fresh decoder state: layer-1 hidden from the encoder, everything
    /// else (cells, layer 2, feed vector) zero.
    pub fn init_decoder_state(&self, tape: &mut Tape, enc: &EncoderOutput, batch_rows: usize) -> DecoderState {
        let h = self.dims.hidden_dim;
        let z = || Tensor::zeros(&[batch_rows, h]);
        DecoderState {
            h1: enc.init_hidden,
            c1: tape.constant(z()),
            h2: tape.constant(z()),
            c2: tape.constant(z()),
            feed: tape.constant(z()),
            step: 0,
        }
    }

    /// Dot-attention weights of decoder state `d` (`[B × H]`) over the
    /// source positions: softmax over scores `d·p_j`, padded positions
    /// forced to zero weight.
    pub fn attention_weights(&self, tape: &mut Tape, d: Var, enc: &EncoderOutput) -> Var {
        let score_cols: Vec<Var> = enc
            .projected
            .iter()
            .map(|&p| {
                let prod = tape.mul(d, p);
                tape.row_sum(prod)
            })
            .collect();
        let scores = tape.concat_cols(&score_cols);
        let mask = tape.constant(enc.score_mask.clone());
        let masked = tape.add(scores, mask);
        tape.softmax_rows(masked)
    }

    /// Context vector: the α-weighted sum of source vectors, `[B × 2H]`.
    pub fn context(&self, tape: &mut Tape, alpha: Var, enc: &EncoderOutput) -> Var {
        let mut acc: Option<Var> = None;
        for (j, &s) in enc.source_vectors.iter().enumerate() {
            let col = tape.slice_cols(alpha, j, j + 1);
            let term = tape.scale_rows(s, col);
            acc = Some(match acc {
                Some(a) => tape.add(a, term),
                None => term,
            });
        }
        acc.expect("attention over at least one position")
    }

    /// One decoder step: consume the previous target ids, update both LSTM
    /// layers, attend, and produce the attentional vector d̃ (which also
    /// becomes the next feed vector).
    ///
    /// `mask_col` freezes finished rows during batched teacher forcing;
    /// pass all-ones (or a 1-row mask) when decoding freely.
    pub fn decoder_step(
        &self,
        tape: &mut Tape,
        state: &DecoderState,
        prev_ids: &[u32],
        enc: &EncoderOutput,
        mask_col: &[f64],
        dropout: &mut Dropout,
    ) -> (DecoderState, Var) {
        let emb = tape.embedding_lookup(self.vars[P_TGT_EMBED], prev_ids);
        let emb = dropout.apply(tape, emb);
        let x = tape.concat_cols(&[emb, state.feed]);
        let (h1, c1) = self.lstm_step(tape, &self.lstm(P_DEC_L1), x, state.h1, state.c1, mask_col);
        let between = dropout.apply(tape, h1);
        let (h2, c2) =
            self.lstm_step(tape, &self.lstm(P_DEC_L2), between, state.h2, state.c2, mask_col);

        let alpha = self.attention_weights(tape, h2, enc);
        let ctx = self.context(tape, alpha, enc);
        let cat = tape.concat_cols(&[ctx, h2]);
        let lin = tape.matmul_nt(cat, self.vars[P_W_C]);
        let d_tilde = tape.tanh(lin);

        (
            DecoderState {
                h1,
                c1,
                h2,
                c2,
                feed: d_tilde,
                step: state.step + 1,
            },
            d_tilde,
        )
    }

    /// Output distribution over the target vocabulary from d̃.
    pub fn output_distribution(&self, tape: &mut Tape, d_tilde: Var, dropout: &mut Dropout) -> Var {
        let dropped = dropout.apply(tape, d_tilde);
        let logits = tape.matmul_nt(dropped, self.vars[P_W_S]);
        tape.softmax_rows(logits)
    }

    /// Teacher-forced forward over a whole batch: returns, per step `i`,
    /// the `[B × T_vocab]` distribution predicting target column `i + 1`.
    pub fn forward_teacher_forced(
        &self,
        tape: &mut Tape,
        batch: &crate::corpus::Batch,
        dropout: &mut Dropout,
    ) -> Vec<Var> {
        let enc = self.encode(tape, &batch.source_ids, &batch.source_mask, dropout);
        let mut state = self.init_decoder_state(tape, &enc, batch.size());
        let mut probs = Vec::with_capacity(batch.tgt_len() - 1);
        for i in 0..batch.tgt_len() - 1 {
            let prev = batch.target_col(i);
            let mask = batch.target_mask_col(i);
            let (next, d_tilde) = self.decoder_step(tape, &state, &prev, &enc, &mask, dropout);
            probs.push(self.output_distribution(tape, d_tilde, dropout));
            state = next;
        }
        probs
    }
}

// ---- checkpoint container ----

/// A trained model plus everything needed to reuse or resume it.
#[derive(Debug)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    /// Free-form metadata (epoch, phase, learning rate, ...), order preserved.
    pub meta: Vec<(String, String)>,
    /// Non-parameter tensors (optimizer moments), name-keyed.
    pub extra_tensors: Vec<(String, Tensor)>,
}

const CKPT_MAGIC: &str = "EMBNMT-CKPT 1";

impl Checkpoint {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Serialize as a text manifest followed by little-endian f64 data.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        text.push_str(CKPT_MAGIC);
        text.push('\n');
        text.push_str(&format!(
            "dims {} {} {} {}\n",
            self.params.dims.src_vocab,
            self.params.dims.tgt_vocab,
            self.params.dims.embed_dim,
            self.params.dims.hidden_dim
        ));
        text.push_str(&format!("init_seed {}\n", self.params.init_seed));
        text.push_str(&format!("meta {}\n", self.meta.len()));
        for (k, v) in &self.meta {
            assert!(!k.contains(char::is_whitespace), "meta key {k:?} has whitespace");
            text.push_str(&format!("{k}\t{v}\n"));
        }
        let vocab_section = |label: &str, v: &Vocabulary, text: &mut String| {
            let words: Vec<&str> = v.ordinary_words().collect();
            text.push_str(&format!("{label} {}\n", words.len()));
            for w in words {
                text.push_str(w);
                text.push('\n');
            }
        };
        vocab_section("src_vocab", &self.src_vocab, &mut text);
        vocab_section("tgt_vocab", &self.tgt_vocab, &mut text);

        let entries: Vec<(&str, &Tensor)> = self
            .params
            .names
            .iter()
            .copied()
            .zip(self.params.tensors.iter())
            .chain(self.extra_tensors.iter().map(|(n, t)| (n.as_str(), t)))
            .collect();
        text.push_str(&format!("tensors {}\n", entries.len()));
        let mut offset = 0usize;
        for (name, t) in &entries {
            let (r, c) = (t.shape()[0], t.shape()[1]);
            text.push_str(&format!("{name} {r} {c} {offset}\n"));
            offset += t.len();
        }
        text.push_str(&format!("data {offset}\n"));

        let mut bytes = text.into_bytes();
        bytes.reserve(offset * 8);
        for (_, t) in &entries {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let corrupt = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));

        let mut pos = 0usize;
        let next_line = |bytes: &[u8], pos: &mut usize| -> Result<String> {
            let start = *pos;
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            if *pos >= bytes.len() {
                return Err(Error::Checkpoint(format!(
                    "{}: truncated manifest",
                    path.display()
                )));
            }
            let line = std::str::from_utf8(&bytes[start..*pos])
                .map_err(|_| Error::Checkpoint(format!("{}: manifest is not UTF-8", path.display())))?
                .to_string();
            *pos += 1; // consume newline
            Ok(line)
        };

        if next_line(&bytes, &mut pos)? != CKPT_MAGIC {
            return Err(corrupt("bad magic, not a checkpoint file"));
        }
        let parse_counted = |line: &str, label: &str| -> Result<usize> {
            let rest = line
                .strip_prefix(label)
                .and_then(|r| r.strip_prefix(' '))
                .ok_or_else(|| corrupt(&format!("expected {label} line, got {line:?}")))?;
            rest.parse()
                .map_err(|_| corrupt(&format!("bad {label} count {rest:?}")))
        };

        let dims_line = next_line(&bytes, &mut pos)?;
        let dims_fields: Vec<usize> = dims_line
            .strip_prefix("dims ")
            .ok_or_else(|| corrupt("missing dims line"))?
            .split(' ')
            .map(|f| f.parse().map_err(|_| corrupt("bad dims value")))
            .collect::<Result<_>>()?;
        if dims_fields.len() != 4 {
            return Err(corrupt("dims line needs 4 fields"));
        }
        let dims = ModelDims {
            src_vocab: dims_fields[0],
            tgt_vocab: dims_fields[1],
            embed_dim: dims_fields[2],
            hidden_dim: dims_fields[3],
        };
        let seed_line = next_line(&bytes, &mut pos)?;
        let init_seed: u64 = seed_line
            .strip_prefix("init_seed ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt("missing init_seed line"))?;

        let meta_count = parse_counted(&next_line(&bytes, &mut pos)?, "meta")?;
        let mut meta = Vec::with_capacity(meta_count);
        for _ in 0..meta_count {
            let line = next_line(&bytes, &mut pos)?;
            let (k, v) = line
                .split_once('\t')
                .ok_or_else(|| corrupt("meta line missing tab"))?;
            meta.push((k.to_string(), v.to_string()));
        }

        let read_vocab = |label: &str, pos: &mut usize| -> Result<Vocabulary> {
            let count = parse_counted(&next_line(&bytes, pos)?, label)?;
            let mut words = Vec::with_capacity(count);
            for _ in 0..count {
                words.push(next_line(&bytes, pos)?);
            }
            Ok(Vocabulary::from_words(words))
        };
        let src_vocab = read_vocab("src_vocab", &mut pos)?;
        let tgt_vocab = read_vocab("tgt_vocab", &mut pos)?;
        if src_vocab.len() != dims.src_vocab || tgt_vocab.len() != dims.tgt_vocab {
            return Err(corrupt("vocabulary sizes disagree with dims"));
        }

        let tensor_count = parse_counted(&next_line(&bytes, &mut pos)?, "tensors")?;
        let mut manifest = Vec::with_capacity(tensor_count);
        for _ in 0..tensor_count {
            let line = next_line(&bytes, &mut pos)?;
            let fields: Vec<&str> = line.split(' ').collect();
            if fields.len() != 4 {
                return Err(corrupt(&format!("bad tensor line {line:?}")));
            }
            let rows: usize = fields[1].parse().map_err(|_| corrupt("bad tensor rows"))?;
            let cols: usize = fields[2].parse().map_err(|_| corrupt("bad tensor cols"))?;
            let off: usize = fields[3].parse().map_err(|_| corrupt("bad tensor offset"))?;
            manifest.push((fields[0].to_string(), rows, cols, off));
        }
        let total = parse_counted(&next_line(&bytes, &mut pos)?, "data")?;
        let blob = &bytes[pos..];
        if blob.len() != total * 8 {
            return Err(corrupt(&format!(
                "data section holds {} bytes, manifest declares {}",
                blob.len(),
                total * 8
            )));
        }
        let read_tensor = |rows: usize, cols: usize, off: usize| -> Result<Tensor> {
            let n = rows * cols;
            if off + n > total {
                return Err(corrupt("tensor extends past data section"));
            }
            let data: Vec<f64> = (0..n)
                .map(|i| {
                    let s = (off + i) * 8;
                    f64::from_le_bytes(blob[s..s + 8].try_into().expect("8-byte slice"))
                })
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(corrupt("non-finite tensor value"));
            }
            Ok(Tensor::new(vec![rows, cols], data))
        };

        let mut params = ModelParams::new(dims, init_seed);
        let mut seen = vec![false; PARAM_COUNT];
        let mut extra_tensors = Vec::new();
        for (name, rows, cols, off) in manifest {
            let t = read_tensor(rows, cols, off)?;
            if let Some(i) = params.names.iter().position(|n| *n == name) {
                if params.tensors[i].shape() != t.shape() {
                    return Err(corrupt(&format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        t.shape(),
                        params.tensors[i].shape()
                    )));
                }
                params.tensors[i] = t;
                seen[i] = true;
            } else {
                extra_tensors.push((name, t));
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(corrupt(&format!("missing parameter {}", params.names[i])));
        }

        Ok(Checkpoint {
            params,
            src_vocab,
            tgt_vocab,
            meta,
            extra_tensors,
        })
    }
}
