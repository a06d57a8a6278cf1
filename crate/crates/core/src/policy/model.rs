//! Attentional GRU encoder-decoder.
//!
//! The encoder is a single bidirectional GRU layer over source embeddings.
//! The decoder is a GRU whose input at each step is the previous target
//! embedding joined with an attention context over the encoder annotations;
//! the output layer reads the new decoder state and the context.

use diffcore::{Graph, ParamId, ParamSet, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocabulary, BOS, EOS, PAD};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    /// `v^T tanh(W s + U h_j)`
    Additive,
    /// `s^T W h_j`
    Multiplicative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub embed_size: usize,
    pub hidden_size: usize,
    pub attention_size: usize,
    /// Maximum number of generated tokens, end-of-sequence included.
    pub max_len: usize,
    pub attention: AttentionKind,
    /// Drop probability for embeddings and decoder inputs during training.
    pub dropout: f64,
    /// Half-width of the uniform initialization interval.
    pub init_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            embed_size: 32,
            hidden_size: 32,
            attention_size: 32,
            max_len: 20,
            attention: AttentionKind::Additive,
            dropout: 0.0,
            init_scale: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct GruIds {
    w: ParamId,
    u: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
enum AttentionIds {
    Additive {
        w_dec: ParamId,
        w_enc: ParamId,
        v: ParamId,
    },
    Multiplicative {
        bilinear: ParamId,
    },
}

#[derive(Clone, Copy, Debug)]
struct PolicyIds {
    src_embed: ParamId,
    trg_embed: ParamId,
    enc_fwd: GruIds,
    enc_bwd: GruIds,
    init_w: ParamId,
    init_b: ParamId,
    attention: AttentionIds,
    dec: GruIds,
    out_w: ParamId,
    out_b: ParamId,
}

/// Bernoulli mask source for inverted dropout.
#[derive(Clone, Debug)]
pub struct Dropout {
    p: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(p: f64, seed: u64) -> Self {
        Dropout {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn apply(&mut self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        if self.p <= 0.0 {
            return Ok(x);
        }
        let shape = g.value(x).shape().to_vec();
        let keep = 1.0 - self.p;
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = g.constant(Tensor::new(shape, mask)?)?;
        Ok(g.mul(x, m)?)
    }
}

fn maybe_drop(drop: &mut Option<&mut Dropout>, g: &mut Graph<'_>, x: Var) -> Result<Var> {
    match drop {
        Some(d) => d.apply(g, x),
        None => Ok(x),
    }
}

/// The encoder's output for one source sentence.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[T, 2H]` bidirectional annotations.
    pub annotations: Var,
    /// `[T, A]` projected annotations (additive attention only).
    keys: Option<Var>,
    /// `[2H, T]` transposed annotations (multiplicative attention only).
    annotations_t: Option<Var>,
    pub init_state: Var,
}

/// Per-token and total log-probabilities as graph nodes.
#[derive(Clone, Debug)]
pub struct TokenScores {
    pub per_token: Vec<Var>,
    pub total: Var,
}

/// The translation policy p(y|x): vocabularies, configuration and weights.
#[derive(Clone, Debug)]
pub struct Policy {
    config: PolicyConfig,
    src_vocab: Vocabulary,
    trg_vocab: Vocabulary,
    params: ParamSet,
    ids: PolicyIds,
}

/// Target ids below this offset (padding, begin marker) are never produced.
const OUTPUT_OFFSET: usize = 2;

impl Policy {
    /// Randomly initialized policy.
    pub fn new(
        config: PolicyConfig,
        src_vocab: Vocabulary,
        trg_vocab: Vocabulary,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = param_shapes(&config, src_vocab.len(), trg_vocab.len());
        let mut params = ParamSet::new();
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            let mut data: Vec<f64> = (0..n)
                .map(|_| rng.gen_range(-config.init_scale..=config.init_scale))
                .collect();
            if name.ends_with(".b") || name == "init.b" {
                data.iter_mut().for_each(|x| *x = 0.0);
            }
            if name.ends_with("_embed") {
                let cols = shape[1];
                data[PAD * cols..(PAD + 1) * cols].iter_mut().for_each(|x| *x = 0.0);
            }
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        Self::from_parts(config, src_vocab, trg_vocab, params)
    }

    /// Assembles a policy from existing weights, validating every shape.
    pub fn from_parts(
        config: PolicyConfig,
        src_vocab: Vocabulary,
        trg_vocab: Vocabulary,
        params: ParamSet,
    ) -> Result<Self> {
        if config.max_len == 0 || config.hidden_size == 0 || config.embed_size == 0 {
            return Err(Error::Config("policy sizes must be positive".into()));
        }
        let expected = param_shapes(&config, src_vocab.len(), trg_vocab.len());
        if expected.len() != params.len() {
            return Err(invalid(format!(
                "expected {} policy tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            match params.by_name(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(invalid(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(invalid(format!("missing parameter {name}"))),
            }
        }
        if !params.all_finite() {
            return Err(Error::NonFinite("policy parameters".into()));
        }
        let id = |n: &str| params.id(n).expect("validated above");
        let gru = |p: &str| GruIds {
            w: id(&format!("{p}.w")),
            u: id(&format!("{p}.u")),
            b: id(&format!("{p}.b")),
        };
        let attention = match config.attention {
            AttentionKind::Additive => AttentionIds::Additive {
                w_dec: id("att.w_dec"),
                w_enc: id("att.w_enc"),
                v: id("att.v"),
            },
            AttentionKind::Multiplicative => AttentionIds::Multiplicative {
                bilinear: id("att.bilinear"),
            },
        };
        let ids = PolicyIds {
            src_embed: id("src_embed"),
            trg_embed: id("trg_embed"),
            enc_fwd: gru("enc_fwd"),
            enc_bwd: gru("enc_bwd"),
            init_w: id("init.w"),
            init_b: id("init.b"),
            attention,
            dec: gru("dec"),
            out_w: id("out.w"),
            out_b: id("out.b"),
        };
        Ok(Policy {
            config,
            src_vocab,
            trg_vocab,
            params,
            ids,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn src_vocab(&self) -> &Vocabulary {
        &self.src_vocab
    }

    pub fn trg_vocab(&self) -> &Vocabulary {
        &self.trg_vocab
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn src_embed_id(&self) -> ParamId {
        self.ids.src_embed
    }

    pub fn trg_embed_id(&self) -> ParamId {
        self.ids.trg_embed
    }

    /// Number of output classes (target vocabulary minus padding and begin).
    pub fn num_outputs(&self) -> usize {
        self.trg_vocab.len() - OUTPUT_OFFSET
    }

    /// Output-layer column of a producible target token.
    pub fn output_index(&self, id: TokenId) -> Result<usize> {
        if id >= self.trg_vocab.len() {
            return Err(Error::OutOfVocabulary {
                id,
                size: self.trg_vocab.len(),
            });
        }
        if id < OUTPUT_OFFSET {
            return Err(invalid(format!("token id {id} is not producible")));
        }
        Ok(id - OUTPUT_OFFSET)
    }

    pub fn output_token(&self, index: usize) -> TokenId {
        index + OUTPUT_OFFSET
    }

    fn gru_step(
        &self,
        g: &mut Graph<'_>,
        gates_x: Var,
        h: Var,
        ids: GruIds,
    ) -> Result<Var> {
        let h_size = self.config.hidden_size;
        let u = g.param(ids.u);
        let hu = g.matmul(h, u)?;
        let gx_zr = g.slice_cols(gates_x, 0, 2 * h_size)?;
        let hu_zr = g.slice_cols(hu, 0, 2 * h_size)?;
        let zr = g.add(gx_zr, hu_zr)?;
        let zr = g.sigmoid(zr)?;
        let z = g.slice_cols(zr, 0, h_size)?;
        let r = g.slice_cols(zr, h_size, h_size)?;
        let gx_n = g.slice_cols(gates_x, 2 * h_size, h_size)?;
        let hu_n = g.slice_cols(hu, 2 * h_size, h_size)?;
        let rh = g.mul(r, hu_n)?;
        let n = g.add(gx_n, rh)?;
        let n = g.tanh(n)?;
        // h' = (1 - z) * n + z * h = n + z * (h - n)
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        Ok(g.add(n, zd)?)
    }

    fn run_gru(
        &self,
        g: &mut Graph<'_>,
        inputs: Var,
        len: usize,
        ids: GruIds,
        reverse: bool,
    ) -> Result<Vec<Var>> {
        let w = g.param(ids.w);
        let b = g.param(ids.b);
        let xw = g.matmul(inputs, w)?;
        let xw = g.add(xw, b)?;
        let mut h = g.constant(Tensor::zeros(&[1, self.config.hidden_size]))?;
        let mut states = vec![h; len];
        let order: Vec<usize> = if reverse {
            (0..len).rev().collect()
        } else {
            (0..len).collect()
        };
        for t in order {
            let gx = g.slice_rows(xw, t, 1)?;
            h = self.gru_step(g, gx, h, ids)?;
            states[t] = h;
        }
        Ok(states)
    }

    /// Runs the bidirectional encoder.
    pub fn encode(
        &self,
        g: &mut Graph<'_>,
        x: &[TokenId],
        mut drop: Option<&mut Dropout>,
    ) -> Result<Encoded> {
        if x.is_empty() {
            return Err(Error::EmptySequence);
        }
        self.src_vocab.check(x)?;
        let table = g.param(self.ids.src_embed);
        let emb = g.embedding(table, x)?;
        let emb = maybe_drop(&mut drop, g, emb)?;
        let fwd = self.run_gru(g, emb, x.len(), self.ids.enc_fwd, false)?;
        let bwd = self.run_gru(g, emb, x.len(), self.ids.enc_bwd, true)?;
        let fwd_m = g.concat(&fwd, 0)?;
        let bwd_m = g.concat(&bwd, 0)?;
        let annotations = g.concat(&[fwd_m, bwd_m], 1)?;

        let init_w = g.param(self.ids.init_w);
        let init_b = g.param(self.ids.init_b);
        let s0 = g.matmul(bwd[0], init_w)?;
        let s0 = g.add(s0, init_b)?;
        let init_state = g.tanh(s0)?;

        let (keys, annotations_t) = match self.ids.attention {
            AttentionIds::Additive { w_enc, .. } => {
                let w = g.param(w_enc);
                (Some(g.matmul(annotations, w)?), None)
            }
            AttentionIds::Multiplicative { .. } => (None, Some(g.transpose(annotations)?)),
        };
        Ok(Encoded {
            annotations,
            keys,
            annotations_t,
            init_state,
        })
    }

    /// Attention weights `[1, T]` for decoder state `s`.
    fn attend(&self, g: &mut Graph<'_>, enc: &Encoded, s: Var) -> Result<Var> {
        let scores = match self.ids.attention {
            AttentionIds::Additive { w_dec, v, .. } => {
                let keys = enc.keys.expect("additive attention keys");
                let wd = g.param(w_dec);
                let q = g.matmul(s, wd)?;
                let e = g.add(keys, q)?;
                let e = g.tanh(e)?;
                let vv = g.param(v);
                let e = g.matmul(e, vv)?;
                let t = g.value(e).dims2()?.0;
                g.reshape(e, 1, t)?
            }
            AttentionIds::Multiplicative { bilinear } => {
                let w = g.param(bilinear);
                let q = g.matmul(s, w)?;
                g.matmul(q, enc.annotations_t.expect("transposed annotations"))?
            }
        };
        Ok(g.softmax(scores)?)
    }

    /// One decoder step from state `state` after emitting `prev`. Returns the
    /// `[1, num_outputs]` log-probabilities of the next token and the new state.
    pub fn step(
        &self,
        g: &mut Graph<'_>,
        enc: &Encoded,
        state: Var,
        prev: TokenId,
        mut drop: Option<&mut Dropout>,
    ) -> Result<(Var, Var)> {
        let att = self.attend(g, enc, state)?;
        let context = g.matmul(att, enc.annotations)?;
        let table = g.param(self.ids.trg_embed);
        let emb = g.embedding(table, &[prev])?;
        let emb = maybe_drop(&mut drop, g, emb)?;
        let input = g.concat(&[emb, context], 1)?;
        let input = maybe_drop(&mut drop, g, input)?;
        let w = g.param(self.ids.dec.w);
        let b = g.param(self.ids.dec.b);
        let gx = g.matmul(input, w)?;
        let gx = g.add(gx, b)?;
        let new_state = self.gru_step(g, gx, state, self.ids.dec)?;
        let features = g.concat(&[new_state, context], 1)?;
        let ow = g.param(self.ids.out_w);
        let ob = g.param(self.ids.out_b);
        let logits = g.matmul(features, ow)?;
        let logits = g.add(logits, ob)?;
        Ok((g.log_softmax(logits)?, new_state))
    }

    /// Differentiable log-probability of `y` given `x`, scoring exactly the
    /// tokens in `y` (append [`EOS`] to score a complete sentence).
    pub fn score(
        &self,
        g: &mut Graph<'_>,
        x: &[TokenId],
        y: &[TokenId],
        mut drop: Option<&mut Dropout>,
    ) -> Result<TokenScores> {
        let enc = self.encode(g, x, drop.as_deref_mut())?;
        self.score_encoded(g, &enc, y, drop)
    }

    /// Like [`Policy::score`] but reuses an existing encoding, so several
    /// candidates for one source share the encoder computation.
    pub fn score_encoded(
        &self,
        g: &mut Graph<'_>,
        enc: &Encoded,
        y: &[TokenId],
        mut drop: Option<&mut Dropout>,
    ) -> Result<TokenScores> {
        if y.is_empty() {
            return Err(Error::EmptySequence);
        }
        let out_idx = y
            .iter()
            .map(|&t| self.output_index(t))
            .collect::<Result<Vec<_>>>()?;
        let mut state = enc.init_state;
        let mut prev = BOS;
        let mut per_token = Vec::with_capacity(y.len());
        for (&tok, &o) in y.iter().zip(&out_idx) {
            let (logp, s) = self.step(g, enc, state, prev, drop.as_deref_mut())?;
            per_token.push(g.pick(logp, 0, o)?);
            state = s;
            prev = tok;
        }
        let row = g.concat(&per_token, 1)?;
        let total = g.sum(row)?;
        Ok(TokenScores { per_token, total })
    }

    /// Whether `y` is a complete sentence under the length cap.
    pub fn is_finished(&self, y: &[TokenId]) -> bool {
        y.last() == Some(&EOS)
    }
}

fn param_shapes(config: &PolicyConfig, src_v: usize, trg_v: usize) -> Vec<(String, Vec<usize>)> {
    let (e, h, a) = (config.embed_size, config.hidden_size, config.attention_size);
    let out = trg_v - OUTPUT_OFFSET;
    let mut shapes = vec![
        ("src_embed".to_string(), vec![src_v, e]),
        ("trg_embed".to_string(), vec![trg_v, e]),
    ];
    for p in ["enc_fwd", "enc_bwd"] {
        shapes.push((format!("{p}.w"), vec![e, 3 * h]));
        shapes.push((format!("{p}.u"), vec![h, 3 * h]));
        shapes.push((format!("{p}.b"), vec![1, 3 * h]));
    }
    shapes.push(("init.w".into(), vec![h, h]));
    shapes.push(("init.b".into(), vec![1, h]));
    match config.attention {
        AttentionKind::Additive => {
            shapes.push(("att.w_dec".into(), vec![h, a]));
            shapes.push(("att.w_enc".into(), vec![2 * h, a]));
            shapes.push(("att.v".into(), vec![a, 1]));
        }
        AttentionKind::Multiplicative => {
            shapes.push(("att.bilinear".into(), vec![h, 2 * h]));
        }
    }
    shapes.push(("dec.w".into(), vec![e + 2 * h, 3 * h]));
    shapes.push(("dec.u".into(), vec![h, 3 * h]));
    shapes.push(("dec.b".into(), vec![1, 3 * h]));
    shapes.push(("out.w".into(), vec![3 * h, out]));
    shapes.push(("out.b".into(), vec![1, out]));
    shapes
}
