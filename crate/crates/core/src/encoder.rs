//! Question encoding: embedding lookup followed by a single-layer GRU whose
//! final hidden state is the question vector.
//!
//! Gate convention: `h_t = z ∘ h_{t-1} + (1 - z) ∘ h̃_t`, so a saturated update
//! gate (z → 1) carries the previous state through unchanged.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::train::{ParamId, ParameterStore};

/// Questions longer than this are rejected unless the limit is raised.
pub const DEFAULT_MAX_QUESTION_LEN: usize = 26;

/// Token ids of one question, in order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct QuestionTokens(Vec<usize>);

impl QuestionTokens {
    pub fn new(ids: Vec<usize>, vocab_size: usize, max_len: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::invalid("question has no tokens"));
        }
        if ids.len() > max_len {
            return Err(Error::invalid(format!(
                "question length {} exceeds the maximum of {max_len}",
                ids.len()
            )));
        }
        if let Some((position, &id)) = ids.iter().enumerate().find(|(_, &id)| id >= vocab_size) {
            return Err(Error::Vocabulary {
                position,
                id,
                size: vocab_size,
            });
        }
        Ok(QuestionTokens(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// The question vector `Q`, i.e. the last GRU hidden state.
#[derive(Clone, Debug, PartialEq)]
pub struct QuestionEncoding(pub Tensor);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
}

/// Handles for the embedding table and GRU weights.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub dims: EncoderDims,
    pub embedding: ParamId,
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_h: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_h: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_h: ParamId,
}

/// The same weights, bound to nodes of one tape.
#[derive(Clone, Copy, Debug)]
pub struct EncoderNodes {
    pub embedding: NodeId,
    pub w_z: NodeId,
    pub w_r: NodeId,
    pub w_h: NodeId,
    pub u_z: NodeId,
    pub u_r: NodeId,
    pub u_h: NodeId,
    pub b_z: NodeId,
    pub b_r: NodeId,
    pub b_h: NodeId,
    hidden: usize,
}

impl EncoderParams {
    pub fn init<R: Rng>(
        store: &mut ParameterStore,
        dims: EncoderDims,
        rng: &mut R,
    ) -> Result<Self> {
        let EncoderDims {
            vocab,
            embed,
            hidden,
        } = dims;
        Ok(EncoderParams {
            dims,
            embedding: store.register_uniform("encoder.embedding", &[vocab, embed], rng)?,
            w_z: store.register_uniform("encoder.w_z", &[hidden, embed], rng)?,
            w_r: store.register_uniform("encoder.w_r", &[hidden, embed], rng)?,
            w_h: store.register_uniform("encoder.w_h", &[hidden, embed], rng)?,
            u_z: store.register_uniform("encoder.u_z", &[hidden, hidden], rng)?,
            u_r: store.register_uniform("encoder.u_r", &[hidden, hidden], rng)?,
            u_h: store.register_uniform("encoder.u_h", &[hidden, hidden], rng)?,
            b_z: store.register_zeros("encoder.b_z", &[hidden])?,
            b_r: store.register_zeros("encoder.b_r", &[hidden])?,
            b_h: store.register_zeros("encoder.b_h", &[hidden])?,
        })
    }

    pub fn all(&self) -> [ParamId; 10] {
        [
            self.embedding,
            self.w_z,
            self.w_r,
            self.w_h,
            self.u_z,
            self.u_r,
            self.u_h,
            self.b_z,
            self.b_r,
            self.b_h,
        ]
    }

    pub fn bind<'a>(&self, tape: &mut Tape<'a>, store: &'a ParameterStore) -> EncoderNodes {
        let mut p = |id: ParamId| tape.param(id, store.value(id));
        EncoderNodes {
            embedding: p(self.embedding),
            w_z: p(self.w_z),
            w_r: p(self.w_r),
            w_h: p(self.w_h),
            u_z: p(self.u_z),
            u_r: p(self.u_r),
            u_h: p(self.u_h),
            b_z: p(self.b_z),
            b_r: p(self.b_r),
            b_h: p(self.b_h),
            hidden: self.dims.hidden,
        }
    }
}

pub fn embed_tokens_graph(
    tape: &mut Tape<'_>,
    p: &EncoderNodes,
    tokens: &QuestionTokens,
) -> Result<Vec<NodeId>> {
    tokens
        .ids()
        .iter()
        .enumerate()
        .map(|(position, &id)| {
            tape.embed(p.embedding, id).map_err(|e| match e {
                Error::Vocabulary { id, size, .. } => Error::Vocabulary { position, id, size },
                other => other,
            })
        })
        .collect()
}

pub fn gru_step_graph(
    tape: &mut Tape<'_>,
    p: &EncoderNodes,
    x: NodeId,
    h_prev: NodeId,
) -> Result<NodeId> {
    let gate = |tape: &mut Tape<'_>, w, u, b| -> Result<NodeId> {
        let wx = tape.affine(x, w, Some(b))?;
        let uh = tape.affine(h_prev, u, None)?;
        let s = tape.add(wx, uh)?;
        tape.sigmoid(s)
    };
    let z = gate(tape, p.w_z, p.u_z, p.b_z)?;
    let r = gate(tape, p.w_r, p.u_r, p.b_r)?;

    let wx = tape.affine(x, p.w_h, Some(p.b_h))?;
    let rh = tape.mul(r, h_prev)?;
    let urh = tape.affine(rh, p.u_h, None)?;
    let pre = tape.add(wx, urh)?;
    let candidate = tape.tanh(pre)?;

    let keep = tape.mul(z, h_prev)?;
    let one_minus_z = tape.scale_shift(z, -1.0, 1.0)?;
    let update = tape.mul(one_minus_z, candidate)?;
    tape.add(keep, update)
}

/// Folds the GRU over the question from a zero initial state.
pub fn encode_question_graph(
    tape: &mut Tape<'_>,
    p: &EncoderNodes,
    tokens: &QuestionTokens,
) -> Result<NodeId> {
    let xs = embed_tokens_graph(tape, p, tokens)?;
    let mut h = tape.constant(Tensor::zeros(&[p.hidden]));
    for x in xs {
        h = gru_step_graph(tape, p, x, h)?;
    }
    Ok(h)
}

pub fn embed_tokens(
    store: &ParameterStore,
    params: &EncoderParams,
    tokens: &QuestionTokens,
) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let nodes = params.bind(&mut tape, store);
    let xs = embed_tokens_graph(&mut tape, &nodes, tokens)?;
    Ok(xs.into_iter().map(|x| tape.value(x).clone()).collect())
}

pub fn gru_step(
    store: &ParameterStore,
    params: &EncoderParams,
    x: &Tensor,
    h_prev: &Tensor,
) -> Result<Tensor> {
    let EncoderDims { embed, hidden, .. } = params.dims;
    if x.shape() != [embed] {
        return Err(Error::shape("gru_step input", x.shape(), &[embed]));
    }
    if h_prev.shape() != [hidden] {
        return Err(Error::shape("gru_step state", h_prev.shape(), &[hidden]));
    }
    let mut tape = Tape::new();
    let nodes = params.bind(&mut tape, store);
    let x = tape.constant(x.clone());
    let h = tape.constant(h_prev.clone());
    let out = gru_step_graph(&mut tape, &nodes, x, h)?;
    Ok(tape.value(out).clone())
}

pub fn encode_question(
    store: &ParameterStore,
    params: &EncoderParams,
    tokens: &QuestionTokens,
) -> Result<QuestionEncoding> {
    let mut tape = Tape::new();
    let nodes = params.bind(&mut tape, store);
    let q = encode_question_graph(&mut tape, &nodes, tokens)?;
    Ok(QuestionEncoding(tape.value(q).clone()))
}

/// Reads `token v_1 … v_E` lines into the embedding rows of known tokens.
/// Unknown tokens are skipped; returns how many rows were overwritten.
pub fn load_pretrained_embeddings(
    path: &Path,
    vocab: &Vocab,
    store: &mut ParameterStore,
    params: &EncoderParams,
) -> Result<usize> {
    let text = fs::read_to_string(path)?;
    let embed = params.dims.embed;
    let mut loaded = 0;
    for (lineno, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: Vec<f64> = fields
            .map(|f| {
                f.parse::<f64>().map_err(|e| Error::Parse {
                    line: lineno + 1,
                    message: format!("bad decimal `{f}`: {e}"),
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != embed {
            return Err(Error::Parse {
                line: lineno + 1,
                message: format!("expected {embed} values, found {}", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line: lineno + 1,
                message: "non-finite embedding value".into(),
            });
        }
        if let Some(id) = vocab.lookup(token) {
            let table = store.value_mut(params.embedding);
            table.data_mut()[id * embed..(id + 1) * embed].copy_from_slice(&values);
            loaded += 1;
        }
    }
    Ok(loaded)
}
