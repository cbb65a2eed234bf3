//! Answer prediction: a one-hidden-layer MLP over the attended visual vector
//! and the question vector, followed by a softmax over the answer vocabulary.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::{self, Tensor};
use crate::train::{ParamId, ParameterStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassifierDims {
    /// Length of the attended visual vector.
    pub visual: usize,
    /// Length of the question vector.
    pub question: usize,
    pub hidden: usize,
    pub answers: usize,
}

#[derive(Clone, Debug)]
pub struct ClassifierParams {
    pub dims: ClassifierDims,
    pub w_v: ParamId,
    pub w_q: ParamId,
    pub b_h: ParamId,
    pub w_h: ParamId,
    pub b_p: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierNodes {
    pub w_v: NodeId,
    pub w_q: NodeId,
    pub b_h: NodeId,
    pub w_h: NodeId,
    pub b_p: NodeId,
}

impl ClassifierParams {
    pub fn init<R: Rng>(
        store: &mut ParameterStore,
        dims: ClassifierDims,
        rng: &mut R,
    ) -> Result<Self> {
        let ClassifierDims {
            visual,
            question,
            hidden,
            answers,
        } = dims;
        Ok(ClassifierParams {
            dims,
            w_v: store.register_uniform("classifier.w_v", &[hidden, visual], rng)?,
            w_q: store.register_uniform("classifier.w_q", &[hidden, question], rng)?,
            b_h: store.register_zeros("classifier.b_h", &[hidden])?,
            w_h: store.register_uniform("classifier.w_h", &[answers, hidden], rng)?,
            b_p: store.register_zeros("classifier.b_p", &[answers])?,
        })
    }

    pub fn all(&self) -> [ParamId; 5] {
        [self.w_v, self.w_q, self.b_h, self.w_h, self.b_p]
    }

    pub fn bind<'a>(&self, tape: &mut Tape<'a>, store: &'a ParameterStore) -> ClassifierNodes {
        let mut p = |id: ParamId| tape.param(id, store.value(id));
        ClassifierNodes {
            w_v: p(self.w_v),
            w_q: p(self.w_q),
            b_h: p(self.b_h),
            w_h: p(self.w_h),
            b_p: p(self.b_p),
        }
    }
}

/// Builds `W_h · (mask ∘ tanh(W_v v + W_q q + b_h)) + b_p` and returns the
/// pre-softmax scores. `mask` is an inverted-dropout mask or `None`.
pub fn logits_graph(
    tape: &mut Tape<'_>,
    p: &ClassifierNodes,
    attended: NodeId,
    q: NodeId,
    mask: Option<NodeId>,
) -> Result<NodeId> {
    let hv = tape.affine(attended, p.w_v, Some(p.b_h))?;
    let hq = tape.affine(q, p.w_q, None)?;
    let pre = tape.add(hv, hq)?;
    let mut h = tape.tanh(pre)?;
    if let Some(mask) = mask {
        h = tape.mul(h, mask)?;
    }
    tape.affine(h, p.w_h, Some(p.b_p))
}

/// Probability vector over answers, with the scores it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct AnswerDistribution {
    logits: Vec<f64>,
    probs: Vec<f64>,
    argmax: usize,
}

impl AnswerDistribution {
    pub fn from_logits(logits: Vec<f64>) -> Result<Self> {
        let probs = tensor::softmax_slice(&logits)?;
        let argmax = argmax(&logits);
        Ok(AnswerDistribution {
            logits,
            probs,
            argmax,
        })
    }

    /// From a probability vector directly; scores are taken as `ln p`.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|&p| !(p > 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(
                "answer distribution is not a probability vector".into(),
            ));
        }
        let logits: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        let argmax = argmax(&logits);
        Ok(AnswerDistribution {
            logits,
            probs,
            argmax,
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Most probable answer; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        self.argmax
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode prediction (no dropout).
pub fn predict_answer(
    store: &ParameterStore,
    params: &ClassifierParams,
    attended: &Tensor,
    q: &Tensor,
) -> Result<AnswerDistribution> {
    let d = params.dims;
    if attended.shape() != [d.visual] {
        return Err(Error::shape(
            "predict_answer",
            attended.shape(),
            &[d.visual],
        ));
    }
    if q.shape() != [d.question] {
        return Err(Error::shape("predict_answer", q.shape(), &[d.question]));
    }
    let mut tape = Tape::new();
    let nodes = params.bind(&mut tape, store);
    let v = tape.constant_ref(attended);
    let q = tape.constant_ref(q);
    let logits = logits_graph(&mut tape, &nodes, v, q, None)?;
    AnswerDistribution::from_logits(tape.value(logits).data().to_vec())
}

/// `-ln p[label]`, evaluated from the scores with log-sum-exp.
pub fn cross_entropy(p: &AnswerDistribution, label: usize) -> Result<f64> {
    if label >= p.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} answers",
            p.len()
        )));
    }
    Ok((tensor::log_sum_exp(&p.logits) - p.logits[label]).max(0.0))
}
