//! The full model: question encoder, one of the four attention pipelines, and
//! the answer classifier, sharing a single parameter store.

use std::collections::HashMap;

use rand::Rng;

use crate::attention::{
    pipeline_graph, AttentionDims, ChannelAttentionParams, PipelineNodes, RegionFeatureMap,
    SpatialAttentionParams, SpatialTanh, Variant,
};
use crate::classifier::{logits_graph, AnswerDistribution, ClassifierDims, ClassifierParams};
use crate::encoder::{
    encode_question_graph, EncoderDims, EncoderParams, QuestionTokens, DEFAULT_MAX_QUESTION_LEN,
};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tape::{Gradients, NodeId, OpKind, Tape};
use crate::tensor::Tensor;
use crate::train::ParameterStore;

/// Layer sizes. Region count is not a model dimension: any `K ≥ 1` works.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub attention: usize,
    pub fused: usize,
    pub channels: usize,
    pub answers: usize,
}

impl ModelDims {
    /// Laptop-sized layers.
    pub fn desk(vocab: usize, channels: usize, answers: usize) -> Self {
        ModelDims {
            vocab,
            embed: 16,
            hidden: 64,
            attention: 32,
            fused: 64,
            channels,
            answers,
        }
    }

    /// Published layer sizes: 300-d embeddings, 1024 everywhere else,
    /// 2048-channel regions and 2000 answers.
    pub fn full(vocab: usize) -> Self {
        ModelDims {
            vocab,
            embed: 300,
            hidden: 1024,
            attention: 1024,
            fused: 1024,
            channels: 2048,
            answers: 2000,
        }
    }

    fn validate(&self) -> Result<()> {
        let all = [
            ("vocab", self.vocab),
            ("embed", self.embed),
            ("hidden", self.hidden),
            ("attention", self.attention),
            ("fused", self.fused),
            ("channels", self.channels),
            ("answers", self.answers),
        ];
        match all.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(Error::invalid(format!(
                "model dimension `{name}` must be positive"
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub dims: ModelDims,
    pub variant: Variant,
    pub spatial_tanh: SpatialTanh,
    pub max_question_len: usize,
}

impl ModelConfig {
    pub fn new(dims: ModelDims, variant: Variant) -> Self {
        ModelConfig {
            dims,
            variant,
            spatial_tanh: SpatialTanh::default(),
            max_question_len: DEFAULT_MAX_QUESTION_LEN,
        }
    }
}

/// One training or evaluation example, borrowed from a dataset.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'d> {
    pub features: &'d RegionFeatureMap,
    pub tokens: &'d QuestionTokens,
    pub label: usize,
}

/// Mean loss over a batch and its gradient.
#[derive(Debug)]
pub struct BatchOutput {
    pub loss: f64,
    pub grads: Gradients,
    /// Predicted answer per example.
    pub predictions: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct CvaModel {
    pub config: ModelConfig,
    pub store: ParameterStore,
    pub encoder: EncoderParams,
    pub channel: Option<ChannelAttentionParams>,
    pub spatial: Option<SpatialAttentionParams>,
    pub classifier: ClassifierParams,
}

struct Bound {
    encoder: crate::encoder::EncoderNodes,
    channel: Option<crate::attention::ChannelNodes>,
    spatial: Option<crate::attention::SpatialNodes>,
    classifier: crate::classifier::ClassifierNodes,
}

impl CvaModel {
    /// Initializes every parameter from the `init` stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_rng(config, &mut rng::stream(seed, Stream::Init, 0))
    }

    pub fn with_rng<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.dims.validate()?;
        let d = config.dims;
        let mut store = ParameterStore::new();
        let encoder = EncoderParams::init(
            &mut store,
            EncoderDims {
                vocab: d.vocab,
                embed: d.embed,
                hidden: d.hidden,
            },
            rng,
        )?;
        let att = AttentionDims {
            channels: d.channels,
            question: d.hidden,
            hidden: d.attention,
        };
        let channel = config
            .variant
            .uses_channel()
            .then(|| ChannelAttentionParams::init(&mut store, att, rng))
            .transpose()?;
        let spatial = config
            .variant
            .uses_spatial()
            .then(|| SpatialAttentionParams::init(&mut store, att, config.spatial_tanh, rng))
            .transpose()?;
        let classifier = ClassifierParams::init(
            &mut store,
            ClassifierDims {
                visual: d.channels,
                question: d.hidden,
                hidden: d.fused,
                answers: d.answers,
            },
            rng,
        )?;
        Ok(CvaModel {
            config,
            store,
            encoder,
            channel,
            spatial,
            classifier,
        })
    }

    /// Replaces all parameters (and optimizer state) with `loaded`, which
    /// must hold exactly this architecture's names and shapes.
    pub fn load_store(&mut self, loaded: ParameterStore) -> Result<()> {
        self.store.check_compatible(&loaded)?;
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let name = self.store.entry(id).name.clone();
            let src = loaded.entry(loaded.id(&name).expect("checked above"));
            *self.store.entry_mut(id) = src.clone();
        }
        self.store.step = loaded.step;
        Ok(())
    }

    fn bind<'a>(&self, tape: &mut Tape<'a>, store: &'a ParameterStore) -> Bound {
        Bound {
            encoder: self.encoder.bind(tape, store),
            channel: self.channel.as_ref().map(|c| c.bind(tape, store)),
            spatial: self.spatial.as_ref().map(|s| s.bind(tape, store)),
            classifier: self.classifier.bind(tape, store),
        }
    }

    fn check_sample(&self, s: &Sample<'_>) -> Result<()> {
        let d = self.config.dims;
        if s.features.channels() != d.channels {
            return Err(Error::shape(
                "region map",
                s.features.tensor().shape(),
                &[s.features.regions(), d.channels],
            ));
        }
        if s.tokens.ids().iter().any(|&t| t >= d.vocab) {
            return Err(Error::invalid(
                "question token outside the model vocabulary",
            ));
        }
        Ok(())
    }

    /// Records the forward pass of every sample on `tape`, encoding each
    /// distinct question once. Returns the logits node per sample.
    fn record<'a>(
        &'a self,
        store: &'a ParameterStore,
        tape: &mut Tape<'a>,
        samples: &[Sample<'a>],
        masks: Option<&'a [Tensor]>,
    ) -> Result<Vec<(NodeId, PipelineNodes)>> {
        let b = self.bind(tape, store);
        let mut questions: HashMap<&QuestionTokens, NodeId> = HashMap::new();
        let mut out = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            self.check_sample(s)?;
            let q = match questions.get(s.tokens) {
                Some(&q) => q,
                None => {
                    let q = encode_question_graph(tape, &b.encoder, s.tokens)?;
                    questions.insert(s.tokens, q);
                    q
                }
            };
            let v = tape.constant_ref(s.features.tensor());
            let att = pipeline_graph(
                tape,
                self.config.variant,
                v,
                q,
                b.channel.as_ref(),
                b.spatial.as_ref(),
            )?;
            let mask = masks.map(|m| tape.constant_ref(&m[i]));
            let logits = logits_graph(tape, &b.classifier, att.attended, q, mask)?;
            out.push((logits, att));
        }
        Ok(out)
    }

    /// Mean cross-entropy over `samples` and its gradient with respect to
    /// every parameter. `masks`, if given, holds one inverted-dropout mask of
    /// length `fused` per sample.
    pub fn loss_and_grads(
        &self,
        samples: &[Sample<'_>],
        masks: Option<&[Tensor]>,
        fault: Option<OpKind>,
    ) -> Result<BatchOutput> {
        if samples.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        if let Some(m) = masks {
            if m.len() != samples.len() {
                return Err(Error::shape("dropout masks", &[m.len()], &[samples.len()]));
            }
        }
        let mut tape = Tape::new();
        if let Some(kind) = fault {
            tape.inject_backward_fault(kind);
        }
        let nodes = self.record(&self.store, &mut tape, samples, masks)?;
        let mut losses = Vec::with_capacity(nodes.len());
        let mut predictions = Vec::with_capacity(nodes.len());
        for ((logits, _), s) in nodes.iter().zip(samples) {
            losses.push(tape.cross_entropy(*logits, s.label)?);
            predictions.push(argmax(tape.value(*logits).data()));
        }
        let loss = tape.mean(&losses)?;
        let grads = tape.backward(loss)?;
        Ok(BatchOutput {
            loss: tape.value(loss).data()[0],
            grads,
            predictions,
        })
    }

    /// Mean cross-entropy without gradients (dropout off).
    pub fn loss(&self, samples: &[Sample<'_>]) -> Result<f64> {
        self.loss_with(&self.store, samples)
    }

    /// As [`loss`](Self::loss) but reading parameters from `store`, which
    /// must have this model's layout.
    pub fn loss_with(&self, store: &ParameterStore, samples: &[Sample<'_>]) -> Result<f64> {
        let mut tape = Tape::new();
        let nodes = self.record(store, &mut tape, samples, None)?;
        let mut losses = Vec::with_capacity(nodes.len());
        for ((logits, _), s) in nodes.iter().zip(samples) {
            losses.push(tape.cross_entropy(*logits, s.label)?);
        }
        let loss = tape.mean(&losses)?;
        Ok(tape.value(loss).data()[0])
    }

    /// Eval-mode answer distributions.
    pub fn predict(&self, samples: &[Sample<'_>]) -> Result<Vec<AnswerDistribution>> {
        let mut tape = Tape::new();
        let nodes = self.record(&self.store, &mut tape, samples, None)?;
        nodes
            .iter()
            .map(|(logits, _)| AnswerDistribution::from_logits(tape.value(*logits).data().to_vec()))
            .collect()
    }

    /// Eval-mode prediction of one sample with its attention weights.
    pub fn inspect(&self, sample: Sample<'_>) -> Result<Inspection> {
        let mut tape = Tape::new();
        let nodes = self.record(&self.store, &mut tape, &[sample], None)?;
        let (logits, att) = nodes[0];
        let vec_of = |n: Option<NodeId>| n.map(|n| tape.value(n).data().to_vec());
        Ok(Inspection {
            answer: AnswerDistribution::from_logits(tape.value(logits).data().to_vec())?,
            attended: tape.value(att.attended).clone(),
            beta: vec_of(att.beta),
            eta: vec_of(att.eta),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Inspection {
    pub answer: AnswerDistribution,
    pub attended: Tensor,
    pub beta: Option<Vec<f64>>,
    pub eta: Option<Vec<f64>>,
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

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(variant: Variant) -> CvaModel {
        let dims = ModelDims {
            vocab: 6,
            embed: 3,
            hidden: 4,
            attention: 3,
            fused: 5,
            channels: 4,
            answers: 3,
        };
        CvaModel::new(ModelConfig::new(dims, variant), 1).unwrap()
    }

    #[test]
    fn unused_stages_have_no_parameters() {
        assert!(tiny(Variant::Ca).spatial.is_none());
        assert!(tiny(Variant::Ra).channel.is_none());
        let full = tiny(Variant::Cva);
        assert!(full.channel.is_some() && full.spatial.is_some());
        assert!(full.store.id("spatial.w_vo").is_some());
        assert!(tiny(Variant::Ca).store.id("spatial.w_vo").is_none());
    }

    #[test]
    fn batched_loss_is_mean_of_single_losses() {
        let m = tiny(Variant::CvaV);
        let v1 =
            RegionFeatureMap::from_rows(&[vec![0.1, 0.2, -0.3, 0.4], vec![1.0, 0.0, 0.5, -1.0]])
                .unwrap();
        let v2 = RegionFeatureMap::from_rows(&[vec![0.7, -0.2, 0.3, 0.0]]).unwrap();
        let q1 = QuestionTokens::new(vec![1, 2], 6, 26).unwrap();
        let q2 = QuestionTokens::new(vec![3], 6, 26).unwrap();
        let s = [
            Sample {
                features: &v1,
                tokens: &q1,
                label: 0,
            },
            Sample {
                features: &v2,
                tokens: &q2,
                label: 2,
            },
            Sample {
                features: &v2,
                tokens: &q1,
                label: 1,
            },
        ];
        let batch = m.loss(&s).unwrap();
        let singles: f64 = s
            .iter()
            .map(|x| m.loss(std::slice::from_ref(x)).unwrap())
            .sum::<f64>()
            / 3.0;
        assert!((batch - singles).abs() < 1e-14);
        let out = m.loss_and_grads(&s, None, None).unwrap();
        assert_eq!(out.loss, batch);
    }

    #[test]
    fn load_store_rejects_other_architecture() {
        let mut a = tiny(Variant::Cva);
        let b = tiny(Variant::Ca);
        assert!(a.load_store(b.store.clone()).is_err());
        let c = tiny(Variant::Cva);
        a.load_store(c.store.clone()).unwrap();
        assert_eq!(a.store, c.store);
    }
}
