//! Channel attention, region attention, and the four ways of stacking them.
//!
//! Shapes: the region map `V` is `K×D` (one row per object region), the
//! question vector `Q` has length `H`, and both attention blocks project into
//! a hidden space of size `h_a`.
//!
//! Channel attention sees only the per-channel means `ū` of `V`, so it cannot
//! tell regions apart. It scores channel `d` as
//! `w_c · tanh(c_v[d] · c_q) + b_c` with `c_v = w_vc ∘ ū + b_vc` and
//! `c_q = W_qc Q + b_qc`, i.e. each row of the `D×h_a` outer product is
//! reduced to one score. Region attention scores each row of its input map
//! against the question and the aggregate keeps the `1/K` prefactor even
//! though the weights already sum to one.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::{self, Tensor};
use crate::train::{ParamId, ParameterStore};

/// `K×D` object-region features, one region per row.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionFeatureMap(Tensor);

impl RegionFeatureMap {
    pub fn new(features: Tensor) -> Result<Self> {
        features.as_matrix("region feature map")?;
        if !features.is_finite() {
            return Err(Error::NonFinite("region feature map".into()));
        }
        Ok(RegionFeatureMap(features))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?)
    }

    pub fn regions(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Rows reordered so that row `i` of the result is row `perm[i]` here.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.regions() {
            return Err(Error::shape("permuted", &[self.regions()], &[perm.len()]));
        }
        let rows: Vec<Vec<f64>> = perm.iter().map(|&k| self.0.row(k).to_vec()).collect();
        Self::from_rows(&rows)
    }
}

fn probability_vector(p: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    let sum: f64 = p.iter().sum();
    if p.is_empty() || p.iter().any(|&x| !(x > 0.0)) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Validation(format!(
            "{what} is not a probability vector"
        )));
    }
    Ok(p)
}

/// β: one weight per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelWeights(Vec<f64>);

impl ChannelWeights {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        probability_vector(p, "channel weights").map(ChannelWeights)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// η: one weight per region.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialWeights(Vec<f64>);

impl SpatialWeights {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        probability_vector(p, "spatial weights").map(SpatialWeights)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Where the region-attention nonlinearity sits relative to the question term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum SpatialTanh {
    /// `tanh(W_vo v_k + b_vo + W_qo Q + b_qo)`.
    #[default]
    Joint,
    /// `tanh(W_vo v_k + b_vo) + (W_qo Q + b_qo)`. The question term is the
    /// same for every region, so it cancels in the softmax and the weights do
    /// not depend on the question.
    Visual,
}

impl SpatialTanh {
    pub fn as_str(self) -> &'static str {
        match self {
            SpatialTanh::Joint => "joint",
            SpatialTanh::Visual => "visual",
        }
    }
}

impl FromStr for SpatialTanh {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(SpatialTanh::Joint),
            "visual" => Ok(SpatialTanh::Visual),
            _ => Err(Error::invalid(format!(
                "unknown spatial tanh placement `{s}` (expected joint or visual)"
            ))),
        }
    }
}

/// Which attention stages run, and in what order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Channel attention, then the plain region mean.
    Ca,
    /// Region attention only.
    Ra,
    /// Channel attention, then region attention.
    Cva,
    /// Region attention, then channel attention.
    CvaV,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Ca, Variant::Ra, Variant::Cva, Variant::CvaV];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ca => "ca",
            Variant::Ra => "ra",
            Variant::Cva => "cva",
            Variant::CvaV => "cva-v",
        }
    }

    /// Row label used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Ca => "CA",
            Variant::Ra => "RA",
            Variant::Cva => "CVA",
            Variant::CvaV => "R-CVA",
        }
    }

    pub fn uses_channel(self) -> bool {
        !matches!(self, Variant::Ra)
    }

    pub fn uses_spatial(self) -> bool {
        !matches!(self, Variant::Ca)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ca" => Ok(Variant::Ca),
            "ra" => Ok(Variant::Ra),
            "cva" => Ok(Variant::Cva),
            "cva-v" | "r-cva" | "rcva" => Ok(Variant::CvaV),
            _ => Err(Error::invalid(format!(
                "unknown variant `{s}` (valid: ca, ra, cva, cva-v)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionDims {
    pub channels: usize,
    pub question: usize,
    pub hidden: usize,
}

#[derive(Clone, Debug)]
pub struct ChannelAttentionParams {
    pub dims: AttentionDims,
    pub w_vc: ParamId,
    pub b_vc: ParamId,
    pub w_qc: ParamId,
    pub b_qc: ParamId,
    pub w_c: ParamId,
    pub b_c: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct ChannelNodes {
    pub w_vc: NodeId,
    pub b_vc: NodeId,
    pub w_qc: NodeId,
    pub b_qc: NodeId,
    pub w_c: NodeId,
    pub b_c: NodeId,
}

impl ChannelAttentionParams {
    pub fn init<R: Rng>(
        store: &mut ParameterStore,
        dims: AttentionDims,
        rng: &mut R,
    ) -> Result<Self> {
        let AttentionDims {
            channels,
            question,
            hidden,
        } = dims;
        Ok(ChannelAttentionParams {
            dims,
            // diagonal D×D map stored as its diagonal
            w_vc: store.register_uniform_fans(
                "channel.w_vc",
                &[channels],
                channels,
                channels,
                rng,
            )?,
            b_vc: store.register_zeros("channel.b_vc", &[channels])?,
            w_qc: store.register_uniform("channel.w_qc", &[hidden, question], rng)?,
            b_qc: store.register_zeros("channel.b_qc", &[hidden])?,
            w_c: store.register_uniform("channel.w_c", &[1, hidden], rng)?,
            b_c: store.register_zeros("channel.b_c", &[1])?,
        })
    }

    pub fn all(&self) -> [ParamId; 6] {
        [
            self.w_vc, self.b_vc, self.w_qc, self.b_qc, self.w_c, self.b_c,
        ]
    }

    pub fn bind<'a>(&self, tape: &mut Tape<'a>, store: &'a ParameterStore) -> ChannelNodes {
        let mut p = |id: ParamId| tape.param(id, store.value(id));
        ChannelNodes {
            w_vc: p(self.w_vc),
            b_vc: p(self.b_vc),
            w_qc: p(self.w_qc),
            b_qc: p(self.b_qc),
            w_c: p(self.w_c),
            b_c: p(self.b_c),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SpatialAttentionParams {
    pub dims: AttentionDims,
    pub form: SpatialTanh,
    pub w_vo: ParamId,
    pub b_vo: ParamId,
    pub w_qo: ParamId,
    pub b_qo: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct SpatialNodes {
    pub form: SpatialTanh,
    pub w_vo: NodeId,
    pub b_vo: NodeId,
    pub w_qo: NodeId,
    pub b_qo: NodeId,
    pub w_o: NodeId,
    pub b_o: NodeId,
}

impl SpatialAttentionParams {
    pub fn init<R: Rng>(
        store: &mut ParameterStore,
        dims: AttentionDims,
        form: SpatialTanh,
        rng: &mut R,
    ) -> Result<Self> {
        let AttentionDims {
            channels,
            question,
            hidden,
        } = dims;
        Ok(SpatialAttentionParams {
            dims,
            form,
            w_vo: store.register_uniform("spatial.w_vo", &[hidden, channels], rng)?,
            b_vo: store.register_zeros("spatial.b_vo", &[hidden])?,
            w_qo: store.register_uniform("spatial.w_qo", &[hidden, question], rng)?,
            b_qo: store.register_zeros("spatial.b_qo", &[hidden])?,
            w_o: store.register_uniform("spatial.w_o", &[1, hidden], rng)?,
            b_o: store.register_zeros("spatial.b_o", &[1])?,
        })
    }

    pub fn all(&self) -> [ParamId; 6] {
        [
            self.w_vo, self.b_vo, self.w_qo, self.b_qo, self.w_o, self.b_o,
        ]
    }

    pub fn bind<'a>(&self, tape: &mut Tape<'a>, store: &'a ParameterStore) -> SpatialNodes {
        let mut p = |id: ParamId| tape.param(id, store.value(id));
        SpatialNodes {
            form: self.form,
            w_vo: p(self.w_vo),
            b_vo: p(self.b_vo),
            w_qo: p(self.w_qo),
            b_qo: p(self.b_qo),
            w_o: p(self.w_o),
            b_o: p(self.b_o),
        }
    }
}

// ---- graph builders -------------------------------------------------------

pub fn channel_attention_graph(
    tape: &mut Tape<'_>,
    u_bar: NodeId,
    q: NodeId,
    p: &ChannelNodes,
) -> Result<NodeId> {
    let scaled = tape.mul(p.w_vc, u_bar)?;
    let c_v = tape.add(scaled, p.b_vc)?;
    let c_q = tape.affine(q, p.w_qc, Some(p.b_qc))?;
    let outer = tape.outer(c_v, c_q)?;
    let b = tape.tanh(outer)?;
    let scores = tape.affine(b, p.w_c, Some(p.b_c))?;
    let d = tape.value(scores).rows();
    let scores = tape.reshape(scores, &[d])?;
    tape.softmax(scores)
}

pub fn spatial_attention_graph(
    tape: &mut Tape<'_>,
    map: NodeId,
    q: NodeId,
    p: &SpatialNodes,
) -> Result<NodeId> {
    let visual = tape.affine(map, p.w_vo, Some(p.b_vo))?;
    let question = tape.affine(q, p.w_qo, Some(p.b_qo))?;
    let a = match p.form {
        SpatialTanh::Joint => {
            let sum = tape.add_rowwise(visual, question)?;
            tape.tanh(sum)?
        }
        SpatialTanh::Visual => {
            let squashed = tape.tanh(visual)?;
            tape.add_rowwise(squashed, question)?
        }
    };
    let scores = tape.affine(a, p.w_o, Some(p.b_o))?;
    let k = tape.value(scores).rows();
    let scores = tape.reshape(scores, &[k])?;
    tape.softmax(scores)
}

/// `(1/K) Σ_k η_k · map[k]`.
pub fn apply_spatial_weights_graph(
    tape: &mut Tape<'_>,
    eta: NodeId,
    map: NodeId,
) -> Result<NodeId> {
    let k = tape.value(map).rows();
    let sum = tape.weighted_sum_rows(map, eta)?;
    tape.scale_shift(sum, 1.0 / k as f64, 0.0)
}

/// Node ids produced by one pipeline run.
#[derive(Clone, Copy, Debug)]
pub struct PipelineNodes {
    pub attended: NodeId,
    pub beta: Option<NodeId>,
    pub eta: Option<NodeId>,
}

fn need<T: Copy>(p: Option<&T>, what: &str, variant: Variant) -> Result<T> {
    p.copied().ok_or_else(|| {
        Error::invalid(format!(
            "variant {variant} needs {what} attention parameters"
        ))
    })
}

/// Builds the attention stage of `variant` over region map `v` and question
/// `q`, producing a length-`D` attended vector.
pub fn pipeline_graph(
    tape: &mut Tape<'_>,
    variant: Variant,
    v: NodeId,
    q: NodeId,
    channel: Option<&ChannelNodes>,
    spatial: Option<&SpatialNodes>,
) -> Result<PipelineNodes> {
    match variant {
        Variant::Ca => {
            let c = need(channel, "channel", variant)?;
            let u_bar = tape.mean_rows(v)?;
            let beta = channel_attention_graph(tape, u_bar, q, &c)?;
            let vc = tape.mul_rowwise(v, beta)?;
            let attended = tape.mean_rows(vc)?;
            Ok(PipelineNodes {
                attended,
                beta: Some(beta),
                eta: None,
            })
        }
        Variant::Ra => {
            let s = need(spatial, "spatial", variant)?;
            let eta = spatial_attention_graph(tape, v, q, &s)?;
            let attended = apply_spatial_weights_graph(tape, eta, v)?;
            Ok(PipelineNodes {
                attended,
                beta: None,
                eta: Some(eta),
            })
        }
        Variant::Cva => {
            let c = need(channel, "channel", variant)?;
            let s = need(spatial, "spatial", variant)?;
            let u_bar = tape.mean_rows(v)?;
            let beta = channel_attention_graph(tape, u_bar, q, &c)?;
            let vc = tape.mul_rowwise(v, beta)?;
            let eta = spatial_attention_graph(tape, vc, q, &s)?;
            let attended = apply_spatial_weights_graph(tape, eta, vc)?;
            Ok(PipelineNodes {
                attended,
                beta: Some(beta),
                eta: Some(eta),
            })
        }
        Variant::CvaV => {
            let c = need(channel, "channel", variant)?;
            let s = need(spatial, "spatial", variant)?;
            let eta = spatial_attention_graph(tape, v, q, &s)?;
            // rows reweighted, not yet summed, so channel attention still has a map to pool
            let vs_map = tape.scale_rows(v, eta)?;
            let u_bar = tape.mean_rows(vs_map)?;
            let beta = channel_attention_graph(tape, u_bar, q, &c)?;
            let vc_map = tape.mul_rowwise(vs_map, beta)?;
            let attended = tape.mean_rows(vc_map)?;
            Ok(PipelineNodes {
                attended,
                beta: Some(beta),
                eta: Some(eta),
            })
        }
    }
}

// ---- value-level API ------------------------------------------------------

fn check_question(q: &Tensor, dims: &AttentionDims) -> Result<()> {
    if q.shape() != [dims.question] {
        return Err(Error::shape("question vector", q.shape(), &[dims.question]));
    }
    Ok(())
}

fn check_channels(v: &RegionFeatureMap, dims: &AttentionDims) -> Result<()> {
    if v.channels() != dims.channels {
        return Err(Error::shape(
            "region map",
            v.tensor().shape(),
            &[v.regions(), dims.channels],
        ));
    }
    Ok(())
}

/// ū: per-channel mean over regions.
pub fn channel_mean_pool(v: &RegionFeatureMap) -> Tensor {
    tensor::mean_over_rows(v.tensor()).expect("region maps are non-empty matrices")
}

pub fn channel_attention(
    store: &ParameterStore,
    params: &ChannelAttentionParams,
    u_bar: &Tensor,
    q: &Tensor,
) -> Result<ChannelWeights> {
    if u_bar.shape() != [params.dims.channels] {
        return Err(Error::shape(
            "channel mean",
            u_bar.shape(),
            &[params.dims.channels],
        ));
    }
    check_question(q, &params.dims)?;
    let mut tape = Tape::new();
    let nodes = params.bind(&mut tape, store);
    let u = tape.constant_ref(u_bar);
    let q = tape.constant_ref(q);
    let beta = channel_attention_graph(&mut tape, u, q, &nodes)?;
    ChannelWeights::new(tape.value(beta).data().to_vec())
}

/// `V^c[k][d] = β[d] · V[k][d]`.
pub fn apply_channel_weights(beta: &[f64], v: &RegionFeatureMap) -> Result<RegionFeatureMap> {
    if beta.len() != v.channels() {
        return Err(Error::shape(
            "apply_channel_weights",
            &[beta.len()],
            v.tensor().shape(),
        ));
    }
    let mut out = v.tensor().clone();
    for row in out.data_mut().chunks_mut(beta.len()) {
        for (x, b) in row.iter_mut().zip(beta) {
            *x *= b;
        }
    }
    RegionFeatureMap::new(out)
}

pub fn spatial_attention(
    store: &ParameterStore,
    params: &SpatialAttentionParams,
    map: &RegionFeatureMap,
    q: &Tensor,
) -> Result<SpatialWeights> {
    check_channels(map, &params.dims)?;
    check_question(q, &params.dims)?;
    let mut tape = Tape::new();
    let nodes = params.bind(&mut tape, store);
    let m = tape.constant_ref(map.tensor());
    let q = tape.constant_ref(q);
    let eta = spatial_attention_graph(&mut tape, m, q, &nodes)?;
    SpatialWeights::new(tape.value(eta).data().to_vec())
}

/// `(1/K) Σ_k η_k · map[k]`. `eta` may be any weight vector, not only a
/// softmax output.
pub fn apply_spatial_weights(eta: &[f64], map: &RegionFeatureMap) -> Result<Tensor> {
    let k = map.regions();
    if eta.len() != k {
        return Err(Error::shape(
            "apply_spatial_weights",
            &[eta.len()],
            map.tensor().shape(),
        ));
    }
    let d = map.channels();
    let mut out = vec![0.0; d];
    for (r, &w) in eta.iter().enumerate() {
        for (o, x) in out.iter_mut().zip(map.tensor().row(r)) {
            *o += w * x;
        }
    }
    let inv = 1.0 / k as f64;
    out.iter_mut().for_each(|x| *x *= inv);
    Tensor::vector(out)
}

/// Output of a pipeline evaluated outside training.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub attended: Tensor,
    pub beta: Option<ChannelWeights>,
    pub eta: Option<SpatialWeights>,
}

pub fn run_pipeline(
    variant: Variant,
    store: &ParameterStore,
    channel: Option<&ChannelAttentionParams>,
    spatial: Option<&SpatialAttentionParams>,
    v: &RegionFeatureMap,
    q: &Tensor,
) -> Result<AttentionOutput> {
    let dims = channel
        .map(|c| c.dims)
        .or(spatial.map(|s| s.dims))
        .ok_or_else(|| Error::invalid("no attention parameters"))?;
    check_channels(v, &dims)?;
    check_question(q, &dims)?;
    let mut tape = Tape::new();
    let cn = channel.map(|c| c.bind(&mut tape, store));
    let sn = spatial.map(|s| s.bind(&mut tape, store));
    let vn = tape.constant_ref(v.tensor());
    let qn = tape.constant_ref(q);
    let out = pipeline_graph(&mut tape, variant, vn, qn, cn.as_ref(), sn.as_ref())?;
    Ok(AttentionOutput {
        attended: tape.value(out.attended).clone(),
        beta: out
            .beta
            .map(|b| ChannelWeights::new(tape.value(b).data().to_vec()))
            .transpose()?,
        eta: out
            .eta
            .map(|e| SpatialWeights::new(tape.value(e).data().to_vec()))
            .transpose()?,
    })
}

pub fn cva_forward(
    store: &ParameterStore,
    channel: &ChannelAttentionParams,
    spatial: &SpatialAttentionParams,
    v: &RegionFeatureMap,
    q: &Tensor,
) -> Result<AttentionOutput> {
    run_pipeline(Variant::Cva, store, Some(channel), Some(spatial), v, q)
}

pub fn cva_v_forward(
    store: &ParameterStore,
    channel: &ChannelAttentionParams,
    spatial: &SpatialAttentionParams,
    v: &RegionFeatureMap,
    q: &Tensor,
) -> Result<AttentionOutput> {
    run_pipeline(Variant::CvaV, store, Some(channel), Some(spatial), v, q)
}

pub fn ca_only_forward(
    store: &ParameterStore,
    channel: &ChannelAttentionParams,
    v: &RegionFeatureMap,
    q: &Tensor,
) -> Result<AttentionOutput> {
    run_pipeline(Variant::Ca, store, Some(channel), None, v, q)
}

pub fn ra_only_forward(
    store: &ParameterStore,
    spatial: &SpatialAttentionParams,
    v: &RegionFeatureMap,
    q: &Tensor,
) -> Result<AttentionOutput> {
    run_pipeline(Variant::Ra, store, None, Some(spatial), v, q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const DIMS: AttentionDims = AttentionDims {
        channels: 6,
        question: 5,
        hidden: 4,
    };

    struct Fixture {
        store: ParameterStore,
        channel: ChannelAttentionParams,
        spatial: SpatialAttentionParams,
        rng: ChaCha8Rng,
    }

    fn fixture(seed: u64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let channel = ChannelAttentionParams::init(&mut store, DIMS, &mut rng).unwrap();
        let spatial =
            SpatialAttentionParams::init(&mut store, DIMS, SpatialTanh::Joint, &mut rng).unwrap();
        for e in store.entries_mut() {
            for v in e.value.data_mut() {
                if *v == 0.0 {
                    *v = rng.random_range(-0.3..0.3);
                }
            }
        }
        Fixture {
            store,
            channel,
            spatial,
            rng,
        }
    }

    fn zeroed(seed: u64) -> Fixture {
        let mut f = fixture(seed);
        for e in f.store.entries_mut() {
            e.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        f
    }

    fn random_map(rng: &mut ChaCha8Rng, k: usize, d: usize) -> RegionFeatureMap {
        let rows: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        RegionFeatureMap::from_rows(&rows).unwrap()
    }

    fn random_q(rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::vector(
            (0..DIMS.question)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn channel_mean_pool_cases() {
        let v = RegionFeatureMap::from_rows(&[vec![1.0, 3.0], vec![3.0, 5.0]]).unwrap();
        assert_eq!(channel_mean_pool(&v).data(), &[2.0, 4.0]);
        let one = RegionFeatureMap::from_rows(&[vec![7.0, -1.0]]).unwrap();
        assert_eq!(channel_mean_pool(&one).data(), &[7.0, -1.0]);
        let swapped = v.permuted(&[1, 0]).unwrap();
        assert_eq!(channel_mean_pool(&swapped), channel_mean_pool(&v));
    }

    #[test]
    fn zero_channel_params_give_uniform_beta() {
        let f = zeroed(1);
        let u = Tensor::vector(vec![0.3, -2.0, 1.0, 0.0, 4.0, 0.5]).unwrap();
        let q = Tensor::filled(&[5], 0.7);
        let beta = channel_attention(&f.store, &f.channel, &u, &q).unwrap();
        assert!(beta
            .as_slice()
            .iter()
            .all(|&b| (b - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn channel_permutation_carries_beta() {
        let mut f = fixture(2);
        let q = random_q(&mut f.rng);
        let u = Tensor::vector((0..6).map(|_| f.rng.random_range(-1.0..1.0)).collect()).unwrap();
        let beta = channel_attention(&f.store, &f.channel, &u, &q).unwrap();

        let perm = [3, 0, 5, 1, 4, 2];
        let permute =
            |t: &Tensor| Tensor::vector(perm.iter().map(|&i| t.data()[i]).collect()).unwrap();
        let mut g = fixture(2);
        let w = permute(f.store.value(f.channel.w_vc));
        let b = permute(f.store.value(f.channel.b_vc));
        g.store.set(g.channel.w_vc, w).unwrap();
        g.store.set(g.channel.b_vc, b).unwrap();
        let beta_p = channel_attention(&g.store, &g.channel, &permute(&u), &q).unwrap();
        let expect: Vec<f64> = perm.iter().map(|&i| beta.as_slice()[i]).collect();
        assert!(close(beta_p.as_slice(), &expect, 1e-15));
    }

    #[test]
    fn apply_channel_weights_cases() {
        let v = RegionFeatureMap::from_rows(&[vec![2.0, 4.0]]).unwrap();
        let out = apply_channel_weights(&[0.5, 0.5], &v).unwrap();
        assert_eq!(out.tensor().data(), &[1.0, 2.0]);
        let out = apply_channel_weights(&[1.0, 0.0], &v).unwrap();
        assert_eq!(out.tensor().data(), &[2.0, 0.0]);
        assert!(apply_channel_weights(&[1.0], &v).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = random_map(&mut rng, 4, 6);
        let beta: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
        let out = apply_channel_weights(&beta, &v).unwrap();
        for k in 0..4 {
            for d in 0..6 {
                assert_eq!(out.tensor().get(&[k, d]), beta[d] * v.tensor().get(&[k, d]));
            }
        }
    }

    #[test]
    fn zero_spatial_params_give_uniform_eta() {
        let mut f = zeroed(4);
        let v = random_map(&mut f.rng, 5, 6);
        let q = random_q(&mut f.rng);
        let eta = spatial_attention(&f.store, &f.spatial, &v, &q).unwrap();
        assert!(eta.as_slice().iter().all(|&e| (e - 0.2).abs() < 1e-15));
    }

    #[test]
    fn spatial_attention_is_equivariant() {
        let mut f = fixture(5);
        let v = random_map(&mut f.rng, 4, 6);
        let q = random_q(&mut f.rng);
        let eta = spatial_attention(&f.store, &f.spatial, &v, &q).unwrap();
        let perm = [2, 0, 3, 1];
        let eta_p =
            spatial_attention(&f.store, &f.spatial, &v.permuted(&perm).unwrap(), &q).unwrap();
        let expect: Vec<f64> = perm.iter().map(|&i| eta.as_slice()[i]).collect();
        assert!(close(eta_p.as_slice(), &expect, 1e-15));
    }

    #[test]
    fn visual_form_ignores_the_question() {
        let mut f = fixture(6);
        f.spatial.form = SpatialTanh::Visual;
        let v = random_map(&mut f.rng, 4, 6);
        let a = spatial_attention(&f.store, &f.spatial, &v, &random_q(&mut f.rng)).unwrap();
        let b = spatial_attention(&f.store, &f.spatial, &v, &random_q(&mut f.rng)).unwrap();
        assert!(close(a.as_slice(), b.as_slice(), 1e-14));

        f.spatial.form = SpatialTanh::Joint;
        let a = spatial_attention(&f.store, &f.spatial, &v, &random_q(&mut f.rng)).unwrap();
        let b = spatial_attention(&f.store, &f.spatial, &v, &random_q(&mut f.rng)).unwrap();
        assert!(!close(a.as_slice(), b.as_slice(), 1e-6));
    }

    #[test]
    fn apply_spatial_weights_cases() {
        let v = RegionFeatureMap::from_rows(&[vec![2.0, 6.0], vec![4.0, 8.0]]).unwrap();
        let ones = apply_spatial_weights(&[1.0, 1.0], &v).unwrap();
        assert_eq!(ones, tensor::mean_over_rows(v.tensor()).unwrap());
        let first = apply_spatial_weights(&[1.0, 0.0], &v).unwrap();
        assert_eq!(first.data(), &[1.0, 3.0]);
        let uniform = apply_spatial_weights(&[0.5, 0.5], &v).unwrap();
        assert!(close(uniform.data(), &[1.5, 3.5], 1e-15));
        assert!(apply_spatial_weights(&[1.0], &v).is_err());
    }

    #[test]
    fn zero_params_closed_forms() {
        let mut f = zeroed(7);
        let v = random_map(&mut f.rng, 3, 6);
        let q = random_q(&mut f.rng);
        let mean = tensor::mean_over_rows(v.tensor()).unwrap();
        let scaled = |s: f64| mean.data().iter().map(|x| x * s).collect::<Vec<_>>();
        let (k, d) = (3.0, 6.0);

        let ca = ca_only_forward(&f.store, &f.channel, &v, &q).unwrap();
        assert!(close(ca.attended.data(), &scaled(1.0 / d), 1e-15));
        let ra = ra_only_forward(&f.store, &f.spatial, &v, &q).unwrap();
        assert!(close(ra.attended.data(), &scaled(1.0 / k), 1e-15));
        let cva = cva_forward(&f.store, &f.channel, &f.spatial, &v, &q).unwrap();
        assert!(close(cva.attended.data(), &scaled(1.0 / (k * d)), 1e-15));
        let cvav = cva_v_forward(&f.store, &f.channel, &f.spatial, &v, &q).unwrap();
        assert!(close(cvav.attended.data(), &scaled(1.0 / (k * d)), 1e-15));
    }

    #[test]
    fn ca_is_cva_with_mean_aggregation() {
        let mut f = fixture(8);
        let v = random_map(&mut f.rng, 4, 6);
        let q = random_q(&mut f.rng);
        let ca = ca_only_forward(&f.store, &f.channel, &v, &q).unwrap();
        let cva = cva_forward(&f.store, &f.channel, &f.spatial, &v, &q).unwrap();
        let vc = apply_channel_weights(cva.beta.as_ref().unwrap().as_slice(), &v).unwrap();
        let by_hand = tensor::mean_over_rows(vc.tensor()).unwrap();
        assert!(close(ca.attended.data(), by_hand.data(), 1e-15));
        assert_eq!(ca.beta, cva.beta);
    }

    #[test]
    fn cva_v_with_one_region_is_channel_attention_on_it() {
        let mut f = fixture(9);
        let v = random_map(&mut f.rng, 1, 6);
        let q = random_q(&mut f.rng);
        let out = cva_v_forward(&f.store, &f.channel, &f.spatial, &v, &q).unwrap();
        assert_eq!(out.eta.as_ref().unwrap().as_slice(), &[1.0]);
        let beta = channel_attention(&f.store, &f.channel, &channel_mean_pool(&v), &q).unwrap();
        let expect: Vec<f64> = v
            .tensor()
            .row(0)
            .iter()
            .zip(beta.as_slice())
            .map(|(x, b)| x * b)
            .collect();
        assert!(close(out.attended.data(), &expect, 1e-15));
    }

    #[test]
    fn output_length_is_d_for_any_k() {
        let mut f = fixture(10);
        let q = random_q(&mut f.rng);
        for k in [1, 4, 36] {
            let v = random_map(&mut f.rng, k, 6);
            for variant in Variant::ALL {
                let out = run_pipeline(
                    variant,
                    &f.store,
                    Some(&f.channel),
                    Some(&f.spatial),
                    &v,
                    &q,
                )
                .unwrap();
                assert_eq!(out.attended.shape(), &[6], "{variant} K={k}");
            }
        }
    }

    #[test]
    fn ra_is_region_permutation_invariant() {
        let mut f = fixture(11);
        let v = random_map(&mut f.rng, 5, 6);
        let q = random_q(&mut f.rng);
        let a = ra_only_forward(&f.store, &f.spatial, &v, &q).unwrap();
        let b = ra_only_forward(
            &f.store,
            &f.spatial,
            &v.permuted(&[4, 2, 0, 1, 3]).unwrap(),
            &q,
        )
        .unwrap();
        assert!(close(a.attended.data(), b.attended.data(), 1e-14));
    }

    #[test]
    fn missing_params_and_shape_errors() {
        let mut f = fixture(12);
        let v = random_map(&mut f.rng, 2, 6);
        let q = random_q(&mut f.rng);
        assert!(run_pipeline(Variant::Cva, &f.store, Some(&f.channel), None, &v, &q).is_err());
        let bad = random_map(&mut f.rng, 2, 5);
        assert!(matches!(
            cva_forward(&f.store, &f.channel, &f.spatial, &bad, &q),
            Err(Error::Shape { .. })
        ));
        assert!(cva_forward(&f.store, &f.channel, &f.spatial, &v, &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("R-CVA".parse::<Variant>().unwrap(), Variant::CvaV);
        let err = "san".parse::<Variant>().unwrap_err().to_string();
        assert!(err.contains("ca, ra, cva, cva-v"));
    }
}
