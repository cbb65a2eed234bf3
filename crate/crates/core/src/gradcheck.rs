//! Central-difference gradient verification.

use rand::Rng;

use crate::attention::{RegionFeatureMap, SpatialTanh, Variant};
use crate::encoder::QuestionTokens;
use crate::error::{Error, Result};
use crate::model::{CvaModel, ModelConfig, ModelDims, Sample};
use crate::rng::{self, Stream};
use crate::tape::OpKind;
use crate::tensor::Tensor;
use crate::train::ParameterStore;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps <= 1e-2 {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "finite-difference eps {eps} outside (0, 1e-2]"
        )))
    }
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Numerical gradient of `f` at `x` by central differences. `x` is restored
/// before returning.
pub fn central_difference<F>(x: &mut [f64], eps: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    check_eps(eps)?;
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let plus = f(x).and_then(|v| finite(v, "f(x + eps)"));
        x[i] = orig - eps;
        let minus = f(x).and_then(|v| finite(v, "f(x - eps)"));
        x[i] = orig;
        out.push((plus? - minus?) / (2.0 * eps));
    }
    Ok(out)
}

/// Max relative error between `analytic` and the central difference of `f`.
pub fn check_function<F>(x: &[f64], analytic: &[f64], eps: f64, f: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if x.len() != analytic.len() {
        return Err(Error::shape(
            "check_function",
            &[x.len()],
            &[analytic.len()],
        ));
    }
    let mut x = x.to_vec();
    let numeric = central_difference(&mut x, eps, f)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamError {
    pub name: String,
    pub max_relative_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamError>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_param
            .iter()
            .map(|p| p.max_relative_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamError> {
        self.per_param
            .iter()
            .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_error() < tolerance
    }
}

/// Compares the gradient buffers already held in `store` against central
/// differences of `loss`, perturbing every scalar of every parameter.
pub fn finite_difference_check<F>(
    store: &mut ParameterStore,
    eps: f64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParameterStore) -> Result<f64>,
{
    check_eps(eps)?;
    let ids: Vec<_> = store.ids().collect();
    let mut per_param = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.value(id).len();
        let mut worst = 0.0f64;
        for i in 0..n {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + eps;
            let plus = loss(store).and_then(|v| finite(v, "loss(θ + eps)"));
            store.value_mut(id).data_mut()[i] = orig - eps;
            let minus = loss(store).and_then(|v| finite(v, "loss(θ - eps)"));
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let analytic = store.grad(id).data()[i];
            worst = worst.max(relative_error(analytic, numeric));
        }
        per_param.push(ParamError {
            name: store.entry(id).name.clone(),
            max_relative_error: worst,
        });
    }
    Ok(GradCheckReport { per_param })
}

/// Shapes of the small instance used by [`check_model`].
pub const TINY_REGIONS: usize = 4;
pub const TINY_QUESTION_LEN: usize = 3;
pub const TINY_DIMS: ModelDims = ModelDims {
    vocab: 10,
    embed: 8,
    hidden: 8,
    attention: 8,
    fused: 8,
    channels: 8,
    answers: 5,
};

/// Largest error per parameter group (the prefix before the first `.`).
pub fn group_errors(report: &GradCheckReport) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = Vec::new();
    for p in &report.per_param {
        let group = p.name.split('.').next().unwrap_or(&p.name);
        match out.iter_mut().find(|(g, _)| g == group) {
            Some((_, e)) => *e = e.max(p.max_relative_error),
            None => out.push((group.to_string(), p.max_relative_error)),
        }
    }
    out
}

/// Builds a random small model and a two-example batch from `seed`, then
/// compares the batch cross-entropy gradient of every parameter against
/// central differences. Dropout is off. `fault` corrupts one backward rule.
pub fn check_model(
    variant: Variant,
    form: SpatialTanh,
    seed: u64,
    fault: Option<OpKind>,
) -> Result<GradCheckReport> {
    let mut config = ModelConfig::new(TINY_DIMS, variant);
    config.spatial_tanh = form;
    let mut model = CvaModel::new(config, seed)?;
    let mut rng = rng::stream(seed, Stream::Data, 0);
    // biases start at zero; move them so their gradients are generic
    for e in model.store.entries_mut() {
        if e.name.contains(".b_") {
            e.value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
    let d = TINY_DIMS;
    let mut map = || -> Result<RegionFeatureMap> {
        let data = (0..TINY_REGIONS * d.channels)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        RegionFeatureMap::new(Tensor::matrix(TINY_REGIONS, d.channels, data)?)
    };
    let (v1, v2) = (map()?, map()?);
    let mut question = || -> Result<QuestionTokens> {
        let ids = (0..TINY_QUESTION_LEN)
            .map(|_| rng.random_range(0..d.vocab))
            .collect();
        QuestionTokens::new(ids, d.vocab, TINY_QUESTION_LEN)
    };
    let (q1, q2) = (question()?, question()?);
    let labels = [
        rng.random_range(0..d.answers),
        rng.random_range(0..d.answers),
    ];
    let batch = [
        Sample {
            features: &v1,
            tokens: &q1,
            label: labels[0],
        },
        Sample {
            features: &v2,
            tokens: &q2,
            label: labels[1],
        },
    ];

    let out = model.loss_and_grads(&batch, None, fault)?;
    model.store.zero_grads();
    model.store.accumulate(&out.grads, 1.0);
    let mut store = std::mem::take(&mut model.store);
    let report = finite_difference_check(&mut store, DEFAULT_EPS, |s| model.loss_with(s, &batch));
    model.store = store;
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let mut x = [3.0];
        let g = central_difference(&mut x, 1e-5, |x| Ok(x[0] * x[0])).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
        assert_eq!(x, [3.0]);
    }

    #[test]
    fn linear_error_is_roundoff() {
        let err = check_function(&[1.0, -2.0], &[2.0, -0.5], 1e-5, |x| {
            Ok(2.0 * x[0] - 0.5 * x[1] + 7.0)
        })
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn eps_out_of_range() {
        let mut x = [0.0];
        assert!(central_difference(&mut x, 0.0, |_| Ok(0.0)).is_err());
        assert!(central_difference(&mut x, 0.1, |_| Ok(0.0)).is_err());
    }

    #[test]
    fn non_finite_evaluation_propagates() {
        let mut x = [0.0];
        let err = central_difference(&mut x, 1e-5, |_| Ok(f64::NAN)).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let err = check_function(&[2.0], &[5.0], 1e-5, |x| Ok(x[0] * x[0])).unwrap();
        assert!(err > 0.1);
    }
}
