use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )))
    }
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else
/// `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng>(len: usize, rate: f64, rng: &mut R) -> Result<Tensor> {
    check_rate(rate)?;
    let keep = 1.0 / (1.0 - rate);
    let data = (0..len)
        .map(|_| {
            if rate > 0.0 && rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect();
    Tensor::vector(data)
}

pub fn apply_dropout<R: Rng>(x: &Tensor, rate: f64, mode: Mode, rng: &mut R) -> Result<Tensor> {
    check_rate(rate)?;
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.len(), rate, rng)?;
    let data = x
        .data()
        .iter()
        .zip(mask.data())
        .map(|(a, m)| a * m)
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap();
        assert_eq!(apply_dropout(&x, 0.0, Mode::Train, &mut rng).unwrap(), x);
        assert_eq!(apply_dropout(&x, 0.9, Mode::Eval, &mut rng).unwrap(), x);
        assert!(apply_dropout(&x, 1.0, Mode::Eval, &mut rng).is_err());
    }

    #[test]
    fn expectation_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::vector(vec![1.0, -2.0, 0.5]).unwrap();
        let n = 100_000;
        let mut sum = [0.0; 3];
        for _ in 0..n {
            let y = apply_dropout(&x, 0.5, Mode::Train, &mut rng).unwrap();
            for (s, v) in sum.iter_mut().zip(y.data()) {
                *s += v;
            }
        }
        for (s, v) in sum.iter().zip(x.data()) {
            assert!((s / n as f64 - v).abs() <= 0.02 * v.abs(), "{s} vs {v}");
        }
    }
}
