//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::Loss;
use super::network::Network;
use super::tensor::{Param, Tensor};
use super::NnError;

/// Parameter count above which exhaustive checking is refused.
pub const MAX_EXHAUSTIVE_PARAMS: usize = 100_000;

/// A differentiable scalar objective over a set of f64 parameters.
pub trait Objective {
    fn params(&mut self) -> Vec<&mut Param<f64>>;
    /// Loss at the current parameters.
    fn loss(&mut self) -> Result<f64, NnError>;
    /// Loss at the current parameters, with gradients written into every
    /// parameter's grad buffer (previous contents discarded).
    fn loss_and_grad(&mut self) -> Result<f64, NnError>;
}

/// A network followed by a loss over its output, for a fixed input batch.
pub struct NetworkObjective<F> {
    pub network: Network<f64>,
    pub input: Tensor<f64>,
    pub loss_fn: F,
}

impl<F> Objective for NetworkObjective<F>
where
    F: FnMut(&Tensor<f64>) -> Result<Loss<f64>, NnError>,
{
    fn params(&mut self) -> Vec<&mut Param<f64>> {
        self.network.params_mut().iter_mut().collect()
    }

    fn loss(&mut self) -> Result<f64, NnError> {
        let out = self.network.infer(&self.input)?;
        Ok((self.loss_fn)(&out)?.value)
    }

    fn loss_and_grad(&mut self) -> Result<f64, NnError> {
        self.network.zero_grad();
        let out = self.network.forward(&self.input)?;
        let loss = (self.loss_fn)(&out)?;
        self.network.backward(&loss.grad)?;
        Ok(loss.value)
    }
}

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max |analytic − numeric| / max(|analytic|, |numeric|, 1e-8)
    pub max_rel_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

fn finite(v: f64) -> Result<f64, NnError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(NnError::NonFinite(format!("loss evaluated to {v}")))
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn check_indices<O: Objective>(
    obj: &mut O,
    step: f64,
    picks: Vec<Vec<usize>>,
) -> Result<GradCheckReport, NnError> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(NnError::Config(format!("finite-difference step must be positive, got {step}")));
    }
    finite(obj.loss_and_grad()?)?;
    let analytic: Vec<Vec<f64>> = obj
        .params()
        .iter()
        .map(|p| match p.value.grad() {
            Some(g) => g.to_vec(),
            None => vec![0.0; p.value.len()],
        })
        .collect();
    let names: Vec<String> = obj.params().iter().map(|p| p.name.clone()).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (pi, indices) in picks.into_iter().enumerate() {
        for j in indices {
            let orig = obj.params()[pi].value.data()[j];
            obj.params()[pi].value.data_mut()[j] = orig + step;
            let plus = finite(obj.loss()?)?;
            obj.params()[pi].value.data_mut()[j] = orig - step;
            let minus = finite(obj.loss()?)?;
            obj.params()[pi].value.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = rel_error(analytic[pi][j], numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((names[pi].clone(), j));
            }
        }
    }
    Ok(report)
}

/// Checks every parameter element. Refuses objectives with
/// [`MAX_EXHAUSTIVE_PARAMS`] or more parameters.
pub fn grad_check<O: Objective>(obj: &mut O, step: f64) -> Result<GradCheckReport, NnError> {
    let sizes: Vec<usize> = obj.params().iter().map(|p| p.value.len()).collect();
    let total: usize = sizes.iter().sum();
    if total >= MAX_EXHAUSTIVE_PARAMS {
        return Err(NnError::Config(format!(
            "{total} parameters is too many for an exhaustive check; use grad_check_sampled"
        )));
    }
    check_indices(obj, step, sizes.into_iter().map(|n| (0..n).collect()).collect())
}

/// Checks up to `per_param` seeded-random elements of every parameter tensor.
pub fn grad_check_sampled<O: Objective>(
    obj: &mut O,
    step: f64,
    per_param: usize,
    seed: u64,
) -> Result<GradCheckReport, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = obj
        .params()
        .iter()
        .map(|p| {
            let n = p.value.len();
            let mut v = sample(&mut rng, n, per_param.min(n)).into_vec();
            v.sort_unstable();
            v
        })
        .collect();
    check_indices(obj, step, picks)
}

/// Convenience wrapper: exhaustive check of `network` under `loss_fn`.
pub fn grad_check_network<F>(
    network: &Network<f64>,
    input: &Tensor<f64>,
    loss_fn: F,
    step: f64,
) -> Result<GradCheckReport, NnError>
where
    F: FnMut(&Tensor<f64>) -> Result<Loss<f64>, NnError>,
{
    let mut obj = NetworkObjective {
        network: network.clone(),
        input: input.clone(),
        loss_fn,
    };
    grad_check(&mut obj, step)
}

#[cfg(test)]
mod tests {
    use super::super::layers::LayerSpec;
    use super::super::loss::{mse_loss, sum_loss};
    use super::*;

    #[test]
    fn linear_quadratic() {
        let net = Network::<f64>::new(vec![3], vec![LayerSpec::dense(3, 2)], 5).unwrap();
        let x = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.75]).unwrap();
        let target = Tensor::new(vec![2, 2], vec![0.1, -0.2, 0.3, 0.4]).unwrap();
        let r = grad_check_network(&net, &x, |o| mse_loss(o, &target), 1e-4).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.checked, 8);
    }

    #[test]
    fn relu_away_from_kink() {
        let net = Network::<f64>::new(
            vec![4],
            vec![LayerSpec::dense(4, 6), LayerSpec::Relu, LayerSpec::dense(6, 1)],
            9,
        )
        .unwrap();
        let x = Tensor::new(vec![1, 4], vec![0.3, -0.8, 1.1, 0.6]).unwrap();
        let pre = net.infer_prefix(&x, 1).unwrap();
        assert!(pre.data().iter().all(|v| v.abs() > 1e-2), "input sits near a kink");
        let r = grad_check_network(&net, &x, sum_loss, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn zero_network_constant_loss() {
        let mut net = Network::<f64>::new(vec![2], vec![LayerSpec::dense(2, 2)], 1).unwrap();
        for p in net.params_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let r = grad_check_network(
            &net,
            &x,
            |o| {
                Ok(Loss {
                    value: 3.0,
                    grad: Tensor::zeros(o.shape().to_vec()),
                })
            },
            1e-3,
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let net = Network::<f64>::new(vec![2], vec![LayerSpec::dense(2, 1)], 1).unwrap();
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let r = grad_check_network(
            &net,
            &x,
            |o| {
                Ok(Loss {
                    value: f64::NAN,
                    grad: Tensor::zeros(o.shape().to_vec()),
                })
            },
            1e-3,
        );
        assert!(matches!(r, Err(NnError::NonFinite(_))));
    }

    #[test]
    fn rejects_bad_step() {
        let net = Network::<f64>::new(vec![2], vec![LayerSpec::dense(2, 1)], 1).unwrap();
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        assert!(grad_check_network(&net, &x, sum_loss, 0.0).is_err());
    }
}
