//! Central finite-difference checks of parameter gradients.
//!
//! The perturbed evaluations keep every leaky rectifier on the linear piece it occupied
//! at the base point. Otherwise a `±h` step that straddles a kink yields a difference
//! quotient that estimates no derivative at all.

use cisnet_autograd::{Graph, Module, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub sampled: usize,
    pub checked: usize,
    pub worst_rel: f64,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Fraction of scalar parameters to sample.
    pub fraction: f64,
    pub step: f64,
    pub rel_tol: f64,
    /// Denominator floor so that two near-zero gradients compare as equal.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            fraction: 0.01,
            step: 1e-3,
            rel_tol: 1e-2,
            floor: 1e-6,
            seed: 0,
        }
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compare the analytic gradient of `loss` against central differences for a
/// random subset of the scalar entries of `model`'s parameters. `loss` must be a pure
/// function of the parameters (all randomness fixed by the caller).
pub fn check_param_gradients<M: Module>(
    model: &mut M,
    loss: impl Fn(&M, &Graph) -> Var,
    opts: GradCheckOptions,
) -> GradCheckReport {
    let g = Graph::new();
    g.track_kinks();
    let y = loss(model, &g);
    let base = std::sync::Arc::new(g.kink_pattern().unwrap_or_default());
    let grads = g.backward(&y);

    let sizes: Vec<usize> = model.params().iter().map(|p| p.value().numel()).collect();
    let analytic: Vec<Option<Vec<f64>>> = model
        .params()
        .iter()
        .map(|p| grads.of_param(p).map(|t| t.data().to_vec()))
        .collect();
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    drop(grads);
    drop(g);

    let total: usize = sizes.iter().sum();
    let n_samples = ((total as f64 * opts.fraction).ceil() as usize).clamp(1, total);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut picks = rand::seq::index::sample(&mut rng, total, n_samples).into_vec();
    picks.sort_unstable();

    // recording tape: losses such as the gradient penalty differentiate internally
    let eval = |model: &M| {
        let g = Graph::new();
        g.replay_kinks(base.clone());
        loss(model, &g).item()
    };

    let mut report = GradCheckReport {
        sampled: n_samples,
        ..Default::default()
    };
    let mut offset = 0;
    let mut tensor = 0;
    for flat in picks {
        while flat >= offset + sizes[tensor] {
            offset += sizes[tensor];
            tensor += 1;
        }
        let i = flat - offset;
        let perturb = |model: &mut M, delta: f64| {
            let mut params = model.params_mut_vec();
            params[tensor].value_mut().data_mut()[i] += delta;
        };
        let original = model.params()[tensor].value().data()[i];
        perturb(model, opts.step);
        let plus = eval(model);
        perturb(model, -2.0 * opts.step);
        let minus = eval(model);
        model.params_mut_vec()[tensor].value_mut().data_mut()[i] = original;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic[tensor].as_ref().map_or(0.0, |v| v[i]);
        let rel = relative_error(a, numeric, opts.floor);
        report.checked += 1;
        report.worst_rel = report.worst_rel.max(rel);
        if rel.is_nan() || rel > opts.rel_tol {
            report.failures.push(format!(
                "{}[{i}]: analytic {a:.6e}, numeric {numeric:.6e}, rel {rel:.3e}",
                names[tensor]
            ));
        }
    }
    report
}

trait ParamsMutVec {
    fn params_mut_vec(&mut self) -> Vec<&mut cisnet_autograd::Param>;
}

impl<M: Module> ParamsMutVec for M {
    fn params_mut_vec(&mut self) -> Vec<&mut cisnet_autograd::Param> {
        self.named_params_mut().into_iter().map(|(_, p)| p).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cisnet_autograd::{Linear, Tensor};

    #[test]
    fn smooth_model_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut lin = Linear::new(5, 3, &mut rng);
        let x = Tensor::randn(&[4, 5], &mut rng);
        let r = check_param_gradients(
            &mut lin,
            |m, g| m.forward(&g.constant(x.clone())).tanh().square().sum(),
            GradCheckOptions {
                fraction: 1.0,
                ..Default::default()
            },
        );
        assert!(r.passed(), "{:?}", r.failures);
        assert_eq!(r.checked, 18);
        assert!(r.worst_rel < 1e-4);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // the straight-through op reports an identity gradient although the value is
        // a fixed tensor, so finite differences see a zero slope
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut lin = Linear::new(2, 2, &mut rng);
        let r = check_param_gradients(
            &mut lin,
            |m, g| {
                let y = m.forward(&g.constant(Tensor::ones(&[1, 2])));
                y.straight_through(Tensor::zeros(&[1, 2])).sum()
            },
            GradCheckOptions {
                fraction: 1.0,
                ..Default::default()
            },
        );
        assert_eq!(r.failures.len(), 6);
    }

    #[test]
    fn kinks_do_not_spoil_the_quotient() {
        // the input sits 1e-4 above the kink, well inside the 1e-3 step
        let mut lin = Linear::from_tensors(Tensor::new(&[1, 1], vec![1.0]), Tensor::new(&[1], vec![0.0]));
        let loss = |m: &Linear, g: &Graph| {
            m.forward(&g.constant(Tensor::new(&[1, 1], vec![1e-4]))).leaky_relu(0.2).sum()
        };
        let opts = GradCheckOptions {
            fraction: 1.0,
            ..Default::default()
        };
        let r = check_param_gradients(&mut lin, loss, opts);
        assert!(r.passed(), "{:?}", r.failures);
        assert_eq!(r.checked, 2);
        assert!(r.worst_rel < 1e-9);
        // parameters restored afterwards
        assert_eq!(lin.bias.value().data(), &[0.0]);
    }
}
