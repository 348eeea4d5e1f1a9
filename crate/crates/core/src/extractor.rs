//! Message extractor: four stride-2 convolutions and two fully connected layers producing
//! one real estimate per bit in the `{-1, +1}` domain.

use cisnet_autograd::param::join;
use cisnet_autograd::{Conv2d, Graph, Linear, Module, Param, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, CisError, Result};
use crate::image::{stack, ImageTensor, IMAGE_SIZE};
use crate::message::{SecretMessage, LEAKY_SLOPE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub n_bits: usize,
    pub channels: [usize; 4],
    pub hidden: usize,
}

#[derive(Clone, Debug)]
pub struct ExtractorParams {
    pub convs: Vec<Conv2d>,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ExtractorParams {
    pub fn new<R: Rng + ?Sized>(cfg: &ExtractorConfig, rng: &mut R) -> Self {
        let mut cin = 3;
        let convs = cfg
            .channels
            .iter()
            .map(|&cout| {
                let c = Conv2d::new(cin, cout, 3, 2, 1, rng);
                cin = cout;
                c
            })
            .collect();
        let side = IMAGE_SIZE / 16;
        Self {
            convs,
            fc1: Linear::new(cin * side * side, cfg.hidden, rng),
            fc2: Linear::new(cfg.hidden, cfg.n_bits, rng),
        }
    }

    pub fn n_bits(&self) -> usize {
        self.fc2.output_dim()
    }

    /// `[N, 3, 32, 32]` to `[N, n_bits]`.
    pub fn forward(&self, x: &Var) -> Result<Var> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != IMAGE_SIZE || s[3] != IMAGE_SIZE {
            return Err(CisError::Invalid(format!(
                "extractor expects [N, 3, 32, 32], got {s:?}"
            )));
        }
        let mut h = x.clone();
        for c in &self.convs {
            h = c.forward(&h).leaky_relu(LEAKY_SLOPE);
        }
        let flat = h.shape()[1..].iter().product();
        let h = self.fc1.forward(&h.reshape(&[s[0], flat])).leaky_relu(LEAKY_SLOPE);
        Ok(self.fc2.forward(&h))
    }
}

impl Module for ExtractorParams {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.convs.collect_params(&join(prefix, "convs"), out);
        self.fc1.collect_params(&join(prefix, "fc1"), out);
        self.fc2.collect_params(&join(prefix, "fc2"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.convs.collect_params_mut(&join(prefix, "convs"), out);
        self.fc1.collect_params_mut(&join(prefix, "fc1"), out);
        self.fc2.collect_params_mut(&join(prefix, "fc2"), out);
    }
}

pub fn extract(img: &ImageTensor, p: &ExtractorParams) -> Result<Vec<f64>> {
    Ok(extract_batch(std::slice::from_ref(img), p)?.remove(0))
}

pub fn extract_batch(images: &[ImageTensor], p: &ExtractorParams) -> Result<Vec<Vec<f64>>> {
    if images.is_empty() {
        return Err(CisError::Empty("extractor input batch"));
    }
    let g = Graph::inference();
    let out = p.forward(&g.constant(stack(images)))?;
    Ok(out.value().data().chunks(p.n_bits()).map(<[f64]>::to_vec).collect())
}

/// Per-sample Euclidean norm of `target - estimate` (both `[N, n]`), averaged over the batch.
pub fn extractor_loss_var(target: &Var, estimate: &Var) -> Result<Var> {
    let (t, e) = (target.shape(), estimate.shape());
    if t != e {
        return Err(CisError::Invalid(format!(
            "target {t:?} and estimate {e:?} differ in shape"
        )));
    }
    let d = target - estimate;
    Ok(d.square().sum_to(&[t[0], 1]).sqrt().mean())
}

pub fn extractor_loss(target: &[f64], estimate: &[f64]) -> Result<f64> {
    check_dim("estimate length", target.len(), estimate.len())?;
    let g = Graph::inference();
    let row = |v: &[f64]| g.constant(Tensor::new(&[1, v.len()], v.to_vec()));
    Ok(extractor_loss_var(&row(target), &row(estimate))?.item())
}

/// Hard decision: positive estimates and exact zeros decode to 1.
pub fn decide_bits(estimate: &[f64]) -> Result<SecretMessage> {
    SecretMessage::new(estimate.iter().map(|&v| u8::from(v >= 0.0)).collect())
}

/// Fraction of matching bit positions.
pub fn bit_accuracy(truth: &SecretMessage, decoded: &SecretMessage) -> Result<f64> {
    check_dim("decoded length", truth.len(), decoded.len())?;
    let same = truth
        .bits()
        .iter()
        .zip(decoded.bits())
        .filter(|(a, b)| a == b)
        .count();
    Ok(same as f64 / truth.len() as f64)
}

/// Mean per-bit accuracy over paired message sets.
pub fn mean_bit_accuracy(truth: &[SecretMessage], decoded: &[SecretMessage]) -> Result<f64> {
    if truth.is_empty() {
        return Err(CisError::Empty("accuracy set"));
    }
    check_dim("decoded count", truth.len(), decoded.len())?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for (t, d) in truth.iter().zip(decoded) {
        check_dim("decoded length", t.len(), d.len())?;
        hits += t.bits().iter().zip(d.bits()).filter(|(a, b)| a == b).count();
        total += t.len();
    }
    Ok(hits as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::message::encode_bits;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(n_bits: usize) -> ExtractorConfig {
        ExtractorConfig {
            n_bits,
            channels: [4, 6, 8, 8],
            hidden: 16,
        }
    }

    #[test]
    fn output_length_and_determinism() {
        let p = ExtractorParams::new(&cfg(16), &mut ChaCha8Rng::seed_from_u64(0));
        let img = ImageTensor::from_fn(32, 32, |c, y, x| ((c + y * x) % 7) as f64 / 7.0 - 0.5);
        let a = extract(&img, &p).unwrap();
        assert_eq!(a.len(), 16);
        assert_eq!(a, extract(&img, &p).unwrap());
        assert!(extract(&ImageTensor::full(16, 16, 0.0), &p).is_err());
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut p = ExtractorParams::new(&cfg(4), &mut ChaCha8Rng::seed_from_u64(1));
        for (name, q) in p.named_params_mut() {
            if name != "fc2.bias" {
                q.value_mut().data_mut().fill(0.0);
            }
        }
        p.fc2.bias.set(Tensor::new(&[4], vec![0.5, -0.5, 2.0, 0.0]));
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = ImageTensor::new(Tensor::rand_uniform(&[3, 32, 32], -1.0, 1.0, &mut rng)).unwrap();
            assert_eq!(extract(&img, &p).unwrap(), vec![0.5, -0.5, 2.0, 0.0]);
        }
    }

    #[test]
    fn loss_examples() {
        assert_eq!(extractor_loss(&[1.0, -1.0], &[1.0, -1.0]).unwrap(), 0.0);
        let l = extractor_loss(&[-1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert!((l - 2f64.sqrt()).abs() < 1e-12);
        assert!(extractor_loss(&[1.0], &[1.0, 2.0]).is_err());

        // batch mean of per-row norms, not a pooled norm
        let g = Graph::inference();
        let t = g.constant(Tensor::new(&[2, 2], vec![1.0, 1.0, 1.0, 1.0]));
        let e = g.constant(Tensor::new(&[2, 2], vec![1.0, 1.0, -2.0, -3.0]));
        let l = extractor_loss_var(&t, &e).unwrap().item();
        assert!((l - 5.0 / 2.0).abs() < 1e-12);
        let t2 = g.constant(Tensor::new(&[2, 2], vec![1.0, 1.0, 1.0, 1.0]));
        let e2 = g.constant(Tensor::new(&[2, 2], vec![-2.0, -3.0, 1.0, 1.0]));
        assert_eq!(extractor_loss_var(&t2, &e2).unwrap().item(), l);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let target = [1.0, -1.0, 1.0];
        let est = [0.3, 0.2, -0.7];
        let g = Graph::new();
        let t = g.constant(Tensor::new(&[1, 3], target.to_vec()));
        let e = g.leaf(Tensor::new(&[1, 3], est.to_vec()));
        let grads = g.backward(&extractor_loss_var(&t, &e).unwrap());
        let analytic = grads.of(&e).unwrap().clone();
        for i in 0..3 {
            let f = |d: f64| {
                let mut v = est;
                v[i] += d;
                extractor_loss(&target, &v).unwrap()
            };
            let fd = (f(1e-5) - f(-1e-5)) / 2e-5;
            let a = analytic.data()[i];
            assert!((a - fd).abs() <= 1e-3 * a.abs().max(fd.abs()));
        }
    }

    #[test]
    fn decisions() {
        assert_eq!(decide_bits(&[0.9, -0.3]).unwrap().bits(), &[1, 0]);
        assert_eq!(decide_bits(&[0.0]).unwrap().bits(), &[1]);
        assert_eq!(decide_bits(&[-0.0]).unwrap().bits(), &[1]);
        for v in 0..256u64 {
            let m = SecretMessage::from_index(v, 8).unwrap();
            assert_eq!(decide_bits(&encode_bits(&m)).unwrap(), m);
        }
    }

    #[test]
    fn accuracy_examples() {
        let m = SecretMessage::parse("1011001110001111").unwrap();
        assert_eq!(bit_accuracy(&m, &m).unwrap(), 1.0);
        assert_eq!(bit_accuracy(&m, &m.complement()).unwrap(), 0.0);
        let mut bits = m.bits().to_vec();
        for b in &mut bits[..4] {
            *b = 1 - *b;
        }
        let d = SecretMessage::new(bits).unwrap();
        assert_eq!(bit_accuracy(&m, &d).unwrap(), 0.75);
        assert!(bit_accuracy(&m, &SecretMessage::parse("1").unwrap()).is_err());
    }

    #[test]
    fn untrained_extractor_is_at_chance() {
        let p = ExtractorParams::new(&cfg(16), &mut ChaCha8Rng::seed_from_u64(2));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 640;
        let images: Vec<_> = (0..n)
            .map(|_| ImageTensor::new(Tensor::rand_uniform(&[3, 32, 32], -1.0, 1.0, &mut rng)).unwrap())
            .collect();
        let truth: Vec<_> = (0..n).map(|_| SecretMessage::random(16, &mut rng)).collect();
        let decoded: Vec<_> = extract_batch(&images, &p)
            .unwrap()
            .iter()
            .map(|e| decide_bits(e).unwrap())
            .collect();
        let acc = mean_bit_accuracy(&truth, &decoded).unwrap();
        assert!((acc - 0.5).abs() <= 0.05, "{acc}");
    }
}
