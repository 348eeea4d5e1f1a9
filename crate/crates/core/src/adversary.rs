//! Critic with a shared convolutional trunk, a realness head and an optional
//! expression-attribute head, plus the Wasserstein and attribute losses.

use cisnet_autograd::param::join;
use cisnet_autograd::{Conv2d, Graph, Linear, Module, Param, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, CisError, Result};
use crate::image::{stack, ImageTensor, IMAGE_SIZE};
use crate::message::{LEAKY_SLOPE, N_EXPRESSIONS};

pub const DEFAULT_LAMBDA_GP: f64 = 50.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversaryConfig {
    /// Output channels of the four trunk convolutions.
    pub channels: [usize; 4],
    pub attribute_head: bool,
}

/// Four 3x3 convolutions (stride 1, then stride 2 three times) feeding linear heads.
#[derive(Clone, Debug)]
pub struct AdversaryParams {
    pub trunk: Vec<Conv2d>,
    pub d_src: Linear,
    pub att: Option<Linear>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdversaryOutput {
    pub d_src: Vec<f64>,
    /// One length-7 logit vector per image, empty without the attribute head.
    pub att_logits: Vec<Vec<f64>>,
}

/// Flattened size of the trunk output for a 32x32 input.
fn trunk_features(last_channels: usize) -> usize {
    let side = IMAGE_SIZE / 8;
    last_channels * side * side
}

impl AdversaryParams {
    pub fn new<R: Rng + ?Sized>(cfg: &AdversaryConfig, rng: &mut R) -> Self {
        let mut cin = 3;
        let trunk = cfg
            .channels
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let conv = Conv2d::new(cin, cout, 3, if i == 0 { 1 } else { 2 }, 1, rng);
                cin = cout;
                conv
            })
            .collect();
        let feat = trunk_features(cfg.channels[3]);
        Self {
            trunk,
            d_src: Linear::new(feat, 1, rng),
            att: cfg.attribute_head.then(|| Linear::new(feat, N_EXPRESSIONS, rng)),
        }
    }

    pub fn features(&self, x: &Var) -> Result<Var> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != IMAGE_SIZE || s[3] != IMAGE_SIZE {
            return Err(CisError::Invalid(format!(
                "critic expects [N, 3, 32, 32], got {s:?}"
            )));
        }
        let mut h = x.clone();
        for conv in &self.trunk {
            h = conv.forward(&h).leaky_relu(LEAKY_SLOPE);
        }
        let n = s[0];
        let flat = h.shape()[1..].iter().product();
        Ok(h.reshape(&[n, flat]))
    }

    /// `[N, 3, 32, 32]` to realness scores `[N, 1]` and, when present, logits `[N, 7]`.
    pub fn forward(&self, x: &Var) -> Result<(Var, Option<Var>)> {
        let f = self.features(x)?;
        Ok((self.d_src.forward(&f), self.att.as_ref().map(|a| a.forward(&f))))
    }

    pub fn score(&self, x: &Var) -> Result<Var> {
        Ok(self.d_src.forward(&self.features(x)?))
    }
}

impl Module for AdversaryParams {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.trunk.collect_params(&join(prefix, "trunk"), out);
        self.d_src.collect_params(&join(prefix, "d_src"), out);
        self.att.collect_params(&join(prefix, "att"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.trunk.collect_params_mut(&join(prefix, "trunk"), out);
        self.d_src.collect_params_mut(&join(prefix, "d_src"), out);
        self.att.collect_params_mut(&join(prefix, "att"), out);
    }
}

pub fn discriminate(images: &[ImageTensor], p: &AdversaryParams) -> Result<AdversaryOutput> {
    if images.is_empty() {
        return Err(CisError::Empty("critic input batch"));
    }
    let g = Graph::inference();
    let (src, att) = p.forward(&g.constant(stack(images)))?;
    Ok(AdversaryOutput {
        d_src: src.value().data().to_vec(),
        att_logits: att
            .map(|a| a.value().data().chunks(N_EXPRESSIONS).map(<[f64]>::to_vec).collect())
            .unwrap_or_default(),
    })
}

fn nonempty(scores: &Var, what: &'static str) -> Result<()> {
    if scores.value().numel() == 0 {
        Err(CisError::Empty(what))
    } else {
        Ok(())
    }
}

/// `-mean(real) + mean(fake)`.
pub fn wgan_d_loss_var(real: &Var, fake: &Var) -> Result<Var> {
    nonempty(real, "real scores")?;
    nonempty(fake, "fake scores")?;
    Ok(&fake.mean() - &real.mean())
}

/// `-mean(fake)`.
pub fn wgan_g_loss_var(fake: &Var) -> Result<Var> {
    nonempty(fake, "fake scores")?;
    Ok(fake.mean().neg())
}

/// Mean negative log-likelihood of `labels` under the row-wise softmax of `logits`.
pub fn attribute_nll_var(logits: &Var, labels: &[usize]) -> Result<Var> {
    let s = logits.shape();
    if labels.is_empty() {
        return Err(CisError::Empty("attribute labels"));
    }
    check_dim("attribute batch", s[0], labels.len())?;
    let classes = s[1];
    let mut onehot = Tensor::zeros(&s);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(CisError::Invalid(format!("label {l} outside 0..{classes}")));
        }
        onehot.data_mut()[i * classes + l] = 1.0;
    }
    let picked = &logits.log_softmax_rows() * &logits.graph().constant(onehot);
    Ok(picked.sum().mul_scalar(-1.0 / labels.len() as f64))
}

pub fn att_d_loss_var(real_logits: &Var, labels: &[usize]) -> Result<Var> {
    attribute_nll_var(real_logits, labels)
}

pub fn att_g_loss_var(fake_logits: &Var, target_labels: &[usize]) -> Result<Var> {
    attribute_nll_var(fake_logits, target_labels)
}

/// `lambda * mean_i (||grad_x critic(x_i)||_2 - 1)^2` over `x_i = a_i real_i + (1 - a_i) fake_i`,
/// one `a_i` per sample (`alpha` has one entry per batch element).
pub fn gradient_penalty_with(
    critic: impl Fn(&Var) -> Result<Var>,
    real: &Var,
    fake: &Var,
    alpha: &Tensor,
    lambda: f64,
) -> Result<Var> {
    let (rs, fs) = (real.shape(), fake.shape());
    if rs != fs {
        return Err(CisError::Invalid(format!(
            "penalty batches differ: {rs:?} vs {fs:?}"
        )));
    }
    let n = rs[0];
    check_dim("penalty mixing weights", n, alpha.numel())?;
    let g = real.graph();
    let mut ashape = vec![1; rs.len()];
    ashape[0] = n;
    let a = g.constant(alpha.reshape(&ashape));
    let one_minus = g.constant(alpha.map(|v| 1.0 - v).reshape(&ashape));
    // the interpolate is its own leaf: the penalty differentiates the critic at x-hat only
    let mixed = &(&real.detach() * &a) + &(&fake.detach() * &one_minus);
    let x_hat = g.leaf(mixed.value().as_ref().clone());
    let scores = critic(&x_hat)?;
    let grad = g
        .grad(&scores.sum(), &[&x_hat], true)
        .pop()
        .flatten()
        .ok_or_else(|| CisError::Invalid("critic output does not depend on its input".into()))?;
    let mut per = vec![1; rs.len()];
    per[0] = n;
    let norms = grad.square().sum_to(&per).sqrt();
    Ok(norms.add_scalar(-1.0).square().mean().mul_scalar(lambda))
}

pub fn gradient_penalty<R: Rng + ?Sized>(
    real: &Var,
    fake: &Var,
    p: &AdversaryParams,
    lambda: f64,
    rng: &mut R,
) -> Result<Var> {
    let n = real.shape()[0];
    let alpha = Tensor::from_fn(&[n], |_| rng.random::<f64>());
    gradient_penalty_with(|x| p.score(x), real, fake, &alpha, lambda)
}

fn scores_var(g: &Graph, v: &[f64]) -> Var {
    g.constant(Tensor::new(&[v.len()], v.to_vec()))
}

pub fn wgan_d_loss(real_scores: &[f64], fake_scores: &[f64]) -> Result<f64> {
    let g = Graph::inference();
    Ok(wgan_d_loss_var(&scores_var(&g, real_scores), &scores_var(&g, fake_scores))?.item())
}

pub fn wgan_g_loss(fake_scores: &[f64]) -> Result<f64> {
    let g = Graph::inference();
    Ok(wgan_g_loss_var(&scores_var(&g, fake_scores))?.item())
}

fn logits_var(g: &Graph, logits: &[Vec<f64>]) -> Result<Var> {
    let k = logits.first().map_or(0, Vec::len);
    if logits.iter().any(|r| r.len() != k) {
        return Err(CisError::Invalid("ragged logit rows".into()));
    }
    Ok(g.constant(Tensor::new(&[logits.len(), k], logits.concat())))
}

pub fn att_d_loss(att_logits_real: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let g = Graph::inference();
    Ok(att_d_loss_var(&logits_var(&g, att_logits_real)?, labels)?.item())
}

pub fn att_g_loss(att_logits_fake: &[Vec<f64>], target_labels: &[usize]) -> Result<f64> {
    let g = Graph::inference();
    Ok(att_g_loss_var(&logits_var(&g, att_logits_fake)?, target_labels)?.item())
}
