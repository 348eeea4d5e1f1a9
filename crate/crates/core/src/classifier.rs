//! Small image classifiers, used as steganalysis detectors and as the reference
//! expression classifier.

use cisnet_autograd::param::join;
use cisnet_autograd::{Adam, Conv2d, Graph, Linear, Module, Param, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::attribute_nll_var;
use crate::error::{check_dim, CisError, Result};
use crate::image::{stack, ImageTensor, IMAGE_SIZE};
use crate::message::LEAKY_SLOPE;
use crate::security::srm_batch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Three stride-2 convolutions and one linear layer on raw pixels.
    SimpleCnn,
    /// Residual steganalysis network on SRM residuals, with pooling stages cut down for
    /// 32x32 inputs.
    Srnet32,
}

impl std::str::FromStr for Arch {
    type Err = CisError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple_cnn" | "simple" => Ok(Self::SimpleCnn),
            "srnet32" | "srnet" => Ok(Self::Srnet32),
            other => Err(CisError::Invalid(format!("unknown detector architecture `{other}`"))),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::SimpleCnn => "simple_cnn",
            Self::Srnet32 => "srnet32",
        })
    }
}

/// `x + conv2(act(conv1(x)))` at constant width.
#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

/// Strided residual block: a 3x3 stride-2 path plus a 1x1 stride-2 shortcut.
#[derive(Clone, Debug)]
struct DownBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Conv2d,
}

impl ResBlock {
    fn forward(&self, x: &Var) -> Var {
        let h = self.conv1.forward(x).leaky_relu(LEAKY_SLOPE);
        (x + &self.conv2.forward(&h)).leaky_relu(LEAKY_SLOPE)
    }
}

impl DownBlock {
    fn forward(&self, x: &Var) -> Var {
        let h = self.conv1.forward(x).leaky_relu(LEAKY_SLOPE);
        (&self.conv2.forward(&h) + &self.shortcut.forward(x)).leaky_relu(LEAKY_SLOPE)
    }
}

#[derive(Clone, Debug)]
pub struct Classifier {
    pub arch: Arch,
    stem: Vec<Conv2d>,
    res: Vec<ResBlock>,
    down: Vec<DownBlock>,
    head: Linear,
}

const SRNET_WIDTHS: [usize; 3] = [32, 64, 128];
const SRNET_STEM: usize = 16;
const SIMPLE_WIDTHS: [usize; 3] = [16, 32, 64];

impl Classifier {
    pub fn new<R: rand::Rng + ?Sized>(arch: Arch, n_classes: usize, rng: &mut R) -> Self {
        match arch {
            Arch::SimpleCnn => {
                let mut cin = 3;
                let stem = SIMPLE_WIDTHS
                    .iter()
                    .map(|&c| {
                        let conv = Conv2d::new(cin, c, 3, 2, 1, rng);
                        cin = c;
                        conv
                    })
                    .collect();
                let side = IMAGE_SIZE / 8;
                Self {
                    arch,
                    stem,
                    res: Vec::new(),
                    down: Vec::new(),
                    head: Linear::new(cin * side * side, n_classes, rng),
                }
            }
            Arch::Srnet32 => {
                let stem = vec![
                    Conv2d::new(3, SRNET_STEM, 3, 1, 1, rng),
                    Conv2d::new(SRNET_STEM, SRNET_STEM, 3, 1, 1, rng),
                ];
                let res = (0..2)
                    .map(|_| ResBlock {
                        conv1: Conv2d::new(SRNET_STEM, SRNET_STEM, 3, 1, 1, rng),
                        conv2: Conv2d::new(SRNET_STEM, SRNET_STEM, 3, 1, 1, rng),
                    })
                    .collect();
                let mut cin = SRNET_STEM;
                let down = SRNET_WIDTHS
                    .iter()
                    .map(|&c| {
                        let b = DownBlock {
                            conv1: Conv2d::new(cin, c, 3, 1, 1, rng),
                            conv2: Conv2d::new(c, c, 3, 2, 1, rng),
                            shortcut: Conv2d::new(cin, c, 1, 2, 0, rng),
                        };
                        cin = c;
                        b
                    })
                    .collect();
                Self {
                    arch,
                    stem,
                    res,
                    down,
                    head: Linear::new(cin, n_classes, rng),
                }
            }
        }
    }

    pub fn n_classes(&self) -> usize {
        self.head.output_dim()
    }

    /// The network input for a batch: raw pixels, or SRM residuals for `srnet32`.
    pub fn prepare(&self, images: &[ImageTensor]) -> Result<Tensor> {
        if images.is_empty() {
            return Err(CisError::Empty("classifier batch"));
        }
        match self.arch {
            Arch::SimpleCnn => Ok(stack(images)),
            Arch::Srnet32 => srm_batch(images),
        }
    }

    /// Logits `[N, n_classes]` for a prepared batch.
    pub fn forward(&self, x: &Var) -> Var {
        let n = x.shape()[0];
        let mut h = x.clone();
        for c in &self.stem {
            h = c.forward(&h).leaky_relu(LEAKY_SLOPE);
        }
        for b in &self.res {
            h = b.forward(&h);
        }
        for b in &self.down {
            h = b.forward(&h);
        }
        let s = h.shape();
        let h = match self.arch {
            Arch::SimpleCnn => h.reshape(&[n, s[1] * s[2] * s[3]]),
            // global average pooling
            Arch::Srnet32 => h.mean_to(&[n, s[1], 1, 1]).reshape(&[n, s[1]]),
        };
        self.head.forward(&h)
    }

    pub fn logits(&self, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
        let k = self.n_classes();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(256) {
            let g = Graph::inference();
            let y = self.forward(&g.constant(self.prepare(chunk)?));
            out.extend(y.value().data().chunks(k).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Arg-max class per image; ties go to the lower index.
    pub fn predict(&self, images: &[ImageTensor]) -> Result<Vec<usize>> {
        Ok(self
            .logits(images)?
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    /// Fraction of `images` classified as their label.
    pub fn accuracy(&self, images: &[ImageTensor], labels: &[usize]) -> Result<f64> {
        check_dim("label count", images.len(), labels.len())?;
        if images.is_empty() {
            return Err(CisError::Empty("evaluation set"));
        }
        let hits = self
            .predict(images)?
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();
        Ok(hits as f64 / images.len() as f64)
    }
}

impl Module for ResBlock {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.conv1.collect_params(&join(prefix, "conv1"), out);
        self.conv2.collect_params(&join(prefix, "conv2"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.conv1.collect_params_mut(&join(prefix, "conv1"), out);
        self.conv2.collect_params_mut(&join(prefix, "conv2"), out);
    }
}

impl Module for DownBlock {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.conv1.collect_params(&join(prefix, "conv1"), out);
        self.conv2.collect_params(&join(prefix, "conv2"), out);
        self.shortcut.collect_params(&join(prefix, "shortcut"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.conv1.collect_params_mut(&join(prefix, "conv1"), out);
        self.conv2.collect_params_mut(&join(prefix, "conv2"), out);
        self.shortcut.collect_params_mut(&join(prefix, "shortcut"), out);
    }
}

impl Module for Classifier {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.stem.collect_params(&join(prefix, "stem"), out);
        self.res.collect_params(&join(prefix, "res"), out);
        self.down.collect_params(&join(prefix, "down"), out);
        self.head.collect_params(&join(prefix, "head"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.stem.collect_params_mut(&join(prefix, "stem"), out);
        self.res.collect_params_mut(&join(prefix, "res"), out);
        self.down.collect_params_mut(&join(prefix, "down"), out);
        self.head.collect_params_mut(&join(prefix, "head"), out);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Train a fresh classifier with cross-entropy and Adam. Returns it with the mean
/// training loss of each epoch.
pub fn fit_classifier(
    arch: Arch,
    images: &[ImageTensor],
    labels: &[usize],
    n_classes: usize,
    opts: &FitOptions,
) -> Result<(Classifier, Vec<f64>)> {
    check_dim("label count", images.len(), labels.len())?;
    if images.is_empty() {
        return Err(CisError::Empty("training set"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(CisError::Invalid(format!("label {bad} outside 0..{n_classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut net = Classifier::new(arch, n_classes, &mut rng);
    // inputs are prepared once; SRM filtering is fixed
    let inputs = net.prepare(images)?;
    let per = inputs.numel() / images.len();
    let shape = inputs.shape()[1..].to_vec();
    let mut opt = Adam::new(opts.lr);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut history = Vec::with_capacity(opts.epochs);
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(opts.batch_size.max(1)) {
            let mut data = Vec::with_capacity(idx.len() * per);
            for &i in idx {
                data.extend_from_slice(&inputs.data()[i * per..(i + 1) * per]);
            }
            let mut bshape = vec![idx.len()];
            bshape.extend_from_slice(&shape);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let g = Graph::new();
            let loss = attribute_nll_var(&net.forward(&g.constant(Tensor::new(&bshape, data))), &y)?;
            total += loss.item();
            batches += 1;
            let grads = g.backward(&loss);
            opt.step(net.named_params_mut().into_iter().map(|(_, p)| p), &grads);
        }
        history.push(total / batches as f64);
    }
    Ok((net, history))
}
