//! Measurement: bit-accuracy tables under channel attacks, FID over a pluggable feature
//! extractor, payload capacity and expression accuracy.

use std::path::Path;

use cisnet_autograd::{Conv2d, Graph, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{apply_channel, ChannelSpec, CODEC_ID};
use crate::classifier::Classifier;
use crate::config::TrainConfig;
use crate::error::{CisError, Result};
use crate::image::{stack, ImageTensor};
use crate::message::{ExpressionLabel, SecretMessage, LEAKY_SLOPE, N_EXPRESSIONS};
use crate::model::{StegoModel, Variant};

/// Messages drawn per accuracy row unless the caller says otherwise.
pub const DEFAULT_EVAL_MESSAGES: usize = 10_000;

const EVAL_CHUNK: usize = 250;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub channel: String,
    /// Mean per-bit accuracy.
    pub accuracy: f64,
    pub n_messages: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub rows: Vec<AccuracyRow>,
    pub n_bits: usize,
    pub seed: u64,
    pub codec: String,
    pub variant: Variant,
    pub config: TrainConfig,
}

impl AccuracyReport {
    pub fn row(&self, channel: &ChannelSpec) -> Option<&AccuracyRow> {
        let key = channel.to_string();
        self.rows.iter().find(|r| r.channel == key)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["channel", "accuracy", "n_messages", "n_bits", "seed"])?;
        for r in &self.rows {
            w.write_record([
                r.channel.clone(),
                r.accuracy.to_string(),
                r.n_messages.to_string(),
                self.n_bits.to_string(),
                self.seed.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

fn random_labels<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<ExpressionLabel> {
    (0..n)
        .map(|_| ExpressionLabel::new(rng.random_range(0..N_EXPRESSIONS)).expect("valid class"))
        .collect()
}

/// Bit accuracy per channel. Every row sees the same messages and the same images
/// (exported at 8 bits), so rows differ only by the attack; each row's attack noise
/// comes from its own stream of `seed`.
pub fn eval_accuracy_table(
    model: &StegoModel,
    channels: &[ChannelSpec],
    n_messages: usize,
    seed: u64,
) -> Result<AccuracyReport> {
    if n_messages == 0 {
        return Err(CisError::Empty("message count"));
    }
    if channels.is_empty() {
        return Err(CisError::Empty("channel list"));
    }
    for c in channels {
        c.validate()?;
    }
    model.extractor()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut row_rngs: Vec<ChaCha8Rng> = (0..channels.len())
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(i as u64 + 1);
            r
        })
        .collect();
    let mut hits = vec![0usize; channels.len()];
    let n_bits = model.n_bits();
    let mut left = n_messages;
    while left > 0 {
        let m = left.min(EVAL_CHUNK);
        let msgs: Vec<_> = (0..m).map(|_| SecretMessage::random(n_bits, &mut rng)).collect();
        let labels = model.has_expression().then(|| random_labels(m, &mut rng));
        let images: Vec<_> = model
            .encode(&msgs, labels.as_deref(), &mut rng)?
            .iter()
            .map(ImageTensor::quantize8)
            .collect();
        for (i, spec) in channels.iter().enumerate() {
            let received = images
                .iter()
                .map(|img| Ok(apply_channel(img, spec, &mut row_rngs[i])?.image))
                .collect::<Result<Vec<_>>>()?;
            let decoded = model.decode(&received)?;
            hits[i] += msgs
                .iter()
                .zip(&decoded)
                .map(|(a, b)| a.bits().iter().zip(b.bits()).filter(|(x, y)| x == y).count())
                .sum::<usize>();
        }
        left -= m;
    }
    let rows = channels
        .iter()
        .zip(hits)
        .map(|(c, h)| AccuracyRow {
            channel: c.to_string(),
            accuracy: h as f64 / (n_messages * n_bits) as f64,
            n_messages,
        })
        .collect();
    Ok(AccuracyReport {
        rows,
        n_bits,
        seed,
        codec: CODEC_ID.to_string(),
        variant: model.variant,
        config: model.config.clone(),
    })
}

/// Per-image embeddings plus the identity of the extractor that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub features: Vec<Vec<f64>>,
    pub extractor_id: String,
}

impl FeatureSet {
    pub fn new(features: Vec<Vec<f64>>, extractor_id: impl Into<String>) -> Result<Self> {
        if let Some(first) = features.first() {
            let d = first.len();
            if features.iter().any(|f| f.len() != d) {
                return Err(CisError::Invalid("feature vectors differ in length".into()));
            }
        }
        Ok(Self {
            features,
            extractor_id: extractor_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    /// Sample mean and unbiased covariance.
    pub fn moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let n = self.len();
        if n < 2 {
            return Err(CisError::Invalid(format!("need at least 2 feature vectors, got {n}")));
        }
        let d = self.dim();
        let x = DMatrix::from_fn(n, d, |i, j| self.features[i][j]);
        let mu = DVector::from_fn(d, |j, _| x.column(j).mean());
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        Ok((mu, cov))
    }
}

/// Anything that turns images into fixed-length feature vectors.
pub trait FeatureExtractor {
    fn id(&self) -> String;
    fn embed(&self, images: &[ImageTensor]) -> Result<FeatureSet>;
}

/// Default seed of the random convolutional embedding.
pub const EMBEDDING_SEED: u64 = 0x0F1D;
pub const EMBEDDING_DIM: usize = 64;

/// Fixed, randomly initialized convolutions (three stride-2 layers, widths 16/32/64)
/// followed by global average pooling.
pub struct RandomConvEmbedding {
    convs: Vec<Conv2d>,
    seed: u64,
}

impl RandomConvEmbedding {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let convs = [16, 32, EMBEDDING_DIM]
            .iter()
            .map(|&c| {
                let conv = Conv2d::new(cin, c, 3, 2, 1, &mut rng);
                cin = c;
                conv
            })
            .collect();
        Self { convs, seed }
    }
}

impl Default for RandomConvEmbedding {
    fn default() -> Self {
        Self::new(EMBEDDING_SEED)
    }
}

impl FeatureExtractor for RandomConvEmbedding {
    fn id(&self) -> String {
        format!("random-conv-{EMBEDDING_DIM}(seed={})", self.seed)
    }

    fn embed(&self, images: &[ImageTensor]) -> Result<FeatureSet> {
        let mut features = Vec::with_capacity(images.len());
        for chunk in images.chunks(256) {
            let g = Graph::inference();
            let mut h = g.constant(stack(chunk));
            for c in &self.convs {
                h = c.forward(&h).leaky_relu(LEAKY_SLOPE);
            }
            let s = h.shape();
            let pooled = h.mean_to(&[s[0], s[1], 1, 1]);
            features.extend(pooled.value().data().chunks(s[1]).map(<[f64]>::to_vec));
        }
        FeatureSet::new(features, self.id())
    }
}

/// Eigen-decomposition square root of a symmetric positive semi-definite matrix;
/// negative rounding-level eigenvalues are clamped to zero.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `Tr((A B)^(1/2))` for PSD `A`, `B`, computed as `Tr((A^(1/2) B A^(1/2))^(1/2))`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let ra = sqrt_psd(a);
    let inner = &ra * b * &ra;
    let sym = (&inner + inner.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum()
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(CisError::DimMismatch {
            what: "feature dimension",
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let (mu_a, cov_a) = a.moments()?;
    let (mu_b, cov_b) = b.moments()?;
    fid_from_moments(&mu_a, &cov_a, &mu_b, &cov_b)
}

pub fn fid_from_moments(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64> {
    let diff = (mu_a - mu_b).norm_squared();
    let mut cross = trace_sqrt_product(cov_a, cov_b);
    if !cross.is_finite() {
        // regularize near-singular covariances
        let eps = 1e-6 * DMatrix::identity(cov_a.nrows(), cov_a.ncols());
        cross = trace_sqrt_product(&(cov_a + &eps), &(cov_b + &eps));
    }
    let v = diff + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(CisError::Invalid("FID is not finite".into()))
    }
}

/// Payload in bits per pixel.
pub fn capacity_bpp(n_bits: usize, height: usize, width: usize) -> Result<f64> {
    if height == 0 || width == 0 {
        return Err(CisError::Invalid("image has no pixels".into()));
    }
    Ok(n_bits as f64 / (height * width) as f64)
}

/// Fraction of generated images whose expression, as judged by `classifier`, is the
/// one requested.
pub fn expression_accuracy(model: &StegoModel, classifier: &Classifier, n: usize, seed: u64) -> Result<f64> {
    if !model.has_expression() {
        return Err(CisError::Invalid("model has no expression control".into()));
    }
    if n == 0 {
        return Err(CisError::Empty("sample count"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0;
    let mut left = n;
    while left > 0 {
        let m = left.min(EVAL_CHUNK);
        let labels = random_labels(m, &mut rng);
        let images = match model.variant {
            Variant::Stego => {
                let msgs: Vec<_> = (0..m).map(|_| SecretMessage::random(model.n_bits(), &mut rng)).collect();
                model.encode(&msgs, Some(&labels), &mut rng)?
            }
            Variant::Baseline => {
                let sig = Tensor::from_fn(&[m, model.n_bits()], |_| rng.sample(rand_distr::StandardNormal));
                model.generate_signals(&sig, Some(&labels), &mut rng)?
            }
        };
        let pred = classifier.predict(&images)?;
        hits += pred.iter().zip(&labels).filter(|(p, l)| **p == l.index()).count();
        left -= m;
    }
    Ok(hits as f64 / n as f64)
}
