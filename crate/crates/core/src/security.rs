//! Steganalysis harness: SRM residuals, detector training, and the generalization
//! experiment that trains on one (baseline, stego) pair and tests on other stego models.

use std::path::Path;

use cisnet_autograd::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::channel::{reflect_index, CODEC_ID};
use crate::classifier::{fit_classifier, Arch, Classifier, FitOptions};
use crate::error::{CisError, Result};
use crate::image::{ImageTensor, IMAGE_SIZE};
use crate::message::{ExpressionLabel, SecretMessage, N_EXPRESSIONS};
use crate::model::{StegoModel, Variant};

/// First-order horizontal difference; taps at offsets 0 and +1.
pub const SRM_FIRST_ORDER: [f64; 2] = [-1.0, 1.0];

/// 3x3 "SQUARE" kernel, divisor 4.
pub const SRM_SQUARE3: [[f64; 3]; 3] = [
    [-0.25, 0.5, -0.25],
    [0.5, -1.0, 0.5],
    [-0.25, 0.5, -0.25],
];

/// 5x5 "KV" kernel, divisor 12.
pub const SRM_KV: [[f64; 5]; 5] = [
    [-1.0 / 12.0, 2.0 / 12.0, -2.0 / 12.0, 2.0 / 12.0, -1.0 / 12.0],
    [2.0 / 12.0, -6.0 / 12.0, 8.0 / 12.0, -6.0 / 12.0, 2.0 / 12.0],
    [-2.0 / 12.0, 8.0 / 12.0, -12.0 / 12.0, 8.0 / 12.0, -2.0 / 12.0],
    [2.0 / 12.0, -6.0 / 12.0, 8.0 / 12.0, -6.0 / 12.0, 2.0 / 12.0],
    [-1.0 / 12.0, 2.0 / 12.0, -2.0 / 12.0, 2.0 / 12.0, -1.0 / 12.0],
];

fn correlate(plane: &[f64], h: usize, w: usize, taps: &[(isize, isize, f64)]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .map(|&(dy, dx, k)| {
                    let yy = reflect_index(y as isize + dy, h);
                    let xx = reflect_index(x as isize + dx, w);
                    k * plane[yy * w + xx]
                })
                .sum();
        }
    }
    out
}

fn square_taps<const K: usize>(k: &[[f64; K]; K]) -> Vec<(isize, isize, f64)> {
    let r = (K / 2) as isize;
    (0..K)
        .flat_map(|i| (0..K).map(move |j| (i as isize - r, j as isize - r, k[i][j])))
        .collect()
}

/// Three high-pass residual planes of the channel-averaged image, same size as the
/// input, with reflect padding.
pub fn srm_residuals(img: &ImageTensor) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    let d = img.tensor().data();
    let plane: Vec<f64> = (0..h * w)
        .map(|i| (d[i] + d[h * w + i] + d[2 * h * w + i]) / 3.0)
        .collect();
    let first = correlate(&plane, h, w, &[(0, 0, SRM_FIRST_ORDER[0]), (0, 1, SRM_FIRST_ORDER[1])]);
    let square = correlate(&plane, h, w, &square_taps(&SRM_SQUARE3));
    let kv = correlate(&plane, h, w, &square_taps(&SRM_KV));
    let mut data = first;
    data.extend(square);
    data.extend(kv);
    ImageTensor::new(Tensor::new(&[3, h, w], data)).expect("finite residuals")
}

/// SRM residuals for a batch of 32x32 images, `[N, 3, 32, 32]`.
pub fn srm_batch(images: &[ImageTensor]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(CisError::Empty("residual batch"));
    }
    let mut data = Vec::with_capacity(images.len() * 3 * IMAGE_SIZE * IMAGE_SIZE);
    for img in images {
        if img.height() != IMAGE_SIZE || img.width() != IMAGE_SIZE {
            return Err(CisError::Invalid(format!(
                "expected 32x32 images, got {}x{}",
                img.height(),
                img.width()
            )));
        }
        data.extend_from_slice(srm_residuals(img).tensor().data());
    }
    Ok(Tensor::new(&[images.len(), 3, IMAGE_SIZE, IMAGE_SIZE], data))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub arch: Arch,
    pub fit: FitOptions,
    /// Images drawn from each model per repetition.
    pub n_per_class: usize,
    /// Fraction of each class held out for validation.
    pub holdout: f64,
}

impl Default for DetectorSpec {
    fn default() -> Self {
        Self {
            arch: Arch::SimpleCnn,
            fit: FitOptions::default(),
            n_per_class: 1000,
            holdout: 0.2,
        }
    }
}

/// A binary detector; class 1 is "stego".
#[derive(Clone, Debug)]
pub struct Detector {
    pub classifier: Classifier,
    pub heldout_accuracy: f64,
}

/// Train on `pos` (stego, label 1) against `neg` (clean, label 0) with a disjoint
/// per-class train/validation split.
pub fn train_detector(pos: &[ImageTensor], neg: &[ImageTensor], spec: &DetectorSpec) -> Result<Detector> {
    if pos.is_empty() || neg.is_empty() {
        return Err(CisError::Empty("detector class"));
    }
    if !(0.0..1.0).contains(&spec.holdout) {
        return Err(CisError::Invalid(format!("holdout fraction {} outside [0, 1)", spec.holdout)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.fit.seed ^ 0x5eed_de7e);
    let split = |set: &[ImageTensor], rng: &mut ChaCha8Rng| {
        let mut idx: Vec<usize> = (0..set.len()).collect();
        idx.shuffle(rng);
        let n_val = ((set.len() as f64 * spec.holdout).round() as usize).min(set.len() - 1);
        let (val, train) = idx.split_at(n_val);
        (
            train.iter().map(|&i| set[i].clone()).collect::<Vec<_>>(),
            val.iter().map(|&i| set[i].clone()).collect::<Vec<_>>(),
        )
    };
    let (pos_train, pos_val) = split(pos, &mut rng);
    let (neg_train, neg_val) = split(neg, &mut rng);
    let mut images = pos_train.clone();
    images.extend(neg_train.iter().cloned());
    let mut labels = vec![1; pos_train.len()];
    labels.extend(vec![0; neg_train.len()]);
    let (classifier, _) = fit_classifier(spec.arch, &images, &labels, 2, &spec.fit)?;

    let mut val = pos_val.clone();
    val.extend(neg_val.iter().cloned());
    let heldout_accuracy = if val.is_empty() {
        f64::NAN
    } else {
        let mut vl = vec![1; pos_val.len()];
        vl.extend(vec![0; neg_val.len()]);
        classifier.accuracy(&val, &vl)?
    };
    Ok(Detector {
        classifier,
        heldout_accuracy,
    })
}

/// Fraction of `images` the detector assigns to `true_label` (1 = stego).
pub fn eval_detector(det: &Detector, images: &[ImageTensor], true_label: usize) -> Result<f64> {
    det.classifier.accuracy(images, &vec![true_label; images.len()])
}

/// `n` images from a model: random bits for stego models, standard-normal inputs for
/// the baseline, uniformly random expression labels when the model takes them.
pub fn sample_images<R: Rng + ?Sized>(model: &StegoModel, n: usize, rng: &mut R) -> Result<Vec<ImageTensor>> {
    let mut out = Vec::with_capacity(n);
    let mut left = n;
    while left > 0 {
        let m = left.min(256);
        let labels: Option<Vec<ExpressionLabel>> = model.has_expression().then(|| {
            (0..m)
                .map(|_| ExpressionLabel::new(rng.random_range(0..N_EXPRESSIONS)).expect("valid class"))
                .collect()
        });
        let imgs = match model.variant {
            Variant::Stego => {
                let msgs: Vec<_> = (0..m).map(|_| SecretMessage::random(model.n_bits(), rng)).collect();
                model.encode(&msgs, labels.as_deref(), rng)?
            }
            Variant::Baseline => {
                let sig = Tensor::from_fn(&[m, model.n_bits()], |_| rng.sample(StandardNormal));
                model.generate_signals(&sig, labels.as_deref(), rng)?
            }
        };
        out.extend(imgs);
        left -= m;
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TargetRow {
    pub name: String,
    pub variant: Variant,
    /// Detection accuracy per repetition (fraction flagged as stego).
    pub accuracies: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneralizationReport {
    pub spec: DetectorSpec,
    pub repetitions: usize,
    pub seed: u64,
    pub codec: String,
    /// Held-out accuracy on the training pair, per repetition.
    pub heldout: Vec<f64>,
    pub heldout_mean: f64,
    pub rows: Vec<TargetRow>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Train a detector on `baseline` vs `reference` images and test it on fresh images
/// from every target, `repetitions` times with independent seeds.
pub fn generalization_experiment(
    baseline: &StegoModel,
    reference: &StegoModel,
    targets: &[(String, &StegoModel)],
    spec: &DetectorSpec,
    repetitions: usize,
    seed: u64,
    mut on_rep: impl FnMut(usize, f64, &[f64]),
) -> Result<GeneralizationReport> {
    if baseline.variant != Variant::Baseline {
        return Err(CisError::Invalid("the first model must be a baseline GAN".into()));
    }
    if reference.variant != Variant::Stego {
        return Err(CisError::Invalid("the reference model must be a stego model".into()));
    }
    if repetitions == 0 {
        return Err(CisError::Empty("repetitions"));
    }
    let mut heldout = Vec::with_capacity(repetitions);
    let mut acc = vec![Vec::with_capacity(repetitions); targets.len()];
    for rep in 0..repetitions {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(rep as u64);
        let neg = sample_images(baseline, spec.n_per_class, &mut rng)?;
        let pos = sample_images(reference, spec.n_per_class, &mut rng)?;
        let rep_spec = DetectorSpec {
            fit: FitOptions {
                seed: rng.random(),
                ..spec.fit
            },
            ..spec.clone()
        };
        let det = train_detector(&pos, &neg, &rep_spec)?;
        heldout.push(det.heldout_accuracy);
        let n_eval = ((spec.n_per_class as f64 * spec.holdout).round() as usize).max(1);
        let mut row_acc = Vec::with_capacity(targets.len());
        for (i, (_, model)) in targets.iter().enumerate() {
            let imgs = sample_images(model, n_eval, &mut rng)?;
            let a = eval_detector(&det, &imgs, 1)?;
            acc[i].push(a);
            row_acc.push(a);
        }
        on_rep(rep, det.heldout_accuracy, &row_acc);
    }
    let rows = targets
        .iter()
        .zip(acc)
        .map(|((name, model), accuracies)| TargetRow {
            name: name.clone(),
            variant: model.variant,
            mean: mean(&accuracies),
            accuracies,
        })
        .collect();
    Ok(GeneralizationReport {
        spec: spec.clone(),
        repetitions,
        seed,
        codec: CODEC_ID.to_string(),
        heldout_mean: mean(&heldout),
        heldout,
        rows,
    })
}

/// One CSV row per image: the model label, then its flattened SRM residuals.
pub fn export_embedding_features(rows: &[(String, ImageTensor)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if let Some((_, first)) = rows.first() {
        let n = 3 * first.height() * first.width();
        let mut header = vec!["label".to_string()];
        header.extend((0..n).map(|i| format!("f{i}")));
        w.write_record(&header)?;
    }
    for (label, img) in rows {
        let mut rec = vec![label.clone()];
        rec.extend(srm_residuals(img).tensor().data().iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a feature table written by [`export_embedding_features`].
pub fn read_feature_csv(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let label = rec.get(0).unwrap_or_default().to_string();
        let vals = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>().map_err(|e| CisError::Invalid(format!("bad feature `{s}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        out.push((label, vals));
    }
    Ok(out)
}
