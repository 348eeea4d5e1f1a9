//! Adversarial training.
//!
//! Each step first updates the critic on
//! `L_d = λ1·L_advd + λ2·L_attd + GP`, then the mapping networks, generator and extractor
//! on `L_g = λ3·L_advg + λ4·L_attg + λ5·L_e`. Secret bits are drawn afresh for every sample
//! and the channel is drawn uniformly from the configured set once per step.

use std::io::Write;
use std::path::{Path, PathBuf};

use cisnet_autograd::{Adam, Graph, Module, Param, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::adversary::{
    att_d_loss_var, att_g_loss_var, gradient_penalty_with, wgan_d_loss_var, wgan_g_loss_var,
    AdversaryParams,
};
use crate::channel::{apply_channel_var, ChannelSpec};
use crate::checkpoint::ModelCheckpoint;
use crate::config::{Lambdas, TrainConfig};
use crate::data::Dataset;
use crate::error::{CisError, Result};
use crate::extractor::{extractor_loss_var, ExtractorParams};
use crate::image::stack;
use crate::message::{onehot_batch, ExpressionLabel, N_EXPRESSIONS};
use crate::model::{StegoModel, Variant};

/// Every loss component of one step; weighted totals are exactly what was minimized.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize)]
pub struct LossReport {
    pub step: u64,
    pub adv_d: f64,
    pub att_d: f64,
    pub gp: f64,
    pub l_d: f64,
    pub adv_g: f64,
    pub att_g: f64,
    pub ext: f64,
    pub l_g: f64,
    /// λ4 in effect for this step (after the schedule).
    pub lambda4: f64,
    pub channel: String,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,adv_d,att_d,gp,l_d,adv_g,att_g,ext,l_g,lambda4,channel";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.adv_d,
            self.att_d,
            self.gp,
            self.l_d,
            self.adv_g,
            self.att_g,
            self.ext,
            self.l_g,
            self.lambda4,
            self.channel
        )
    }
}

/// Everything random in a critic update, drawn up front.
#[derive(Clone, Debug)]
pub struct CriticInputs {
    pub real: Tensor,
    pub real_labels: Option<Vec<usize>>,
    /// Generator output, held constant for this update.
    pub fake: Tensor,
    /// Interpolation weight per sample for the gradient penalty.
    pub alpha: Tensor,
}

/// Everything random in a generator update, drawn up front.
#[derive(Clone, Debug)]
pub struct GeneratorInputs {
    /// `[N, n_bits]`: bits as `±1`, or standard normal for the baseline.
    pub signal: Tensor,
    pub target_labels: Option<Vec<usize>>,
    pub noise: Vec<Tensor>,
}

/// Critic loss parts as graph values.
pub struct CriticLoss {
    pub adv: Var,
    pub att: Option<Var>,
    pub gp: Var,
    pub total: Var,
}

pub struct GeneratorLoss {
    pub adv: Option<Var>,
    pub att: Option<Var>,
    pub ext: Option<Var>,
    pub total: Var,
}

fn labels_var(g: &Graph, labels: &Option<Vec<usize>>) -> Result<Option<Var>> {
    labels
        .as_ref()
        .map(|l| {
            let l = l.iter().map(|&i| ExpressionLabel::new(i)).collect::<Result<Vec<_>>>()?;
            Ok(g.constant(onehot_batch(&l)))
        })
        .transpose()
}

/// `L_d` for fixed inputs. A zero weight drops its term from the graph.
pub fn critic_loss(
    adversary: &AdversaryParams,
    g: &Graph,
    inputs: &CriticInputs,
    lambdas: &Lambdas,
    lambda_gp: f64,
) -> Result<CriticLoss> {
    let real = g.constant(inputs.real.clone());
    let fake = g.constant(inputs.fake.clone());
    let (real_scores, real_logits) = adversary.forward(&real)?;
    let fake_scores = adversary.score(&fake)?;
    let adv = wgan_d_loss_var(&real_scores, &fake_scores)?;
    let mut total = adv.mul_scalar(lambdas.adv_d);
    let att = match (real_logits, &inputs.real_labels) {
        (Some(logits), Some(labels)) if lambdas.att_d > 0.0 => {
            let l = att_d_loss_var(&logits, labels)?;
            total = &total + &l.mul_scalar(lambdas.att_d);
            Some(l)
        }
        _ => None,
    };
    let gp = gradient_penalty_with(|x| adversary.score(x), &real, &fake, &inputs.alpha, lambda_gp)?;
    total = &total + &gp;
    Ok(CriticLoss { adv, att, gp, total })
}

/// `L_g` for fixed inputs. `channel` maps generated images to what the extractor sees.
pub fn generator_loss(
    model: &StegoModel,
    g: &Graph,
    inputs: &GeneratorInputs,
    lambdas: &Lambdas,
    lambda4: f64,
    channel: &mut dyn FnMut(&Var) -> Result<Var>,
) -> Result<GeneratorLoss> {
    let signal = g.constant(inputs.signal.clone());
    let onehot = labels_var(g, &inputs.target_labels)?;
    let fake = model.generate_var(&signal, onehot.as_ref(), &inputs.noise)?;
    let mut total = g.constant(Tensor::scalar(0.0));
    let (mut adv, mut att, mut ext) = (None, None, None);
    if lambdas.adv_g > 0.0 || lambda4 > 0.0 {
        let (scores, logits) = model.adversary.forward(&fake)?;
        if lambdas.adv_g > 0.0 {
            let l = wgan_g_loss_var(&scores)?;
            total = &total + &l.mul_scalar(lambdas.adv_g);
            adv = Some(l);
        }
        if let (true, Some(logits), Some(targets)) = (lambda4 > 0.0, logits, &inputs.target_labels) {
            let l = att_g_loss_var(&logits, targets)?;
            total = &total + &l.mul_scalar(lambda4);
            att = Some(l);
        }
    }
    if lambdas.ext > 0.0 {
        if let Some(extractor) = &model.extractor {
            let received = channel(&fake)?;
            let l = extractor_loss_var(&signal, &extractor.forward(&received)?)?;
            total = &total + &l.mul_scalar(lambdas.ext);
            ext = Some(l);
        }
    }
    Ok(GeneratorLoss { adv, att, ext, total })
}

fn finite(v: f64, component: &str, step: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(CisError::NonFinite {
            component: component.to_string(),
            step,
        })
    }
}

fn opt_value(v: &Option<Var>, component: &str, step: u64) -> Result<f64> {
    v.as_ref().map_or(Ok(0.0), |v| finite(v.item(), component, step))
}

/// Owns a model, its optimizers and the single random stream that drives training.
pub struct Trainer {
    pub model: StegoModel,
    opt_d: Adam,
    opt_g: Adam,
    rng: ChaCha8Rng,
    step: u64,
    lambdas: Lambdas,
    lambda4: f64,
    att_ema: Option<f64>,
    channels: Vec<ChannelSpec>,
}

impl Trainer {
    pub fn new(config: &TrainConfig, variant: Variant) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = StegoModel::new(config, variant, &mut rng)?;
        Self::from_model(model, rng)
    }

    pub fn from_model(model: StegoModel, rng: ChaCha8Rng) -> Result<Self> {
        let cfg = &model.config;
        let mut lambdas = cfg.lambdas();
        if model.variant == Variant::Baseline {
            lambdas.ext = 0.0;
        }
        let adam = || Adam::with_betas(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
        Ok(Self {
            opt_d: adam(),
            opt_g: adam(),
            lambda4: lambdas.att_g,
            lambdas,
            att_ema: None,
            channels: cfg.channel_specs()?,
            step: 0,
            rng,
            model,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn lambdas(&self) -> Lambdas {
        self.lambdas
    }

    /// λ4 after the schedule.
    pub fn current_lambda4(&self) -> f64 {
        self.lambda4
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint::new(self.model.clone(), self.step, &self.rng)
    }

    fn draw_signal(&mut self, n: usize) -> Tensor {
        let bits = self.model.n_bits();
        match self.model.variant {
            Variant::Stego => Tensor::from_fn(&[n, bits], |_| if self.rng.random::<bool>() { 1.0 } else { -1.0 }),
            Variant::Baseline => Tensor::from_fn(&[n, bits], |_| self.rng.sample(StandardNormal)),
        }
    }

    fn draw_labels(&mut self, n: usize) -> Option<Vec<usize>> {
        self.model
            .has_expression()
            .then(|| (0..n).map(|_| self.rng.random_range(0..N_EXPRESSIONS)).collect())
    }

    pub fn draw_generator_inputs(&mut self, n: usize) -> GeneratorInputs {
        let signal = self.draw_signal(n);
        let target_labels = self.draw_labels(n);
        let noise = self.model.generator.sample_noise(n, &mut self.rng);
        GeneratorInputs {
            signal,
            target_labels,
            noise,
        }
    }

    /// Generator output for `inputs` without recording a tape.
    pub fn synthesize(&self, inputs: &GeneratorInputs) -> Result<Tensor> {
        let g = Graph::inference();
        let onehot = labels_var(&g, &inputs.target_labels)?;
        let out = self
            .model
            .generate_var(&g.constant(inputs.signal.clone()), onehot.as_ref(), &inputs.noise)?;
        Ok(out.value().as_ref().clone())
    }

    /// One critic update and one generator-side update on a batch of real images
    /// (`[N, 3, 32, 32]`) with their labels in expression mode.
    pub fn train_step(&mut self, real: &Tensor, real_labels: Option<&[usize]>) -> Result<LossReport> {
        let n = real.shape()[0];
        if n == 0 {
            return Err(CisError::Empty("training batch"));
        }
        if self.model.has_expression() && real_labels.is_none() {
            return Err(CisError::Invalid("expression training needs labelled images".into()));
        }
        let step = self.step;
        let cfg = self.model.config.clone();
        let mut report = LossReport {
            step,
            ..Default::default()
        };

        for _ in 0..cfg.critic_steps {
            let gen_in = self.draw_generator_inputs(n);
            let fake = self.synthesize(&gen_in)?;
            let alpha = Tensor::from_fn(&[n], |_| self.rng.random::<f64>());
            let inputs = CriticInputs {
                real: real.clone(),
                real_labels: real_labels.map(<[usize]>::to_vec),
                fake,
                alpha,
            };
            let g = Graph::new();
            let loss = critic_loss(&self.model.adversary, &g, &inputs, &self.lambdas, cfg.lambda_gp)?;
            report.adv_d = finite(loss.adv.item(), "L_advd", step)?;
            report.att_d = opt_value(&loss.att, "L_attd", step)?;
            report.gp = finite(loss.gp.item(), "gradient penalty", step)?;
            report.l_d = finite(loss.total.item(), "L_d", step)?;
            let grads = g.backward(&loss.total);
            self.opt_d.step(self.model.adversary.params_mut(), &grads);
        }

        let spec = self.channels[self.rng.random_range(0..self.channels.len())];
        report.channel = spec.to_string();
        let gen_in = self.draw_generator_inputs(n);
        let mut channel_rng = ChaCha8Rng::seed_from_u64(self.rng.next_u64());
        let mut channel = |x: &Var| apply_channel_var(x, &spec, &mut channel_rng);
        let g = Graph::new();
        g.freeze(self.model.adversary.params());
        let loss = generator_loss(&self.model, &g, &gen_in, &self.lambdas, self.lambda4, &mut channel)?;
        report.adv_g = opt_value(&loss.adv, "L_advg", step)?;
        report.att_g = opt_value(&loss.att, "L_attg", step)?;
        report.ext = opt_value(&loss.ext, "L_e", step)?;
        report.l_g = finite(loss.total.item(), "L_g", step)?;
        report.lambda4 = self.lambda4;
        let grads = g.backward(&loss.total);
        let model = &mut self.model;
        let mut gen_side: Vec<&mut Param> = model.mapping.params_mut();
        gen_side.extend(model.generator.params_mut());
        gen_side.extend(model.extractor.params_mut());
        self.opt_g.step(gen_side, &grads);

        if loss.att.is_some() {
            self.update_lambda4(report.att_g);
        }
        self.step += 1;
        Ok(report)
    }

    /// Moving average of `L_attg`; λ4 drops to zero for good once it falls below the threshold.
    fn update_lambda4(&mut self, att_g: f64) {
        let cfg = &self.model.config;
        let ema = match self.att_ema {
            None => att_g,
            Some(e) => cfg.att_ema_decay * e + (1.0 - cfg.att_ema_decay) * att_g,
        };
        self.att_ema = Some(ema);
        if ema < cfg.att_threshold {
            self.lambda4 = 0.0;
        }
    }
}

/// Where `train` writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// Append-only CSV, one row per logged step.
    pub loss_log: Option<PathBuf>,
    /// Directory for periodic checkpoints (`step_0001000.ck`, ...).
    pub checkpoint_dir: Option<PathBuf>,
}

fn check_dataset(config: &TrainConfig, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(CisError::Empty("dataset"));
    }
    if config.expression && data.labels.is_none() {
        return Err(CisError::Config(format!(
            "expression training needs a labelled dataset; {} has no labels",
            data.source
        )));
    }
    Ok(())
}

/// Seeded epoch-wise shuffling; batches never straddle an epoch boundary.
struct BatchOrder {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchOrder {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn next(&mut self, batch: usize) -> Vec<usize> {
        let batch = batch.min(self.order.len());
        if self.pos + batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + batch].to_vec();
        self.pos += batch;
        out
    }
}

fn log_writer(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let exists = path.exists() && std::fs::metadata(path)?.len() > 0;
    let f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = std::io::BufWriter::new(f);
    if !exists {
        writeln!(w, "{}", LossReport::CSV_HEADER)?;
    }
    Ok(w)
}

fn run(
    mut trainer: Trainer,
    data: &Dataset,
    out: &TrainOutputs,
    mut on_report: impl FnMut(&LossReport),
) -> Result<ModelCheckpoint> {
    let cfg = trainer.model.config.clone();
    check_dataset(&cfg, data)?;
    let mut batches = BatchOrder::new(data.len(), trainer.rng.next_u64());
    let mut log = out.loss_log.as_deref().map(log_writer).transpose()?;
    for _ in 0..cfg.max_steps {
        let idx = batches.next(cfg.batch_size);
        let imgs: Vec<_> = idx.iter().map(|&i| data.images[i].clone()).collect();
        let labels: Option<Vec<usize>> = data
            .labels
            .as_ref()
            .filter(|_| cfg.expression)
            .map(|l| idx.iter().map(|&i| l[i].index()).collect());
        let report = trainer.train_step(&stack(&imgs), labels.as_deref())?;
        let logged = cfg.log_every > 0 && (report.step % cfg.log_every == 0 || report.step + 1 == cfg.max_steps);
        if logged {
            if let Some(w) = &mut log {
                writeln!(w, "{}", report.csv_row())?;
                w.flush()?;
            }
            on_report(&report);
        }
        if let (Some(dir), true) = (&out.checkpoint_dir, cfg.checkpoint_every > 0) {
            if trainer.step.is_multiple_of(cfg.checkpoint_every) {
                trainer.checkpoint().save(&dir.join(format!("step_{:07}.ck", trainer.step)))?;
            }
        }
    }
    Ok(trainer.checkpoint())
}

/// Train a stego model from scratch.
pub fn train(
    config: &TrainConfig,
    data: &Dataset,
    out: &TrainOutputs,
    on_report: impl FnMut(&LossReport),
) -> Result<ModelCheckpoint> {
    check_dataset(config, data)?;
    run(Trainer::new(config, Variant::Stego)?, data, out, on_report)
}

/// Same architecture and adversarial losses, standard-normal inputs, no extractor.
pub fn train_baseline_gan(
    config: &TrainConfig,
    data: &Dataset,
    out: &TrainOutputs,
    on_report: impl FnMut(&LossReport),
) -> Result<ModelCheckpoint> {
    check_dataset(config, data)?;
    run(Trainer::new(config, Variant::Baseline)?, data, out, on_report)
}

/// Settings for training a new extractor against a frozen generator.
#[derive(Clone, Debug)]
pub struct RetrainOptions {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Train a fresh extractor on generator outputs sent through `channels`, minimizing the
/// extractor loss only. The model is read, never modified.
pub fn retrain_extractor(
    model: &StegoModel,
    channels: &[ChannelSpec],
    opts: &RetrainOptions,
    mut on_step: impl FnMut(u64, f64),
) -> Result<ExtractorParams> {
    if channels.is_empty() {
        return Err(CisError::Empty("channel list"));
    }
    if model.variant != Variant::Stego {
        return Err(CisError::Invalid("only stego models carry a message".into()));
    }
    for c in channels {
        c.validate()?;
    }
    let cfg = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut extractor = ExtractorParams::new(&cfg.extractor_config(), &mut rng);
    let mut opt = Adam::with_betas(opts.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let n = opts.batch_size.max(1);
    for step in 0..opts.steps {
        let signal = Tensor::from_fn(&[n, model.n_bits()], |_| if rng.random::<bool>() { 1.0 } else { -1.0 });
        let labels: Option<Vec<ExpressionLabel>> = model.has_expression().then(|| {
            (0..n)
                .map(|_| ExpressionLabel::new(rng.random_range(0..N_EXPRESSIONS)).expect("valid class"))
                .collect()
        });
        let images = model.generate_signals(&signal, labels.as_deref(), &mut rng)?;
        let spec = channels[rng.random_range(0..channels.len())];
        let g = Graph::new();
        let received = apply_channel_var(&g.constant(stack(&images)), &spec, &mut rng)?;
        let loss = extractor_loss_var(&g.constant(signal), &extractor.forward(&received)?)?;
        let l = finite(loss.item(), "L_e", step)?;
        let grads = g.backward(&loss);
        opt.step(extractor.params_mut(), &grads);
        on_step(step, l);
    }
    Ok(extractor)
}

trait ParamsMut {
    fn params_mut(&mut self) -> Vec<&mut Param>;
}

impl<M: Module> ParamsMut for M {
    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.named_params_mut().into_iter().map(|(_, p)| p).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic_sprites;
    use crate::gradcheck::{check_param_gradients, GradCheckOptions};
    use crate::model::tests::tiny_config;

    fn sprites(n: usize) -> Dataset {
        make_synthetic_sprites(n, 0, 7).unwrap()
    }

    fn batch(data: &Dataset, n: usize) -> (Tensor, Vec<usize>) {
        let t = stack(&data.images[..n]);
        let l = data.labels.as_ref().unwrap()[..n].iter().map(|l| l.index()).collect();
        (t, l)
    }

    fn snapshot(m: &StegoModel) -> Vec<(String, Vec<f64>)> {
        m.named_params()
            .into_iter()
            .map(|(n, p)| (n, p.value().data().to_vec()))
            .collect()
    }

    #[test]
    fn zero_weights_leave_parameters_unchanged() {
        let cfg = TrainConfig {
            lambda1: Some(0.0),
            lambda2: Some(0.0),
            lambda3: Some(0.0),
            lambda4: Some(0.0),
            lambda5: Some(0.0),
            lambda_gp: 0.0,
            ..tiny_config(4, true)
        };
        let mut t = Trainer::new(&cfg, Variant::Stego).unwrap();
        let before = snapshot(&t.model);
        let (x, l) = batch(&sprites(4), 4);
        t.train_step(&x, Some(&l)).unwrap();
        assert_eq!(snapshot(&t.model), before);
    }

    #[test]
    fn components_touch_only_their_parameters() {
        // extractor loss only: the critic must stay put
        let cfg = TrainConfig {
            lambda1: Some(0.0),
            lambda3: Some(0.0),
            lambda_gp: 0.0,
            ..tiny_config(4, false)
        };
        let mut t = Trainer::new(&cfg, Variant::Stego).unwrap();
        let before = snapshot(&t.model);
        let (x, _) = batch(&sprites(4), 4);
        t.train_step(&x, None).unwrap();
        for ((name, a), (_, b)) in before.iter().zip(snapshot(&t.model)) {
            let changed = *a != b;
            if name.starts_with("adversary") {
                assert!(!changed, "{name} moved");
            } else if name.starts_with("extractor") || name.starts_with("mapping") {
                assert!(changed, "{name} did not move");
            }
        }

        // adversarial terms only: the extractor must stay put
        let cfg = TrainConfig {
            lambda5: Some(0.0),
            ..tiny_config(4, false)
        };
        let mut t = Trainer::new(&cfg, Variant::Stego).unwrap();
        let before = snapshot(&t.model);
        t.train_step(&x, None).unwrap();
        for ((name, a), (_, b)) in before.iter().zip(snapshot(&t.model)) {
            if name.starts_with("extractor") {
                assert_eq!(a, &b, "{name} moved");
            }
            // the source bias cancels in the Wasserstein loss
            if name == "adversary.d_src.weight" {
                assert_ne!(a, &b, "{name} did not move");
            }
        }
    }

    #[test]
    fn report_recombines_to_totals() {
        let cfg = tiny_config(4, true);
        let mut t = Trainer::new(&cfg, Variant::Stego).unwrap();
        let l = t.lambdas();
        let data = sprites(8);
        for _ in 0..3 {
            let (x, lab) = batch(&data, 4);
            let r = t.train_step(&x, Some(&lab)).unwrap();
            let ld = l.adv_d * r.adv_d + l.att_d * r.att_d + r.gp;
            let lg = l.adv_g * r.adv_g + r.lambda4 * r.att_g + l.ext * r.ext;
            assert!((ld - r.l_d).abs() <= 1e-6, "{ld} vs {}", r.l_d);
            assert!((lg - r.l_g).abs() <= 1e-6, "{lg} vs {}", r.l_g);
            assert!(r.att_d > 0.0 && r.att_g > 0.0 && r.ext > 0.0);
        }
    }

    #[test]
    fn lambda4_switches_off_below_threshold() {
        let cfg = TrainConfig {
            att_threshold: 1e9,
            ..tiny_config(4, true)
        };
        let mut t = Trainer::new(&cfg, Variant::Stego).unwrap();
        assert_eq!(t.current_lambda4(), 0.1);
        let (x, l) = batch(&sprites(4), 4);
        let r = t.train_step(&x, Some(&l)).unwrap();
        assert_eq!(r.lambda4, 0.1);
        assert_eq!(t.current_lambda4(), 0.0);
        let r = t.train_step(&x, Some(&l)).unwrap();
        assert_eq!(r.lambda4, 0.0);

        // never triggered with an unreachable threshold
        let cfg = TrainConfig {
            att_threshold: 0.0,
            ..tiny_config(4, true)
        };
        let mut t = Trainer::new(&cfg, Variant::Stego).unwrap();
        t.train_step(&x, Some(&l)).unwrap();
        assert_eq!(t.current_lambda4(), 0.1);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig {
            max_steps: 3,
            log_every: 1,
            channels: vec!["jpeg:70".into(), "gaussian_noise:0.05".into(), "identity".into()],
            ..tiny_config(4, false)
        };
        let data = sprites(10);
        let run_once = || {
            let mut log = Vec::new();
            let ck = train(&cfg, &data, &TrainOutputs::default(), |r| log.push(r.clone())).unwrap();
            (snapshot(&ck.model), log)
        };
        let (a, la) = run_once();
        let (b, lb) = run_once();
        assert_eq!(la.len(), 3);
        assert_eq!(la, lb);
        assert_eq!(a, b);
    }

    #[test]
    fn dataset_errors() {
        let cfg = tiny_config(4, true);
        let mut data = sprites(4);
        data.labels = None;
        let err = train(&cfg, &data, &TrainOutputs::default(), |_| {});
        assert!(matches!(err, Err(CisError::Config(_))));
        let mut t = Trainer::new(&cfg, Variant::Stego).unwrap();
        assert!(t.train_step(&stack(&data.images), None).is_err());
    }

    #[test]
    fn loss_log_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            max_steps: 4,
            log_every: 2,
            checkpoint_every: 2,
            ..tiny_config(4, false)
        };
        let out = TrainOutputs {
            loss_log: Some(dir.path().join("loss.csv")),
            checkpoint_dir: Some(dir.path().join("ck")),
        };
        let ck = train(&cfg, &sprites(6), &out, |_| {}).unwrap();
        assert_eq!(ck.step, 4);
        let log = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        let lines: Vec<_> = log.lines().collect();
        assert_eq!(lines[0], LossReport::CSV_HEADER);
        // steps 0, 2 and the final step 3
        assert_eq!(lines.len(), 4);
        assert!(dir.path().join("ck/step_0000002.ck").exists());
        assert!(dir.path().join("ck/step_0000004.ck").exists());
    }

    #[test]
    fn baseline_training_runs() {
        let cfg = TrainConfig {
            max_steps: 2,
            ..tiny_config(4, false)
        };
        let ck = train_baseline_gan(&cfg, &sprites(4), &TrainOutputs::default(), |_| {}).unwrap();
        assert_eq!(ck.model.variant, Variant::Baseline);
        assert!(ck.model.extractor.is_none());
    }

    #[test]
    fn retraining_leaves_generator_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = StegoModel::new(&tiny_config(4, false), Variant::Stego, &mut rng).unwrap();
        let before = snapshot(&model);
        let opts = RetrainOptions {
            steps: 3,
            batch_size: 4,
            lr: 1e-3,
            seed: 0,
        };
        let mut losses = Vec::new();
        let spec = [ChannelSpec::GaussianNoise { sigma: 0.05 }];
        let ext = retrain_extractor(&model, &spec, &opts, |_, l| losses.push(l)).unwrap();
        assert_eq!(losses.len(), 3);
        assert_eq!(snapshot(&model), before);
        assert_eq!(ext.n_bits(), 4);
        assert!(retrain_extractor(&model, &[], &opts, |_, _| {}).is_err());
    }

    #[test]
    fn generator_loss_gradients_with_fixed_jpeg_residual() {
        let cfg = tiny_config(4, true);
        let mut t = Trainer::new(&cfg, Variant::Stego).unwrap();
        let inputs = t.draw_generator_inputs(2);
        let lambdas = t.lambdas();
        let mut model = t.model.clone();
        // residual measured once at the base parameters
        let g = Graph::inference();
        let fake = model
            .generate_var(
                &g.constant(inputs.signal.clone()),
                labels_var(&g, &inputs.target_labels).unwrap().as_ref(),
                &inputs.noise,
            )
            .unwrap();
        let (_, residual) = crate::channel::pseudo_jpeg_var(&fake, 60).unwrap();
        let report = check_param_gradients(
            &mut model,
            |m, g| {
                let mut ch = |x: &Var| Ok(crate::channel::subtract_residual(x, &residual));
                generator_loss(m, g, &inputs, &lambdas, 0.1, &mut ch).unwrap().total
            },
            GradCheckOptions {
                fraction: 0.05,
                ..Default::default()
            },
        );
        assert!(report.passed(), "{:?}", report.failures);
    }

    #[test]
    fn critic_loss_gradients() {
        let cfg = tiny_config(4, true);
        let mut t = Trainer::new(&cfg, Variant::Stego).unwrap();
        let data = sprites(3);
        let (real, labels) = batch(&data, 3);
        let gen_in = t.draw_generator_inputs(3);
        let inputs = CriticInputs {
            real,
            real_labels: Some(labels),
            fake: t.synthesize(&gen_in).unwrap(),
            alpha: Tensor::new(&[3], vec![0.2, 0.5, 0.9]),
        };
        let lambdas = t.lambdas();
        let mut adv = t.model.adversary.clone();
        let report = check_param_gradients(
            &mut adv,
            |a, g| critic_loss(a, g, &inputs, &lambdas, 50.0).unwrap().total,
            GradCheckOptions {
                fraction: 0.2,
                ..Default::default()
            },
        );
        assert!(report.passed(), "{:?}", report.failures);
    }
}
