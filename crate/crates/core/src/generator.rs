//! Style-based synthesis network: learned 4x4 constant, two conv/noise/AdaIN units per
//! resolution up to 32x32, then a 1x1 projection to RGB squashed by tanh.

use cisnet_autograd::param::join;
use cisnet_autograd::{Conv2d, ConvTranspose2d, Graph, Linear, Module, Param, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, CisError, Result};
use crate::image::{ImageTensor, IMAGE_SIZE};
use crate::message::{LatentVector, LEAKY_SLOPE};

pub const ADAIN_EPS: f64 = 1e-8;
pub const UNITS_PER_RESOLUTION: usize = 2;
/// Feature-map side lengths visited by the synthesis network.
pub const RESOLUTIONS: [usize; 4] = [4, 8, 16, 32];
/// Number of style injection points.
pub const N_STYLES: usize = UNITS_PER_RESOLUTION * RESOLUTIONS.len();

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    /// Nearest-neighbour 2x resize followed by the unit's 3x3 convolution.
    #[default]
    Nearest,
    /// A stride-2 transposed convolution replaces resize + convolution.
    Deconv,
}

impl std::str::FromStr for Upsample {
    type Err = CisError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" | "upscale" => Ok(Self::Nearest),
            "deconv" => Ok(Self::Deconv),
            other => Err(CisError::Invalid(format!("unknown upsampling `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    /// Channel width at 4, 8, 16 and 32 pixels.
    pub channels: [usize; 4],
    pub upsample: Upsample,
    pub noise: bool,
}

/// Per-channel feature map `[C, H, W]` for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(pub Tensor);

impl FeatureMap {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.ndim() != 3 {
            return Err(CisError::Invalid(format!(
                "feature map must be [C, H, W], got {:?}",
                t.shape()
            )));
        }
        Ok(Self(t))
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    fn batched(&self) -> Tensor {
        let s = self.0.shape();
        self.0.reshape(&[1, s[0], s[1], s[2]])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleParams {
    pub y_s: Vec<f64>,
    pub y_b: Vec<f64>,
}

#[derive(Clone, Debug)]
pub enum UnitConv {
    Conv(Conv2d),
    Deconv(ConvTranspose2d),
}

impl UnitConv {
    fn out_channels(&self) -> usize {
        match self {
            UnitConv::Conv(c) => c.out_channels(),
            UnitConv::Deconv(d) => d.weight.value().shape()[1],
        }
    }
}

/// conv -> noise -> leaky rectifier -> AdaIN, with its own affine style map `T_k`.
#[derive(Clone, Debug)]
pub struct SynthUnit {
    pub conv: UnitConv,
    pub upsample: bool,
    pub noise_weight: Param,
    pub affine: Linear,
}

#[derive(Clone, Debug)]
pub struct GeneratorParams {
    pub constant: Param,
    pub units: Vec<SynthUnit>,
    pub to_rgb: Conv2d,
    pub noise: bool,
}

/// Affine map whose scale half starts at 1 so every AdaIN begins near identity.
fn style_affine<R: Rng + ?Sized>(latent: usize, channels: usize, rng: &mut R) -> Linear {
    let mut lin = Linear::new(latent, 2 * channels, rng);
    for b in &mut lin.bias.value_mut().data_mut()[..channels] {
        *b += 1.0;
    }
    lin
}

impl GeneratorParams {
    pub fn new<R: Rng + ?Sized>(cfg: &GeneratorConfig, rng: &mut R) -> Self {
        let c0 = cfg.channels[0];
        let constant = Param::new(Tensor::randn(&[1, c0, 4, 4], rng));
        let mut units = Vec::with_capacity(N_STYLES);
        let mut cin = c0;
        for (r, &cout) in cfg.channels.iter().enumerate() {
            for u in 0..UNITS_PER_RESOLUTION {
                let upsample = r > 0 && u == 0;
                let conv = match (upsample, cfg.upsample) {
                    (true, Upsample::Deconv) => {
                        UnitConv::Deconv(ConvTranspose2d::new(cin, cout, 4, 2, 1, rng))
                    }
                    _ => UnitConv::Conv(Conv2d::new(cin, cout, 3, 1, 1, rng)),
                };
                units.push(SynthUnit {
                    conv,
                    upsample,
                    noise_weight: Param::new(Tensor::zeros(&[cout])),
                    affine: style_affine(cfg.latent_dim, cout, rng),
                });
                cin = cout;
            }
        }
        Self {
            constant,
            units,
            to_rgb: Conv2d::new(cin, 3, 1, 1, 0, rng),
            noise: cfg.noise,
        }
    }

    pub fn n_styles(&self) -> usize {
        self.units.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.units[0].affine.input_dim()
    }

    /// One standard-normal single-channel map per unit for a batch of `n`.
    pub fn sample_noise<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Tensor> {
        let mut side = 4;
        self.units
            .iter()
            .map(|u| {
                if u.upsample {
                    side *= 2;
                }
                Tensor::randn(&[n, 1, side, side], rng)
            })
            .collect()
    }

    /// Batched synthesis. `latents` holds one `[N, D]` matrix per style unit and `noise`
    /// one `[N, 1, H, W]` map per unit. Returns `[N, 3, 32, 32]` in `[-1, 1]`.
    pub fn forward(&self, latents: &[Var], noise: &[Tensor]) -> Result<Var> {
        check_dim("latent count", self.n_styles(), latents.len())?;
        check_dim("noise map count", self.n_styles(), noise.len())?;
        let g = latents[0].graph();
        let n = latents[0].shape()[0];
        let c0 = self.constant.value().shape()[1];
        let mut x = g.param(&self.constant).broadcast_to(&[n, c0, 4, 4]);
        for (k, (unit, z)) in self.units.iter().zip(latents).enumerate() {
            x = match &unit.conv {
                UnitConv::Conv(c) if unit.upsample => c.forward(&x.upsample2x()),
                UnitConv::Conv(c) => c.forward(&x),
                UnitConv::Deconv(d) => d.forward(&x),
            };
            if self.noise {
                let w = g.param(&unit.noise_weight);
                x = inject_noise_var(&x, &w, &g.constant(noise[k].clone()))?;
            }
            x = x.leaky_relu(LEAKY_SLOPE);
            let (ys, yb) = affine_style_var(z, &unit.affine, unit.conv.out_channels())?;
            x = adain_var(&x, &ys, &yb)?;
            if !x.value().is_finite() {
                return Err(CisError::NonFiniteLayer { layer: k });
            }
        }
        to_rgb_var(&x, &self.to_rgb)
    }
}

impl Module for SynthUnit {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        match &self.conv {
            UnitConv::Conv(c) => c.collect_params(&join(prefix, "conv"), out),
            UnitConv::Deconv(d) => d.collect_params(&join(prefix, "deconv"), out),
        }
        out.push((join(prefix, "noise_weight"), &self.noise_weight));
        self.affine.collect_params(&join(prefix, "affine"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        match &mut self.conv {
            UnitConv::Conv(c) => c.collect_params_mut(&join(prefix, "conv"), out),
            UnitConv::Deconv(d) => d.collect_params_mut(&join(prefix, "deconv"), out),
        }
        out.push((join(prefix, "noise_weight"), &mut self.noise_weight));
        self.affine.collect_params_mut(&join(prefix, "affine"), out);
    }
}

impl Module for GeneratorParams {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "constant"), &self.constant));
        self.units.collect_params(&join(prefix, "units"), out);
        self.to_rgb.collect_params(&join(prefix, "to_rgb"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "constant"), &mut self.constant));
        self.units.collect_params_mut(&join(prefix, "units"), out);
        self.to_rgb.collect_params_mut(&join(prefix, "to_rgb"), out);
    }
}

/// `[N, D]` latents to per-sample `([N, C], [N, C])` scale and bias.
pub fn affine_style_var(z: &Var, t: &Linear, channels: usize) -> Result<(Var, Var)> {
    check_dim("style latent", t.input_dim(), z.shape()[1])?;
    check_dim("style output", 2 * channels, t.output_dim())?;
    let y = t.forward(z);
    Ok((y.slice_axis(1, 0, channels), y.slice_axis(1, channels, channels)))
}

/// Instance-normalize each channel over its spatial extent (population std, `eps` added to
/// the std) and apply per-sample scale `ys` and bias `yb` of shape `[N, C]`.
pub fn adain_var(x: &Var, ys: &Var, yb: &Var) -> Result<Var> {
    let s = x.shape();
    check_dim("style channels", s[1], ys.shape()[1])?;
    check_dim("style channels", s[1], yb.shape()[1])?;
    let stat = [s[0], s[1], 1, 1];
    let centered = x - &x.mean_to(&stat);
    let sigma = centered.square().mean_to(&stat).sqrt();
    let normalized = &centered / &sigma.add_scalar(ADAIN_EPS);
    Ok(&(&normalized * &ys.reshape(&stat)) + &yb.reshape(&stat))
}

/// `x + w[c] * noise`, the single-channel `noise` shared across channels.
pub fn inject_noise_var(x: &Var, w: &Var, noise: &Var) -> Result<Var> {
    let (xs, ns) = (x.shape(), noise.shape());
    check_dim("noise weights", xs[1], w.shape()[0])?;
    check_dim("noise channels", 1, ns[1])?;
    check_dim("noise height", xs[2], ns[2])?;
    check_dim("noise width", xs[3], ns[3])?;
    Ok(x + &(noise * &w.reshape(&[1, xs[1], 1, 1])))
}

pub fn to_rgb_var(x: &Var, conv: &Conv2d) -> Result<Var> {
    let s = x.shape();
    check_dim("to_rgb resolution", IMAGE_SIZE, s[2])?;
    check_dim("to_rgb resolution", IMAGE_SIZE, s[3])?;
    check_dim("to_rgb channels", conv.in_channels(), s[1])?;
    Ok(conv.forward(x).tanh())
}

pub fn affine_style(z_k: &LatentVector, t: &Linear) -> Result<StyleParams> {
    check_dim("style latent", t.input_dim(), z_k.dim())?;
    let g = Graph::inference();
    let z = g.constant(Tensor::new(&[1, z_k.dim()], z_k.values().to_vec()));
    let (ys, yb) = affine_style_var(&z, t, t.output_dim() / 2)?;
    Ok(StyleParams {
        y_s: ys.value().data().to_vec(),
        y_b: yb.value().data().to_vec(),
    })
}

pub fn adain(x: &FeatureMap, y: &StyleParams) -> Result<FeatureMap> {
    let c = x.channels();
    check_dim("style scale length", c, y.y_s.len())?;
    check_dim("style bias length", c, y.y_b.len())?;
    let g = Graph::inference();
    let out = adain_var(
        &g.constant(x.batched()),
        &g.constant(Tensor::new(&[1, c], y.y_s.clone())),
        &g.constant(Tensor::new(&[1, c], y.y_b.clone())),
    )?;
    Ok(FeatureMap(out.value().reshape(x.0.shape())))
}

pub fn inject_noise(x: &FeatureMap, w: &[f64], noise: &Tensor) -> Result<FeatureMap> {
    let s = x.0.shape();
    if noise.shape() != &s[1..] {
        return Err(CisError::Invalid(format!(
            "noise map {:?} does not match feature map {:?}",
            noise.shape(),
            &s[1..]
        )));
    }
    let g = Graph::inference();
    let out = inject_noise_var(
        &g.constant(x.batched()),
        &g.constant(Tensor::new(&[w.len()], w.to_vec())),
        &g.constant(noise.reshape(&[1, 1, s[1], s[2]])),
    )?;
    Ok(FeatureMap(out.value().reshape(s)))
}

pub fn to_rgb(x: &FeatureMap, p: &GeneratorParams) -> Result<ImageTensor> {
    let g = Graph::inference();
    let out = to_rgb_var(&g.constant(x.batched()), &p.to_rgb)?;
    ImageTensor::new(out.value().reshape(&[3, IMAGE_SIZE, IMAGE_SIZE]))
}

/// Synthesize one image from its per-unit latents; noise maps come from `rng`.
pub fn synthesize<R: Rng + ?Sized>(
    latents: &[LatentVector],
    p: &GeneratorParams,
    rng: &mut R,
) -> Result<ImageTensor> {
    check_dim("latent count", p.n_styles(), latents.len())?;
    let g = Graph::inference();
    let zs = latents
        .iter()
        .map(|z| {
            check_dim("latent dim", p.latent_dim(), z.dim())?;
            Ok(g.constant(Tensor::new(&[1, z.dim()], z.values().to_vec())))
        })
        .collect::<Result<Vec<_>>>()?;
    let noise = p.sample_noise(1, rng);
    let out = p.forward(&zs, &noise)?;
    ImageTensor::new(out.value().reshape(&[3, IMAGE_SIZE, IMAGE_SIZE]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::message::broadcast_latent;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn small_cfg(upsample: Upsample) -> GeneratorConfig {
        GeneratorConfig {
            latent_dim: 8,
            channels: [6, 5, 4, 3],
            upsample,
            noise: true,
        }
    }

    fn randomize_noise_weights(p: &mut GeneratorParams, rng: &mut ChaCha8Rng) {
        for u in &mut p.units {
            let c = u.noise_weight.value().numel();
            u.noise_weight.set(Tensor::randn(&[c], rng));
        }
    }

    fn fmap(c: usize, h: usize, w: usize, data: Vec<f64>) -> FeatureMap {
        FeatureMap::new(Tensor::new(&[c, h, w], data)).unwrap()
    }

    #[test]
    fn adain_oracle_case() {
        let x = fmap(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let y = StyleParams {
            y_s: vec![2.0],
            y_b: vec![1.0],
        };
        let out = adain(&x, &y).unwrap();
        // mean 2.5, population std sqrt(1.25)
        let sigma = 1.25f64.sqrt();
        for (i, v) in [1.0, 2.0, 3.0, 4.0].iter().enumerate() {
            let want = 2.0 * (v - 2.5) / (sigma + ADAIN_EPS) + 1.0;
            assert!((out.0.data()[i] - want).abs() < 1e-12);
        }
        let expect = [-1.68328, 0.10557, 1.89443, 3.68328];
        for (a, b) in out.0.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn adain_identity_and_constant_channel() {
        // zero mean, unit population std
        let x = fmap(2, 2, 2, vec![1.0, -1.0, 1.0, -1.0, 5.0, 5.0, 5.0, 5.0]);
        let y = StyleParams {
            y_s: vec![1.0, 3.0],
            y_b: vec![0.0, -0.25],
        };
        let out = adain(&x, &y).unwrap();
        for i in 0..4 {
            assert!((out.0.data()[i] - x.0.data()[i]).abs() < 1e-6);
            assert_eq!(out.0.data()[4 + i], -0.25);
        }
        let bad = StyleParams {
            y_s: vec![1.0],
            y_b: vec![0.0],
        };
        assert!(adain(&x, &bad).is_err());
    }

    #[test]
    fn adain_is_idempotent_under_unit_style() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = FeatureMap(Tensor::randn(&[4, 8, 8], &mut rng).map(|v| 3.0 * v + 1.0));
        let unit = StyleParams {
            y_s: vec![1.0; 4],
            y_b: vec![0.0; 4],
        };
        let once = adain(&x, &unit).unwrap();
        let twice = adain(&once, &unit).unwrap();
        assert!(once.0.max_abs_diff(&twice.0) < 1e-5);
    }

    #[test]
    fn affine_style_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Linear::new(2, 4, &mut rng);
        t.bias.set(Tensor::zeros(&[4]));
        let zero = affine_style(&LatentVector::new(vec![0.0, 0.0]).unwrap(), &t).unwrap();
        assert_eq!(zero.y_s, vec![0.0, 0.0]);
        assert_eq!(zero.y_b, vec![0.0, 0.0]);

        t.weight.set(Tensor::new(&[4, 2], vec![1., 0., 0., 1., 1., 1., 2., -1.]));
        let s = affine_style(&LatentVector::new(vec![1.0, 2.0]).unwrap(), &t).unwrap();
        assert_eq!(s.y_s, vec![1.0, 2.0]);
        assert_eq!(s.y_b, vec![3.0, 0.0]);
        assert!(affine_style(&LatentVector::new(vec![1.0]).unwrap(), &t).is_err());
    }

    #[test]
    fn first_stage_style_width_follows_config() {
        let cfg = GeneratorConfig {
            latent_dim: 4,
            channels: [512, 2, 2, 2],
            upsample: Upsample::Nearest,
            noise: true,
        };
        let p = GeneratorParams::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let s = affine_style(&LatentVector::new(vec![0.1; 4]).unwrap(), &p.units[0].affine).unwrap();
        assert_eq!(s.y_s.len(), 512);
        assert_eq!(s.y_b.len(), 512);
    }

    #[test]
    fn inject_noise_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = FeatureMap(Tensor::randn(&[3, 4, 4], &mut rng));
        let noise = Tensor::randn(&[4, 4], &mut rng);
        assert_eq!(inject_noise(&x, &[0.0; 3], &noise).unwrap(), x);

        let zero = FeatureMap(Tensor::zeros(&[2, 2, 2]));
        let out = inject_noise(&zero, &[2.0, 0.5], &Tensor::ones(&[2, 2])).unwrap();
        assert!(out.0.data()[..4].iter().all(|&v| v == 2.0));
        assert!(out.0.data()[4..].iter().all(|&v| v == 0.5));

        let w = [0.3, -1.2, 2.5];
        let out = inject_noise(&x, &w, &noise).unwrap();
        for c in 0..3 {
            for i in 0..16 {
                let r = out.0.data()[c * 16 + i] - x.0.data()[c * 16 + i];
                assert!((r - w[c] * noise.data()[i]).abs() < 1e-12);
            }
        }
        assert!(inject_noise(&x, &w, &Tensor::zeros(&[2, 2])).is_err());
        assert!(inject_noise(&x, &w[..2], &noise).is_err());
    }

    #[test]
    fn to_rgb_examples() {
        let mut p = GeneratorParams::new(&small_cfg(Upsample::Nearest), &mut ChaCha8Rng::seed_from_u64(4));
        p.to_rgb.bias.set(Tensor::zeros(&[3]));
        let zero = FeatureMap(Tensor::zeros(&[3, 32, 32]));
        assert!(to_rgb(&zero, &p).unwrap().tensor().data().iter().all(|&v| v == 0.0));

        p.to_rgb.weight.set(Tensor::new(&[3, 3, 1, 1], vec![0.1, 0.2, 0.3, -0.1, 0.0, 0.1, 1.0, 1.0, 1.0]));
        p.to_rgb.bias.set(Tensor::new(&[3], vec![0.0, 0.5, -0.5]));
        let f = FeatureMap(Tensor::from_fn(&[3, 32, 32], |i| [1.0, 2.0, -1.0][i / 1024]));
        let img = to_rgb(&f, &p).unwrap();
        let want = [
            (0.1 + 0.4 - 0.3f64).tanh(),
            (-0.1 + 0.0 - 0.1 + 0.5f64).tanh(),
            (1.0 + 2.0 - 1.0 - 0.5f64).tanh(),
        ];
        for c in 0..3 {
            for y in [0, 17, 31] {
                assert!((img.get(c, y, 5) - want[c]).abs() < 1e-12);
            }
        }
        let wrong = FeatureMap(Tensor::zeros(&[3, 16, 16]));
        assert!(to_rgb(&wrong, &p).is_err());
    }

    #[test]
    fn synthesize_shape_range_determinism() {
        for up in [Upsample::Nearest, Upsample::Deconv] {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut p = GeneratorParams::new(&small_cfg(up), &mut rng);
            randomize_noise_weights(&mut p, &mut rng);
            let z = LatentVector::new(Tensor::randn(&[8], &mut rng).into_data()).unwrap();
            let zs = broadcast_latent(&z, N_STYLES).unwrap();
            let a = synthesize(&zs, &p, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            let b = synthesize(&zs, &p, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            assert_eq!(a.tensor().shape(), &[3, 32, 32]);
            assert!(a.tensor().data().iter().all(|v| (-1.0..=1.0).contains(v)));
            assert_eq!(a, b);
            let c = synthesize(&zs, &p, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
            assert!(a.tensor().max_abs_diff(c.tensor()) > 0.0);
            assert!(synthesize(&zs[..7], &p, &mut rng).is_err());
        }
    }

    #[test]
    fn one_bit_flip_changes_image() {
        use crate::message::{encode_bits, map_message, MappingConfig, MappingParams, SecretMessage};
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let map = MappingParams::new(
            &MappingConfig {
                n_bits: 8,
                latent_dim: 8,
                layers: 4,
                width: 16,
                fusion_layers: 2,
                expression: false,
            },
            &mut rng,
        );
        let p = GeneratorParams::new(&small_cfg(Upsample::Nearest), &mut rng);
        let m = SecretMessage::parse("10110010").unwrap();
        let f = SecretMessage::parse("10110011").unwrap();
        let img = |msg: &SecretMessage| {
            let z = map_message(&encode_bits(msg), &map).unwrap();
            synthesize(&broadcast_latent(&z, N_STYLES).unwrap(), &p, &mut ChaCha8Rng::seed_from_u64(1))
                .unwrap()
        };
        let d = img(&m).tensor().zip(img(&f).tensor(), |a, b| (a - b).powi(2)).sum();
        assert!(d > 0.0);
    }

    #[test]
    fn every_latent_matters() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = GeneratorParams::new(&small_cfg(Upsample::Nearest), &mut rng);
        let zs: Vec<_> = (0..N_STYLES)
            .map(|_| LatentVector::new(Tensor::randn(&[8], &mut rng).into_data()).unwrap())
            .collect();
        let base = synthesize(&zs, &p, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for k in 0..N_STYLES {
            let mut zk = zs.clone();
            zk[k] = LatentVector::new(vec![0.0; 8]).unwrap();
            let out = synthesize(&zk, &p, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert!(out.tensor().max_abs_diff(base.tensor()) > 0.0, "latent {k} ignored");
        }
    }

    #[test]
    fn non_finite_layer_is_reported() {
        let mut p = GeneratorParams::new(&small_cfg(Upsample::Nearest), &mut ChaCha8Rng::seed_from_u64(8));
        let b = p.units[2].affine.bias.value_mut();
        b.data_mut()[0] = f64::NAN;
        let zs = vec![LatentVector::new(vec![0.1; 8]).unwrap(); N_STYLES];
        let err = synthesize(&zs, &p, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, CisError::NonFiniteLayer { layer: 2 }));
    }

    #[test]
    fn synthesis_gradient_matches_finite_differences() {
        use crate::gradcheck::{check_param_gradients, GradCheckOptions};
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for up in [Upsample::Nearest, Upsample::Deconv] {
            let mut p = GeneratorParams::new(&small_cfg(up), &mut rng);
            randomize_noise_weights(&mut p, &mut rng);
            let z = Tensor::randn(&[2, 8], &mut rng);
            let noise = p.sample_noise(2, &mut rng);
            let r = check_param_gradients(
                &mut p,
                |p, g| {
                    let zv = g.constant(z.clone());
                    p.forward(&vec![zv; N_STYLES], &noise).unwrap().sum()
                },
                GradCheckOptions {
                    seed: 3,
                    ..Default::default()
                },
            );
            assert!(r.passed(), "{:?}", r.failures);
            assert_eq!(r.checked, r.sampled);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn adain_moments(
            data in prop::collection::vec(-5.0f64..5.0, 16),
            ys in -3.0f64..3.0,
            yb in -3.0f64..3.0,
        ) {
            let x = fmap(1, 4, 4, data.clone());
            let mean = data.iter().sum::<f64>() / 16.0;
            let sd = (data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0).sqrt();
            prop_assume!(sd > 1e-3);
            let out = adain(&x, &StyleParams { y_s: vec![ys], y_b: vec![yb] }).unwrap();
            let o = out.0.data();
            let m = o.iter().sum::<f64>() / 16.0;
            let s = (o.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 16.0).sqrt();
            prop_assert!((m - yb).abs() < 1e-4);
            prop_assert!((s - ys.abs()).abs() < 1e-3);
        }
    }
}
