//! Channel attacks: a real JPEG codec, its constant-residual pseudo-differentiable
//! wrapper for training, and the distortion set used for robustness tables.
//!
//! Attack definitions (images live in `[-1, 1]`):
//! * `jpeg:Q` clamps, rounds half away from zero to 8-bit RGB, encodes baseline JFIF at
//!   quality `Q` and decodes again.
//! * `rotation:D` rotates about the image centre by an angle drawn uniformly from
//!   `[-D, D]` degrees, bilinear sampling, reflect padding.
//! * `gaussian_noise:S` adds `S * N(0, 1)` per value, then clamps.
//! * `salt_pepper:P` sets each pixel (all three channels) with probability `P` to
//!   `-1` or `+1`, equally likely.
//! * `speckle:S` maps to `u = (x + 1) / 2`, sets `u + u * S * N(0, 1)`, maps back, clamps.
//! * `median_filter:K`, `mean_filter:K`, `gaussian_filter:K` apply a `K x K` window per
//!   channel with reflect padding; only `K = 3` is accepted. The Gaussian window uses
//!   standard deviation [`GAUSSIAN_FILTER_SIGMA`].

use std::fmt;
use std::io::Cursor;
use std::str::FromStr;

use cisnet_autograd::{Tensor, Var};
use image::codecs::jpeg::JpegEncoder;
use image::ImageFormat;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CisError, Result};
use crate::image::{stack, unstack, ImageTensor};

/// Identifies the JPEG implementation behind [`jpeg_codec`]; written into reports.
pub const CODEC_ID: &str = "image 0.25.10 JpegEncoder (baseline, 4:2:2 chroma) + zune-jpeg 0.5.15 decoder";

pub const TRAIN_QUALITIES: [u8; 5] = [90, 80, 70, 60, 50];
pub const DEFAULT_ROTATION_DEG: f64 = 10.0;
pub const DEFAULT_GAUSSIAN_SIGMA: f64 = 0.05;
pub const DEFAULT_SALT_PEPPER: f64 = 0.05;
pub const DEFAULT_SPECKLE_SIGMA: f64 = 0.1;
pub const FILTER_KERNEL: usize = 3;
pub const GAUSSIAN_FILTER_SIGMA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ChannelSpec {
    Identity,
    Jpeg { qf: u8 },
    Rotation { max_deg: f64 },
    GaussianNoise { sigma: f64 },
    SaltPepper { density: f64 },
    Speckle { sigma: f64 },
    MedianFilter { kernel: usize },
    MeanFilter { kernel: usize },
    GaussianFilter { kernel: usize },
}

impl ChannelSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Jpeg { .. } => "jpeg",
            Self::Rotation { .. } => "rotation",
            Self::GaussianNoise { .. } => "gaussian_noise",
            Self::SaltPepper { .. } => "salt_pepper",
            Self::Speckle { .. } => "speckle",
            Self::MedianFilter { .. } => "median_filter",
            Self::MeanFilter { .. } => "mean_filter",
            Self::GaussianFilter { .. } => "gaussian_filter",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CisError::Invalid(msg));
        match *self {
            Self::Identity => Ok(()),
            Self::Jpeg { qf } if (1..=100).contains(&qf) => Ok(()),
            Self::Jpeg { qf } => bad(format!("jpeg quality {qf} outside 1..=100")),
            Self::Rotation { max_deg } if max_deg.is_finite() && (0.0..=180.0).contains(&max_deg) => {
                Ok(())
            }
            Self::Rotation { max_deg } => bad(format!("rotation {max_deg} outside 0..=180 degrees")),
            Self::GaussianNoise { sigma } | Self::Speckle { sigma }
                if sigma.is_finite() && sigma >= 0.0 =>
            {
                Ok(())
            }
            Self::GaussianNoise { sigma } | Self::Speckle { sigma } => {
                bad(format!("noise strength {sigma} must be finite and non-negative"))
            }
            Self::SaltPepper { density } if (0.0..=1.0).contains(&density) => Ok(()),
            Self::SaltPepper { density } => bad(format!("density {density} outside [0, 1]")),
            Self::MedianFilter { kernel } | Self::MeanFilter { kernel } | Self::GaussianFilter { kernel } => {
                if kernel == FILTER_KERNEL {
                    Ok(())
                } else {
                    bad(format!("filter kernel {kernel}; only 3x3 is supported"))
                }
            }
        }
    }

    /// Whether the attack draws from the random source.
    pub fn is_stochastic(&self) -> bool {
        matches!(
            self,
            Self::Rotation { .. } | Self::GaussianNoise { .. } | Self::SaltPepper { .. } | Self::Speckle { .. }
        )
    }
}

impl fmt::Display for ChannelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = self.kind();
        match *self {
            Self::Identity => write!(f, "{k}"),
            Self::Jpeg { qf } => write!(f, "{k}:{qf}"),
            Self::Rotation { max_deg: v }
            | Self::GaussianNoise { sigma: v }
            | Self::SaltPepper { density: v }
            | Self::Speckle { sigma: v } => write!(f, "{k}:{v}"),
            Self::MedianFilter { kernel } | Self::MeanFilter { kernel } | Self::GaussianFilter { kernel } => {
                write!(f, "{k}:{kernel}")
            }
        }
    }
}

impl FromStr for ChannelSpec {
    type Err = CisError;

    /// `kind[:param]`, e.g. `jpeg:80`, `rotation:10`, `gauss:0.05`, `median:3`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (kind, param) = match s.split_once(':') {
            Some((k, p)) => (k, Some(p.trim())),
            None => (s, None),
        };
        let num = |default: f64| -> Result<f64> {
            match param {
                None => Ok(default),
                Some(p) => p
                    .parse::<f64>()
                    .map_err(|_| CisError::Invalid(format!("bad parameter `{p}` in `{s}`"))),
            }
        };
        let int = |default: usize| -> Result<usize> {
            match param {
                None => Ok(default),
                Some(p) => p
                    .parse::<usize>()
                    .map_err(|_| CisError::Invalid(format!("bad parameter `{p}` in `{s}`"))),
            }
        };
        let spec = match kind.to_ascii_lowercase().as_str() {
            "identity" | "none" => Self::Identity,
            "jpeg" | "jpg" => {
                let p = param.ok_or_else(|| CisError::Invalid("jpeg needs a quality factor".into()))?;
                let qf = p
                    .parse::<u8>()
                    .map_err(|_| CisError::Invalid(format!("bad quality factor `{p}`")))?;
                Self::Jpeg { qf }
            }
            "rotation" | "rotate" => Self::Rotation { max_deg: num(DEFAULT_ROTATION_DEG)? },
            "gaussian_noise" | "gauss" | "gaussian" => Self::GaussianNoise { sigma: num(DEFAULT_GAUSSIAN_SIGMA)? },
            "salt_pepper" | "sp" | "saltpepper" => Self::SaltPepper { density: num(DEFAULT_SALT_PEPPER)? },
            "speckle" => Self::Speckle { sigma: num(DEFAULT_SPECKLE_SIGMA)? },
            "median_filter" | "median" => Self::MedianFilter { kernel: int(FILTER_KERNEL)? },
            "mean_filter" | "mean" => Self::MeanFilter { kernel: int(FILTER_KERNEL)? },
            "gaussian_filter" | "blur" => Self::GaussianFilter { kernel: int(FILTER_KERNEL)? },
            other => return Err(CisError::UnknownChannel(other.to_string())),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Parse a comma-separated list of channel specs.
pub fn parse_channel_list(s: &str) -> Result<Vec<ChannelSpec>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelResult {
    pub image: ImageTensor,
    /// `input - output` for the JPEG channel.
    pub residual: Option<ImageTensor>,
}

fn check_qf(qf: u8) -> Result<()> {
    ChannelSpec::Jpeg { qf }.validate()
}

pub fn encode_jpeg(img: &ImageTensor, qf: u8) -> Result<Vec<u8>> {
    check_qf(qf)?;
    let rgb = img.to_rgb8();
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, qf).encode_image(&rgb)?;
    Ok(buf)
}

pub fn decode_jpeg(bytes: &[u8]) -> Result<ImageTensor> {
    let img = image::load(Cursor::new(bytes), ImageFormat::Jpeg)?;
    Ok(ImageTensor::from_rgb8(&img.to_rgb8()))
}

/// Real JPEG round trip at quality `qf`.
pub fn jpeg_codec(img: &ImageTensor, qf: u8) -> Result<ImageTensor> {
    decode_jpeg(&encode_jpeg(img, qf)?)
}

fn jpeg_batch(x: &Tensor, qf: u8) -> Result<Tensor> {
    let out = unstack(x)
        .iter()
        .map(|img| jpeg_codec(img, qf))
        .collect::<Result<Vec<_>>>()?;
    Ok(stack(&out))
}

/// Constant-residual JPEG on a batch `[N, 3, H, W]`: the value is exactly the codec
/// output, the gradient passes through unchanged. Also returns the residual
/// `stop_grad(x) - jpeg(x)`.
pub fn pseudo_jpeg_var(x: &Var, qf: u8) -> Result<(Var, Tensor)> {
    let value = x.value();
    let coded = jpeg_batch(&value, qf)?;
    let residual = value.zip(&coded, |a, b| a - b);
    Ok((x.straight_through(coded), residual))
}

/// `x - residual` with the residual held constant.
pub fn subtract_residual(x: &Var, residual: &Tensor) -> Var {
    x - &x.graph().constant(residual.clone())
}

/// Single-image pseudo-JPEG over a `[3, H, W]` variable.
pub fn pseudo_jpeg(img: &Var, qf: u8) -> Result<Var> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(CisError::Invalid(format!("expected [3, H, W], got {s:?}")));
    }
    let (out, _) = pseudo_jpeg_var(&img.reshape(&[1, s[0], s[1], s[2]]), qf)?;
    Ok(out.reshape(&s))
}

/// Apply `spec` to every image of a batch variable. JPEG uses the constant-residual
/// wrapper; every other attack is applied to the values with the same pass-through
/// gradient.
pub fn apply_channel_var<R: Rng + ?Sized>(x: &Var, spec: &ChannelSpec, rng: &mut R) -> Result<Var> {
    spec.validate()?;
    match *spec {
        ChannelSpec::Identity => Ok(x.clone()),
        ChannelSpec::Jpeg { qf } => Ok(pseudo_jpeg_var(x, qf)?.0),
        _ => {
            let out = unstack(&x.value())
                .iter()
                .map(|img| Ok(apply_channel(img, spec, rng)?.image))
                .collect::<Result<Vec<_>>>()?;
            Ok(x.straight_through(stack(&out)))
        }
    }
}

pub fn apply_channel<R: Rng + ?Sized>(
    img: &ImageTensor,
    spec: &ChannelSpec,
    rng: &mut R,
) -> Result<ChannelResult> {
    spec.validate()?;
    let plain = |image| Ok(ChannelResult { image, residual: None });
    match *spec {
        ChannelSpec::Identity => plain(img.clone()),
        ChannelSpec::Jpeg { qf } => {
            let coded = jpeg_codec(img, qf)?;
            let residual = ImageTensor::new(img.tensor().zip(coded.tensor(), |a, b| a - b))?;
            Ok(ChannelResult {
                image: coded,
                residual: Some(residual),
            })
        }
        ChannelSpec::Rotation { max_deg } => {
            let deg = if max_deg > 0.0 { rng.random_range(-max_deg..=max_deg) } else { 0.0 };
            plain(rotate(img, deg))
        }
        ChannelSpec::GaussianNoise { sigma } => {
            plain(with_normal_noise(img, rng, |v, n| (v + sigma * n).clamp(-1.0, 1.0)))
        }
        ChannelSpec::SaltPepper { density } => plain(salt_pepper(img, density, rng)),
        ChannelSpec::Speckle { sigma } => plain(with_normal_noise(img, rng, |v, n| {
            let u = (v + 1.0) / 2.0;
            ((u + u * sigma * n) * 2.0 - 1.0).clamp(-1.0, 1.0)
        })),
        ChannelSpec::MedianFilter { .. } => plain(window_filter(img, |w| {
            let mut w = *w;
            w.sort_by(f64::total_cmp);
            w[4]
        })),
        ChannelSpec::MeanFilter { .. } => plain(window_filter(img, |w| w.iter().sum::<f64>() / 9.0)),
        ChannelSpec::GaussianFilter { .. } => {
            let k = gaussian_kernel3(GAUSSIAN_FILTER_SIGMA);
            plain(window_filter(img, |w| w.iter().zip(&k).map(|(a, b)| a * b).sum()))
        }
    }
}

/// Uniform over identity and the five training JPEG qualities.
pub fn sample_train_channel<R: Rng + ?Sized>(rng: &mut R) -> ChannelSpec {
    match rng.random_range(0..=TRAIN_QUALITIES.len()) {
        0 => ChannelSpec::Identity,
        i => ChannelSpec::Jpeg {
            qf: TRAIN_QUALITIES[i - 1],
        },
    }
}

/// Mirror an integer index into `0..n` without repeating the edge sample.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

fn reflect_coord(u: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let len = (n - 1) as f64;
    let m = u.rem_euclid(2.0 * len);
    if m <= len {
        m
    } else {
        2.0 * len - m
    }
}

fn rotate(img: &ImageTensor, deg: f64) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, c) = deg.to_radians().sin_cos();
    ImageTensor::from_fn(h, w, |ch, y, x| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        // inverse mapping: output pixel samples the source rotated back
        let sx = reflect_coord(c * dx + s * dy + cx, w);
        let sy = reflect_coord(-s * dx + c * dy + cy, h);
        let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
        let p = |yy, xx| img.get(ch, yy, xx);
        (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1)) + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1))
    })
}

/// Combine every value with one standard-normal draw, in storage order.
fn with_normal_noise<R: Rng + ?Sized>(
    img: &ImageTensor,
    rng: &mut R,
    f: impl Fn(f64, f64) -> f64,
) -> ImageTensor {
    let noise = Tensor::from_fn(img.tensor().shape(), |_| StandardNormal.sample(&mut *rng));
    ImageTensor::new(img.tensor().zip(&noise, f)).expect("finite by construction")
}

fn salt_pepper<R: Rng + ?Sized>(img: &ImageTensor, density: f64, rng: &mut R) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    let mut t = img.tensor().clone();
    for i in 0..h * w {
        if rng.random::<f64>() < density {
            let v = if rng.random::<bool>() { 1.0 } else { -1.0 };
            for c in 0..3 {
                t.data_mut()[c * h * w + i] = v;
            }
        }
    }
    ImageTensor::new(t).expect("finite by construction")
}

fn window_filter(img: &ImageTensor, f: impl Fn(&[f64; 9]) -> f64) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    ImageTensor::from_fn(h, w, |c, y, x| {
        let mut win = [0.0; 9];
        for dy in 0..3 {
            for dx in 0..3 {
                let yy = reflect_index(y as isize + dy as isize - 1, h);
                let xx = reflect_index(x as isize + dx as isize - 1, w);
                win[dy * 3 + dx] = img.get(c, yy, xx);
            }
        }
        f(&win)
    })
}

fn gaussian_kernel3(sigma: f64) -> [f64; 9] {
    let mut k = [0.0; 9];
    for dy in 0..3 {
        for dx in 0..3 {
            let (a, b) = (dy as f64 - 1.0, dx as f64 - 1.0);
            k[dy * 3 + dx] = (-(a * a + b * b) / (2.0 * sigma * sigma)).exp();
        }
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}
