//! Image tensors: channel-major `[3, H, W]` values in `[-1, 1]`, and their 8-bit form.

use cisnet_autograd::Tensor;
use image::RgbImage;

use crate::error::{CisError, Result};

/// Side length of every generated image.
pub const IMAGE_SIZE: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Tensor);

/// Map `[-1, 1]` to an 8-bit level: clamp, scale to `[0, 255]`, round half away from zero.
pub fn to_u8(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

pub fn from_u8(u: u8) -> f64 {
    u as f64 / 127.5 - 1.0
}

impl ImageTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(CisError::Invalid(format!(
                "image tensor must be [3, H, W], got {s:?}"
            )));
        }
        if !t.is_finite() {
            return Err(CisError::Invalid("image tensor has non-finite values".into()));
        }
        Ok(Self(t))
    }

    pub fn full(h: usize, w: usize, v: f64) -> Self {
        Self(Tensor::full(&[3, h, w], v))
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        Self(Tensor::from_fn(&[3, h, w], |i| {
            let (c, rest) = (i / (h * w), i % (h * w));
            f(c, rest / w, rest % w)
        }))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.0.data()[(c * self.height() + y) * self.width() + x]
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w) = (self.height(), self.width());
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c| to_u8(self.get(c, y as usize, x as usize));
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::from_fn(h, w, |c, y, x| from_u8(img.get_pixel(x as u32, y as u32)[c]))
    }

    /// Snap every value to the nearest representable 8-bit level.
    pub fn quantize8(&self) -> Self {
        Self(self.0.map(|v| from_u8(to_u8(v))))
    }

    pub fn clamp(&self) -> Self {
        Self(self.0.map(|v| v.clamp(-1.0, 1.0)))
    }
}

/// Stack images into an `[N, 3, H, W]` batch.
pub fn stack(images: &[ImageTensor]) -> Tensor {
    assert!(!images.is_empty(), "stack of no images");
    let shape = images[0].0.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].0.numel());
    for img in images {
        assert_eq!(img.0.shape(), shape.as_slice(), "stack of mixed sizes");
        data.extend_from_slice(img.0.data());
    }
    Tensor::new(&[images.len(), shape[0], shape[1], shape[2]], data)
}

pub fn unstack(batch: &Tensor) -> Vec<ImageTensor> {
    let s = batch.shape();
    assert_eq!(s.len(), 4, "unstack needs [N, 3, H, W]");
    let per = s[1] * s[2] * s[3];
    batch
        .data()
        .chunks_exact(per)
        .map(|c| ImageTensor(Tensor::new(&s[1..], c.to_vec())))
        .collect()
}
