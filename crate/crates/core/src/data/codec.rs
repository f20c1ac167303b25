//! Fixed stand-in for an image autoencoder: `k x k` average pooling to encode,
//! nearest-neighbour upsampling to decode.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentCodec {
    pub factor: usize,
}

impl Default for LatentCodec {
    fn default() -> Self {
        Self { factor: 1 }
    }
}

impl LatentCodec {
    pub fn new(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::config("latent factor must be positive"));
        }
        Ok(Self { factor })
    }

    pub fn latent_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (h / self.factor, w / self.factor)
    }

    /// `[B, C, H, W] -> [B, C, H/k, W/k]`.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = images.dims4()?;
        if h % self.factor != 0 || w % self.factor != 0 {
            return Err(Error::Dimension(format!("{h}x{w} image is not divisible by latent factor {}", self.factor)));
        }
        if self.factor == 1 {
            return Ok(images.clone());
        }
        Ok(images.avg_pool2d(self.factor)?)
    }

    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        if self.factor == 1 {
            return Ok(latent.clone());
        }
        let (_, _, h, w) = latent.dims4()?;
        Ok(latent.upsample_nearest2d(h * self.factor, w * self.factor)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn codec_identities() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f32, 1.0, (2, 3, 8, 8), &dev).unwrap();
        let id = LatentCodec::default();
        assert_eq!(id.decode(&id.encode(&x).unwrap()).unwrap().to_vec3::<f32>().ok(), x.to_vec3::<f32>().ok());
        let k2 = LatentCodec::new(2).unwrap();
        let c = (Tensor::ones((1, 3, 8, 8), DType::F32, &dev).unwrap() * 0.3).unwrap();
        let round = k2.decode(&k2.encode(&c).unwrap()).unwrap();
        assert_eq!(round.flatten_all().unwrap().to_vec1::<f32>().unwrap(), c.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        let enc = k2.encode(&x).unwrap();
        assert_eq!(enc.dims(), &[2, 3, 4, 4]);
        let m1 = x.mean_all().unwrap().to_scalar::<f32>().unwrap();
        let m2 = enc.mean_all().unwrap().to_scalar::<f32>().unwrap();
        assert!((m1 - m2).abs() < 1e-6);
        assert!(LatentCodec::new(3).unwrap().encode(&x).is_err());
    }
}
