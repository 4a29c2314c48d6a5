//! Toy latent codec: a fixed affine normalization, identity in space.
//!
//! Images live in `[0, 1]` RGB; latents in `[-1, 1]` with `latent_channels`
//! planes. The RGB planes map affinely, extra latent channels are zero on
//! encode and dropped on decode, so `decode(encode(img)) == img` up to float
//! rounding and the decode path is differentiable end to end (the guidance
//! loss needs gradients through it).

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;
use crate::schedule::Latent;
use crate::tape::Tensor;

#[derive(Debug, Clone)]
pub struct AffineCodec {
    pub latent_channels: usize,
    pub spatial: usize,
}

impl AffineCodec {
    pub fn new(latent_channels: usize, spatial: usize) -> Result<Self> {
        if latent_channels < 3 {
            return Err(Error::invalid("codec needs at least the 3 RGB channels"));
        }
        Ok(AffineCodec {
            latent_channels,
            spatial,
        })
    }

    /// Image `[0,1]` to clean latent (`step_tag` 0).
    pub fn encode<T: Scalar>(&self, img: &Image<T>) -> Result<Latent<T>> {
        if img.height != self.spatial || img.width != self.spatial {
            return Err(Error::shape(
                &[3, self.spatial, self.spatial],
                &[3, img.height, img.width],
                "codec encode",
            ));
        }
        let plane = self.spatial * self.spatial;
        let two = T::from_f64_lossy(2.0);
        let mut data = vec![T::zero(); self.latent_channels * plane];
        for (i, v) in img.data().iter().enumerate() {
            data[i] = *v * two - T::one();
        }
        Latent::new(data, [self.latent_channels, self.spatial, self.spatial], 0)
    }

    /// Differentiable decode of a latent tensor to an RGB image tensor.
    pub fn decode<T: Scalar>(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let [c, h, w] = match z.shape() {
            [c, h, w] => [*c, *h, *w],
            s => return Err(Error::invalid(format!("decode expects [C,H,W], got {s:?}"))),
        };
        if c != self.latent_channels || h != self.spatial || w != self.spatial {
            return Err(Error::shape(
                &[self.latent_channels, self.spatial, self.spatial],
                &[c, h, w],
                "codec decode",
            ));
        }
        let half = T::from_f64_lossy(0.5);
        z.reshape(&[c, h * w])?
            .slice_rows(0, 3)?
            .add_scalar(T::one())
            .mul_scalar(half)
            .reshape(&[3, h, w])
    }

    /// Plain-value decode for writing outputs; clamps on save, not here.
    pub fn decode_image<T: Scalar>(&self, z: &Latent<T>) -> Result<Image<T>> {
        let img_t = crate::tape::no_grad(|| self.decode(&z.to_tensor()))?;
        Image::from_tensor(&img_t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toydata;

    #[test]
    fn roundtrip_is_exact_and_decode_matches_fd() {
        let codec = AffineCodec::new(4, 16).unwrap();
        let scene = toydata::all_scenes()[17];
        let img = toydata::render::<f64>(&scene, 5);
        let z = codec.encode(&img).unwrap();
        assert_eq!(z.shape(), [4, 16, 16]);
        // 4th channel zero on encode.
        assert!(z.data()[3 * 256..].iter().all(|v| *v == 0.0));
        let back = codec.decode_image(&z).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        // Finite differences vs analytic gradient through decode.
        let zt = Tensor::var(&[4, 4, 4], (0..64).map(|i| (i as f64) * 0.02 - 0.5).collect());
        let small = AffineCodec::new(4, 4).unwrap();
        let f = || {
            small
                .decode(&zt)
                .unwrap()
                .sum_squares()
                .unwrap()
        };
        let loss = f();
        let grads = loss.backward().unwrap();
        let g = grads.get_or_zeros(&zt);
        for idx in [0usize, 13, 47, 55, 63] {
            let orig = zt.data()[idx];
            let h = 1e-6;
            zt.update_data(|d| d[idx] = orig + h);
            let plus = f().item();
            zt.update_data(|d| d[idx] = orig - h);
            let minus = f().item();
            zt.update_data(|d| d[idx] = orig);
            let fd = (plus - minus) / (2.0 * h);
            assert!(
                (fd - g[idx]).abs() <= 1e-3 * fd.abs().max(g[idx].abs()).max(1e-4),
                "idx {idx}: fd {fd} vs {g:?}"
            );
        }
    }
}
