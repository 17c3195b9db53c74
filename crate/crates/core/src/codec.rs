//! Lossless latent codec: space-to-depth and time-to-depth rearrangement.
//!
//! A `[T × H × W × c]` video becomes `[T/s_t × H/s_s × W/s_s × c·s_t·s_s²]`;
//! latent channels are laid out as (frame-in-group, row-in-cell,
//! column-in-cell, channel).

use crate::error::shape_err;
use crate::{Float, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Codec {
    pub stride_t: usize,
    pub stride_s: usize,
}

impl Codec {
    pub fn new(stride_t: usize, stride_s: usize) -> Result<Self> {
        if stride_t == 0 || stride_s == 0 {
            return Err(shape_err!("codec strides must be positive, got ({stride_t}, {stride_s})"));
        }
        Ok(Self { stride_t, stride_s })
    }

    pub fn latent_channels(&self, c: usize) -> usize {
        c * self.stride_t * self.stride_s * self.stride_s
    }

    pub fn encode<T: Float>(&self, video: &Tensor<T>) -> Result<Tensor<T>> {
        let [t, h, w, c] = *video.shape() else {
            return Err(shape_err!("video must be [T, H, W, c], got {:?}", video.shape()));
        };
        let (st, ss) = (self.stride_t, self.stride_s);
        if t % st != 0 || h % ss != 0 || w % ss != 0 {
            return Err(shape_err!("video {t}×{h}×{w} not divisible by strides ({st}, {ss})"));
        }
        let (lt, lh, lw, lc) = (t / st, h / ss, w / ss, self.latent_channels(c));
        let src = video.data();
        let mut out = vec![T::zero(); video.numel()];
        self.for_each_pixel(t, h, w, c, |f, y, x, latent_index| {
            let pix = ((f * h + y) * w + x) * c;
            out[latent_index..latent_index + c].copy_from_slice(&src[pix..pix + c]);
        });
        Tensor::new(&[lt, lh, lw, lc], out)
    }

    /// Inverse of [`Codec::encode`] for `c`-channel pixels.
    pub fn decode<T: Float>(&self, latent: &Tensor<T>, c: usize) -> Result<Tensor<T>> {
        let [lt, lh, lw, lc] = *latent.shape() else {
            return Err(shape_err!("latent must be [T, H, W, c], got {:?}", latent.shape()));
        };
        if c == 0 || lc != self.latent_channels(c) {
            return Err(shape_err!(
                "latent has {lc} channels; strides ({}, {}) over {c} pixel channels need {}",
                self.stride_t,
                self.stride_s,
                self.latent_channels(c)
            ));
        }
        let (t, h, w) = (lt * self.stride_t, lh * self.stride_s, lw * self.stride_s);
        let src = latent.data();
        let mut out = vec![T::zero(); latent.numel()];
        self.for_each_pixel(t, h, w, c, |f, y, x, latent_index| {
            let pix = ((f * h + y) * w + x) * c;
            out[pix..pix + c].copy_from_slice(&src[latent_index..latent_index + c]);
        });
        Tensor::new(&[t, h, w, c], out)
    }

    /// Visits every pixel with the offset of its channel run in the latent.
    fn for_each_pixel(&self, t: usize, h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (st, ss) = (self.stride_t, self.stride_s);
        let (lh, lw, lc) = (h / ss, w / ss, self.latent_channels(c));
        for fr in 0..t {
            for y in 0..h {
                for x in 0..w {
                    let cell = ((fr / st) * lh + y / ss) * lw + x / ss;
                    let within = (((fr % st) * ss + y % ss) * ss + x % ss) * c;
                    f(fr, y, x, cell * lc + within);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng;

    #[test]
    fn unit_strides_are_identity() {
        let v = Tensor::<f32>::randn(&[3, 4, 5, 2], 1.0, &mut rng::seeded(0));
        let c = Codec::new(1, 1).unwrap();
        assert_eq!(c.encode(&v).unwrap(), v);
        assert_eq!(c.decode(&v, 2).unwrap(), v);
    }

    #[test]
    fn shapes() {
        let c = Codec::new(4, 8).unwrap();
        let lat = c.encode(&Tensor::<f32>::zeros(&[4, 8, 8, 1])).unwrap();
        assert_eq!(lat.shape(), &[1, 1, 1, 256]);
        let c = Codec::new(2, 4).unwrap();
        let lat = c.encode(&Tensor::<f32>::zeros(&[10, 32, 32, 3])).unwrap();
        assert_eq!(lat.shape(), &[5, 8, 8, 96]);
        assert_eq!(c.decode(&lat, 3).unwrap().shape(), &[10, 32, 32, 3]);
        assert!(c.encode(&Tensor::<f32>::zeros(&[3, 32, 32, 3])).is_err());
        assert!(c.decode(&lat, 2).is_err());
        assert!(c.decode(&Tensor::<f32>::zeros(&[1, 1, 1, 96]), 3).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn round_trips_are_exact() {
        let mut r = rng::seeded(1);
        let c = Codec::new(2, 4).unwrap();
        let v = Tensor::<f32>::randn(&[4, 8, 12, 3], 1.0, &mut r);
        assert_eq!(c.decode(&c.encode(&v).unwrap(), 3).unwrap(), v);
        let lat = Tensor::<f64>::randn(&[2, 2, 3, 96], 1.0, &mut r);
        assert_eq!(c.encode(&c.decode(&lat, 3).unwrap()).unwrap(), lat);
    }

    #[test]
    fn space_to_depth_layout() {
        // 1 frame, 2×2 image, 1 channel, spatial stride 2 → one cell [a b c d]
        let v = Tensor::<f64>::from_f64(&[1, 2, 2, 1], &[1., 2., 3., 4.]).unwrap();
        let lat = Codec::new(1, 2).unwrap().encode(&v).unwrap();
        assert_eq!(lat.data(), &[1., 2., 3., 4.]);
        // time stride stacks frames first
        let v = Tensor::<f64>::from_f64(&[2, 1, 1, 1], &[5., 6.]).unwrap();
        assert_eq!(Codec::new(2, 1).unwrap().encode(&v).unwrap().data(), &[5., 6.]);
    }
}
