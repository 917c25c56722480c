//! Frozen linear codec between RGB pixels and 4-channel latents.
//!
//! Encoding maps each pixel `p ∈ R³` to `E p ∈ R⁴` where the columns of `E`
//! are three columns of the 4x4 Hadamard matrix scaled by 1/2, so they are
//! orthonormal and `Eᵀ E = I`. Decoding applies `Eᵀ`; it inverts encoding
//! exactly and projects any latent onto the codec's range first.
//!
//! Pixels use `[-1, 1]` with 0 as the clean background value. Videos are
//! `[F, H, W, 3]`, images `[H, W, 3]`, latents `[4, F, H, W]`.

use crate::error::{shape_str, Error, Result};
use crate::tensor::{Real, Tensor};

pub const PIXEL_CHANNELS: usize = 3;
pub const LATENT_CHANNELS: usize = 4;

const E: [[f64; 3]; 4] = [
    [0.5, 0.5, 0.5],
    [-0.5, 0.5, -0.5],
    [0.5, -0.5, -0.5],
    [-0.5, -0.5, 0.5],
];

/// `[F, H, W, 3]` pixels to `[4, F, H, W]` latents.
pub fn encode_video<T: Real>(video: &Tensor<T>) -> Result<Tensor<T>> {
    let s = video.shape();
    if s.len() != 4 || s[3] != PIXEL_CHANNELS {
        return Err(Error::dim(format!("video must be [F, H, W, 3], got {}", shape_str(s))));
    }
    let plane = s[0] * s[1] * s[2];
    let mut out = vec![T::zero(); LATENT_CHANNELS * plane];
    for (i, px) in video.data().chunks_exact(PIXEL_CHANNELS).enumerate() {
        for (j, row) in E.iter().enumerate() {
            let v: f64 = row.iter().zip(px).map(|(e, p)| e * p.as_f64()).sum();
            out[j * plane + i] = T::of(v);
        }
    }
    Tensor::new(vec![LATENT_CHANNELS, s[0], s[1], s[2]], out)
}

/// `[4, F, H, W]` latents to `[F, H, W, 3]` pixels.
pub fn decode_video<T: Real>(latent: &Tensor<T>) -> Result<Tensor<T>> {
    let s = latent.shape();
    if s.len() != 4 || s[0] != LATENT_CHANNELS {
        return Err(Error::dim(format!("latent must be [4, F, H, W], got {}", shape_str(s))));
    }
    let plane = s[1] * s[2] * s[3];
    let d = latent.data();
    let mut out = Vec::with_capacity(plane * PIXEL_CHANNELS);
    for i in 0..plane {
        for c in 0..PIXEL_CHANNELS {
            let v: f64 = (0..LATENT_CHANNELS).map(|j| E[j][c] * d[j * plane + i].as_f64()).sum();
            out.push(T::of(v));
        }
    }
    Tensor::new(vec![s[1], s[2], s[3], PIXEL_CHANNELS], out)
}

/// `[H, W, 3]` image to a single-frame latent `[4, 1, H, W]`.
pub fn encode_image<T: Real>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::dim(format!("image must be [H, W, 3], got {}", shape_str(s))));
    }
    encode_video(&image.reshape(vec![1, s[0], s[1], s[2]])?)
}

/// Frame `f` of a `[F, H, W, C]` video as `[H, W, C]`.
pub fn frame<T: Real>(video: &Tensor<T>, f: usize) -> Result<Tensor<T>> {
    let s = video.shape();
    if s.len() != 4 || f >= s[0] {
        return Err(Error::dim(format!("frame {f} of video {}", shape_str(s))));
    }
    let per = s[1] * s[2] * s[3];
    Tensor::new(vec![s[1], s[2], s[3]], video.data()[f * per..(f + 1) * per].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn columns_are_orthonormal() {
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = (0..4).map(|j| E[j][a] * E[j][b]).sum();
                assert_eq!(dot, if a == b { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn pixel_round_trip_is_exact_in_f64() {
        let mut rng = RngStream::new(4);
        let v = rng.uniform_tensor::<f64>(vec![2, 3, 5, 3], -1.0, 1.0);
        let back = decode_video(&encode_video(&v).unwrap()).unwrap();
        assert!(back.max_abs_diff(&v).unwrap() < 1e-15);
    }

    #[test]
    fn latent_round_trip_on_range() {
        let mut rng = RngStream::new(5);
        let z = encode_video(&rng.uniform_tensor::<f64>(vec![1, 4, 4, 3], -1.0, 1.0)).unwrap();
        let again = encode_video(&decode_video(&z).unwrap()).unwrap();
        assert!(again.max_abs_diff(&z).unwrap() < 1e-15);
    }
}
