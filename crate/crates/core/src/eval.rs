//! Held-out evaluation: image-to-video next-frame PSNR against copy
//! baselines, and per-frame PSNR of extrapolated continuations.

use crate::data::{motion_score, psnr};
use crate::error::contract_err;
use crate::model::{GenOptions, Nova};
use crate::{Float, ParamStore, Result, Tensor};

/// Next-frame scores of one clip, all in dB against the ground truth of
/// the second latent frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NextFrame {
    pub predicted: f64,
    /// The first latent frame repeated.
    pub copy_latent: f64,
    /// The last pixel frame of the context repeated.
    pub copy_pixel: f64,
}

fn pixel_frames<T: Float>(video: &Tensor<T>, start: usize, end: usize) -> Result<Tensor<T>> {
    video.slice_rows(start, end)
}

/// Conditions on the first latent frame of `video` (plus `prompt` and the
/// clip's measured motion) and predicts the second.
pub fn next_frame<T: Float>(
    model: &Nova,
    store: &ParamStore<T>,
    video: &Tensor<T>,
    prompt: usize,
    opts: &GenOptions,
) -> Result<NextFrame> {
    let st = model.cfg.stride_t;
    let tokens = model.encode_video(video)?;
    if tokens.shape()[0] < 2 {
        return Err(contract_err!("next-frame evaluation needs two latent frames"));
    }
    let ctx = tokens.slice_rows(0, 1)?.into_reshape(&tokens.shape()[1..])?;
    let o = GenOptions {
        prompt,
        motion: motion_score(video)?,
        frames: 2,
        ..opts.clone()
    };
    let out = model.continue_video(store, &[ctx], &o)?;
    let pred = model.decode_tokens(&out.tokens)?;
    let truth = pixel_frames(video, st, 2 * st)?;
    let copy_latent = pixel_frames(video, 0, st)?;
    let last = pixel_frames(video, st - 1, st)?;
    let copy_pixel = Tensor::concat_rows(&vec![&last; st])?;
    Ok(NextFrame {
        predicted: psnr(&pixel_frames(&pred, st, 2 * st)?, &truth)?,
        copy_latent: psnr(&copy_latent, &truth)?,
        copy_pixel: psnr(&copy_pixel, &truth)?,
    })
}

/// Extends the first `seed_frames` latent frames of `video` to its full
/// length and scores every generated latent frame (pixel PSNR).
pub fn extrapolation_psnr<T: Float>(
    model: &Nova,
    store: &ParamStore<T>,
    video: &Tensor<T>,
    seed_frames: usize,
    prompt: usize,
    opts: &GenOptions,
) -> Result<(Tensor<T>, Vec<f64>)> {
    let st = model.cfg.stride_t;
    let tokens = model.encode_video(video)?;
    let total = tokens.shape()[0];
    if seed_frames == 0 || seed_frames >= total {
        return Err(contract_err!("{seed_frames} seed frames for a {total}-frame clip"));
    }
    let seed = tokens.slice_rows(0, seed_frames)?;
    let o = GenOptions {
        prompt,
        motion: motion_score(&pixel_frames(video, 0, seed_frames * st)?)?,
        ..opts.clone()
    };
    let out = model.extrapolate(store, &seed, total - seed_frames, &o)?;
    let pixels = model.decode_tokens(&out.tokens)?;
    let scores = (seed_frames..total)
        .map(|f| {
            psnr(
                &pixel_frames(&pixels, f * st, (f + 1) * st)?,
                &pixel_frames(video, f * st, (f + 1) * st)?,
            )
        })
        .collect::<Result<_>>()?;
    Ok((pixels, scores))
}

/// Least-squares slope of `ys` against their index.
pub fn trend(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
    }
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_video, SynthSpec};
    use crate::model::NovaConfig;

    #[test]
    fn trend_slope() {
        assert_eq!(trend(&[3.0]), 0.0);
        assert!((trend(&[1.0, 2.0, 3.0]) - 1.0).abs() < 1e-12);
        assert!(trend(&[5.0, 4.0, 4.5, 3.0]) < 0.0);
    }

    #[test]
    fn evaluation_shapes() {
        let cfg = NovaConfig {
            d: 16,
            heads: 2,
            head_width: 8,
            head_blocks: 1,
            temporal_depth: 1,
            spatial_enc_depth: 1,
            spatial_dec_depth: 1,
            scale_shift_rank: 4,
            frames: 3,
            infer_steps: 2,
            ar_steps: 2,
            ..NovaConfig::default()
        };
        let (model, store) = Nova::new::<f32>(cfg).unwrap();
        let v = synth_video::<f32>(&SynthSpec::random(32, 32, 8, 5)).unwrap();
        let opts = GenOptions::from_config(&model.cfg, v.prompt_id, 1.0, 0);
        let nf = next_frame(&model, &store, &v.video, v.prompt_id, &opts).unwrap();
        assert!([nf.predicted, nf.copy_latent, nf.copy_pixel].iter().all(|v| v.is_finite()));
        let (pix, scores) = extrapolation_psnr(&model, &store, &v.video, 2, v.prompt_id, &opts).unwrap();
        assert_eq!(pix.shape(), v.video.shape());
        assert_eq!(scores.len(), 2);
    }
}
