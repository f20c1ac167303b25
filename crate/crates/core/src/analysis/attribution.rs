//! Per-token cross-attention heatmaps aggregated over heads, layers and
//! sampling steps.

use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::data::write_gray;
use crate::diffusion::{sample_traced, SamplerConfig, StepCapture};
use crate::distill::Pipeline;
use crate::error::{Error, Result};
use crate::text::PAD_ID;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMaps {
    pub tokens: Vec<String>,
    pub height: usize,
    pub width: usize,
    /// One row-major `[height, width]` map per token, before normalisation.
    pub maps: Vec<Vec<f32>>,
}

/// Bilinear resize with half-pixel centres (`align_corners = false`).
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    if (h, w) == (oh, ow) {
        return src.to_vec();
    }
    let coord = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f32) {
        let x = ((o as f32 + 0.5) * n_in as f32 / n_out as f32 - 0.5).max(0.0);
        let x0 = (x.floor() as usize).min(n_in - 1);
        let x1 = (x0 + 1).min(n_in - 1);
        (x0, x1, x - x0 as f32)
    };
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        let (y0, y1, fy) = coord(y, h, oh);
        for x in 0..ow {
            let (x0, x1, fx) = coord(x, w, ow);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[y * ow + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

/// Averages the conditional cross-attention of sample `batch_index` for the
/// first `n_tokens` context positions. Every layer is upsampled to the largest
/// captured resolution, then layers and steps are averaged.
pub fn aggregate_attention(steps: &[StepCapture], batch_index: usize, n_tokens: usize) -> Result<(usize, usize, Vec<Vec<f32>>)> {
    let layers: Vec<_> = steps.iter().flat_map(|s| s.layers.iter()).collect();
    let (h, w) = layers
        .iter()
        .map(|l| (l.height, l.width))
        .max_by_key(|&(h, w)| h * w)
        .ok_or_else(|| Error::Domain("no cross-attention captured".into()))?;
    let mut acc = vec![vec![0.0f32; h * w]; n_tokens];
    for layer in &layers {
        // [heads, N, L] -> mean over heads -> [N, L]
        let probs = layer.probs.get(batch_index)?.to_dtype(DType::F32)?.mean(0)?;
        let (n, l) = probs.dims2()?;
        if n != layer.height * layer.width || n_tokens > l {
            return Err(Error::Dimension(format!("attention {:?} does not fit {}x{} with {n_tokens} tokens", probs.dims(), layer.height, layer.width)));
        }
        let rows: Vec<Vec<f32>> = probs.t()?.contiguous()?.to_vec2::<f32>()?;
        for (k, map) in acc.iter_mut().enumerate() {
            let up = resize_bilinear(&rows[k], layer.height, layer.width, h, w);
            map.iter_mut().zip(up).for_each(|(a, b)| *a += b);
        }
    }
    let n = layers.len() as f32;
    acc.iter_mut().for_each(|m| m.iter_mut().for_each(|v| *v /= n));
    Ok((h, w, acc))
}

/// Samples from `prompt` while recording cross-attention, then aggregates
/// one map per prompt token.
pub fn attribution_maps(pipeline: &Pipeline, prompt: &str, cfg: &SamplerConfig, image_size: usize) -> Result<AttributionMaps> {
    let tokens = pipeline.vocabulary.tokenize(prompt);
    if tokens.is_empty() {
        return Err(Error::Domain("attribution needs a nonempty prompt".into()));
    }
    let cond = pipeline.text.condition(&tokens)?;
    let n_tokens = cond.tokens.iter().take_while(|&&t| t != PAD_ID).count();
    let mut steps = Vec::new();
    let mut observer = |s: StepCapture| steps.push(s);
    let (lh, lw) = pipeline.codec.latent_hw(image_size, image_size);
    let null = pipeline.text.null_condition()?;
    sample_traced(&pipeline.unet, &[cond.clone()], &null, cfg, &pipeline.schedule, (lh, lw), Some(&mut observer))?;
    let (height, width, maps) = aggregate_attention(&steps, 0, n_tokens)?;
    let words = cond.tokens[..n_tokens].iter().map(|&t| pipeline.vocabulary.token(t).to_string()).collect();
    Ok(AttributionMaps { tokens: words, height, width, maps })
}

/// Cosine similarity of two equally sized vectors (0 if either is zero).
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

impl AttributionMaps {
    /// Each map divided by its maximum (maps with max 0 stay zero).
    pub fn normalized(&self) -> Vec<Vec<f32>> {
        self.maps
            .iter()
            .map(|m| {
                let max = m.iter().copied().fold(0.0f32, f32::max);
                if max > 0.0 {
                    m.iter().map(|v| v / max).collect()
                } else {
                    m.clone()
                }
            })
            .collect()
    }

    /// Per-token cosine similarity against maps of the same prompt.
    pub fn cosine_to(&self, other: &AttributionMaps) -> Result<Vec<f64>> {
        if self.tokens != other.tokens || (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Dimension("attribution maps of different prompts or sizes".into()));
        }
        Ok(self.maps.iter().zip(&other.maps).map(|(a, b)| cosine(a, b)).collect())
    }

    pub fn mean_cosine_to(&self, other: &AttributionMaps) -> Result<f64> {
        let c = self.cosine_to(other)?;
        Ok(c.iter().sum::<f64>() / c.len().max(1) as f64)
    }

    /// Writes `<prefix>_<k>_<token>.<ext>` per token plus `<prefix>.json`.
    pub fn write(&self, dir: impl AsRef<Path>, prefix: &str, ext: &str) -> Result<Vec<String>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        for (k, (tok, map)) in self.tokens.iter().zip(self.normalized()).enumerate() {
            let name = format!("{prefix}_{k:02}_{}.{ext}", tok.replace(|c: char| !c.is_alphanumeric() && c != '-', "_"));
            write_gray(dir.join(&name), self.width, self.height, &map)?;
            files.push(name);
        }
        #[derive(Serialize)]
        struct Index<'a> {
            tokens: &'a [String],
            height: usize,
            width: usize,
            files: &'a [String],
            maps: &'a [Vec<f32>],
        }
        let index = Index { tokens: &self.tokens, height: self.height, width: self.width, files: &files, maps: &self.maps };
        std::fs::write(dir.join(format!("{prefix}.json")), serde_json::to_string_pretty(&index)?)?;
        Ok(files)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_matches_half_pixel_reference() {
        // 2x2 -> 4x4; first output row/col replicate the edge then interpolate
        let up = resize_bilinear(&[0.0, 1.0, 2.0, 3.0], 2, 2, 4, 4);
        let row0 = &up[0..4];
        assert_eq!(row0, &[0.0, 0.25, 0.75, 1.0]);
        assert_eq!(up[12..16], [2.0, 2.25, 2.75, 3.0]);
        let c = resize_bilinear(&[5.0; 4], 2, 2, 8, 8);
        assert!(c.iter().all(|&v| v == 5.0));
    }

    #[test]
    fn cosine_basics() {
        assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(cosine(&[0.0, 0.0], &[0.0, 1.0]), 0.0);
    }
}
