//! Planted-target fixture for the attention contrast: bright boxes of every
//! size bucket on a dim noisy background, scored before and after a
//! target-aware attention whose weights respond to channel brightness.

use anyhow::Result;
use dmm_core::autograd::Graph;
use dmm_core::metrics::{OrientedBox, Scaling, SfacReport};
use dmm_core::mta::{Mta, MtaConfig};
use dmm_core::params::ParamStore;
use dmm_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::report::score_maps;
use crate::train::energy_maps;

pub const EXTENT: usize = 128;
const CHANNELS: usize = 3;
/// Box sides, one per size bucket: areas 100, 256, 784 and 1600.
const SIDES: [usize; 4] = [10, 16, 28, 40];
const CORNERS: [(usize, usize); 4] = [(8, 8), (80, 8), (8, 70), (72, 72)];
const BACKGROUND: (f64, f64) = (0.0, 0.2);
const TARGET: (f64, f64) = (0.4, 0.6);
/// Attention logit is `GAIN · (max_c − THRESHOLD)` at every pixel.
const GAIN: f64 = 20.0;
const THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone)]
pub struct PlantedContrast {
    pub baseline: SfacReport,
    pub enhanced: SfacReport,
}

/// `[images, 3, EXTENT, EXTENT]` fixture and the boxes planted in each image.
pub fn planted_features(images: usize, seed: u64) -> Result<(Tensor, Vec<OrientedBox>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = EXTENT * EXTENT;
    let boxes: Vec<OrientedBox> = SIDES
        .iter()
        .zip(CORNERS)
        .map(|(&s, (x, y))| OrientedBox::axis_aligned(x, y, s, s))
        .collect();
    let mut inside = vec![false; plane];
    for b in &boxes {
        b.rasterize(EXTENT, EXTENT).into_iter().for_each(|p| inside[p] = true);
    }
    let mut data = Vec::with_capacity(images * CHANNELS * plane);
    for _ in 0..images * CHANNELS {
        for &hit in &inside {
            let (lo, hi) = if hit { TARGET } else { BACKGROUND };
            data.push(rng.random_range(lo..hi));
        }
    }
    Ok((Tensor::from_vec(&[images, CHANNELS, EXTENT, EXTENT], data)?, boxes))
}

/// Attention with an identity pre-convolution and brightness-gated weights.
fn brightness_attention(store: &mut ParamStore, seed: u64) -> Result<Mta> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mta = Mta::new(store, "mta", CHANNELS, &MtaConfig::default(), &mut rng)?;
    let mut w = Tensor::zeros(&[CHANNELS, CHANNELS, 3, 3]);
    for c in 0..CHANNELS {
        let i = ((c * CHANNELS + c) * 3 + 1) * 3 + 1;
        w.data_mut()[i] = 1.0;
    }
    store.set(mta.initial.w, w)?;
    if let Some(b) = mta.initial.b {
        store.fill(b, 0.0);
    }
    for conv in &mta.attention {
        let k = store.get(conv.w).shape()[2];
        let mut w = Tensor::zeros(&[1, 2, k, k]);
        w.data_mut()[k * k + (k / 2) * k + k / 2] = GAIN;
        store.set(conv.w, w)?;
        if let Some(b) = conv.b {
            store.fill(b, -GAIN * THRESHOLD);
        }
    }
    Ok(mta)
}

/// Contrast of the channel-energy maps of the fixture before and after the
/// attention.
pub fn planted_contrast(images: usize, seed: u64, scaling: Scaling) -> Result<PlantedContrast> {
    let (x, boxes) = planted_features(images, seed)?;
    let mut store = ParamStore::new();
    let mta = brightness_attention(&mut store, seed)?;
    let mut g = Graph::new();
    let p = store.bind_constant(&mut g);
    let input = g.constant(x.clone());
    let out = mta.forward(&mut g, &p, input)?;
    let per_image = vec![&boxes[..]; images];
    Ok(PlantedContrast {
        baseline: score_maps(&energy_maps(&x)?, &per_image, EXTENT, EXTENT, scaling)?,
        enhanced: score_maps(&energy_maps(g.value(out))?, &per_image, EXTENT, EXTENT, scaling)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_box_per_bucket() {
        let (x, boxes) = planted_features(1, 0).unwrap();
        assert_eq!(x.shape(), &[1, 3, EXTENT, EXTENT]);
        let areas: Vec<usize> = boxes.iter().map(|b| b.rasterize(EXTENT, EXTENT).len()).collect();
        assert_eq!(areas, vec![100, 256, 784, 1600]);
    }

    #[test]
    fn attention_raises_contrast_in_every_bucket() {
        for scaling in [Scaling::MinMax, Scaling::Raw] {
            let c = planted_contrast(4, 3, scaling).unwrap();
            for ((tag, b), (_, e)) in c.baseline.rows().into_iter().zip(c.enhanced.rows()) {
                let (b, e) = (b.value.unwrap(), e.value.unwrap());
                assert!(e > b, "{tag}: {e} <= {b}");
            }
        }
    }
}
