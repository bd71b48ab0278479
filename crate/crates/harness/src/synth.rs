//! Seeded RGB/IR pairs with low-contrast targets and RGB-only glare.
//!
//! Targets are faint rectangles present in both modalities; the thermal
//! image renders them hot. Bright distractor blobs appear in RGB only and
//! never touch a target pixel.

use std::path::Path;

use anyhow::{bail, Result};
use dmm_core::io::{save_tensor, Precision};
use dmm_core::metrics::OrientedBox;
use dmm_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::report::write_annotations;

const TARGET_CONTRAST: f64 = 0.12;
const DISTRACTOR_GAIN: f64 = 0.5;
const NOISE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    /// `[3, H, W]`.
    pub rgb: Tensor,
    /// `[3, H, W]`.
    pub ir: Tensor,
    /// `[1, H, W]`, 1 inside a target.
    pub mask: Tensor,
    pub boxes: Vec<OrientedBox>,
    /// Row-major pixels lit by distractors.
    pub distractors: Vec<usize>,
}

impl SyntheticPair {
    pub fn height(&self) -> usize {
        self.mask.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.mask.shape()[2]
    }
}

fn overlaps(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize), margin: usize) -> bool {
    let (ax, ay, aw, ah) = a;
    let (bx, by, bw, bh) = b;
    ax < bx + bw + margin && bx < ax + aw + margin && ay < by + bh + margin && by < ay + ah + margin
}

fn noise(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(-NOISE..NOISE)
}

fn one_pair(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Result<SyntheticPair> {
    let n = h * w;
    let smax = 14.min(h).min(w);
    let smin = 6.min(smax);
    let want = rng.random_range(1..=3);
    let mut rects: Vec<(usize, usize, usize, usize)> = Vec::new();
    for _ in 0..200 {
        if rects.len() == want {
            break;
        }
        let (bw, bh) = (rng.random_range(smin..=smax), rng.random_range(smin..=smax));
        let r = (rng.random_range(0..=w - bw), rng.random_range(0..=h - bh), bw, bh);
        if rects.iter().all(|&o| !overlaps(r, o, 2)) {
            rects.push(r);
        }
    }
    if rects.is_empty() {
        bail!("could not place a target in {h}x{w}");
    }
    let boxes: Vec<OrientedBox> = rects
        .iter()
        .map(|&(x, y, bw, bh)| OrientedBox::axis_aligned(x, y, bw, bh))
        .collect();
    let mut mask = vec![0.0; n];
    for b in &boxes {
        b.rasterize(h, w).into_iter().for_each(|p| mask[p] = 1.0);
    }

    let mut glare = vec![0.0; n];
    let mut distractors = Vec::new();
    let blobs = rng.random_range(1..=3);
    for _ in 0..blobs {
        for _ in 0..50 {
            let r = rng.random_range(2..=4usize);
            let (ci, cj) = (rng.random_range(0..h) as isize, rng.random_range(0..w) as isize);
            let r2 = (r * r) as isize;
            let pixels: Vec<usize> = (-(r as isize)..=r as isize)
                .flat_map(|di| (-(r as isize)..=r as isize).map(move |dj| (di, dj)))
                .filter(|&(di, dj)| di * di + dj * dj <= r2)
                .map(|(di, dj)| (ci + di, cj + dj))
                .filter(|&(i, j)| i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w)
                .map(|(i, j)| i as usize * w + j as usize)
                .collect();
            if pixels.iter().all(|&p| mask[p] == 0.0) {
                for &p in &pixels {
                    glare[p] = DISTRACTOR_GAIN;
                }
                distractors.extend(pixels);
                break;
            }
        }
    }
    distractors.sort_unstable();
    distractors.dedup();

    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.45));
    let (gi, gj) = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    let mut rgb = vec![0.0; 3 * n];
    let mut lum = vec![0.0; n];
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let shade = gi * i as f64 / h as f64 + gj * j as f64 / w as f64;
            for (c, b) in base.iter().enumerate() {
                let scene = b + shade + TARGET_CONTRAST * mask[p] + noise(rng);
                lum[p] += scene / 3.0;
                rgb[c * n + p] = scene + glare[p];
            }
        }
    }
    let mean = lum.iter().sum::<f64>() / n as f64;
    let mut ir = vec![0.0; 3 * n];
    for p in 0..n {
        let heat = 0.3 + 0.8 * (lum[p] - mean) + 0.25 * mask[p];
        for c in 0..3 {
            ir[c * n + p] = heat + noise(rng);
        }
    }
    Ok(SyntheticPair {
        rgb: Tensor::from_vec(&[3, h, w], rgb)?,
        ir: Tensor::from_vec(&[3, h, w], ir)?,
        mask: Tensor::from_vec(&[1, h, w], mask)?,
        boxes,
        distractors,
    })
}

/// `n` pairs of `height × width` images, fully determined by `seed`.
pub fn gen_synthetic_pairs(n: usize, height: usize, width: usize, seed: u64) -> Result<Vec<SyntheticPair>> {
    if n == 0 {
        bail!("need at least one pair");
    }
    if height == 0 || width == 0 || height % 4 != 0 || width % 4 != 0 {
        bail!("extent {height}x{width} must be positive multiples of 4");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| one_pair(&mut rng, height, width)).collect()
}

fn stack(parts: &[&Tensor]) -> Result<Tensor> {
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(parts[0].shape());
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Ok(Tensor::from_vec(&shape, data)?)
}

/// Stacked inputs of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[N, 3, H, W]`.
    pub rgb: Tensor,
    /// `[N, 3, H, W]`.
    pub ir: Tensor,
    /// `[N, 1, H/s, W/s]`: a cell is positive when it holds any target pixel.
    pub cells: Tensor,
    /// `[N, 4, H/s, W/s]`: offset of the box centre from the cell centre and
    /// log box extent, all in cell units. Zero at negative cells.
    pub offsets: Tensor,
    pub stride: usize,
}

impl Batch {
    pub fn new(pairs: &[SyntheticPair], stride: usize) -> Result<Self> {
        if pairs.is_empty() {
            bail!("empty batch");
        }
        let rgb = stack(&pairs.iter().map(|p| &p.rgb).collect::<Vec<_>>())?;
        let ir = stack(&pairs.iter().map(|p| &p.ir).collect::<Vec<_>>())?;
        let masks = stack(&pairs.iter().map(|p| &p.mask).collect::<Vec<_>>())?;
        let cells = dmm_core::mta::downsample_mask(&masks, stride)?;
        let offsets = cell_offsets(pairs, stride)?;
        Ok(Self {
            rgb,
            ir,
            cells,
            offsets,
            stride,
        })
    }
}

/// Regression targets of every cell, taken from the box covering most of it
/// (the earlier box on ties).
pub fn cell_offsets(pairs: &[SyntheticPair], stride: usize) -> Result<Tensor> {
    let (h, w) = (pairs[0].height(), pairs[0].width());
    let (ch, cw) = (h / stride, w / stride);
    let cells = ch * cw;
    let s = stride as f64;
    let mut out = vec![0.0; pairs.len() * 4 * cells];
    for (n, pair) in pairs.iter().enumerate() {
        let mut best = vec![(0usize, usize::MAX); cells];
        for (k, b) in pair.boxes.iter().enumerate() {
            let mut count = vec![0usize; cells];
            for p in b.rasterize(h, w) {
                count[(p / w / stride) * cw + (p % w) / stride] += 1;
            }
            for (cell, &c) in count.iter().enumerate() {
                if c > best[cell].0 {
                    best[cell] = (c, k);
                }
            }
        }
        for (cell, &(c, k)) in best.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let b = &pair.boxes[k];
            let (ci, cj) = (cell / cw, cell % cw);
            let vals = [
                (b.cx - (cj as f64 + 0.5) * s) / s,
                (b.cy - (ci as f64 + 0.5) * s) / s,
                (b.w / s).ln(),
                (b.h / s).ln(),
            ];
            for (ch_idx, v) in vals.into_iter().enumerate() {
                out[(n * 4 + ch_idx) * cells + cell] = v;
            }
        }
    }
    Ok(Tensor::from_vec(&[pairs.len(), 4, ch, cw], out)?)
}

/// Writes each pair as `{id}_rgb`, `{id}_ir` and `{id}_mask` tensor files
/// plus `annotations.csv` under `dir`.
pub fn write_pairs(pairs: &[SyntheticPair], dir: &Path, precision: Precision) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, p) in pairs.iter().enumerate() {
        let id = crate::train::image_id(i);
        for (kind, t) in [("rgb", &p.rgb), ("ir", &p.ir), ("mask", &p.mask)] {
            save_tensor(dir.join(format!("{id}_{kind}.dmmt")), t, precision)?;
        }
    }
    let entries: Vec<(String, &[OrientedBox])> = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| (crate::train::image_id(i), p.boxes.as_slice()))
        .collect();
    write_annotations(std::fs::File::create(dir.join("annotations.csv"))?, &entries)
}
