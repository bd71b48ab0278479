//! Attention contrast between annotated targets and background, overall and
//! per target-size bucket.
//!
//! For each image the attention map is brought to image resolution, then the
//! sum of its values over the target pixels is divided by the sum over the
//! pixels outside every target. The score is the mean of these ratios.

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Target size class by pixel area.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SizeBucket {
    /// Area ≤ 144.
    ExtremelySmall,
    /// 144 < area ≤ 400.
    RelativelySmall,
    /// 400 < area ≤ 1024.
    GenerallySmall,
    /// Area > 1024.
    Normal,
}

impl SizeBucket {
    pub const ALL: [SizeBucket; 4] = [
        SizeBucket::ExtremelySmall,
        SizeBucket::RelativelySmall,
        SizeBucket::GenerallySmall,
        SizeBucket::Normal,
    ];

    pub fn of_area(area: usize) -> Self {
        match area {
            0..=144 => SizeBucket::ExtremelySmall,
            145..=400 => SizeBucket::RelativelySmall,
            401..=1024 => SizeBucket::GenerallySmall,
            _ => SizeBucket::Normal,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            SizeBucket::ExtremelySmall => "es",
            SizeBucket::RelativelySmall => "rs",
            SizeBucket::GenerallySmall => "gs",
            SizeBucket::Normal => "nl",
        }
    }
}

/// A possibly rotated rectangle in pixel coordinates (pixel `(i, j)` covers
/// `[j, j+1) × [i, i+1)`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub angle_deg: f64,
}

impl OrientedBox {
    /// Axis-aligned box with top-left pixel `(x0, y0)`.
    pub fn axis_aligned(x0: usize, y0: usize, w: usize, h: usize) -> Self {
        Self {
            cx: x0 as f64 + w as f64 / 2.0,
            cy: y0 as f64 + h as f64 / 2.0,
            w: w as f64,
            h: h as f64,
            angle_deg: 0.0,
        }
    }

    /// Row-major indices of the pixels whose centres fall inside the box.
    pub fn rasterize(&self, height: usize, width: usize) -> Vec<usize> {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        let reach = hw.hypot(hh);
        let clip = |v: f64, n: usize| (v.max(0.0) as usize).min(n);
        let (i0, i1) = (
            clip((self.cy - reach).floor(), height),
            clip((self.cy + reach).ceil() + 1.0, height),
        );
        let (j0, j1) = (
            clip((self.cx - reach).floor(), width),
            clip((self.cx + reach).ceil() + 1.0, width),
        );
        let mut out = Vec::new();
        for i in i0..i1 {
            for j in j0..j1 {
                let (dx, dy) = (j as f64 + 0.5 - self.cx, i as f64 + 0.5 - self.cy);
                let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
                if u.abs() <= hw && v.abs() <= hh {
                    out.push(i * width + j);
                }
            }
        }
        out
    }
}

/// One annotated target as a set of pixel indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Target {
    pixels: Vec<usize>,
}

impl Target {
    pub fn new(mut pixels: Vec<usize>) -> Self {
        pixels.sort_unstable();
        pixels.dedup();
        Self { pixels }
    }

    pub fn pixels(&self) -> &[usize] {
        &self.pixels
    }

    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn bucket(&self) -> SizeBucket {
        SizeBucket::of_area(self.area())
    }
}

/// A raw attention map with the targets of its `height × width` image.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub attention: Tensor,
    pub height: usize,
    pub width: usize,
    pub targets: Vec<Target>,
}

impl AnnotatedImage {
    pub fn new(attention: Tensor, height: usize, width: usize, targets: Vec<Target>) -> Result<Self> {
        if attention.rank() != 2 || attention.numel() == 0 {
            return Err(invalid(
                "AnnotatedImage",
                format!("attention must be a nonempty 2-D map, got {:?}", attention.shape()),
            ));
        }
        let n = height * width;
        if targets.iter().flat_map(|t| t.pixels()).any(|&p| p >= n) {
            return Err(invalid("AnnotatedImage", "target pixel outside the image"));
        }
        Ok(Self {
            attention,
            height,
            width,
            targets,
        })
    }

    pub fn from_boxes(attention: Tensor, height: usize, width: usize, boxes: &[OrientedBox]) -> Result<Self> {
        let targets = boxes
            .iter()
            .map(|b| Target::new(b.rasterize(height, width)))
            .filter(|t| t.area() > 0)
            .collect();
        Self::new(attention, height, width, targets)
    }
}

/// How raw maps are brought to image resolution before the ratio is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scaling {
    /// Bilinear upsampling followed by min-max scaling to `[0, 255]`.
    #[default]
    MinMax,
    /// Bilinear upsampling only.
    Raw,
}

/// Bilinear resampling of `map[h, w]` to `[height, width]` with half-pixel
/// centres and edge clamping.
pub fn upsample_bilinear(map: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let &[h, w] = map.shape() else {
        return Err(invalid(
            "upsample_bilinear",
            format!("expected 2-D map, got {:?}", map.shape()),
        ));
    };
    if h == 0 || w == 0 || height == 0 || width == 0 {
        return Err(invalid("upsample_bilinear", "zero extent"));
    }
    let taps = |dst: usize, src_n: usize, dst_n: usize| {
        let s = ((dst as f64 + 0.5) * src_n as f64 / dst_n as f64 - 0.5).clamp(0.0, (src_n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src_n - 1);
        (i0, i1, s - i0 as f64)
    };
    let d = map.data();
    let mut out = Vec::with_capacity(height * width);
    for i in 0..height {
        let (r0, r1, fy) = taps(i, h, height);
        for j in 0..width {
            let (c0, c1, fx) = taps(j, w, width);
            let top = d[r0 * w + c0] * (1.0 - fx) + d[r0 * w + c1] * fx;
            let bottom = d[r1 * w + c0] * (1.0 - fx) + d[r1 * w + c1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Tensor::from_vec(&[height, width], out)
}

/// Upsamples to image resolution and maps min→0, max→255; a constant map
/// becomes all zeros.
pub fn prepare_attention(map: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let up = upsample_bilinear(map, height, width)?;
    let (lo, hi) = up
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if hi <= lo {
        return Ok(Tensor::zeros(&[height, width]));
    }
    let k = 255.0 / (hi - lo);
    Ok(up.map(|v| (v - lo) * k))
}

/// Result for one bucket (or for all targets).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SfacEntry {
    /// Mean ratio over contributing images; `None` when none contributed.
    pub value: Option<f64>,
    /// Images that contributed a ratio.
    pub images: usize,
    /// Targets counted in contributing images.
    pub targets: usize,
    /// Images skipped because their background sum was zero.
    pub zero_background: usize,
}

/// Attention contrast over `images`, restricted to targets of `bucket` when
/// given. Images without such targets are skipped. The background is the
/// complement of every target, whatever its bucket.
pub fn sfac(images: &[AnnotatedImage], bucket: Option<SizeBucket>, scaling: Scaling) -> Result<SfacEntry> {
    if images.is_empty() {
        return Err(invalid("sfac", "no images"));
    }
    let mut entry = SfacEntry {
        value: None,
        images: 0,
        targets: 0,
        zero_background: 0,
    };
    let mut total = 0.0;
    for img in images {
        let chosen: Vec<&Target> = img
            .targets
            .iter()
            .filter(|t| bucket.is_none_or(|b| t.bucket() == b))
            .collect();
        if chosen.is_empty() {
            continue;
        }
        let map = match scaling {
            Scaling::MinMax => prepare_attention(&img.attention, img.height, img.width)?,
            Scaling::Raw => upsample_bilinear(&img.attention, img.height, img.width)?,
        };
        let n = img.height * img.width;
        let mut in_any = vec![false; n];
        for t in &img.targets {
            t.pixels().iter().for_each(|&p| in_any[p] = true);
        }
        let mut in_chosen = vec![false; n];
        for t in &chosen {
            t.pixels().iter().for_each(|&p| in_chosen[p] = true);
        }
        let (mut fg, mut bg) = (0.0, 0.0);
        for (p, &v) in map.data().iter().enumerate() {
            if in_chosen[p] {
                fg += v;
            } else if !in_any[p] {
                bg += v;
            }
        }
        if bg == 0.0 {
            entry.zero_background += 1;
            continue;
        }
        total += fg / bg;
        entry.images += 1;
        entry.targets += chosen.len();
    }
    if entry.images > 0 {
        entry.value = Some(total / entry.images as f64);
    }
    Ok(entry)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SfacReport {
    pub all: SfacEntry,
    pub es: SfacEntry,
    pub rs: SfacEntry,
    pub gs: SfacEntry,
    pub nl: SfacEntry,
}

impl SfacReport {
    pub fn compute(images: &[AnnotatedImage], scaling: Scaling) -> Result<Self> {
        let by = |b| sfac(images, Some(b), scaling);
        Ok(Self {
            all: sfac(images, None, scaling)?,
            es: by(SizeBucket::ExtremelySmall)?,
            rs: by(SizeBucket::RelativelySmall)?,
            gs: by(SizeBucket::GenerallySmall)?,
            nl: by(SizeBucket::Normal)?,
        })
    }

    /// `(tag, entry)` rows in reporting order.
    pub fn rows(&self) -> [(&'static str, SfacEntry); 5] {
        [
            ("all", self.all),
            ("es", self.es),
            ("rs", self.rs),
            ("gs", self.gs),
            ("nl", self.nl),
        ]
    }
}
