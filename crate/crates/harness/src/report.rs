//! Attention-contrast reports from map files and box annotations.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use dmm_core::io::load_tensor;
use dmm_core::metrics::{AnnotatedImage, OrientedBox, Scaling, SfacEntry, SfacReport};
use dmm_core::Tensor;
use serde::{Deserialize, Serialize};

/// One row of an annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: String,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub angle_deg: f64,
    pub class: String,
}

impl Annotation {
    pub fn bbox(&self) -> OrientedBox {
        OrientedBox {
            cx: self.cx,
            cy: self.cy,
            w: self.w,
            h: self.h,
            angle_deg: self.angle_deg,
        }
    }
}

/// Parses `image_id,cx,cy,w,h,angle_deg,class` rows under a header.
pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let rows = reader
        .deserialize()
        .collect::<std::result::Result<Vec<Annotation>, _>>()
        .with_context(|| format!("parsing {}", path.display()))?;
    if rows.is_empty() {
        bail!("annotation file {} has no rows", path.display());
    }
    Ok(rows)
}

/// Writes `(image_id, boxes)` entries, class `target`.
pub fn write_annotations<W: Write>(w: W, entries: &[(String, &[OrientedBox])]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for (id, boxes) in entries {
        for b in *boxes {
            out.serialize(Annotation {
                image_id: id.clone(),
                cx: b.cx,
                cy: b.cy,
                w: b.w,
                h: b.h,
                angle_deg: b.angle_deg,
                class: "target".into(),
            })?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Boxes per image in file order.
pub fn group_by_image(rows: &[Annotation]) -> BTreeMap<String, Vec<OrientedBox>> {
    let mut out: BTreeMap<String, Vec<OrientedBox>> = BTreeMap::new();
    for r in rows {
        out.entry(r.image_id.clone()).or_default().push(r.bbox());
    }
    out
}

/// Squeezes leading unit axes of a stored map down to `[h, w]`.
pub fn as_map(t: Tensor) -> Result<Tensor> {
    let dims: Vec<usize> = t.shape().to_vec();
    if dims.len() < 2 || dims[..dims.len() - 2].iter().any(|&d| d != 1) {
        bail!("attention map must be [h, w] with optional unit leading axes, got {dims:?}");
    }
    Ok(t.reshape(&dims[dims.len() - 2..])?)
}

/// Maps found in `dir` for the annotated images, and how many were missing.
pub fn load_images(
    dir: &Path,
    boxes: &BTreeMap<String, Vec<OrientedBox>>,
    height: usize,
    width: usize,
) -> Result<(BTreeMap<String, AnnotatedImage>, usize)> {
    let mut images = BTreeMap::new();
    let mut missing = 0;
    for (id, b) in boxes {
        let path = dir.join(format!("{id}.dmmt"));
        if !path.exists() {
            missing += 1;
            continue;
        }
        let map = as_map(load_tensor(&path).with_context(|| format!("reading {}", path.display()))?)?;
        images.insert(id.clone(), AnnotatedImage::from_boxes(map, height, width, b)?);
    }
    Ok((images, missing))
}

/// Per-bucket contrast of in-memory maps, each paired with its image's boxes.
pub fn score_maps(
    maps: &[Tensor],
    boxes: &[&[OrientedBox]],
    height: usize,
    width: usize,
    scaling: Scaling,
) -> Result<SfacReport> {
    if maps.len() != boxes.len() {
        bail!("{} maps but {} box lists", maps.len(), boxes.len());
    }
    let images = maps
        .iter()
        .zip(boxes)
        .map(|(m, b)| AnnotatedImage::from_boxes(m.clone(), height, width, b))
        .collect::<dmm_core::Result<Vec<_>>>()?;
    Ok(SfacReport::compute(&images, scaling)?)
}

/// Per-bucket contrast of one map directory, or of two for comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct SfacOutcome {
    pub baseline: SfacReport,
    pub compare: Option<SfacReport>,
    /// Annotated images skipped for lack of a map (in either directory).
    pub missing: usize,
    pub images: usize,
}

pub struct SfacRequest<'a> {
    pub maps: &'a Path,
    pub compare: Option<&'a Path>,
    pub annotations: &'a Path,
    pub height: usize,
    pub width: usize,
    pub scaling: Scaling,
}

pub fn run_sfac_report(req: &SfacRequest<'_>) -> Result<SfacOutcome> {
    let rows = read_annotations(req.annotations)?;
    let boxes = group_by_image(&rows);
    let (mut base, mut missing) = load_images(req.maps, &boxes, req.height, req.width)?;
    let mut other = None;
    if let Some(dir) = req.compare {
        let (mut imgs, miss) = load_images(dir, &boxes, req.height, req.width)?;
        let before = base.len();
        base.retain(|id, _| imgs.contains_key(id));
        imgs.retain(|id, _| base.contains_key(id));
        missing += miss.max(before - base.len());
        other = Some(imgs);
    }
    if base.is_empty() {
        bail!("no annotated image has an attention map");
    }
    let list = |m: BTreeMap<String, AnnotatedImage>| m.into_values().collect::<Vec<_>>();
    let images = base.len();
    let baseline = SfacReport::compute(&list(base), req.scaling)?;
    let compare = other.map(|m| SfacReport::compute(&list(m), req.scaling)).transpose()?;
    Ok(SfacOutcome {
        baseline,
        compare,
        missing,
        images,
    })
}

fn value(e: &SfacEntry) -> String {
    e.value.map_or_else(|| "NaN".into(), |v| format!("{v:e}"))
}

pub fn write_csv<W: Write>(w: W, outcome: &SfacOutcome) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    match &outcome.compare {
        None => {
            out.write_record(["bucket", "sfac", "images", "targets", "zero_background"])?;
            for (tag, e) in outcome.baseline.rows() {
                out.write_record([
                    tag.to_string(),
                    value(&e),
                    e.images.to_string(),
                    e.targets.to_string(),
                    e.zero_background.to_string(),
                ])?;
            }
        }
        Some(cmp) => {
            out.write_record(["bucket", "baseline", "compare", "delta", "relative_change"])?;
            for ((tag, a), (_, b)) in outcome.baseline.rows().into_iter().zip(cmp.rows()) {
                let (delta, rel) = match (a.value, b.value) {
                    (Some(x), Some(y)) => (format!("{:e}", y - x), format!("{:e}", (y - x) / x)),
                    _ => ("NaN".into(), "NaN".into()),
                };
                out.write_record([tag.to_string(), value(&a), value(&b), delta, rel])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Aligned plain-text table of the same numbers.
pub fn summary(outcome: &SfacOutcome) -> String {
    let mut s = format!("images: {}  skipped (no map): {}\n", outcome.images, outcome.missing);
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".into(), |v| format!("{v:.4}"));
    match &outcome.compare {
        None => {
            s.push_str(&format!(
                "{:<6}{:>12}{:>8}{:>8}\n",
                "bucket", "sfac", "images", "targets"
            ));
            for (tag, e) in outcome.baseline.rows() {
                s.push_str(&format!(
                    "{tag:<6}{:>12}{:>8}{:>8}\n",
                    fmt(e.value),
                    e.images,
                    e.targets
                ));
            }
        }
        Some(cmp) => {
            s.push_str(&format!(
                "{:<6}{:>12}{:>12}{:>12}\n",
                "bucket", "baseline", "compare", "delta"
            ));
            for ((tag, a), (_, b)) in outcome.baseline.rows().into_iter().zip(cmp.rows()) {
                let d = a.value.zip(b.value).map(|(x, y)| y - x);
                s.push_str(&format!(
                    "{tag:<6}{:>12}{:>12}{:>12}\n",
                    fmt(a.value),
                    fmt(b.value),
                    fmt(d)
                ));
            }
        }
    }
    s
}
