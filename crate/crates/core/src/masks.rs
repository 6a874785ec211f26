//! Inpainting masks: `true` marks a pixel to regenerate.
//!
//! Stroke families are re-parameterised for small grids:
//!
//! | kind   | brush width            | strokes | extra              |
//! |--------|------------------------|---------|--------------------|
//! | thin   | 1                      | 1-2     |                    |
//! | medium | ~10% of `min(H, W)`    | 1-3     |                    |
//! | thick  | ~25% of `min(H, W)`    | 1-4     | rectangle, p = 0.5 |
//!
//! Each stroke is a random polyline of 2-4 segments rasterised by stamping
//! discs of the brush width every half pixel.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    cells: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != height * width {
            return Err(Error::invalid(
                "Mask::new",
                format!(
                    "{}x{} mask needs {} cells, got {}",
                    height,
                    width,
                    height * width,
                    cells.len()
                ),
            ));
        }
        Ok(Self { height, width, cells })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, false)
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self::filled(height, width, true)
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            cells: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let cells = (0..height)
            .flat_map(|i| (0..width).map(move |j| (i, j)))
            .map(|(i, j)| f(i, j))
            .collect();
        Self { height, width, cells }
    }

    /// Accepts only exact 0/1 values.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = match t.shape() {
            [h, w] | [h, w, 1] => (*h, *w),
            other => {
                return Err(Error::invalid(
                    "Mask::from_tensor",
                    format!("expected [H, W] or [H, W, 1], got {other:?}"),
                ))
            }
        };
        let mut cells = Vec::with_capacity(h * w);
        for (i, &v) in t.data().iter().enumerate() {
            match v {
                0.0 => cells.push(false),
                1.0 => cells.push(true),
                _ => {
                    return Err(Error::invalid(
                        "Mask::from_tensor",
                        format!("value {v} at index {i} is not 0 or 1"),
                    ))
                }
            }
        }
        Ok(Self {
            height: h,
            width: w,
            cells,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.width + j]
    }

    fn set(&mut self, i: usize, j: usize) {
        self.cells[i * self.width + j] = true;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// `M` as a `[H, W]` tensor of 0/1.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.cells.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
        Tensor::from_parts(vec![self.height, self.width], data)
    }

    /// `M` repeated over `channels`, as selection flags for a `[H, W, C]`
    /// image.
    pub fn expand(&self, channels: usize) -> Vec<bool> {
        self.cells
            .iter()
            .flat_map(|&c| std::iter::repeat_n(c, channels))
            .collect()
    }

    /// `1 - M` repeated over `channels`, shaped `[H, W, C]`.
    pub fn keep_weights(&self, channels: usize) -> Tensor {
        let data = self
            .expand(channels)
            .into_iter()
            .map(|c| if c { 0.0 } else { 1.0 })
            .collect();
        Tensor::from_parts(vec![self.height, self.width, channels], data)
    }

    /// Checks that an image is `[H, W, C]` with this mask's extents.
    pub fn check_image(&self, op: &'static str, shape: &[usize]) -> Result<usize> {
        match shape {
            [h, w, c] if *h == self.height && *w == self.width => Ok(*c),
            _ => Err(Error::ShapeMismatch {
                op,
                left: vec![self.height, self.width],
                right: shape.to_vec(),
            }),
        }
    }
}

/// Fraction of pixels marked for inpainting; 0 for an empty grid.
pub fn coverage(mask: &Mask) -> f64 {
    if mask.cells.is_empty() {
        0.0
    } else {
        mask.count() as f64 / mask.cells.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrokeParams {
    pub min_strokes: usize,
    pub max_strokes: usize,
    pub min_width: usize,
    pub max_width: usize,
    /// Probability of adding one random rectangle.
    #[serde(default)]
    pub rect_probability: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MaskKind {
    Thin,
    Medium,
    Thick,
    Strokes(StrokeParams),
    Rect {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    },
    Bernoulli {
        p: f64,
    },
}

impl MaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            MaskKind::Thin => "thin",
            MaskKind::Medium => "medium",
            MaskKind::Thick => "thick",
            MaskKind::Strokes(_) => "strokes",
            MaskKind::Rect { .. } => "rect",
            MaskKind::Bernoulli { .. } => "bernoulli",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    #[serde(flatten)]
    pub kind: MaskKind,
    #[serde(default)]
    pub seed: u64,
}

impl MaskSpec {
    pub fn new(kind: MaskKind, seed: u64) -> Self {
        Self { kind, seed }
    }
}

/// Brush parameters of the named stroke families on an `h x w` grid.
pub fn family_params(kind: &MaskKind, h: usize, w: usize) -> Option<StrokeParams> {
    let side = h.min(w) as f64;
    let width = |frac: f64| ((side * frac).round() as usize).max(1);
    match kind {
        MaskKind::Thin => Some(StrokeParams {
            min_strokes: 1,
            max_strokes: 2,
            min_width: 1,
            max_width: 1,
            rect_probability: 0.0,
        }),
        MaskKind::Medium => Some(StrokeParams {
            min_strokes: 1,
            max_strokes: 3,
            min_width: width(0.1),
            max_width: width(0.1),
            rect_probability: 0.0,
        }),
        MaskKind::Thick => Some(StrokeParams {
            min_strokes: 1,
            max_strokes: 4,
            min_width: width(0.25),
            max_width: width(0.25),
            rect_probability: 0.5,
        }),
        MaskKind::Strokes(p) => Some(*p),
        _ => None,
    }
}

pub fn generate_mask(spec: &MaskSpec, height: usize, width: usize) -> Result<Mask> {
    const OP: &str = "generate_mask";
    if height == 0 || width == 0 {
        return Err(Error::invalid(OP, "empty grid"));
    }
    let mut rng = rng_for(spec.seed, &[stream::MASK]);
    match spec.kind {
        MaskKind::Bernoulli { p } => {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::invalid(OP, format!("bernoulli p = {p} not in (0, 1)")));
            }
            let cells = (0..height * width).map(|_| rng.random_bool(p)).collect();
            Mask::new(height, width, cells)
        }
        MaskKind::Rect {
            top,
            left,
            height: rh,
            width: rw,
        } => {
            if rh == 0 || rw == 0 || top + rh > height || left + rw > width {
                return Err(Error::invalid(
                    OP,
                    format!("rect {rh}x{rw} at ({top}, {left}) does not fit {height}x{width}"),
                ));
            }
            Ok(Mask::from_fn(height, width, |i, j| {
                (top..top + rh).contains(&i) && (left..left + rw).contains(&j)
            }))
        }
        ref kind => {
            let params = family_params(kind, height, width).expect("stroke kinds have params");
            strokes(&params, height, width, &mut rng)
        }
    }
}

fn strokes(p: &StrokeParams, h: usize, w: usize, rng: &mut impl Rng) -> Result<Mask> {
    const OP: &str = "generate_mask";
    let side = h.min(w);
    if p.min_strokes == 0 || p.min_strokes > p.max_strokes {
        return Err(Error::invalid(OP, format!("bad stroke count range {p:?}")));
    }
    if p.min_width == 0 || p.min_width > p.max_width || p.max_width > side {
        return Err(Error::invalid(OP, format!("bad brush width range {p:?}")));
    }
    if !(0.0..=1.0).contains(&p.rect_probability) {
        return Err(Error::invalid(OP, "rect probability outside [0, 1]"));
    }
    let mut mask = Mask::zeros(h, w);
    let n = rng.random_range(p.min_strokes..=p.max_strokes);
    for _ in 0..n {
        let width = rng.random_range(p.min_width..=p.max_width) as f64;
        let mut y = rng.random_range(0.0..h as f64);
        let mut x = rng.random_range(0.0..w as f64);
        let segments = rng.random_range(2..=4);
        for _ in 0..segments {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let len = rng.random_range(0.25..0.6) * side as f64;
            let ny = (y + len * angle.sin()).clamp(0.0, h as f64 - 1e-9);
            let nx = (x + len * angle.cos()).clamp(0.0, w as f64 - 1e-9);
            stamp_segment(&mut mask, (y, x), (ny, nx), width);
            (y, x) = (ny, nx);
        }
    }
    if p.rect_probability > 0.0 && rng.random_bool(p.rect_probability) {
        let rh = ((rng.random_range(0.1..0.4) * h as f64).round() as usize).clamp(1, h);
        let rw = ((rng.random_range(0.1..0.4) * w as f64).round() as usize).clamp(1, w);
        let top = rng.random_range(0..=h - rh);
        let left = rng.random_range(0..=w - rw);
        for i in top..top + rh {
            for j in left..left + rw {
                mask.set(i, j);
            }
        }
    }
    Ok(mask)
}

/// Marks every pixel whose centre lies within `width / 2` of the segment,
/// plus the pixels containing the stamp points.
fn stamp_segment(mask: &mut Mask, from: (f64, f64), to: (f64, f64), width: f64) {
    let r = width / 2.0;
    let len = ((to.0 - from.0).powi(2) + (to.1 - from.1).powi(2)).sqrt();
    let n = (len / 0.5).ceil().max(1.0) as usize;
    for s in 0..=n {
        let f = s as f64 / n as f64;
        let (cy, cx) = (from.0 + f * (to.0 - from.0), from.1 + f * (to.1 - from.1));
        mask.set(
            (cy.floor() as usize).min(mask.height - 1),
            (cx.floor() as usize).min(mask.width - 1),
        );
        let (i0, i1) = ((cy - r).floor().max(0.0) as usize, (cy + r).ceil() as usize);
        let (j0, j1) = ((cx - r).floor().max(0.0) as usize, (cx + r).ceil() as usize);
        for i in i0..i1.min(mask.height) {
            for j in j0..j1.min(mask.width) {
                let (py, px) = (i as f64 + 0.5, j as f64 + 0.5);
                if (py - cy).powi(2) + (px - cx).powi(2) <= r * r {
                    mask.set(i, j);
                }
            }
        }
    }
}

/// Centred rectangle whose area is as close as possible to `fraction` of
/// the grid.
pub fn centered_rect(height: usize, width: usize, fraction: f64) -> Result<Mask> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(
            "centered_rect",
            format!("fraction {fraction} outside [0, 1]"),
        ));
    }
    let target = fraction * (height * width) as f64;
    let mut best = (f64::INFINITY, 0, 0);
    for rh in 0..=height {
        for rw in 0..=width {
            let err = ((rh * rw) as f64 - target).abs();
            // prefer near-square rectangles among equally good areas
            let skew = (rh as f64 / height as f64 - rw as f64 / width as f64).abs();
            let score = err + 1e-3 * skew;
            if score < best.0 {
                best = (score, rh, rw);
            }
        }
    }
    let (_, rh, rw) = best;
    let (top, left) = ((height - rh) / 2, (width - rw) / 2);
    Ok(Mask::from_fn(height, width, |i, j| {
        (top..top + rh).contains(&i) && (left..left + rw).contains(&j)
    }))
}
