use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::layout::{BBox, Document, GrayImage};

const BACKGROUND: f32 = 1.0;

/// One affine warp about the page center; translation is a fraction of page size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub rotation_deg: f64,
    pub tx: f64,
    pub ty: f64,
    pub scale: f64,
    pub shear_deg: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        rotation_deg: 0.0,
        tx: 0.0,
        ty: 0.0,
        scale: 1.0,
        shear_deg: 0.0,
    };

    /// Linear part `R(θ) · Shear(φ) · s` as `[a, b, c, d]` (row-major 2×2).
    pub fn linear(&self) -> [f64; 4] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let k = self.shear_deg.to_radians().tan();
        let z = self.scale;
        // [c -s; s c] · [1 k; 0 1] · z
        [c * z, (c * k - s) * z, s * z, (s * k + c) * z]
    }

    /// Page-space forward map.
    pub fn map_point(&self, x: f64, y: f64, page_w: f64, page_h: f64) -> (f64, f64) {
        let [a, b, c, d] = self.linear();
        let (cx, cy) = (page_w / 2.0, page_h / 2.0);
        let (dx, dy) = (x - cx, y - cy);
        // x + (A − I)·d + t, so the identity returns its input bit for bit
        (
            x + ((a - 1.0) * dx + b * dy + self.tx * page_w),
            y + (c * dx + (d - 1.0) * dy + self.ty * page_h),
        )
    }

    fn unmap_point(&self, x: f64, y: f64, page_w: f64, page_h: f64) -> (f64, f64) {
        let [a, b, c, d] = self.linear();
        let det = a * d - b * c;
        let (cx, cy) = (page_w / 2.0, page_h / 2.0);
        let (dx, dy) = (x - cx - self.tx * page_w, y - cy - self.ty * page_h);
        ((d * dx - b * dy) / det + cx, (a * dy - c * dx) / det + cy)
    }
}

/// Uniform sampling ranges and the chance of augmenting at all.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AffineBounds {
    pub rotation_deg: f64,
    pub translate: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub shear_deg: f64,
    pub probability: f64,
}

impl Default for AffineBounds {
    fn default() -> Self {
        AffineBounds {
            rotation_deg: 5.0,
            translate: 0.05,
            scale_min: 0.9,
            scale_max: 1.1,
            shear_deg: 5.0,
            probability: 0.9,
        }
    }
}

impl AffineBounds {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AffineParams {
        let sym = |rng: &mut R, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        AffineParams {
            rotation_deg: sym(rng, self.rotation_deg),
            tx: sym(rng, self.translate),
            ty: sym(rng, self.translate),
            scale: if self.scale_max > self.scale_min {
                rng.random_range(self.scale_min..=self.scale_max)
            } else {
                self.scale_min
            },
            shear_deg: sym(rng, self.shear_deg),
        }
    }
}

/// Warps the raster (bilinear, white fill) and replaces every box by the envelope of
/// its transformed corners, clamped to the page.
pub fn apply_affine(doc: &Document, params: &AffineParams) -> Document {
    let (pw, ph) = (doc.page.width as f64, doc.page.height as f64);
    let mut out = doc.clone();
    for t in &mut out.tokens {
        let b = t.bbox;
        let corners = [(b.x0, b.y0), (b.x1, b.y0), (b.x0, b.y1), (b.x1, b.y1)];
        let mapped = corners.map(|(x, y)| params.map_point(x, y, pw, ph));
        let xs = mapped.map(|p| p.0);
        let ys = mapped.map(|p| p.1);
        let env = BBox::new(
            xs.iter().copied().fold(f64::INFINITY, f64::min),
            ys.iter().copied().fold(f64::INFINITY, f64::min),
            xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            ys.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        );
        t.bbox = env.clamp_to(pw, ph);
    }
    if let Some(img) = &doc.page.image {
        let (iw, ih) = (img.width(), img.height());
        let (sx, sy) = (pw / iw as f64, ph / ih as f64);
        let mut px = Vec::with_capacity(iw * ih);
        for y in 0..ih {
            for x in 0..iw {
                let (qx, qy) = ((x as f64 + 0.5) * sx, (y as f64 + 0.5) * sy);
                let (u, v) = params.unmap_point(qx, qy, pw, ph);
                px.push(img.sample_bilinear(u / sx, v / sy, BACKGROUND));
            }
        }
        out.page.image = Some(GrayImage::new(iw, ih, px).expect("same dimensions"));
    }
    out
}

/// Applies a sampled warp with probability `bounds.probability`.
pub fn affine_augment<R: Rng + ?Sized>(
    doc: &Document,
    bounds: &AffineBounds,
    rng: &mut R,
) -> (Document, Option<AffineParams>) {
    if !rng.random_bool(bounds.probability.clamp(0.0, 1.0)) {
        return (doc.clone(), None);
    }
    let params = bounds.sample(rng);
    (apply_affine(doc, &params), Some(params))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskOutcome {
    pub image: GrayImage,
    /// Which of the requested boxes were blanked.
    pub blanked: Vec<bool>,
}

/// Blanks each box's region (page coordinates) independently with probability `p`.
pub fn mask_image_regions<R: Rng + ?Sized>(
    image: &GrayImage,
    page_w: f64,
    page_h: f64,
    boxes: &[BBox],
    p: f64,
    rng: &mut R,
) -> MaskOutcome {
    let (sx, sy) = (image.width() as f64 / page_w, image.height() as f64 / page_h);
    let mut out = image.clone();
    let p = p.clamp(0.0, 1.0);
    let blanked: Vec<bool> = boxes
        .iter()
        .map(|b| {
            let hit = rng.random_bool(p);
            if hit {
                out.fill_rect(b.x0 * sx, b.y0 * sy, b.x1 * sx, b.y1 * sy, BACKGROUND);
            }
            hit
        })
        .collect();
    MaskOutcome { image: out, blanked }
}
