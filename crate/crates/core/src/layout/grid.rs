use super::{BBox, Document, Page, Token};
use crate::error::{Result, TiltError};

/// Coordinate grid shared by the 2-D bias (and matching the feature-map grid at canonical size).
pub const GRID_W: usize = 64;
pub const GRID_H: usize = 48;

/// Grid cell holding the center of `bbox`, clamped into `[0, grid_w) × [0, grid_h)`.
pub fn quantize_center(
    bbox: &BBox,
    page_w: f64,
    page_h: f64,
    grid_w: usize,
    grid_h: usize,
) -> (usize, usize) {
    let (cx, cy) = bbox.center();
    let q = |c: f64, extent: f64, cells: usize| -> usize {
        let v = (c / extent * cells as f64).floor();
        if v.is_nan() || v < 0.0 {
            0
        } else {
            (v as usize).min(cells - 1)
        }
    };
    (q(cx, page_w, grid_w), q(cy, page_h, grid_h))
}

pub fn quantize_centers(doc: &Document, grid_w: usize, grid_h: usize) -> Vec<(usize, usize)> {
    let (w, h) = (doc.page.width as f64, doc.page.height as f64);
    doc.tokens
        .iter()
        .map(|t| quantize_center(&t.bbox, w, h, grid_w, grid_h))
        .collect()
}

/// Picks `cols × rows = count` closest to the page aspect ratio, both factors ≥ 2
/// unless `count == 1`.
fn grid_factors(count: usize, page_w: f64, page_h: f64) -> Option<(usize, usize)> {
    if count == 1 {
        return Some((1, 1));
    }
    let aspect = (page_w / page_h).ln();
    (2..count)
        .filter(|c| count % c == 0 && count / c >= 2)
        .map(|c| (c, count / c))
        .min_by(|a, b| {
            let da = ((a.0 as f64 / a.1 as f64).ln() - aspect).abs();
            let db = ((b.0 as f64 / b.1 as f64).ln() - aspect).abs();
            da.total_cmp(&db)
        })
}

/// `count` textless tokens tiling the page exactly, row-major.
pub fn image_anchor_tokens(page: &Page, count: usize) -> Result<Vec<Token>> {
    let (w, h) = (page.width as f64, page.height as f64);
    let (cols, rows) = grid_factors(count, w, h).ok_or_else(|| {
        TiltError::Validation(format!("{count} image anchors do not form a grid"))
    })?;
    let xs: Vec<f64> = (0..=cols).map(|i| w * i as f64 / cols as f64).collect();
    let ys: Vec<f64> = (0..=rows).map(|i| h * i as f64 / rows as f64).collect();
    let mut out = Vec::with_capacity(count);
    for r in 0..rows {
        for c in 0..cols {
            out.push(Token::anchor(BBox::new(xs[c], ys[r], xs[c + 1], ys[r + 1])));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sixteen_anchors_tile_canonical_page_in_4x4() {
        let page = Page::blank(512, 384);
        let anchors = image_anchor_tokens(&page, 16).unwrap();
        assert_eq!(anchors.len(), 16);
        for a in &anchors {
            assert_eq!(a.bbox.width(), 128.0);
            assert_eq!(a.bbox.height(), 96.0);
            assert!(a.text.is_empty());
        }
        let area: f64 = anchors.iter().map(|a| a.bbox.area()).sum();
        assert_eq!(area, 512.0 * 384.0);
        for (i, a) in anchors.iter().enumerate() {
            for b in &anchors[i + 1..] {
                let ox = a.bbox.x1.min(b.bbox.x1) - a.bbox.x0.max(b.bbox.x0);
                let oy = a.bbox.y1.min(b.bbox.y1) - a.bbox.y0.max(b.bbox.y0);
                assert!(ox <= 0.0 || oy <= 0.0, "tiles overlap");
            }
        }
    }

    #[test]
    fn single_anchor_is_full_page() {
        let page = Page::blank(300, 200);
        let a = image_anchor_tokens(&page, 1).unwrap();
        assert_eq!(a[0].bbox, BBox::new(0.0, 0.0, 300.0, 200.0));
    }

    #[test]
    fn non_grid_counts_are_rejected() {
        let page = Page::blank(512, 384);
        for bad in [0, 2, 7, 13] {
            assert!(image_anchor_tokens(&page, bad).is_err(), "{bad}");
        }
        assert_eq!(image_anchor_tokens(&page, 6).unwrap().len(), 6);
    }

    #[test]
    fn center_and_corner_cells() {
        let c = BBox::new(246.0, 182.0, 266.0, 202.0);
        assert_eq!(quantize_center(&c, 512.0, 384.0, 64, 48), (32, 24));
        let o = BBox::new(0.0, 0.0, 0.0, 0.0);
        assert_eq!(quantize_center(&o, 512.0, 384.0, 64, 48), (0, 0));
        let far = BBox::new(512.0, 384.0, 512.0, 384.0);
        assert_eq!(quantize_center(&far, 512.0, 384.0, 64, 48), (63, 47));
    }

    #[test]
    fn larger_page_maps_proportionally() {
        let b = BBox::new(500.0, 10.0, 524.0, 20.0);
        assert_eq!(quantize_center(&b, 1024.0, 768.0, 64, 48).0, 32);
    }

    proptest! {
        #[test]
        fn uniform_rescaling_keeps_cells(
            x0 in 0u32..500, y0 in 0u32..370, w in 0u32..12, h in 0u32..14, k in 1u32..8
        ) {
            let b = BBox::new(x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64);
            let base = quantize_center(&b, 512.0, 384.0, 64, 48);
            let kf = k as f64;
            let scaled = quantize_center(&b.scaled(kf, kf), 512.0 * kf, 384.0 * kf, 64, 48);
            prop_assert_eq!(base, scaled);
        }
    }
}
