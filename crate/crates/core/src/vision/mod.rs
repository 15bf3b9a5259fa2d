//! Truncated U-Net backbone, per-token ROI pooling and projection into the model width.

mod augment;

pub use augment::{
    affine_augment, apply_affine, mask_image_regions, AffineBounds, AffineParams, MaskOutcome,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TiltError};
use crate::layout::{BBox, GrayImage, Page};
use crate::numerics::{Bound, CellRect, ParamStore, Real, Tape, Tensor, Var};

pub const PROJ_W: &str = "vision.proj.w";
pub const PROJ_B: &str = "vision.proj.b";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionConfig {
    /// Raster fed to the backbone; both dims must be multiples of `2^stages`.
    pub input_w: usize,
    pub input_h: usize,
    /// Encoder width per stage; stage `k` (1-based) runs at `1/2^k` resolution.
    pub channels: Vec<usize>,
    /// Output resolution is `1/2^out_stage`.
    pub out_stage: usize,
    pub out_channels: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig {
            input_w: 512,
            input_h: 384,
            channels: vec![16, 32, 64, 128, 128],
            out_stage: 3,
            out_channels: 128,
        }
    }
}

impl VisionConfig {
    pub fn tiny() -> Self {
        VisionConfig {
            input_w: 128,
            input_h: 96,
            channels: vec![4, 8, 16, 16],
            out_stage: 3,
            out_channels: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.channels.len();
        if stages == 0 || self.out_stage == 0 || self.out_stage > stages {
            return Err(TiltError::Config(format!(
                "out_stage {} must lie in 1..={stages}",
                self.out_stage
            )));
        }
        if self.channels.contains(&0) || self.out_channels == 0 {
            return Err(TiltError::Config("vision channels must be positive".into()));
        }
        let m = 1usize << stages;
        if self.input_w == 0 || self.input_h == 0 || self.input_w % m != 0 || self.input_h % m != 0 {
            return Err(TiltError::Config(format!(
                "vision input {}x{} must be a positive multiple of {m}",
                self.input_w, self.input_h
            )));
        }
        Ok(())
    }

    /// Feature grid `(width, height)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.input_w >> self.out_stage, self.input_h >> self.out_stage)
    }
}

fn he<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

fn insert_conv<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut R,
) {
    store.insert(format!("{name}.w"), he(&[cout, cin, k, k], cin * k * k, rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}

/// Adds backbone and projection weights for `cfg` into `store`.
pub fn init_vision<T: Real, R: Rng + ?Sized>(
    cfg: &VisionConfig,
    d_model: usize,
    store: &mut ParamStore<T>,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let ch = &cfg.channels;
    let mut cin = 1;
    for (i, &c) in ch.iter().enumerate() {
        let k = i + 1;
        insert_conv(store, &format!("unet.enc{k}.conv1"), cin, c, 3, rng);
        insert_conv(store, &format!("unet.enc{k}.conv2"), c, c, 3, rng);
        cin = c;
    }
    for k in (cfg.out_stage..ch.len()).rev() {
        let (from, to) = (ch[k], ch[k - 1]);
        store.insert(format!("unet.dec{k}.up.w"), he(&[from, to, 2, 2], from, rng));
        store.insert(format!("unet.dec{k}.up.b"), Tensor::zeros(&[to]));
        insert_conv(store, &format!("unet.dec{k}.conv1"), 2 * to, to, 3, rng);
        insert_conv(store, &format!("unet.dec{k}.conv2"), to, to, 3, rng);
    }
    let last = ch[cfg.out_stage - 1];
    insert_conv(store, "unet.head", last, cfg.out_channels, 1, rng);
    // image embeddings start well below token-embedding scale
    let std = 0.1 * (1.0 / cfg.out_channels as f64).sqrt();
    store.insert(PROJ_W, Tensor::randn(&[cfg.out_channels, d_model], std, rng));
    store.insert(PROJ_B, Tensor::zeros(&[d_model]));
    Ok(())
}

fn conv<T: Real>(tape: &mut Tape<'_, T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    tape.conv2d(x, p.try_get(&format!("{name}.w"))?, p.try_get(&format!("{name}.b"))?)
}

/// `h = relu(conv1 x)`, `y = relu(conv2 h + h)`.
fn block<T: Real>(tape: &mut Tape<'_, T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let h = conv(tape, p, &format!("{name}.conv1"), x)?;
    let h = tape.relu(h);
    let y = conv(tape, p, &format!("{name}.conv2"), h)?;
    let y = tape.add(y, h)?;
    Ok(tape.relu(y))
}

/// `x[1, H, W]` (ink intensity, white = 0) → feature map `[out_channels, H/2^s, W/2^s]`.
pub fn unet_forward<T: Real>(tape: &mut Tape<'_, T>, p: &Bound, cfg: &VisionConfig, x: Var) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    if shape != [1, cfg.input_h, cfg.input_w] {
        return Err(TiltError::Shape(format!(
            "backbone expects [1, {}, {}], got {shape:?}",
            cfg.input_h, cfg.input_w
        )));
    }
    let mut skips = Vec::with_capacity(cfg.channels.len());
    let mut h = x;
    for k in 1..=cfg.channels.len() {
        h = tape.max_pool2(h)?;
        h = block(tape, p, &format!("unet.enc{k}"), h)?;
        skips.push(h);
    }
    for k in (cfg.out_stage..cfg.channels.len()).rev() {
        let up = tape.up_conv2(h, p.try_get(&format!("unet.dec{k}.up.w"))?, p.try_get(&format!("unet.dec{k}.up.b"))?)?;
        let cat = tape.concat_channels(up, skips[k - 1])?;
        h = block(tape, p, &format!("unet.dec{k}"), cat)?;
    }
    conv(tape, p, "unet.head", h)
}

/// Backbone input for a page: the raster resized to the configured size and
/// inverted so ink is positive. Pages without a raster are blank.
pub fn prepare_raster<T: Real>(page: &Page, cfg: &VisionConfig) -> Tensor<T> {
    let shape = [1, cfg.input_h, cfg.input_w];
    match &page.image {
        Some(img) => {
            let img = img.resize(cfg.input_w, cfg.input_h);
            let data = img.pixels().iter().map(|&v| <T as Real>::from_f32(1.0 - v)).collect();
            Tensor::new(shape.to_vec(), data).expect("resized raster matches shape")
        }
        None => Tensor::zeros(&shape),
    }
}

/// Inverse of the backbone input convention, for inspection.
pub fn raster_from_tensor<T: Real>(x: &Tensor<T>) -> Result<GrayImage> {
    if x.rank() != 3 || x.shape()[0] != 1 {
        return Err(TiltError::Shape(format!("expected [1, h, w], got {:?}", x.shape())));
    }
    let px = x.data().iter().map(|v| 1.0 - v.to_f32_lossy()).collect();
    GrayImage::new(x.shape()[2], x.shape()[1], px)
}

/// Feature cells covered by `bbox` on a `grid_w × grid_h` map of a `page_w × page_h` page.
/// The cover is inclusive and at least one cell.
pub fn bbox_cells(bbox: &BBox, page_w: f64, page_h: f64, grid_w: usize, grid_h: usize) -> CellRect {
    let span = |a: f64, b: f64, extent: f64, cells: usize| -> (usize, usize) {
        let scale = cells as f64 / extent;
        let lo = (a * scale).floor().clamp(0.0, (cells - 1) as f64) as usize;
        let hi = ((b * scale).ceil() - 1.0).clamp(0.0, (cells - 1) as f64) as usize;
        (lo, hi.max(lo))
    };
    let (c0, c1) = span(bbox.x0, bbox.x1, page_w, grid_w);
    let (r0, r1) = span(bbox.y0, bbox.y1, page_h, grid_h);
    CellRect { r0, r1, c0, c1 }
}

/// `pooled[n, C] · W + b`.
pub fn project_embed<T: Real>(tape: &mut Tape<'_, T>, p: &Bound, pooled: Var) -> Result<Var> {
    let u = tape.matmul(pooled, p.try_get(PROJ_W)?)?;
    tape.add_row(u, p.try_get(PROJ_B)?)
}

/// Image embeddings `U[n, d_model]` for `boxes`; rows with `None` (prompt, separators,
/// anything without geometry) are zero.
pub fn image_embeddings<T: Real>(
    tape: &mut Tape<'_, T>,
    p: &Bound,
    cfg: &VisionConfig,
    raster: Var,
    boxes: &[Option<BBox>],
    page_w: f64,
    page_h: f64,
) -> Result<Var> {
    let fm = unet_forward(tape, p, cfg, raster)?;
    let (gw, gh) = cfg.grid();
    let rects: Vec<Option<CellRect>> = boxes
        .iter()
        .map(|b| b.map(|b| bbox_cells(&b, page_w, page_h, gw, gh)))
        .collect();
    let pooled = tape.roi_pool(fm, &rects)?;
    let u = project_embed(tape, p, pooled)?;
    let keep: Vec<bool> = boxes.iter().map(Option::is_some).collect();
    tape.mask_rows(u, &keep)
}
