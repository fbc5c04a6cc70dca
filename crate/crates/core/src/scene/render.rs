//! Flat-shaded top-down renderer with pixel-exact ownership.
//!
//! Every pixel is owned by background (label 0), object `i` (label `i + 1`)
//! or the gripper (label `n_objects + 1`, glyph and shadow). Patch labels
//! are the plurality owner of the patch's pixels, ties to the lower label.

use super::{SceneObject, SceneState, Shape, REFERENCE_SIZE};
use crate::error::Result;
use crate::imaging::{Image, PatchGeometry, PixelPoint};
use crate::segment::MaskSet;

pub const TABLE_RGB: [u8; 3] = [180, 170, 140];
/// Reserved for the gripper glyph; no object uses it.
pub const GRIPPER_RGB: [u8; 3] = [255, 0, 255];
pub const SHADOW_RGB: [u8; 3] = [60, 60, 60];
/// Pixels of vertical glyph offset per pixel of gripper height.
const LIFT: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RenderOptions {
    pub size: usize,
    pub patch_size: usize,
    pub draw_gripper: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            size: 112,
            patch_size: 14,
            draw_gripper: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub image: Image,
    /// Ground-truth patch ownership: `n_objects + 2` slots.
    pub masks: MaskSet,
    /// Rendered gripper tip (midpoint between the fingers).
    pub keypoint: PixelPoint,
}

struct Canvas {
    size: usize,
    rgb: Vec<u8>,
    owner: Vec<u8>,
}

impl Canvas {
    /// Paints every pixel whose center satisfies `inside(dx, dy)` relative to `(cu, cv)`.
    fn paint(&mut self, cu: f64, cv: f64, reach: f64, rgb: [u8; 3], label: u8, inside: impl Fn(f64, f64) -> bool) {
        let lo = |c: f64| ((c - reach - 1.0).floor().max(0.0)) as usize;
        let hi = |c: f64| ((c + reach + 1.0).ceil().max(0.0) as usize).min(self.size);
        for v in lo(cv)..hi(cv) {
            for u in lo(cu)..hi(cu) {
                let (dx, dy) = (u as f64 + 0.5 - cu, v as f64 + 0.5 - cv);
                if inside(dx, dy) {
                    let i = v * self.size + u;
                    self.rgb[i * 3..i * 3 + 3].copy_from_slice(&rgb);
                    self.owner[i] = label;
                }
            }
        }
    }

    /// Recolors without changing ownership.
    fn accent(&mut self, cu: f64, cv: f64, reach: f64, rgb: [u8; 3], inside: impl Fn(f64, f64) -> bool) {
        let lo = |c: f64| ((c - reach - 1.0).floor().max(0.0)) as usize;
        let hi = |c: f64| ((c + reach + 1.0).ceil().max(0.0) as usize).min(self.size);
        for v in lo(cv)..hi(cv) {
            for u in lo(cu)..hi(cu) {
                let (dx, dy) = (u as f64 + 0.5 - cu, v as f64 + 0.5 - cv);
                if inside(dx, dy) {
                    let i = v * self.size + u;
                    self.rgb[i * 3..i * 3 + 3].copy_from_slice(&rgb);
                }
            }
        }
    }
}

fn darker(rgb: [u8; 3]) -> [u8; 3] {
    rgb.map(|c| (c as f64 * 0.6).round() as u8)
}

fn draw_object(canvas: &mut Canvas, o: &SceneObject, cu: f64, cv: f64, scale: f64, label: u8) {
    let r = o.shape.radius_px() * scale;
    let rgb = o.color.rgb();
    match o.shape {
        Shape::Cube => canvas.paint(cu, cv, r, rgb, label, |dx, dy| dx.abs() <= r && dy.abs() <= r),
        Shape::Ball => canvas.paint(cu, cv, r, rgb, label, |dx, dy| dx.hypot(dy) <= r),
        Shape::Bowl => {
            canvas.paint(cu, cv, r, rgb, label, |dx, dy| dx.hypot(dy) <= r);
            let inner = 0.6 * r;
            canvas.accent(cu, cv, r, darker(rgb), |dx, dy| (dx.hypot(dy) - inner).abs() <= 0.5 * scale);
        }
        Shape::Bag => {
            canvas.paint(cu, cv, r, rgb, label, |dx, dy| {
                dx.abs() <= r && dy.abs() <= r && dx.abs() + dy.abs() <= 1.6 * r
            });
            canvas.accent(cu, cv, r, darker(rgb), |dx, dy| {
                (dy + 0.5 * r).abs() <= 0.5 * scale && dx.abs() <= 0.5 * r
            });
        }
    }
}

fn draw_gripper(canvas: &mut Canvas, cu: f64, cv: f64, aperture: f64, scale: f64, label: u8) {
    let s = scale;
    let gap = (2.0 + 3.0 * aperture.clamp(0.0, 1.0)) * s;
    let finger_w = 3.0 * s;
    let half_h = 7.0 * s;
    let palm_h = 1.5 * s;
    let reach = gap + finger_w + half_h;
    canvas.paint(cu, cv, reach, GRIPPER_RGB, label, |dx, dy| {
        let finger = dx.abs() >= gap && dx.abs() <= gap + finger_w && dy.abs() <= half_h;
        let palm = dy.abs() <= palm_h && dx.abs() <= gap + finger_w;
        finger || palm
    });
}

pub fn render(state: &SceneState) -> Result<Rendered> {
    render_with(state, &RenderOptions::default())
}

fn draw_scene(state: &SceneState, opts: &RenderOptions) -> (Canvas, PixelPoint) {
    let size = opts.size;
    let scale = size as f64 / REFERENCE_SIZE;
    let mut canvas = Canvas {
        size,
        rgb: TABLE_RGB.iter().copied().cycle().take(size * size * 3).collect(),
        owner: vec![0; size * size],
    };
    let gripper_label = (state.objects.len() + 1) as u8;
    let px = |t: f64| t * size as f64;

    // Containers first so objects placed inside them stay visible.
    let mut order: Vec<usize> = (0..state.objects.len()).filter(|&i| !state.objects[i].held).collect();
    order.sort_by_key(|&i| !state.objects[i].shape.container());
    for i in order {
        let o = &state.objects[i];
        draw_object(&mut canvas, o, px(o.x), px(o.y), scale, (i + 1) as u8);
    }

    let g = &state.gripper;
    let (gu, gv) = (px(g.x), px(g.y));
    let keypoint = PixelPoint::new(gu, gv - LIFT * px(g.z));
    if opts.draw_gripper {
        let r = 3.0 * scale;
        canvas.paint(gu, gv, r, SHADOW_RGB, gripper_label, |dx, dy| dx.hypot(dy) <= r);
    }
    if let Some(i) = state.held() {
        draw_object(&mut canvas, &state.objects[i], keypoint.u, keypoint.v, scale, (i + 1) as u8);
    }
    if opts.draw_gripper {
        draw_gripper(&mut canvas, keypoint.u, keypoint.v, g.aperture, scale, gripper_label);
    }
    (canvas, keypoint)
}

pub fn render_with(state: &SceneState, opts: &RenderOptions) -> Result<Rendered> {
    let geom = PatchGeometry::new(opts.size, opts.size, opts.patch_size)?;
    let (canvas, keypoint) = draw_scene(state, opts);
    let size = opts.size;
    let n_labels = state.objects.len() + 2;
    let ps = geom.patch_size;
    let mut assignment = vec![0usize; geom.k()];
    let mut counts = vec![0usize; n_labels];
    for (k, slot) in assignment.iter_mut().enumerate() {
        let p = geom.unflat(k);
        counts.iter_mut().for_each(|c| *c = 0);
        for v in p.row * ps..(p.row + 1) * ps {
            for u in p.col * ps..(p.col + 1) * ps {
                counts[canvas.owner[v * size + u] as usize] += 1;
            }
        }
        let mut best = 0;
        for (l, &c) in counts.iter().enumerate() {
            if c > counts[best] {
                best = l;
            }
        }
        *slot = best;
    }
    let masks = MaskSet::new(n_labels, assignment)?;
    let image = Image::from_rgb8(size, size, &canvas.rgb)?;
    Ok(Rendered { image, masks, keypoint })
}

/// Per-pixel owner labels, for inspection and tests.
pub fn pixel_owners(state: &SceneState, opts: &RenderOptions) -> Vec<u8> {
    draw_scene(state, opts).0.owner
}
