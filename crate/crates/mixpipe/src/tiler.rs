//! Multi-scale decomposition of high-resolution images: one global
//! downsampled view plus a grid of base-resolution crops, encoded as
//! independent images.

use crate::error::{Error, Result};
use crate::image::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewKind {
    Global,
    Crop,
}

impl ViewKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ViewKind::Global => "global",
            ViewKind::Crop => "crop",
        }
    }
}

/// Source rectangle in input pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Debug, Clone)]
pub struct View {
    pub kind: ViewKind,
    pub source_rect: Rect,
    pub resample_to: usize,
}

/// Deterministic recipe mapping one square high-resolution image to an
/// ordered list of base-resolution views. The global view is always first;
/// crops follow row-major, left-to-right, top-to-bottom.
#[derive(Debug, Clone)]
pub struct TilingPlan {
    pub input_res: usize,
    pub base_res: usize,
    pub views: Vec<View>,
}

impl TilingPlan {
    pub fn view_count(&self) -> usize {
        self.views.len()
    }
}

/// Builds the tiling plan for a square input.
///
/// `input_res == base_res` keeps a single global view. Otherwise the input
/// is cut into a k x k grid with `k = round(input_res / base_res)` and each
/// cell is resampled to the base resolution; at 2x the base this reduces to
/// the four corner crops. The global view always resamples the whole
/// original input.
pub fn make_plan(input_res: usize, base_res: usize) -> Result<TilingPlan> {
    if base_res == 0 {
        return Err(Error::InvalidConfig("base_res must be positive".into()));
    }
    if input_res < base_res {
        return Err(Error::InvalidInput(format!(
            "input resolution {input_res} below base {base_res}"
        )));
    }
    let full = Rect { x: 0, y: 0, w: input_res, h: input_res };
    let mut views = vec![View { kind: ViewKind::Global, source_rect: full, resample_to: base_res }];

    let k = ((input_res as f64 / base_res as f64) + 0.5).floor() as usize;
    if k >= 2 {
        // integer cell boundaries tile the canvas exactly even when k does
        // not divide input_res
        let edge = |i: usize| i * input_res / k;
        for row in 0..k {
            for col in 0..k {
                let (x0, x1) = (edge(col), edge(col + 1));
                let (y0, y1) = (edge(row), edge(row + 1));
                views.push(View {
                    kind: ViewKind::Crop,
                    source_rect: Rect { x: x0, y: y0, w: x1 - x0, h: y1 - y0 },
                    resample_to: base_res,
                });
            }
        }
    }
    Ok(TilingPlan { input_res, base_res, views })
}

/// Applies a plan: the ordered list of base-resolution view images.
pub fn apply_plan(img: &ImageTensor, plan: &TilingPlan) -> Result<Vec<ImageTensor>> {
    if img.height != plan.input_res || img.width != plan.input_res {
        return Err(Error::InvalidInput(format!(
            "image {}x{} does not match plan input {}",
            img.width, img.height, plan.input_res
        )));
    }
    plan.views
        .iter()
        .map(|view| {
            let r = view.source_rect;
            let patch = if r.x == 0 && r.y == 0 && r.w == img.width && r.h == img.height {
                img.clone()
            } else {
                img.crop(r.x, r.y, r.w, r.h)?
            };
            resample(&patch, view.resample_to)
        })
        .collect()
}

/// Total visual token budget for a plan: every view contributes one token
/// group of the same size.
pub fn total_visual_tokens(plan: &TilingPlan, tokens_per_group: usize) -> usize {
    plan.views.len() * tokens_per_group
}

/// Bilinear resample to `target x target` with pixel-center alignment and
/// edge-clamped coordinates. Equal sizes are an exact identity.
pub fn resample(img: &ImageTensor, target: usize) -> Result<ImageTensor> {
    if target == 0 {
        return Err(Error::InvalidInput("resample target must be >= 1".into()));
    }
    if img.height == target && img.width == target {
        return Ok(img.clone());
    }
    let mut data = vec![0.0; target * target * 3];
    let sy = img.height as f64 / target as f64;
    let sx = img.width as f64 / target as f64;
    for ty in 0..target {
        let fy = ((ty as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let wy = fy - y0 as f64;
        for tx in 0..target {
            let fx = ((tx as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let wx = fx - x0 as f64;
            for ch in 0..3 {
                let p00 = img.data[(y0 * img.width + x0) * 3 + ch];
                let p01 = img.data[(y0 * img.width + x1) * 3 + ch];
                let p10 = img.data[(y1 * img.width + x0) * 3 + ch];
                let p11 = img.data[(y1 * img.width + x1) * 3 + ch];
                let top = p00 + (p01 - p00) * wx;
                let bottom = p10 + (p11 - p10) * wx;
                data[(ty * target + tx) * 3 + ch] = (top + (bottom - top) * wy).clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor::new(target, target, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_resolution_is_single_global_view() {
        let plan = make_plan(224, 224).unwrap();
        assert_eq!(plan.view_count(), 1);
        assert_eq!(plan.views[0].kind, ViewKind::Global);
    }

    #[test]
    fn double_resolution_gives_four_corner_crops() {
        let plan = make_plan(448, 224).unwrap();
        assert_eq!(plan.view_count(), 5);
        let rects: Vec<Rect> = plan.views[1..].iter().map(|v| v.source_rect).collect();
        let expected = [(0, 0), (224, 0), (0, 224), (224, 224)];
        for (rect, (x, y)) in rects.iter().zip(expected) {
            assert_eq!((rect.x, rect.y, rect.w, rect.h), (x, y, 224, 224));
        }
    }

    #[test]
    fn high_resolution_gives_three_by_three_grid() {
        let plan = make_plan(762, 224).unwrap();
        assert_eq!(plan.view_count(), 10);
        for view in &plan.views[1..] {
            assert_eq!(view.source_rect.w, 254);
            assert_eq!(view.source_rect.h, 254);
            assert_eq!(view.resample_to, 224);
        }
    }

    #[test]
    fn rejects_input_below_base() {
        assert!(make_plan(128, 224).is_err());
    }

    fn assert_exact_cover(plan: &TilingPlan) {
        let crops: Vec<Rect> = plan
            .views
            .iter()
            .filter(|v| v.kind == ViewKind::Crop)
            .map(|v| v.source_rect)
            .collect();
        if crops.is_empty() {
            return;
        }
        // disjoint
        for (i, a) in crops.iter().enumerate() {
            for b in crops.iter().skip(i + 1) {
                let x_overlap = a.x < b.x + b.w && b.x < a.x + a.w;
                let y_overlap = a.y < b.y + b.h && b.y < a.y + a.h;
                assert!(!(x_overlap && y_overlap), "{a:?} overlaps {b:?}");
            }
        }
        // total area covers the canvas
        let area: usize = crops.iter().map(|r| r.w * r.h).sum();
        assert_eq!(area, plan.input_res * plan.input_res);
        // each pixel falls inside some crop (spot-check the boundaries)
        for &p in &[0, plan.input_res / 2, plan.input_res - 1] {
            let covered = crops
                .iter()
                .any(|r| p >= r.x && p < r.x + r.w && p >= r.y && p < r.y + r.h)
                || crops
                    .iter()
                    .any(|r| p >= r.x && p < r.x + r.w)
                    && crops.iter().any(|r| p >= r.y && p < r.y + r.h);
            assert!(covered, "pixel {p} uncovered");
        }
    }

    #[test]
    fn coverage_and_disjointness_over_resolution_sweep() {
        for input in (32..=1024).step_by(37) {
            for base in [32, 224] {
                if input < base {
                    continue;
                }
                let plan = make_plan(input, base).unwrap();
                assert_eq!(plan.views[0].kind, ViewKind::Global);
                assert_eq!(
                    plan.views.iter().filter(|v| v.kind == ViewKind::Global).count(),
                    1
                );
                assert_exact_cover(&plan);
            }
        }
    }

    #[test]
    fn constant_image_yields_constant_views() {
        let img = ImageTensor::filled(64, 64, 0.6).unwrap();
        let plan = make_plan(64, 32).unwrap();
        let views = apply_plan(&img, &plan).unwrap();
        assert_eq!(views.len(), 5);
        for view in &views {
            assert_eq!(view.height, 32);
            assert!(view.data.iter().all(|&v| (v - 0.6).abs() < 1e-12));
        }
    }

    #[test]
    fn single_bright_pixel_lands_in_one_crop_and_the_global_view() {
        let mut img = ImageTensor::filled(448, 448, 0.0).unwrap();
        img.set_pixel(50, 60, [1.0, 1.0, 1.0]); // top-left quadrant
        let plan = make_plan(448, 224).unwrap();
        let views = apply_plan(&img, &plan).unwrap();

        let mass =
            |v: &ImageTensor| v.data.iter().step_by(3).copied().sum::<f64>();
        assert!(mass(&views[0]) > 0.0, "global view lost the pixel");
        assert!(mass(&views[1]) > 0.0, "first corner crop should contain it");
        for (i, v) in views.iter().enumerate().skip(2) {
            assert_eq!(mass(v), 0.0, "crop {i} should be empty");
        }
        // crop 1 is an exact copy, global is attenuated by averaging
        assert_eq!(mass(&views[1]), 1.0);
        assert!(mass(&views[0]) < 1.0 + 1e-12);
    }

    #[test]
    fn identity_plan_is_bit_exact() {
        let mut img = ImageTensor::filled(32, 32, 0.25).unwrap();
        img.set_pixel(3, 7, [0.9, 0.1, 0.4]);
        let plan = make_plan(32, 32).unwrap();
        let views = apply_plan(&img, &plan).unwrap();
        assert_eq!(views.len(), 1);
        assert_eq!(views[0], img);
    }

    #[test]
    fn checkerboard_downsamples_to_average() {
        let mut img = ImageTensor::filled(2, 2, 0.0).unwrap();
        img.set_pixel(0, 0, [1.0; 3]);
        img.set_pixel(1, 1, [1.0; 3]);
        let out = resample(&img, 1).unwrap();
        assert_eq!(out.pixel(0, 0), [0.5, 0.5, 0.5]);
    }

    #[test]
    fn ramp_downsample_matches_scalar_bilinear_oracle() {
        // 4x4 ramp v(y, x) = (4x + y) / 15 resampled to 2x2. The oracle
        // evaluates the same bilinear formula one sample at a time:
        // source coord for target t is (t + 0.5) * 2 - 0.5 = 2t + 0.5.
        let data: Vec<f64> = (0..16)
            .flat_map(|i| {
                let (y, x) = (i / 4, i % 4);
                let v = (4 * x + y) as f64 / 15.0;
                [v, v, v]
            })
            .collect();
        let img = ImageTensor::new(4, 4, data).unwrap();
        let out = resample(&img, 2).unwrap();

        let value = |y: usize, x: usize| (4 * x + y) as f64 / 15.0;
        for ty in 0..2 {
            for tx in 0..2 {
                let (fy, fx) = (2.0 * ty as f64 + 0.5, 2.0 * tx as f64 + 0.5);
                let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                let (wy, wx) = (fy - y0 as f64, fx - x0 as f64);
                let top = value(y0, x0) * (1.0 - wx) + value(y0, x0 + 1) * wx;
                let bot = value(y0 + 1, x0) * (1.0 - wx) + value(y0 + 1, x0 + 1) * wx;
                let expected = top * (1.0 - wy) + bot * wy;
                assert!((out.pixel(ty, tx)[0] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn token_budget_is_linear_in_view_count() {
        let plan1 = make_plan(224, 224).unwrap();
        let plan5 = make_plan(448, 224).unwrap();
        let plan10 = make_plan(762, 224).unwrap();
        assert_eq!(total_visual_tokens(&plan1, 289), 289);
        assert_eq!(total_visual_tokens(&plan5, 289), 1_445);
        assert_eq!(total_visual_tokens(&plan10, 289), 2_890);
    }

    #[test]
    fn plan_dimension_mismatch_is_an_error() {
        let img = ImageTensor::filled(64, 64, 0.0).unwrap();
        let plan = make_plan(448, 224).unwrap();
        assert!(apply_plan(&img, &plan).is_err());
    }
}
