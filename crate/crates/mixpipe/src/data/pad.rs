//! Square padding along the shorter edge, with the matching coordinate
//! rescale for box annotations.

use crate::error::Result;
use crate::image::ImageTensor;

use super::coords::BBox;

/// Scale factors carrying normalized coordinates from the original frame
/// into the padded square frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PadTransform {
    pub sx: f64,
    pub sy: f64,
}

impl PadTransform {
    pub fn apply(&self, b: &BBox) -> Result<BBox> {
        BBox::new(b.x1 * self.sx, b.y1 * self.sy, b.x2 * self.sx, b.y2 * self.sy)
    }
}

/// Pads to `max(h, w)` square with the content top-left aligned and zero
/// fill. Square inputs come back unchanged.
pub fn pad_to_square(img: &ImageTensor) -> Result<(ImageTensor, PadTransform)> {
    let side = img.height.max(img.width);
    let transform = PadTransform {
        sx: img.width as f64 / side as f64,
        sy: img.height as f64 / side as f64,
    };
    if img.is_square() {
        return Ok((img.clone(), transform));
    }
    let mut out = ImageTensor::filled(side, side, 0.0)?;
    for y in 0..img.height {
        for x in 0..img.width {
            out.set_pixel(y, x, img.pixel(y, x));
        }
    }
    Ok((out, transform))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_input_is_identity() {
        let img = ImageTensor::filled(4, 4, 0.3).unwrap();
        let (out, t) = pad_to_square(&img).unwrap();
        assert_eq!(out, img);
        assert_eq!(t, PadTransform { sx: 1.0, sy: 1.0 });
    }

    #[test]
    fn wide_input_pads_rows_below() {
        // 2x4 (h x w) grows to 4x4 with rows 2-3 zero
        let img = ImageTensor::filled(2, 4, 0.8).unwrap();
        let (out, _) = pad_to_square(&img).unwrap();
        assert_eq!(out.height, 4);
        assert_eq!(out.width, 4);
        for x in 0..4 {
            assert_eq!(out.pixel(1, x), [0.8, 0.8, 0.8]);
            assert_eq!(out.pixel(2, x), [0.0, 0.0, 0.0]);
            assert_eq!(out.pixel(3, x), [0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn full_frame_bbox_rescales_onto_content() {
        // 2x4 image: the full frame (0,0,1,1) maps to (0, 0, 1, 0.5)
        let img = ImageTensor::filled(2, 4, 0.5).unwrap();
        let (_, t) = pad_to_square(&img).unwrap();
        let b = t.apply(&BBox::new(0.0, 0.0, 1.0, 1.0).unwrap()).unwrap();
        assert_eq!([b.x1, b.y1, b.x2, b.y2], [0.0, 0.0, 1.0, 0.5]);
    }

    #[test]
    fn tall_input_pads_columns_right() {
        let img = ImageTensor::filled(4, 2, 0.6).unwrap();
        let (out, t) = pad_to_square(&img).unwrap();
        assert_eq!(out.pixel(0, 1), [0.6, 0.6, 0.6]);
        assert_eq!(out.pixel(0, 2), [0.0, 0.0, 0.0]);
        assert_eq!(t, PadTransform { sx: 0.5, sy: 1.0 });
    }
}
