//! Normalized coordinate types and their fixed-point text encoding.
//!
//! Coordinates render to exactly three decimals, so any round trip is
//! within 5e-4 per component and answer strings are byte-reproducible.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let inside = |v: f64| (0.0..=1.0).contains(&v);
        if ![self.x1, self.y1, self.x2, self.y2].iter().all(|&v| inside(v)) {
            return Err(Error::InvalidInput(format!("bbox {self:?} outside [0,1]")));
        }
        if self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(Error::InvalidInput(format!("bbox {self:?} not positively ordered")));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

/// `[x1, y1, x2, y2]` with three decimals per coordinate.
pub fn serialize_bbox(b: &BBox) -> String {
    format!("[{:.3}, {:.3}, {:.3}, {:.3}]", b.x1, b.y1, b.x2, b.y2)
}

/// Accepts what `serialize_bbox` emits.
pub fn parse_bbox(s: &str) -> Result<BBox> {
    let inner = s
        .trim()
        .strip_prefix('[')
        .and_then(|t| t.strip_suffix(']'))
        .ok_or_else(|| Error::Parse(format!("bbox {s:?} missing brackets")))?;
    let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(Error::Parse(format!("bbox {s:?} has {} fields, need 4", parts.len())));
    }
    let mut vals = [0.0f64; 4];
    for (slot, part) in vals.iter_mut().zip(&parts) {
        *slot = part
            .parse()
            .map_err(|_| Error::Parse(format!("bad bbox coordinate {part:?}")))?;
    }
    BBox::new(vals[0], vals[1], vals[2], vals[3])
}

/// Finds the first serialized bbox inside free-form model output.
pub fn find_bbox(text: &str) -> Option<BBox> {
    let bytes = text.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if b != b'[' {
            continue;
        }
        if let Some(end) = text[i..].find(']') {
            if let Ok(bbox) = parse_bbox(&text[i..i + end + 1]) {
                return Some(bbox);
            }
        }
    }
    None
}

/// `[x, y]` point with three decimals.
pub fn serialize_point(x: f64, y: f64) -> String {
    format!("[{x:.3}, {y:.3}]")
}

pub const KEYPOINT_NAMES: [&str; 5] = ["head", "l_hand", "r_hand", "l_foot", "r_foot"];

/// Named body keypoints in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoints {
    pub head: (f64, f64),
    pub l_hand: (f64, f64),
    pub r_hand: (f64, f64),
    pub l_foot: (f64, f64),
    pub r_foot: (f64, f64),
}

impl Keypoints {
    pub fn validate(&self) -> Result<()> {
        for (x, y) in self.points() {
            if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                return Err(Error::InvalidInput(format!("keypoint ({x}, {y}) outside [0,1]")));
            }
        }
        Ok(())
    }

    pub fn points(&self) -> [(f64, f64); 5] {
        [self.head, self.l_hand, self.r_hand, self.l_foot, self.r_foot]
    }
}

/// One `name: [x, y]` line per keypoint, in canonical order.
pub fn serialize_keypoints(k: &Keypoints) -> String {
    KEYPOINT_NAMES
        .iter()
        .zip(k.points())
        .map(|(name, (x, y))| format!("{name}: {}", serialize_point(x, y)))
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bbox_serialization_format() {
        let b = BBox::new(0.1, 0.2, 0.5, 0.6).unwrap();
        assert_eq!(serialize_bbox(&b), "[0.100, 0.200, 0.500, 0.600]");
    }

    #[test]
    fn full_image_box_parses() {
        let b = parse_bbox("[0.000, 0.000, 1.000, 1.000]").unwrap();
        assert_eq!(b, BBox { x1: 0.0, y1: 0.0, x2: 1.0, y2: 1.0 });
    }

    #[test]
    fn malformed_bboxes_are_rejected() {
        assert!(parse_bbox("0.1, 0.2, 0.3, 0.4").is_err());
        assert!(parse_bbox("[0.1, 0.2, 0.3]").is_err());
        assert!(parse_bbox("[0.1, 0.2, 0.3, oops]").is_err());
        assert!(parse_bbox("[0.5, 0.2, 0.3, 0.4]").is_err()); // x1 >= x2
    }

    #[test]
    fn bbox_scan_finds_first_occurrence() {
        let text = "the region [0.100, 0.100, 0.300, 0.300] and also [0.5, 0.5, 0.9, 0.9]";
        let b = find_bbox(text).unwrap();
        assert!((b.x2 - 0.3).abs() < 1e-9);
        assert!(find_bbox("no box here [broken").is_none());
    }

    #[test]
    fn keypoints_render_in_canonical_order() {
        let k = Keypoints {
            head: (0.5, 0.1),
            l_hand: (0.2, 0.4),
            r_hand: (0.8, 0.4),
            l_foot: (0.3, 0.9),
            r_foot: (0.7, 0.9),
        };
        let s = serialize_keypoints(&k);
        assert_eq!(
            s,
            "head: [0.500, 0.100]\nl_hand: [0.200, 0.400]\nr_hand: [0.800, 0.400]\n\
             l_foot: [0.300, 0.900]\nr_foot: [0.700, 0.900]"
        );
    }

    proptest! {
        /// three-decimal quantization keeps every coordinate within 5e-4
        #[test]
        fn bbox_roundtrip_within_quantization_bound(
            x1 in 0.0f64..0.49,
            y1 in 0.0f64..0.49,
            dx in 0.01f64..0.5,
            dy in 0.01f64..0.5,
        ) {
            let b = BBox::new(x1, y1, (x1 + dx).min(1.0), (y1 + dy).min(1.0)).unwrap();
            let back = parse_bbox(&serialize_bbox(&b)).unwrap();
            prop_assert!((back.x1 - b.x1).abs() <= 5e-4);
            prop_assert!((back.y1 - b.y1).abs() <= 5e-4);
            prop_assert!((back.x2 - b.x2).abs() <= 5e-4);
            prop_assert!((back.y2 - b.y2).abs() <= 5e-4);
        }
    }
}
