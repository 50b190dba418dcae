//! Axis-aligned boxes in continuous pixel coordinates.
//!
//! Boxes use corner form `[x1, y1, x2, y2]` and area `(x2 - x1) * (y2 - y1)`;
//! there is no `+1` pixel convention anywhere in the crate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let invalid = |reason| Error::InvalidBox {
            x1,
            y1,
            x2,
            y2,
            reason,
        };
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(invalid("non-finite coordinate"));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(invalid("zero or negative extent"));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_center(cx: f64, cy: f64, width: f64, height: f64) -> Result<Self> {
        Self::new(
            cx - 0.5 * width,
            cy - 0.5 * height,
            cx + 0.5 * width,
            cy + 0.5 * height,
        )
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Clip to `[0, width] x [0, height]`. Fails when nothing of the box is left.
    pub fn clip(&self, width: f64, height: f64) -> Result<Self> {
        Self::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn scale(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.x1 * factor,
            self.y1 * factor,
            self.x2 * factor,
            self.y2 * factor,
        )
    }

    pub fn intersection_area(&self, other: &Self) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn contains_box(&self, other: &Self) -> bool {
        other.x1 >= self.x1 && other.y1 >= self.y1 && other.x2 <= self.x2 && other.y2 <= self.y2
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

pub fn iou_2d(a: &BoundingBox, b: &BoundingBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Center/size regression target of `gt` relative to `anchor`:
/// `(dx, dy, log dw, log dh)` with offsets normalized by the anchor size.
pub fn encode_box_delta(anchor: &BoundingBox, gt: &BoundingBox) -> [f64; 4] {
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (gcx - acx) / aw,
        (gcy - acy) / ah,
        (gt.width() / aw).ln(),
        (gt.height() / ah).ln(),
    ]
}

pub fn decode_box_delta(anchor: &BoundingBox, delta: [f64; 4]) -> Result<BoundingBox> {
    if delta.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFiniteDelta(delta));
    }
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = acx + delta[0] * aw;
    let cy = acy + delta[1] * ah;
    let w = aw * delta[2].exp();
    let h = ah * delta[3].exp();
    if !(w.is_finite() && h.is_finite()) {
        return Err(Error::NonFiniteDelta(delta));
    }
    BoundingBox::from_center(cx, cy, w, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BoundingBox::new(0.0, 0.0, 0.0, 10.0).is_err());
        assert!(BoundingBox::new(5.0, 0.0, 1.0, 10.0).is_err());
        assert!(BoundingBox::new(0.0, f64::NAN, 1.0, 10.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, f64::INFINITY, 10.0).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou_2d(&a, &a), 1.0);
        assert_eq!(iou_2d(&a, &bb(20.0, 20.0, 30.0, 30.0)), 0.0);
        // intersection 25, union 175
        let b = bb(5.0, 5.0, 15.0, 15.0);
        assert!((iou_2d(&a, &b) - 25.0 / 175.0).abs() < 1e-12);
        // touching edges do not overlap
        assert_eq!(iou_2d(&a, &bb(10.0, 0.0, 20.0, 10.0)), 0.0);
    }

    #[test]
    fn clip_to_image() {
        let b = bb(-5.0, 2.0, 70.0, 40.0).clip(64.0, 64.0).unwrap();
        assert_eq!(b.to_array(), [0.0, 2.0, 64.0, 40.0]);
        assert!(bb(70.0, 70.0, 80.0, 80.0).clip(64.0, 64.0).is_err());
    }

    #[test]
    fn delta_examples() {
        let anchor = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(encode_box_delta(&anchor, &anchor), [0.0; 4]);
        assert_eq!(decode_box_delta(&anchor, [0.0; 4]).unwrap(), anchor);
        let gt = bb(0.0, 0.0, 20.0, 10.0);
        let back = decode_box_delta(&anchor, encode_box_delta(&anchor, &gt)).unwrap();
        for (x, y) in back.to_array().iter().zip(gt.to_array()) {
            assert!((x - y).abs() < 1e-5);
        }
        assert!(matches!(
            decode_box_delta(&anchor, [f64::NAN, 0.0, 0.0, 0.0]),
            Err(Error::NonFiniteDelta(_))
        ));
        assert!(decode_box_delta(&anchor, [0.0, 0.0, 1e6, 0.0]).is_err());
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (-100.0..100.0f64, -100.0..100.0f64, 0.5..150.0f64, 0.5..150.0f64)
            .prop_map(|(x, y, w, h)| bb(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou_2d(&a, &b);
            prop_assert_eq!(ab, iou_2d(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou_2d(&a, &a), 1.0);
        }

        #[test]
        fn delta_round_trip(anchor in arb_box(), gt in arb_box()) {
            let back = decode_box_delta(&anchor, encode_box_delta(&anchor, &gt)).unwrap();
            for (x, y) in back.to_array().iter().zip(gt.to_array()) {
                prop_assert!((x - y).abs() < 1e-5, "{:?} vs {:?}", back, gt);
            }
        }
    }
}
