//! Normalized `(cx, cy, w, h)` boxes and overlap measures.

use serde::{Deserialize, Serialize};

/// Areas below this are treated as this value.
pub const AREA_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const FULL: BBox = BBox {
        cx: 0.5,
        cy: 0.5,
        w: 1.0,
        h: 1.0,
    };

    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_xyxy(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn xyxy(self) -> [f64; 4] {
        [
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        ]
    }

    pub fn area(self) -> f64 {
        (self.w * self.h).max(AREA_EPS)
    }

    pub fn in_unit_square(self) -> bool {
        self.to_array().iter().all(|v| (0.0..=1.0).contains(v))
    }
}

fn intersection(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    iw * ih
}

pub fn iou(a: BBox, b: BBox) -> f64 {
    let inter = intersection(a.xyxy(), b.xyxy());
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Generalized IoU in `[-1, 1]`.
pub fn giou(a: BBox, b: BBox) -> f64 {
    giou_with_grad(a, b).0
}

/// GIoU of `p` against `t` together with `d giou / d p` in `(cx, cy, w, h)`.
pub fn giou_with_grad(p: BBox, t: BBox) -> (f64, [f64; 4]) {
    let [x0, y0, x1, y1] = p.xyxy();
    let [tx0, ty0, tx1, ty1] = t.xyxy();

    let raw_ap = (x1 - x0) * (y1 - y0);
    let ap = raw_ap.max(AREA_EPS);
    let at = t.area();

    let iw_raw = x1.min(tx1) - x0.max(tx0);
    let ih_raw = y1.min(ty1) - y0.max(ty0);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let union = ap + at - inter;

    let ew = x1.max(tx1) - x0.min(tx0);
    let eh = y1.max(ty1) - y0.min(ty0);
    let raw_enc = ew * eh;
    let enc = raw_enc.max(AREA_EPS);

    let value = inter / union - 1.0 + union / enc;

    let g_inter = (union + inter) / (union * union) - 1.0 / enc;
    let g_ap = if raw_ap > AREA_EPS {
        -inter / (union * union) + 1.0 / enc
    } else {
        0.0
    };
    let g_enc = if raw_enc > AREA_EPS {
        -union / (enc * enc)
    } else {
        0.0
    };

    // gradient w.r.t. (x0, y0, x1, y1)
    let mut g = [0.0; 4];
    if iw_raw > 0.0 && ih_raw > 0.0 {
        if x1 < tx1 {
            g[2] += g_inter * ih;
        }
        if x0 > tx0 {
            g[0] -= g_inter * ih;
        }
        if y1 < ty1 {
            g[3] += g_inter * iw;
        }
        if y0 > ty0 {
            g[1] -= g_inter * iw;
        }
    }
    let (pw, ph) = (x1 - x0, y1 - y0);
    g[0] -= g_ap * ph;
    g[2] += g_ap * ph;
    g[1] -= g_ap * pw;
    g[3] += g_ap * pw;
    if x1 > tx1 {
        g[2] += g_enc * eh;
    }
    if x0 < tx0 {
        g[0] -= g_enc * eh;
    }
    if y1 > ty1 {
        g[3] += g_enc * ew;
    }
    if y0 < ty0 {
        g[1] -= g_enc * ew;
    }

    let grad = [
        g[0] + g[2],
        g[1] + g[3],
        0.5 * (g[2] - g[0]),
        0.5 * (g[3] - g[1]),
    ];
    (value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.05f64..0.95, 0.05f64..0.95, 0.01f64..0.8, 0.01f64..0.8)
            .prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
    }

    #[test]
    fn self_giou_is_one() {
        let a = BBox::new(0.3, 0.4, 0.2, 0.5);
        assert!((giou(a, a) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn disjoint_boxes_are_negative() {
        let a = BBox::new(0.5, 0.5, 1.0, 1.0);
        let b = BBox::new(2.5, 0.5, 1.0, 1.0);
        assert!(giou(a, b) < 0.0);
    }

    #[test]
    fn quarter_boxes_match_area_formula() {
        // a = [0,0.5]^2, b = [0.5,1]^2: touching corners, no intersection.
        // union = 0.5, enclosure = 1 → giou = 0 - (1 - 0.5) / 1
        let a = BBox::new(0.25, 0.25, 0.5, 0.5);
        let b = BBox::new(0.75, 0.75, 0.5, 0.5);
        let inter = 0.0;
        let union = 0.25 + 0.25 - inter;
        let enc = 1.0;
        let oracle = inter / union - (enc - union) / enc;
        assert!((giou(a, b) - oracle).abs() < 1e-12);
        assert!((oracle + 0.5).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_central_difference() {
        let p = BBox::new(0.42, 0.55, 0.31, 0.22);
        let t = BBox::new(0.5, 0.5, 0.25, 0.3);
        let (_, g) = giou_with_grad(p, t);
        let h = 1e-6;
        for k in 0..4 {
            let mut a = p.to_array();
            let mut b = p.to_array();
            a[k] += h;
            b[k] -= h;
            let num = (giou(BBox::from_array(a), t) - giou(BBox::from_array(b), t)) / (2.0 * h);
            assert!((num - g[k]).abs() < 1e-7, "coord {k}: {num} vs {}", g[k]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]
        #[test]
        fn giou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = giou(a, b);
            let ba = giou(b, a);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
            prop_assert!(ab <= iou(a, b) + 1e-15);
        }
    }
}
