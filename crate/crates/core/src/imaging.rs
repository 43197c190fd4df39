//! Image tensors in `[c, h, w]` layout.

use crate::boxes::BBox;
use crate::tensor::Tensor;

pub fn dims(img: &Tensor) -> (usize, usize, usize) {
    let s = img.shape();
    assert_eq!(s.len(), 3, "expected [c, h, w], got {s:?}");
    (s[0], s[1], s[2])
}

/// `[c, h, w]` to row-per-pixel `[h*w, c]`.
pub fn chw_to_hwc(img: &Tensor) -> Tensor {
    let (c, h, w) = dims(img);
    let src = img.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h * w {
            out[i * c + ch] = src[ch * h * w + i];
        }
    }
    Tensor::from_parts(vec![h * w, c], out)
}

/// `[h*w, c]` back to `[c, h, w]`.
pub fn hwc_to_chw(rows: &Tensor, h: usize, w: usize) -> Tensor {
    let c = rows.last_dim();
    assert_eq!(rows.rows(), h * w);
    let src = rows.data();
    let mut out = vec![0.0; c * h * w];
    for i in 0..h * w {
        for ch in 0..c {
            out[ch * h * w + i] = src[i * c + ch];
        }
    }
    Tensor::from_parts(vec![c, h, w], out)
}

/// Bilinear resampling of `region` (normalized) to `out_h × out_w`, with
/// align-corners-false sampling and edge clamping.
pub fn resample(img: &Tensor, region: BBox, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = dims(img);
    let [x0, y0, _, _] = region.xyxy();
    let src = img.data();
    let mut out = vec![0.0; c * out_h * out_w];
    let axis = |i: usize, n_out: usize, origin: f64, extent: f64, n_in: usize| {
        let u = origin + (i as f64 + 0.5) / n_out as f64 * extent;
        let x = (u * n_in as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, x - lo as f64)
    };
    for oy in 0..out_h {
        let (ya, yb, fy) = axis(oy, out_h, y0, region.h, h);
        for ox in 0..out_w {
            let (xa, xb, fx) = axis(ox, out_w, x0, region.w, w);
            for ch in 0..c {
                let p = &src[ch * h * w..(ch + 1) * h * w];
                let top = p[ya * w + xa] * (1.0 - fx) + p[ya * w + xb] * fx;
                let bot = p[yb * w + xa] * (1.0 - fx) + p[yb * w + xb] * fx;
                out[ch * out_h * out_w + oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::from_parts(vec![c, out_h, out_w], out)
}

/// Resize the full image.
pub fn resize(img: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (_, h, w) = dims(img);
    if h == out_h && w == out_w {
        return img.clone();
    }
    resample(img, BBox::FULL, out_h, out_w)
}

/// Rotates `[c, h, w]` (square) by `quarter_turns * 90°` counter-clockwise.
pub fn rotate90(img: &Tensor, quarter_turns: usize) -> Tensor {
    let (c, h, w) = dims(img);
    assert_eq!(h, w, "rotation needs a square image");
    let n = h;
    let mut cur = img.data().to_vec();
    for _ in 0..quarter_turns % 4 {
        let mut next = vec![0.0; cur.len()];
        for ch in 0..c {
            for y in 0..n {
                for x in 0..n {
                    // (x, y) -> (y, n-1-x)
                    next[ch * n * n + (n - 1 - x) * n + y] = cur[ch * n * n + y * n + x];
                }
            }
        }
        cur = next;
    }
    Tensor::from_parts(vec![c, n, n], cur)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_round_trip() {
        let img = Tensor::new(&[3, 2, 2], (0..12).map(|v| v as f64).collect()).unwrap();
        let rows = chw_to_hwc(&img);
        assert_eq!(rows.row(1), &[1.0, 5.0, 9.0]);
        assert_eq!(hwc_to_chw(&rows, 2, 2), img);
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = Tensor::full(&[3, 8, 8], 0.4);
        assert_eq!(resize(&img, 8, 8), img);
        let small = resize(&img, 5, 3);
        assert!(small.data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
    }

    #[test]
    fn four_rotations_are_identity() {
        let img = Tensor::new(&[1, 3, 3], (0..9).map(|v| v as f64).collect()).unwrap();
        assert_eq!(rotate90(&img, 4), img);
        assert_ne!(rotate90(&img, 1), img);
    }
}
