//! Raw numeric kernels over flat row-major slices.
//!
//! Everything here is allocation-free; the tape wraps these with shape checks
//! and gradient bookkeeping.

/// `out[m,n] += a[m,k] · b[k,n]`
pub fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · b[m,n]`
pub fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Four-corner bilinear stencil for a normalized point on an `h×w` grid,
/// align-corners-false convention.
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    /// Flat `y*w + x` index per corner, `None` when the corner is outside the grid.
    pub idx: [Option<usize>; 4],
    pub weight: [f64; 4],
    /// d weight / d x (pixel units).
    pub dwdx: [f64; 4],
    /// d weight / d y (pixel units).
    pub dwdy: [f64; 4],
}

impl Stencil {
    pub fn new(u: f64, v: f64, h: usize, w: usize) -> Self {
        let x = u * w as f64 - 0.5;
        let y = v * h as f64 - 0.5;
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let at = |xi: i64, yi: i64| -> Option<usize> {
            if xi >= 0 && yi >= 0 && (xi as usize) < w && (yi as usize) < h {
                Some(yi as usize * w + xi as usize)
            } else {
                None
            }
        };
        Stencil {
            idx: [at(x0, y0), at(x0 + 1, y0), at(x0, y0 + 1), at(x0 + 1, y0 + 1)],
            weight: [
                (1.0 - fx) * (1.0 - fy),
                fx * (1.0 - fy),
                (1.0 - fx) * fy,
                fx * fy,
            ],
            dwdx: [-(1.0 - fy), 1.0 - fy, -fy, fy],
            dwdy: [-(1.0 - fx), -fx, 1.0 - fx, fx],
        }
    }
}

/// Geometry of a multi-scale value tensor: levels concatenated along rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelLayout {
    pub shapes: Vec<(usize, usize)>,
    pub starts: Vec<usize>,
}

impl LevelLayout {
    pub fn new(shapes: Vec<(usize, usize)>) -> Self {
        let mut starts = Vec::with_capacity(shapes.len());
        let mut acc = 0;
        for &(h, w) in &shapes {
            starts.push(acc);
            acc += h * w;
        }
        Self { shapes, starts }
    }

    pub fn levels(&self) -> usize {
        self.shapes.len()
    }

    pub fn total(&self) -> usize {
        self.shapes.iter().map(|(h, w)| h * w).sum()
    }
}

/// Dimensions of a multi-scale deformable attention call.
#[derive(Debug, Clone, Copy)]
pub struct DeformDims {
    pub queries: usize,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
    pub channels: usize,
}

/// `value`: `[T, channels]` with heads splitting the channel axis,
/// `locs`: `[Q, H, L, P, 2]` normalized `(x, y)`, `weights`: `[Q, H, L, P]`.
/// Writes `out`: `[Q, channels]`.
pub fn ms_deform_attn_forward(
    value: &[f64],
    layout: &LevelLayout,
    locs: &[f64],
    weights: &[f64],
    dims: DeformDims,
    out: &mut [f64],
) {
    let DeformDims {
        queries,
        heads,
        levels,
        points,
        channels,
    } = dims;
    let dh = channels / heads;
    for q in 0..queries {
        for h in 0..heads {
            let orow = &mut out[q * channels + h * dh..q * channels + (h + 1) * dh];
            for l in 0..levels {
                let (lh, lw) = layout.shapes[l];
                let start = layout.starts[l];
                for p in 0..points {
                    let s = ((q * heads + h) * levels + l) * points + p;
                    let a = weights[s];
                    let st = Stencil::new(locs[2 * s], locs[2 * s + 1], lh, lw);
                    for c in 0..4 {
                        if let Some(i) = st.idx[c] {
                            let coef = a * st.weight[c];
                            let vrow = &value[(start + i) * channels + h * dh..][..dh];
                            for (o, &v) in orow.iter_mut().zip(vrow) {
                                *o += coef * v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Backward of [`ms_deform_attn_forward`]; each gradient buffer is optional.
#[allow(clippy::too_many_arguments)]
pub fn ms_deform_attn_backward(
    value: &[f64],
    layout: &LevelLayout,
    locs: &[f64],
    weights: &[f64],
    dims: DeformDims,
    dout: &[f64],
    mut dvalue: Option<&mut [f64]>,
    mut dlocs: Option<&mut [f64]>,
    mut dweights: Option<&mut [f64]>,
) {
    let DeformDims {
        queries,
        heads,
        levels,
        points,
        channels,
    } = dims;
    let dh = channels / heads;
    for q in 0..queries {
        for h in 0..heads {
            let grow = &dout[q * channels + h * dh..][..dh];
            for l in 0..levels {
                let (lh, lw) = layout.shapes[l];
                let start = layout.starts[l];
                for p in 0..points {
                    let s = ((q * heads + h) * levels + l) * points + p;
                    let a = weights[s];
                    let st = Stencil::new(locs[2 * s], locs[2 * s + 1], lh, lw);
                    let mut g_sample = 0.0;
                    let mut g_x = 0.0;
                    let mut g_y = 0.0;
                    for c in 0..4 {
                        let Some(i) = st.idx[c] else { continue };
                        let off = (start + i) * channels + h * dh;
                        let vrow = &value[off..off + dh];
                        let dot: f64 = vrow.iter().zip(grow).map(|(v, g)| v * g).sum();
                        g_sample += st.weight[c] * dot;
                        g_x += st.dwdx[c] * dot;
                        g_y += st.dwdy[c] * dot;
                        if let Some(dv) = dvalue.as_deref_mut() {
                            let coef = a * st.weight[c];
                            for (d, &g) in dv[off..off + dh].iter_mut().zip(grow) {
                                *d += coef * g;
                            }
                        }
                    }
                    if let Some(dw) = dweights.as_deref_mut() {
                        dw[s] += g_sample;
                    }
                    if let Some(dl) = dlocs.as_deref_mut() {
                        dl[2 * s] += a * g_x * lw as f64;
                        dl[2 * s + 1] += a * g_y * lh as f64;
                    }
                }
            }
        }
    }
}

/// Output spatial size of a strided window.
pub fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

/// HWC image `[h*w, c]` to patch rows `[oh*ow, k*k*c]`, column order `(ky, kx, c)`.
pub fn im2col(x: &[f64], h: usize, w: usize, c: usize, k: usize, stride: usize, pad: usize) -> Vec<f64> {
    let oh = conv_out(h, k, stride, pad);
    let ow = conv_out(w, k, stride, pad);
    let cols = k * k * c;
    let mut out = vec![0.0; oh * ow * cols];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut out[(oy * ow + ox) * cols..][..cols];
            for ky in 0..k {
                let iy = (oy * stride + ky) as i64 - pad as i64;
                if iy < 0 || iy as usize >= h {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as i64 - pad as i64;
                    if ix < 0 || ix as usize >= w {
                        continue;
                    }
                    let src = &x[(iy as usize * w + ix as usize) * c..][..c];
                    row[(ky * k + kx) * c..][..c].copy_from_slice(src);
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`].
pub fn col2im_add(
    cols: &[f64],
    dx: &mut [f64],
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    stride: usize,
    pad: usize,
) {
    let oh = conv_out(h, k, stride, pad);
    let ow = conv_out(w, k, stride, pad);
    let width = k * k * c;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &cols[(oy * ow + ox) * width..][..width];
            for ky in 0..k {
                let iy = (oy * stride + ky) as i64 - pad as i64;
                if iy < 0 || iy as usize >= h {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as i64 - pad as i64;
                    if ix < 0 || ix as usize >= w {
                        continue;
                    }
                    let dst = &mut dx[(iy as usize * w + ix as usize) * c..][..c];
                    for (d, &g) in dst.iter_mut().zip(&row[(ky * k + kx) * c..][..c]) {
                        *d += g;
                    }
                }
            }
        }
    }
}

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid focal loss for one logit and target in `[0, 1]`, with its derivative.
pub fn focal_term(x: f64, t: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(x);
    // binary cross-entropy with logits
    let ce = softplus(x) - t * x;
    let p_t = p * t + (1.0 - p) * (1.0 - t);
    let alpha_t = alpha * t + (1.0 - alpha) * (1.0 - t);
    let m = 1.0 - p_t;
    let mod_ = m.powf(gamma);
    let loss = alpha_t * mod_ * ce;
    let dm = -(2.0 * t - 1.0) * p * (1.0 - p);
    let dmod = if gamma == 0.0 {
        0.0
    } else {
        gamma * m.powf(gamma - 1.0) * dm
    };
    let grad = alpha_t * (dmod * ce + mod_ * (p - t));
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stencil_center_of_two_by_two() {
        let st = Stencil::new(0.5, 0.5, 2, 2);
        let map = [1.0, 2.0, 3.0, 4.0];
        let v: f64 = (0..4).map(|c| st.idx[c].map_or(0.0, |i| map[i]) * st.weight[c]).sum();
        assert_eq!(v, 2.5);
    }

    #[test]
    fn stencil_far_outside_is_empty() {
        let st = Stencil::new(3.0, -2.0, 4, 4);
        assert!(st.idx.iter().all(Option::is_none));
    }

    #[test]
    fn focal_derivative_matches_difference() {
        for &(x, t) in &[(0.3, 1.0), (-1.2, 0.0), (2.5, 0.0), (-0.7, 1.0)] {
            let h = 1e-6;
            let (_, g) = focal_term(x, t, 0.25, 2.0);
            let num = (focal_term(x + h, t, 0.25, 2.0).0 - focal_term(x - h, t, 0.25, 2.0).0) / (2.0 * h);
            assert!((g - num).abs() < 1e-8, "{g} vs {num}");
        }
    }

    #[test]
    fn im2col_adjoint_identity() {
        // <im2col(x), y> == <x, col2im(y)>
        let (h, w, c, k) = (5, 4, 2, 3);
        let x: Vec<f64> = (0..h * w * c).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols = im2col(&x, h, w, c, k, 2, 1);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im_add(&y, &mut back, h, w, c, k, 2, 1);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
