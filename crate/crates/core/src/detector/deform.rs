use std::rc::Rc;

use rand::Rng;

use crate::error::Result;
use crate::kernels::LevelLayout;
use crate::nn::Linear;
use crate::param::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Where each query samples around.
#[derive(Debug, Clone)]
pub enum Reference {
    /// Fixed normalized `(x, y)` per query; offsets are in cells of each level.
    Points(Vec<(f64, f64)>),
    /// `[Q, 4]` boxes; offsets scale with box size.
    Boxes(Var),
}

/// Multi-scale deformable attention block (sampling offsets, per-head
/// softmax over levels × points, value and output projections).
#[derive(Debug, Clone)]
pub struct DeformableAttention {
    pub offsets: Linear,
    pub attn: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
}

impl DeformableAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        levels: usize,
        points: usize,
        rng: &mut R,
    ) -> Self {
        let n = heads * levels * points;
        let offsets = Linear::zeros(store, &format!("{name}.offsets"), dim, n * 2, false);
        // Heads start out looking in evenly spread directions, point p at
        // distance p + 1.
        let bias = store.get_mut(offsets.bias).tensor.data_mut();
        for h in 0..heads {
            let theta = 2.0 * std::f64::consts::PI * h as f64 / heads as f64;
            let (dx, dy) = (theta.cos(), theta.sin());
            let m = dx.abs().max(dy.abs());
            for l in 0..levels {
                for p in 0..points {
                    let s = ((h * levels + l) * points + p) * 2;
                    bias[s] = dx / m * (p + 1) as f64;
                    bias[s + 1] = dy / m * (p + 1) as f64;
                }
            }
        }
        let attn = Linear::zeros(store, &format!("{name}.attn"), dim, n, false);
        let value = Linear::new(store, &format!("{name}.value"), dim, dim, false, rng);
        let out = Linear::new(store, &format!("{name}.out"), dim, dim, false, rng);
        Self {
            offsets,
            attn,
            value,
            out,
            heads,
            levels,
            points,
        }
    }

    /// Sampling locations `[Q, H, L, P, 2]` and weights `[Q, H, L, P]`.
    pub fn sampling(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        query: Var,
        layout: &LevelLayout,
        refs: &Reference,
    ) -> Result<(Var, Var)> {
        let (h, l, p) = (self.heads, self.levels, self.points);
        let q = tape.shape(query)[0];
        let off = self.offsets.forward(tape, store, query)?;
        let off = tape.reshape(off, &[q, h, l, p, 2])?;
        let locs = match refs {
            Reference::Points(pts) => {
                let mut scale = Vec::with_capacity(h * l * p * 2);
                for _ in 0..h {
                    for &(lh, lw) in &layout.shapes {
                        for _ in 0..p {
                            scale.push(1.0 / lw as f64);
                            scale.push(1.0 / lh as f64);
                        }
                    }
                }
                let scale = tape.constant(Tensor::new(&[h, l, p, 2], scale)?);
                let mut base = Vec::with_capacity(q * h * l * p * 2);
                for &(x, y) in pts {
                    for _ in 0..h * l * p {
                        base.push(x);
                        base.push(y);
                    }
                }
                let base = tape.constant(Tensor::new(&[q, h, l, p, 2], base)?);
                let scaled = tape.mul(off, scale)?;
                tape.add(scaled, base)?
            }
            Reference::Boxes(boxes) => {
                let idx: Vec<usize> = (0..q).flat_map(|i| std::iter::repeat_n(i, h * l * p)).collect();
                let centers = tape.slice_last(*boxes, 0, 2)?;
                let sizes = tape.slice_last(*boxes, 2, 2)?;
                let centers = tape.gather_rows(centers, &idx)?;
                let centers = tape.reshape(centers, &[q, h, l, p, 2])?;
                let sizes = tape.gather_rows(sizes, &idx)?;
                let sizes = tape.reshape(sizes, &[q, h, l, p, 2])?;
                let spread = tape.mul(off, sizes)?;
                let spread = tape.scale(spread, 0.5 / p as f64);
                tape.add(spread, centers)?
            }
        };
        let logits = self.attn.forward(tape, store, query)?;
        let logits = tape.reshape(logits, &[q * h, l * p])?;
        let weights = tape.softmax(logits)?;
        let weights = tape.reshape(weights, &[q, h, l, p])?;
        Ok((locs, weights))
    }

    /// `query`: `[Q, d]` (positional terms included); `input`: `[T, d]`
    /// stacked level rows matching `layout`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        query: Var,
        input: Var,
        layout: Rc<LevelLayout>,
        refs: &Reference,
    ) -> Result<Var> {
        let (locs, weights) = self.sampling(tape, store, query, &layout, refs)?;
        let value = self.value.forward(tape, store, input)?;
        let sampled = tape.ms_deform_attn(value, layout, locs, weights, self.heads, self.points)?;
        self.out.forward(tape, store, sampled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weights_sum_to_one_per_query_and_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let da = DeformableAttention::new(&mut store, "da", 8, 2, 3, 2, &mut rng);
        let w = store.get_mut(da.attn.weight);
        w.tensor = Tensor::randn(&[8, 12], 1.0, &mut rng);
        let layout = LevelLayout::new(vec![(4, 4), (2, 2), (1, 1)]);
        let mut tape = Tape::inference();
        let q = tape.constant(Tensor::randn(&[5, 8], 1.0, &mut rng));
        let refs = Reference::Points(vec![(0.5, 0.5); 5]);
        let (_, weights) = da.sampling(&mut tape, &store, q, &layout, &refs).unwrap();
        for row in tape.data(weights).chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
