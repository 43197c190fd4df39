use std::rc::Rc;

use rand::Rng;

use super::deform::{DeformableAttention, Reference};
use super::pyramid::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{sine_position_table, Activation, LayerNorm, Mlp};
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: DeformableAttention,
    pub ln1: LayerNorm,
    pub ffn: Mlp,
    pub ln2: LayerNorm,
}

/// Post-norm deformable encoder over every pyramid level.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
    /// One learned `[d]` embedding per level, in pyramid order.
    pub level_embed: Vec<ParamId>,
    pub dim: usize,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        depth: usize,
        heads: usize,
        levels: usize,
        points: usize,
        ffn_dim: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..depth)
            .map(|i| {
                let name = format!("encoder.layer{i}");
                EncoderLayer {
                    attn: DeformableAttention::new(store, &format!("{name}.attn"), dim, heads, levels, points, rng),
                    ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim, false),
                    ffn: Mlp::new(store, &format!("{name}.ffn"), &[dim, ffn_dim, dim], Activation::Relu, false, rng),
                    ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim, false),
                }
            })
            .collect();
        Self {
            layers,
            level_embed: Vec::new(),
            dim,
        }
    }

    /// Normalized cell centers of every token, level by level.
    pub fn reference_points(pyr: &FeaturePyramid) -> Vec<(f64, f64)> {
        let mut pts = Vec::with_capacity(pyr.token_count());
        for l in &pyr.levels {
            for i in 0..l.h {
                for j in 0..l.w {
                    pts.push(((j as f64 + 0.5) / l.w as f64, (i as f64 + 0.5) / l.h as f64));
                }
            }
        }
        pts
    }

    /// Sine position of each token plus its level embedding, `[T, d]`.
    fn positions(&self, tape: &mut Tape, store: &ParamStore, pyr: &FeaturePyramid) -> Result<Var> {
        let mut rows = Vec::with_capacity(pyr.len());
        for (k, l) in pyr.levels.iter().enumerate() {
            let centers: Vec<(f64, f64)> = (0..l.h * l.w)
                .map(|t| (((t % l.w) as f64 + 0.5) / l.w as f64, ((t / l.w) as f64 + 0.5) / l.h as f64))
                .collect();
            let table = tape.constant(sine_position_table(&centers, self.dim));
            let embed = tape.param(store, self.level_embed[k]);
            rows.push(tape.add(table, embed)?);
        }
        if rows.len() == 1 {
            Ok(rows[0])
        } else {
            tape.concat_rows(&rows)
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, pyr: &FeaturePyramid) -> Result<FeaturePyramid> {
        if self.layers.is_empty() {
            return Ok(pyr.clone());
        }
        if pyr.len() != self.level_embed.len() || self.layers[0].attn.levels != pyr.len() {
            return Err(Error::contract(format!(
                "encoder built for {} levels, pyramid has {}",
                self.level_embed.len(),
                pyr.len()
            )));
        }
        let layout = Rc::new(pyr.layout());
        let refs = Reference::Points(Self::reference_points(pyr));
        let pos = self.positions(tape, store, pyr)?;
        let mut x = pyr.tokens(tape)?;
        for layer in &self.layers {
            let q = tape.add(x, pos)?;
            let a = layer.attn.forward(tape, store, q, x, layout.clone(), &refs)?;
            let y = tape.add(x, a)?;
            x = layer.ln1.forward(tape, store, y)?;
            let f = layer.ffn.forward(tape, store, x)?;
            let y = tape.add(x, f)?;
            x = layer.ln2.forward(tape, store, y)?;
        }
        pyr.with_tokens(tape, x)
    }
}
