use std::rc::Rc;

use rand::Rng;

use super::deform::{DeformableAttention, Reference};
use super::pyramid::{FeaturePyramid, LevelSource};
use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::nn::{sine_embed, Activation, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Prior probability behind the classification bias.
pub const PRIOR_PROB: f64 = 0.01;

/// Classification and box heads shared by every decoder layer.
#[derive(Debug, Clone)]
pub struct Heads {
    pub class: Linear,
    pub boxes: Mlp,
}

impl Heads {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, classes: usize, rng: &mut R) -> Self {
        let class = Linear::new(store, "heads.class", dim, classes, false, rng);
        let prior = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln();
        store.get_mut(class.bias).tensor.data_mut().fill(prior);
        let boxes = Mlp::new(store, "heads.box", &[dim, dim, dim, 4], Activation::Relu, false, rng);
        let last = boxes.layers.last().unwrap();
        store.get_mut(last.weight).tensor.data_mut().fill(0.0);
        Self { class, boxes }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub cross: DeformableAttention,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
    pub ln3: LayerNorm,
}

/// One decoder layer's predictions.
#[derive(Debug, Clone, Copy)]
pub struct LayerPrediction {
    /// `[N, K]`
    pub logits: Var,
    /// `[N, 4]` in `(cx, cy, w, h)`, inside the unit square.
    pub boxes: Var,
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub layers: Vec<LayerPrediction>,
    /// Image queries that joined self-attention in every layer.
    pub image_queries: usize,
    /// Sources of every level the cross-attention read.
    pub cross_sources: Vec<LevelSource>,
}

/// An image query on the tape: `[1, dim_in]` feature and its box.
pub type ImageQueryVar = (Var, BBox);

#[derive(Debug, Clone)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    pub query_pos: Mlp,
    /// `[N, d]`
    pub content: ParamId,
    /// `[N, 4]` box logits.
    pub anchors: ParamId,
    /// Per-layer projection of image queries into the decoder width.
    pub image_query_proj: Vec<Linear>,
    pub queries: usize,
    pub dim: usize,
    pub max_tokens: usize,
    pub detach_refinement: bool,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        depth: usize,
        heads: usize,
        levels: usize,
        points: usize,
        ffn_dim: usize,
        queries: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..depth)
            .map(|i| {
                let name = format!("decoder.layer{i}");
                DecoderLayer {
                    self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), dim, heads, false, rng),
                    ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim, false),
                    cross: DeformableAttention::new(store, &format!("{name}.cross"), dim, heads, levels, points, rng),
                    ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim, false),
                    ffn: Mlp::new(store, &format!("{name}.ffn"), &[dim, ffn_dim, dim], Activation::Relu, false, rng),
                    ln3: LayerNorm::new(store, &format!("{name}.ln3"), dim, false),
                }
            })
            .collect();
        let query_pos = Mlp::new(store, "decoder.query_pos", &[2 * dim, dim, dim], Activation::Relu, false, rng);
        let content = store.add("decoder.content", Tensor::randn(&[queries, dim], 1.0, rng), false);
        let mut anchors = Vec::with_capacity(queries * 4);
        for _ in 0..queries {
            let cx: f64 = rng.random_range(0.1..0.9);
            let cy: f64 = rng.random_range(0.1..0.9);
            for v in [cx, cy, 0.2, 0.2] {
                anchors.push((v / (1.0 - v)).ln());
            }
        }
        let anchors = store.add("decoder.anchors", Tensor::new(&[queries, 4], anchors).unwrap(), false);
        Self {
            layers,
            query_pos,
            content,
            anchors,
            image_query_proj: Vec::new(),
            queries,
            dim,
            max_tokens: usize::MAX,
            detach_refinement: true,
        }
    }

    /// Adds the per-layer image-query projections (`in_dim -> d`).
    pub fn add_image_query_projections<R: Rng + ?Sized>(&mut self, store: &mut ParamStore, in_dim: usize, rng: &mut R) {
        self.image_query_proj = (0..self.layers.len())
            .map(|i| Linear::new(store, &format!("image_query_proj.layer{i}"), in_dim, self.dim, false, rng))
            .collect();
    }

    fn box_position(&self, tape: &mut Tape, store: &ParamStore, boxes: Var) -> Result<Var> {
        let s = sine_embed(tape, boxes, self.dim / 2)?;
        self.query_pos.forward(tape, store, s)
    }

    /// Runs all layers. `memory` must hold backbone levels only.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        memory: &FeaturePyramid,
        image_queries: &[ImageQueryVar],
        heads: &Heads,
    ) -> Result<DecoderOutput> {
        if let Some(l) = memory.levels.iter().find(|l| l.source.is_foundation()) {
            return Err(Error::contract(format!(
                "decoder cross-attention must not read {:?} levels",
                l.source
            )));
        }
        let n = self.queries;
        let m = image_queries.len();
        if n + m > self.max_tokens {
            return Err(Error::config(format!(
                "{n} object queries plus {m} image queries exceed the limit of {}",
                self.max_tokens
            )));
        }
        if m > 0 && self.image_query_proj.len() != self.layers.len() {
            return Err(Error::contract("image queries given but no projections were built"));
        }
        let layout = Rc::new(memory.layout());
        let values = memory.tokens(tape)?;

        let (img_feats, img_pos) = if m > 0 {
            let feats: Vec<Var> = image_queries.iter().map(|q| q.0).collect();
            let feats = if m == 1 { feats[0] } else { tape.concat_rows(&feats)? };
            let boxes: Vec<f64> = image_queries.iter().flat_map(|q| q.1.to_array()).collect();
            let boxes = tape.constant(Tensor::new(&[m, 4], boxes)?);
            let pos = self.box_position(tape, store, boxes)?;
            (Some(feats), Some(pos))
        } else {
            (None, None)
        };

        let mut content = tape.param(store, self.content);
        let anchor_logits = tape.param(store, self.anchors);
        let mut boxes = tape.sigmoid(anchor_logits);
        let mut box_logits = anchor_logits;
        let mut outputs = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let qpos = self.box_position(tape, store, boxes)?;
            let (tokens, pos) = match (img_feats, img_pos) {
                (Some(f), Some(p)) => {
                    let proj = self.image_query_proj[i].forward(tape, store, f)?;
                    (tape.concat_rows(&[content, proj])?, tape.concat_rows(&[qpos, p])?)
                }
                _ => (content, qpos),
            };
            let q = tape.add(tokens, pos)?;
            let sa = layer.self_attn.forward(tape, store, q, q, tokens, None, None)?;
            let sa = if m > 0 { tape.slice_rows(sa, 0, n)? } else { sa };
            let y = tape.add(content, sa)?;
            content = layer.ln1.forward(tape, store, y)?;

            let q = tape.add(content, qpos)?;
            let ca = layer
                .cross
                .forward(tape, store, q, values, layout.clone(), &Reference::Boxes(boxes))?;
            let y = tape.add(content, ca)?;
            content = layer.ln2.forward(tape, store, y)?;
            let f = layer.ffn.forward(tape, store, content)?;
            let y = tape.add(content, f)?;
            content = layer.ln3.forward(tape, store, y)?;

            let logits = heads.class.forward(tape, store, content)?;
            let delta = heads.boxes.forward(tape, store, content)?;
            let refined = tape.add(delta, box_logits)?;
            let new_boxes = tape.sigmoid(refined);
            outputs.push(LayerPrediction {
                logits,
                boxes: new_boxes,
            });
            if self.detach_refinement {
                boxes = tape.detach(new_boxes);
                box_logits = tape.logit(boxes);
            } else {
                boxes = new_boxes;
                box_logits = refined;
            }
        }
        Ok(DecoderOutput {
            layers: outputs,
            image_queries: m,
            cross_sources: memory.sources(),
        })
    }
}
