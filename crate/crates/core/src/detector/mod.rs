//! Query-based detector: backbone, deformable encoder over a feature
//! pyramid (optionally extended with foundation patch maps), and a decoder
//! whose self-attention can see foundation image queries.

mod backbone;
mod decoder;
mod deform;
mod encoder;
mod pyramid;

pub use backbone::{Backbone, Conv, ConvSpec, COARSEST_STRIDE};
pub use decoder::{Decoder, DecoderLayer, DecoderOutput, Heads, ImageQueryVar, LayerPrediction, PRIOR_PROB};
pub use deform::{DeformableAttention, Reference};
pub use encoder::{Encoder, EncoderLayer};
pub use pyramid::{
    append_foundation_levels, drop_foundation_levels, FeaturePyramid, Level, LevelSource, PyramidSnapshot,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::foundation::{self, FoundationOutput, Vit, VitConfig};
use crate::imaging;
use crate::nn::{LayerNorm, Linear};
use crate::param::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Stream offset for parameters that only exist when enhancers are present,
/// so building them never shifts the baseline's initialization.
const ENHANCER_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;
const FOUNDATION_STREAM: u64 = 0x6a09_e667_f3bc_c908;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    /// Square backbone input size.
    pub input_size: usize,
    /// Stem width followed by the three level widths.
    pub backbone_channels: Vec<usize>,
    pub hidden_dim: usize,
    pub queries: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub points: usize,
    pub ffn_dim: usize,
    pub num_classes: usize,
    pub enhancers: Vec<VitConfig>,
    /// Feed image queries into decoder self-attention.
    pub use_image_queries: bool,
    /// Append foundation patch maps to the encoder's pyramid.
    pub fuse_patches: bool,
    /// Use the mean backbone feature as the image query instead of a
    /// foundation class token.
    pub self_query: bool,
    /// Pool every backbone level for `self_query` rather than the finest.
    pub self_pool_all_levels: bool,
    /// Cap on object plus image queries in decoder self-attention.
    pub max_decoder_tokens: usize,
    /// Stop gradients through the previous layer's boxes.
    pub detach_refinement: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            input_size: 128,
            backbone_channels: vec![16, 32, 64, 64],
            hidden_dim: 64,
            queries: 30,
            encoder_layers: 3,
            decoder_layers: 3,
            heads: 4,
            points: 4,
            ffn_dim: 128,
            num_classes: 6,
            enhancers: Vec::new(),
            use_image_queries: false,
            fuse_patches: false,
            self_query: false,
            self_pool_all_levels: false,
            max_decoder_tokens: 64,
            detach_refinement: true,
        }
    }
}

impl DetectorConfig {
    pub const BACKBONE_LEVELS: usize = 3;

    /// Image queries per decoder layer.
    pub fn image_query_count(&self) -> usize {
        if !self.use_image_queries {
            0
        } else if self.self_query {
            1
        } else {
            self.enhancers[0].query_count()
        }
    }

    /// Pyramid levels seen by the encoder.
    pub fn encoder_levels(&self) -> usize {
        Self::BACKBONE_LEVELS + if self.fuse_patches { self.enhancers.len() } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.queries == 0 {
            return fail("at least one object query is required".into());
        }
        if self.input_size == 0 || self.input_size % COARSEST_STRIDE != 0 {
            return fail(format!("input size {} must be a multiple of {COARSEST_STRIDE}", self.input_size));
        }
        if self.backbone_channels.len() != 4 || self.backbone_channels.contains(&0) {
            return fail("backbone needs four positive channel widths".into());
        }
        if self.heads == 0 || self.hidden_dim % self.heads != 0 || self.hidden_dim % 4 != 0 {
            return fail(format!(
                "hidden width {} must be divisible by 4 and by {} heads",
                self.hidden_dim, self.heads
            ));
        }
        if self.points == 0 || self.num_classes == 0 || self.ffn_dim == 0 {
            return fail("points, classes and feed-forward width must be positive".into());
        }
        if self.use_image_queries && !self.self_query && self.enhancers.is_empty() {
            return fail("image queries need at least one enhancer".into());
        }
        if self.fuse_patches && self.enhancers.is_empty() {
            return fail("patch fusion needs at least one enhancer".into());
        }
        for e in &self.enhancers {
            e.validate()?;
        }
        if self.queries + self.image_query_count() > self.max_decoder_tokens {
            return fail(format!(
                "{} object queries plus {} image queries exceed the limit of {}",
                self.queries,
                self.image_query_count(),
                self.max_decoder_tokens
            ));
        }
        Ok(())
    }

    /// Whether enhancer `k` has to run for this configuration.
    pub fn enhancer_needed(&self, k: usize) -> bool {
        self.fuse_patches || (k == 0 && self.use_image_queries && !self.self_query)
    }
}

/// Everything one forward pass produced.
#[derive(Debug, Clone)]
pub struct DetectorOutput {
    /// One entry per decoder layer; the last is the final prediction.
    pub layers: Vec<LayerPrediction>,
    pub image_queries: usize,
    /// Levels the encoder fused, in order.
    pub encoder_sources: Vec<LevelSource>,
    /// Levels the decoder's cross-attention read.
    pub cross_sources: Vec<LevelSource>,
    /// Encoder output per level, when requested.
    pub snapshot: Option<PyramidSnapshot>,
}

impl DetectorOutput {
    pub fn last(&self) -> LayerPrediction {
        *self.layers.last().expect("decoder has at least one layer")
    }
}

#[derive(Debug)]
pub struct Detector {
    cfg: DetectorConfig,
    store: ParamStore,
    backbone: Backbone,
    input_proj: Vec<(Linear, LayerNorm)>,
    foundation_proj: Vec<(Linear, LayerNorm)>,
    encoder: Encoder,
    decoder: Decoder,
    heads: Heads,
    enhancers: Vec<Vit>,
}

impl Detector {
    /// Builds a detector with randomly initialized, frozen enhancers.
    pub fn new(cfg: DetectorConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ FOUNDATION_STREAM);
        let vits = cfg
            .enhancers
            .iter()
            .map(|c| Vit::new(c.clone(), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Self::with_enhancers(cfg, seed, vits)
    }

    /// Builds a detector around the given enhancers (one per config entry).
    pub fn with_enhancers(mut cfg: DetectorConfig, seed: u64, enhancers: Vec<Vit>) -> Result<Self> {
        if enhancers.len() != cfg.enhancers.len() {
            return Err(Error::config(format!(
                "{} enhancer configs but {} encoders supplied",
                cfg.enhancers.len(),
                enhancers.len()
            )));
        }
        for (k, v) in enhancers.iter().enumerate() {
            let c = v.config();
            let want = &cfg.enhancers[k];
            if c.dim != want.dim || c.depth != want.depth || c.patch_size != want.patch_size {
                return Err(Error::config(format!("enhancer {k} does not match its config")));
            }
        }
        cfg.enhancers = enhancers.iter().map(|v| v.config().clone()).collect();
        cfg.validate()?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.hidden_dim;
        let backbone = Backbone::new(&mut store, &cfg.backbone_channels, &mut rng);
        let input_proj = (0..DetectorConfig::BACKBONE_LEVELS)
            .map(|l| {
                let name = format!("input_proj.level{l}");
                (
                    Linear::new(&mut store, &name, cfg.backbone_channels[l + 1], d, false, &mut rng),
                    LayerNorm::new(&mut store, &format!("{name}.norm"), d, false),
                )
            })
            .collect();
        let mut encoder = Encoder::new(
            &mut store,
            d,
            cfg.encoder_layers,
            cfg.heads,
            cfg.encoder_levels(),
            cfg.points,
            cfg.ffn_dim,
            &mut rng,
        );
        for l in 0..DetectorConfig::BACKBONE_LEVELS {
            let id = store.add(format!("encoder.level_embed{l}"), Tensor::randn(&[d], 1.0, &mut rng), false);
            encoder.level_embed.push(id);
        }
        let mut decoder = Decoder::new(
            &mut store,
            d,
            cfg.decoder_layers,
            cfg.heads,
            DetectorConfig::BACKBONE_LEVELS,
            cfg.points,
            cfg.ffn_dim,
            cfg.queries,
            &mut rng,
        );
        decoder.max_tokens = cfg.max_decoder_tokens;
        decoder.detach_refinement = cfg.detach_refinement;
        let heads = Heads::new(&mut store, d, cfg.num_classes, &mut rng);

        let mut erng = ChaCha8Rng::seed_from_u64(seed ^ ENHANCER_STREAM);
        let mut foundation_proj = Vec::new();
        if cfg.fuse_patches {
            for (k, e) in cfg.enhancers.iter().enumerate() {
                let name = format!("foundation_proj.enhancer{k}");
                foundation_proj.push((
                    Linear::new(&mut store, &name, e.dim, d, false, &mut erng),
                    LayerNorm::new(&mut store, &format!("{name}.norm"), d, false),
                ));
                let id = store.add(
                    format!("encoder.level_embed{}", DetectorConfig::BACKBONE_LEVELS + k),
                    Tensor::randn(&[d], 1.0, &mut erng),
                    false,
                );
                encoder.level_embed.push(id);
            }
        }
        if cfg.use_image_queries {
            let in_dim = if cfg.self_query { d } else { cfg.enhancers[0].dim };
            decoder.add_image_query_projections(&mut store, in_dim, &mut erng);
        }

        Ok(Self {
            cfg,
            store,
            backbone,
            input_proj,
            foundation_proj,
            encoder,
            decoder,
            heads,
            enhancers,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn enhancers(&self) -> &[Vit] {
        &self.enhancers
    }

    pub fn enhancers_mut(&mut self) -> &mut [Vit] {
        &mut self.enhancers
    }

    /// Detector parameters and enhancers, borrowed together.
    pub fn stores_mut(&mut self) -> (&mut ParamStore, &mut [Vit]) {
        (&mut self.store, &mut self.enhancers)
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn heads(&self) -> &Heads {
        &self.heads
    }

    /// Enhancers whose parameters take gradients (explicit opt-in only).
    pub fn trainable_enhancers(&self) -> bool {
        self.enhancers.iter().any(|v| !v.store().all_frozen())
    }

    /// Frozen encoder outputs for one raw image, suitable for caching.
    pub fn foundation_outputs(&self, image: &Tensor) -> Result<Vec<Option<FoundationOutput>>> {
        self.enhancers
            .iter()
            .enumerate()
            .map(|(k, vit)| {
                if !self.cfg.enhancer_needed(k) {
                    return Ok(None);
                }
                let queries = k == 0 && self.cfg.use_image_queries && !self.cfg.self_query;
                foundation::encode(vit, image, k, queries).map(Some)
            })
            .collect()
    }

    /// Backbone levels projected to the hidden width.
    pub fn backbone_forward(&self, tape: &mut Tape, image: &Tensor) -> Result<FeaturePyramid> {
        let raw = self.backbone.forward(tape, &self.store, image)?;
        let mut levels = Vec::with_capacity(raw.len());
        for (l, (lin, ln)) in raw.levels.iter().zip(&self.input_proj) {
            let y = lin.forward(tape, &self.store, l.rows)?;
            levels.push(Level {
                rows: ln.forward(tape, &self.store, y)?,
                ..*l
            });
        }
        Ok(FeaturePyramid { levels })
    }

    /// Full forward on `tape`. `image` is the raw `[3, H, W]` picture; the
    /// backbone sees it resized to `input_size` and each enhancer sees it
    /// resized to its own input size. `cached` holds precomputed frozen
    /// encoder outputs (see [`Detector::foundation_outputs`]).
    pub fn forward(
        &self,
        tape: &mut Tape,
        image: &Tensor,
        cached: Option<&[Option<FoundationOutput>]>,
        snapshot: bool,
    ) -> Result<DetectorOutput> {
        let cfg = &self.cfg;
        let size = cfg.input_size;
        let resized = imaging::resize(image, size, size);
        let pyr = self.backbone_forward(tape, &resized)?;

        // Patch tokens and image queries of each enhancer that is needed.
        let mut patches: Vec<(Var, (usize, usize))> = Vec::new();
        let mut image_queries: Vec<ImageQueryVar> = Vec::new();
        for (k, vit) in self.enhancers.iter().enumerate() {
            if !cfg.enhancer_needed(k) {
                continue;
            }
            let want_queries = k == 0 && cfg.use_image_queries && !cfg.self_query;
            let (p, grid, qs) = if !vit.store().all_frozen() {
                let vars = foundation::encode_on(vit, tape, image, k, want_queries)?;
                (vars.patches, vars.grid, vars.queries)
            } else {
                let owned;
                let out = match cached.and_then(|c| c.get(k)).and_then(|o| o.as_ref()) {
                    Some(o) => o,
                    None => {
                        owned = foundation::encode(vit, image, k, want_queries)?;
                        &owned
                    }
                };
                let p = tape.constant(out.tokens.patches.clone());
                let dim = vit.dim();
                let qs = out
                    .queries
                    .iter()
                    .map(|q| Ok((tape.constant(q.feature.clone().reshape(&[1, dim])?), q.bbox)))
                    .collect::<Result<Vec<_>>>()?;
                (p, out.tokens.grid, qs)
            };
            patches.push((p, grid));
            if want_queries {
                image_queries = qs;
            }
        }

        let pyr = if cfg.fuse_patches {
            let mut extra = Vec::with_capacity(patches.len());
            for (k, ((p, (h, w)), (lin, ln))) in patches.iter().zip(&self.foundation_proj).enumerate() {
                let y = lin.forward(tape, &self.store, *p)?;
                extra.push(Level {
                    rows: ln.forward(tape, &self.store, y)?,
                    h: *h,
                    w: *w,
                    stride: size as f64 / *w as f64,
                    source: LevelSource::Foundation(k),
                });
            }
            append_foundation_levels(pyr, extra)
        } else {
            pyr
        };
        pyr.validate()?;

        if cfg.use_image_queries && cfg.self_query {
            let pooled = if cfg.self_pool_all_levels {
                let backbone = drop_foundation_levels(&pyr);
                let all = backbone.tokens(tape)?;
                tape.mean_rows(all)?
            } else {
                tape.mean_rows(pyr.levels[0].rows)?
            };
            image_queries = vec![(pooled, crate::boxes::BBox::FULL)];
        }

        let fused = self.encoder.forward(tape, &self.store, &pyr)?;
        let snap = snapshot.then(|| fused.snapshot(tape));
        let memory = drop_foundation_levels(&fused);
        let dec = self
            .decoder
            .forward(tape, &self.store, &memory, &image_queries, &self.heads)?;
        Ok(DetectorOutput {
            layers: dec.layers,
            image_queries: dec.image_queries,
            encoder_sources: fused.sources(),
            cross_sources: dec.cross_sources,
            snapshot: snap,
        })
    }

    /// Inference on a private tape: final-layer `(logits [N, K], boxes [N, 4])`.
    pub fn predict(&self, image: &Tensor, cached: Option<&[Option<FoundationOutput>]>) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, image, cached, false)?;
        let last = out.last();
        Ok((tape.value(last.logits).clone(), tape.value(last.boxes).clone()))
    }
}
