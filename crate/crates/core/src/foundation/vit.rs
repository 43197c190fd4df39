//! Minimal pre-norm vision transformer used as the frozen enhancer.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use super::region::{AttentionMask, RegionGrid};
use super::{QueryStrategy, VitConfig};
use crate::error::{Error, Result};
use crate::imaging;
use crate::kernels::Stencil;
use crate::nn::{Activation, AttentionMaps, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::param::{ParamId, ParamStore};
use crate::tape::{Mask, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

/// Class token, optional local class tokens and patch tokens as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct TokenVars {
    /// `[1, dim]`
    pub global: Var,
    /// `[g², dim]`
    pub local: Option<Var>,
    /// `[hp*wp, dim]`
    pub patches: Var,
    pub grid: (usize, usize),
}

/// Encoder output with values detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    /// `[dim]`
    pub global_class: Tensor,
    /// `[g², dim]`
    pub local_class: Option<Tensor>,
    /// `[hp*wp, dim]`, row-major over the patch grid.
    pub patches: Tensor,
    pub grid: (usize, usize),
}

impl TokenSequence {
    pub fn patch_count(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

#[derive(Debug)]
pub struct Vit {
    cfg: VitConfig,
    native_size: usize,
    store: ParamStore,
    patch_proj: Linear,
    cls: ParamId,
    pos_cls: ParamId,
    pos: ParamId,
    /// Positional table resampled for a non-native input size.
    pos_override: Option<Tensor>,
    blocks: Vec<Block>,
    passes: AtomicUsize,
    allow_trainable: bool,
}

impl Clone for Vit {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            native_size: self.native_size,
            store: self.store.clone(),
            patch_proj: self.patch_proj.clone(),
            cls: self.cls,
            pos_cls: self.pos_cls,
            pos: self.pos,
            pos_override: self.pos_override.clone(),
            blocks: self.blocks.clone(),
            passes: AtomicUsize::new(0),
            allow_trainable: self.allow_trainable,
        }
    }
}

impl Vit {
    /// Random initialization; every parameter is created frozen.
    pub fn new<R: Rng + ?Sized>(cfg: VitConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let dim = cfg.dim;
        let p = cfg.patch_size;
        let n = cfg.grid() * cfg.grid();
        let patch_proj = Linear::new(&mut store, "vit.patch_embed", 3 * p * p, dim, true, rng);
        let cls = store.add("vit.cls_token", Tensor::randn(&[1, dim], 0.02, rng), true);
        let pos_cls = store.add("vit.pos_embed.cls", Tensor::randn(&[1, dim], 0.02, rng), true);
        let pos = store.add("vit.pos_embed.patches", Tensor::randn(&[n, dim], 0.02, rng), true);
        let hidden = ((dim as f64) * cfg.mlp_ratio).round() as usize;
        let blocks = (0..cfg.depth)
            .map(|i| {
                let name = format!("vit.blocks.{i}");
                Block {
                    ln1: LayerNorm::new(&mut store, &format!("{name}.ln1"), dim, true),
                    attn: MultiHeadAttention::new(
                        &mut store,
                        &format!("{name}.attn"),
                        dim,
                        cfg.heads,
                        true,
                        rng,
                    ),
                    ln2: LayerNorm::new(&mut store, &format!("{name}.ln2"), dim, true),
                    mlp: Mlp::new(
                        &mut store,
                        &format!("{name}.mlp"),
                        &[dim, hidden, dim],
                        Activation::Gelu,
                        true,
                        rng,
                    ),
                }
            })
            .collect();
        Ok(Self {
            native_size: cfg.image_size,
            cfg,
            store,
            patch_proj,
            cls,
            pos_cls,
            pos,
            pos_override: None,
            blocks,
            passes: AtomicUsize::new(0),
            allow_trainable: false,
        })
    }

    /// Rebuilds the module structure for `cfg` and takes parameter values
    /// from `store` (matched by name and shape).
    pub fn from_store(cfg: VitConfig, store: ParamStore) -> Result<Self> {
        let mut rng = rand::rng();
        let template = Self::new(cfg, &mut rng)?;
        if template.store.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "foundation checkpoint has {} tensors, config expects {}",
                store.len(),
                template.store.len()
            )));
        }
        for p in template.store.iter() {
            let id = store
                .id_of(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", p.name)))?;
            if store.get(id).tensor.shape() != p.tensor.shape()
                || id != template.store.id_of(&p.name).unwrap()
            {
                return Err(Error::Checkpoint(format!("tensor {} has wrong shape or order", p.name)));
            }
        }
        Ok(Self { store, ..template })
    }

    pub fn config(&self) -> &VitConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    pub fn set_strategy(&mut self, strategy: QueryStrategy, local_grid: usize) -> Result<()> {
        self.cfg.strategy = strategy;
        self.cfg.local_grid = local_grid;
        self.cfg.validate()
    }

    /// Opt-in for running with trainable (unfrozen) weights.
    pub fn set_allow_trainable(&mut self, allow: bool) {
        self.allow_trainable = allow;
    }

    pub fn allow_trainable(&self) -> bool {
        self.allow_trainable
    }

    /// Number of times the block stack has run since creation or the last reset.
    pub fn passes(&self) -> usize {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn reset_passes(&self) {
        self.passes.store(0, Ordering::Relaxed);
    }

    /// Adapts the encoder to square inputs of `size` pixels by resampling the
    /// patch positional grid. Pretrained weights are left untouched.
    pub fn with_input_size(mut self, size: usize) -> Result<Self> {
        let mut cfg = self.cfg.clone();
        cfg.image_size = size;
        cfg.validate()?;
        let native = self.native_size / self.cfg.patch_size;
        let grid = cfg.grid();
        self.pos_override = if size == self.native_size {
            None
        } else {
            Some(interpolate_pos_embed(
                &self.store.get(self.pos).tensor,
                (native, native),
                (grid, grid),
            ))
        };
        self.cfg = cfg;
        Ok(self)
    }

    fn check_frozen(&self) -> Result<()> {
        if self.allow_trainable {
            return Ok(());
        }
        if let Some(p) = self.store.iter().find(|p| !p.frozen) {
            return Err(Error::contract(format!(
                "foundation parameter {} is trainable but the encoder was not opted in to training",
                p.name
            )));
        }
        Ok(())
    }

    /// Patch projection + positional terms + class token(s), before any block.
    pub fn patch_embed(&self, tape: &mut Tape, image: &Tensor, locals: usize) -> Result<TokenVars> {
        let (c, h, w) = imaging::dims(image);
        let size = self.cfg.image_size;
        if c != 3 || h != size || w != size {
            return Err(Error::config(format!(
                "encoder expects a 3x{size}x{size} image (got {c}x{h}x{w}); \
                 resize the image or interpolate the positional embedding"
            )));
        }
        let p = self.cfg.patch_size;
        let grid = self.cfg.grid();
        let pixels = tape.constant(imaging::chw_to_hwc(image));
        let cols = tape.im2col(pixels, h, w, p, p, 0)?;
        let mut patches = self.patch_proj.forward(tape, &self.store, cols)?;
        let pos = match &self.pos_override {
            Some(t) => tape.constant(t.clone()),
            None => tape.param(&self.store, self.pos),
        };
        patches = tape.add(patches, pos)?;
        let cls = tape.param(&self.store, self.cls);
        let pos_cls = tape.param(&self.store, self.pos_cls);
        let global = tape.add(cls, pos_cls)?;
        let local = if locals > 0 {
            Some(tape.gather_rows(global, &vec![0; locals])?)
        } else {
            None
        };
        Ok(TokenVars {
            global,
            local,
            patches,
            grid: (grid, grid),
        })
    }

    /// Full encoder pass on `tape`. With `local_grid >= 2`, `g²` replicated
    /// class tokens run under the region mask.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        image: &Tensor,
        local_grid: usize,
        mut trace: Option<&mut Vec<AttentionMaps>>,
    ) -> Result<TokenVars> {
        self.check_frozen()?;
        let region = (local_grid >= 2)
            .then(|| RegionGrid::new(local_grid, self.cfg.grid(), self.cfg.grid()))
            .transpose()?;
        let locals = region.as_ref().map_or(0, |r| r.regions());
        let embedded = self.patch_embed(tape, image, locals)?;
        self.passes.fetch_add(1, Ordering::Relaxed);

        let mut parts = vec![embedded.global];
        parts.extend(embedded.local);
        parts.push(embedded.patches);
        let mut x = tape.concat_rows(&parts)?;
        let mask = region.map(|r| Mask::new(AttentionMask::new(&r).into_vec()));

        for block in &self.blocks {
            let h = block.ln1.forward(tape, &self.store, x)?;
            let mut maps = trace.as_ref().map(|_| Vec::new());
            let a = block
                .attn
                .forward(tape, &self.store, h, h, h, mask.as_ref(), maps.as_mut())?;
            if let (Some(t), Some(m)) = (trace.as_deref_mut(), maps) {
                t.push(m);
            }
            x = tape.add(x, a)?;
            let h = block.ln2.forward(tape, &self.store, x)?;
            let m = block.mlp.forward(tape, &self.store, h)?;
            x = tape.add(x, m)?;
        }

        let n_patch = embedded.grid.0 * embedded.grid.1;
        let global = tape.slice_rows(x, 0, 1)?;
        let local = if locals > 0 {
            Some(tape.slice_rows(x, 1, locals)?)
        } else {
            None
        };
        let patches = tape.slice_rows(x, 1 + locals, n_patch)?;
        Ok(TokenVars {
            global,
            local,
            patches,
            grid: embedded.grid,
        })
    }

    /// Encoder pass on a private inference tape; outputs are plain tensors.
    /// Local class tokens are produced when the configured strategy uses them.
    pub fn forward_frozen(&self, image: &Tensor) -> Result<TokenSequence> {
        let g = if self.cfg.strategy == QueryStrategy::MaskedClassTokens {
            self.cfg.local_grid
        } else {
            0
        };
        self.forward_frozen_with(image, g, None)
    }

    pub fn forward_frozen_with(
        &self,
        image: &Tensor,
        local_grid: usize,
        trace: Option<&mut Vec<AttentionMaps>>,
    ) -> Result<TokenSequence> {
        let mut tape = Tape::inference();
        let vars = self.forward_on(&mut tape, image, local_grid, trace)?;
        Ok(TokenSequence {
            global_class: tape.value(vars.global).clone().reshape(&[self.cfg.dim])?,
            local_class: vars.local.map(|v| tape.value(v).clone()),
            patches: tape.value(vars.patches).clone(),
            grid: vars.grid,
        })
    }
}

/// Bilinear resampling of a row-major positional grid `[h*w, dim]` to a new
/// grid. Sample positions are clamped to the source's cell-center hull, so
/// values never fade towards zero at the border.
pub fn interpolate_pos_embed(pos: &Tensor, old: (usize, usize), new: (usize, usize)) -> Tensor {
    let dim = pos.last_dim();
    assert_eq!(pos.rows(), old.0 * old.1, "positional table does not match grid");
    if old == new {
        return pos.clone();
    }
    let (oh, ow) = old;
    let (nh, nw) = new;
    let clamp_to_hull = |u: f64, n: usize| {
        let x = (u * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        (x + 0.5) / n as f64
    };
    let mut out = vec![0.0; nh * nw * dim];
    for i in 0..nh {
        for j in 0..nw {
            let u = clamp_to_hull((j as f64 + 0.5) / nw as f64, ow);
            let v = clamp_to_hull((i as f64 + 0.5) / nh as f64, oh);
            let st = Stencil::new(u, v, oh, ow);
            let dst = &mut out[(i * nw + j) * dim..][..dim];
            for k in 0..4 {
                if let Some(idx) = st.idx[k] {
                    if st.weight[k] == 0.0 {
                        continue;
                    }
                    for (d, s) in dst.iter_mut().zip(pos.row(idx)) {
                        *d += st.weight[k] * s;
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![nh * nw, dim], out)
}

/// Inverse of the row-major flattening: `[hp*wp, dim]` tokens to `[dim, hp, wp]`.
pub fn patch_tokens_to_feature_map(tokens: &TokenSequence) -> Tensor {
    let (hp, wp) = tokens.grid;
    imaging::hwc_to_chw(&tokens.patches, hp, wp)
}

/// `[dim, hp, wp]` back to row-major tokens `[hp*wp, dim]`.
pub fn feature_map_to_patch_tokens(map: &Tensor) -> Tensor {
    imaging::chw_to_hwc(map)
}
