use super::region::RegionGrid;
use super::vit::{TokenSequence, Vit};
use super::QueryStrategy;
use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::imaging;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Context query for the decoder: a foundation feature and the box it summarizes.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageQuery {
    /// `[dim]`
    pub feature: Tensor,
    pub bbox: BBox,
    /// Index of the enhancer that produced it.
    pub source: usize,
}

/// Encoder outputs living on a tape (used when the encoder is trainable).
#[derive(Debug, Clone)]
pub struct FoundationVars {
    /// `[1, dim]` class token of the full-image pass.
    pub global: Var,
    /// `[hp*wp, dim]`
    pub patches: Var,
    pub grid: (usize, usize),
    /// `([1, dim], box)` per image query.
    pub queries: Vec<(Var, BBox)>,
    pub source: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoundationOutput {
    pub tokens: TokenSequence,
    pub queries: Vec<ImageQuery>,
}

/// Runs the encoder for one raw image: resizes it to the encoder's input
/// size, then extracts patch tokens and (optionally) image queries with the
/// configured strategy.
pub fn encode_on(
    vit: &Vit,
    tape: &mut Tape,
    image: &Tensor,
    source: usize,
    with_queries: bool,
) -> Result<FoundationVars> {
    let cfg = vit.config();
    let size = cfg.image_size;
    if cfg.query_count() > cfg.query_budget {
        return Err(Error::config(format!(
            "{} image queries exceed the budget of {}",
            cfg.query_count(),
            cfg.query_budget
        )));
    }
    let resized = imaging::resize(image, size, size);
    let g = if with_queries && cfg.local_grid >= 2 {
        cfg.local_grid
    } else {
        0
    };
    if g == 0 {
        let t = vit.forward_on(tape, &resized, 0, None)?;
        let queries = if with_queries {
            vec![(t.global, BBox::FULL)]
        } else {
            Vec::new()
        };
        return Ok(FoundationVars {
            global: t.global,
            patches: t.patches,
            grid: t.grid,
            queries,
            source,
        });
    }

    let region = RegionGrid::new(g, cfg.grid(), cfg.grid())?;
    let (tokens, locals): (_, Vec<Var>) = match cfg.strategy {
        QueryStrategy::Crop => {
            let t = vit.forward_on(tape, &resized, 0, None)?;
            let mut locals = Vec::with_capacity(region.regions());
            for r in 0..region.regions() {
                let crop = imaging::resample(image, region.bbox(r), size, size);
                locals.push(vit.forward_on(tape, &crop, 0, None)?.global);
            }
            (t, locals)
        }
        QueryStrategy::MeanPatch => {
            let t = vit.forward_on(tape, &resized, 0, None)?;
            let means = tape.group_mean_rows(t.patches, &region.all_members())?;
            let locals = (0..region.regions())
                .map(|r| tape.slice_rows(means, r, 1))
                .collect::<Result<_>>()?;
            (t, locals)
        }
        QueryStrategy::MaskedClassTokens => {
            let t = vit.forward_on(tape, &resized, g, None)?;
            let local = t.local.expect("local tokens requested");
            let locals = (0..region.regions())
                .map(|r| tape.slice_rows(local, r, 1))
                .collect::<Result<_>>()?;
            (t, locals)
        }
    };
    let mut queries = vec![(tokens.global, BBox::FULL)];
    queries.extend(locals.into_iter().enumerate().map(|(r, v)| (v, region.bbox(r))));
    Ok(FoundationVars {
        global: tokens.global,
        patches: tokens.patches,
        grid: tokens.grid,
        queries,
        source,
    })
}

/// Detached encoder output for one raw image.
pub fn encode(vit: &Vit, image: &Tensor, source: usize, with_queries: bool) -> Result<FoundationOutput> {
    let mut tape = Tape::inference();
    let vars = encode_on(vit, &mut tape, image, source, with_queries)?;
    let dim = vit.dim();
    let queries = vars
        .queries
        .iter()
        .map(|&(v, bbox)| {
            Ok(ImageQuery {
                feature: tape.value(v).clone().reshape(&[dim])?,
                bbox,
                source,
            })
        })
        .collect::<Result<_>>()?;
    let tokens = TokenSequence {
        global_class: tape.value(vars.global).clone().reshape(&[dim])?,
        local_class: None,
        patches: tape.value(vars.patches).clone(),
        grid: vars.grid,
    };
    Ok(FoundationOutput { tokens, queries })
}

/// Image queries for one raw image: the global class token first (full-image
/// box), then one local query per sub-image when `g ≥ 2`.
pub fn extract_image_queries(vit: &Vit, image: &Tensor) -> Result<Vec<ImageQuery>> {
    Ok(encode(vit, image, 0, true)?.queries)
}
