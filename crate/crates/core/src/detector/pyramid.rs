use crate::error::{Error, Result};
use crate::kernels::LevelLayout;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Where a pyramid level came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LevelSource {
    Backbone,
    /// Patch map of enhancer `k`.
    Foundation(usize),
}

impl LevelSource {
    pub fn is_foundation(self) -> bool {
        matches!(self, LevelSource::Foundation(_))
    }
}

/// One level as token rows `[h*w, c]`, row-major over the map.
#[derive(Debug, Clone, Copy)]
pub struct Level {
    pub rows: Var,
    pub h: usize,
    pub w: usize,
    /// Input pixels per cell, relative to the backbone input.
    pub stride: f64,
    pub source: LevelSource,
}

#[derive(Debug, Clone, Default)]
pub struct FeaturePyramid {
    pub levels: Vec<Level>,
}

impl FeaturePyramid {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn layout(&self) -> LevelLayout {
        LevelLayout::new(self.levels.iter().map(|l| (l.h, l.w)).collect())
    }

    pub fn token_count(&self) -> usize {
        self.levels.iter().map(|l| l.h * l.w).sum()
    }

    pub fn sources(&self) -> Vec<LevelSource> {
        self.levels.iter().map(|l| l.source).collect()
    }

    pub fn has_foundation(&self) -> bool {
        self.levels.iter().any(|l| l.source.is_foundation())
    }

    /// All level rows stacked in order, `[T, c]`.
    pub fn tokens(&self, tape: &mut Tape) -> Result<Var> {
        let rows: Vec<Var> = self.levels.iter().map(|l| l.rows).collect();
        if rows.len() == 1 {
            return Ok(rows[0]);
        }
        tape.concat_rows(&rows)
    }

    /// Same geometry with new rows taken from a stacked `[T, c]` tensor.
    pub fn with_tokens(&self, tape: &mut Tape, tokens: Var) -> Result<Self> {
        let mut start = 0;
        let mut levels = Vec::with_capacity(self.levels.len());
        for l in &self.levels {
            let n = l.h * l.w;
            levels.push(Level {
                rows: tape.slice_rows(tokens, start, n)?,
                ..*l
            });
            start += n;
        }
        Ok(Self { levels })
    }

    /// Backbone levels must shrink strictly and precede every foundation level.
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::contract("feature pyramid has no levels"));
        }
        let mut seen_foundation = false;
        let mut prev: Option<usize> = None;
        for l in &self.levels {
            match l.source {
                LevelSource::Foundation(_) => seen_foundation = true,
                LevelSource::Backbone => {
                    if seen_foundation {
                        return Err(Error::contract("backbone level after a foundation level"));
                    }
                    if prev.is_some_and(|p| p <= l.h * l.w) {
                        return Err(Error::contract("backbone levels must shrink strictly"));
                    }
                    prev = Some(l.h * l.w);
                }
            }
        }
        Ok(())
    }

    /// Plain tensors `[c, h, w]` of every level, for visualization.
    pub fn snapshot(&self, tape: &Tape) -> PyramidSnapshot {
        PyramidSnapshot {
            levels: self
                .levels
                .iter()
                .map(|l| (rows_to_chw(tape.value(l.rows), l.h, l.w), l.source))
                .collect(),
        }
    }
}

/// Appends projected foundation maps after the backbone levels.
pub fn append_foundation_levels(mut pyr: FeaturePyramid, extra: Vec<Level>) -> FeaturePyramid {
    pyr.levels.extend(extra);
    pyr
}

/// Keeps backbone levels only.
pub fn drop_foundation_levels(pyr: &FeaturePyramid) -> FeaturePyramid {
    FeaturePyramid {
        levels: pyr
            .levels
            .iter()
            .filter(|l| !l.source.is_foundation())
            .copied()
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidSnapshot {
    /// `[c, h, w]` per level.
    pub levels: Vec<(Tensor, LevelSource)>,
}

fn rows_to_chw(rows: &Tensor, h: usize, w: usize) -> Tensor {
    crate::imaging::hwc_to_chw(rows, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn level(tape: &mut Tape, h: usize, source: LevelSource) -> Level {
        Level {
            rows: tape.constant(Tensor::zeros(&[h * h, 2])),
            h,
            w: h,
            stride: 1.0,
            source,
        }
    }

    #[test]
    fn drop_keeps_backbone_order() {
        let mut tape = Tape::inference();
        let pyr = FeaturePyramid {
            levels: vec![
                level(&mut tape, 4, LevelSource::Backbone),
                level(&mut tape, 2, LevelSource::Backbone),
                level(&mut tape, 1, LevelSource::Backbone),
            ],
        };
        let extra = vec![level(&mut tape, 3, LevelSource::Foundation(0))];
        let fused = append_foundation_levels(pyr.clone(), extra);
        assert_eq!(fused.len(), 4);
        fused.validate().unwrap();
        let dropped = drop_foundation_levels(&fused);
        assert_eq!(dropped.sources(), vec![LevelSource::Backbone; 3]);
        assert_eq!(dropped.token_count(), 21);
        let same = drop_foundation_levels(&pyr);
        assert_eq!(
            same.levels.iter().map(|l| l.rows).collect::<Vec<_>>(),
            pyr.levels.iter().map(|l| l.rows).collect::<Vec<_>>()
        );
    }

    #[test]
    fn validate_rejects_misordered_levels() {
        let mut tape = Tape::inference();
        let bad = FeaturePyramid {
            levels: vec![
                level(&mut tape, 2, LevelSource::Backbone),
                level(&mut tape, 4, LevelSource::Backbone),
            ],
        };
        assert!(bad.validate().is_err());
        let bad = FeaturePyramid {
            levels: vec![
                level(&mut tape, 3, LevelSource::Foundation(0)),
                level(&mut tape, 2, LevelSource::Backbone),
            ],
        };
        assert!(bad.validate().is_err());
    }
}
