use rand::Rng;

use super::pyramid::{FeaturePyramid, Level, LevelSource};
use crate::error::{Error, Result};
use crate::imaging;
use crate::nn::Linear;
use crate::param::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Coarsest stride; inputs must be a multiple of it.
pub const COARSEST_STRIDE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Convolution as im2col followed by a matmul over HWC rows.
#[derive(Debug, Clone)]
pub struct Conv {
    pub spec: ConvSpec,
    pub proj: Linear,
}

impl Conv {
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: usize, w: usize) -> Result<(Var, usize, usize)> {
        let ConvSpec { kernel, stride, pad } = self.spec;
        let cols = tape.im2col(x, h, w, kernel, stride, pad)?;
        let y = self.proj.forward(tape, store, cols)?;
        let y = tape.relu(y);
        let oh = crate::kernels::conv_out(h, kernel, stride, pad);
        let ow = crate::kernels::conv_out(w, kernel, stride, pad);
        Ok((y, oh, ow))
    }
}

/// Small strided conv net: a stride-4 stem, one stride-1 conv, then three
/// stride-2 stages emitting levels at strides 8, 16 and 32.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub stem: Conv,
    pub mix: Conv,
    pub stages: Vec<Conv>,
    pub channels: Vec<usize>,
}

impl Backbone {
    pub const STEM: ConvSpec = ConvSpec {
        kernel: 4,
        stride: 4,
        pad: 0,
    };
    pub const MIX: ConvSpec = ConvSpec {
        kernel: 3,
        stride: 1,
        pad: 1,
    };
    pub const STAGE: ConvSpec = ConvSpec {
        kernel: 3,
        stride: 2,
        pad: 1,
    };

    /// `channels`: stem width followed by the three level widths.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, channels: &[usize], rng: &mut R) -> Self {
        assert_eq!(channels.len(), 4, "stem width plus three level widths");
        let conv = |store: &mut ParamStore, name: &str, spec: ConvSpec, cin: usize, cout: usize, rng: &mut R| Conv {
            spec,
            proj: Linear::new(store, name, spec.kernel * spec.kernel * cin, cout, false, rng),
        };
        let stem = conv(store, "backbone.stem", Self::STEM, 3, channels[0], rng);
        let mix = conv(store, "backbone.mix", Self::MIX, channels[0], channels[0], rng);
        let stages = (0..3)
            .map(|i| {
                conv(
                    store,
                    &format!("backbone.stage{i}"),
                    Self::STAGE,
                    channels[i],
                    channels[i + 1],
                    rng,
                )
            })
            .collect();
        Self {
            stem,
            mix,
            stages,
            channels: channels.to_vec(),
        }
    }

    /// `image`: `[3, H, W]`. Returns three backbone levels (raw channels).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, image: &Tensor) -> Result<FeaturePyramid> {
        let (_, h, w) = imaging::dims(image);
        if h % COARSEST_STRIDE != 0 || w % COARSEST_STRIDE != 0 || h == 0 || w == 0 {
            return Err(Error::config(format!(
                "backbone input {h}x{w} must be a positive multiple of {COARSEST_STRIDE}"
            )));
        }
        let x = tape.constant(imaging::chw_to_hwc(image));
        let (x, h1, w1) = self.stem.forward(tape, store, x, h, w)?;
        let (mut x, mut hh, mut ww) = self.mix.forward(tape, store, x, h1, w1)?;
        let mut levels = Vec::with_capacity(3);
        for stage in &self.stages {
            let (y, oh, ow) = stage.forward(tape, store, x, hh, ww)?;
            (x, hh, ww) = (y, oh, ow);
            levels.push(Level {
                rows: y,
                h: oh,
                w: ow,
                stride: (h / oh) as f64,
                source: LevelSource::Backbone,
            });
        }
        Ok(FeaturePyramid { levels })
    }

    /// Inclusive input-pixel window `[lo, hi]` (per axis) that can influence
    /// output cell `o` of level `level`.
    pub fn receptive_window(level: usize, o: usize) -> (isize, isize) {
        let mut specs = vec![Self::STEM, Self::MIX];
        specs.extend(std::iter::repeat_n(Self::STAGE, level + 1));
        let (mut lo, mut hi) = (o as isize, o as isize);
        for s in specs.iter().rev() {
            lo = lo * s.stride as isize - s.pad as isize;
            hi = hi * s.stride as isize - s.pad as isize + s.kernel as isize - 1;
        }
        (lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn level_sizes_follow_strides() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, &[4, 6, 8, 8], &mut rng);
        let mut tape = Tape::inference();
        let img = Tensor::uniform(&[3, 128, 128], 0.0, 1.0, &mut rng);
        let pyr = bb.forward(&mut tape, &store, &img).unwrap();
        let dims: Vec<_> = pyr.levels.iter().map(|l| (l.h, l.w, l.stride)).collect();
        assert_eq!(dims, vec![(16, 16, 8.0), (8, 8, 16.0), (4, 4, 32.0)]);
        pyr.validate().unwrap();
    }

    #[test]
    fn indivisible_input_names_the_multiple() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, &[4, 4, 4, 4], &mut rng);
        let mut tape = Tape::inference();
        let err = bb
            .forward(&mut tape, &store, &Tensor::zeros(&[3, 48, 64]))
            .unwrap_err();
        assert!(err.to_string().contains("32"), "{err}");
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, &[4, 4, 4, 4], &mut rng);
        let mut tape = Tape::inference();
        let pyr = bb.forward(&mut tape, &store, &Tensor::zeros(&[3, 64, 64])).unwrap();
        for l in &pyr.levels {
            assert!(tape.data(l.rows).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn pixel_perturbation_stays_in_receptive_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, &[4, 6, 6, 6], &mut rng);
        let img = Tensor::uniform(&[3, 64, 64], 0.0, 1.0, &mut rng);
        let (py, px) = (21usize, 37usize);
        let mut img2 = img.clone();
        img2.data_mut()[64 * py + px] += 0.7;
        let run = |img: &Tensor| {
            let mut tape = Tape::inference();
            let pyr = bb.forward(&mut tape, &store, img).unwrap();
            tape.value(pyr.levels[0].rows).clone()
        };
        let (a, b) = (run(&img), run(&img2));
        let (h, w) = (8, 8);
        let c = a.last_dim();
        let mut changed = 0;
        for oy in 0..h {
            for ox in 0..w {
                let differs = (0..c).any(|k| a.row(oy * w + ox)[k] != b.row(oy * w + ox)[k]);
                let (ylo, yhi) = Backbone::receptive_window(0, oy);
                let (xlo, xhi) = Backbone::receptive_window(0, ox);
                let inside = (ylo..=yhi).contains(&(py as isize)) && (xlo..=xhi).contains(&(px as isize));
                if differs {
                    changed += 1;
                    assert!(inside, "cell ({oy},{ox}) changed outside its window");
                }
            }
        }
        assert!(changed > 0);
        assert!(changed < h * w / 2);
    }
}
