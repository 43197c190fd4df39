//! Training loop and batched evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::AnnotatedImage;
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::eval::{detections_from_outputs, evaluate, Detection, EvalReport, MAX_DETS};
use crate::foundation::FoundationOutput;
use crate::matching::{set_loss, GroundTruth, LossTerms, LossWeights};
use crate::optim::AdamW;
use crate::param::ParamStore;
use crate::pretrain::load_encoder;
use crate::tape::Tape;

const SHUFFLE_STREAM: u64 = 0x5348_5546;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub backbone_lr_mult: f64,
    pub weight_decay: f64,
    pub clip: f64,
    pub eval_every: usize,
    /// Stop after this many optimizer steps, whatever the epoch count says.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub workers: usize,
    pub loss: LossWeights,
    /// Canvas size used for the AP area ranges.
    pub canvas: usize,
}

impl TrainOptions {
    pub fn from_config(c: &RunConfig) -> Self {
        Self {
            epochs: c.optim.epochs,
            batch_size: c.optim.batch_size,
            lr: c.optim.lr,
            backbone_lr_mult: c.optim.backbone_lr_mult,
            weight_decay: c.optim.weight_decay,
            clip: c.optim.clip,
            eval_every: c.optim.eval_every,
            max_steps: None,
            seed: c.seed,
            workers: c.workers,
            loss: c.loss,
            canvas: c.scene.canvas,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Mean final-layer loss terms (weighted).
    pub terms: LossTerms,
    pub report: Option<EvalReport>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainSummary {
    /// Mean batch loss of every optimizer step.
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainSummary {
    pub fn final_report(&self) -> Option<&EvalReport> {
        self.epochs.iter().rev().find_map(|e| e.report.as_ref())
    }
}

/// Frozen foundation outputs per image; `None` when some encoder trains.
pub fn cache_foundation(det: &Detector, images: &[AnnotatedImage], workers: usize) -> Result<Option<Vec<Vec<Option<FoundationOutput>>>>> {
    if det.trainable_enhancers() || det.enhancers().is_empty() {
        return Ok(None);
    }
    par_map(images, workers, |img| det.foundation_outputs(&img.image)).map(Some)
}

/// Runs `f` over `items` on up to `workers` scoped threads, keeping order.
fn par_map<T: Sync, U: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let workers = workers.clamp(1, items.len());
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    let parts: Vec<Result<Vec<U>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<U>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker thread")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Final-layer detections for every image.
pub fn predict_all(
    det: &Detector,
    images: &[AnnotatedImage],
    cache: Option<&[Vec<Option<FoundationOutput>>]>,
    workers: usize,
) -> Result<Vec<Vec<Detection>>> {
    let idx: Vec<usize> = (0..images.len()).collect();
    par_map(&idx, workers, |&i| {
        let cached = cache.map(|c| c[i].as_slice());
        let (logits, boxes) = det.predict(&images[i].image, cached)?;
        Ok(detections_from_outputs(&logits, &boxes, MAX_DETS))
    })
}

pub fn evaluate_detector(
    det: &Detector,
    images: &[AnnotatedImage],
    cache: Option<&[Vec<Option<FoundationOutput>>]>,
    canvas: usize,
    workers: usize,
) -> Result<EvalReport> {
    let preds = predict_all(det, images, cache, workers)?;
    let gts: Vec<GroundTruth> = images.iter().map(|i| i.gt.clone()).collect();
    Ok(evaluate(&preds, &gts, det.config().num_classes, canvas))
}

/// Detector for `cfg` with its encoders loaded from the configured
/// foundation checkpoints (one per enhancer).
pub fn build_detector(cfg: &RunConfig) -> Result<Detector> {
    let dc = cfg.detector_config()?;
    if dc.enhancers.len() != cfg.foundation_checkpoints.len() {
        return Err(Error::config(format!(
            "{} enhancer(s) need as many foundation checkpoints, got {}",
            dc.enhancers.len(),
            cfg.foundation_checkpoints.len()
        )));
    }
    let vits = dc
        .enhancers
        .iter()
        .zip(&cfg.foundation_checkpoints)
        .map(|(q, path)| {
            let vit = load_encoder(path, q, cfg.allow_trainable_foundation)?;
            if vit.config().image_size == q.image_size {
                Ok(vit)
            } else {
                vit.with_input_size(q.image_size)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Detector::with_enhancers(dc, cfg.seed, vits)
}

pub struct Trainer {
    opts: TrainOptions,
    opt: AdamW,
    enhancer_opts: Vec<AdamW>,
    rng: ChaCha8Rng,
    steps: usize,
}

impl Trainer {
    pub fn new(det: &Detector, opts: TrainOptions) -> Result<Self> {
        if opts.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        let make = || AdamW::new(opts.lr, (0.9, 0.999), opts.weight_decay, 1e-8);
        Ok(Self {
            opt: make().with_lr_scale("backbone.", opts.backbone_lr_mult),
            enhancer_opts: det.enhancers().iter().map(|_| make()).collect(),
            rng: ChaCha8Rng::seed_from_u64(opts.seed ^ SHUFFLE_STREAM),
            steps: 0,
            opts,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn budget_left(&self) -> bool {
        self.opts.max_steps.is_none_or(|m| self.steps < m)
    }

    /// One optimizer step on a batch; returns the mean loss over all layers
    /// and the mean final-layer terms.
    pub fn step(
        &mut self,
        det: &mut Detector,
        batch: &[&AnnotatedImage],
        cache: &[Option<&[Option<FoundationOutput>]>],
    ) -> Result<(f64, LossTerms)> {
        det.store_mut().zero_grad();
        for v in det.enhancers_mut() {
            v.store_mut().zero_grad();
        }
        let mut total = 0.0;
        let mut terms = LossTerms::default();
        for (img, cached) in batch.iter().zip(cache) {
            let mut tape = Tape::new();
            let out = det.forward(&mut tape, &img.image, *cached, false)?;
            let layers: Vec<_> = out.layers.iter().map(|l| (l.logits, l.boxes)).collect();
            let (loss, t) = set_loss(&mut tape, &layers, &img.gt, &self.opts.loss)?;
            total += tape.value(loss).item();
            terms.cls += t.cls;
            terms.l1 += t.l1;
            terms.giou += t.giou;
            let grads = tape.backward(loss)?;
            det.store_mut().accumulate(&tape, &grads);
            for v in det.enhancers_mut() {
                v.store_mut().accumulate(&tape, &grads);
            }
        }
        let n = batch.len() as f64;
        let mut stores: Vec<&mut ParamStore> = Vec::new();
        // Split borrows: detector store first, then each enhancer store.
        let (store, vits) = split_stores(det);
        stores.push(store);
        stores.extend(vits);
        for s in stores.iter_mut() {
            s.scale_grads(1.0 / n);
        }
        let norm = stores.iter().map(|s| s.grad_norm().powi(2)).sum::<f64>().sqrt();
        if norm > self.opts.clip && norm > 0.0 {
            for s in stores.iter_mut() {
                s.scale_grads(self.opts.clip / norm);
            }
        }
        let mut it = stores.into_iter();
        self.opt.step(it.next().expect("detector store"))?;
        for (s, opt) in it.zip(&mut self.enhancer_opts) {
            if !s.all_frozen() {
                opt.step(s)?;
            }
        }
        self.steps += 1;
        Ok((
            total / n,
            LossTerms {
                cls: terms.cls / n,
                l1: terms.l1 / n,
                giou: terms.giou / n,
            },
        ))
    }

    /// Trains for the configured number of epochs. `on_epoch` sees each
    /// record as it is produced (for logging).
    pub fn fit(
        &mut self,
        det: &mut Detector,
        train: &[AnnotatedImage],
        val: &[AnnotatedImage],
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<TrainSummary> {
        if train.is_empty() {
            return Err(Error::config("no training images"));
        }
        let train_cache = cache_foundation(det, train, self.opts.workers)?;
        let val_cache = cache_foundation(det, val, self.opts.workers)?;
        let mut summary = TrainSummary::default();
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 1..=self.opts.epochs {
            if !self.budget_left() {
                break;
            }
            order.shuffle(&mut self.rng);
            let mut epoch_loss = 0.0;
            let mut epoch_terms = LossTerms::default();
            let mut batches = 0;
            for chunk in order.chunks(self.opts.batch_size) {
                if !self.budget_left() {
                    break;
                }
                let batch: Vec<&AnnotatedImage> = chunk.iter().map(|&i| &train[i]).collect();
                let cached: Vec<Option<&[Option<FoundationOutput>]>> = chunk
                    .iter()
                    .map(|&i| train_cache.as_ref().map(|c| c[i].as_slice()))
                    .collect();
                let (loss, t) = self.step(det, &batch, &cached)?;
                epoch_terms.cls += t.cls;
                epoch_terms.l1 += t.l1;
                epoch_terms.giou += t.giou;
                if !loss.is_finite() {
                    return Err(Error::contract(format!("loss became {loss} at step {}", self.steps)));
                }
                summary.step_losses.push(loss);
                epoch_loss += loss;
                batches += 1;
            }
            let wants_eval = !val.is_empty()
                && self.opts.eval_every > 0
                && (epoch % self.opts.eval_every == 0 || epoch == self.opts.epochs);
            let report = if wants_eval {
                Some(evaluate_detector(
                    det,
                    val,
                    val_cache.as_deref(),
                    self.opts.canvas,
                    self.opts.workers,
                )?)
            } else {
                None
            };
            let b = batches.max(1) as f64;
            let rec = EpochRecord {
                epoch,
                mean_loss: epoch_loss / b,
                terms: LossTerms {
                    cls: epoch_terms.cls / b,
                    l1: epoch_terms.l1 / b,
                    giou: epoch_terms.giou / b,
                },
                report,
            };
            log::info!("epoch {epoch}: loss {:.4}", rec.mean_loss);
            on_epoch(&rec);
            summary.epochs.push(rec);
        }
        Ok(summary)
    }
}

fn split_stores(det: &mut Detector) -> (&mut ParamStore, Vec<&mut ParamStore>) {
    let (store, vits) = det.stores_mut();
    (store, vits.iter_mut().map(|v| v.store_mut()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, Split};

    fn tiny() -> RunConfig {
        let mut c = RunConfig::compact();
        c.n_train = 4;
        c.n_val = 2;
        c.optim.epochs = 2;
        c.optim.batch_size = 2;
        c
    }

    #[test]
    fn loss_is_finite_and_runs_are_reproducible() {
        let c = tiny();
        let spec = c.scene_spec();
        let (train, _) = generate_dataset(&spec, Split::Train, c.n_train, 1).unwrap();
        let (val, _) = generate_dataset(&spec, Split::Val, c.n_val, 1).unwrap();
        let run = || {
            let mut det = Detector::new(c.detector_config().unwrap(), c.seed).unwrap();
            let mut t = Trainer::new(&det, TrainOptions::from_config(&c)).unwrap();
            let s = t.fit(&mut det, &train, &val, |_| {}).unwrap();
            (s, det.store().digest())
        };
        let (a, da) = run();
        let (b, db) = run();
        assert_eq!(a.step_losses.len(), 4);
        assert!(a.step_losses.iter().all(|l| l.is_finite()));
        assert_eq!(a.step_losses, b.step_losses);
        assert_eq!(da, db);
        assert!(a.final_report().is_some());
    }

    #[test]
    fn max_steps_caps_training() {
        let c = tiny();
        let (train, _) = generate_dataset(&c.scene_spec(), Split::Train, 4, 1).unwrap();
        let mut det = Detector::new(c.detector_config().unwrap(), 0).unwrap();
        let mut opts = TrainOptions::from_config(&c);
        opts.max_steps = Some(3);
        let mut t = Trainer::new(&det, opts).unwrap();
        let s = t.fit(&mut det, &train, &[], |_| {}).unwrap();
        assert_eq!(s.step_losses.len(), 3);
    }
}
