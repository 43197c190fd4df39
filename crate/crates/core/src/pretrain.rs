//! Self-supervised pretraining of the foundation encoder on a rotation
//! proxy task, plus checkpoint I/O for encoders.
//!
//! The encoder must predict which of four quarter turns was applied to a
//! scene. Scenes have a clear "up" (roofs above houses, heads above
//! robots), so the task forces the class token to encode layout.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::AnnotatedImage;
use crate::error::{Error, Result};
use crate::foundation::{Vit, VitConfig};
use crate::imaging;
use crate::nn::Linear;
use crate::optim::AdamW;
use crate::param::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Skip training and keep the random initialization (a baseline).
    pub random_frozen: bool,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
            random_frozen: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    /// Rotation accuracy on held-out images, all four turns each.
    pub heldout_accuracy: f64,
}

fn rotation_logits(vit: &Vit, head: &Linear, heads: &ParamStore, tape: &mut Tape, image: &Tensor) -> Result<crate::tape::Var> {
    let size = vit.config().image_size;
    let x = imaging::resize(image, size, size);
    let t = vit.forward_on(tape, &x, 0, None)?;
    head.forward(tape, heads, t.global)
}

/// Fraction of (image, turn) pairs whose turn is predicted correctly.
pub fn rotation_accuracy(vit: &Vit, head: &Linear, heads: &ParamStore, images: &[AnnotatedImage]) -> Result<f64> {
    let mut correct = 0;
    for img in images {
        for turn in 0..4 {
            let mut tape = Tape::inference();
            let rotated = imaging::rotate90(&img.image, turn);
            let l = rotation_logits(vit, head, heads, &mut tape, &rotated)?;
            let v = tape.data(l);
            let best = (0..4).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
            correct += usize::from(best == turn);
        }
    }
    Ok(correct as f64 / (4 * images.len().max(1)) as f64)
}

/// Builds an encoder from `cfg` and trains it on the rotation task. The
/// returned encoder is frozen.
pub fn pretrain(
    cfg: VitConfig,
    train: &[AnnotatedImage],
    heldout: &[AnnotatedImage],
    opts: &PretrainOptions,
) -> Result<(Vit, PretrainReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut vit = Vit::new(cfg, &mut rng)?;
    let mut heads = ParamStore::new();
    let head = Linear::new(&mut heads, "rotation_head", vit.dim(), 4, false, &mut rng);
    let mut losses = Vec::new();
    if !opts.random_frozen {
        if train.is_empty() || opts.batch_size == 0 {
            return Err(Error::config("pretraining needs images and a positive batch size"));
        }
        vit.store_mut().set_frozen(false);
        vit.set_allow_trainable(true);
        let mut enc_opt = AdamW::new(opts.lr, (0.9, 0.999), 1e-4, 1e-8);
        let mut head_opt = AdamW::new(opts.lr, (0.9, 0.999), 1e-4, 1e-8);
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 0..opts.epochs {
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(opts.batch_size) {
                vit.store_mut().zero_grad();
                heads.zero_grad();
                let mut batch_loss = 0.0;
                for &i in chunk {
                    let turn = rng.random_range(0..4);
                    let rotated = imaging::rotate90(&train[i].image, turn);
                    let mut tape = Tape::new();
                    let l = rotation_logits(&vit, &head, &heads, &mut tape, &rotated)?;
                    let loss = tape.cross_entropy(l, &[turn])?;
                    batch_loss += tape.value(loss).item();
                    let g = tape.backward(loss)?;
                    vit.store_mut().accumulate(&tape, &g);
                    heads.accumulate(&tape, &g);
                }
                let n = chunk.len() as f64;
                vit.store_mut().scale_grads(1.0 / n);
                heads.scale_grads(1.0 / n);
                enc_opt.step(vit.store_mut())?;
                head_opt.step(&mut heads)?;
                sum += batch_loss / n;
                batches += 1;
            }
            let mean = sum / batches as f64;
            log::info!("pretrain epoch {}: loss {mean:.4}", epoch + 1);
            losses.push(mean);
        }
        vit.store_mut().set_frozen(true);
        vit.set_allow_trainable(false);
    }
    let heldout_accuracy = rotation_accuracy(&vit, &head, &heads, heldout)?;
    Ok((
        vit,
        PretrainReport {
            epoch_losses: losses,
            heldout_accuracy,
        },
    ))
}

/// Sidecar holding the encoder architecture next to a checkpoint.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut p = checkpoint.as_os_str().to_owned();
    p.push(".ini");
    PathBuf::from(p)
}

pub fn save_encoder(vit: &Vit, path: &Path) -> Result<()> {
    checkpoint::save(vit.store(), path)?;
    let mut c = RunConfig {
        foundation: vit.config().clone(),
        ..RunConfig::default()
    };
    c.foundation.local_grid = 0;
    let text = c.to_ini();
    let section = text
        .split("\n\n")
        .find(|s| s.starts_with("[foundation]"))
        .unwrap_or_default();
    std::fs::write(sidecar_path(path), format!("{section}\n"))?;
    Ok(())
}

/// Loads an encoder saved by [`save_encoder`]. Query settings (`local_grid`,
/// strategy, budget) come from `queries`. A checkpoint with trainable
/// tensors is refused unless `allow_trainable` is set.
pub fn load_encoder(path: &Path, queries: &VitConfig, allow_trainable: bool) -> Result<Vit> {
    let store = checkpoint::load(path)?;
    if !store.all_frozen() && !allow_trainable {
        return Err(Error::contract(format!(
            "{} contains trainable tensors; pass --allow-trainable-foundation to use it",
            path.display()
        )));
    }
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side)?;
    let arch = RunConfig::from_ini_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", side.display())))?
        .foundation;
    let cfg = VitConfig {
        local_grid: queries.local_grid,
        strategy: queries.strategy,
        query_budget: queries.query_budget,
        ..arch
    };
    let mut vit = Vit::from_store(cfg, store)?;
    vit.set_allow_trainable(allow_trainable);
    Ok(vit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SceneSpec, Split};

    fn small_vit() -> VitConfig {
        VitConfig {
            image_size: 32,
            patch_size: 8,
            depth: 1,
            dim: 16,
            heads: 2,
            local_grid: 0,
            ..VitConfig::default()
        }
    }

    #[test]
    fn save_load_round_trip_keeps_frozen_weights() {
        let spec = SceneSpec {
            canvas: 64,
            ..SceneSpec::default()
        };
        let (imgs, _) = generate_dataset(&spec, Split::Train, 2, 1).unwrap();
        let opts = PretrainOptions {
            epochs: 1,
            batch_size: 2,
            ..Default::default()
        };
        let (vit, rep) = pretrain(small_vit(), &imgs, &imgs, &opts).unwrap();
        assert_eq!(rep.epoch_losses.len(), 1);
        assert!(vit.store().all_frozen());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.fdtr");
        save_encoder(&vit, &path).unwrap();
        let back = load_encoder(&path, &small_vit(), false).unwrap();
        assert_eq!(back.store().digest(), vit.store().digest());
        assert_eq!(back.config().dim, 16);
    }

    #[test]
    fn trainable_checkpoint_needs_opt_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut vit = Vit::new(small_vit(), &mut rng).unwrap();
        vit.store_mut().set_frozen(false);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.fdtr");
        save_encoder(&vit, &path).unwrap();
        assert!(matches!(load_encoder(&path, &small_vit(), false), Err(Error::Contract(_))));
        assert!(load_encoder(&path, &small_vit(), true).is_ok());
    }
}
