//! Run configuration: flat INI sections, resolved and echoed with every run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;

use crate::data::{CoRule, SceneSpec, CLASS_NAMES};
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::foundation::{QueryStrategy, VitConfig};
use crate::matching::LossWeights;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimSettings {
    pub lr: f64,
    pub backbone_lr_mult: f64,
    pub weight_decay: f64,
    pub clip: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Evaluate on the validation split every this many epochs (0: never).
    pub eval_every: usize,
}

impl Default for OptimSettings {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            backbone_lr_mult: 0.1,
            weight_decay: 1e-4,
            clip: 0.1,
            epochs: 20,
            batch_size: 4,
            eval_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub scene: SceneSpec,
    pub n_train: usize,
    pub n_val: usize,
    /// Detector shape; `enhancers` is derived from `foundation` and `enhancer_count`.
    pub detector: DetectorConfig,
    /// Image queries per decoder layer: 0, 1 or `1 + g²`.
    pub image_queries: usize,
    pub enhancer_count: usize,
    pub foundation: VitConfig,
    pub foundation_checkpoints: Vec<PathBuf>,
    pub allow_trainable_foundation: bool,
    pub optim: OptimSettings,
    pub loss: LossWeights,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            scene: SceneSpec::default(),
            n_train: 200,
            n_val: 50,
            detector: DetectorConfig::default(),
            image_queries: 0,
            enhancer_count: 0,
            foundation: VitConfig::default(),
            foundation_checkpoints: Vec::new(),
            allow_trainable_foundation: false,
            optim: OptimSettings::default(),
            loss: LossWeights::default(),
        }
    }
}

impl RunConfig {
    /// Small model and canvas that train in seconds per epoch on one core.
    pub fn compact() -> Self {
        let mut c = Self::default();
        c.scene.canvas = 64;
        c.detector.input_size = 64;
        c.detector.backbone_channels = vec![8, 16, 24, 32];
        c.detector.hidden_dim = 32;
        c.detector.queries = 12;
        c.detector.encoder_layers = 1;
        c.detector.decoder_layers = 2;
        c.detector.heads = 2;
        c.detector.points = 2;
        c.detector.ffn_dim = 64;
        c.foundation = VitConfig {
            image_size: 32,
            patch_size: 8,
            depth: 2,
            dim: 32,
            heads: 2,
            ..VitConfig::default()
        };
        c.optim.lr = 1e-3;
        c
    }

    /// Local grid `g` implied by the image-query count.
    pub fn local_grid(&self) -> Result<usize> {
        match self.image_queries {
            0 | 1 => Ok(0),
            n => {
                let g = ((n - 1) as f64).sqrt().round() as usize;
                if g >= 2 && g * g + 1 == n {
                    Ok(g)
                } else {
                    Err(Error::config(format!(
                        "image query count {n} is not 0, 1 or 1 + g² for some g >= 2"
                    )))
                }
            }
        }
    }

    /// The detector configuration these settings resolve to.
    pub fn detector_config(&self) -> Result<DetectorConfig> {
        let mut d = self.detector.clone();
        d.num_classes = self.scene.num_classes();
        d.use_image_queries = self.image_queries > 0;
        let mut vit = self.foundation.clone();
        vit.local_grid = self.local_grid()?;
        let count = if d.self_query && !d.fuse_patches {
            self.enhancer_count
        } else {
            self.enhancer_count.max(usize::from(d.use_image_queries || d.fuse_patches))
        };
        if self.enhancer_count == 0 && (d.fuse_patches || (d.use_image_queries && !d.self_query)) {
            return Err(Error::config("image queries and patch fusion need enhancers >= 1"));
        }
        d.enhancers = vec![vit; count];
        if d.self_query && self.image_queries > 1 {
            return Err(Error::config("the mean-feature query yields a single image query"));
        }
        d.validate()?;
        Ok(d)
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            seed: self.seed,
            ..self.scene.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene_spec().validate()?;
        self.detector_config()?;
        if self.optim.batch_size == 0 || self.optim.lr <= 0.0 || self.optim.clip <= 0.0 {
            return Err(Error::config("batch size, learning rate and clip must be positive"));
        }
        if self.n_train == 0 {
            return Err(Error::config("n_train must be at least 1"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_ini_str(&text).map_err(|e| match e {
            Error::Parse { line, msg, .. } => Error::Parse {
                path: path.to_path_buf(),
                line,
                msg,
            },
            other => other,
        })
    }

    /// Parses INI text on top of the defaults. Unknown keys are errors.
    pub fn from_ini_str(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let ini = Ini::load_from_str(text).map_err(|e| Error::Parse {
            path: PathBuf::from("<config>"),
            line: e.line,
            msg: e.msg.to_string(),
        })?;
        for (section, props) in ini.iter() {
            let section = section.unwrap_or("run");
            for (key, value) in props.iter() {
                c.set(section, key, value)?;
            }
        }
        Ok(c)
    }

    /// Applies one `section.key = value` setting.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match (section, key) {
            ("preset", "name") => match v {
                "default" => *self = Self::default(),
                "compact" => *self = Self::compact(),
                other => return Err(Error::config(format!("unknown preset {other:?}"))),
            },
            ("run", "seed") => self.seed = parse(key, v)?,
            ("run", "workers") => self.workers = parse(key, v)?,
            ("data", "canvas") => self.scene.canvas = parse(key, v)?,
            ("data", "n_train") => self.n_train = parse(key, v)?,
            ("data", "n_val") => self.n_val = parse(key, v)?,
            ("data", "min_objects") => self.scene.min_objects = parse(key, v)?,
            ("data", "max_objects") => self.scene.max_objects = parse(key, v)?,
            ("data", "occlusion_rate") => self.scene.occlusion_rate = parse(key, v)?,
            ("data", "distractor_rate") => self.scene.distractor_rate = parse(key, v)?,
            ("data", "min_scale") => self.scene.min_scale = parse(key, v)?,
            ("data", "max_scale") => self.scene.max_scale = parse(key, v)?,
            ("data", "cooccurrence") => self.scene.cooccurrence = parse_rules(v)?,
            ("detector", "input_size") => self.detector.input_size = parse(key, v)?,
            ("detector", "backbone_channels") => self.detector.backbone_channels = parse_list(key, v)?,
            ("detector", "hidden_dim") => self.detector.hidden_dim = parse(key, v)?,
            ("detector", "queries") => self.detector.queries = parse(key, v)?,
            ("detector", "encoder_layers") => self.detector.encoder_layers = parse(key, v)?,
            ("detector", "decoder_layers") => self.detector.decoder_layers = parse(key, v)?,
            ("detector", "heads") => self.detector.heads = parse(key, v)?,
            ("detector", "points") => self.detector.points = parse(key, v)?,
            ("detector", "ffn_dim") => self.detector.ffn_dim = parse(key, v)?,
            ("detector", "max_decoder_tokens") => self.detector.max_decoder_tokens = parse(key, v)?,
            ("detector", "image_queries") => self.image_queries = parse(key, v)?,
            ("detector", "fuse_patches") => self.detector.fuse_patches = parse_bool(key, v)?,
            ("detector", "self_query") => self.detector.self_query = parse_bool(key, v)?,
            ("detector", "self_pool_all_levels") => self.detector.self_pool_all_levels = parse_bool(key, v)?,
            ("detector", "enhancers") => self.enhancer_count = parse(key, v)?,
            ("foundation", "image_size") => self.foundation.image_size = parse(key, v)?,
            ("foundation", "patch_size") => self.foundation.patch_size = parse(key, v)?,
            ("foundation", "depth") => self.foundation.depth = parse(key, v)?,
            ("foundation", "dim") => self.foundation.dim = parse(key, v)?,
            ("foundation", "heads") => self.foundation.heads = parse(key, v)?,
            ("foundation", "mlp_ratio") => self.foundation.mlp_ratio = parse(key, v)?,
            ("foundation", "strategy") => self.foundation.strategy = v.parse::<QueryStrategy>()?,
            ("foundation", "query_budget") => self.foundation.query_budget = parse(key, v)?,
            ("foundation", "allow_trainable") => self.allow_trainable_foundation = parse_bool(key, v)?,
            ("foundation", "checkpoints") => {
                self.foundation_checkpoints = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(PathBuf::from)
                    .collect()
            }
            ("optim", "lr") => self.optim.lr = parse(key, v)?,
            ("optim", "backbone_lr_mult") => self.optim.backbone_lr_mult = parse(key, v)?,
            ("optim", "weight_decay") => self.optim.weight_decay = parse(key, v)?,
            ("optim", "clip") => self.optim.clip = parse(key, v)?,
            ("optim", "epochs") => self.optim.epochs = parse(key, v)?,
            ("optim", "batch_size") => self.optim.batch_size = parse(key, v)?,
            ("optim", "eval_every") => self.optim.eval_every = parse(key, v)?,
            ("loss", "cls") => self.loss.cls = parse(key, v)?,
            ("loss", "l1") => self.loss.l1 = parse(key, v)?,
            ("loss", "giou") => self.loss.giou = parse(key, v)?,
            _ => return Err(Error::config(format!("unknown setting [{section}] {key}"))),
        }
        Ok(())
    }

    /// Fully resolved settings as INI text; parsing it gives back `self`.
    pub fn to_ini(&self) -> String {
        let mut s = String::new();
        let d = &self.detector;
        let f = &self.foundation;
        let o = &self.optim;
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let rules = self
            .scene
            .cooccurrence
            .iter()
            .map(|r| format!("{}:{}:{}", CLASS_NAMES[r.a], CLASS_NAMES[r.b], r.p))
            .collect::<Vec<_>>()
            .join(",");
        let ckpts = self
            .foundation_checkpoints
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>()
            .join(",");
        let onoff = |b: bool| if b { "on" } else { "off" };
        let _ = write!(
            s,
            "[run]\nseed = {}\nworkers = {}\n\n\
             [data]\ncanvas = {}\nn_train = {}\nn_val = {}\nmin_objects = {}\nmax_objects = {}\n\
             occlusion_rate = {}\ndistractor_rate = {}\nmin_scale = {}\nmax_scale = {}\ncooccurrence = {}\n\n\
             [detector]\ninput_size = {}\nbackbone_channels = {}\nhidden_dim = {}\nqueries = {}\n\
             encoder_layers = {}\ndecoder_layers = {}\nheads = {}\npoints = {}\nffn_dim = {}\n\
             max_decoder_tokens = {}\nimage_queries = {}\nfuse_patches = {}\nself_query = {}\n\
             self_pool_all_levels = {}\nenhancers = {}\n\n\
             [foundation]\nimage_size = {}\npatch_size = {}\ndepth = {}\ndim = {}\nheads = {}\n\
             mlp_ratio = {}\nstrategy = {}\nquery_budget = {}\nallow_trainable = {}\ncheckpoints = {}\n\n\
             [optim]\nlr = {}\nbackbone_lr_mult = {}\nweight_decay = {}\nclip = {}\nepochs = {}\n\
             batch_size = {}\neval_every = {}\n\n\
             [loss]\ncls = {}\nl1 = {}\ngiou = {}\n",
            self.seed,
            self.workers,
            self.scene.canvas,
            self.n_train,
            self.n_val,
            self.scene.min_objects,
            self.scene.max_objects,
            self.scene.occlusion_rate,
            self.scene.distractor_rate,
            self.scene.min_scale,
            self.scene.max_scale,
            rules,
            d.input_size,
            join(&d.backbone_channels),
            d.hidden_dim,
            d.queries,
            d.encoder_layers,
            d.decoder_layers,
            d.heads,
            d.points,
            d.ffn_dim,
            d.max_decoder_tokens,
            self.image_queries,
            onoff(d.fuse_patches),
            onoff(d.self_query),
            onoff(d.self_pool_all_levels),
            self.enhancer_count,
            f.image_size,
            f.patch_size,
            f.depth,
            f.dim,
            f.heads,
            f.mlp_ratio,
            f.strategy,
            f.query_budget,
            onoff(self.allow_trainable_foundation),
            ckpts,
            o.lr,
            o.backbone_lr_mult,
            o.weight_decay,
            o.clip,
            o.epochs,
            o.batch_size,
            o.eval_every,
            self.loss.cls,
            self.loss.l1,
            self.loss.giou,
        );
        s
    }
}

/// Whether INI text sets `[run] seed` explicitly.
pub fn declares_seed(text: &str) -> Result<bool> {
    let ini = Ini::load_from_str(text).map_err(|e| Error::Parse {
        path: PathBuf::from("<config>"),
        line: e.line,
        msg: e.msg.to_string(),
    })?;
    Ok(ini.section(Some("run")).is_some_and(|s| s.contains_key("seed")))
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
}

pub fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected on/off, got {v:?}"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|x| parse(key, x.trim())).collect()
}

fn class_id(name: &str) -> Result<usize> {
    CLASS_NAMES
        .iter()
        .position(|c| *c == name)
        .ok_or_else(|| Error::config(format!("unknown class {name:?}")))
}

/// `a:b:p` triples separated by commas.
fn parse_rules(v: &str) -> Result<Vec<CoRule>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|r| {
            let parts: Vec<&str> = r.split(':').collect();
            if parts.len() != 3 {
                return Err(Error::config(format!("co-occurrence rule {r:?} is not a:b:p")));
            }
            Ok(CoRule {
                a: class_id(parts[0])?,
                b: class_id(parts[1])?,
                p: parse("cooccurrence", parts[2])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ini_round_trip() {
        let mut c = RunConfig::compact();
        c.seed = 42;
        c.image_queries = 5;
        c.enhancer_count = 2;
        c.detector.fuse_patches = true;
        c.foundation.strategy = QueryStrategy::Crop;
        c.foundation_checkpoints = vec!["a.fdtr".into(), "b.fdtr".into()];
        let back = RunConfig::from_ini_str(&c.to_ini()).unwrap();
        assert_eq!(back, c);
        let d = back.detector_config().unwrap();
        assert_eq!(d.enhancers.len(), 2);
        assert_eq!(d.image_query_count(), 5);
    }

    #[test]
    fn unknown_keys_and_bad_counts_are_rejected() {
        assert!(RunConfig::from_ini_str("[optim]\nlearning_rate = 1").is_err());
        let c = RunConfig::from_ini_str("[detector]\nimage_queries = 3\nenhancers = 1").unwrap();
        assert!(c.detector_config().is_err());
        let c = RunConfig::from_ini_str("[detector]\nfuse_patches = on\n").unwrap();
        assert!(c.detector_config().is_err());
    }

    #[test]
    fn preset_then_overrides() {
        let c = RunConfig::from_ini_str("[preset]\nname = compact\n[run]\nseed = 9\n").unwrap();
        assert_eq!(c.detector.hidden_dim, 32);
        assert_eq!(c.seed, 9);
    }
}
