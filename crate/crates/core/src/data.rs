//! Synthetic detection scenes, annotation files and dataset layout.
//!
//! Scenes mix whole objects with annotated parts (a robot's head, a
//! house's roof), head-like balls, occluders, textured distractors and
//! co-occurring pairs.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::matching::GroundTruth;
use crate::pnm;
use crate::tensor::Tensor;

pub const ROBOT: usize = 0;
pub const HEAD: usize = 1;
pub const HOUSE: usize = 2;
pub const ROOF: usize = 3;
pub const TREE: usize = 4;
pub const BALL: usize = 5;
pub const CLASS_NAMES: [&str; 6] = ["robot", "head", "house", "roof", "tree", "ball"];
/// Classes that are placed on their own (parts come with their whole).
pub const WHOLE_CLASSES: [usize; 4] = [ROBOT, HOUSE, TREE, BALL];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoRule {
    pub a: usize,
    pub b: usize,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub canvas: usize,
    pub classes: Vec<String>,
    pub min_objects: usize,
    pub max_objects: usize,
    pub occlusion_rate: f64,
    pub cooccurrence: Vec<CoRule>,
    /// Expected textured distractor patches per image.
    pub distractor_rate: f64,
    /// Whole-object size range as a fraction of the canvas.
    pub min_scale: f64,
    pub max_scale: f64,
    /// Vertical sky-to-ground gradient behind the scene. Without it the
    /// background carries no hint of which way is up.
    #[serde(default = "default_true")]
    pub background_gradient: bool,
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            canvas: 128,
            classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            min_objects: 1,
            max_objects: 3,
            occlusion_rate: 0.2,
            cooccurrence: vec![
                CoRule {
                    a: HOUSE,
                    b: TREE,
                    p: 0.7,
                },
                CoRule {
                    a: ROBOT,
                    b: BALL,
                    p: 0.7,
                },
            ],
            distractor_rate: 1.0,
            min_scale: 0.25,
            max_scale: 0.45,
            background_gradient: true,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if self.classes.len() < 2 {
            return Err(Error::config("a scene needs at least two classes"));
        }
        if self.classes.len() != CLASS_NAMES.len() || self.classes.iter().zip(CLASS_NAMES).any(|(a, b)| a != b) {
            return Err(Error::config(format!("class vocabulary must be {CLASS_NAMES:?}")));
        }
        if !prob(self.occlusion_rate) || self.cooccurrence.iter().any(|r| !prob(r.p)) {
            return Err(Error::config("probabilities must lie in [0, 1]"));
        }
        for r in &self.cooccurrence {
            if !WHOLE_CLASSES.contains(&r.a) || !WHOLE_CLASSES.contains(&r.b) || r.a == r.b {
                return Err(Error::config(format!("co-occurrence rule {r:?} must pair two whole classes")));
            }
        }
        if self.min_objects > self.max_objects || self.max_objects == 0 {
            return Err(Error::config("object count range is empty"));
        }
        if !(self.min_scale > 0.0 && self.min_scale <= self.max_scale && self.max_scale <= 1.0) {
            return Err(Error::config("scale range must satisfy 0 < min <= max <= 1"));
        }
        if self.canvas < 16 || self.distractor_rate < 0.0 {
            return Err(Error::config("canvas must be at least 16 pixels"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    fn id(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub id: u64,
    /// `[3, H, W]`, values on the 8-bit grid.
    pub image: Tensor,
    pub gt: GroundTruth,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed for one image; splits draw from disjoint streams.
pub fn image_seed(seed: u64, split: Split, index: usize) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ split.id()) ^ index as u64)
}

/// Pixel extent `[x0, x1) × [y0, y1)` of painted pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Extent {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl Extent {
    fn union(self, o: Extent) -> Extent {
        Extent {
            x0: self.x0.min(o.x0),
            y0: self.y0.min(o.y0),
            x1: self.x1.max(o.x1),
            y1: self.y1.max(o.y1),
        }
    }

    fn bbox(self, size: usize) -> BBox {
        let s = size as f64;
        BBox::from_xyxy(self.x0 as f64 / s, self.y0 as f64 / s, self.x1 as f64 / s, self.y1 as f64 / s)
    }
}

struct Canvas {
    size: usize,
    data: Vec<f64>,
}

type Color = [f64; 3];

impl Canvas {
    fn set(&mut self, x: usize, y: usize, c: Color) {
        let n = self.size * self.size;
        for (ch, v) in c.iter().enumerate() {
            self.data[ch * n + y * self.size + x] = *v;
        }
    }

    /// Paints pixels whose centers satisfy `inside`, within a bounding window.
    fn paint(&mut self, win: (f64, f64, f64, f64), c: Color, inside: impl Fn(f64, f64) -> bool) -> Option<Extent> {
        let s = self.size as f64;
        let lo = |v: f64| v.floor().clamp(0.0, s) as usize;
        let hi = |v: f64| v.ceil().clamp(0.0, s) as usize;
        let mut ext: Option<Extent> = None;
        for y in lo(win.1)..hi(win.3) {
            for x in lo(win.0)..hi(win.2) {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if inside(px, py) {
                    self.set(x, y, c);
                    let e = Extent {
                        x0: x,
                        y0: y,
                        x1: x + 1,
                        y1: y + 1,
                    };
                    ext = Some(ext.map_or(e, |a| a.union(e)));
                }
            }
        }
        ext
    }

    fn rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, c: Color) -> Option<Extent> {
        self.paint((x0, y0, x1, y1), c, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
    }

    fn circle(&mut self, cx: f64, cy: f64, r: f64, c: Color) -> Option<Extent> {
        self.paint((cx - r, cy - r, cx + r, cy + r), c, |x, y| {
            (x - cx).powi(2) + (y - cy).powi(2) <= r * r
        })
    }

    /// Upward triangle with apex at `(cx, y0)` and base `[cx-hw, cx+hw]` at `y1`.
    fn triangle(&mut self, cx: f64, y0: f64, hw: f64, y1: f64, c: Color) -> Option<Extent> {
        self.paint((cx - hw, y0, cx + hw, y1), c, |x, y| {
            let t = (y - y0) / (y1 - y0);
            (0.0..=1.0).contains(&t) && (x - cx).abs() <= hw * t
        })
    }
}

fn jitter<R: Rng>(rng: &mut R, base: Color, amount: f64) -> Color {
    base.map(|v| (v + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn union(exts: &[Option<Extent>]) -> Option<Extent> {
    exts.iter().flatten().copied().reduce(Extent::union)
}

/// Placed object: whole box plus annotated parts, in pixels.
struct Placed {
    label: usize,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl Placed {
    fn overlaps(&self, o: &Placed) -> bool {
        let ix = (self.x + self.w).min(o.x + o.w) - self.x.max(o.x);
        let iy = (self.y + self.h).min(o.y + o.h) - self.y.max(o.y);
        if ix <= 0.0 || iy <= 0.0 {
            return false;
        }
        ix * iy > 0.15 * (self.w * self.h).min(o.w * o.h)
    }
}

/// Aspect (w / h) and relative size of each whole class.
fn shape_of(label: usize) -> (f64, f64) {
    match label {
        ROBOT => (0.75, 1.0),
        HOUSE => (1.0, 1.0),
        TREE => (0.7, 1.0),
        BALL => (1.0, 0.35),
        _ => unreachable!("parts are not placed on their own"),
    }
}

const HEAD_PALETTE: Color = [0.95, 0.65, 0.25];

fn draw<R: Rng>(canvas: &mut Canvas, o: &Placed, rng: &mut R) -> Vec<(usize, Extent)> {
    let (x, y, w, h) = (o.x, o.y, o.w, o.h);
    let mut out = Vec::new();
    match o.label {
        ROBOT => {
            let body = jitter(rng, [0.3, 0.45, 0.75], 0.08);
            let head = jitter(rng, HEAD_PALETTE, 0.05);
            let wheel = jitter(rng, [0.12, 0.12, 0.12], 0.04);
            let r_head = 0.2 * w;
            let body_top = y + 2.0 * r_head;
            let wheel_r = 0.14 * w;
            let body_bottom = y + h - wheel_r;
            let b = canvas.rect(x + 0.1 * w, body_top, x + 0.9 * w, body_bottom, body);
            let hd = canvas.circle(x + 0.5 * w, y + r_head, r_head, head);
            let w1 = canvas.circle(x + 0.25 * w, body_bottom, wheel_r, wheel);
            let w2 = canvas.circle(x + 0.75 * w, body_bottom, wheel_r, wheel);
            if let Some(e) = union(&[b, hd, w1, w2]) {
                out.push((ROBOT, e));
            }
            if let Some(e) = hd {
                out.push((HEAD, e));
            }
        }
        HOUSE => {
            let wall = jitter(rng, [0.85, 0.75, 0.55], 0.06);
            let roof = jitter(rng, [0.6, 0.12, 0.1], 0.06);
            let door = jitter(rng, [0.3, 0.18, 0.08], 0.04);
            let roof_bottom = y + 0.4 * h;
            let r = canvas.triangle(x + 0.5 * w, y, 0.5 * w, roof_bottom, roof);
            let wl = canvas.rect(x + 0.1 * w, roof_bottom, x + 0.9 * w, y + h, wall);
            canvas.rect(x + 0.42 * w, y + 0.7 * h, x + 0.58 * w, y + h, door);
            if let Some(e) = union(&[r, wl]) {
                out.push((HOUSE, e));
            }
            if let Some(e) = r {
                out.push((ROOF, e));
            }
        }
        TREE => {
            let crown = jitter(rng, [0.15, 0.6, 0.2], 0.08);
            let trunk = jitter(rng, [0.45, 0.3, 0.15], 0.05);
            let t = canvas.rect(x + 0.4 * w, y + 0.55 * h, x + 0.6 * w, y + h, trunk);
            let c = canvas.circle(x + 0.5 * w, y + 0.35 * h, 0.35 * h.min(w / 0.7), crown);
            if let Some(e) = union(&[t, c]) {
                out.push((TREE, e));
            }
        }
        BALL => {
            let c = jitter(rng, HEAD_PALETTE, 0.05);
            if let Some(e) = canvas.circle(x + 0.5 * w, y + 0.5 * h, 0.5 * w.min(h), c) {
                out.push((BALL, e));
            }
        }
        _ => unreachable!(),
    }
    out
}

/// Background gradient, pixel noise and textured distractor patches.
fn background(spec: &SceneSpec, seed: u64) -> Canvas {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x11));
    let s = spec.canvas;
    let top: Color = [0.35, 0.35, 0.35].map(|v: f64| v + rng.random_range(-0.1..0.1));
    let mut bottom: Color = [0.55, 0.5, 0.45].map(|v: f64| v + rng.random_range(-0.1..0.1));
    if !spec.background_gradient {
        bottom = top;
    }
    let mut canvas = Canvas {
        size: s,
        data: vec![0.0; 3 * s * s],
    };
    for y in 0..s {
        let t = y as f64 / (s - 1) as f64;
        for x in 0..s {
            let c: Color = std::array::from_fn(|ch| {
                (top[ch] * (1.0 - t) + bottom[ch] * t + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0)
            });
            canvas.set(x, y, c);
        }
    }
    let mut count = spec.distractor_rate.floor() as usize;
    if rng.random::<f64>() < spec.distractor_rate.fract() {
        count += 1;
    }
    for _ in 0..count {
        let pw = rng.random_range(0.1..0.3) * s as f64;
        let ph = rng.random_range(0.1..0.3) * s as f64;
        let px = rng.random_range(0.0..s as f64 - pw);
        let py = rng.random_range(0.0..s as f64 - ph);
        let a: Color = std::array::from_fn(|_| rng.random_range(0.2..0.8));
        let b: Color = std::array::from_fn(|_| rng.random_range(0.2..0.8));
        let period = rng.random_range(2.0..6.0);
        let stripes = rng.random::<bool>();
        canvas.paint((px, py, px + pw, py + ph), a, |x, y| {
            let u = if stripes {
                ((x + y) / period).floor()
            } else {
                (x / period).floor() + (y / period).floor()
            };
            u as i64 % 2 == 0
        });
        canvas.paint((px, py, px + pw, py + ph), b, |x, y| {
            let u = if stripes {
                ((x + y) / period).floor()
            } else {
                (x / period).floor() + (y / period).floor()
            };
            u as i64 % 2 != 0
        });
    }
    canvas
}

fn to_tensor(canvas: &Canvas) -> Tensor {
    let s = canvas.size;
    let data = canvas.data.iter().map(|&v| pnm::quantize(v) as f64 / 255.0).collect();
    Tensor::new(&[3, s, s], data).expect("canvas is non-empty")
}

/// The background an image is painted on, without any object or occluder.
pub fn render_background(spec: &SceneSpec, split: Split, index: usize) -> Tensor {
    to_tensor(&background(spec, image_seed(spec.seed, split, index)))
}

fn try_place<R: Rng>(rng: &mut R, spec: &SceneSpec, label: usize, placed: &[Placed]) -> Option<Placed> {
    let s = spec.canvas as f64;
    let (aspect, rel) = shape_of(label);
    for _ in 0..30 {
        let h = rng.random_range(spec.min_scale..=spec.max_scale) * s * rel;
        let w = (h * aspect).max(4.0);
        let h = h.max(4.0);
        if w >= s || h >= s {
            continue;
        }
        let x = rng.random_range(0.0..s - w).floor();
        let y = rng.random_range(0.0..s - h).floor();
        let cand = Placed { label, x, y, w, h };
        if !placed.iter().any(|p| p.overlaps(&cand)) {
            return Some(cand);
        }
    }
    None
}

/// Renders one image. Returns the image and how many objects could not be placed.
pub fn generate_image(spec: &SceneSpec, split: Split, index: usize) -> (AnnotatedImage, usize) {
    let seed = image_seed(spec.seed, split, index);
    let mut canvas = background(spec, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x22));
    let n = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut placed: Vec<Placed> = Vec::new();
    let mut skipped = 0;
    for _ in 0..n {
        let label = WHOLE_CLASSES[rng.random_range(0..WHOLE_CLASSES.len())];
        let partner = spec
            .cooccurrence
            .iter()
            .find(|r| r.a == label)
            .and_then(|r| (rng.random::<f64>() < r.p).then_some(r.b));
        let Some(first) = try_place(&mut rng, spec, label, &placed) else {
            skipped += 1 + partner.is_some() as usize;
            continue;
        };
        if let Some(b) = partner {
            let mut with_first: Vec<&Placed> = placed.iter().collect();
            with_first.push(&first);
            let others: Vec<Placed> = with_first
                .iter()
                .map(|p| Placed { ..**p })
                .collect();
            match try_place(&mut rng, spec, b, &others) {
                Some(second) => {
                    placed.push(first);
                    placed.push(second);
                }
                // the rule must hold: drop the trigger if its partner cannot fit
                None => skipped += 2,
            }
        } else {
            placed.push(first);
        }
    }
    if skipped > 0 {
        log::debug!("image {index}: skipped {skipped} objects");
    }

    let mut gt = GroundTruth::default();
    for o in &placed {
        for (label, e) in draw(&mut canvas, o, &mut rng) {
            gt.boxes.push(e.bbox(spec.canvas));
            gt.labels.push(label);
        }
    }
    for o in &placed {
        if rng.random::<f64>() < spec.occlusion_rate {
            let grey = rng.random_range(0.25..0.75);
            let frac = rng.random_range(0.3..0.5);
            let (x0, y0, x1, y1) = match rng.random_range(0..4) {
                0 => (o.x, o.y, o.x + frac * o.w, o.y + o.h),
                1 => (o.x + (1.0 - frac) * o.w, o.y, o.x + o.w, o.y + o.h),
                2 => (o.x, o.y, o.x + o.w, o.y + frac * o.h),
                _ => (o.x, o.y + (1.0 - frac) * o.h, o.x + o.w, o.y + o.h),
            };
            canvas.rect(x0, y0, x1, y1, [grey, grey, grey * 0.95]);
        }
    }
    let image = AnnotatedImage {
        id: index as u64,
        image: to_tensor(&canvas),
        gt,
    };
    (image, skipped)
}

/// Generates `n` images of one split, optionally across `workers` threads.
pub fn generate_dataset(spec: &SceneSpec, split: Split, n: usize, workers: usize) -> Result<(Vec<AnnotatedImage>, usize)> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::config("a dataset needs at least one image"));
    }
    let workers = workers.clamp(1, n);
    let chunk = n.div_ceil(workers);
    let parts: Vec<Vec<(AnnotatedImage, usize)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                s.spawn(move || {
                    (w * chunk..((w + 1) * chunk).min(n))
                        .map(|i| generate_image(spec, split, i))
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("generator thread")).collect()
    });
    let mut images = Vec::with_capacity(n);
    let mut skipped = 0;
    for (img, s) in parts.into_iter().flatten() {
        skipped += s;
        images.push(img);
    }
    if skipped > 0 {
        log::info!("{}: skipped {skipped} objects that could not be placed", split.name());
    }
    Ok((images, skipped))
}

/// One line of an annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: u64,
    pub file: String,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<[f64; 4]>,
    pub labels: Vec<usize>,
}

impl AnnotationRecord {
    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            boxes: self.boxes.iter().map(|&b| BBox::from_array(b)).collect(),
            labels: self.labels.clone(),
        }
    }
}

pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r).map_err(|e| Error::Io(e.into()))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let r: AnnotationRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        if r.boxes.len() != r.labels.len() {
            return Err(err(format!("{} boxes but {} labels", r.boxes.len(), r.labels.len())));
        }
        out.push(r);
    }
    Ok(out)
}

pub fn image_file_name(split: Split, id: u64) -> String {
    format!("{}/{id:05}.ppm", split.name())
}

pub fn annotation_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.jsonl", split.name()))
}

/// Writes images and the annotation file of one split under `dir`.
pub fn write_split(dir: &Path, split: Split, images: &[AnnotatedImage]) -> Result<()> {
    fs::create_dir_all(dir.join(split.name()))?;
    let mut records = Vec::with_capacity(images.len());
    for img in images {
        let file = image_file_name(split, img.id);
        pnm::write_ppm(&dir.join(&file), &img.image)?;
        let (_, h, w) = crate::imaging::dims(&img.image);
        records.push(AnnotationRecord {
            image_id: img.id,
            file,
            width: w,
            height: h,
            boxes: img.gt.boxes.iter().map(|b| b.to_array()).collect(),
            labels: img.gt.labels.clone(),
        });
    }
    write_annotations(&annotation_path(dir, split), &records)
}

/// Loads one split written by [`write_split`].
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<AnnotatedImage>> {
    read_annotations(&annotation_path(dir, split))?
        .into_iter()
        .map(|r| {
            Ok(AnnotatedImage {
                id: r.image_id,
                image: pnm::read_ppm(&dir.join(&r.file))?,
                gt: r.ground_truth(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SceneSpec {
        SceneSpec {
            canvas: 64,
            seed: 3,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn same_seed_same_bits() {
        let (a, _) = generate_dataset(&spec(), Split::Train, 6, 1).unwrap();
        let (b, _) = generate_dataset(&spec(), Split::Train, 6, 3).unwrap();
        assert_eq!(a, b);
        let (c, _) = generate_dataset(&spec(), Split::Val, 6, 1).unwrap();
        assert_ne!(a[0].image, c[0].image);
    }

    #[test]
    fn boxes_are_painted_extents_without_occlusion() {
        let s = SceneSpec {
            occlusion_rate: 0.0,
            min_objects: 1,
            max_objects: 1,
            cooccurrence: Vec::new(),
            ..spec()
        };
        for i in 0..40 {
            let (img, _) = generate_image(&s, Split::Train, i);
            let bg = render_background(&s, Split::Train, i);
            let size = s.canvas;
            let mut ext: Option<(usize, usize, usize, usize)> = None;
            for y in 0..size {
                for x in 0..size {
                    let differs = (0..3).any(|c| {
                        let k = c * size * size + y * size + x;
                        img.image.data()[k] != bg.data()[k]
                    });
                    if differs {
                        ext = Some(match ext {
                            None => (x, y, x + 1, y + 1),
                            Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x + 1), d.max(y + 1)),
                        });
                    }
                }
            }
            let (x0, y0, x1, y1) = ext.expect("object drawn");
            let whole = img.gt.boxes[0].xyxy();
            let expect = [x0, y0, x1, y1].map(|v| v as f64 / size as f64);
            for k in 0..4 {
                assert!((whole[k] - expect[k]).abs() < 1e-12, "image {i}: {whole:?} vs {expect:?}");
            }
        }
    }

    #[test]
    fn annotation_round_trip_and_line_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        write_annotations(&p, &[]).unwrap();
        assert_eq!(fs::read(&p).unwrap().len(), 0);
        assert!(read_annotations(&p).unwrap().is_empty());
        let recs = vec![AnnotationRecord {
            image_id: 4,
            file: "train/00004.ppm".into(),
            width: 64,
            height: 64,
            boxes: vec![[0.1 + 0.2, 1.0 / 3.0, 0.25, 0.123456789012345]],
            labels: vec![2],
        }];
        write_annotations(&p, &recs).unwrap();
        assert_eq!(read_annotations(&p).unwrap(), recs);
        fs::write(&p, "{\"image_id\":1,\"file\":\"a\",\"width\":1,\"height\":1,\"boxes\":[],\"labels\":[]}\nnot json\n").unwrap();
        match read_annotations(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
