//! Unsupervised training: derivatives from the raw pair, network flow,
//! Charbonnier constraint loss, backpropagation and an ADAM update.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::adam::AdamConfig;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::image_ops::spatiotemporal_derivatives;
use crate::io::read_image;
use crate::loss::{ofc_loss, ofc_loss_grad, LossConfig};
use crate::network::{EncoderDecoderNet, NetGradients};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon_adam: f64,
    /// Pairs per update; gradients are averaged over the batch.
    pub batch_size: usize,
    pub epochs: usize,
    pub charbonnier_epsilon: f64,
    /// `(height, width)` of training crops; both multiples of 16.
    pub crop_size: (usize, usize),
    pub seed: u64,
    /// Stop after this many updates even if epochs remain.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon_adam: 1e-8,
            batch_size: 8,
            epochs: 1,
            charbonnier_epsilon: 1e-3,
            crop_size: (128, 96),
            seed: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon_adam,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            epsilon: self.charbonnier_epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        self.loss().validate()?;
        let (h, w) = self.crop_size;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Config(format!(
                "crop size {h}x{w} must be positive multiples of 16"
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Anything that can hand out training pairs by index.
pub trait PairSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pair `index` cropped to `crop` at a position drawn from `rng`.
    /// `Ok(None)` means the pair is unusable and should be skipped.
    fn pair(
        &self,
        index: usize,
        crop: (usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<(Image, Image)>>;
}

fn random_crop(
    a: &Image,
    b: &Image,
    (ch, cw): (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<Option<(Image, Image)>> {
    if a.extents() != b.extents() {
        return Ok(None);
    }
    let (h, w) = a.extents();
    if h < ch || w < cw {
        return Ok(None);
    }
    let top = rng.gen_range(0..=h - ch);
    let left = rng.gen_range(0..=w - cw);
    Ok(Some((a.crop(top, left, ch, cw)?, b.crop(top, left, ch, cw)?)))
}

/// Frame pairs already held in memory.
impl PairSource for [(Image, Image)] {
    fn len(&self) -> usize {
        <[(Image, Image)]>::len(self)
    }

    fn pair(
        &self,
        index: usize,
        crop: (usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<(Image, Image)>> {
        let (a, b) = &self[index];
        random_crop(a, b, crop, rng)
    }
}

/// Consecutive-frame pairs discovered under a directory tree.
#[derive(Clone, Debug)]
pub struct FramePairDataset {
    pub root: PathBuf,
    pub pairs: Vec<(PathBuf, PathBuf)>,
    /// Files that were not recognised as frames.
    pub skipped: Vec<PathBuf>,
}

const FRAME_EXTENSIONS: [&str; 4] = ["pgm", "ppm", "pnm", "png"];

fn is_frame(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| FRAME_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Enumerates consecutive-frame pairs in `root` and in each of its
/// immediate subdirectories (one sequence per directory, frames ordered
/// lexicographically by file name).
pub fn ingest_pairs(root: impl AsRef<Path>) -> Result<FramePairDataset> {
    let root = root.as_ref();
    let list = |dir: &Path| -> Result<Vec<PathBuf>> {
        let mut entries = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
            .collect::<Result<Vec<_>>>()?;
        entries.sort();
        Ok(entries)
    };
    let top = list(root)?;
    let mut sequences = vec![root.to_path_buf()];
    sequences.extend(top.iter().filter(|p| p.is_dir()).cloned());

    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for dir in &sequences {
        let entries = if dir == root { top.clone() } else { list(dir)? };
        let mut frames = Vec::new();
        for p in entries.into_iter().filter(|p| p.is_file()) {
            if is_frame(&p) {
                frames.push(p);
            } else {
                warn!("skipping non-image file {}", p.display());
                skipped.push(p);
            }
        }
        pairs.extend(frames.windows(2).map(|w| (w[0].clone(), w[1].clone())));
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    info!(
        "found {} frame pairs in {} ({} files skipped)",
        pairs.len(),
        root.display(),
        skipped.len()
    );
    Ok(FramePairDataset {
        root: root.to_path_buf(),
        pairs,
        skipped,
    })
}

impl PairSource for FramePairDataset {
    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn pair(
        &self,
        index: usize,
        crop: (usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<(Image, Image)>> {
        let (pa, pb) = &self.pairs[index];
        let load = |p: &Path| match read_image(p) {
            Ok(img) => Some(img),
            Err(e) => {
                warn!("skipping pair with unreadable frame: {e}");
                None
            }
        };
        let (Some(a), Some(b)) = (load(pa), load(pb)) else {
            return Ok(None);
        };
        let out = random_crop(&a, &b, crop, rng)?;
        if out.is_none() {
            warn!(
                "skipping pair {} / {}: extents {:?} and {:?} cannot yield a {}x{} crop",
                pa.display(),
                pb.display(),
                a.extents(),
                b.extents(),
                crop.0,
                crop.1
            );
        }
        Ok(out)
    }
}

/// Pixel-normalised loss and parameter gradients for one pair.
pub fn pair_gradients(
    net: &EncoderDecoderNet,
    frame1: &Image,
    frame2: &Image,
    loss_cfg: &LossConfig,
) -> Result<(f64, NetGradients)> {
    let d = spatiotemporal_derivatives(frame1, frame2)?;
    let (flow, cache) = net.forward_cached(frame1, frame2)?;
    let pixels = (frame1.height() * frame1.width()) as f64;
    let loss = ofc_loss(&flow, &d, loss_cfg)? / pixels;
    let grad_flow = ofc_loss_grad(&flow, &d, loss_cfg)?;
    let mut grads = net.backward_flow(&cache, &grad_flow)?;
    grads.scale((1.0 / pixels) as f32);
    Ok((loss, grads))
}

/// One optimizer update on a batch. Returns the mean pixel-normalised loss.
///
/// Nothing is modified when the loss or a gradient is non-finite.
pub fn train_step(
    net: &mut EncoderDecoderNet,
    batch: &[(Image, Image)],
    cfg: &TrainConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let loss_cfg = cfg.loss();
    let shared: &EncoderDecoderNet = net;
    let results = batch
        .par_iter()
        .map(|(a, b)| pair_gradients(shared, a, b, &loss_cfg))
        .collect::<Vec<_>>();
    // Fixed-order reduction keeps the result independent of thread scheduling.
    let mut total = NetGradients::zeros_like(net);
    let mut loss = 0.0;
    for (i, r) in results.into_iter().enumerate() {
        let (l, g) = r?;
        if !l.is_finite() || !g.all_finite() {
            return Err(Error::NonFinite(format!(
                "batch element {i}: loss {l}, gradients finite: {}",
                g.all_finite()
            )));
        }
        loss += l;
        total.accumulate(&g)?;
    }
    let n = batch.len() as f64;
    total.scale((1.0 / n) as f32);
    net.apply_gradients(&total, &cfg.adam())?;
    Ok(loss / n)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

/// Runs `cfg.epochs` shuffled passes over `source`, calling `on_step`
/// after every update. Returns the loss trace.
pub fn train<S: PairSource + ?Sized>(
    net: &mut EncoderDecoderNet,
    source: &S,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::Config("training source has no pairs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::new();
    let mut order: Vec<usize> = (0..source.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| trace.len() >= m) {
                break 'epochs;
            }
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                if let Some(p) = source.pair(i, cfg.crop_size, &mut rng)? {
                    batch.push(p);
                }
            }
            if batch.is_empty() {
                continue;
            }
            let loss = train_step(net, &batch, cfg)?;
            let rec = StepRecord {
                step: trace.len(),
                epoch,
                loss,
            };
            on_step(&rec);
            trace.push(rec);
        }
    }
    Ok(trace)
}
