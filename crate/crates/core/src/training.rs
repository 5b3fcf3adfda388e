//! Cross-entropy training with augmentation, Adam and exponential decay.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_model;
use crate::codec::encode;
use crate::dataset::{image_to_tensor, Manifest, Sample};
use crate::error::{ensure, Error, Result};
use crate::grid::BinaryMask;
use crate::metrics::{evaluate_dataset, threshold_grid, DEFAULT_GRID};
use crate::model::{ConnNet, Head, PredictorConfig};
use crate::tensor::{Graph, Tensor};
use crate::tta::{predict_once, scaled_size};

/// Mean BCE of `sigmoid(logits)` against `target` and its gradient w.r.t. the logits.
pub fn bce_loss(logits: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let z = g.leaf(logits.clone(), true);
    let loss = g.bce_with_logits(z, target)?;
    let mut grads = g.backward(loss)?;
    let dz = grads.take(z).expect("logits require grad");
    Ok((g.value(loss).item(), dz))
}

/// `1×C×H×W` training target: the encoded cube for a connectivity head, the
/// mask itself for a segmentation head.
pub fn mask_to_target(mask: &BinaryMask, head: Head) -> Tensor {
    let (h, w) = (mask.height(), mask.width());
    match head.pattern() {
        Some(pattern) => {
            let cube = encode(mask, pattern);
            let c = cube.channels();
            let v = cube.values();
            Tensor::from_fn(vec![1, c, h, w], |i| f64::from(v[(i % (h * w)) * c + i / (h * w)]))
        }
        None => Tensor::new(vec![1, 1, h, w], mask.data().iter().map(|&s| s as u8 as f64).collect())
            .expect("mask size matches"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip_prob: f64,
    pub scale_range: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            flip_prob: 0.5,
            scale_range: [0.75, 1.25],
        }
    }
}

/// One sampled augmentation. Per axis, `top`/`left` is the crop offset when the
/// rescaled image is at least the crop size and the paste offset otherwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub scale: f64,
    pub top: usize,
    pub left: usize,
}

impl AugmentDraw {
    /// No flip, no rescale, centred crop.
    pub fn centered(src: (usize, usize), crop: (usize, usize)) -> Self {
        Self {
            flip: false,
            scale: 1.0,
            top: src.0.abs_diff(crop.0) / 2,
            left: src.1.abs_diff(crop.1) / 2,
        }
    }
}

fn check_crop(src: (usize, usize), crop: (usize, usize)) -> Result<()> {
    ensure!(
        crop.0 >= 1 && crop.1 >= 1 && crop.0 <= src.0 && crop.1 <= src.1,
        InvalidArgument,
        "crop {}x{} is larger than the {}x{} image",
        crop.0,
        crop.1,
        src.0,
        src.1
    );
    Ok(())
}

pub fn draw_augment(cfg: &AugmentConfig, src: (usize, usize), crop: (usize, usize), rng: &mut impl Rng) -> Result<AugmentDraw> {
    check_crop(src, crop)?;
    let [lo, hi] = cfg.scale_range;
    ensure!(0.0 < lo && lo <= hi, InvalidArgument, "scale range {:?} is invalid", cfg.scale_range);
    ensure!((0.0..=1.0).contains(&cfg.flip_prob), InvalidArgument, "flip probability {}", cfg.flip_prob);
    let flip = rng.random_bool(cfg.flip_prob);
    let scale = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let (sh, sw) = (scaled_size(src.0, scale), scaled_size(src.1, scale));
    let top = rng.random_range(0..=sh.abs_diff(crop.0));
    let left = rng.random_range(0..=sw.abs_diff(crop.1));
    Ok(AugmentDraw { flip, scale, top, left })
}

/// Nearest-neighbour source index for output `i` when resizing `n` → `m`.
fn nearest(i: usize, n: usize, m: usize) -> usize {
    (((i as f64 + 0.5) * n as f64 / m as f64) as usize).min(n - 1)
}

/// Applies `draw` to a `1×3×H×W` image (bilinear) and its mask (nearest).
/// Padding uses the per-channel image mean and background.
pub fn apply_augment(image: &Tensor, mask: &BinaryMask, draw: &AugmentDraw, crop: (usize, usize)) -> Result<(Tensor, BinaryMask)> {
    let s = image.shape();
    ensure!(s.len() == 4 && s[0] == 1 && s[1] == 3, ShapeMismatch, "expected a 1×3×H×W image, got {s:?}");
    let src = (s[2], s[3]);
    ensure!(
        src == (mask.height(), mask.width()),
        ShapeMismatch,
        "image is {}x{}, mask is {}x{}",
        src.0,
        src.1,
        mask.height(),
        mask.width()
    );
    check_crop(src, crop)?;
    let (img, m) = if draw.flip { (image.hflip(), mask.hflip()) } else { (image.clone(), mask.clone()) };
    let (sh, sw) = (scaled_size(src.0, draw.scale), scaled_size(src.1, draw.scale));
    let img = img.resize_bilinear(sh, sw)?;
    let m = BinaryMask::from_fn(sh, sw, |r, c| m.get(nearest(r, src.0, sh), nearest(c, src.1, sw)))?;

    // maps an output coordinate to a scaled-image coordinate, if any
    let place = |o: usize, off: usize, scaled: usize, out: usize| -> Option<usize> {
        if scaled >= out {
            Some(o + off)
        } else {
            o.checked_sub(off).filter(|&v| v < scaled)
        }
    };
    let (ch, cw) = crop;
    let plane = sh * sw;
    let mean: Vec<f64> = (0..3)
        .map(|c| img.data()[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64)
        .collect();
    let mut out = vec![0.0; 3 * ch * cw];
    let mut out_mask = BinaryMask::empty(ch, cw)?;
    for r in 0..ch {
        let sr = place(r, draw.top, sh, ch);
        for c in 0..cw {
            let sc = place(c, draw.left, sw, cw);
            match (sr, sc) {
                (Some(sr), Some(sc)) => {
                    for k in 0..3 {
                        out[k * ch * cw + r * cw + c] = img.data()[k * plane + sr * sw + sc];
                    }
                    out_mask.set(r, c, m.get(sr, sc));
                }
                _ => {
                    for k in 0..3 {
                        out[k * ch * cw + r * cw + c] = mean[k];
                    }
                }
            }
        }
    }
    Ok((Tensor::new(vec![1, 3, ch, cw], out)?, out_mask))
}

pub fn augment(
    image: &Tensor,
    mask: &BinaryMask,
    cfg: &AugmentConfig,
    crop: (usize, usize),
    rng: &mut impl Rng,
) -> Result<(Tensor, BinaryMask)> {
    let src = (mask.height(), mask.width());
    let draw = if cfg.enabled {
        draw_augment(cfg, src, crop, rng)?
    } else {
        check_crop(src, crop)?;
        AugmentDraw::centered(src, crop)
    };
    apply_augment(image, mask, &draw, crop)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments, one slot per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, shapes: &[usize]) -> Self {
        Self {
            cfg,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter whose `active` flag is set; inactive slots keep
    /// their moments untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], active: &[bool], lr: f64) -> Result<()> {
        ensure!(
            params.len() == self.m.len() && grads.len() == self.m.len() && active.len() == self.m.len(),
            ShapeMismatch,
            "optimizer tracks {} tensors, got {} params / {} grads",
            self.m.len(),
            params.len(),
            grads.len()
        );
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            ensure!(
                p.len() == self.m[i].len() && g.len() == self.m[i].len(),
                ShapeMismatch,
                "tensor {i}: state holds {} values, param {}, grad {}",
                self.m[i].len(),
                p.len(),
                g.len()
            );
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter tensor {i}")));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if !active[i] {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayKind {
    Exponential,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    #[serde(rename = "final")]
    pub final_lr: f64,
    pub kind: DecayKind,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 1e-3,
            final_lr: 1e-5,
            kind: DecayKind::Exponential,
        }
    }
}

impl LrSchedule {
    /// Learning rate at zero-based `step` of `total`; the last step uses `final`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.kind {
            DecayKind::Constant => self.initial,
            DecayKind::Exponential if total <= 1 => self.initial,
            DecayKind::Exponential => {
                let frac = step.min(total - 1) as f64 / (total - 1) as f64;
                self.initial * (self.final_lr / self.initial).powf(frac)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stops early after this many optimizer steps.
    pub max_steps: Option<usize>,
    pub lr: LrSchedule,
    pub adam: AdamConfig,
    pub augment: AugmentConfig,
    /// Trailing fraction of the manifest held out for validation.
    pub val_fraction: f64,
    /// Validate every this many steps (and after the last step); 0 disables.
    pub val_every: usize,
    /// Backbone weights stay fixed for this many initial steps.
    pub freeze_backbone_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            batch_size: 8,
            max_steps: None,
            lr: LrSchedule::default(),
            adam: AdamConfig::default(),
            augment: AugmentConfig::default(),
            val_fraction: 0.1,
            val_every: 100,
            freeze_backbone_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1, InvalidArgument, "epochs must be at least 1");
        ensure!(self.batch_size >= 1, InvalidArgument, "batch size must be at least 1");
        ensure!(
            (0.0..1.0).contains(&self.val_fraction),
            InvalidArgument,
            "validation fraction {} must lie in [0, 1)",
            self.val_fraction
        );
        ensure!(
            self.lr.initial > 0.0 && self.lr.final_lr > 0.0,
            InvalidArgument,
            "learning rates must be positive"
        );
        Ok(())
    }

    pub fn total_steps(&self, train_len: usize) -> usize {
        let per_epoch = train_len.div_ceil(self.batch_size);
        let total = per_epoch * self.epochs;
        self.max_steps.map_or(total, |m| m.min(total))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub val_max_f: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps: usize,
    pub log: Vec<LogRow>,
    pub best_val_max_f: Option<f64>,
    pub best_step: Option<usize>,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.log.last().map_or(f64::NAN, |r| r.loss)
    }
}

/// Single-pass validation max-F (dataset-mean P/R, 256-point grid).
pub fn validation_max_f(model: &ConnNet, samples: &[Sample]) -> Result<f64> {
    let items = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let pred = predict_once(model, &image_to_tensor(&s.image))?;
            Ok((i.to_string(), pred.score_map(), s.mask.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(evaluate_dataset(&items, &threshold_grid(DEFAULT_GRID)?)?.max_f)
}

struct CsvLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl CsvLog {
    fn create(path: PathBuf) -> Result<Self> {
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut log = Self {
            out: BufWriter::new(file),
            path,
        };
        log.line("step,loss,val_maxF")?;
        Ok(log)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Trains `model` in place on `train`, validating on `val`. With `out_dir`, the
/// CSV log, `best.cnw1` and `last.cnw1` (plus config sidecars) are written there.
pub fn train_model(
    model: &mut ConnNet,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    train_model_with(model, train, val, cfg, out_dir, &mut |_| {})
}

/// [`train_model`] with a callback after every optimizer step.
pub fn train_model_with(
    model: &mut ConnNet,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    on_step: &mut dyn FnMut(&LogRow),
) -> Result<TrainReport> {
    cfg.validate()?;
    ensure!(!train.is_empty(), InvalidArgument, "training set is empty");
    let head = model.config().head;
    let [ch, cw] = model.config().input_size;
    let total = cfg.total_steps(train.len());
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let sizes: Vec<usize> = model.named_params().iter().map(|(_, t)| t.len()).collect();
    let mut adam = Adam::new(cfg.adam.clone(), &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let images: Vec<Tensor> = train.iter().map(|s| image_to_tensor(&s.image)).collect();

    let mut csv = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            Some(CsvLog::create(d.join("train_log.csv"))?)
        }
        None => None,
    };
    let mut report = TrainReport {
        steps: 0,
        log: Vec::with_capacity(total),
        best_val_max_f: None,
        best_step: None,
        best_checkpoint: None,
        last_checkpoint: None,
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if step >= total {
                break 'epochs;
            }
            let mut xs = Vec::with_capacity(batch.len() * 3 * ch * cw);
            let mut ys = Vec::with_capacity(batch.len() * head.out_channels() * ch * cw);
            for &i in batch {
                let (x, m) = augment(&images[i], &train[i].mask, &cfg.augment, (ch, cw), &mut rng)?;
                xs.extend(x.into_data());
                ys.extend(mask_to_target(&m, head).into_data());
            }
            let n = batch.len();
            let x = Tensor::new(vec![n, 3, ch, cw], xs)?;
            let y = Tensor::new(vec![n, head.out_channels(), ch, cw], ys)?;

            let mut g = Graph::new();
            let xi = g.constant(x);
            let bound = model.bind(&mut g, true);
            let logits = model.forward(&mut g, xi, &bound)?;
            let loss_node = g.bce_with_logits(logits, &y)?;
            let loss = g.value(loss_node).item();
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training diverged at step {step}: loss {loss}")));
            }
            let mut grads = g.backward(loss_node)?;
            let grads: Vec<Tensor> = bound
                .params()
                .iter()
                .zip(&sizes)
                .map(|(&id, &len)| grads.take(id).unwrap_or_else(|| Tensor::zeros(vec![len])))
                .collect();
            let frozen = step < cfg.freeze_backbone_steps;
            let active: Vec<bool> = names.iter().map(|n| !(frozen && ConnNet::is_backbone_param(n))).collect();
            adam.step(&mut model.params_mut(), &grads, &active, cfg.lr.lr_at(step, total))?;
            step += 1;

            let validate = !val.is_empty() && cfg.val_every > 0 && (step % cfg.val_every == 0 || step == total);
            let val_max_f = if validate { Some(validation_max_f(model, val)?) } else { None };
            if let Some(f) = val_max_f {
                if report.best_val_max_f.is_none_or(|b| f > b) {
                    report.best_val_max_f = Some(f);
                    report.best_step = Some(step);
                    if let Some(d) = out_dir {
                        let p = d.join("best.cnw1");
                        save_model(model, &p)?;
                        report.best_checkpoint = Some(p);
                    }
                }
            }
            if let Some(csv) = csv.as_mut() {
                let vf = val_max_f.map_or(String::new(), |f| format!("{f:.6}"));
                csv.line(&format!("{step},{loss:.8},{vf}"))?;
            }
            let row = LogRow { step, loss, val_max_f };
            on_step(&row);
            report.log.push(row);
        }
    }
    report.steps = step;
    if let Some(d) = out_dir {
        let p = d.join("last.cnw1");
        save_model(model, &p)?;
        if report.best_checkpoint.is_none() {
            let best = d.join("best.cnw1");
            save_model(model, &best)?;
            report.best_checkpoint = Some(best);
        }
        report.last_checkpoint = Some(p);
    }
    Ok(report)
}

/// Splits `samples` into (train, validation) by holding out the trailing fraction.
pub fn split_validation(samples: Vec<Sample>, val_fraction: f64) -> (Vec<Sample>, Vec<Sample>) {
    let n_val = ((samples.len() as f64) * val_fraction).round() as usize;
    let n_val = n_val.min(samples.len().saturating_sub(1));
    let mut train = samples;
    let val = train.split_off(train.len() - n_val);
    (train, val)
}

/// Loads a manifest, holds out the validation tail and trains a fresh model.
pub fn train(
    manifest: &Manifest,
    config: &PredictorConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
    on_step: &mut dyn FnMut(&LogRow),
) -> Result<(ConnNet, TrainReport)> {
    let samples = manifest.load_all()?;
    let (train, val) = split_validation(samples, cfg.val_fraction);
    let mut model = ConnNet::new(config.clone(), cfg.seed)?;
    let report = train_model_with(&mut model, &train, &val, cfg, Some(out_dir), on_step)?;
    Ok((model, report))
}
