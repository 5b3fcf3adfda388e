use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{save_image, save_mask, Manifest, ManifestRecord, RgbImage, Sample};
use crate::error::{ensure, Error, Result};
use crate::grid::{BinaryMask, PatternKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Ring,
}

/// Salient fraction every generated mask must fall into.
pub const SALIENT_FRACTION_RANGE: (f64, f64) = (0.02, 0.6);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of shapes per image.
    pub shapes: [usize; 2],
    pub kinds: Vec<ShapeKind>,
    /// Foreground-over-background brightness offset, in [0, 1] intensity units.
    pub contrast: [f64; 2],
    /// Amplitude of per-pixel uniform background noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            count: 200,
            height: 64,
            width: 64,
            shapes: [1, 3],
            kinds: vec![ShapeKind::Rectangle, ShapeKind::Ellipse, ShapeKind::Ring],
            contrast: [0.35, 0.6],
            noise: 0.08,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.height >= 8 && self.width >= 8, InvalidArgument, "synthetic images must be at least 8x8");
        ensure!(
            self.shapes[0] >= 1 && self.shapes[0] <= self.shapes[1],
            InvalidArgument,
            "shape count range {:?} is invalid",
            self.shapes
        );
        ensure!(!self.kinds.is_empty(), InvalidArgument, "no shape kinds");
        ensure!(
            0.0 <= self.contrast[0] && self.contrast[0] <= self.contrast[1] && self.contrast[1] <= 1.0,
            InvalidArgument,
            "contrast range {:?} must be ordered within [0, 1]",
            self.contrast
        );
        ensure!((0.0..=1.0).contains(&self.noise), InvalidArgument, "noise {} outside [0, 1]", self.noise);
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

struct Shape {
    kind: ShapeKind,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    inner: f64,
}

impl Shape {
    fn contains(&self, r: usize, c: usize) -> bool {
        let dy = (r as f64 + 0.5 - self.cy) / self.ry;
        let dx = (c as f64 + 0.5 - self.cx) / self.rx;
        match self.kind {
            ShapeKind::Rectangle => dy.abs() <= 1.0 && dx.abs() <= 1.0,
            ShapeKind::Ellipse => dy * dy + dx * dx <= 1.0,
            ShapeKind::Ring => {
                let q = dy * dy + dx * dx;
                q <= 1.0 && q >= self.inner * self.inner
            }
        }
    }
}

fn random_shape(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Shape {
    let side = spec.height.min(spec.width) as f64;
    let ry = rng.random_range(0.08..0.28) * side;
    let rx = rng.random_range(0.08..0.28) * side;
    Shape {
        kind: spec.kinds[rng.random_range(0..spec.kinds.len())],
        cy: rng.random_range(ry.min(spec.height as f64 / 2.0)..=(spec.height as f64 - ry).max(spec.height as f64 / 2.0)),
        cx: rng.random_range(rx.min(spec.width as f64 / 2.0)..=(spec.width as f64 - rx).max(spec.width as f64 / 2.0)),
        ry,
        rx,
        inner: rng.random_range(0.45..0.65),
    }
}

fn draw_instances(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Vec<BinaryMask>> {
    let (h, w) = (spec.height, spec.width);
    let target = rng.random_range(spec.shapes[0]..=spec.shapes[1]);
    let mut instances: Vec<BinaryMask> = Vec::new();
    let mut occupied = BinaryMask::empty(h, w)?;
    for _ in 0..target * 20 {
        if instances.len() == target {
            break;
        }
        let shape = random_shape(spec, rng);
        let mut m = BinaryMask::from_fn(h, w, |r, c| shape.contains(r, c))?;
        m.remove_isolated(PatternKind::N4);
        if m.count_salient() < 4 {
            continue;
        }
        // keep a one-pixel gap so instances stay separate components
        let touches = (0..h).any(|r| {
            (0..w).any(|c| {
                m.get(r, c)
                    && (-1..=1).any(|dr| (-1..=1).any(|dc| occupied.get_padded(r as isize + dr, c as isize + dc)))
            })
        });
        if touches {
            continue;
        }
        for r in 0..h {
            for c in 0..w {
                if m.get(r, c) {
                    occupied.set(r, c, true);
                }
            }
        }
        instances.push(m);
    }
    Ok(instances)
}

/// Generates record `index` of `spec` in memory. Records are independent, so any
/// subset can be regenerated without producing the others.
pub fn generate_sample(spec: &SyntheticSpec, index: usize) -> Result<Sample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);

    let (lo, hi) = SALIENT_FRACTION_RANGE;
    let (instances, mask) = loop {
        let instances = draw_instances(spec, &mut rng)?;
        let mask = BinaryMask::from_fn(h, w, |r, c| instances.iter().any(|m| m.get(r, c)))?;
        let f = mask.salient_fraction();
        if !instances.is_empty() && (lo..=hi).contains(&f) {
            break (instances, mask);
        }
    };

    let bg_level: f64 = rng.random_range(0.05..0.35);
    let bg_tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
    let fg: Vec<[f64; 3]> = instances
        .iter()
        .map(|_| {
            let level = bg_level + rng.random_range(spec.contrast[0]..=spec.contrast[1]);
            std::array::from_fn(|_| (level + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0))
        })
        .collect();
    let mut data = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for c in 0..w {
            let owner = instances.iter().position(|m| m.get(r, c));
            for ch in 0..3 {
                let base = match owner {
                    Some(i) => fg[i][ch],
                    None => bg_level + bg_tint[ch],
                };
                let noisy = base + spec.noise * rng.random_range(-1.0..=1.0);
                data.push((noisy.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(Sample {
        image: RgbImage::new(h, w, data)?,
        mask,
        instances,
    })
}

/// Writes `images/`, `masks/`, `instances/<stem>/` and `manifest.csv` under `out`.
pub fn generate_synthetic(spec: &SyntheticSpec, out: impl AsRef<Path>) -> Result<Manifest> {
    spec.validate()?;
    let out = out.as_ref();
    for sub in ["images", "masks", "instances"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut manifest = Manifest::default();
    for index in 0..spec.count {
        let sample = generate_sample(spec, index)?;
        let stem = format!("{index:05}");
        let image = out.join("images").join(format!("{stem}.png"));
        let mask = out.join("masks").join(format!("{stem}.png"));
        let inst_dir = out.join("instances").join(&stem);
        std::fs::create_dir_all(&inst_dir).map_err(|e| Error::io(&inst_dir, e))?;
        save_image(&sample.image, &image)?;
        save_mask(&sample.mask, &mask)?;
        for (j, m) in sample.instances.iter().enumerate() {
            save_mask(m, inst_dir.join(format!("{j:02}.png")))?;
        }
        manifest.records.push(ManifestRecord {
            image,
            mask,
            instances: Some(inst_dir),
        });
    }
    manifest.write(out.join("manifest.csv"))?;
    Ok(manifest)
}
