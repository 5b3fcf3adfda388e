//! Multi-scale, flip-augmented test-time fusion.

use serde::{Deserialize, Serialize};

use crate::codec::{check_threshold, decode, fuse_cubes, ConnectivityCube};
use crate::error::{ensure, Result};
use crate::grid::{BinaryMask, PatternKind};
use crate::metrics::ScoreMap;
use crate::model::{ConnNet, Head};
use crate::tensor::{sigmoid, Tensor};

pub const DEFAULT_SCALES: [f64; 5] = [0.5, 0.75, 1.0, 1.25, 1.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionPlan {
    pub scales: Vec<f64>,
    pub use_flip: bool,
    pub t: f64,
    pub k: usize,
}

impl Default for FusionPlan {
    fn default() -> Self {
        Self {
            scales: DEFAULT_SCALES.to_vec(),
            use_flip: true,
            t: 0.5,
            k: 1,
        }
    }
}

impl FusionPlan {
    /// One prediction at the original size.
    pub fn single() -> Self {
        Self {
            scales: vec![1.0],
            use_flip: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.scales.is_empty(), InvalidArgument, "fusion plan needs at least one scale");
        ensure!(
            self.scales.iter().all(|s| s.is_finite() && *s > 0.0),
            InvalidArgument,
            "fusion scales must be positive, got {:?}",
            self.scales
        );
        check_threshold(self.t)?;
        ensure!(self.k >= 1, InvalidArgument, "count threshold k must be at least 1");
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }

    /// Scales in ascending order, the canonical averaging order.
    pub fn sorted_scales(&self) -> Vec<f64> {
        let mut s = self.scales.clone();
        s.sort_by(f64::total_cmp);
        s
    }

    pub fn prediction_count(&self) -> usize {
        self.scales.len() * if self.use_flip { 2 } else { 1 }
    }
}

/// Rounded, at least 1.
pub fn scaled_size(size: usize, scale: f64) -> usize {
    ((size as f64 * scale).round() as usize).max(1)
}

/// Undoes a horizontal flip of the input: mirrors every channel plane and
/// relabels channels so left/right neighbours swap back.
pub fn unflip_cube(cube: &ConnectivityCube) -> ConnectivityCube {
    cube.hflip_spatial()
        .permute_channels(cube.pattern().pattern().hflip_permutation())
        .expect("pattern permutation matches its own cube")
}

/// Anything that maps an `N×3×H×W` image to `N×C×H×W` probabilities.
pub trait Predictor {
    fn head(&self) -> Head;
    fn probabilities(&self, image: &Tensor) -> Result<Tensor>;
}

impl Predictor for ConnNet {
    fn head(&self) -> Head {
        self.config().head
    }

    fn probabilities(&self, image: &Tensor) -> Result<Tensor> {
        let logits = self.predict(image)?;
        let shape = logits.shape().to_vec();
        Tensor::new(shape, logits.into_data().into_iter().map(sigmoid).collect())
    }
}

/// Converts `1×C×H×W` probabilities into a cube (pixel-major channel layout).
pub fn probabilities_to_cube(probs: &Tensor, pattern: PatternKind) -> Result<ConnectivityCube> {
    let s = probs.shape();
    let c = pattern.channel_count();
    ensure!(
        s.len() == 4 && s[0] == 1 && s[1] == c,
        ShapeMismatch,
        "expected 1×{c}×H×W probabilities for {pattern}, got {s:?}"
    );
    let (h, w) = (s[2], s[3]);
    let d = probs.data();
    let mut values = vec![0.0f32; h * w * c];
    for ch in 0..c {
        for p in 0..h * w {
            values[p * c + ch] = (d[ch * h * w + p] as f32).clamp(0.0, 1.0);
        }
    }
    ConnectivityCube::new(h, w, pattern, values)
}

/// Fused output before binarization.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Connectivity(ConnectivityCube),
    Saliency(ScoreMap),
}

impl Prediction {
    pub fn to_mask(&self, t: f64, k: usize) -> Result<BinaryMask> {
        match self {
            Prediction::Connectivity(cube) => decode(cube, t, k),
            Prediction::Saliency(map) => map.binarize(t),
        }
    }

    pub fn score_map(&self) -> ScoreMap {
        match self {
            Prediction::Connectivity(cube) => ScoreMap::connectivity(cube),
            Prediction::Saliency(map) => map.clone(),
        }
    }
}

fn to_prediction(probs: &Tensor, head: Head) -> Result<Prediction> {
    match head.pattern() {
        Some(pattern) => Ok(Prediction::Connectivity(probabilities_to_cube(probs, pattern)?)),
        None => {
            let s = probs.shape();
            ensure!(
                s.len() == 4 && s[0] == 1 && s[1] == 1,
                ShapeMismatch,
                "expected 1×1×H×W probabilities, got {s:?}"
            );
            let values = probs.data().iter().map(|&v| (v as f32).clamp(0.0, 1.0)).collect();
            Ok(Prediction::Saliency(ScoreMap::saliency(s[2], s[3], values)?))
        }
    }
}

/// Single forward pass at the original size.
pub fn predict_once(model: &impl Predictor, image: &Tensor) -> Result<Prediction> {
    to_prediction(&model.probabilities(image)?, model.head())
}

/// Averages predictions over every plan scale, original before flipped, with
/// scales ascending, after mapping each back to the input geometry.
pub fn fused_prediction(model: &impl Predictor, image: &Tensor, plan: &FusionPlan) -> Result<Prediction> {
    plan.validate()?;
    let s = image.shape();
    ensure!(s.len() == 4 && s[0] == 1, ShapeMismatch, "expected a 1×3×H×W image, got {s:?}");
    let (h, w) = (s[2], s[3]);
    let head = model.head();
    let mut parts = Vec::with_capacity(plan.prediction_count());
    for scale in plan.sorted_scales() {
        let scaled = image.resize_bilinear(scaled_size(h, scale), scaled_size(w, scale))?;
        let flips: &[bool] = if plan.use_flip { &[false, true] } else { &[false] };
        for &flip in flips {
            let input = if flip { scaled.hflip() } else { scaled.clone() };
            let mut probs = model.probabilities(&input)?.resize_bilinear(h, w)?;
            if flip && head.pattern().is_none() {
                probs = probs.hflip();
            }
            let mut p = to_prediction(&probs, head)?;
            if let (true, Prediction::Connectivity(cube)) = (flip, &p) {
                p = Prediction::Connectivity(unflip_cube(cube));
            }
            parts.push(p);
        }
    }
    match head.pattern() {
        Some(_) => {
            let cubes: Vec<ConnectivityCube> = parts
                .into_iter()
                .map(|p| match p {
                    Prediction::Connectivity(c) => c,
                    Prediction::Saliency(_) => unreachable!("connectivity head yields cubes"),
                })
                .collect();
            Ok(Prediction::Connectivity(fuse_cubes(&cubes)?))
        }
        None => {
            let n = parts.len() as f64;
            let maps: Vec<ScoreMap> = parts.iter().map(Prediction::score_map).collect();
            let values = (0..h * w)
                .map(|i| (maps.iter().map(|m| f64::from(m.scores()[i])).sum::<f64>() / n) as f32)
                .collect();
            Ok(Prediction::Saliency(ScoreMap::saliency(h, w, values)?))
        }
    }
}

/// Fused prediction decoded once with the plan's `t` and `k`.
pub fn fused_predict(model: &impl Predictor, image: &Tensor, plan: &FusionPlan) -> Result<BinaryMask> {
    fused_prediction(model, image, plan)?.to_mask(plan.t, plan.k)
}
