//! Mask <-> connectivity cube conversion.
//!
//! Cube layout is row-major, channel-minor: `index = (i * W + j) * C + c`.

use crate::error::{ensure, Error, Result};
use crate::grid::{BinaryMask, PatternKind};

/// H×W×C grid of per-neighbor connection values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityCube {
    height: usize,
    width: usize,
    pattern: PatternKind,
    values: Vec<f32>,
}

impl ConnectivityCube {
    pub fn new(height: usize, width: usize, pattern: PatternKind, values: Vec<f32>) -> Result<Self> {
        ensure!(height >= 1 && width >= 1, InvalidArgument, "cube must be at least 1x1");
        let expected = height * width * pattern.channel_count();
        ensure!(
            values.len() == expected,
            ShapeMismatch,
            "cube has {} values, expected {height}x{width}x{}",
            values.len(),
            pattern.channel_count()
        );
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("cube value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            pattern,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, pattern: PatternKind) -> Self {
        Self::filled(height, width, pattern, 0.0)
    }

    pub(crate) fn filled(height: usize, width: usize, pattern: PatternKind, v: f32) -> Self {
        Self {
            height,
            width,
            pattern,
            values: vec![v; height * width * pattern.channel_count()],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pattern(&self) -> PatternKind {
        self.pattern
    }

    pub fn channels(&self) -> usize {
        self.pattern.channel_count()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.width + col) * self.channels() + channel
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.values[self.index(row, col, channel)]
    }

    pub fn set(&mut self, row: usize, col: usize, channel: usize, v: f32) {
        let i = self.index(row, col, channel);
        self.values[i] = v;
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// In-bounds neighbor of `(row, col)` along `channel`.
    #[inline]
    pub fn neighbor(&self, row: usize, col: usize, channel: usize) -> Option<(usize, usize)> {
        let o = self.pattern.pattern().offset(channel);
        let r = row as isize + o.dr;
        let c = col as isize + o.dc;
        if r < 0 || c < 0 || r as usize >= self.height || c as usize >= self.width {
            None
        } else {
            Some((r as usize, c as usize))
        }
    }

    /// Spatially mirrors every channel slice without touching channel order.
    pub fn hflip_spatial(&self) -> Self {
        let ch = self.channels();
        let mut out = self.clone();
        for i in 0..self.height {
            for j in 0..self.width {
                let src = self.index(i, self.width - 1 - j, 0);
                let dst = self.index(i, j, 0);
                out.values[dst..dst + ch].copy_from_slice(&self.values[src..src + ch]);
            }
        }
        out
    }

    /// Reorders channels so that output channel `c` holds input channel `perm[c]`.
    pub fn permute_channels(&self, perm: &[usize]) -> Result<Self> {
        let ch = self.channels();
        ensure!(perm.len() == ch, ShapeMismatch, "permutation of length {} for {ch} channels", perm.len());
        let mut out = self.clone();
        for (dst, src) in out.values.chunks_mut(ch).zip(self.values.chunks(ch)) {
            for (c, &p) in perm.iter().enumerate() {
                dst[c] = src[p];
            }
        }
        Ok(out)
    }

    /// Channel slice `c` as a row-major H×W plane.
    pub fn channel_plane(&self, channel: usize) -> Vec<f32> {
        let ch = self.channels();
        self.values.iter().skip(channel).step_by(ch).copied().collect()
    }
}

/// Mutual-connection flags; symmetric under (pixel, channel) <-> (neighbor, opposite).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgreementMap {
    height: usize,
    width: usize,
    pattern: PatternKind,
    data: Vec<bool>,
}

impl AgreementMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pattern(&self) -> PatternKind {
        self.pattern
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> bool {
        self.data[(row * self.width + col) * self.pattern.channel_count() + channel]
    }

    /// Number of agreed connections at each pixel, row-major.
    pub fn counts(&self) -> Vec<usize> {
        self.data
            .chunks(self.pattern.channel_count())
            .map(|px| px.iter().filter(|&&v| v).count())
            .collect()
    }
}

/// Ground-truth cube: `1` where a pixel and its neighbor are both salient.
/// Out-of-bounds neighbors count as background.
pub fn encode(mask: &BinaryMask, pattern: PatternKind) -> ConnectivityCube {
    let mut cube = ConnectivityCube::zeros(mask.height(), mask.width(), pattern);
    let offsets = pattern.pattern().offsets();
    for i in 0..mask.height() {
        for j in 0..mask.width() {
            if !mask.get(i, j) {
                continue;
            }
            for (c, o) in offsets.iter().enumerate() {
                if mask.get_padded(i as isize + o.dr, j as isize + o.dc) {
                    cube.set(i, j, c, 1.0);
                }
            }
        }
    }
    cube
}

pub(crate) fn check_threshold(t: f64) -> Result<()> {
    ensure!(t > 0.0 && t < 1.0, InvalidArgument, "threshold {t} must lie strictly inside (0, 1)");
    Ok(())
}

/// Binarizes with a strict `value > t` test.
pub fn threshold_cube(probabilities: &ConnectivityCube, t: f64) -> Result<ConnectivityCube> {
    check_threshold(t)?;
    let values = probabilities
        .values
        .iter()
        .map(|&v| if f64::from(v) > t { 1.0 } else { 0.0 })
        .collect();
    Ok(ConnectivityCube { values, ..*probabilities })
}

/// A connection holds only when both endpoints predict it.
pub fn agreement(binary: &ConnectivityCube) -> Result<AgreementMap> {
    ensure!(binary.is_binary(), InvalidArgument, "agreement expects a binary cube");
    let pattern = binary.pattern.pattern();
    let mut data = vec![false; binary.values.len()];
    for i in 0..binary.height {
        for j in 0..binary.width {
            for c in 0..pattern.channel_count() {
                let idx = binary.index(i, j, c);
                if binary.values[idx] != 1.0 {
                    continue;
                }
                if let Some((ni, nj)) = binary.neighbor(i, j, c) {
                    data[idx] = binary.get(ni, nj, pattern.opposite_channel(c)) == 1.0;
                }
            }
        }
    }
    Ok(AgreementMap {
        height: binary.height,
        width: binary.width,
        pattern: binary.pattern,
        data,
    })
}

/// Threshold, enforce agreement, then mark pixels with at least `k` agreed connections.
pub fn decode(probabilities: &ConnectivityCube, t: f64, k: usize) -> Result<BinaryMask> {
    check_threshold(t)?;
    let ch = probabilities.channels();
    ensure!(k >= 1 && k <= ch, InvalidArgument, "count threshold k={k} must lie in 1..={ch}");
    let map = agreement(&threshold_cube(probabilities, t)?)?;
    let data = map.counts().into_iter().map(|n| n >= k).collect();
    BinaryMask::new(probabilities.height, probabilities.width, data)
}

/// Continuous score whose strict `> t` test reproduces `decode(cube, t, k)`.
///
/// A pair is agreed at `t` iff `min(p, p_opposite) > t`; a pixel has at least
/// `k` agreed pairs iff its k-th largest pair score exceeds `t`.
pub fn pixel_scores(probabilities: &ConnectivityCube, k: usize) -> Result<Vec<f32>> {
    let ch = probabilities.channels();
    ensure!(k >= 1 && k <= ch, InvalidArgument, "count threshold k={k} must lie in 1..={ch}");
    let pattern = probabilities.pattern.pattern();
    let mut out = Vec::with_capacity(probabilities.height * probabilities.width);
    let mut pair = vec![0.0f32; ch];
    for i in 0..probabilities.height {
        for j in 0..probabilities.width {
            for (c, slot) in pair.iter_mut().enumerate() {
                *slot = match probabilities.neighbor(i, j, c) {
                    Some((ni, nj)) => probabilities
                        .get(i, j, c)
                        .min(probabilities.get(ni, nj, pattern.opposite_channel(c))),
                    None => 0.0,
                };
            }
            pair.sort_unstable_by(|a, b| b.total_cmp(a));
            out.push(pair[k - 1]);
        }
    }
    Ok(out)
}

/// Element-wise mean with fixed left-to-right accumulation.
pub fn fuse_cubes(cubes: &[ConnectivityCube]) -> Result<ConnectivityCube> {
    let first = cubes
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot fuse an empty list of cubes".into()))?;
    for (n, c) in cubes.iter().enumerate().skip(1) {
        ensure!(
            c.height == first.height && c.width == first.width && c.pattern == first.pattern,
            ShapeMismatch,
            "cube {n} is {}x{}x{} ({}), expected {}x{}x{} ({})",
            c.height,
            c.width,
            c.channels(),
            c.pattern,
            first.height,
            first.width,
            first.channels(),
            first.pattern
        );
    }
    let n = cubes.len() as f64;
    let values = (0..first.values.len())
        .map(|idx| {
            let mut acc = 0.0f64;
            for c in cubes {
                acc += f64::from(c.values[idx]);
            }
            (acc / n) as f32
        })
        .collect();
    Ok(ConnectivityCube { values, ..*first })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mask(rng: &mut impl Rng, h: usize, w: usize, p: f64) -> BinaryMask {
        BinaryMask::from_fn(h, w, |_, _| rng.random_bool(p)).unwrap()
    }

    #[test]
    fn encode_background_is_zero() {
        let m = BinaryMask::empty(4, 4).unwrap();
        let cube = encode(&m, PatternKind::N8);
        assert_eq!(cube.values().len(), 4 * 4 * 8);
        assert!(cube.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_pair() {
        let m = BinaryMask::new(1, 2, vec![true, true]).unwrap();
        let cube = encode(&m, PatternKind::N8);
        for i in 0..1 {
            for j in 0..2 {
                for c in 0..8 {
                    let expected = (j == 0 && c == 4) || (j == 1 && c == 3);
                    assert_eq!(cube.get(i, j, c) == 1.0, expected, "({i},{j},{c})");
                }
            }
        }
    }

    #[test]
    fn encode_single_center_is_zero() {
        let m = BinaryMask::from_fn(3, 3, |r, c| r == 1 && c == 1).unwrap();
        assert!(encode(&m, PatternKind::N4).values().iter().all(|&v| v == 0.0));
        assert_eq!(decode(&encode(&m, PatternKind::N4), 0.5, 1).unwrap().count_salient(), 0);
    }

    #[test]
    fn threshold_is_strict() {
        let mut cube = ConnectivityCube::zeros(1, 1, PatternKind::N4);
        cube.set(0, 0, 0, 0.5);
        cube.set(0, 0, 1, 0.51);
        let b = threshold_cube(&cube, 0.5).unwrap();
        assert_eq!(&b.values()[..2], &[0.0, 1.0]);
        assert!(threshold_cube(&cube, 0.0).is_err());
        assert!(threshold_cube(&cube, 1.0).is_err());
        assert!(threshold_cube(&ConnectivityCube::zeros(2, 2, PatternKind::N8), 0.3)
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn agreement_requires_both_sides() {
        let mut cube = ConnectivityCube::zeros(1, 2, PatternKind::N8);
        cube.set(0, 0, 4, 1.0);
        let map = agreement(&cube).unwrap();
        assert!(!map.get(0, 0, 4) && !map.get(0, 1, 3));
        cube.set(0, 1, 3, 1.0);
        let map = agreement(&cube).unwrap();
        assert!(map.get(0, 0, 4) && map.get(0, 1, 3));
        let mut soft = cube.clone();
        soft.set(0, 0, 0, 0.3);
        assert!(agreement(&soft).is_err());
    }

    #[test]
    fn agreement_of_encoded_equals_cube() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in PatternKind::ALL {
            for _ in 0..50 {
                let m = random_mask(&mut rng, 9, 11, 0.5);
                let cube = encode(&m, kind);
                let map = agreement(&cube).unwrap();
                let as_bool: Vec<bool> = cube.values().iter().map(|&v| v == 1.0).collect();
                assert_eq!(map.data(), &as_bool[..]);
            }
        }
    }

    #[test]
    fn decode_rejects_bad_params() {
        let cube = ConnectivityCube::zeros(2, 2, PatternKind::N4);
        assert!(decode(&cube, 1.2, 1).is_err());
        assert!(decode(&cube, 0.5, 0).is_err());
        assert!(decode(&cube, 0.5, 5).is_err());
        assert_eq!(decode(&cube, 0.5, 4).unwrap().count_salient(), 0);
    }

    #[test]
    fn border_entries_of_full_mask() {
        let m = BinaryMask::from_fn(5, 6, |_, _| true).unwrap();
        for kind in PatternKind::ALL {
            let cube = encode(&m, kind);
            for i in 0..5 {
                for j in 0..6 {
                    for c in 0..kind.channel_count() {
                        let inb = cube.neighbor(i, j, c).is_some();
                        assert_eq!(cube.get(i, j, c) == 1.0, inb);
                    }
                }
            }
        }
    }

    #[test]
    fn pixel_scores_match_decode() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for kind in PatternKind::ALL {
            let ch = kind.channel_count();
            let values: Vec<f32> = (0..6 * 7 * ch).map(|_| rng.random::<f32>()).collect();
            let cube = ConnectivityCube::new(6, 7, kind, values).unwrap();
            for k in [1, 2, ch] {
                let scores = pixel_scores(&cube, k).unwrap();
                for t in [0.1, 0.35, 0.5, 0.77] {
                    let mask = decode(&cube, t, k).unwrap();
                    let from_scores: Vec<bool> = scores.iter().map(|&s| f64::from(s) > t).collect();
                    assert_eq!(mask.data(), &from_scores[..]);
                }
            }
        }
    }

    #[test]
    fn fuse_examples() {
        let ones = ConnectivityCube::filled(3, 2, PatternKind::N8, 1.0);
        let zeros = ConnectivityCube::zeros(3, 2, PatternKind::N8);
        let half = fuse_cubes(&[zeros.clone(), ones.clone()]).unwrap();
        assert!(half.values().iter().all(|&v| v == 0.5));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let values: Vec<f32> = (0..3 * 2 * 8).map(|_| rng.random::<f32>()).collect();
        let c = ConnectivityCube::new(3, 2, PatternKind::N8, values).unwrap();
        assert_eq!(fuse_cubes(&[c.clone(), c.clone(), c.clone()]).unwrap(), c);
        assert!(fuse_cubes(&[]).is_err());
        assert!(fuse_cubes(&[zeros, ConnectivityCube::zeros(3, 2, PatternKind::N4)]).is_err());
    }

    #[test]
    fn fuse_symmetric_mask_with_flipped_path() {
        let m = BinaryMask::from_fn(6, 8, |r, c| (1..5).contains(&r) && (2..6).contains(&c)).unwrap();
        assert_eq!(m.hflip(), m);
        for kind in PatternKind::ALL {
            let direct = encode(&m, kind);
            let flipped = encode(&m.hflip(), kind);
            let unflipped = flipped
                .hflip_spatial()
                .permute_channels(kind.pattern().hflip_permutation())
                .unwrap();
            assert_eq!(fuse_cubes(&[direct.clone(), unflipped]).unwrap(), direct);
        }
    }

    #[test]
    fn cube_rejects_out_of_range() {
        assert!(ConnectivityCube::new(1, 1, PatternKind::N4, vec![0.0, 1.5, 0.0, 0.0]).is_err());
        assert!(ConnectivityCube::new(1, 1, PatternKind::N4, vec![0.0; 3]).is_err());
    }
}
