//! Masks, neighborhood patterns and the channel index algebra.
//!
//! Channels of a connectivity cube are ordered row-major over the pattern
//! offsets sorted by `(dr, dc)`. For the square neighborhood this gives
//! `C1 = (-1,-1)` (top-left), `C4 = (0,-1)` (left) and `C5 = (0,+1)` (right).

use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Row-major boolean grid, `true` marks a salient pixel.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        ensure!(height >= 1 && width >= 1, InvalidArgument, "mask must be at least 1x1, got {height}x{width}");
        ensure!(
            data.len() == height * width,
            ShapeMismatch,
            "mask data has {} entries, expected {}x{}",
            data.len(),
            height,
            width
        );
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![false; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    /// Value at a signed position; out-of-bounds pixels read as background.
    #[inline]
    pub fn get_padded(&self, row: isize, col: isize) -> bool {
        if row < 0 || col < 0 || row as usize >= self.height || col as usize >= self.width {
            false
        } else {
            self.get(row as usize, col as usize)
        }
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn count_salient(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn salient_fraction(&self) -> f64 {
        self.count_salient() as f64 / self.data.len() as f64
    }

    pub fn hflip(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width) {
            data.extend(row.iter().rev());
        }
        Self { data, ..*self }
    }

    /// Salient pixels that have no salient neighbor under `kind`.
    pub fn isolated_pixels(&self, kind: PatternKind) -> Vec<(usize, usize)> {
        let offsets = kind.pattern().offsets();
        let mut out = Vec::new();
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c)
                    && !offsets
                        .iter()
                        .any(|o| self.get_padded(r as isize + o.dr, c as isize + o.dc))
                {
                    out.push((r, c));
                }
            }
        }
        out
    }

    /// Clears every isolated salient pixel. One pass is enough: an isolated
    /// pixel is nobody's neighbor, so removing it cannot isolate another.
    pub fn remove_isolated(&mut self, kind: PatternKind) {
        for (r, c) in self.isolated_pixels(kind) {
            self.set(r, c, false);
        }
    }
}

impl fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "BinaryMask {}x{}", self.height, self.width)?;
        for row in self.data.chunks(self.width) {
            let line: String = row.iter().map(|&v| if v { '#' } else { '.' }).collect();
            writeln!(f, "  {line}")?;
        }
        Ok(())
    }
}

/// Relative position of a neighbor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Offset {
    pub dr: isize,
    pub dc: isize,
}

impl Offset {
    pub const fn new(dr: isize, dc: isize) -> Self {
        Self { dr, dc }
    }

}

impl std::ops::Neg for Offset {
    type Output = Self;

    fn neg(self) -> Self {
        Self::new(-self.dr, -self.dc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatternKind {
    /// Diamond: city-block distance 1.
    N4,
    /// Square: chessboard distance 1.
    N8,
    /// City-block distance at most 2.
    N12,
}

impl PatternKind {
    pub const ALL: [PatternKind; 3] = [PatternKind::N4, PatternKind::N8, PatternKind::N12];

    pub fn pattern(self) -> &'static ConnectivityPattern {
        static N4: LazyLock<ConnectivityPattern> = LazyLock::new(|| ConnectivityPattern::build(PatternKind::N4));
        static N8: LazyLock<ConnectivityPattern> = LazyLock::new(|| ConnectivityPattern::build(PatternKind::N8));
        static N12: LazyLock<ConnectivityPattern> = LazyLock::new(|| ConnectivityPattern::build(PatternKind::N12));
        match self {
            PatternKind::N4 => &N4,
            PatternKind::N8 => &N8,
            PatternKind::N12 => &N12,
        }
    }

    pub fn channel_count(self) -> usize {
        self.pattern().channel_count()
    }

    /// Identifier used by the cube cache format.
    pub fn id(self) -> u8 {
        match self {
            PatternKind::N4 => 0,
            PatternKind::N8 => 1,
            PatternKind::N12 => 2,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(PatternKind::N4),
            1 => Ok(PatternKind::N8),
            2 => Ok(PatternKind::N12),
            other => Err(Error::Format(format!("unknown pattern id {other}"))),
        }
    }

    fn admits(self, o: Offset) -> bool {
        let (ar, ac) = (o.dr.abs(), o.dc.abs());
        match self {
            PatternKind::N4 => ar + ac == 1,
            PatternKind::N8 => ar.max(ac) == 1,
            PatternKind::N12 => ar + ac >= 1 && ar + ac <= 2,
        }
    }
}

impl fmt::Display for PatternKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PatternKind::N4 => "n4",
            PatternKind::N8 => "n8",
            PatternKind::N12 => "n12",
        })
    }
}

impl FromStr for PatternKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "n4" => Ok(PatternKind::N4),
            "n8" => Ok(PatternKind::N8),
            "n12" => Ok(PatternKind::N12),
            _ => Err(Error::InvalidArgument(format!("unknown connectivity pattern {s:?} (expected n4, n8 or n12)"))),
        }
    }
}

/// Ordered neighbor offsets plus the opposite and horizontal-flip channel maps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectivityPattern {
    kind: PatternKind,
    offsets: Vec<Offset>,
    opposite: Vec<usize>,
    hflip: Vec<usize>,
}

impl ConnectivityPattern {
    fn build(kind: PatternKind) -> Self {
        let mut offsets = Vec::new();
        for dr in -2..=2 {
            for dc in -2..=2 {
                let o = Offset::new(dr, dc);
                if kind.admits(o) {
                    offsets.push(o);
                }
            }
        }
        let index_of = |o: Offset| offsets.iter().position(|&p| p == o).expect("pattern is closed under negation and hflip");
        let opposite = offsets.iter().map(|o| index_of(-*o)).collect();
        let hflip = offsets.iter().map(|o| index_of(Offset::new(o.dr, -o.dc))).collect();
        Self { kind, offsets, opposite, hflip }
    }

    pub fn kind(&self) -> PatternKind {
        self.kind
    }

    pub fn offsets(&self) -> &[Offset] {
        &self.offsets
    }

    pub fn offset(&self, channel: usize) -> Offset {
        self.offsets[channel]
    }

    pub fn channel_count(&self) -> usize {
        self.offsets.len()
    }

    pub fn channel_of(&self, offset: Offset) -> Option<usize> {
        self.offsets.iter().position(|&o| o == offset)
    }

    /// Channel whose offset is the negation of `channel`'s.
    pub fn opposite_channel(&self, channel: usize) -> usize {
        self.opposite[channel]
    }

    /// Permutation `p` with `offset(p[c]) = (dr, -dc)` for `offset(c) = (dr, dc)`.
    pub fn hflip_permutation(&self) -> &[usize] {
        &self.hflip
    }
}

/// Canonical ordered offsets of a pattern.
pub fn pattern_offsets(kind: PatternKind) -> Vec<Offset> {
    kind.pattern().offsets().to_vec()
}

pub fn opposite_channel(channel: usize, kind: PatternKind) -> Result<usize> {
    let p = kind.pattern();
    ensure!(channel < p.channel_count(), InvalidArgument, "channel {channel} out of range for {kind}");
    Ok(p.opposite_channel(channel))
}

pub fn hflip_channel_permutation(kind: PatternKind) -> Vec<usize> {
    kind.pattern().hflip_permutation().to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn o(dr: isize, dc: isize) -> Offset {
        Offset::new(dr, dc)
    }

    #[test]
    fn n4_offsets() {
        assert_eq!(pattern_offsets(PatternKind::N4), vec![o(-1, 0), o(0, -1), o(0, 1), o(1, 0)]);
    }

    #[test]
    fn n8_channel_order() {
        let expected = vec![o(-1, -1), o(-1, 0), o(-1, 1), o(0, -1), o(0, 1), o(1, -1), o(1, 0), o(1, 1)];
        assert_eq!(pattern_offsets(PatternKind::N8), expected);
        // C4 is the left neighbor, C5 the right one (1-based naming).
        assert_eq!(PatternKind::N8.pattern().offset(3), o(0, -1));
        assert_eq!(PatternKind::N8.pattern().offset(4), o(0, 1));
    }

    #[test]
    fn n12_matches_enumeration() {
        let mut brute = Vec::new();
        for dr in -3isize..=3 {
            for dc in -3isize..=3 {
                let d = dr.abs() + dc.abs();
                if (1..=2).contains(&d) {
                    brute.push(o(dr, dc));
                }
            }
        }
        assert_eq!(brute.len(), 12);
        let got = pattern_offsets(PatternKind::N12);
        assert_eq!(got.len(), 12);
        let mut sorted = got.clone();
        sorted.sort();
        assert_eq!(got, sorted, "channel order must be row-major");
        for b in &brute {
            assert!(got.contains(b));
        }
    }

    #[test]
    fn opposite_examples() {
        // C5 (right) <-> C4 (left), C1 (top-left) <-> C8 (bottom-right).
        assert_eq!(opposite_channel(4, PatternKind::N8).unwrap(), 3);
        assert_eq!(opposite_channel(0, PatternKind::N8).unwrap(), 7);
        let n4 = PatternKind::N4.pattern();
        let up = n4.channel_of(o(-1, 0)).unwrap();
        assert_eq!(n4.offset(n4.opposite_channel(up)), o(1, 0));
        assert!(opposite_channel(8, PatternKind::N8).is_err());
    }

    #[test]
    fn opposite_and_hflip_exhaustive() {
        for kind in PatternKind::ALL {
            let p = kind.pattern();
            assert_eq!(p.channel_count(), kind.channel_count());
            for c in 0..p.channel_count() {
                let opp = p.opposite_channel(c);
                assert_eq!(p.offset(opp), -p.offset(c));
                assert_eq!(p.opposite_channel(opp), c);
                let h = p.hflip_permutation()[c];
                assert_eq!(p.offset(h), o(p.offset(c).dr, -p.offset(c).dc));
                assert_eq!(p.hflip_permutation()[h], c);
            }
            let mut seen = p.offsets().to_vec();
            seen.dedup();
            assert_eq!(seen.len(), p.channel_count());
            assert!(!p.offsets().contains(&o(0, 0)));
        }
    }

    #[test]
    fn hflip_n8_swaps() {
        // (C1,C3), (C4,C5), (C6,C8) swap; C2 and C7 are fixed.
        assert_eq!(hflip_channel_permutation(PatternKind::N8), vec![2, 1, 0, 4, 3, 7, 6, 5]);
        assert_eq!(hflip_channel_permutation(PatternKind::N4), vec![0, 2, 1, 3]);
    }

    #[test]
    fn n4_is_subset_of_n8_and_n12() {
        let n4 = pattern_offsets(PatternKind::N4);
        for kind in [PatternKind::N8, PatternKind::N12] {
            let other = pattern_offsets(kind);
            assert!(n4.iter().all(|x| other.contains(x)));
        }
    }

    #[test]
    fn pattern_parse() {
        assert_eq!("N8".parse::<PatternKind>().unwrap(), PatternKind::N8);
        assert!("n5".parse::<PatternKind>().is_err());
        for k in PatternKind::ALL {
            assert_eq!(PatternKind::from_id(k.id()).unwrap(), k);
        }
    }

    #[test]
    fn mask_validation_and_flip() {
        assert!(BinaryMask::new(0, 3, vec![]).is_err());
        assert!(BinaryMask::new(2, 2, vec![true; 3]).is_err());
        let m = BinaryMask::new(1, 3, vec![true, false, false]).unwrap();
        assert_eq!(m.hflip().data(), &[false, false, true]);
        assert_eq!(m.hflip().hflip(), m);
    }

    #[test]
    fn isolated_removal() {
        let mut m = BinaryMask::new(3, 3, vec![true, false, true, false, false, true, false, false, false]).unwrap();
        m.remove_isolated(PatternKind::N4);
        assert_eq!(m.data(), &[false, false, true, false, false, true, false, false, false]);
    }
}
