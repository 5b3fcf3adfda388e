//! Brute-force reference implementations shared by integration tests. They use
//! literal neighbourhood tables and avoid every library routine under test.
#![allow(dead_code)]

use rand::Rng;

pub const N4: &[(isize, isize)] = &[(-1, 0), (0, -1), (0, 1), (1, 0)];
pub const N8: &[(isize, isize)] = &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
pub const N12: &[(isize, isize)] = &[
    (-2, 0),
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -2),
    (0, -1),
    (0, 1),
    (0, 2),
    (1, -1),
    (1, 0),
    (1, 1),
    (2, 0),
];

pub fn table(name: &str) -> &'static [(isize, isize)] {
    match name {
        "n4" => N4,
        "n8" => N8,
        "n12" => N12,
        _ => panic!("unknown pattern {name}"),
    }
}

fn inside(h: usize, w: usize, r: isize, c: isize) -> bool {
    r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w
}

/// Entry `(r*w + c)*C + k` is 1 iff pixel and its k-th neighbour are both salient.
pub fn encode(mask: &[bool], h: usize, w: usize, offs: &[(isize, isize)]) -> Vec<f32> {
    let mut out = Vec::with_capacity(h * w * offs.len());
    for r in 0..h {
        for c in 0..w {
            for &(dr, dc) in offs {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                let on = mask[r * w + c] && inside(h, w, nr, nc) && mask[nr as usize * w + nc as usize];
                out.push(if on { 1.0 } else { 0.0 });
            }
        }
    }
    out
}

/// Threshold, mutual agreement, count ≥ k.
pub fn decode(cube: &[f32], h: usize, w: usize, offs: &[(isize, isize)], t: f64, k: usize) -> Vec<bool> {
    let ch = offs.len();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let mut n = 0;
            for (i, &(dr, dc)) in offs.iter().enumerate() {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if !inside(h, w, nr, nc) {
                    continue;
                }
                let j = offs.iter().position(|&o| o == (-dr, -dc)).unwrap();
                let a = cube[(r * w + c) * ch + i] as f64;
                let b = cube[(nr as usize * w + nc as usize) * ch + j] as f64;
                if a > t && b > t {
                    n += 1;
                }
            }
            out.push(n >= k);
        }
    }
    out
}

/// Drops salient pixels whose every neighbour (in `offs`) is background.
pub fn strip_isolated(mask: &mut [bool], h: usize, w: usize, offs: &[(isize, isize)]) {
    let copy = mask.to_vec();
    for r in 0..h {
        for c in 0..w {
            if !copy[r * w + c] {
                continue;
            }
            let lonely = offs.iter().all(|&(dr, dc)| {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                !inside(h, w, nr, nc) || !copy[nr as usize * w + nc as usize]
            });
            if lonely {
                mask[r * w + c] = false;
            }
        }
    }
}

pub fn random_bits(rng: &mut impl Rng, n: usize, p: f64) -> Vec<bool> {
    (0..n).map(|_| rng.random_bool(p)).collect()
}

/// F with β² = 0.3, written out directly.
pub fn f_measure(p: f64, r: f64) -> f64 {
    if 0.3 * p + r == 0.0 {
        0.0
    } else {
        1.3 * p * r / (0.3 * p + r)
    }
}

/// Exhaustive max-F over `grid` by decoding the cube at every threshold.
pub fn sweep_max_f(cubes: &[(Vec<f32>, Vec<bool>)], h: usize, w: usize, offs: &[(isize, isize)], grid: &[f64]) -> (f64, f64) {
    let mut best = (f64::NEG_INFINITY, 0.0);
    for &t in grid {
        let (mut sp, mut sr) = (0.0, 0.0);
        for (cube, gt) in cubes {
            let pred = decode(cube, h, w, offs, t, 1);
            let tp = pred.iter().zip(gt).filter(|(a, b)| **a && **b).count() as f64;
            let np = pred.iter().filter(|&&v| v).count() as f64;
            let ng = gt.iter().filter(|&&v| v).count() as f64;
            sp += if np == 0.0 { if ng == 0.0 { 1.0 } else { 0.0 } } else { tp / np };
            sr += if ng == 0.0 { 1.0 } else { tp / ng };
        }
        let n = cubes.len() as f64;
        let f = f_measure(sp / n, sr / n);
        if f > best.0 {
            best = (f, t);
        }
    }
    best
}
