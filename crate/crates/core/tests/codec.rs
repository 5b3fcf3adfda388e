mod common;

use connseg::codec::{decode, encode, fuse_cubes, ConnectivityCube};
use connseg::grid::{hflip_channel_permutation, BinaryMask, PatternKind};
use connseg::tta::unflip_cube;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn name(kind: PatternKind) -> &'static str {
    match kind {
        PatternKind::N4 => "n4",
        PatternKind::N8 => "n8",
        PatternKind::N12 => "n12",
    }
}

fn kind_strategy() -> impl Strategy<Value = PatternKind> {
    prop_oneof![Just(PatternKind::N4), Just(PatternKind::N8), Just(PatternKind::N12)]
}

fn mask_strategy() -> impl Strategy<Value = BinaryMask> {
    (1usize..14, 1usize..14)
        .prop_flat_map(|(h, w)| (Just(h), Just(w), proptest::collection::vec(any::<bool>(), h * w)))
        .prop_map(|(h, w, d)| BinaryMask::new(h, w, d).unwrap())
}

fn soft_cube_strategy() -> impl Strategy<Value = ConnectivityCube> {
    (1usize..8, 1usize..8, kind_strategy())
        .prop_flat_map(|(h, w, k)| {
            (
                Just(h),
                Just(w),
                Just(k),
                proptest::collection::vec(0.0f32..=1.0, h * w * k.channel_count()),
            )
        })
        .prop_map(|(h, w, k, v)| ConnectivityCube::new(h, w, k, v).unwrap())
}

proptest! {
    #[test]
    fn encoded_cubes_are_symmetric(m in mask_strategy(), kind in kind_strategy()) {
        let cube = encode(&m, kind);
        let pat = kind.pattern();
        for r in 0..m.height() {
            for c in 0..m.width() {
                for ch in 0..kind.channel_count() {
                    if let Some((nr, nc)) = cube.neighbor(r, c, ch) {
                        prop_assert_eq!(cube.get(r, c, ch), cube.get(nr, nc, pat.opposite_channel(ch)));
                    }
                }
            }
        }
    }

    #[test]
    fn roundtrip_without_isolated_pixels(mut m in mask_strategy(), kind in kind_strategy()) {
        m.remove_isolated(kind);
        prop_assert_eq!(decode(&encode(&m, kind), 0.5, 1).unwrap(), m);
    }

    #[test]
    fn encode_matches_oracle(m in mask_strategy(), kind in kind_strategy()) {
        let oracle = common::encode(m.data(), m.height(), m.width(), common::table(name(kind)));
        let cube = encode(&m, kind);
        prop_assert_eq!(cube.values(), &oracle[..]);
    }

    #[test]
    fn decode_matches_oracle(cube in soft_cube_strategy(), t in 0.01f64..0.99, k in 1usize..5) {
        let k = k.min(cube.channels());
        let oracle = common::decode(cube.values(), cube.height(), cube.width(), common::table(name(cube.pattern())), t, k);
        let mask = decode(&cube, t, k).unwrap();
        prop_assert_eq!(mask.data(), &oracle[..]);
    }

    #[test]
    fn decode_is_monotone(cube in soft_cube_strategy(), a in 0.01f64..0.99, b in 0.01f64..0.99) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let big = decode(&cube, lo, 1).unwrap();
        let small = decode(&cube, hi, 1).unwrap();
        for (s, b) in small.data().iter().zip(big.data()) {
            prop_assert!(!s || *b);
        }
        let k1 = decode(&cube, lo, 1).unwrap();
        let k2 = decode(&cube, lo, 2.min(cube.channels())).unwrap();
        for (s, b) in k2.data().iter().zip(k1.data()) {
            prop_assert!(!s || *b);
        }
    }

    #[test]
    fn flip_commutes_with_encode(m in mask_strategy(), kind in kind_strategy()) {
        let lhs = encode(&m.hflip(), kind);
        let rhs = encode(&m, kind).hflip_spatial().permute_channels(&hflip_channel_permutation(kind)).unwrap();
        prop_assert_eq!(&lhs, &rhs);
        prop_assert_eq!(unflip_cube(&lhs), encode(&m, kind));
    }

    #[test]
    fn fusion_stays_in_bounds(a in soft_cube_strategy(), seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = ConnectivityCube::new(
            a.height(), a.width(), a.pattern(),
            (0..a.values().len()).map(|_| rng.random::<f32>()).collect(),
        ).unwrap();
        let f = fuse_cubes(&[a.clone(), b.clone()]).unwrap();
        let g = fuse_cubes(&[b, a]).unwrap();
        for (x, y) in f.values().iter().zip(g.values()) {
            prop_assert!((0.0..=1.0).contains(x));
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }
}

#[test]
fn exhaustive_four_by_four_n4() {
    let offs = common::N4;
    for bits in 0u32..1 << 16 {
        let data: Vec<bool> = (0..16).map(|i| bits >> i & 1 == 1).collect();
        let m = BinaryMask::new(4, 4, data.clone()).unwrap();
        let cube = encode(&m, PatternKind::N4);
        let oracle = common::encode(&data, 4, 4, offs);
        assert_eq!(cube.values(), &oracle[..], "mask {bits:#06x}");
        let d = decode(&cube, 0.5, 1).unwrap();
        assert_eq!(d.data(), &common::decode(&oracle, 4, 4, offs, 0.5, 1)[..], "mask {bits:#06x}");
    }
}
