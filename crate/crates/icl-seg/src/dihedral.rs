//! The 8-element group of axis-aligned transforms (flips, 90-degree
//! rotations, transposes) acting on the trailing two axes of a grid.
//!
//! Every transform is a pure index permutation: values are moved, never
//! interpolated, so the same element applies bit-exactly to images, label
//! maps, and feature maps. Rotations are counterclockwise; this convention
//! is fixed here and used everywhere else in the crate.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use ndarray::{Array, ArrayBase, Axis, Data, Dimension};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One element of the dihedral group of order 8.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformId {
    Identity,
    /// 90 degrees counterclockwise.
    Rot90,
    Rot180,
    /// 270 degrees counterclockwise (90 clockwise).
    Rot270,
    /// Mirror across the vertical axis (columns reversed).
    HFlip,
    /// Mirror across the horizontal axis (rows reversed).
    VFlip,
    /// Mirror across the main diagonal.
    Transpose,
    /// Mirror across the anti-diagonal.
    AntiTranspose,
}

/// All 8 elements, in a fixed order.
pub const ALL_TRANSFORMS: [TransformId; 8] = [
    TransformId::Identity,
    TransformId::Rot90,
    TransformId::Rot180,
    TransformId::Rot270,
    TransformId::HFlip,
    TransformId::VFlip,
    TransformId::Transpose,
    TransformId::AntiTranspose,
];

impl TransformId {
    /// Decomposition as (swap trailing axes, then reverse rows, then reverse
    /// columns). The 8 combinations enumerate the whole group.
    fn decompose(self) -> (bool, bool, bool) {
        match self {
            TransformId::Identity => (false, false, false),
            TransformId::VFlip => (false, true, false),
            TransformId::HFlip => (false, false, true),
            TransformId::Rot180 => (false, true, true),
            TransformId::Transpose => (true, false, false),
            TransformId::Rot90 => (true, true, false),
            TransformId::Rot270 => (true, false, true),
            TransformId::AntiTranspose => (true, true, true),
        }
    }

    /// Whether the output grid has its trailing dimensions swapped.
    pub fn swaps_dims(self) -> bool {
        self.decompose().0
    }

    /// Index of the element in [`ALL_TRANSFORMS`].
    pub fn index(self) -> usize {
        ALL_TRANSFORMS.iter().position(|&t| t == self).unwrap()
    }
}

impl fmt::Display for TransformId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            TransformId::Identity => "identity",
            TransformId::Rot90 => "rot90",
            TransformId::Rot180 => "rot180",
            TransformId::Rot270 => "rot270",
            TransformId::HFlip => "hflip",
            TransformId::VFlip => "vflip",
            TransformId::Transpose => "transpose",
            TransformId::AntiTranspose => "antitranspose",
        };
        f.write_str(name)
    }
}

impl FromStr for TransformId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(TransformId::Identity),
            "rot90" => Ok(TransformId::Rot90),
            "rot180" => Ok(TransformId::Rot180),
            "rot270" => Ok(TransformId::Rot270),
            "hflip" => Ok(TransformId::HFlip),
            "vflip" => Ok(TransformId::VFlip),
            "transpose" => Ok(TransformId::Transpose),
            "antitranspose" | "anti-transpose" => Ok(TransformId::AntiTranspose),
            other => Err(Error::invalid(format!("unknown transform name: {other:?}"))),
        }
    }
}

/// Apply `t` to the trailing two axes of `x`. Leading axes (batch, channel)
/// pass through untouched.
///
/// The output is a pure permutation of the input values; for elements that
/// swap the axes (odd rotations, transposes) the trailing dimensions swap
/// accordingly. Grids with an empty trailing axis are rejected.
pub fn apply_transform<A, S, D>(t: TransformId, x: &ArrayBase<S, D>) -> Result<Array<A, D>>
where
    A: Clone,
    S: Data<Elem = A>,
    D: Dimension,
{
    let nd = x.ndim();
    if nd < 2 {
        return Err(Error::shape(format!(
            "transform needs at least 2 spatial dimensions, got {nd}"
        )));
    }
    let (h, w) = (x.shape()[nd - 2], x.shape()[nd - 1]);
    if h == 0 || w == 0 {
        return Err(Error::shape(format!("zero-sized grid {h}x{w}")));
    }

    let (swap, flip_rows, flip_cols) = t.decompose();
    let mut view = x.view().into_dyn();
    if swap {
        view.swap_axes(nd - 2, nd - 1);
    }
    if flip_rows {
        view.invert_axis(Axis(nd - 2));
    }
    if flip_cols {
        view.invert_axis(Axis(nd - 1));
    }
    // to_owned materializes the permuted view in standard layout.
    let owned = view.to_owned();
    Ok(owned
        .into_dimensionality::<D>()
        .expect("transform preserves the number of axes"))
}

/// The element `u` with `apply(u, apply(t, x)) == x` for all `x`.
pub fn invert(t: TransformId) -> TransformId {
    match t {
        TransformId::Rot90 => TransformId::Rot270,
        TransformId::Rot270 => TransformId::Rot90,
        // Every other element is an involution.
        other => other,
    }
}

/// The element equal to applying `b` first and `a` second.
pub fn compose(a: TransformId, b: TransformId) -> TransformId {
    let table = composition_table();
    table[a.index()][b.index()]
}

/// 8x8 Cayley table, built once by applying transform pairs to a labeled
/// non-square probe grid and matching the result against single elements.
fn composition_table() -> &'static [[TransformId; 8]; 8] {
    static TABLE: OnceLock<[[TransformId; 8]; 8]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let probe = Array::from_shape_fn((2, 3), |(r, c)| (r * 3 + c) as u8);
        let singles: Vec<_> = ALL_TRANSFORMS
            .iter()
            .map(|&t| apply_transform(t, &probe).unwrap())
            .collect();
        let mut table = [[TransformId::Identity; 8]; 8];
        for (i, &a) in ALL_TRANSFORMS.iter().enumerate() {
            for (j, &b) in ALL_TRANSFORMS.iter().enumerate() {
                let combined = apply_transform(a, &apply_transform(b, &probe).unwrap()).unwrap();
                let k = singles
                    .iter()
                    .position(|s| *s == combined)
                    .expect("group is closed under composition");
                table[i][j] = ALL_TRANSFORMS[k];
            }
        }
        table
    })
}

/// Draw a uniformly distributed element of `allow`.
pub fn sample_transform<R: Rng + ?Sized>(rng: &mut R, allow: &[TransformId]) -> Result<TransformId> {
    allow
        .choose(rng)
        .copied()
        .ok_or_else(|| Error::invalid("transform allow-set is empty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array2, Array3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn grid2x2() -> Array2<i32> {
        arr2(&[[1, 2], [3, 4]])
    }

    #[test]
    fn identity_returns_input() {
        let x = grid2x2();
        assert_eq!(apply_transform(TransformId::Identity, &x).unwrap(), x);
    }

    #[test]
    fn rot90_counterclockwise() {
        let got = apply_transform(TransformId::Rot90, &grid2x2()).unwrap();
        assert_eq!(got, arr2(&[[2, 4], [1, 3]]));
    }

    #[test]
    fn hflip_mirrors_columns() {
        let got = apply_transform(TransformId::HFlip, &grid2x2()).unwrap();
        assert_eq!(got, arr2(&[[2, 1], [4, 3]]));
    }

    #[test]
    fn rectangular_grid_swaps_dims_on_odd_rotation() {
        let x = Array2::from_shape_fn((2, 3), |(r, c)| (r * 3 + c) as i32);
        let got = apply_transform(TransformId::Rot90, &x).unwrap();
        assert_eq!(got.dim(), (3, 2));
        // (r,c) -> (W-1-c, r)
        assert_eq!(got, arr2(&[[2, 5], [1, 4], [0, 3]]));
    }

    #[test]
    fn leading_axes_pass_through() {
        let x = Array3::from_shape_fn((4, 2, 3), |(ch, r, c)| (100 * ch + 10 * r + c) as i32);
        let got = apply_transform(TransformId::VFlip, &x).unwrap();
        assert_eq!(got.dim(), (4, 2, 3));
        for ch in 0..4 {
            for r in 0..2 {
                for c in 0..3 {
                    assert_eq!(got[[ch, r, c]], x[[ch, 1 - r, c]]);
                }
            }
        }
    }

    #[test]
    fn zero_sized_grid_rejected() {
        let x = Array2::<f32>::zeros((0, 3));
        assert!(apply_transform(TransformId::Identity, &x).is_err());
    }

    #[test]
    fn one_dimensional_input_rejected() {
        let x = ndarray::Array1::<f32>::zeros(5);
        assert!(apply_transform(TransformId::Identity, &x).is_err());
    }

    #[test]
    fn invert_matches_spec_cases() {
        assert_eq!(invert(TransformId::Identity), TransformId::Identity);
        assert_eq!(invert(TransformId::HFlip), TransformId::HFlip);
        // Checked by brute force on a 3x3 grid of distinct values below.
        assert_eq!(invert(TransformId::Rot90), TransformId::Rot270);
    }

    #[test]
    fn round_trip_is_exact_for_all_elements() {
        let x = Array2::from_shape_fn((3, 3), |(r, c)| (r * 3 + c) as u8);
        for &t in &ALL_TRANSFORMS {
            let fwd = apply_transform(t, &x).unwrap();
            let back = apply_transform(invert(t), &fwd).unwrap();
            assert_eq!(back, x, "round trip failed for {t}");
        }
    }

    #[test]
    fn composition_is_closed_and_consistent() {
        let x = Array2::from_shape_fn((3, 4), |(r, c)| (r * 4 + c) as u16);
        for &a in &ALL_TRANSFORMS {
            for &b in &ALL_TRANSFORMS {
                let via_table = apply_transform(compose(a, b), &x).unwrap();
                let direct = apply_transform(a, &apply_transform(b, &x).unwrap()).unwrap();
                assert_eq!(via_table, direct, "compose({a}, {b})");
            }
        }
    }

    #[test]
    fn values_are_permuted_not_changed() {
        let x = Array2::from_shape_fn((4, 5), |(r, c)| (r * 5 + c) as i64);
        for &t in &ALL_TRANSFORMS {
            let y = apply_transform(t, &x).unwrap();
            let mut xs: Vec<_> = x.iter().copied().collect();
            let mut ys: Vec<_> = y.iter().copied().collect();
            xs.sort_unstable();
            ys.sort_unstable();
            assert_eq!(xs, ys);
        }
    }

    #[test]
    fn sample_transform_respects_allow_set() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let only = [TransformId::Identity];
        for _ in 0..10 {
            assert_eq!(
                sample_transform(&mut rng, &only).unwrap(),
                TransformId::Identity
            );
        }
        assert!(sample_transform(&mut rng, &[]).is_err());
    }

    #[test]
    fn sample_transform_is_deterministic_under_seed() {
        let draw = |seed: u64| -> Vec<TransformId> {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            (0..64)
                .map(|_| sample_transform(&mut rng, &ALL_TRANSFORMS).unwrap())
                .collect()
        };
        assert_eq!(draw(11), draw(11));
        assert_ne!(draw(11), draw(12));
    }

    #[test]
    fn sample_transform_is_roughly_uniform() {
        // Frequency oracle: 8000 draws, each of the 8 elements expected 1000
        // times, tolerance 5%.
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let mut counts = [0usize; 8];
        for _ in 0..8000 {
            let t = sample_transform(&mut rng, &ALL_TRANSFORMS).unwrap();
            counts[t.index()] += 1;
        }
        for (i, &n) in counts.iter().enumerate() {
            assert!(
                (n as i64 - 1000).unsigned_abs() <= 50,
                "element {} drawn {} times",
                ALL_TRANSFORMS[i],
                n
            );
        }
    }

    #[test]
    fn names_round_trip() {
        for &t in &ALL_TRANSFORMS {
            assert_eq!(t.to_string().parse::<TransformId>().unwrap(), t);
        }
        assert!("rot45".parse::<TransformId>().is_err());
    }
}
