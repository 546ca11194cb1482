//! The eight symmetries of the square, applied jointly to every feature
//! plane and the target of a chip.

use super::Chip;
use crate::error::{Error, Result};
use crate::CHIP_SIZE;

/// Element of the dihedral group D4.
///
/// Index `g = 4·s + k` acts as "mirror columns `s` times, then rotate
/// counter-clockwise by `k` quarter turns". `g = 0` is the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dihedral(u8);

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral(0);

    pub fn new(g: u8) -> Result<Self> {
        if g < 8 {
            Ok(Dihedral(g))
        } else {
            Err(Error::invalid(format!("dihedral index {g} is not in 0..8")))
        }
    }

    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8).map(Dihedral)
    }

    pub fn index(self) -> u8 {
        self.0
    }

    fn rotations(self) -> u8 {
        self.0 % 4
    }

    fn flipped(self) -> bool {
        self.0 >= 4
    }

    /// `self ∘ other`: apply `other` first.
    ///
    /// Uses `F·R = R⁻¹·F`, so `R^a F^s · R^b F^t = R^(a ± b) F^(s+t)`.
    pub fn compose(self, other: Dihedral) -> Dihedral {
        let b = if self.flipped() { (4 - other.rotations()) % 4 } else { other.rotations() };
        let k = (self.rotations() + b) % 4;
        let s = self.flipped() ^ other.flipped();
        Dihedral(k + 4 * s as u8)
    }

    pub fn inverse(self) -> Dihedral {
        if self.flipped() {
            self
        } else {
            Dihedral((4 - self.rotations()) % 4)
        }
    }

    /// Destination of pixel `(r, c)` in an `n×n` image.
    fn map(self, r: usize, c: usize, n: usize) -> (usize, usize) {
        let (mut r, mut c) = if self.flipped() { (r, n - 1 - c) } else { (r, c) };
        for _ in 0..self.rotations() {
            (r, c) = (n - 1 - c, r);
        }
        (r, c)
    }

    /// Transforms one `n×n` plane.
    pub fn apply<T: Copy>(self, src: &[T], n: usize, dst: &mut [T]) {
        debug_assert_eq!(src.len(), n * n);
        for r in 0..n {
            for c in 0..n {
                let (dr, dc) = self.map(r, c, n);
                dst[dr * n + dc] = src[r * n + c];
            }
        }
    }

    pub fn apply_planes<T: Copy>(self, src: &[T], n: usize) -> Vec<T> {
        let mut out = src.to_vec();
        for (s, d) in src.chunks_exact(n * n).zip(out.chunks_exact_mut(n * n)) {
            self.apply(s, n, d);
        }
        out
    }
}

/// Applies `g` to every timestep's feature planes and to the target.
/// Temporal order and metadata are unchanged.
pub fn augment_chip(chip: &Chip, g: Dihedral) -> Chip {
    if g == Dihedral::IDENTITY {
        return chip.clone();
    }
    Chip {
        features: g.apply_planes(&chip.features, CHIP_SIZE),
        target: g.apply_planes(&chip.target, CHIP_SIZE),
        ..chip.clone()
    }
}
