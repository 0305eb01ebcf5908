//! Real spherical harmonics up to degree 2.
//!
//! Coefficients of a voxel are laid out color-major: the `(deg+1)^2` basis
//! weights of red, then green, then blue.

use crate::scalar::Real;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];

/// Basis functions per color channel for `sh_degree`.
#[inline]
pub fn basis_len(sh_degree: u8) -> usize {
    let b = sh_degree as usize + 1;
    b * b
}

/// Evaluates the real SH basis at unit direction `d`. Entries past
/// `basis_len(sh_degree)` are zero.
#[inline]
pub fn sh_basis<T: Real>(sh_degree: u8, d: [T; 3]) -> [T; 9] {
    let mut y = [T::zero(); 9];
    y[0] = T::of(SH_C0);
    if sh_degree == 0 {
        return y;
    }
    let [x, yy, z] = d;
    let c1 = T::of(SH_C1);
    y[1] = -c1 * yy;
    y[2] = c1 * z;
    y[3] = -c1 * x;
    if sh_degree == 1 {
        return y;
    }
    let (xx, y2, zz) = (x * x, yy * yy, z * z);
    y[4] = T::of(SH_C2[0]) * x * yy;
    y[5] = T::of(SH_C2[1]) * yy * z;
    y[6] = T::of(SH_C2[2]) * (T::of(2.0) * zz - xx - y2);
    y[7] = T::of(SH_C2[3]) * x * z;
    y[8] = T::of(SH_C2[4]) * (xx - y2);
    y
}

/// Pre-activation RGB for coefficients `coeffs` seen along `view_dir`.
pub fn eval_sh<T: Real>(coeffs: &[T], sh_degree: u8, view_dir: [T; 3]) -> [T; 3] {
    let basis = sh_basis(sh_degree, view_dir);
    eval_with_basis(coeffs, basis_len(sh_degree), &basis)
}

#[inline(always)]
pub(crate) fn eval_with_basis<T: Real>(coeffs: &[T], b: usize, basis: &[T; 9]) -> [T; 3] {
    let mut rgb = [T::zero(); 3];
    for (ch, out) in rgb.iter_mut().enumerate() {
        let row = &coeffs[ch * b..(ch + 1) * b];
        let mut acc = T::zero();
        for k in 0..b {
            acc += row[k] * basis[k];
        }
        *out = acc;
    }
    rgb
}
