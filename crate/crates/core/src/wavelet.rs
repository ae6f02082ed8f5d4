//! Orthonormal multi-level 2-D Haar transform and the coefficient layout.
//!
//! Coefficients are stored in a canonical order: the scaling block first
//! (row-major), then levels `1..=L` from coarsest to finest, each level
//! holding its H, V and D bands in that order, each band row-major.
//!
//! Level `l` bands have `(height >> (L - l + 1)) x (width >> (L - l + 1))`
//! entries. A detail node at `(r, c)` of a level `l + 1` band has as parent
//! the node `(r / 2, c / 2)` of the level `l` band with the same orientation.
//! Level 1 nodes are tree roots; scaling coefficients are outside the tree.
//!
//! Band naming: H is high-pass along rows and low-pass along columns, V the
//! opposite, D high-pass in both directions.

use std::fmt;
use std::io::Write;

use crate::error::{Error, Result};

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// A greyscale image, row-major, nominal range `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidParameter("image must be non-empty".into()));
        }
        if pixels.len() != height * width {
            return Err(Error::DimensionMismatch {
                expected: height * width,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Orientation {
    Scaling,
    H,
    V,
    D,
}

impl Orientation {
    pub const DETAIL: [Orientation; 3] = [Orientation::H, Orientation::V, Orientation::D];

    pub fn as_str(self) -> &'static str {
        match self {
            Orientation::Scaling => "S",
            Orientation::H => "H",
            Orientation::V => "V",
            Orientation::D => "D",
        }
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Metadata of one coefficient in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoeffInfo {
    /// 0 for scaling coefficients, otherwise `1..=L` (1 coarsest).
    pub level: usize,
    pub orientation: Orientation,
    pub row: usize,
    pub col: usize,
    /// Canonical index of the tree parent.
    pub parent: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct WaveletLayout {
    height: usize,
    width: usize,
    levels: usize,
    n_scaling: usize,
    info: Vec<CoeffInfo>,
    /// canonical index -> flat offset into the in-place (pyramid) buffer
    pyramid_pos: Vec<usize>,
    /// canonical index where each level starts; `level_start[l]` for l in 1..=L,
    /// `level_start[L + 1] == len`
    level_start: Vec<usize>,
}

impl WaveletLayout {
    pub fn new(height: usize, width: usize, levels: usize) -> Result<Self> {
        if levels == 0 {
            return Err(Error::InvalidParameter("wavelet depth must be >= 1".into()));
        }
        if levels >= usize::BITS as usize
            || height == 0
            || width == 0
            || !height.is_multiple_of(1 << levels)
            || !width.is_multiple_of(1 << levels)
        {
            return Err(Error::DimensionNotDivisible {
                height,
                width,
                levels,
            });
        }
        let n = height * width;
        let mut info = Vec::with_capacity(n);
        let mut pyramid_pos = Vec::with_capacity(n);
        let mut level_start = vec![0; levels + 2];

        let (sh, sw) = (height >> levels, width >> levels);
        for r in 0..sh {
            for c in 0..sw {
                info.push(CoeffInfo {
                    level: 0,
                    orientation: Orientation::Scaling,
                    row: r,
                    col: c,
                    parent: None,
                });
                pyramid_pos.push(r * width + c);
            }
        }
        let n_scaling = info.len();

        for level in 1..=levels {
            level_start[level] = info.len();
            let (bh, bw) = band_dims(height, width, levels, level);
            for orientation in Orientation::DETAIL {
                let (r0, c0) = match orientation {
                    Orientation::H => (0, bw),
                    Orientation::V => (bh, 0),
                    _ => (bh, bw),
                };
                for r in 0..bh {
                    for c in 0..bw {
                        let parent = (level > 1).then(|| {
                            let (pbh, pbw) = band_dims(height, width, levels, level - 1);
                            let band = orientation_rank(orientation);
                            level_start[level - 1] + band * pbh * pbw + (r / 2) * pbw + c / 2
                        });
                        info.push(CoeffInfo {
                            level,
                            orientation,
                            row: r,
                            col: c,
                            parent,
                        });
                        pyramid_pos.push((r0 + r) * width + c0 + c);
                    }
                }
            }
        }
        level_start[levels + 1] = info.len();
        debug_assert_eq!(info.len(), n);

        Ok(Self {
            height,
            width,
            levels,
            n_scaling,
            info,
            pyramid_pos,
            level_start,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    /// Total number of coefficients (equals the pixel count).
    pub fn len(&self) -> usize {
        self.info.len()
    }

    pub fn is_empty(&self) -> bool {
        self.info.is_empty()
    }

    pub fn n_scaling(&self) -> usize {
        self.n_scaling
    }

    pub fn n_detail(&self) -> usize {
        self.len() - self.n_scaling
    }

    pub fn info(&self) -> &[CoeffInfo] {
        &self.info
    }

    pub fn coeff(&self, index: usize) -> &CoeffInfo {
        &self.info[index]
    }

    /// Canonical index range of level `level` (1-based).
    pub fn level_range(&self, level: usize) -> std::ops::Range<usize> {
        assert!((1..=self.levels).contains(&level), "level out of range");
        self.level_start[level]..self.level_start[level + 1]
    }

    pub fn band_dims(&self, level: usize) -> (usize, usize) {
        band_dims(self.height, self.width, self.levels, level)
    }

    /// Canonical index range of one detail band.
    pub fn band_range(&self, level: usize, orientation: Orientation) -> std::ops::Range<usize> {
        let (bh, bw) = self.band_dims(level);
        let start = self.level_start[level] + orientation_rank(orientation) * bh * bw;
        start..start + bh * bw
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.height != self.height || image.width != self.width {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                actual: image.len(),
            });
        }
        Ok(())
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                actual: len,
            });
        }
        Ok(())
    }

    /// `s = B u`.
    pub fn forward(&self, image: &Image) -> Result<Vec<f64>> {
        self.check_image(image)?;
        Ok(self.forward_slice(&image.pixels))
    }

    /// `u = B^T s`.
    pub fn inverse(&self, coeffs: &[f64]) -> Result<Image> {
        self.check_len(coeffs.len())?;
        Ok(Image {
            height: self.height,
            width: self.width,
            pixels: self.inverse_slice(coeffs),
        })
    }

    /// Forward transform of a raw pixel slice. Panics on length mismatch.
    pub fn forward_slice(&self, pixels: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.forward_into(pixels, &mut out);
        out
    }

    pub fn forward_into(&self, pixels: &[f64], out: &mut [f64]) {
        assert_eq!(pixels.len(), self.len());
        assert_eq!(out.len(), self.len());
        let mut buf = pixels.to_vec();
        let mut scratch = vec![0.0; self.height.max(self.width)];
        for step in 0..self.levels {
            let (rh, rw) = (self.height >> step, self.width >> step);
            self.analysis_step(&mut buf, rh, rw, &mut scratch);
        }
        for (o, &pos) in out.iter_mut().zip(&self.pyramid_pos) {
            *o = buf[pos];
        }
    }

    /// Inverse transform of a raw coefficient slice. Panics on length mismatch.
    pub fn inverse_slice(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.inverse_into(coeffs, &mut out);
        out
    }

    pub fn inverse_into(&self, coeffs: &[f64], out: &mut [f64]) {
        self.synthesize(coeffs, out, false);
    }

    /// `diag(B^T diag(w) B)`, i.e. `sum_j w_j B_{ji}^2` for every pixel `i`.
    ///
    /// For Haar every (pixel, coefficient) pair is connected by a single path
    /// through the filter bank, so this is the synthesis cascade with all
    /// filter taps squared.
    pub fn weighted_diagonal(&self, weights: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.synthesize(weights, &mut out, true);
        out
    }

    fn synthesize(&self, coeffs: &[f64], out: &mut [f64], squared: bool) {
        assert_eq!(coeffs.len(), self.len());
        assert_eq!(out.len(), self.len());
        out.fill(0.0);
        for (&c, &pos) in coeffs.iter().zip(&self.pyramid_pos) {
            out[pos] = c;
        }
        let mut scratch = vec![0.0; self.height.max(self.width)];
        for step in (0..self.levels).rev() {
            let (rh, rw) = (self.height >> step, self.width >> step);
            self.synthesis_step(out, rh, rw, &mut scratch, squared);
        }
    }

    fn analysis_step(&self, buf: &mut [f64], rh: usize, rw: usize, scratch: &mut [f64]) {
        let w = self.width;
        let (hh, hw) = (rh / 2, rw / 2);
        // rows
        for r in 0..rh {
            let row = &mut buf[r * w..r * w + rw];
            for i in 0..hw {
                let (a, b) = (row[2 * i], row[2 * i + 1]);
                scratch[i] = (a + b) * FRAC_1_SQRT_2;
                scratch[hw + i] = (a - b) * FRAC_1_SQRT_2;
            }
            row.copy_from_slice(&scratch[..rw]);
        }
        // columns
        for c in 0..rw {
            for i in 0..hh {
                let (a, b) = (buf[2 * i * w + c], buf[(2 * i + 1) * w + c]);
                scratch[i] = (a + b) * FRAC_1_SQRT_2;
                scratch[hh + i] = (a - b) * FRAC_1_SQRT_2;
            }
            for r in 0..rh {
                buf[r * w + c] = scratch[r];
            }
        }
    }

    fn synthesis_step(
        &self,
        buf: &mut [f64],
        rh: usize,
        rw: usize,
        scratch: &mut [f64],
        squared: bool,
    ) {
        let w = self.width;
        let (hh, hw) = (rh / 2, rw / 2);
        // squared taps: both outputs receive (a + d) / 2
        let pair = |a: f64, d: f64| {
            if squared {
                (0.5 * (a + d), 0.5 * (a + d))
            } else {
                (FRAC_1_SQRT_2 * (a + d), FRAC_1_SQRT_2 * (a - d))
            }
        };
        // columns first (reverse of analysis)
        for c in 0..rw {
            for i in 0..hh {
                let (x, y) = pair(buf[i * w + c], buf[(hh + i) * w + c]);
                scratch[2 * i] = x;
                scratch[2 * i + 1] = y;
            }
            for r in 0..rh {
                buf[r * w + c] = scratch[r];
            }
        }
        for r in 0..rh {
            let row = &mut buf[r * w..r * w + rw];
            for i in 0..hw {
                let (x, y) = pair(row[i], row[hw + i]);
                scratch[2 * i] = x;
                scratch[2 * i + 1] = y;
            }
            row.copy_from_slice(&scratch[..rw]);
        }
    }

    /// Debug dump: `index,level,orientation,row,col,parent_index,value`.
    /// Scaling coefficients report level `0`; roots report parent `-1`.
    pub fn write_coefficients_csv<W: Write>(&self, coeffs: &[f64], out: W) -> Result<()> {
        self.check_len(coeffs.len())?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "index",
            "level",
            "orientation",
            "row",
            "col",
            "parent_index",
            "value",
        ])
        .map_err(csv_err)?;
        for (j, (info, v)) in self.info.iter().zip(coeffs).enumerate() {
            let parent = info.parent.map_or(-1, |p| p as i64);
            w.write_record(&[
                j.to_string(),
                info.level.to_string(),
                info.orientation.to_string(),
                info.row.to_string(),
                info.col.to_string(),
                parent.to_string(),
                format!("{v:e}"),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn band_dims(height: usize, width: usize, levels: usize, level: usize) -> (usize, usize) {
    let shift = levels - level + 1;
    (height >> shift, width >> shift)
}

fn orientation_rank(o: Orientation) -> usize {
    match o {
        Orientation::H => 0,
        Orientation::V => 1,
        Orientation::D => 2,
        Orientation::Scaling => unreachable!("scaling band has no detail rank"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
        Image::new(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn smallest_layout() {
        let l = WaveletLayout::new(2, 2, 1).unwrap();
        assert_eq!(l.n_scaling(), 1);
        assert_eq!(l.n_detail(), 3);
        assert!(l.info()[1..]
            .iter()
            .all(|c| c.parent.is_none() && c.level == 1));
        let o: Vec<_> = l.info()[1..].iter().map(|c| c.orientation).collect();
        assert_eq!(o, Orientation::DETAIL);
    }

    #[test]
    fn two_level_parents() {
        let l = WaveletLayout::new(4, 4, 2).unwrap();
        assert_eq!(l.n_scaling(), 1);
        assert_eq!(l.level_range(1).len(), 3);
        assert_eq!(l.level_range(2).len(), 12);
        for j in l.level_range(2) {
            let c = l.coeff(j);
            let p = c.parent.unwrap();
            assert_eq!(l.coeff(p).level, 1);
            assert_eq!(l.coeff(p).orientation, c.orientation);
        }
    }

    #[test]
    fn full_depth_counts() {
        let l = WaveletLayout::new(256, 256, 8).unwrap();
        assert_eq!(l.len(), 65536);
        assert_eq!(l.n_scaling(), 1);
        assert_eq!(l.n_detail(), 65535);
        assert_eq!(l.level_range(1).len(), 3);
        let expected: usize = (1..=8).map(|l| 3 * 4usize.pow(l - 1)).sum::<usize>() + 1;
        assert_eq!(expected, 65536);
    }

    #[test]
    fn rejects_indivisible() {
        assert!(matches!(
            WaveletLayout::new(12, 16, 3),
            Err(Error::DimensionNotDivisible { .. })
        ));
        assert!(WaveletLayout::new(4, 4, 0).is_err());
    }

    #[test]
    fn children_and_colocation() {
        let l = WaveletLayout::new(16, 32, 3).unwrap();
        let mut child_count = vec![0usize; l.len()];
        for (j, c) in l.info().iter().enumerate() {
            if let Some(p) = c.parent {
                let pc = l.coeff(p);
                assert_eq!(pc.level + 1, c.level);
                assert_eq!((pc.row, pc.col), (c.row / 2, c.col / 2));
                assert!(p < j);
                child_count[p] += 1;
            }
        }
        for (j, c) in l.info().iter().enumerate() {
            match c.level {
                0 => assert_eq!(child_count[j], 0),
                3 => assert_eq!(child_count[j], 0),
                _ => assert_eq!(child_count[j], 4),
            }
        }
        for level in 1..=3 {
            let expected = 3 * 4usize.pow(level as u32 - 1) * 16 * 32 / 4usize.pow(3);
            assert_eq!(l.level_range(level).len(), expected);
        }
    }

    #[test]
    fn constant_image_has_no_detail() {
        let l = WaveletLayout::new(4, 4, 2).unwrap();
        let s = l.forward(&Image::filled(4, 4, 1.0)).unwrap();
        assert!((s[0].abs() - 4.0).abs() < 1e-12);
        assert!(s[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn single_pixel_haar() {
        let l = WaveletLayout::new(2, 2, 1).unwrap();
        let s = l
            .forward(&Image::new(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap())
            .unwrap();
        for v in s {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn scaling_atom_is_constant() {
        let l = WaveletLayout::new(4, 4, 2).unwrap();
        let mut s = vec![0.0; 16];
        s[0] = 1.0;
        let u = l.inverse(&s).unwrap();
        assert!(u.pixels.iter().all(|v| (v - 0.25).abs() < 1e-15));
        assert!(l
            .inverse(&[0.0; 16])
            .unwrap()
            .pixels
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn perfect_reconstruction_and_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let l = WaveletLayout::new(16, 16, 3).unwrap();
        let u = random_image(16, 16, &mut rng);
        let back = l.inverse(&l.forward(&u).unwrap()).unwrap();
        for (a, b) in u.pixels.iter().zip(&back.pixels) {
            assert!((a - b).abs() < 1e-10);
        }
        let v = random_image(16, 16, &mut rng);
        let w: Vec<f64> = (0..256).map(|_| rng.random::<f64>() - 0.5).collect();
        let su = l.forward(&u).unwrap();
        let sv = l.forward(&v).unwrap();
        assert!((dot(&su, &sv) - dot(&u.pixels, &v.pixels)).abs() < 1e-12);
        let btw = l.inverse_slice(&w);
        assert!((dot(&su, &w) - dot(&u.pixels, &btw)).abs() < 1e-12);
    }

    #[test]
    fn weighted_diagonal_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = WaveletLayout::new(8, 4, 2).unwrap();
        let n = l.len();
        let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let d = l.weighted_diagonal(&w);
        for i in 0..n {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            let col = l.forward_slice(&e); // column i of B
            let expect: f64 = col.iter().zip(&w).map(|(b, w)| w * b * b).sum();
            assert!((d[i] - expect).abs() < 1e-12, "pixel {i}");
        }
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let l = WaveletLayout::new(4, 4, 2).unwrap();
        let s = l.forward(&Image::filled(4, 4, 0.5)).unwrap();
        let mut out = Vec::new();
        l.write_coefficients_csv(&s, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(
            lines[0],
            "index,level,orientation,row,col,parent_index,value"
        );
        assert_eq!(lines.len(), 17);
        assert!(lines[1].starts_with("0,0,S,0,0,-1,"));
    }
}
