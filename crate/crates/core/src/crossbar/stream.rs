//! Serialisation of an input feature map into per-cycle crossbar input
//! vectors (moving windows).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

use super::layout::Strategy;

/// Source coordinate `(channel, row, column)` in the unpadded input map.
pub type Coord = (usize, usize, usize);

/// The per-cycle input vectors of one layer pass.
///
/// Cycle `t` computes output pixel `(t / w_out, t % w_out)`. Within a cycle,
/// position `p` follows the word-line order of the strategy: for strategy 1,
/// `p = ci·K² + kh·K + kw`; for strategy 2, `p = (kh·K + kw)·C_in + ci`, i.e.
/// `K²` consecutive slices of `C_in` values, one per crossbar.
#[derive(Clone, Debug, PartialEq)]
pub struct InputStream {
    pub strategy: Strategy,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub c_in: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub cycles: Vec<Vec<f64>>,
    /// Source coordinate of each position, `None` for zero padding.
    pub sources: Vec<Vec<Option<Coord>>>,
}

impl InputStream {
    pub fn n_cycles(&self) -> usize {
        self.cycles.len()
    }

    pub fn positions(&self) -> usize {
        self.c_in * self.k * self.k
    }

    /// Every input coordinate read in two or more cycles, with the
    /// `(cycle, position)` pairs that read it.
    pub fn shared_coordinates(&self) -> BTreeMap<Coord, Vec<(usize, usize)>> {
        let mut seen: BTreeMap<Coord, Vec<(usize, usize)>> = BTreeMap::new();
        for (t, src) in self.sources.iter().enumerate() {
            for (p, c) in src.iter().enumerate() {
                if let Some(c) = c {
                    seen.entry(*c).or_default().push((t, p));
                }
            }
        }
        seen.retain(|_, v| {
            let first = v[0].0;
            v.iter().any(|&(t, _)| t != first)
        });
        seen
    }

    /// Coordinates read by both cycle `a` and cycle `b`.
    pub fn overlap(&self, a: usize, b: usize) -> Vec<Coord> {
        let in_a: std::collections::BTreeSet<Coord> = self.sources[a].iter().flatten().copied().collect();
        let mut out: Vec<Coord> = self.sources[b].iter().flatten().filter(|c| in_a.contains(c)).copied().collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Input channel of stream position `p`.
    pub fn channel_of(&self, p: usize) -> usize {
        match self.strategy {
            Strategy::S1 => p / (self.k * self.k),
            Strategy::S2 => p % self.c_in,
        }
    }
}

/// Streams the windows of a single-sample input map.
pub fn stream_moving_windows(
    ifm: &Tensor4,
    k: usize,
    stride: usize,
    padding: usize,
    strategy: Strategy,
) -> Result<InputStream> {
    if ifm.batch() != 1 {
        return Err(Error::dims("streamed input map", &ifm.dims(), &[1]));
    }
    let (c_in, h, w) = (ifm.channels(), ifm.height(), ifm.width());
    if k == 0 || stride == 0 || h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::param(format!(
            "window K={k} stride={stride} padding={padding} does not fit a {h}x{w} map"
        )));
    }
    let h_out = (h + 2 * padding - k) / stride + 1;
    let w_out = (w + 2 * padding - k) / stride + 1;
    let len = c_in * k * k;
    let mut cycles = Vec::with_capacity(h_out * w_out);
    let mut sources = Vec::with_capacity(h_out * w_out);
    for oy in 0..h_out {
        for ox in 0..w_out {
            let mut vals = vec![0.0; len];
            let mut src = vec![None; len];
            for ci in 0..c_in {
                for kh in 0..k {
                    for kw in 0..k {
                        let p = match strategy {
                            Strategy::S1 => (ci * k + kh) * k + kw,
                            Strategy::S2 => (kh * k + kw) * c_in + ci,
                        };
                        let iy = (oy * stride + kh) as isize - padding as isize;
                        let ix = (ox * stride + kw) as isize - padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            let (iy, ix) = (iy as usize, ix as usize);
                            vals[p] = ifm.at(0, ci, iy, ix);
                            src[p] = Some((ci, iy, ix));
                        }
                    }
                }
            }
            cycles.push(vals);
            sources.push(src);
        }
    }
    Ok(InputStream { strategy, k, stride, padding, c_in, h_out, w_out, cycles, sources })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::crossbar::layout::Strategy;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor4 {
        Tensor4::from_fn([1, c, h, w], |_, c, y, x| (c * 100 + y * 10 + x) as f64)
    }

    #[test]
    fn four_by_four_k3_s1() {
        let s = stream_moving_windows(&ramp(1, 4, 4), 3, 1, 0, Strategy::S1).unwrap();
        assert_eq!(s.n_cycles(), 4);
        assert_eq!(s.cycles[0], vec![0., 1., 2., 10., 11., 12., 20., 21., 22.]);
        assert_eq!(s.cycles[3], vec![11., 12., 13., 21., 22., 23., 31., 32., 33.]);
        assert_eq!(s.overlap(0, 1).len(), 6);
    }

    #[test]
    fn stride_equal_to_kernel_shares_nothing() {
        let s = stream_moving_windows(&ramp(2, 6, 6), 3, 3, 0, Strategy::S1).unwrap();
        assert_eq!(s.n_cycles(), 4);
        assert!(s.shared_coordinates().is_empty());
    }

    #[test]
    fn strategy2_positions_are_tap_major() {
        let s = stream_moving_windows(&ramp(2, 3, 3), 2, 1, 0, Strategy::S2).unwrap();
        // tap (0,1), channel 1, window at (0,0)
        assert_eq!(s.cycles[0][2 + 1], 101.0);
        assert_eq!(s.sources[0][3], Some((1, 0, 1)));
        assert_eq!(s.channel_of(3), 1);
    }

    #[test]
    fn padding_positions_have_no_source() {
        let s = stream_moving_windows(&ramp(1, 2, 2), 3, 1, 1, Strategy::S1).unwrap();
        assert_eq!(s.n_cycles(), 4);
        assert_eq!(s.sources[0][0], None);
        assert_eq!(s.cycles[0][0], 0.0);
        assert_eq!(s.sources[0][4], Some((0, 0, 0)));
    }

    proptest! {
        #[test]
        fn cycle_count_and_shared_coords(h in 3usize..9, w in 3usize..9, k in 1usize..4, stride in 1usize..4) {
            prop_assume!(k <= h && k <= w);
            let s = stream_moving_windows(&ramp(2, h, w), k, stride, 0, Strategy::S1).unwrap();
            let h_out = (h - k) / stride + 1;
            let w_out = (w - k) / stride + 1;
            prop_assert_eq!(s.n_cycles(), h_out * w_out);
            // Oracle: count, per coordinate, the windows that cover it.
            let mut brute = 0;
            for y in 0..h { for x in 0..w {
                let cover = (0..h_out).filter(|oy| oy * stride <= y && y < oy * stride + k).count()
                    * (0..w_out).filter(|ox| ox * stride <= x && x < ox * stride + k).count();
                if cover >= 2 { brute += 2; }
            }}
            prop_assert_eq!(s.shared_coordinates().len(), brute);
            if stride >= k {
                prop_assert!(s.shared_coordinates().is_empty());
            }
        }
    }
}
