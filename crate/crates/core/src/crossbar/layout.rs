//! Placement of binary conv weights onto crossbars.
//!
//! * Strategy 1: one crossbar of `K·K·C_in` rows × `C_out` columns. Column `j`
//!   holds kernel `j` unrolled channel-major, then kernel row, then column, and
//!   the rows split into `C_in` contiguous groups of `K·K` word-lines, one
//!   dropout module per group.
//! * Strategy 2: `K·K` crossbars of `C_in` rows × `C_out` columns. Crossbar
//!   `(u, v)` holds kernel tap `(u, v)` of every kernel, and dropout module `m`
//!   drives row `m` of every crossbar.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BinaryView, ConvGeometry, ConvWeight};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    S1,
    S2,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "s1" => Ok(Strategy::S1),
            "2" | "s2" => Ok(Strategy::S2),
            other => Err(Error::Config(format!("unknown mapping strategy {other:?} (expected 1 or 2)"))),
        }
    }
}

/// One array of single-cell ±1 weights, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Crossbar {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<i8>,
}

impl Crossbar {
    #[inline]
    pub fn cell(&self, row: usize, col: usize) -> i8 {
        self.cells[row * self.cols + col]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CrossbarLayout {
    pub strategy: Strategy,
    pub geometry: ConvGeometry,
    pub crossbars: Vec<Crossbar>,
    /// Word-line index → dropout module id. Identical for every crossbar of
    /// the layout.
    pub row_groups: Vec<usize>,
}

impl CrossbarLayout {
    /// Number of dropout modules wired to the layout (one per input channel).
    pub fn module_count(&self) -> usize {
        self.geometry.c_in
    }

    /// Rows driven by module `m` within one crossbar.
    pub fn group_rows(&self, m: usize) -> std::ops::Range<usize> {
        match self.strategy {
            Strategy::S1 => {
                let kk = self.geometry.k * self.geometry.k;
                m * kk..(m + 1) * kk
            }
            Strategy::S2 => m..m + 1,
        }
    }

    /// Reconstructs the (C_out, C_in, K, K) sign tensor from the cells.
    pub fn unmap(&self) -> BinaryView {
        let g = &self.geometry;
        let mut signs = vec![0i8; g.weight_len()];
        for co in 0..g.c_out {
            for ci in 0..g.c_in {
                for kh in 0..g.k {
                    for kw in 0..g.k {
                        let v = match self.strategy {
                            Strategy::S1 => self.crossbars[0].cell((ci * g.k + kh) * g.k + kw, co),
                            Strategy::S2 => self.crossbars[kh * g.k + kw].cell(ci, co),
                        };
                        signs[g.weight_index(co, ci, kh, kw)] = v;
                    }
                }
            }
        }
        BinaryView { signs }
    }

    pub fn to_dump(&self) -> LayoutDump {
        let g = self.geometry;
        LayoutDump {
            format: LAYOUT_FORMAT.to_string(),
            strategy: self.strategy,
            dims: LayoutDims { k: g.k, c_in: g.c_in, c_out: g.c_out, stride: g.stride, padding: g.padding },
            row_groups: self.row_groups.clone(),
            crossbars: self
                .crossbars
                .iter()
                .map(|c| CrossbarDump { rows: c.rows, cols: c.cols, signs: encode_signs(&c.cells) })
                .collect(),
        }
    }

    pub fn from_dump(d: &LayoutDump) -> Result<Self> {
        if d.format != LAYOUT_FORMAT {
            return Err(Error::format(0, format!("unsupported layout format {:?}", d.format)));
        }
        let geometry = ConvGeometry {
            c_out: d.dims.c_out,
            c_in: d.dims.c_in,
            k: d.dims.k,
            stride: d.dims.stride,
            padding: d.dims.padding,
        };
        let crossbars = d
            .crossbars
            .iter()
            .map(|c| {
                Ok(Crossbar { rows: c.rows, cols: c.cols, cells: decode_signs(&c.signs, c.rows * c.cols)? })
            })
            .collect::<Result<Vec<_>>>()?;
        let layout = CrossbarLayout { strategy: d.strategy, geometry, crossbars, row_groups: d.row_groups.clone() };
        layout.check()?;
        Ok(layout)
    }

    /// Structural invariants of the strategy.
    pub fn check(&self) -> Result<()> {
        let g = &self.geometry;
        let (count, rows) = match self.strategy {
            Strategy::S1 => (1, g.k * g.k * g.c_in),
            Strategy::S2 => (g.k * g.k, g.c_in),
        };
        let bad = self.crossbars.len() != count
            || self.crossbars.iter().any(|c| c.rows != rows || c.cols != g.c_out || c.cells.len() != rows * g.c_out)
            || self.row_groups.len() != rows
            || (0..rows).any(|r| !self.group_rows(self.row_groups[r]).contains(&r));
        if bad {
            return Err(Error::Config(format!("layout does not match {:?} invariants for {g:?}", self.strategy)));
        }
        Ok(())
    }

    /// One-paragraph human-readable summary.
    pub fn summary(&self) -> String {
        let g = &self.geometry;
        let c = &self.crossbars[0];
        let plus: usize = self.crossbars.iter().map(|c| c.cells.iter().filter(|&&s| s > 0).count()).sum();
        let total: usize = self.crossbars.iter().map(|c| c.cells.len()).sum();
        let group = match self.strategy {
            Strategy::S1 => format!("{} contiguous word-lines per module", g.k * g.k),
            Strategy::S2 => "row m of every crossbar per module".to_string(),
        };
        format!(
            "strategy {:?}: K={} C_in={} C_out={} stride={} padding={}\n\
             crossbars: {} x ({} rows x {} cols)\n\
             dropout modules: {} ({group})\n\
             cells: {total} ({plus} at +1, {} at -1)\n",
            self.strategy,
            g.k,
            g.c_in,
            g.c_out,
            g.stride,
            g.padding,
            self.crossbars.len(),
            c.rows,
            c.cols,
            self.module_count(),
            total - plus,
        )
    }
}

pub const LAYOUT_FORMAT: &str = "spindrop-layout/1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutDims {
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossbarDump {
    pub rows: usize,
    pub cols: usize,
    /// Row-major bitmap, bit set for +1, packed MSB-first, base64.
    pub signs: String,
}

/// JSON dump of a layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutDump {
    pub format: String,
    pub strategy: Strategy,
    pub dims: LayoutDims,
    pub row_groups: Vec<usize>,
    pub crossbars: Vec<CrossbarDump>,
}

pub fn encode_signs(cells: &[i8]) -> String {
    let mut bytes = vec![0u8; cells.len().div_ceil(8)];
    for (i, &s) in cells.iter().enumerate() {
        if s > 0 {
            bytes[i / 8] |= 0x80 >> (i % 8);
        }
    }
    B64.encode(bytes)
}

pub fn decode_signs(b64: &str, len: usize) -> Result<Vec<i8>> {
    let bytes = B64.decode(b64).map_err(|e| Error::format(0, format!("sign bitmap: {e}")))?;
    if bytes.len() != len.div_ceil(8) {
        return Err(Error::format(0, format!("sign bitmap has {} bytes, expected {}", bytes.len(), len.div_ceil(8))));
    }
    Ok((0..len).map(|i| if bytes[i / 8] & (0x80 >> (i % 8)) != 0 { 1 } else { -1 }).collect())
}

fn check_view(g: &ConvGeometry, view: &BinaryView) -> Result<()> {
    if view.signs.len() != g.weight_len() {
        return Err(Error::dims("binary view length", &[g.c_out, g.c_in, g.k, g.k], &[view.signs.len()]));
    }
    Ok(())
}

pub fn map_strategy1(geometry: &ConvGeometry, view: &BinaryView) -> Result<CrossbarLayout> {
    check_view(geometry, view)?;
    let g = *geometry;
    let kk = g.k * g.k;
    let rows = kk * g.c_in;
    let mut cells = vec![0i8; rows * g.c_out];
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            for kh in 0..g.k {
                for kw in 0..g.k {
                    let r = (ci * g.k + kh) * g.k + kw;
                    cells[r * g.c_out + co] = view.signs[g.weight_index(co, ci, kh, kw)];
                }
            }
        }
    }
    Ok(CrossbarLayout {
        strategy: Strategy::S1,
        geometry: g,
        crossbars: vec![Crossbar { rows, cols: g.c_out, cells }],
        row_groups: (0..rows).map(|r| r / kk).collect(),
    })
}

pub fn map_strategy2(geometry: &ConvGeometry, view: &BinaryView) -> Result<CrossbarLayout> {
    check_view(geometry, view)?;
    let g = *geometry;
    let mut crossbars = Vec::with_capacity(g.k * g.k);
    for u in 0..g.k {
        for v in 0..g.k {
            let mut cells = vec![0i8; g.c_in * g.c_out];
            for i in 0..g.c_in {
                for j in 0..g.c_out {
                    cells[i * g.c_out + j] = view.signs[g.weight_index(j, i, u, v)];
                }
            }
            crossbars.push(Crossbar { rows: g.c_in, cols: g.c_out, cells });
        }
    }
    Ok(CrossbarLayout { strategy: Strategy::S2, geometry: g, crossbars, row_groups: (0..g.c_in).collect() })
}

pub fn map_layer(geometry: &ConvGeometry, view: &BinaryView, strategy: Strategy) -> Result<CrossbarLayout> {
    match strategy {
        Strategy::S1 => map_strategy1(geometry, view),
        Strategy::S2 => map_strategy2(geometry, view),
    }
}

/// Maps the binary view of a conv weight.
pub fn map_weight(w: &ConvWeight, strategy: Strategy) -> Result<CrossbarLayout> {
    map_layer(&w.geometry, &w.binary_view(), strategy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dropout::stream_rng;
    use proptest::prelude::*;
    use crate::crossbar::layout::Strategy;
    use rand::Rng;

    fn random_view(g: &ConvGeometry, seed: u64) -> BinaryView {
        let mut rng = stream_rng(seed, &[]);
        BinaryView { signs: (0..g.weight_len()).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect() }
    }

    fn geom(k: usize, c_in: usize, c_out: usize) -> ConvGeometry {
        ConvGeometry { c_out, c_in, k, stride: 1, padding: 0 }
    }

    #[test]
    fn strategy1_shape_and_groups() {
        let g = geom(3, 2, 4);
        let l = map_strategy1(&g, &random_view(&g, 1)).unwrap();
        assert_eq!(l.crossbars.len(), 1);
        assert_eq!((l.crossbars[0].rows, l.crossbars[0].cols), (18, 4));
        assert_eq!(l.row_groups[..9], [0; 9]);
        assert_eq!(l.row_groups[9..], [1; 9]);
        assert_eq!(l.module_count(), 2);

        let g = geom(1, 1, 1);
        let l = map_strategy1(&g, &random_view(&g, 2)).unwrap();
        assert_eq!((l.crossbars[0].rows, l.crossbars[0].cols, l.row_groups.clone()), (1, 1, vec![0]));
    }

    #[test]
    fn strategy2_shape() {
        let g = geom(3, 256, 512);
        let l = map_strategy2(&g, &BinaryView { signs: vec![1; g.weight_len()] }).unwrap();
        assert_eq!(l.crossbars.len(), 9);
        assert!(l.crossbars.iter().all(|c| c.rows == 256 && c.cols == 512));
        let g = geom(1, 5, 3);
        let l = map_strategy2(&g, &random_view(&g, 3)).unwrap();
        assert_eq!(l.crossbars.len(), 1);
        assert_eq!((l.crossbars[0].rows, l.crossbars[0].cols), (5, 3));
    }

    #[test]
    fn strategy1_column_is_unrolled_kernel() {
        let g = geom(2, 2, 3);
        let view = random_view(&g, 9);
        let l = map_strategy1(&g, &view).unwrap();
        for co in 0..3 {
            let col: Vec<i8> = (0..8).map(|r| l.crossbars[0].cell(r, co)).collect();
            assert_eq!(col, view.signs[co * 8..(co + 1) * 8]);
        }
    }

    #[test]
    fn strategy2_cell_indexing() {
        let g = geom(3, 4, 5);
        let view = random_view(&g, 4);
        let l = map_strategy2(&g, &view).unwrap();
        for u in 0..3 {
            for v in 0..3 {
                for i in 0..4 {
                    for j in 0..5 {
                        assert_eq!(l.crossbars[u * 3 + v].cell(i, j), view.signs[g.weight_index(j, i, u, v)]);
                    }
                }
            }
        }
    }

    #[test]
    fn dump_round_trip() {
        let g = ConvGeometry { c_out: 3, c_in: 2, k: 3, stride: 2, padding: 1 };
        for s in [Strategy::S1, Strategy::S2] {
            let l = map_layer(&g, &random_view(&g, 5), s).unwrap();
            let json = serde_json::to_string(&l.to_dump()).unwrap();
            let back = CrossbarLayout::from_dump(&serde_json::from_str(&json).unwrap()).unwrap();
            assert_eq!(back, l);
        }
    }

    #[test]
    fn corrupt_dump_rejected() {
        let g = geom(2, 2, 2);
        let mut d = map_strategy1(&g, &random_view(&g, 6)).unwrap().to_dump();
        d.row_groups[0] = 1;
        assert!(CrossbarLayout::from_dump(&d).is_err());
    }

    proptest! {
        #[test]
        fn unmap_inverts_map(k in 1usize..4, c_in in 1usize..6, c_out in 1usize..6, seed in any::<u64>()) {
            let g = geom(k, c_in, c_out);
            let view = random_view(&g, seed);
            for s in [Strategy::S1, Strategy::S2] {
                let l = map_layer(&g, &view, s).unwrap();
                l.check().unwrap();
                prop_assert_eq!(&l.unmap(), &view);
            }
        }
    }
}
