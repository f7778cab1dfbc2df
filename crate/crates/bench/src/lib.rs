//! Shared fixtures for the benchmarks.

use disagg_core::simeval::simulate::{synthetic_grid, DEFAULT_BETA};
use disagg_core::simeval::{simulate, SimKind, SimSetting, Tiling};
use disagg_core::{rng, PixelGrid, WardTable};

/// S2 counts on a synthetic `rows × cols` grid tiled into `br × bc` wards.
pub fn fixture(rows: usize, cols: usize, br: usize, bc: usize) -> (PixelGrid, WardTable) {
    let tiling = Tiling { block_rows: br, block_cols: bc };
    let (grid, empty) = synthetic_grid(rows, cols, tiling, 1).expect("valid tiling");
    let setting = SimSetting { kind: SimKind::S2, beta_true: DEFAULT_BETA.to_vec(), seed: 1 };
    let (_, y) = simulate(&setting, &grid, &empty, &mut rng::from_seed(2)).expect("finite intensities");
    let wards = empty.with_populations(&y).expect("matching ward count");
    (grid, wards)
}
