//! Fixtures shared by the criterion benches in `benches/`.

use std::sync::Arc;

use warpflow_core::{BaseGrid, BaseManifold, Chart, FlowState, WarpFamily, WarpFunction, WarpedSpace};

/// `cosh` warp over the flat torus, the stiff case of the locally
/// constrained flow.
pub fn cosh_torus() -> WarpedSpace {
    WarpedSpace::surface(WarpFunction::new(WarpFamily::Cosh, 0.1, 4.0).expect("warp"), BaseManifold::FlatTorus)
}

pub fn sinh_sphere() -> WarpedSpace {
    WarpedSpace::surface(WarpFunction::new(WarpFamily::Sinh, 0.0, 4.0).expect("warp"), BaseManifold::RoundSphere)
}

/// Strictly convex random graph at `r0 = 1`, `eps = 0.1`.
pub fn random_state(space: &WarpedSpace, chart: Chart, resolution: usize, seed: u64) -> FlowState {
    let grid = Arc::new(BaseGrid::new(chart, resolution).expect("grid"));
    FlowState::init_random(space, grid, 1.0, 0.1, seed).expect("convex initial data")
}
