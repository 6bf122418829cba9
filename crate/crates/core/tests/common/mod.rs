#![allow(dead_code)]

use std::sync::Arc;

use pcaplab::geometry::{make_ball, make_ellipse, make_polygon, ConvexBody, DirectionGrid};
use pcaplab::model::ProblemParams;
use pcaplab::pde_solver::{BodyGridSettings, SolverConfig, DEFAULT_HALF_WIDTH};

pub fn plane() -> ProblemParams {
    ProblemParams::new(2, 1.5).unwrap()
}

pub fn dirs() -> Arc<DirectionGrid> {
    Arc::new(DirectionGrid::uniform_2d(512).unwrap())
}

pub fn disk(dirs: &Arc<DirectionGrid>) -> ConvexBody {
    make_ball(&[0.0, 0.0], 1.0, dirs).unwrap()
}

pub fn square(dirs: &Arc<DirectionGrid>) -> ConvexBody {
    make_polygon(&[[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]], dirs).unwrap()
}

pub fn ellipse(ratio: f64, dirs: &Arc<DirectionGrid>) -> ConvexBody {
    make_ellipse([0.0, 0.0], [1.0, 1.0 / ratio], dirs).unwrap()
}

pub fn config(body: &ConvexBody, cells: usize) -> SolverConfig {
    SolverConfig::for_body(plane(), body, DEFAULT_HALF_WIDTH, cells).unwrap()
}

pub fn settings(cells: usize) -> BodyGridSettings {
    let d = dirs();
    BodyGridSettings::new(config(&disk(&d), cells), DEFAULT_HALF_WIDTH)
}
