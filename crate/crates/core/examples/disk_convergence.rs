//! Unit disk, n = 2, p = 1.5: max nodal error against the radial solution and
//! energy capacity error for a sequence of grids.
//!
//! cargo run --release -p pcaplab-core --example disk_convergence -- 64 128 256

use std::sync::Arc;
use std::time::Instant;

use pcaplab::capacity::{capacity_ball_exact, capacity_energy};
use pcaplab::geometry::{make_ball, DirectionGrid};
use pcaplab::model::ProblemParams;
use pcaplab::pde_solver::{solve_exterior, RadialSolution, SolverConfig};

fn main() -> Result<(), pcaplab::Error> {
    let mut cells: Vec<usize> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    if cells.is_empty() {
        cells = vec![64, 128, 256];
    }
    let params = ProblemParams::new(2, 1.5)?;
    let dirs = Arc::new(DirectionGrid::uniform_2d(512)?);
    let disk = make_ball(&[0.0, 0.0], 1.0, &dirs)?;
    let oracle = RadialSolution::new(&[0.0, 0.0], 1.0, &params)?;
    let exact = capacity_ball_exact(1.0, &params)?.value;

    println!("cells,linf,capacity_rel_err,seconds");
    for n in cells {
        let t = Instant::now();
        let rep = solve_exterior(&disk, &SolverConfig::for_body(params, &disk, 8.0, n)?)?;
        let linf = rep
            .field
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| (v - oracle.value(&rep.field.grid.node_position(i))).abs())
            .fold(0.0, f64::max);
        let cap = capacity_energy(&rep)?.value;
        println!("{n},{linf:.4e},{:.4e},{:.2}", cap / exact - 1.0, t.elapsed().as_secs_f64());
    }
    Ok(())
}
