//! Fixtures shared by the benchmarks.

use miv_att::learners::Design;
use miv_att::simulation::generate_dgp4;
use miv_att::{Dataset, Dgp4Params};

pub fn dataset(n: usize, seed: u64) -> Dataset {
    generate_dgp4(&Dgp4Params::default(), n, seed).expect("default DGP").data
}

/// Covariate rows of `data` as a design, with a smooth target.
pub fn fw_problem(data: &Dataset) -> (Design, Vec<f64>) {
    let rows: Vec<Vec<f64>> = (0..data.n()).map(|i| data.x(i).to_vec()).collect();
    let f = rows.iter().map(|x| (3.0 * x[0]).sin() + x[1] * x[1]).collect();
    (Design::new(rows.len(), data.d(), rows.concat()), f)
}
