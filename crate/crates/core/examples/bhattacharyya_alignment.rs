//! Batch-level Bhattacharyya distance between two clouds on the Poincaré ball.
//!
//! One cloud drifts from the origin towards the boundary. The hyperbolic
//! distance works on log-mapped points: near the origin it matches the
//! Euclidean one on raw coordinates, and near the edge the log map inflates
//! the drifting cloud's variance faster than its mean gap.

use cfdetect::alignment::{bd_euclidean, bd_hyperbolic, DEFAULT_VAR_FLOOR};
use cfdetect::geometry::{BallConfig, BallPoint};
use cfdetect::seeding;
use rand_distr::{Distribution, Normal};

fn cloud(rng: &mut seeding::Rng, n: usize, centre: f64, spread: f64) -> Vec<Vec<f64>> {
    let noise = Normal::new(0.0, spread).unwrap();
    (0..n).map(|_| vec![centre + noise.sample(rng), noise.sample(rng)]).collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = BallConfig::new(1.0)?;
    let mut rng = seeding::rng(0);
    let to_ball = |rows: &[Vec<f64>]| -> Result<Vec<BallPoint>, Box<dyn std::error::Error>> {
        Ok(rows.iter().map(|r| BallPoint::new(r.clone(), &cfg)).collect::<Result<_, _>>()?)
    };
    let a = cloud(&mut rng, 512, 0.0, 0.02);
    println!("{:>6} {:>12} {:>12}", "centre", "euclidean", "hyperbolic");
    for centre in [0.0, 0.2, 0.4, 0.6, 0.8, 0.9] {
        let b = cloud(&mut rng, 512, centre, 0.02);
        let e = bd_euclidean(&a, &b, DEFAULT_VAR_FLOOR)?;
        let h = bd_hyperbolic(&to_ball(&a)?, &to_ball(&b)?, &cfg, DEFAULT_VAR_FLOOR)?;
        println!("{centre:>6.2} {e:>12.3} {h:>12.3}");
    }
    Ok(())
}
