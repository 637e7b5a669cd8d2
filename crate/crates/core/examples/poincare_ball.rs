//! Exponential and logarithmic maps and Möbius addition on the Poincaré ball.

use cfdetect::geometry::{exp_origin, log_origin, mobius_add, norm, BallConfig, BallPoint, TangentVector};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for c in [0.1, 1.0, 2.0] {
        let cfg = BallConfig::new(c)?;
        println!("c = {c}: ball radius {:.4}", 1.0 / cfg.sqrt_c());
        // √c‖u‖ from 0.1 to 8; past ~5 the boundary clamp makes exp lossy
        for r in [0.1, 1.0, 3.0, 5.0, 8.0] {
            let s = r / (cfg.sqrt_c() * (1.0f64 + 0.25 + 0.0625).sqrt());
            let u = TangentVector::new(vec![s, -0.5 * s, 0.25 * s])?;
            let h = exp_origin(&u, &cfg)?;
            let back = log_origin(&h, &cfg)?;
            let err = back.as_slice().iter().zip(u.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            println!("  √c|u| {r:>4.1} -> |exp(u)| {:.9}  round-trip err {err:.1e}", norm(h.as_slice()));
        }
    }

    let cfg = BallConfig::new(1.0)?;
    let x = BallPoint::new(vec![0.3, 0.1], &cfg)?;
    let y = BallPoint::new(vec![0.4, -0.2], &cfg)?;
    let xy = mobius_add(&x, &y, &cfg)?;
    let yx = mobius_add(&y, &x, &cfg)?;
    println!("x ⊕ y = {:?}", xy.as_slice());
    println!("y ⊕ x = {:?}  (not commutative)", yx.as_slice());
    let neg = BallPoint::new(x.as_slice().iter().map(|v| -v).collect(), &cfg)?;
    println!("(-x) ⊕ x = {:?}", mobius_add(&neg, &x, &cfg)?.as_slice());
    Ok(())
}
