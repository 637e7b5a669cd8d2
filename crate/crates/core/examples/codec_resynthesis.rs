//! Trains residual vector quantisers of growing depth on random frames and
//! reports reconstruction error and per-stage residual energy.

use cfdetect::codecsim::{decode, encode, train_codebook, FrameSequence};
use cfdetect::seeding;
use rand_distr::{Distribution, StandardNormal};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = seeding::rng(3);
    let dim = 16;
    let frames: Vec<f64> = (0..2000 * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let x = FrameSequence::new(frames, dim)?;
    let energy: f64 = x.as_slice().iter().map(|v| v * v).sum();

    for (stages, codewords) in [(1, 16), (1, 256), (2, 64), (4, 32), (8, 16)] {
        let cb = train_codebook(std::slice::from_ref(&x), "demo", stages, codewords, 15, 7)?;
        let codes = encode(&x, &cb)?;
        let y = decode(&codes, &cb)?;
        let err: f64 = x.as_slice().iter().zip(y.as_slice()).map(|(a, b)| (a - b).powi(2)).sum();
        let bits = stages as f64 * (codewords as f64).log2();
        println!("{stages} x {codewords:>3}  {bits:>4.0} bits/frame  relative error {:.3}", err / energy);
    }
    Ok(())
}
