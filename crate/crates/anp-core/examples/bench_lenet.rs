use anp_core::nn::*;
use anp_core::tensor::{Rng, Tensor};
use std::time::Instant;

fn main() {
    let mut rng = Rng::seed_from(1);
    let net = build_lenet_small(&mut rng);
    let batch = 64;
    let x = Tensor::rand_uniform(vec![batch, 1, 28, 28], 0.0, 1.0, &mut rng);
    let y: Vec<usize> = (0..batch).map(|i| i % 10).collect();
    let t0 = Instant::now();
    let iters = 20;
    for _ in 0..iters {
        let tr = forward(&net, &x, None).unwrap();
        let _bt = backward(&net, &tr, &y).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64();
    let per_img = dt / (iters * batch) as f64;
    println!("fwd+bwd: {:.3} ms/image; epoch of 10k ANP-k3 ~ {:.1}s", per_img * 1e3, per_img * 10_000.0 * 3.0);
}
