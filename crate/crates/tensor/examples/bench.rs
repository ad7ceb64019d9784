use std::time::Instant;
use vton_tensor::{GaussianRng, Graph, Tensor};
fn main() {
    let mut rng = GaussianRng::new(1);
    for (b, c, h, w) in [(16usize, 32usize, 16usize, 12usize), (16, 64, 8, 6), (8, 16, 64, 48)] {
        let x = Tensor::randn(&[b, c, h, w], &mut rng);
        let k = Tensor::randn(&[c, c, 3, 3], &mut rng);
        let t0 = Instant::now();
        let iters = 10;
        for _ in 0..iters {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let kv = g.param(k.clone());
            let y = g.conv2d(xv, kv, 1, 1).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap();
        }
        let dt = t0.elapsed().as_secs_f64() / iters as f64;
        let flops = 3.0 * 2.0 * (b * c * c * 9 * h * w) as f64;
        println!("{b}x{c}x{h}x{w}: {:.2} ms, {:.2} GFLOP/s", dt * 1e3, flops / dt / 1e9);
    }
}
