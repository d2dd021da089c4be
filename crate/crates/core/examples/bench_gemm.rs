//! Raw matmul throughput probe.

use ndarray::Array2;
use std::time::Instant;

fn main() {
    for (m, k, n) in [(8192, 144, 32), (25600, 9, 16), (2048, 288, 64), (512, 512, 512)] {
        let a = Array2::<f64>::from_elem((m, k), 1.01);
        let b = Array2::<f64>::from_elem((k, n), 0.99);
        let t0 = Instant::now();
        let reps = 5;
        for _ in 0..reps {
            let c = a.dot(&b);
            std::hint::black_box(c[(0, 0)]);
        }
        let secs = t0.elapsed().as_secs_f64() / reps as f64;
        let gflops = 2.0 * (m * k * n) as f64 / secs / 1e9;
        println!("({m:>5} x {k:>3}) @ ({k:>3} x {n:>3}): {:>7.2} ms  {gflops:>6.2} GFLOP/s", secs * 1000.0);
    }
}
