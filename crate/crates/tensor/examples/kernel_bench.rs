//! Rough single-core throughput check for the matmul kernels.

use drivecap_tensor::kernels::{matmul_acc, matmul_nt_acc, matmul_tn_acc};
use std::time::Instant;

fn main() {
    let (m, k, n) = (128, 128, 128);
    let a: Vec<f64> = (0..m * k).map(|i| (i % 97) as f64 * 0.01 - 0.3).collect();
    let b: Vec<f64> = (0..k * n).map(|i| (i % 89) as f64 * 0.02 - 0.7).collect();
    let mut out = vec![0.0; m * n];
    let flops = (2 * m * k * n) as f64;
    let reps = 2000;

    for (name, f) in [
        ("ikj ", matmul_acc as fn(&[f64], &[f64], usize, usize, usize, &mut [f64])),
        ("nt  ", matmul_nt_acc),
        ("tn  ", matmul_tn_acc),
    ] {
        let t0 = Instant::now();
        for _ in 0..reps {
            out.iter_mut().for_each(|v| *v = 0.0);
            f(&a, &b, m, k, n, &mut out);
        }
        let dt = t0.elapsed().as_secs_f64();
        println!("{name} {:.2} GFLOP/s  (checksum {})", flops * reps as f64 / dt / 1e9, out.iter().sum::<f64>());
    }
}
