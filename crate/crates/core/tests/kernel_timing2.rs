use physmle_core::autodiff::kernels::{matmul_acc, matmul_nt_acc, im2col, ConvGeom};
use std::time::Instant;

#[test]
#[ignore]
fn matmul_throughput() {
    for (m, k, n) in [(16usize, 144usize, 2048usize), (64, 576, 512), (128, 1152, 32), (256, 256, 256)] {
        let a: Vec<f32> = (0..m * k).map(|i| (i % 7) as f32 * 0.1).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i % 11) as f32 * 0.05).collect();
        let mut c = vec![0.0f32; m * n];
        let iters = (2e9 / (m * k * n) as f64).max(3.0) as usize;
        let t0 = Instant::now();
        for _ in 0..iters {
            c.fill(0.0);
            matmul_acc(&mut c, &a, &b, m, k, n);
        }
        let dt = t0.elapsed().as_secs_f64();
        println!("mm  {m}x{k}x{n}: {:.2} GMAC/s", (m * k * n * iters) as f64 / dt / 1e9);

        let bt: Vec<f32> = (0..n * k).map(|i| (i % 11) as f32 * 0.05).collect();
        let t0 = Instant::now();
        for _ in 0..iters {
            c.fill(0.0);
            matmul_nt_acc(&mut c, &a, &bt, m, k, n);
        }
        let dt = t0.elapsed().as_secs_f64();
        println!("mmNT {m}x{k}x{n}: {:.2} GMAC/s", (m * k * n * iters) as f64 / dt / 1e9);
    }
}

#[test]
#[ignore]
fn im2col_throughput() {
    let g = ConvGeom { c_in: 16, h: 32, w: 256, c_out: 16, kh: 3, kw: 3, sh: 2, sw: 2, ph: 1, pw: 1, oh: 16, ow: 128 };
    let x: Vec<f32> = (0..g.c_in * g.h * g.w).map(|i| i as f32 * 0.01).collect();
    let mut col = vec![0.0f32; g.ck() * g.oh * g.ow];
    let iters = 300;
    let t0 = Instant::now();
    for _ in 0..iters { im2col(&x, &g, &mut col); }
    let dt = t0.elapsed().as_secs_f64();
    println!("im2col: {:.3} ms ({:.2} GB/s eff)", dt * 1000.0 / iters as f64,
        (col.len() * 4 * iters) as f64 / dt / 1e9);
}
