use physmle_core::autodiff::kernels::*;
use std::time::Instant;

#[test]
#[ignore]
fn conv_phase_breakdown() {
    let b = 6usize;
    let g = ConvGeom { c_in: 16, h: 32, w: 256, c_out: 16, kh: 3, kw: 3, sh: 2, sw: 2, ph: 1, pw: 1, oh: 16, ow: 128 };
    let x: Vec<f32> = (0..b * g.in_plane()).map(|i| (i % 97) as f32 * 0.01).collect();
    let w: Vec<f32> = (0..g.c_out * g.ck()).map(|i| (i % 13) as f32 * 0.02 - 0.1).collect();
    let iters = 40;

    let t0 = Instant::now();
    let mut keep = None;
    for _ in 0..iters {
        let (o, c) = conv2d_forward(&x, &w, b, &g, true);
        keep = Some((o, c));
    }
    let fwd = t0.elapsed().as_secs_f64() * 1000.0 / iters as f64;
    let (out, cols) = keep.unwrap();

    let t0 = Instant::now();
    for _ in 0..iters {
        let mut dx = vec![0.0f32; x.len()];
        conv2d_backward_input(&out, &w, b, &g, &mut dx);
    }
    let bwd_in = t0.elapsed().as_secs_f64() * 1000.0 / iters as f64;

    let t0 = Instant::now();
    for _ in 0..iters {
        let mut dw = vec![0.0f32; w.len()];
        conv2d_backward_weight(&out, &x, cols.as_deref(), b, &g, &mut dw);
    }
    let bwd_w = t0.elapsed().as_secs_f64() * 1000.0 / iters as f64;

    let fwd_macs = (b * g.c_out * g.ck() * g.oh * g.ow) as f64;
    println!("fwd {fwd:.2} ms ({:.1} GMAC/s) | bwd_in {bwd_in:.2} ms | bwd_w {bwd_w:.2} ms",
             fwd_macs / fwd / 1e6);
}
