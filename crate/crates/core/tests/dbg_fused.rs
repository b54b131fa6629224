use physmle_core::autodiff::{check_gradients, ParamCategory, ParamStore, Tape};
use rand::Rng as _;

#[test]
fn fused_concat_slice_conv_gradcheck() {
    let mut rng = physmle_core::rng::seeded(4);
    let x: Vec<f32> = (0..2 * 3 * 6 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w_a: Vec<f32> = (0..2 * 3 * 9).map(|_| rng.gen_range(-0.5..0.5)).collect();

    // weight of the second part is the parameter
    let mut store = ParamStore::new();
    let w_main: Vec<f32> = (0..4 * 3 * 9).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let pid = store.register("w", vec![4, 3, 3, 3], w_main, true, ParamCategory::Heads);
    let x2 = x.clone();
    let wa2 = w_a.clone();
    let rep = check_gradients(&mut store, &[pid], 1e-2, 24, 9, move |s| {
        let mut t = Tape::new();
        let xn = t.constant(vec![2, 3, 6, 6], x2.clone())?;
        let wp = t.param(s, 0);
        let wc = t.constant(vec![2, 3, 3, 3], wa2.clone())?;
        let cat = t.concat_dim0(&[wp, wc])?;
        let y = t.conv2d(xn, cat, (2, 2), (1, 1))?;
        let part = t.slice_chans(y, 0, 4)?;
        let part2 = t.slice_chans(y, 4, 6)?;
        let sg = t.sigmoid(part2);
        let m = t.mul(part, {
            let c: Vec<f32> = (0..2 * 4 * 3 * 3).map(|i| (i % 5) as f32 * 0.2 - 0.4).collect();
            t.constant(vec![2, 4, 3, 3], c)?
        })?;
        let s1 = t.sum(m);
        let s2 = t.sum(sg);
        let loss = t.add(s1, s2)?;
        Ok((t, loss))
    })
    .unwrap();
    println!("fused path rel err {}", rep.max_rel_err);
    assert!(rep.max_rel_err < 1e-3, "rel {}", rep.max_rel_err);

    // input gradient through the fused conv
    let mut store = ParamStore::new();
    let pid = store.register("x", vec![2, 3, 6, 6], x, true, ParamCategory::Heads);
    let wa3 = w_a.clone();
    let rep = check_gradients(&mut store, &[pid], 1e-2, 24, 10, move |s| {
        let mut t = Tape::new();
        let xn = t.param(s, 0);
        let wc = t.constant(vec![2, 3, 3, 3], wa3.clone())?;
        let wc2 = t.constant(vec![2, 3, 3, 3], vec![0.1; 54])?;
        let cat = t.concat_dim0(&[wc, wc2])?;
        let y = t.conv2d(xn, cat, (1, 1), (1, 1))?;
        let p1 = t.slice_chans(y, 0, 2)?;
        let p2 = t.slice_chans(y, 2, 4)?;
        let sg = t.sigmoid(p1);
        let m = t.mul(sg, p2)?;
        let loss = t.mean(m);
        Ok((t, loss))
    })
    .unwrap();
    println!("fused input rel err {}", rep.max_rel_err);
    assert!(rep.max_rel_err < 1e-3, "rel {}", rep.max_rel_err);
}
