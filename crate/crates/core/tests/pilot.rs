// Manual pilot runs for calibrating the desk configuration. Kept
// ignored; run with `cargo test --test pilot -- --ignored --nocapture`.

use physmle_core::eval::evaluate;
use physmle_core::stmap::{build_domain, DomainManifest, DomainSpec, GeneratorParams, LabelMask};
use physmle_core::train::{train, TrainConfig};
use std::path::Path;
use std::time::Instant;

fn default_domains(dir: &Path, seed: u64) -> Vec<DomainManifest> {
    let masks = [
        (
            "d0",
            LabelMask { hr: true, bvp: true, spo2: true, rr: false },
            1.0f32,
            [1.0f32, 1.0, 1.0],
            0.6f32,
        ),
        (
            "d1",
            LabelMask { hr: true, bvp: true, spo2: false, rr: false },
            1.3,
            [1.05, 1.0, 0.95],
            1.0,
        ),
        (
            "d2",
            LabelMask { hr: true, bvp: false, spo2: false, rr: true },
            0.8,
            [0.95, 1.05, 1.0],
            1.4,
        ),
        (
            "d3",
            LabelMask { hr: true, bvp: true, spo2: false, rr: true },
            1.6,
            [1.1, 0.9, 1.0],
            0.8,
        ),
    ];
    masks
        .iter()
        .enumerate()
        .map(|(i, (id, mask, gain, chroma, noise))| {
            let spec = DomainSpec {
                domain_id: id.to_string(),
                label_mask: *mask,
                params: GeneratorParams {
                    gain: *gain,
                    chroma: *chroma,
                    noise_sigma: *noise,
                    ..GeneratorParams::default()
                },
                n_subjects: 20,
                windows_per_subject: 3,
                window_step: 10,
                seed: seed + i as u64,
            };
            build_domain(&spec, dir).unwrap()
        })
        .collect()
}

#[test]
#[ignore]
fn pilot_step_timing() {
    let dir = tempfile::tempdir().unwrap();
    let manifests = default_domains(dir.path(), 1);
    let cfg = TrainConfig {
        iterations: 10,
        ..TrainConfig::desk()
    };
    let t0 = Instant::now();
    let (_, _, out) = train(&cfg, &manifests[..3], None, None).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "10 iters in {dt:.1}s → {:.0} ms/iter; first joint {:.3}, last {:.3}",
        dt * 100.0,
        out.log.first().unwrap().joint,
        out.log.last().unwrap().joint
    );
}

#[test]
#[ignore]
fn pilot_learning_curve() {
    let dir = tempfile::tempdir().unwrap();
    let manifests = default_domains(dir.path(), 1);
    let iters: usize = std::env::var("PILOT_ITERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(400);
    let cfg = TrainConfig {
        iterations: iters,
        log_every: 1,
        ..TrainConfig::desk()
    };
    let t0 = Instant::now();
    let (mut model, store, out) = train(&cfg, &manifests[..3], None, None).unwrap();
    println!("trained {} iters in {:.1}s", iters, t0.elapsed().as_secs_f64());
    for w in out.log.chunks(iters / 10) {
        let mean = |f: fn(&physmle_core::train::LossLogLine) -> f32| {
            w.iter().map(|l| f(l)).sum::<f32>() / w.len() as f32
        };
        println!(
            "it {:4}: joint {:7.3} bvp {:.3} hr {:6.2} spo2 {:5.2} rr {:5.2} oem {:6.2} hb {:5.1} br {:4.1} asp {:5.2} lam {:.2}",
            w[0].iter,
            mean(|l| l.joint),
            mean(|l| l.l_bvp),
            mean(|l| l.l_hr),
            mean(|l| l.l_spo2),
            mean(|l| l.l_rr),
            mean(|l| l.l_oem),
            mean(|l| l.l_hb),
            mean(|l| l.l_br),
            mean(|l| l.l_asp),
            w[w.len() - 1].lambda,
        );
    }
    let report = evaluate(&mut model, &store, &cfg, &manifests[3..]).unwrap();
    for (k, m) in &report.tasks {
        println!("target {k}: mae {:.2} rmse {:.2} pearson {:?} n={}", m.mae, m.rmse, m.pearson, m.n);
    }
    println!("bvp mean pearson {:?}", report.bvp_mean_pearson);
}

#[test]
#[ignore]
fn pilot_forward_only_timing() {
    use physmle_core::autodiff::{ParamStore, Tape};
    use physmle_core::model::{stmaps_to_tensor, Model};
    let dir = tempfile::tempdir().unwrap();
    let manifests = default_domains(dir.path(), 1);
    let cfg = TrainConfig::desk();
    let mut store = ParamStore::new();
    let mut model = Model::init(&cfg.model, 0, &mut store).unwrap();
    let (map, _) = physmle_core::stmap::read_stmap(&manifests[0].entries[0].path).unwrap();
    let maps: Vec<&physmle_core::stmap::StMap> = (0..6).map(|_| &map).collect();
    let input = stmaps_to_tensor(&maps, &cfg.model).unwrap();

    // eval-mode forward (no grads recorded on params? params still loaded)
    let t0 = Instant::now();
    for _ in 0..5 {
        let mut tape = Tape::new();
        let _ = model.forward(&mut tape, &store, input.clone(), false).unwrap();
    }
    println!("fwd(eval) {:.0} ms", t0.elapsed().as_secs_f64() * 200.0);

    // train-mode forward + full backward of mean(bvp)
    let t0 = Instant::now();
    for _ in 0..5 {
        let mut tape = Tape::new();
        let (p, _) = model.forward(&mut tape, &store, input.clone(), true).unwrap();
        let l = tape.mean(p.bvp);
        tape.backward(l).unwrap();
    }
    println!("fwd+bwd {:.0} ms", t0.elapsed().as_secs_f64() * 200.0);
}
