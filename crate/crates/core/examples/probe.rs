use std::time::Instant;
use ustvsr::gpl::GplConfig;
use ustvsr::net::NetConfig;
use ustvsr::training::dataset::make_synthetic_dataset;
use ustvsr::training::eval::{evaluate, EvalModel};
use ustvsr::training::{train, TrainConfig, TrainMode};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(150);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let c: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(16);
    let patch: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(16);
    let batch: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(2);
    let offsets: bool = args.get(6).map(|s| s != "0").unwrap_or(true);
    let s_fix: f64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(0.0);

    let net = NetConfig {
        channels: c,
        extractor_blocks: 2,
        trunk_blocks: 4,
        sardb_every: 4,
        rdb_layers: 3,
        growth: c / 2,
        gpl: GplConfig { c_in: c, c_inter: 5 * c, c_out: c, hidden: 32, offsets_enabled: offsets },
    };
    let cfg = TrainConfig {
        mode: TrainMode::Unconstrained,
        iters,
        batch_size: batch,
        patch,
        lr,
        seed: 7,
        s_range: if s_fix > 0.0 { (s_fix, s_fix) } else { (1.0, 4.0) },
        net: net.clone(),
        checkpoint_every: 100000,
        out_path: None,
        resume: None,
    };
    let dataset = make_synthetic_dataset(64, 96, 42).unwrap();
    let eval_set = make_synthetic_dataset(8, 96, 4242).unwrap();
    let points = [(0.3, 2.5), (0.7, 3.5)];

    let t0 = Instant::now();
    let base = evaluate(&eval_set, &EvalModel::Baseline, &points).unwrap();
    println!("baseline eval ({:?}):", t0.elapsed());
    for r in &base { println!("  t={} s={} psnr={:.3} ssim={:.4}", r.t, r.s, r.psnr, r.ssim); }

    let t0 = Instant::now();
    let out = train(&cfg, &dataset).unwrap();
    let dt = t0.elapsed();
    println!("train {iters} iters in {:?} ({:.3} s/iter)", dt, dt.as_secs_f64() / iters as f64);
    let n = out.curve.len();
    for chunk in out.curve.chunks(n.div_ceil(10)) {
        let mean: f64 = chunk.iter().map(|(_, l)| l).sum::<f64>() / chunk.len() as f64;
        println!("  steps {:>4}-{:>4}: mean loss {:.6}", chunk[0].0, chunk[chunk.len()-1].0, mean);
    }

    let t0 = Instant::now();
    let rows = evaluate(&eval_set, &EvalModel::Net { cfg: &net, params: &out.params }, &points).unwrap();
    println!("model eval ({:?}):", t0.elapsed());
    for (r, b) in rows.iter().zip(&base) {
        println!("  t={} s={} psnr={:.3} (baseline {:.3}, gap {:+.3}) ssim={:.4}", r.t, r.s, r.psnr, b.psnr, r.psnr - b.psnr, r.ssim);
    }
}
