use ustvsr::gpl::GplConfig;
use ustvsr::losses::total_loss_var;
use ustvsr::motion::FinetBackend;
use ustvsr::net::{forward_var, NetConfig, ScaleTimeQuery};
use ustvsr::params::bind;
use ustvsr::tensor::graph::Graph;
use ustvsr::training::dataset::make_synthetic_dataset;
use ustvsr::training::{materialize_sample, train, SampleDraw, TrainConfig, TrainMode};

fn main() {
    let net = NetConfig {
        channels: 8, extractor_blocks: 1, trunk_blocks: 2, sardb_every: 2,
        rdb_layers: 2, growth: 4,
        gpl: GplConfig { c_in: 8, c_inter: 16, c_out: 8, hidden: 8, offsets_enabled: true },
    };
    let dataset = make_synthetic_dataset(4, 96, 10).unwrap();
    // fixed validation items
    let t = 0.5; let hr_patch = 48; let lr_patch = 12;
    let items: Vec<_> = (0..4).map(|i| materialize_sample(&dataset, t, hr_patch, lr_patch, &SampleDraw {
        seq: i % 4, y0: 8 + 3*i, x0: 10 + 5*i, hflip: false, vflip: false, t_reverse: false,
    }).unwrap()).collect();

    let eval_loss = |params: &ustvsr::params::Params<f32>| -> f64 {
        let mut acc = 0.0;
        for item in &items {
            let g: Graph<f32> = Graph::new();
            let bound = bind(&g, params);
            let q = ScaleTimeQuery { t, out_h: hr_patch, out_w: hr_patch };
            let (out, _, _) = forward_var(&g, &bound, &net, &item.i0, &item.i1, &q, &FinetBackend::classical()).unwrap();
            let target = g.constant(item.target.tensor().clone());
            acc += total_loss_var(&out, &target, &Default::default()).item() as f64;
        }
        acc / items.len() as f64
    };

    for seed in 0..6u64 {
        let cfg = TrainConfig {
            mode: TrainMode::Unconstrained, iters: 100, batch_size: 2, patch: 12,
            lr: 1e-3, seed, s_range: (1.0, 4.0), net: net.clone(),
            checkpoint_every: 100000, out_path: None, resume: None,
        };
        let before = eval_loss(&ustvsr::net::init_net(&net, seed));
        let out = train(&cfg, &dataset).unwrap();
        let after = eval_loss(&out.params);
        println!("seed {seed}: before {before:.5} after {after:.5} {}", if after < before { "PASS" } else { "fail" });
    }
}
