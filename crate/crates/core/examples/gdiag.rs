// diagnose worst gradcheck coordinates for enhance/reconstruct
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ustvsr::params::{Bound, Params};
use ustvsr::tensor::graph::{Graph, Var};
use ustvsr::tensor::{ops, Tensor};

fn fractional_flow(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(&[2, h, w], |_| {
        let mag = rng.gen_range(0.15..0.45);
        let whole = rng.gen_range(-1..=1) as f64;
        whole + if rng.gen_bool(0.5) { mag } else { -mag }
    })
}

fn main() {
    let jitter: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let cfg = ustvsr::net::NetConfig {
        channels: 6, extractor_blocks: 1, trunk_blocks: 2, sardb_every: 2,
        rdb_layers: 2, growth: 3,
        gpl: ustvsr::gpl::GplConfig { c_in: 6, c_inter: 15, c_out: 6, hidden: 8, offsets_enabled: true },
    };
    let mut p32 = ustvsr::net::init_net(&cfg, 109);
    p32.jitter(&mut ChaCha8Rng::seed_from_u64(109 ^ 0xabcd), jitter);
    let params = p32.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let feats = Tensor::from_fn(&[6, 6, 6], |_| rng.gen_range(-1.0..1.0));
    let reference = Tensor::from_fn(&[3, 6, 6], |_| rng.gen_range(0.0..1.0));

    let names: Vec<String> = params.names().cloned().collect();
    let mut inputs = vec![feats, reference];
    inputs.extend(names.iter().map(|n| params.get(n).unwrap().clone()));

    let f = |tensors: &[Tensor<f64>]| -> (Graph<f64>, Vec<Var<f64>>, Var<f64>) {
        let g: Graph<f64> = Graph::new();
        let vars: Vec<Var<f64>> = tensors.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
        let mut map = std::collections::BTreeMap::new();
        for (i, n) in names.iter().enumerate() { map.insert(n.clone(), vars[i + 2].clone()); }
        let bound = Bound::from_map(map);
        let y = ops::sum_all(&ustvsr::net::reconstruct_var(&bound, &cfg, &vars[0], &vars[1], 9, 9).unwrap());
        (g, vars, y)
    };

    let (g, vars, y) = f(&inputs);
    let grads = g.backward(&y);
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape()))).collect();

    let mut worst: Vec<(f64, f64, f64, usize, usize)> = Vec::new();
    let mut rng2 = ChaCha8Rng::seed_from_u64(8);
    let total: usize = inputs.iter().map(|t| t.len()).sum();
    let mut work = inputs.clone();
    for _ in 0..150 {
        let flat = rng2.gen_range(0..total);
        let (mut ti, mut off) = (0usize, flat);
        while off >= inputs[ti].len() { off -= inputs[ti].len(); ti += 1; }
        let orig = work[ti].data()[off];
        let h = 1e-5;
        work[ti].data_mut()[off] = orig + h;
        let fp = f(&work).2.item();
        work[ti].data_mut()[off] = orig - h;
        let fm = f(&work).2.item();
        work[ti].data_mut()[off] = orig;
        let num = (fp - fm) / (2.0 * h);
        let ana = analytic[ti].data()[off];
        let abs = (ana - num).abs();
        let rel = abs / ana.abs().max(num.abs()).max(1e-6);
        worst.push((rel, ana, num, ti, off));
    }
    worst.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    println!("jitter {jitter}: worst coordinates:");
    for (rel, a, n, ti, off) in worst.iter().take(6) {
        println!("  rel {rel:.3e} analytic {a:.6e} numeric {n:.6e} (input {ti} off {off})");
    }
}
