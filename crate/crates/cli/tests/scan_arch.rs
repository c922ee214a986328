use flowgeo_cli::config::RunConfig;
use flowgeo_core::dataset;
use flowgeo_core::geometry::PullbackGeometry;
use flowgeo_core::rae::{Rae, SelectBy};
use flowgeo_core::training::{train, TrainState};

fn curve_dist(state: &TrainState, ds: &flowgeo_core::dataset::Dataset, seed: u64) -> f64 {
    let g = PullbackGeometry::new(state.prior.clone());
    let r = Rae::build_from_samples(g, &ds.clean_reference, SelectBy::LatentDim(1)).unwrap();
    let dense = dataset::sinusoid_dense_curve(seed, 20_000);
    let encoded = r.encode_batch(&ds.clean_reference).unwrap();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..encoded.rows() {
        lo = lo.min(encoded.get2(i, 0));
        hi = hi.max(encoded.get2(i, 0));
    }
    let count = 200;
    let mut total = 0.0;
    for k in 0..count {
        let p = lo + (hi - lo) * (k as f64 + 0.5) / count as f64;
        let x = r.decode(&[p]).unwrap();
        let mut best = f64::INFINITY;
        for j in 0..dense.rows() {
            let q = dense.row(j);
            let d2: f64 = x.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
            best = best.min(d2);
        }
        total += best.sqrt();
    }
    total / count as f64
}

#[test]
fn scan() {
    // Longer-horizon run with checkpoints at 500/1000/2000/4000.
    let mut cfg = RunConfig::preset("sinusoid").unwrap();
    cfg.flow.layers = 4;
    let (ds, corruption) = cfg.build_data().unwrap();
    for iters in [500usize, 1000, 2000, 4000] {
        let mut tc = cfg.train_config(ds.corrupted.rows()).unwrap();
        tc.iterations = iters;
        let state = TrainState::new(&tc, cfg.build_flow(), cfg.build_posterior().unwrap());
        let out = train(&tc, &ds, &corruption, state, |_| Ok(())).unwrap();
        let d = curve_dist(&out.state, &ds, cfg.seed);
        let last = out.state.history.last().unwrap();
        println!("iters={iters}: dist {d:.4} total {:.4} refnll {:.4}", last.total, last.refnll);
    }
    // Degree variations at 500 iterations.
    for degree in [3usize, 5, 7] {
        let mut c2 = RunConfig::preset("sinusoid").unwrap();
        c2.flow.layers = 4;
        c2.flow.degree = degree;
        let (ds2, corr2) = c2.build_data().unwrap();
        let tc = c2.train_config(ds2.corrupted.rows()).unwrap();
        let state = TrainState::new(&tc, c2.build_flow(), c2.build_posterior().unwrap());
        let out = train(&tc, &ds2, &corr2, state, |_| Ok(())).unwrap();
        println!("degree={degree}: dist {:.4}", curve_dist(&out.state, &ds2, c2.seed));
    }
}
