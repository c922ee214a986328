//! End-to-end training sanity on a 2-d Gaussian: with negligible corruption
//! the objective reduces to near-maximum-likelihood and the learned density
//! must approach the truth in grid-estimated KL.

use flowgeo_core::corruption::{CorruptionModel, LinearOperator};
use flowgeo_core::dataset::Dataset;
use flowgeo_core::flow::FlowModel;
use flowgeo_core::posterior::PosteriorModel;
use flowgeo_core::tensor::Tensor;
use flowgeo_core::training::{train, TrainConfig, TrainState};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Truth: x = S z with z ~ N(0, I), S = [[0.9, 0.3], [0.0, 0.5]].
fn truth_sample(rng: &mut ChaCha8Rng) -> [f64; 2] {
    let z0 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
    let z1 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
    [0.9 * z0 + 0.3 * z1, 0.5 * z1]
}

fn truth_log_density(x: &[f64]) -> f64 {
    // Sigma = S S^T; closed-form 2-d Gaussian log-density.
    let (s00, s01, s11) = (0.9f64 * 0.9 + 0.3 * 0.3, 0.3 * 0.5, 0.5f64 * 0.5);
    let det = s00 * s11 - s01 * s01;
    let (i00, i01, i11) = (s11 / det, -s01 / det, s00 / det);
    let q = x[0] * x[0] * i00 + 2.0 * x[0] * x[1] * i01 + x[1] * x[1] * i11;
    -0.5 * q - (2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln()
}

#[test]
fn near_maximum_likelihood_training_reaches_small_kl() {
    let corruption =
        CorruptionModel::new(LinearOperator::Identity { dim: 2 }, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 500;
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let x = truth_sample(&mut rng);
        let y = corruption.apply(&x, &mut rng).unwrap();
        data.extend(y);
    }
    let dataset = Dataset {
        corrupted: Tensor::from_shape(n, 2, data).unwrap(),
        clean_reference: Tensor::zeros(&[0, 2]),
        ground_truth: None,
    };

    let config = TrainConfig {
        vlb_samples: 1,
        lambda: 0.0,
        mu: 0.0,
        learning_rate: 1e-2,
        iterations: 2000,
        batch_size: None,
        seed: 11,
        checkpoint_every: None,
    };
    let mut init_rng = ChaCha8Rng::seed_from_u64(1);
    let prior = FlowModel::init_random(2, 2, 3, &mut init_rng);
    let posterior = PosteriorModel::new(2, 2, 8, 6, None, 2).unwrap();
    let out = train(
        &config,
        &dataset,
        &corruption,
        TrainState::new(&config, prior, posterior),
        |_| Ok(()),
    )
    .unwrap();
    assert!(out.aborted.is_none(), "training aborted: {:?}", out.aborted);

    // Grid KL(truth || learned).
    let lim = 5.0;
    let steps = 250;
    let h = 2.0 * lim / steps as f64;
    let mut kl = 0.0;
    for i in 0..steps {
        for j in 0..steps {
            let x = [-lim + (i as f64 + 0.5) * h, -lim + (j as f64 + 0.5) * h];
            let lt = truth_log_density(&x);
            let pt = lt.exp();
            if pt < 1e-12 {
                continue;
            }
            let lm = out.state.prior.log_density(&x).unwrap();
            kl += pt * (lt - lm) * h * h;
        }
    }
    assert!(kl < 0.05, "grid KL to truth is {kl}");

    // And the loss actually went down substantially.
    let first = out.state.history.first().unwrap().total;
    let last = out.state.history.last().unwrap().total;
    assert!(last < first, "loss did not decrease: {first} -> {last}");
}
