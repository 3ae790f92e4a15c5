mod common;

use common::*;
use txforce::gp::{
    assemble_covariance, log_marginal_likelihood, posterior_latent_force, posterior_predict, GpModel, Series,
};
use txforce::ForceConvention;

const CONVENTIONS: [ForceConvention; 2] = [ForceConvention::Zeroed, ForceConvention::Unzeroed];

#[test]
fn likelihood_matches_dense_gaussian_density() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let conv = CONVENTIONS[seed as usize % 2];
        let model = random_model(&mut r, 2, 1 + seed as usize % 3, 10.0, conv);
        let data = random_data(&mut r, &model, 3 + seed as usize % 4, 10.0);
        let ll = log_marginal_likelihood(&model, &data).unwrap();
        let dense = dense_log_likelihood(&model, &data);
        assert!((ll - dense).abs() <= 1e-8, "seed {seed}: {ll} vs {dense}");
    }
}

#[test]
fn assembled_matrix_matches_pointwise_calls() {
    let mut r = rng(5);
    let model = random_model(&mut r, 2, 1, 6.0, ForceConvention::Unzeroed);
    let data = random_data(&mut r, &model, 3, 6.0);
    let times: Vec<&[f64]> = data.iter().map(|s| s.times.as_slice()).collect();
    let k = assemble_covariance(&model, &times).unwrap();
    let dense = train_cov(&model, &data);
    assert_eq!(k.shape(), (6, 6));
    assert!((k - &dense).abs().max() < 1e-12);
}

#[test]
fn covariate_posterior_matches_dense_conditioning() {
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let conv = CONVENTIONS[seed as usize % 2];
        let model = random_model(&mut r, 2, 2, 10.0, conv);
        let data = random_data(&mut r, &model, 4, 10.0);
        let query = random_times(&mut r, 3, 12.0);
        for j in 0..2 {
            let post = posterior_predict(&model, &data, j, &query, false).unwrap();
            let (mean, var) = dense_predict(&model, &data, j, &query);
            assert!(max_abs_diff(&post.mean, &mean) < 1e-8, "seed {seed} j {j}");
            assert!(max_abs_diff(&post.variance, &var) < 1e-8, "seed {seed} j {j}");
        }
    }
}

#[test]
fn force_posterior_matches_dense_conditioning() {
    for seed in 0..10 {
        let mut r = rng(200 + seed);
        let conv = CONVENTIONS[seed as usize % 2];
        let model = random_model(&mut r, 1, 1, 8.0, conv);
        let data = random_data(&mut r, &model, 4, 8.0);
        let query = random_times(&mut r, 3, 10.0);
        let post = posterior_latent_force(&model, &data, 0, &query).unwrap();
        let (mean, var) = dense_force(&model, &data, 0, &query);
        assert!(max_abs_diff(&post.force.mean, &mean) < 1e-8, "seed {seed}");
        assert!(max_abs_diff(&post.force.variance, &var) < 1e-8, "seed {seed}");
    }
}

#[test]
fn noise_flag_adds_noise_variance() {
    let mut r = rng(9);
    let model = random_model(&mut r, 2, 1, 10.0, ForceConvention::Zeroed);
    let data = random_data(&mut r, &model, 5, 10.0);
    let q = [1.0, 4.0, 9.0];
    let a = posterior_predict(&model, &data, 1, &q, false).unwrap();
    let b = posterior_predict(&model, &data, 1, &q, true).unwrap();
    for k in 0..3 {
        assert_eq!(a.mean[k], b.mean[k]);
        assert!((b.variance[k] - a.variance[k] - model.covariates[1].noise_var).abs() < 1e-15);
    }
}

#[test]
fn adding_an_observation_never_increases_variance() {
    for seed in 0..25 {
        let mut r = rng(300 + seed);
        let conv = CONVENTIONS[seed as usize % 2];
        let mut model = random_model(&mut r, 2, 2, 10.0, conv);
        let mut data = random_data(&mut r, &model, 4, 10.0);
        // Relative jitter scales with the largest diagonal, which the new point can raise.
        model.jitter = 1e-14;
        let query = random_times(&mut r, 6, 12.0);
        let before: Vec<Vec<f64>> =
            (0..2).map(|j| posterior_predict(&model, &data, j, &query, false).unwrap().variance).collect();
        let j = seed as usize % 2;
        let t = r_time(&mut r);
        let pos = data[j].times.partition_point(|&x| x <= t);
        data[j].times.insert(pos, t);
        data[j].values.insert(pos, 0.3);
        for (c, prev) in before.iter().enumerate() {
            let after = posterior_predict(&model, &data, c, &query, false).unwrap().variance;
            for q in 0..query.len() {
                assert!(after[q] <= prev[q] + 1e-8, "seed {seed} covariate {c} query {q}: {} > {}", after[q], prev[q]);
            }
        }
    }
}

fn r_time(r: &mut rand_chacha::ChaCha8Rng) -> f64 {
    random_times(r, 1, 10.0)[0]
}

#[test]
fn decoupled_covariate_marginalizes() {
    for seed in 0..10 {
        let mut r = rng(400 + seed);
        let conv = CONVENTIONS[seed as usize % 2];
        let mut model = random_model(&mut r, 2, 2, 10.0, conv);
        // Covariate 1 no longer shares any force with covariate 0.
        model.covariates[1].effects = vec![0.0; 2];
        let data = random_data(&mut r, &model, 5, 10.0);
        let query = random_times(&mut r, 4, 10.0);
        let joint = posterior_predict(&model, &data, 0, &query, false).unwrap();
        let single = GpModel {
            covariates: vec![model.covariates[0].clone()],
            ..model.clone()
        };
        let alone = posterior_predict(&single, &data[..1], 0, &query, false).unwrap();
        assert!(max_abs_diff(&joint.mean, &alone.mean) < 1e-8, "seed {seed}");
        assert!(max_abs_diff(&joint.variance, &alone.variance) < 1e-8, "seed {seed}");
    }
}

#[test]
fn zeroed_posteriors_are_translation_covariant() {
    let shift = 7.25;
    for seed in 0..10 {
        let mut r = rng(500 + seed);
        let model = random_model(&mut r, 2, 2, 10.0, ForceConvention::Zeroed);
        let data = random_data(&mut r, &model, 5, 10.0);
        let query = random_times(&mut r, 4, 12.0);
        let mut moved = model.clone();
        for t in &mut moved.treatments {
            t.time += shift;
        }
        let moved_data: Vec<Series> = data
            .iter()
            .map(|s| Series::new(s.times.iter().map(|t| t + shift).collect(), s.values.clone()))
            .collect();
        let moved_query: Vec<f64> = query.iter().map(|t| t + shift).collect();
        for j in 0..2 {
            let a = posterior_predict(&model, &data, j, &query, false).unwrap();
            let b = posterior_predict(&moved, &moved_data, j, &moved_query, false).unwrap();
            assert!(max_abs_diff(&a.mean, &b.mean) < 1e-8, "seed {seed}");
            assert!(max_abs_diff(&a.variance, &b.variance) < 1e-8, "seed {seed}");
        }
        let a = posterior_latent_force(&model, &data, 1, &query).unwrap();
        let b = posterior_latent_force(&moved, &moved_data, 1, &moved_query).unwrap();
        assert!(max_abs_diff(&a.force.mean, &b.force.mean) < 1e-8);
    }
}

#[test]
fn far_query_reverts_to_prior() {
    let mut r = rng(600);
    for conv in CONVENTIONS {
        let mut model = random_model(&mut r, 2, 1, 10.0, conv);
        model.covariates[0].d = 1.0;
        // Periodic terms never decorrelate.
        model.covariates[0].periodic = None;
        model.treatments[0].length_scale = 1.0;
        let data = random_data(&mut r, &model, 6, 10.0);
        let far = [400.0];
        let post = posterior_predict(&model, &data, 0, &far, false).unwrap();
        let prior_var = signal_cov(&model, 0, far[0], 0, far[0]);
        let c = &model.covariates[0];
        assert!((post.mean[0] - c.b / c.d).abs() <= 0.01 * (c.b / c.d).abs().max(prior_var.sqrt()));
        assert!((post.variance[0] - prior_var).abs() <= 0.01 * prior_var);
    }
}

#[test]
fn near_noiseless_posterior_interpolates() {
    let mut r = rng(700);
    let mut model = random_model(&mut r, 1, 1, 10.0, ForceConvention::Zeroed);
    model.covariates[0].noise_var = 1e-12;
    model.covariates[0].periodic = None;
    model.jitter = 1e-10;
    let data = vec![Series::new(vec![1.0, 3.0, 6.0], vec![0.4, -0.2, 1.1])];
    let post = posterior_predict(&model, &data, 0, &data[0].times, false).unwrap();
    assert!(max_abs_diff(&post.mean, &data[0].values) < 1e-4);
}

#[test]
fn force_without_coupling_keeps_its_prior() {
    let mut r = rng(800);
    for conv in CONVENTIONS {
        let mut model = random_model(&mut r, 2, 1, 10.0, conv);
        for c in &mut model.covariates {
            c.effects = vec![0.0];
        }
        let data = random_data(&mut r, &model, 5, 10.0);
        let mark = model.treatments[0].time;
        let query = [mark - 1.0, mark + 0.5, mark + 3.0];
        let post = posterior_latent_force(&model, &data, 0, &query).unwrap();
        assert!(post.force.mean.iter().all(|&m| m == 0.0));
        for (q, &s) in query.iter().enumerate() {
            assert_eq!(post.force.variance[q], force_prior(&model, 0, s, s));
        }
        if conv == ForceConvention::Unzeroed {
            assert_eq!(post.force.variance[1], 1.0);
        }
    }
}

#[test]
fn pre_mark_data_is_uninformative_about_a_zeroed_force() {
    let mut r = rng(900);
    let mut model = random_model(&mut r, 2, 1, 10.0, ForceConvention::Zeroed);
    model.treatments[0].time = 8.0;
    let data: Vec<Series> = (0..2)
        .map(|_| {
            let t = random_times(&mut r, 5, 7.9);
            Series::new(t.clone(), t.iter().map(|x| x.sin()).collect())
        })
        .collect();
    let query = [8.5, 10.0, 14.0];
    let post = posterior_latent_force(&model, &data, 0, &query).unwrap();
    for q in 0..3 {
        assert!(post.force.mean[q].abs() < 1e-6);
        assert!((post.force.variance[q] - 1.0).abs() < 1e-6);
    }
}
