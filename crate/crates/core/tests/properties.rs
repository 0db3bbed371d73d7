use proptest::prelude::*;

use shrinkmeta::adapt::{adapt, InnerConfig};
use shrinkmeta::driver::{meta_train_with, Algorithm, ExperimentConfig, TrainOptions};
use shrinkmeta::metagrad::{imaml, sigma_imaml};
use shrinkmeta::models::GaussianObsModel;
use shrinkmeta::params::clip_sigma2;
use shrinkmeta::solver::CgConfig;
use shrinkmeta::taskgen::{HierNormalSpec, TaskSpec};
use shrinkmeta::{Batch, MetaParams, ModulePartition, TaskData, TaskModel};

fn rows(v: &[f64], d: usize) -> Vec<Vec<f64>> {
    v.chunks(d).map(<[f64]>::to_vec).collect()
}

fn gaussian_task(train: &[f64], val: &[f64], d: usize) -> TaskData {
    TaskData::new(Batch::unlabelled(rows(train, d)), Batch::unlabelled(rows(val, d)))
}

fn rel_vec(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

fn tiny_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig::from_json(
        &serde_json::json!({
            "algorithm": "sigma-imaml",
            "tasks": TaskSpec::HierNormal(HierNormalSpec::experiment2(3, 3, 40)),
            "meta": {"lr_phi": 0.05, "lr_log_sigma2": 0.05, "steps": 3, "batch_size": 6},
            "inner": InnerConfig::gd(0.5, 20),
            "seed": seed
        })
        .to_string(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn partition_ranges_tile_the_vector(sizes in proptest::collection::vec(1usize..6, 1..8)) {
        let named: Vec<(String, usize)> = sizes.iter().enumerate().map(|(i, s)| (format!("m{i}"), *s)).collect();
        let p = ModulePartition::from_sizes(&named).unwrap();
        let mut covered = vec![0usize; p.dim()];
        for m in 0..p.len() {
            for i in p.range(m) {
                covered[i] += 1;
            }
        }
        prop_assert!(covered.iter().all(|&c| c == 1));
        let per_module: Vec<f64> = (0..p.len()).map(|m| m as f64).collect();
        let wide = p.broadcast(&per_module);
        for m in 0..p.len() {
            prop_assert!(p.range(m).all(|i| wide[i] == m as f64));
        }
    }

    #[test]
    fn clipping_is_idempotent_and_bounded(ls in proptest::collection::vec(-40.0f64..40.0, 1..6)) {
        let meta = MetaParams::new(vec![0.0; ls.len()], ls);
        let once = clip_sigma2(&meta);
        prop_assert_eq!(&clip_sigma2(&once), &once);
        prop_assert!(once.sigma2_vec().iter().all(|s| (1e-5 * (1.0 - 1e-12)..=1e5 * (1.0 + 1e-12)).contains(s)));
    }

    #[test]
    fn adapted_parameters_are_stationary(
        data in proptest::collection::vec(-3.0f64..3.0, 12),
        phi in proptest::collection::vec(-2.0f64..2.0, 3),
        ls in proptest::collection::vec(-2.0f64..2.0, 3),
    ) {
        let model = GaussianObsModel::identity(3, 1.0).unwrap();
        let p = model.default_partition();
        let meta = MetaParams::new(phi.clone(), ls);
        let train = Batch::unlabelled(rows(&data, 3));
        let a = adapt(&model, &train, &meta, &p, &InnerConfig::gd(0.05, 3000)).unwrap();
        let g = model.grad(&a.theta_hat, &train).unwrap();
        let lam = p.broadcast(&meta.precisions());
        let resid: f64 = (0..3)
            .map(|i| (g[i] + lam[i] * (a.theta_hat[i] - phi[i])).powi(2))
            .sum::<f64>()
            .sqrt();
        prop_assert!(resid < 1e-9, "residual {resid}");
    }

    #[test]
    fn constant_variance_sigma_imaml_matches_imaml(
        data in proptest::collection::vec(-3.0f64..3.0, 18),
        phi in proptest::collection::vec(-2.0f64..2.0, 3),
        log_s2 in -3.0f64..3.0,
        damping in 0.0f64..1.0,
    ) {
        let model = GaussianObsModel::identity(3, 1.0).unwrap();
        let p = model.default_partition();
        let meta = MetaParams::uniform(phi, log_s2.exp(), p.len());
        let lambda = 1.0 / meta.sigma2(0);
        let task = gaussian_task(&data[..9], &data[9..], 3);
        let a = adapt(&model, &task.train, &meta, &p, &InnerConfig::gd(0.05, 3000)).unwrap();
        let cg = |d: f64| CgConfig { max_iters: 50, tol: 1e-14, damping: d, preconditioner: None };
        let s = sigma_imaml(&model, &task, &meta, &p, &a, &cg(damping * lambda)).unwrap();
        let i = imaml(&model, &task, lambda, &p, &a, &cg(damping)).unwrap();
        prop_assert!(rel_vec(&s.d_phi, &i.d_phi) <= 1e-8, "{:?} vs {:?}", s.d_phi, i.d_phi);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn single_task_draws_match_the_generated_pool(seed in any::<u64>(), index in 0usize..40) {
        let spec = TaskSpec::HierNormal(HierNormalSpec::experiment1(2, 3, 40));
        let pool = spec.generate(seed).unwrap();
        prop_assert_eq!(&spec.task(seed, index as u64).unwrap(), &pool[index]);
    }

    #[test]
    fn thread_count_never_changes_metrics(seed in 0u64..1000, threads in 2usize..5) {
        let cfg = tiny_config(seed);
        let one = meta_train_with(&cfg, TrainOptions { threads: Some(1), ..Default::default() }).unwrap();
        let many = meta_train_with(&cfg, TrainOptions { threads: Some(threads), ..Default::default() }).unwrap();
        prop_assert_eq!(one.meta, many.meta);
        for (a, b) in one.metrics.iter().zip(&many.metrics) {
            prop_assert_eq!(a.mean_val_loss.to_bits(), b.mean_val_loss.to_bits());
            prop_assert_eq!(&a.sigma2, &b.sigma2);
        }
    }

    #[test]
    fn every_algorithm_trains_on_swirl_tasks(seed in 0u64..1000) {
        for alg in [Algorithm::SigmaReptile, Algorithm::SigmaMaml, Algorithm::Reptile, Algorithm::MetaSgd] {
            let mut cfg = tiny_config(seed);
            cfg.algorithm = alg;
            let rec = meta_train_with(&cfg, TrainOptions::default()).unwrap();
            prop_assert!(rec.meta.is_finite());
            prop_assert_eq!(rec.metrics.len(), 3);
        }
    }
}
