//! Scratch timing probe for one structure-recovery repetition.
//! args: [fit_subjects] [inner] [outer] [adam_lr] [reps] [lambda...]
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use structgp::data::ObservationSet;
use structgp::fit::{self, FitMode, FitSettings};
use structgp::grad::structgp_nmll_grad;
use structgp::learn::LagrangianConfig;
use structgp::metrics;
use structgp::sim::*;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let fit_subjects: usize = args.first().map(|s| s.parse().unwrap()).unwrap_or(60);
    let inner: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(60);
    let outer: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(6);
    let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.02);
    let reps: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(3);
    let lambdas: Vec<f64> = if args.len() > 5 {
        args[5..].iter().map(|s| s.parse().unwrap()).collect()
    } else {
        vec![0.3, 0.05]
    };
    let cfg = SimConfig { k: 5, subjects: 200, obs_per_task: 25, noise_var: 1e-2, seed: 808, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for rep in 0..reps {
        let truth = sample_ground_truth(&cfg, &mut rng);
        let obs = sample_trajectories(&truth, &cfg, &mut rng).unwrap();
        let sub: Vec<_> = obs
            .records()
            .iter()
            .filter(|r| r.subject < fit_subjects)
            .cloned()
            .collect();
        let obs_fit = ObservationSet::new(sub, cfg.k, fit_subjects).unwrap();
        if rep == 0 {
            let t0 = std::time::Instant::now();
            for _ in 0..3 {
                std::hint::black_box(structgp_nmll_grad(&truth.params, &obs_fit).unwrap().nmll);
            }
            println!("grad eval ({fit_subjects} subj): {:?}", t0.elapsed() / 3);
        }
        let gb: usize = std::env::var("GB").ok().and_then(|s| s.parse().ok()).unwrap_or(0);
        let settings = FitSettings {
            mode: FitMode::StructGp,
            lambda_grid: lambdas.clone(),
            lagrangian: LagrangianConfig {
                inner_steps: inner,
                max_outer: outer,
                lr,
                ..Default::default()
            },
            adam_lr: lr,
            adam_steps: 100,
            learn_noise: false,
            noise_init: 0.1,
            graph_batch_subjects: gb,
            seed: 11,
            ..Default::default()
        };
        if std::env::var("DENSE").is_ok() {
            let dense = FitSettings {
                mode: FitMode::NoStructure,
                adam_steps: inner * outer,
                adam_lr: lr,
                learn_noise: false,
                noise_init: 0.1,
                seed: 11,
                ..Default::default()
            };
            let t0 = std::time::Instant::now();
            let result = fit::fit(&obs_fit, &dense, None).unwrap();
            let truth_nmll = structgp_nmll_grad(&truth.params, &obs_fit).unwrap().nmll;
            println!(
                "rep {rep} dense: {:?}, nmll learned {:.1} truth {:.1}",
                t0.elapsed(),
                result.nmll,
                truth_nmll
            );
            println!("truth S:\n{:.2}", truth.params.s);
            println!("dense S:\n{:.2}", result.params.s);
            continue;
        }
        let t0 = std::time::Instant::now();
        let result = fit::fit(&obs_fit, &settings, None).unwrap();
        let learned = result.structure.unwrap();
        let truth_nmll = structgp_nmll_grad(&truth.params, &obs_fit).unwrap().nmll;
        println!(
            "rep {rep}: {:?}, shd {}, f1 {:.3}, lambda {}, edges {:?}, nmll learned {:.1} truth {:.1}",
            t0.elapsed(),
            metrics::shd(&learned.adjacency, &truth.adjacency),
            metrics::edge_f1(&truth.adjacency, &learned.adjacency),
            learned.lambda,
            truth.adjacency.edges().count(),
            learned.nmll,
            truth_nmll,
        );
        println!("truth S:\n{:.2}", truth.params.s);
        println!("learned S (thresholded):\n{:.2}", result.params.s);
    }
}
