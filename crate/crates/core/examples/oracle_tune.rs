//! Scratch: union-stage recipes on exact single-Gaussian priors (not part of the build).

use std::time::Instant;

use flowmerge_core::cfm::{pretrain_cfm, NetConfig, PretrainConfig};
use flowmerge_core::critic::CriticTrainConfig;
use flowmerge_core::driver::{run, GammaSchedule, MergeConfig, ObjectiveEstimator};
use flowmerge_core::finetune::FineTuneConfig;
use flowmerge_core::flow::{sample_ode, FlowModel, SourceDistribution};
use flowmerge_core::grid::{
    analytic_grid, density_from_samples, grid_kl, DEFAULT_BOUNDS_2D, DEFAULT_RES_2D,
};
use flowmerge_core::mixture::{GaussianMixture, MixtureComponent};
use flowmerge_core::operators::{
    DivergenceKind, LambdaSchedule, MergeMode, OperatorSpec, RewardFn,
};
use flowmerge_core::schedule::Schedule;

const B2: [(f64, f64); 2] = [DEFAULT_BOUNDS_2D, DEFAULT_BOUNDS_2D];
const R2: [usize; 2] = [DEFAULT_RES_2D, DEFAULT_RES_2D];

fn main() {
    let mk = |cx: f64, seed: u64| -> (FlowModel, GaussianMixture) {
        let mix = GaussianMixture::isotropic(&[cx, 0.0], 0.36);
        let m = pretrain_cfm(
            &mix,
            Schedule::Linear,
            &NetConfig::with_hidden(&[64, 64, 64]),
            &PretrainConfig {
                steps: 2500,
                batch: 128,
                lr: 1e-3,
            },
            seed,
        )
        .unwrap();
        (m, mix)
    };
    let (p5, m5) = mk(-1.4, 501);
    let (p6, m6) = mk(1.4, 502);
    let target_mix = GaussianMixture::new(vec![
        MixtureComponent {
            mean: vec![-1.4, 0.0],
            var: vec![0.36, 0.36],
            weight: 0.5,
        },
        MixtureComponent {
            mean: vec![1.4, 0.0],
            var: vec![0.36, 0.36],
            weight: 0.5,
        },
    ])
    .unwrap();
    let target = analytic_grid(&target_mix, &B2, &R2).unwrap();
    let spec = OperatorSpec {
        priors: vec![p5.clone(), p6.clone()],
        divergences: vec![DivergenceKind::ReverseKl; 2],
        alphas: vec![1.0, 1.0],
        reward: RewardFn::None,
        lambda: LambdaSchedule::default(),
        init_index: 0,
    };
    let est = ObjectiveEstimator::from_grids(
        vec![
            analytic_grid(&m5, &B2, &R2).unwrap(),
            analytic_grid(&m6, &B2, &R2).unwrap(),
        ],
        4096,
        100,
    )
    .unwrap();
    let variants: Vec<(&str, GammaSchedule, usize, Vec<usize>)> = vec![
        ("const-0.08-k45", GammaSchedule::Constant(0.08), 45, vec![64, 64]),
        (
            "curveball-0.3x8-0.05x30",
            GammaSchedule::PerIteration(
                std::iter::repeat(0.3)
                    .take(8)
                    .chain(std::iter::repeat(0.05).take(30))
                    .collect(),
            ),
            38,
            vec![64, 64],
        ),
        ("const-0.08-k45-bigcritic", GammaSchedule::Constant(0.08), 45, vec![96, 96]),
    ];
    for (name, gamma, k, hidden) in variants {
        let cfg = MergeConfig {
            outer_iters: k,
            gamma,
            mode: MergeMode::Terminal,
            keep_best: true,
            critic_hidden: hidden,
            critic_pool: 2048,
            critic_rkl: CriticTrainConfig {
                steps: 600,
                batch: 128,
                lr: 3e-4,
                grad_penalty: 0.0,
            },
            finetune: FineTuneConfig {
                inner_steps: 20,
                trajectories: 96,
                sde_steps: 50,
                gamma: 1.0,
                lr: 1e-3,
                seed: 0,
            },
            objective_samples: 4096,
            seed: 503,
            ..MergeConfig::default()
        };
        let t0 = Instant::now();
        let out = run(&spec, &cfg, &est).unwrap();
        let s = sample_ode(&out.model, SourceDistribution::StandardNormal, 49_152, 100, 99)
            .unwrap();
        let g = density_from_samples(&s, 2, &B2, &R2, None).unwrap();
        let kl = grid_kl(&g, &target).unwrap();
        println!(
            "{name}: selected k={} kl={kl:.4} last_total={:.3} ({:.0}s)",
            out.selected_k,
            out.trace.records.last().unwrap().total,
            t0.elapsed().as_secs_f64()
        );
    }
}
