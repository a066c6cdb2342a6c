//! Property-based checks of the CLI plumbing: the normal quantile used for
//! interval construction, and the canonical config rendering that artifact
//! hashes are built from.

use proptest::prelude::*;

use veil_cli::config::{apply_run_kv, DataSpec, Method, Model, RunConfig};
use veil_cli::report::norm_ppf;

/// Abramowitz & Stegun 7.1.26 error function, max absolute error 1.5e-7.
/// Written out here so the quantile check does not lean on library code.
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn model_strategy() -> impl Strategy<Value = Model> {
    prop::sample::select(vec![
        Model::Linreg,
        Model::Hetreg,
        Model::Branching,
        Model::MlpClassifier,
        Model::LiftedMlp,
    ])
}

fn method_strategy() -> impl Strategy<Value = Method> {
    prop::sample::select(vec![Method::Vi, Method::Map, Method::Mcmc])
}

fn data_strategy() -> impl Strategy<Value = DataSpec> {
    prop_oneof![
        Just(DataSpec::Default),
        // Any synthetic tag except the literal `default`, which canonicalizes
        // to the Default variant.
        "[a-z0-9][a-z0-9,=]{0,11}"
            .prop_filter("reserved", |s| s != "default")
            .prop_map(DataSpec::Synthetic),
        "[a-z0-9][a-z0-9_./-]{0,15}".prop_map(|s| DataSpec::Path(s.into())),
    ]
}

fn config_strategy() -> impl Strategy<Value = RunConfig> {
    (
        (model_strategy(), method_strategy(), any::<u64>(), 1usize..100_000),
        (1e-6..10.0f64, 1usize..64, 0usize..10_000, 1e-3..10.0f64),
        (1usize..16, 1usize..8, 0usize..10_000),
        (1e-3..10.0f64, 1e-3..10.0f64, 1usize..512),
        data_strategy(),
    )
        .prop_map(
            |(
                (model, method, seed, steps),
                (lr, n_samples, burn_in, step_scale),
                (thin, chains, pretrain_steps),
                (lift_scale, noise_sd, hidden),
                data,
            )| RunConfig {
                model,
                method,
                seed,
                steps,
                lr,
                n_samples,
                burn_in,
                step_scale,
                thin,
                chains,
                pretrain_steps,
                lift_scale,
                noise_sd,
                hidden,
                data,
                ..RunConfig::default()
            },
        )
}

proptest! {
    #[test]
    fn norm_ppf_inverts_the_normal_cdf(p in 0.001..0.999f64) {
        let x = norm_ppf(p);
        prop_assert!(x.is_finite());
        prop_assert!((normal_cdf(x) - p).abs() < 1e-6, "cdf(ppf({p})) = {}", normal_cdf(x));
        // The standard normal quantile is odd about p = 1/2.
        prop_assert!((norm_ppf(1.0 - p) + x).abs() < 1e-6);
    }

    #[test]
    fn norm_ppf_is_monotone(p in 0.001..0.998f64, gap in 1e-6..1e-3f64) {
        prop_assert!(norm_ppf(p) < norm_ppf(p + gap));
    }

    #[test]
    fn run_config_canonical_lines_round_trip(cfg in config_strategy()) {
        let lines = cfg.canonical_lines();
        let mut rebuilt = RunConfig::default();
        for line in &lines {
            let (k, v) = line.split_once('=').expect("canonical lines are key=value");
            apply_run_kv(&mut rebuilt, k, v, "round-trip").unwrap();
        }
        prop_assert_eq!(rebuilt.canonical_lines(), lines);
        prop_assert_eq!(rebuilt.hash(), cfg.hash());
    }
}
