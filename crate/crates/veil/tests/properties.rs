//! Property-based checks of structural laws: broadcasting shape algebra,
//! tape replay determinism, the on-disk tensor byte format, RNG stream
//! discipline, distribution support, and observation exactness. Each
//! property states its oracle inline, independent of the code under test.

use proptest::prelude::*;

use veil::rng::RngState;
use veil::tensor::tape;
use veil::{Distribution, Module, PosteriorKind, Tensor};

/// Trailing-dimension broadcasting, restated from scratch as the oracle:
/// align from the last dimension, treat missing dimensions as 1, and
/// require each aligned pair to match or contain a 1.
fn oracle_broadcast(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let mut out = Vec::new();
    let (mut ia, mut ib) = (a.iter().rev(), b.iter().rev());
    loop {
        match (ia.next().copied(), ib.next().copied()) {
            (None, None) => break,
            (x, y) => {
                let (x, y) = (x.unwrap_or(1), y.unwrap_or(1));
                if x == y || y == 1 {
                    out.push(x);
                } else if x == 1 {
                    out.push(y);
                } else {
                    return None;
                }
            }
        }
    }
    out.reverse();
    Some(out)
}

/// Pairs of shapes that are broadcast-compatible by construction: both are
/// suffixes of a common base with some dimensions collapsed to 1.
fn compatible_pair() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    prop::collection::vec(1usize..=4, 0..=4).prop_flat_map(|base| {
        let n = base.len();
        (
            Just(base),
            prop::collection::vec(any::<bool>(), n),
            prop::collection::vec(any::<bool>(), n),
            0..=n,
            0..=n,
        )
            .prop_map(|(base, keep_a, keep_b, drop_a, drop_b)| {
                let collapse = |keep: &[bool]| -> Vec<usize> {
                    base.iter().zip(keep).map(|(&d, &k)| if k { d } else { 1 }).collect()
                };
                (collapse(&keep_a)[drop_a..].to_vec(), collapse(&keep_b)[drop_b..].to_vec())
            })
    })
}

fn filled(shape: &[usize], lo: f64, hi: f64, rng: &mut RngState) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::variable(shape.to_vec(), (0..n).map(|_| rng.uniform(lo, hi)).collect())
}

proptest! {
    #[test]
    fn broadcast_shapes_follow_trailing_alignment(
        (sa, sb) in compatible_pair(),
        seed in any::<u64>(),
    ) {
        let expected = oracle_broadcast(&sa, &sb).expect("pairs are compatible by construction");
        let mut rng = RngState::new(seed);
        let a = filled(&sa, -2.0, 2.0, &mut rng);
        let b = filled(&sb, -2.0, 2.0, &mut rng);
        let sum = &a + &b;
        let product = &a * &b;
        // Broadcasting is symmetric in the shapes.
        let swapped = &b - &a;
        prop_assert_eq!(sum.shape(), &expected[..]);
        prop_assert_eq!(product.shape(), &expected[..]);
        prop_assert_eq!(swapped.shape(), &expected[..]);
        tape::clear::<f64>();
    }

    #[test]
    fn tape_replay_yields_bitwise_identical_gradients(
        (sa, sb) in compatible_pair(),
        seed in any::<u64>(),
    ) {
        let mut rng = RngState::new(seed);
        let da = {
            let n: usize = sa.iter().product();
            (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect::<Vec<_>>()
        };
        let db = {
            let n: usize = sb.iter().product();
            (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect::<Vec<_>>()
        };
        let run = || -> (Vec<u64>, Vec<u64>) {
            tape::clear::<f64>();
            let a = Tensor::variable(sa.clone(), da.clone());
            let b = Tensor::variable(sb.clone(), db.clone());
            let loss = (&(&a * &b) + &a).exp().sum_all();
            loss.backward().unwrap();
            let bits = |t: &Tensor| t.grad().unwrap().iter().map(|g| g.to_bits()).collect();
            (bits(&a), bits(&b))
        };
        let first = run();
        let second = run();
        prop_assert_eq!(first, second);
        tape::clear::<f64>();
    }
}

/// Shape plus exactly matching data length, any f64 bit pattern (normals,
/// subnormals, infinities, NaN payloads, both zeros).
fn shaped_bits() -> impl Strategy<Value = (Vec<usize>, Vec<u64>)> {
    prop::collection::vec(1usize..=4, 0..=4).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        (Just(shape), prop::collection::vec(any::<u64>(), n..=n))
    })
}

proptest! {
    #[test]
    fn tensor_bytes_round_trip_bitwise((shape, bits) in shaped_bits()) {
        let data: Vec<f64> = bits.iter().map(|&b| f64::from_bits(b)).collect();
        let t = Tensor::from_vec(shape.clone(), data);
        let back = Tensor::from_bytes(&t.to_bytes()).unwrap();
        prop_assert_eq!(back.shape(), &shape[..]);
        let back_bits: Vec<u64> = back.to_vec().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(back_bits, bits);
    }

    #[test]
    fn rng_streams_reproduce_and_tags_separate(
        seed in any::<u64>(),
        t1 in any::<u64>(),
        t2 in any::<u64>(),
    ) {
        prop_assume!(t1 != t2);
        let take = |r: &mut RngState| (0..16).map(|_| r.next_u64()).collect::<Vec<_>>();

        // The integer stream is a pure function of the seed.
        prop_assert_eq!(take(&mut RngState::new(seed)), take(&mut RngState::new(seed)));

        // Tag derivation is pure, and distinct tags give distinct streams.
        let d1 = take(&mut RngState::new(seed).derive(t1));
        prop_assert_eq!(&d1, &take(&mut RngState::new(seed).derive(t1)));
        prop_assert_ne!(&d1, &take(&mut RngState::new(seed).derive(t2)));

        // Splitting is deterministic and leaves the parent deterministic.
        let (mut p1, mut p2) = (RngState::new(seed), RngState::new(seed));
        let (mut c1, mut c2) = (p1.split(), p2.split());
        prop_assert_eq!(take(&mut c1), take(&mut c2));
        prop_assert_eq!(take(&mut p1), take(&mut p2));
    }

    #[test]
    fn log_density_is_finite_on_support(
        loc in -100.0..100.0f64,
        scale in 1e-3..100.0f64,
        seed in any::<u64>(),
    ) {
        let mut rng = RngState::new(seed);
        let d = Distribution::normal(loc, scale);
        let x = d.sample(&mut rng);
        prop_assert!(d.log_prob(&x).item().is_finite());

        let d = Distribution::half_normal(scale);
        let x = d.sample(&mut rng);
        prop_assert!(x.item() >= 0.0);
        prop_assert!(d.log_prob(&x).item().is_finite());
        // Below the support the log-density is exactly minus infinity.
        let below = Tensor::scalar(-x.item().abs() - 1e-9);
        prop_assert_eq!(d.log_prob(&below).item(), f64::NEG_INFINITY);
    }

    #[test]
    fn categorical_masses_sum_to_one_and_draws_stay_in_range(
        logits in prop::collection::vec(-30.0..30.0f64, 2..=6),
        seed in any::<u64>(),
    ) {
        let k = logits.len();
        let d = Distribution::categorical(Tensor::from_vec(vec![k], logits));
        let mass: f64 = (0..k).map(|c| d.log_prob(&Tensor::scalar(c as f64)).item().exp()).sum();
        prop_assert!((mass - 1.0).abs() < 1e-12, "mass {}", mass);

        let mut rng = RngState::new(seed);
        for _ in 0..32 {
            let x = d.sample(&mut rng).item();
            prop_assert!(x >= 0.0 && x < k as f64 && x.fract() == 0.0, "draw {}", x);
            prop_assert!(d.log_prob(&Tensor::scalar(x)).item().is_finite());
        }
    }

    #[test]
    fn observed_values_read_back_bitwise(
        data in prop::collection::vec(-1e6..1e6f64, 1..=8),
        seed in any::<u64>(),
    ) {
        let y0 = Tensor::from_vec(vec![data.len()], data);
        let mut m = Module::with_posterior("m", PosteriorKind::Normal { log_scale: -1.0 });
        m.reseed(seed);
        m.observe(&[("y", y0.clone())]).unwrap();
        for _ in 0..3 {
            let out = veil::no_grad(|| {
                m.begin_pass();
                m.set_rv("y", Distribution::normal(0.0, 1.0))
            })
            .unwrap();
            prop_assert!(out.bits_eq(&y0));
        }
    }

    #[test]
    fn sibling_modules_keep_distinct_guides(name in "[a-z]{1,8}") {
        let kind = PosteriorKind::Normal { log_scale: -1.0 };
        let mut parent = Module::with_posterior("p", kind.clone());
        parent.add_module("first", Module::with_posterior("first", kind.clone())).unwrap();
        parent.add_module("second", Module::with_posterior("second", kind)).unwrap();
        veil::no_grad(|| -> veil::Result<()> {
            parent.begin_pass();
            for child in ["first", "second"] {
                parent
                    .module_at_mut(child)
                    .unwrap()
                    .set_rv(&name, Distribution::normal(0.0, 1.0))?;
            }
            Ok(())
        })
        .unwrap();

        let scope = |child: &str| {
            parent.module_at(child).unwrap().rv(&name).unwrap().scope().to_string()
        };
        prop_assert_ne!(scope("first"), scope("second"));

        // Two scalar Normal guides: a location and a scale parameter each,
        // with no sharing between the siblings.
        let params = parent.named_parameters();
        prop_assert_eq!(params.len(), 4);
        let mut names: Vec<&String> = params.iter().map(|(n, _)| n).collect();
        names.sort();
        names.dedup();
        prop_assert_eq!(names.len(), 4);
    }
}
