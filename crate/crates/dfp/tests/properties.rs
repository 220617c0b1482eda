//! Property tests for the structural invariants.

use dfp::evaluation::rse;
use dfp::game::JointControl;
use dfp::nn::{read_mlp, write_mlp, Mlp, MlpConfig};
use dfp::Partition;
use ndarray::{Array1, Array3};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Any strictly increasing grid telescopes back to its horizon and the
    /// mesh bounds every step.
    #[test]
    fn partition_telescopes(increments in prop::collection::vec(1e-6..1.0f64, 1..40)) {
        let mut times = vec![0.0];
        for dt in &increments {
            times.push(times.last().unwrap() + dt);
        }
        let partition = Partition::from_times(times).unwrap();
        let total: f64 = (0..partition.n_steps()).map(|k| partition.dt(k)).sum();
        prop_assert!((total - partition.horizon()).abs() <= 1e-12 * partition.horizon().max(1.0));
        let mesh = partition.mesh();
        for k in 0..partition.n_steps() {
            prop_assert!(partition.dt(k) <= mesh + 1e-15);
            let t_mid = partition.time(k) + 0.5 * partition.dt(k);
            prop_assert_eq!(partition.step_index(t_mid).unwrap(), k);
        }
    }

    /// RSE is invariant under adding a common constant to truth and
    /// prediction, and zero iff they agree.
    #[test]
    fn rse_shift_invariance(
        seed in 0u64..1000,
        shift in -10.0..10.0f64,
    ) {
        let rng = dfp::rng::CounterRng::new(seed);
        let truth = Array3::from_shape_fn((6, 5, 3), |(j, k, l)| {
            rng.normal(j as u64, k as u64, l as u64)
        });
        let pred = Array3::from_shape_fn((6, 5, 3), |(j, k, l)| {
            rng.normal(j as u64 + 100, k as u64, l as u64)
        });
        let base = rse(truth.view(), pred.view()).unwrap();
        let shifted = rse(
            truth.mapv(|v| v + shift).view(),
            pred.mapv(|v| v + shift).view(),
        )
        .unwrap();
        prop_assert!((base - shifted).abs() <= 1e-9 * base.max(1.0));
        prop_assert_eq!(rse(truth.view(), truth.view()).unwrap(), 0.0);
    }

    /// Checkpoints round-trip bit-exactly for any layer configuration.
    #[test]
    fn checkpoint_roundtrip_exact(
        seed in 0u64..500,
        hidden in prop::collection::vec(1usize..12, 0..3),
        batchnorm in any::<bool>(),
        input_dim in 1usize..5,
        output_dim in 1usize..5,
    ) {
        let mut config = MlpConfig::new(input_dim, output_dim, hidden).with_seed(seed);
        config.batchnorm = batchnorm;
        let net = Mlp::new(config);
        let mut buffer = Vec::new();
        write_mlp(&mut buffer, &net).unwrap();
        let back = read_mlp(&mut buffer.as_slice()).unwrap();
        prop_assert_eq!(&back.config, &net.config);
        for (a, b) in back.params().iter().zip(net.params()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    /// Player-major flattening round-trips.
    #[test]
    fn joint_control_flat_roundtrip(
        n_players in 1usize..6,
        d_alpha in 1usize..4,
        seed in 0u64..100,
    ) {
        let rng = dfp::rng::CounterRng::new(seed);
        let control = JointControl(ndarray::Array2::from_shape_fn(
            (n_players, d_alpha),
            |(i, a)| rng.normal(i as u64, a as u64, 0),
        ));
        let flat = control.flat();
        let back = JointControl::from_flat(flat.view(), n_players, d_alpha).unwrap();
        prop_assert_eq!(back, control);
    }

    /// The counter generator is a pure function of its counters and seeds
    /// separate streams.
    #[test]
    fn rng_purity(seed in any::<u64>(), a in any::<u64>(), b in any::<u64>(), c in any::<u64>()) {
        let r1 = dfp::rng::CounterRng::new(seed);
        let r2 = dfp::rng::CounterRng::new(seed);
        prop_assert_eq!(r1.raw(a, b, c), r2.raw(a, b, c));
        let u = r1.uniform(a, b, c);
        prop_assert!((0.0..1.0).contains(&u));
        let z = r1.normal(a, b, c);
        prop_assert!(z.is_finite());
        prop_assert_eq!(z.to_bits(), r2.normal(a, b, c).to_bits());
    }
}

/// Zero-cost driver sanity for arbitrary square-integrable terminal payoffs:
/// with F == 0 and unit Z the telescoped rollout reproduces the increments.
#[test]
fn rollout_telescoping_on_random_grids() {
    use dfp::bsde::*;
    use ndarray::{Array2, ArrayView1, ArrayView2};
    use std::sync::Arc;
    let game = dfp::game::GameSpec::builder(1, 1, 1, 1, 1.0)
        .drift(|_, _, _| Array1::zeros(1))
        .constant_diffusion(Array2::from_elem((1, 1), 1.0))
        .phi(|_, _, _| Array1::zeros(1))
        .running_costs(|_, _, _| Array1::zeros(1))
        .terminal_costs(|_| Array1::zeros(1))
        .build()
        .unwrap();
    for seed in 0..20u64 {
        let rng = dfp::rng::CounterRng::new(seed);
        let mut times = vec![0.0];
        let steps = 2 + (rng.raw(0, 0, 0) % 8) as usize;
        for k in 0..steps {
            times.push(times.last().unwrap() + 0.01 + rng.uniform(1, k as u64, 0) * 0.3);
        }
        let partition = Partition::from_times(times).unwrap();
        let problem = BsdeProblem {
            driver: Arc::new(ZeroDriver { noise_dim: 1 }),
            terminal: Arc::new(|x: ArrayView1<f64>| x[0]),
            state_dim: 1,
            noise_dim: 1,
            partition: partition.clone(),
        };
        let x0 = dfp::sde::sample_initial(1.0, 1, 8, seed).unwrap();
        let paths = dfp::sde::simulate_driftless(&game, &partition, x0.view(), seed ^ 9).unwrap();
        struct UnitZ;
        impl YzSource for UnitZ {
            fn y0_batch(&self, x: ArrayView2<f64>) -> dfp::Result<Array1<f64>> {
                Ok(Array1::zeros(x.nrows()))
            }
            fn z_batch(&self, _k: usize, _t: f64, x: ArrayView2<f64>) -> dfp::Result<Array2<f64>> {
                Ok(Array2::from_elem((x.nrows(), 1), 1.0))
            }
        }
        let roll = rollout(&problem, &UnitZ, &paths).unwrap();
        for j in 0..8 {
            let sum: f64 = (0..partition.n_steps())
                .map(|k| paths.increments[[j, k, 0]])
                .sum();
            assert!((roll.y[[j, partition.n_steps()]] - sum).abs() < 1e-13);
        }
    }
}
