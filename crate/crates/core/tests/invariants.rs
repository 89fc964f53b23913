use fedbilevel_core::algorithms::{
    bsgm_estimator_step, local_update, theorem_constraints, theorem_hyperparams, Algorithm, EstimatorState,
    HyperParams, StepSchedule, TheoremVariant,
};
use fedbilevel_core::federation::{
    accounting, average_and_reset, expected_accounting, run, DeviceState, FederationConfig,
};
use fedbilevel_core::hypergrad::{derived_constants, neumann_apply, HypergradSample, NeumannConfig};
use fedbilevel_core::numerics::{max_abs, RandomStream};
use fedbilevel_core::problems::{
    BilevelOracle, OracleQuery, QuadQuad, QuadQuadParams, RidgeData, RidgeHyper, SmoothnessConstants,
};
use fedbilevel_core::Vector;
use proptest::prelude::*;

fn small_quad(noise: f64, seed: u64) -> QuadQuad {
    QuadQuad::generate(&QuadQuadParams {
        dim_x: 4,
        dim_y: 3,
        noise_std: noise,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn vec_strategy(dim: usize) -> impl Strategy<Value = Vector> {
    prop::collection::vec(-3.0f64..3.0, dim).prop_map(Vector::from_vec)
}

fn hp(neumann: NeumannConfig) -> HyperParams {
    HyperParams {
        alpha: 1.0,
        beta: 1.0,
        rho1: 1.0,
        rho2: 1.0,
        batch: 3,
        neumann,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn neumann_apply_is_linear_for_a_fixed_sample(
        w1 in vec_strategy(3), w2 in vec_strategy(3), a in -2.0f64..2.0, b in -2.0f64..2.0,
        q in 0usize..12, seed in any::<u64>(),
    ) {
        let ridge = RidgeHyper::new(RidgeData::synthesize(20, 5, 3, 0.1, 1).unwrap(), 1.0, 10.0).unwrap();
        let x = Vector::from_element(3, 0.2);
        let y = Vector::from_element(3, -0.5);
        let cfg = NeumannConfig::for_target(&ridge.smoothness(), 1.0).unwrap();
        let cfg = NeumannConfig::new(cfg.theta(), q).unwrap();
        let s = RandomStream::new(seed, 0);
        let apply = |w: &Vector| neumann_apply(&ridge, &x, &y, w, &cfg, &mut s.clone()).unwrap();
        let combined = apply(&(&w1 * a + &w2 * b));
        let separate = apply(&w1) * a + apply(&w2) * b;
        prop_assert!(max_abs(&(&combined - &separate)) <= 1e-12 * (1.0 + max_abs(&separate)));
    }

    #[test]
    fn averaging_preserves_the_mean_and_reaches_consensus(
        states in prop::collection::vec((vec_strategy(2), vec_strategy(3), vec_strategy(2), vec_strategy(3)), 1..9)
    ) {
        let mut devices: Vec<DeviceState> = states
            .iter()
            .enumerate()
            .map(|(k, (x, y, u, v))| DeviceState {
                device_id: k,
                x: x.clone(),
                y: y.clone(),
                est: Some(EstimatorState { u: u.clone(), v: v.clone(), prev: None }),
                stream: RandomStream::new(0, k as u64),
            })
            .collect();
        let k = devices.len() as f64;
        let mean = |f: &dyn Fn(&DeviceState) -> Vector| {
            devices.iter().map(f).fold(None::<Vector>, |acc, v| Some(acc.map_or(v.clone(), |a| a + v))).unwrap() / k
        };
        let getters: [&dyn Fn(&DeviceState) -> Vector; 4] = [
            &|d| d.x.clone(),
            &|d| d.y.clone(),
            &|d| d.est.as_ref().unwrap().u.clone(),
            &|d| d.est.as_ref().unwrap().v.clone(),
        ];
        let before: Vec<Vector> = getters.iter().map(|g| mean(*g)).collect();
        average_and_reset(&mut devices);
        for (g, pre) in getters.iter().zip(&before) {
            for d in &devices {
                prop_assert!(max_abs(&(g(d) - pre)) <= 1e-12);
                prop_assert_eq!(g(d), g(&devices[0]));
            }
        }
    }

    #[test]
    fn momentum_stays_in_the_hull_of_old_and_fresh_estimates(
        u in vec_strategy(4), v in vec_strategy(3), x in vec_strategy(4), y in vec_strategy(3),
        eta in 0.0f64..1.0, seed in any::<u64>(),
    ) {
        let quad = small_quad(0.3, 2);
        let cfg = NeumannConfig::new(0.3, 5).unwrap();
        let params = hp(cfg);
        let state = EstimatorState { u: u.clone(), v: v.clone(), prev: None };
        let stream = RandomStream::new(seed, 3);
        let next = bsgm_estimator_step(&state, &x, &y, eta, &params, &quad, &mut stream.clone()).unwrap();

        let mut replay = stream;
        let fresh_u = HypergradSample::draw(&quad, &cfg, &mut replay).evaluate(&quad, &x, &y, &cfg).unwrap();
        let fresh_v = quad.grad_y_g(&OracleQuery::new(&x, &y, replay.take(quad.sample_width()))).unwrap();
        let tol = 1e-12;
        prop_assert!(next.u.norm() <= u.norm().max(fresh_u.norm()) * (1.0 + tol) + tol);
        prop_assert!(next.v.norm() <= v.norm().max(fresh_v.norm()) * (1.0 + tol) + tol);
        let expect_u = &u * (1.0 - eta) + &fresh_u * eta;
        prop_assert!(max_abs(&(&next.u - expect_u)) <= 1e-12 * (1.0 + fresh_u.norm() + u.norm()));
    }

    #[test]
    fn local_update_moves_against_the_estimates(
        x in vec_strategy(4), y in vec_strategy(3), u in vec_strategy(4), v in vec_strategy(3),
        eta in 0.0f64..1.0, rho1 in 0.01f64..2.0, rho2 in 0.01f64..2.0,
    ) {
        let mut params = hp(NeumannConfig::new(0.1, 1).unwrap());
        params.rho1 = rho1;
        params.rho2 = rho2;
        let state = EstimatorState { u: u.clone(), v: v.clone(), prev: None };
        let (nx, ny) = local_update(&x, &y, &state, eta, &params);
        prop_assert!(max_abs(&(&x - &nx - &u * (rho1 * eta))) <= 1e-12);
        prop_assert!(max_abs(&(&y - &ny - &v * (rho2 * eta))) <= 1e-12);
    }

    #[test]
    fn stream_snapshots_replay(seed in any::<u64>(), id in any::<u64>(), skip in 0u64..1000, n in 1usize..20) {
        let mut a = RandomStream::new(seed, id).advanced(skip);
        let first = a.gaussian_vec(n, 1.0);
        let mut b = RandomStream::new(seed, id).at(skip);
        prop_assert_eq!(first, b.gaussian_vec(n, 1.0));
        prop_assert_eq!(a.counter(), skip + n as u64);
    }

    #[test]
    fn rounds_and_bytes_follow_the_closed_form(
        t in 1usize..60, p in 1usize..12, k in 1usize..4, broadcast in any::<bool>(), vr in any::<bool>(),
    ) {
        let quad = small_quad(0.1, 0);
        let mut cfg = FederationConfig::new(
            if vr { Algorithm::LocalBsgvrm } else { Algorithm::LocalBsgm },
            hp(NeumannConfig::new(0.3, 2).unwrap()),
            StepSchedule::Fixed { eta: 0.05 },
            Vector::from_element(4, 1.0),
            Vector::zeros(3),
        );
        cfg.iterations = t;
        cfg.period = p;
        cfg.devices = k;
        cfg.count_broadcast = broadcast;
        let acc = accounting(&run(&cfg, &quad).unwrap());
        prop_assert_eq!(acc.rounds, (t / p) as u64);
        prop_assert_eq!(acc, expected_accounting(&cfg, 4, 3));
        let per_direction = acc.rounds * k as u64 * 2 * 7 * 8;
        prop_assert_eq!(acc.bytes, if broadcast { 2 * per_direction } else { per_direction });
    }
}

fn random_constants(rng: &mut RandomStream) -> SmoothnessConstants {
    let log_uniform = |rng: &mut RandomStream, lo: f64, hi: f64| (lo.ln() + (hi.ln() - lo.ln()) * rng.next_uniform()).exp();
    let mu = log_uniform(rng, 0.01, 5.0);
    SmoothnessConstants {
        mu,
        l1: mu * log_uniform(rng, 1.0, 100.0),
        l0: log_uniform(rng, 0.1, 100.0),
        l21: log_uniform(rng, 1e-3, 10.0),
        l22: log_uniform(rng, 1e-3, 10.0),
        sigma: log_uniform(rng, 1e-3, 1.0),
    }
}

#[test]
fn theorem_hyperparameters_satisfy_their_own_constraints() {
    let mut rng = RandomStream::new(2024, 0);
    for case in 0..100 {
        let sc = random_constants(&mut rng);
        let neumann = NeumannConfig::for_target(&sc, 1e-2).unwrap();
        let consts = derived_constants(&sc, &neumann);
        let devices = 1 + rng.next_index(16);
        let period = 1 + rng.next_index(16);
        for variant in [TheoremVariant::BsgmFixed, TheoremVariant::BsgvrmFixed, TheoremVariant::BsgvrmDecaying] {
            let (hp, schedule) = theorem_hyperparams(&consts, &sc, neumann, devices, period, variant, 4).unwrap();
            for c in theorem_constraints(&consts, &sc, devices, period, variant, &hp, &schedule) {
                assert!(c.holds(), "case {case} {variant:?} {sc:?}: {c:?}");
            }
        }
    }
}

#[test]
fn lower_gradient_samples_are_unbiased_for_both_families() {
    let quad = small_quad(0.5, 4);
    let ridge = RidgeHyper::new(RidgeData::synthesize(15, 5, 3, 0.2, 9).unwrap(), 1.0, 10.0).unwrap();
    let n = 60_000;
    let mut stream = RandomStream::new(5, 5);

    let x = Vector::from_element(4, 0.5);
    let y = Vector::from_element(3, -0.2);
    let mut mean_q = Vector::zeros(3);
    for _ in 0..n {
        mean_q += quad.grad_y_g(&OracleQuery::new(&x, &y, stream.take(quad.sample_width()))).unwrap();
    }
    mean_q /= n as f64;
    let noiseless = quad
        .clone()
        .with_noise_std(0.0)
        .grad_y_g(&OracleQuery::new(&x, &y, RandomStream::new(0, 0)))
        .unwrap();
    // five standard errors per coordinate
    assert!(max_abs(&(&mean_q - &noiseless)) < 5.0 * 0.5 / (n as f64).sqrt());

    let xr = Vector::from_element(3, 0.1);
    let mut mean_r = Vector::zeros(3);
    for _ in 0..n {
        mean_r += ridge.grad_y_g(&OracleQuery::new(&xr, &y, stream.take(ridge.sample_width()))).unwrap();
    }
    mean_r /= n as f64;
    let full = ridge.full_grad_y_g(&xr, &y).unwrap();
    assert!(max_abs(&(&mean_r - &full)) < 0.05 * (1.0 + max_abs(&full)), "{mean_r} vs {full}");
}
