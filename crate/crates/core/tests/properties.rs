mod support;

use gds_core::csc::{hysteresis_step, HysteresisBand, Mode};
use gds_core::devices::{map_chp_to_dtu, BessState};
use gds_core::grid::{solve_power_flow, Injection};
use gds_core::signal::{default_catalog, MergeOutcome, Quality, SignalId, SignalRegistry, SignalSample};
use gds_core::thermal::{AccumulatorTank, CresConfig, CresThermalState, DhnConfig, DistrictHeating, PipeLoop};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn sweep_agrees_with_newton_raphson() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for case in 0..200 {
        let (model, injections) = support::random_network(&mut rng, 6);
        let sweep = solve_power_flow(&model, &injections).unwrap();
        assert!(sweep.converged, "case {case}");
        let oracle = support::newton_raphson(&model, &injections).unwrap();
        for (bus, (a, b)) in sweep.voltages.iter().zip(&oracle).enumerate() {
            let err_pu = (a - b).norm() / support::V_BASE;
            assert!(err_pu < 1e-6, "case {case} bus {bus}: {a} vs {b}");
        }
    }
}

#[test]
fn zero_injection_is_exactly_flat() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let (model, injections) = support::random_network(&mut rng, 6);
        let zero: Vec<Injection> = injections.iter().map(|i| Injection::new(i.bus, 0.0, 0.0)).collect();
        let state = solve_power_flow(&model, &zero).unwrap();
        assert!(state.voltages.iter().all(|v| v.re == 240.0 && v.im == 0.0));
    }
}

fn random_trace(rng: &mut impl Rng, centre: f64) -> Vec<f64> {
    let mut d = centre;
    (0..300)
        .map(|_| {
            // Occasionally land exactly on a threshold.
            if rng.random_bool(0.03) {
                return [0.0, 5.0, -5.0][rng.random_range(0..3)];
            }
            d = (d + rng.random_range(-1.5..1.5)).clamp(-12.0, 12.0);
            d
        })
        .collect()
}

#[test]
fn hysteresis_matches_oracle_on_random_traces() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let bands = [(HysteresisBand::over(5.0, 0.0).unwrap(), 5.0, 0.0), (HysteresisBand::under(-5.0, 0.0).unwrap(), -5.0, 0.0)];
    for case in 0..1000 {
        let (band, on, off) = bands[case % 2];
        let trace = random_trace(&mut rng, on / 2.0);
        let expected = support::hysteresis_oracle(on, off, &trace);
        let mut mode = Mode::Inactive;
        for (k, &d) in trace.iter().enumerate() {
            let next = hysteresis_step(&band, mode, d);
            assert_eq!(next == Mode::Active, expected[k], "case {case} sample {k} dev {d}");
            if next != mode {
                let inside = if on > off { (off..=on).contains(&d) } else { (on..=off).contains(&d) };
                assert!(!inside, "transition inside the deadband at {d}");
            }
            mode = next;
        }
    }
}

#[test]
fn replication_converges_under_loss() {
    for seed in 0..5 {
        let c = support::replication_convergence(seed, 3, 100, 0.3, 30, 20);
        assert!(c.writes > 0);
        assert_eq!(c.fabricated, 0, "seed {seed}");
        assert!(c.cycles_after_quiescence.is_some(), "seed {seed} did not converge in 20 cycles");
    }
}

#[test]
fn mapping_sweep() {
    assert_eq!(map_chp_to_dtu(46.0).unwrap(), 0.0);
    assert_eq!(map_chp_to_dtu(81.0).unwrap(), 22.5);
    let mut prev = f64::NEG_INFINITY;
    for k in 0..1000 {
        let p = 46.0 + 35.0 * k as f64 / 999.0;
        let out = map_chp_to_dtu(p).unwrap();
        assert_eq!((out / 2.5).fract(), 0.0, "{p} → {out}");
        assert!(out >= prev);
        prev = out;
    }
}

#[test]
fn tank_euler_step_closed_form() {
    let mut tank = AccumulatorTank {
        temperature_c: 50.0,
        heat_capacity_j_per_k: 200.0 * 4186.0,
        ua_w_per_k: 0.0,
        ambient_c: 15.0,
        clamped: false,
    };
    tank.step_tank(22.5, 0.0, 60.0).unwrap();
    let expected = 22_500.0 * 60.0 / 837_200.0;
    assert!((tank.temperature_c - 50.0 - expected).abs() < 1e-6);
}

#[test]
fn pipe_step_response_delay() {
    let mut pipe = PipeLoop::new(880.0, 180.0 / 880_000.0, 0.1, 0.0, 15.0, 20.0).unwrap();
    let delay = pipe.transport_delay_s();
    let dt = 0.5;
    let mut t = 0.0;
    // Time of a step is its start; the inlet steps up at t = 0.
    let arrival = loop {
        let out = pipe.step_pipe(60.0, dt).unwrap();
        if out.temperature_c > 40.0 {
            break t;
        }
        t += dt;
        assert!(t < 2.0 * delay);
    };
    assert!((arrival - delay).abs() <= dt, "arrival {arrival} vs {delay}");
}

#[test]
fn lossless_energy_balance() {
    let cfg = DhnConfig { tank_ua_w_per_k: 0.0, pipe_loss_w_per_m_k: 0.0, ..DhnConfig::default() };
    let mut dhn = DistrictHeating::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let e0 = dhn.energy_j();
    let (mut inflow, mut net) = (0.0, 0.0);
    let dt = 0.5;
    for _ in 0..20_000 {
        let s = dhn.step(rng.random_range(0.0..12.0), dt).unwrap();
        inflow += s.applied_kw * 1000.0 * dt;
        net += (s.applied_kw - s.consumer_kw) * 1000.0 * dt;
    }
    assert!(!dhn.tank.clamped);
    let de = dhn.energy_j() - e0;
    assert!((de - net).abs() <= 1e-6 * inflow, "{de} vs {net}");

    let mut cres = CresThermalState::new(&CresConfig { ua_w_per_k: 0.0, ..CresConfig::default() });
    let e0 = cres.energy_j();
    let mut net = 0.0;
    for k in 0..2000 {
        cres.step_cres(k % 7 < 4, 28.8, dt).unwrap();
        net += (cres.p_th_cres_kw - cres.demand_kw) * 1000.0 * dt;
    }
    assert!((cres.energy_j() - e0 - net).abs() <= 1e-6 * net.abs());
}

#[test]
fn tank_dynamics_persist_after_heater_shutdown() {
    let mut dhn = DistrictHeating::new(&DhnConfig::default()).unwrap();
    for _ in 0..2000 {
        dhn.step(22.5, 0.5).unwrap();
    }
    let mut temps = vec![dhn.tank.temperature_c];
    for _ in 0..100 {
        temps.push(dhn.step(0.0, 0.5).unwrap().tank_c);
    }
    // Still cooling at every step: no instantaneous drop to ambient.
    assert!(temps.windows(2).all(|w| w[1] < w[0]));
    assert!(temps.last().unwrap() > &(DhnConfig::default().return_setpoint_c));
}

proptest! {
    #[test]
    fn soc_follows_power_integral(
        soc0 in 0.0..100.0f64,
        cap in 5.0..200.0f64,
        trace in prop::collection::vec((-60.0..60.0f64, 0.1..5.0f64), 1..200),
    ) {
        let mut bess = BessState::new(cap, soc0);
        let mut integral_kws = 0.0;
        for (p_ref, dt) in trace {
            let before = bess.soc;
            let applied = bess.bess_step(p_ref, 0.0, dt).unwrap();
            prop_assert!(applied.abs() <= 40.0);
            if (before >= 100.0 && p_ref > 0.0) || (before <= 0.0 && p_ref < 0.0) {
                prop_assert_eq!(applied, 0.0);
            }
            integral_kws += applied * dt;
        }
        let expected = integral_kws / 3600.0 / cap * 100.0;
        let delta = bess.soc - soc0;
        prop_assert!((delta - expected).abs() <= 1e-9 * expected.abs().max(1e-3), "{} vs {}", delta, expected);
        prop_assert!((0.0..=100.0).contains(&bess.soc));
    }

    #[test]
    fn writes_stay_in_range(
        index in 0..default_catalog().len(),
        raw in prop_oneof![-1e6..1e6f64, -500.0..500.0f64, prop::num::f64::NORMAL],
    ) {
        let catalog = default_catalog();
        let reg = SignalRegistry::with_catalog(&catalog).unwrap();
        let d = &catalog[index];
        let s = reg.write(SignalId(index as u32), raw, 0, "T").unwrap();
        prop_assert!(d.min <= s.value && s.value <= d.max);
        prop_assert_eq!(s.quality == Quality::Clamped, raw < d.min || raw > d.max);
    }

    #[test]
    fn lww_merge_is_order_independent(
        samples in prop::collection::vec((0..5i64, 0..3u8, -10.0..10.0f64), 1..12),
        seed in any::<u64>(),
    ) {
        // One value per (timestamp, origin), as a real writer produces.
        let mut unique = std::collections::BTreeMap::new();
        for (t, o, v) in samples {
            unique.entry((t, o)).or_insert(v);
        }
        let samples: Vec<SignalSample> = unique
            .into_iter()
            .map(|((t, o), v)| SignalSample { id: SignalId(0), value: v, timestamp_ms: t, origin: format!("N{o}"), quality: Quality::Ok })
            .collect();
        let winner = samples.iter().max_by(|a, b| a.timestamp_ms.cmp(&b.timestamp_ms).then(b.origin.cmp(&a.origin))).unwrap();

        let mut shuffled = samples.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let reg = SignalRegistry::with_default_catalog();
        for s in &shuffled {
            let outcome = reg.merge(s).unwrap();
            prop_assert!(matches!(outcome, MergeOutcome::Applied | MergeOutcome::Kept));
        }
        let held = reg.read(SignalId(0)).unwrap();
        prop_assert_eq!(held.as_ref(), Some(winner));
    }

    #[test]
    fn stored_timestamps_never_decrease(writes in prop::collection::vec((0..100i64, -50.0..50.0f64), 1..50)) {
        let reg = SignalRegistry::with_default_catalog();
        let mut last = i64::MIN;
        for (t, v) in writes {
            let _ = reg.write(SignalId(0), v, t, "T");
            let ts = reg.read(SignalId(0)).unwrap().unwrap().timestamp_ms;
            prop_assert!(ts >= last);
            last = ts;
        }
    }
}
