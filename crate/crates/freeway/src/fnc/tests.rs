use super::*;
use crate::fundamental::{hermite_cubic_demand, hermite_cubic_supply, FundamentalDiagram};
use crate::network::{Merge, MergeKind};
use crate::sim::{simulate_open_loop, simulate_uncontrolled, UncontrolledMerge};

fn spec(name: &str, fd: FundamentalDiagram, infinite: bool, rho0: f64) -> CellSpec {
    CellSpec {
        name: name.into(),
        length_km: 0.5,
        lanes: 1,
        fd,
        infinite_capacity: infinite,
        queue_cap_cars: None,
        initial_density: rho0,
    }
}

fn tri(cap: f64) -> FundamentalDiagram {
    FundamentalDiagram::triangular(100.0, 25.0, cap, 250.0)
}

fn hermite_fd(cap: f64) -> FundamentalDiagram {
    FundamentalDiagram::CubicHermite {
        demand: hermite_cubic_demand(100.0, 30.0, cap).unwrap(),
        supply: hermite_cubic_supply(30.0, cap, 150.0, -35.0).unwrap(),
        cap,
        rho_c: 30.0,
        rho_bar: 150.0,
    }
}

/// Two metered sources feeding one bottleneck cell.
pub(crate) fn merge_net(dt_s: f64) -> Network {
    Network::new(
        vec![
            spec("a", tri(2000.0), true, 30.0),
            spec("b", tri(2000.0), true, 30.0),
            spec("c", tri(3000.0), false, 150.0),
        ],
        &[(0, 2, 1.0), (1, 2, 1.0)],
        vec![Merge {
            into: 2,
            kind: MergeKind::Symmetric,
        }],
        dt_s / 3600.0,
    )
    .unwrap()
}

#[test]
fn single_cell_size() {
    let net = Network::new(
        vec![spec("a", tri(2000.0), true, 10.0)],
        &[],
        vec![],
        10.0 / 3600.0,
    )
    .unwrap();
    let (vars, cons) = model_size(&net, 1);
    assert_eq!(vars, 2);
    assert_eq!(cons, 2); // conservation + demand bound
    let demand = vec![vec![500.0]];
    let out = optimize(&net, &demand, &FncOptions::default()).unwrap();
    assert_eq!(out.stats.lp_rows, 1); // only the conservation equality
    assert!(out.exactness_gap < 1e-9);
}

#[test]
fn model_size_counts_affine_pieces() {
    // Line: infinite source, two smooth cells, one trapezoidal bottleneck.
    let net = line_with_smooth_cells();
    let (vars, cons) = model_size(&net, 10);
    assert_eq!(vars, 2 * 4 * 10);
    // Per step: 4 conservation + 4 demand + smooth supplies (1 + 1) +
    // trapezoid supply (2) = 12.
    assert_eq!(cons, 12 * 10);
}

fn line_with_smooth_cells() -> Network {
    Network::new(
        vec![
            spec("src", tri(4000.0), true, 0.0),
            spec("h1", hermite_fd(2000.0), false, 10.0),
            spec("h2", hermite_fd(2000.0), false, 10.0),
            spec("b3", tri(1500.0), false, 10.0),
        ],
        &[(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0)],
        vec![],
        12.5 / 3600.0,
    )
    .unwrap()
}

#[test]
fn uncontrolled_line_relaxation_is_exact() {
    // No controlled cells: the relaxed optimum must coincide with the one
    // and only forward trajectory, including through the smooth-curve
    // discretization and a spillback past the downstream bottleneck.
    let net = line_with_smooth_cells();
    let horizon = 60;
    let demand: DemandSchedule = (0..horizon)
        .map(|t| vec![if t < 30 { 2500.0 } else { 0.0 }, 0.0, 0.0, 0.0])
        .collect();
    let out = optimize(&net, &demand, &FncOptions::default()).unwrap();
    assert!(
        out.exactness_gap < 1e-6 * (1.0 + out.tts_recovered),
        "gap {} vs tts {}",
        out.exactness_gap,
        out.tts_recovered
    );
    // With nothing to control, the recovered trajectory must coincide with
    // the plain forward rollout. (The relaxed *densities* need not: TTS
    // depends only on cumulative exit flows, so the LP may park cars in a
    // different equal-length cell at equal cost.)
    let unc =
        simulate_uncontrolled(&out.net, &demand, UncontrolledMerge::ProportionalDemand).unwrap();
    let mut worst: f64 = 0.0;
    for t in 0..=horizon {
        for e in 0..net.num_cells() {
            worst = worst.max((unc.densities[t][e] - out.trajectory.densities[t][e]).abs());
        }
    }
    assert!(worst < 1e-9, "recovered rollout differs from plain rollout by {worst}");
    assert!(
        (unc.total_time_spent(&out.net) - out.relaxed.tts).abs()
            < 1e-6 * (1.0 + out.relaxed.tts),
        "relaxed optimum {} differs from the unique rollout {}",
        out.relaxed.tts,
        unc.total_time_spent(&out.net)
    );
    // The congestion must actually have reached the smooth cells, otherwise
    // this test exercises nothing.
    let peak_h2 = (0..=horizon)
        .map(|t| out.trajectory.densities[t][2])
        .fold(0.0f64, f64::max);
    assert!(peak_h2 > 35.0, "no congestion in smooth cell (peak {peak_h2})");
}

#[test]
fn metered_merge_relaxation_is_exact_and_improves() {
    let net = merge_net(10.0);
    let horizon = 40;
    let demand: DemandSchedule = (0..horizon)
        .map(|t| vec![if t < 20 { 1800.0 } else { 0.0 }, if t < 20 { 1800.0 } else { 0.0 }, 0.0])
        .collect();
    let out = optimize(&net, &demand, &FncOptions::default()).unwrap();
    assert!(
        out.exactness_gap < 1e-6 * (1.0 + out.tts_recovered),
        "gap {}",
        out.exactness_gap
    );
    assert!(
        out.max_control_clamp < 1e-6,
        "controls clamped by {}",
        out.max_control_clamp
    );
    // Any forward trajectory is feasible for the relaxation, so the
    // optimum can never exceed the uncontrolled roll-out.
    let dnet = discretize_network(&net, 32).unwrap();
    let unc = simulate_uncontrolled(&dnet, &demand, UncontrolledMerge::ProportionalDemand).unwrap();
    assert!(out.relaxed.tts <= unc.total_time_spent(&dnet) + 1e-7);
}

#[test]
fn small_instance_matches_grid_search() {
    // Two controlled sources into one congested cell, two steps: coarse
    // exhaustive search over the metering rates upper-bounds the optimum,
    // and the LP may beat it only by less than the grid resolution.
    let net = merge_net(10.0);
    let demand: DemandSchedule = vec![vec![1500.0, 1500.0, 0.0]; 2];
    let out = optimize(&net, &demand, &FncOptions::default()).unwrap();

    let dnet = discretize_network(&net, 32).unwrap();
    let grid: Vec<f64> = (0..=20).map(|i| 2000.0 * i as f64 / 20.0).collect();
    let mut best = f64::INFINITY;
    for &a0 in &grid {
        for &b0 in &grid {
            for &a1 in &grid {
                for &b1 in &grid {
                    let controls = vec![vec![a0, b0], vec![a1, b1]];
                    let traj = simulate_open_loop(
                        &dnet,
                        &demand,
                        &controls,
                        ControlPolicy::Clamp,
                    )
                    .unwrap();
                    best = best.min(traj.total_time_spent(&dnet));
                }
            }
        }
    }
    assert!(
        out.tts_recovered <= best + 1e-7,
        "lp {} worse than grid {best}",
        out.tts_recovered
    );
    assert!(
        best - out.tts_recovered < 0.01,
        "lp {} suspiciously far below grid {best}",
        out.tts_recovered
    );
}

#[test]
fn ramp_metering_with_queue_cap() {
    let mut ramp = spec(
        "r",
        FundamentalDiagram::Integrator { max_rate: 1500.0 },
        true,
        0.0,
    );
    ramp.queue_cap_cars = Some(50.0);
    let net = Network::new(
        vec![
            spec("m", FundamentalDiagram::triangular(90.0, 20.0, 2500.0, 250.0), true, 20.0),
            ramp,
            spec("k", FundamentalDiagram::triangular(90.0, 20.0, 4500.0, 250.0), false, 20.0),
            spec("out", FundamentalDiagram::triangular(90.0, 20.0, 3000.0, 250.0), false, 20.0),
        ],
        &[(0, 2, 1.0), (1, 2, 1.0), (2, 3, 1.0)],
        vec![Merge {
            into: 2,
            kind: MergeKind::Asymmetric { ramp: 1 },
        }],
        15.0 / 3600.0,
    )
    .unwrap();
    let horizon = 80;
    let demand: DemandSchedule = (0..horizon)
        .map(|t| {
            vec![
                if t < 40 { 2200.0 } else { 0.0 },
                if t < 40 { 1200.0 } else { 0.0 },
                0.0,
                0.0,
            ]
        })
        .collect();
    let out = optimize(&net, &demand, &FncOptions::default()).unwrap();
    assert!(
        out.exactness_gap < 1e-6 * (1.0 + out.tts_recovered),
        "gap {}",
        out.exactness_gap
    );
    // The queue cap (50 cars over 0.5 km) binds the ramp density to 100.
    for t in 0..=horizon {
        assert!(
            out.relaxed.densities[t][1] <= 100.0 + 1e-6,
            "queue cap violated at t={t}: {}",
            out.relaxed.densities[t][1]
        );
    }
    // Onramp discounting must not increase the undiscounted objective by
    // much, and must shift time from mainline to ramp.
    let eps = FncOptions {
        epsilon: 0.2,
        ..FncOptions::default()
    };
    let out_eps = optimize(&net, &demand, &eps).unwrap();
    assert!(out_eps.relaxed.objective <= out.relaxed.objective + 1e-7);
    let ramp_time = |o: &FncOutcome| -> f64 {
        (1..=horizon)
            .map(|t| o.relaxed.densities[t][1] * 0.5)
            .sum::<f64>()
            * net.dt_hours
    };
    assert!(ramp_time(&out_eps) >= ramp_time(&out) - 1e-9);
}

#[test]
fn capacity_drop_rejected() {
    let dropped = tri(3000.0).apply_capacity_drop(0.1).unwrap();
    let net = Network::new(
        vec![
            spec("a", tri(2000.0), true, 30.0),
            spec("c", dropped, false, 10.0),
        ],
        &[(0, 1, 1.0)],
        vec![],
        10.0 / 3600.0,
    )
    .unwrap();
    let demand: DemandSchedule = vec![vec![1000.0, 0.0]; 5];
    match optimize(&net, &demand, &FncOptions::default()) {
        Err(FncError::NonConcave(name)) => assert_eq!(name, "c"),
        other => panic!("expected rejection, got {other:?}"),
    }
}

#[test]
fn crash_basis_consistency() {
    // Same optimum with and without the lower-triangular basis hint.
    let net = merge_net(10.0);
    let demand: DemandSchedule = (0..20)
        .map(|t| vec![if t < 10 { 1700.0 } else { 0.0 }, 1000.0, 0.0])
        .collect();
    let dnet = discretize_network(&net, 32).unwrap();
    let opts = FncOptions::default();
    let problem = build_relaxed(&dnet, &net, &demand, &opts).unwrap();
    let hinted = lp::solve_with_basis(&problem.lp, &opts.lp_options, Some(&problem.basis_hint))
        .unwrap();
    let plain = lp::solve(&problem.lp, &opts.lp_options).unwrap();
    assert_eq!(hinted.status, Status::Optimal);
    assert_eq!(plain.status, Status::Optimal);
    assert!(
        (hinted.objective - plain.objective).abs() < 1e-7 * (1.0 + plain.objective.abs()),
        "hinted {} plain {}",
        hinted.objective,
        plain.objective
    );
}
