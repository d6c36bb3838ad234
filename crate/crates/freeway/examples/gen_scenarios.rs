//! Regenerates the bundled scenario files in `scenarios/`.
//!
//! Run with `cargo run --example gen_scenarios` from the crate root. The
//! scenarios are checked in; this tool exists so parameter changes stay
//! reproducible instead of being hand-edited JSON.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use freeway::fundamental::{hermite_cubic_demand, hermite_cubic_supply, FundamentalDiagram};
use freeway::scenario::{
    AsymJunction, DemandStep, Junctions, Scenario, ScenarioCell, SolverSection, TurningRate, Units,
};

fn units() -> Option<Units> {
    Some(Units {
        time: "seconds".into(),
        length: "kilometers".into(),
    })
}

fn cell(id: &str, length_km: f64, lanes: u32, fd: &str) -> ScenarioCell {
    ScenarioCell {
        id: id.into(),
        length_km,
        lanes,
        fd: fd.into(),
        initial_density: 0.0,
        infinite_capacity: false,
        queue_cap_cars: None,
    }
}

fn infinite(mut c: ScenarioCell) -> ScenarioCell {
    c.infinite_capacity = true;
    c
}

fn with_density(mut c: ScenarioCell, rho: f64) -> ScenarioCell {
    c.initial_density = rho;
    c
}

fn rate(steps: &[(f64, f64)]) -> Vec<DemandStep> {
    steps
        .iter()
        .map(|&(t_s, rate)| DemandStep { t_s, rate })
        .collect()
}

fn link(from: &str, to: &str, beta: f64) -> TurningRate {
    TurningRate {
        from: from.into(),
        to: to.into(),
        beta,
    }
}

/// Diverge demo: one source splits half/half onto two branches. Branch cell
/// `e2` is metered (via a dummy merge into an unbounded collector), so a
/// demo can blockade it and watch the first-in-first-out diverge throttle
/// the other branch as well.
fn example1() -> Scenario {
    let mut fds = BTreeMap::new();
    fds.insert(
        "main".to_string(),
        FundamentalDiagram::triangular(100.0, 25.0, 5000.0, 250.0),
    );
    Scenario {
        name: Some("example1".into()),
        units: units(),
        dt_s: 30.0,
        horizon: 30,
        fds,
        cells: vec![
            infinite(cell("e1", 1.0, 1, "main")),
            with_density(cell("e2", 1.0, 1, "main"), 20.0),
            with_density(cell("e3", 1.0, 1, "main"), 20.0),
            infinite(cell("e4", 1.0, 1, "main")),
            infinite(cell("e5", 1.0, 1, "main")),
        ],
        turning_rates: vec![
            link("e1", "e2", 0.5),
            link("e1", "e3", 0.5),
            link("e2", "e4", 1.0),
            link("e5", "e4", 1.0),
        ],
        junctions: Junctions {
            symmetric: vec!["e4".into()],
            ..Default::default()
        },
        demand: BTreeMap::from([("e1".to_string(), rate(&[(0.0, 4000.0)]))]),
        solver: SolverSection::default(),
    }
}

/// Merge demo: two sources share one bottleneck under the
/// proportional-priority rule; a surge on the second source steals share
/// from the first.
fn example2() -> Scenario {
    let mut fds = BTreeMap::new();
    fds.insert(
        "main".to_string(),
        FundamentalDiagram::triangular(100.0, 25.0, 5000.0, 250.0),
    );
    Scenario {
        name: Some("example2".into()),
        units: units(),
        dt_s: 30.0,
        horizon: 30,
        fds,
        cells: vec![
            infinite(cell("e1", 1.0, 1, "main")),
            infinite(cell("e2", 1.0, 1, "main")),
            with_density(cell("e3", 1.0, 1, "main"), 25.0),
        ],
        turning_rates: vec![link("e1", "e3", 1.0), link("e2", "e3", 1.0)],
        junctions: Junctions {
            symmetric: vec!["e3".into()],
            ..Default::default()
        },
        demand: BTreeMap::from([
            ("e1".to_string(), rate(&[(0.0, 2500.0)])),
            ("e2".to_string(), rate(&[(0.0, 2500.0), (300.0, 5000.0)])),
        ]),
        solver: SolverSection::default(),
    }
}

/// 23-cell demo network: a mainline with two controlled merges, two
/// first-in-first-out diverges feeding loop branches, four metered
/// onramps, several off-ramps and one uncontrolled merge that never
/// congests. Mainline lanes share one smooth per-lane diagram.
fn artificial() -> Scenario {
    let mut fds = BTreeMap::new();
    fds.insert(
        "mainline".to_string(),
        FundamentalDiagram::CubicHermite {
            demand: hermite_cubic_demand(100.0, 30.0, 2000.0).unwrap(),
            supply: hermite_cubic_supply(30.0, 2000.0, 150.0, -35.0).unwrap(),
            cap: 2000.0,
            rho_c: 30.0,
            rho_bar: 150.0,
        },
    );
    fds.insert(
        "onramp".to_string(),
        FundamentalDiagram::Integrator { max_rate: 2000.0 },
    );

    let lanes = |i: usize| -> u32 {
        match i {
            1..=5 | 9 | 10 => 3,
            14 => 1,
            _ => 2,
        }
    };
    let mut cells = Vec::new();
    for i in 1..=19 {
        let mut c = cell(&format!("e{i}"), 0.5, lanes(i), "mainline");
        // Sources and the cell downstream of the uncontrolled merge hold
        // unbounded queues.
        if i == 1 || i == 9 || i == 19 {
            c.infinite_capacity = true;
        } else {
            // Warm start: the rush hour catches the network already loaded
            // close to the critical density of 30 cars/km per lane, with
            // residual congestion on the minor loop and the bypass tail.
            let per_lane = match i {
                6 => 45.0,
                7 => 40.0,
                17 | 18 => 33.0,
                _ => 22.0,
            };
            c.initial_density = per_lane * lanes(i) as f64;
        }
        cells.push(c);
    }
    for i in 20..=23 {
        cells.push(infinite(cell(&format!("e{i}"), 0.5, 1, "onramp")));
    }

    let turning_rates = vec![
        link("e1", "e2", 1.0),
        link("e14", "e2", 1.0),
        link("e2", "e3", 2.0 / 3.0),
        link("e2", "e15", 1.0 / 3.0),
        link("e3", "e4", 0.8),
        link("e4", "e5", 1.0),
        link("e5", "e6", 0.5),
        link("e5", "e11", 0.25),
        link("e6", "e7", 0.8),
        link("e7", "e8", 0.8),
        link("e18", "e8", 1.0),
        link("e8", "e9", 1.0),
        link("e19", "e9", 1.0),
        link("e9", "e10", 1.0),
        link("e11", "e12", 1.0),
        link("e20", "e12", 1.0),
        link("e12", "e13", 1.0),
        link("e21", "e7", 1.0),
        link("e13", "e14", 0.8),
        link("e15", "e16", 1.0),
        link("e22", "e13", 1.0),
        link("e16", "e17", 0.8),
        link("e23", "e17", 1.0),
        link("e17", "e18", 1.0),
    ];
    let junctions = Junctions {
        symmetric: vec!["e2".into(), "e8".into()],
        asymmetric: vec![
            AsymJunction {
                into: "e12".into(),
                ramp: "e20".into(),
            },
            AsymJunction {
                into: "e7".into(),
                ramp: "e21".into(),
            },
            AsymJunction {
                into: "e13".into(),
                ramp: "e22".into(),
            },
            AsymJunction {
                into: "e17".into(),
                ramp: "e23".into(),
            },
        ],
        subcritical: vec!["e9".into()],
    };
    // Base rates 2000/1000/750 are too light to activate the merge
    // bottleneck at e8 (the off-ramps bleed the mainline below the merge
    // supply for every admissible wiring), so the whole profile is scaled
    // up by a calibration factor to produce the intended rush-hour
    // congestion pattern.
    const SCALE: f64 = 1.7;
    let pulse = |r: f64| rate(&[(0.0, SCALE * r), (900.0, 0.0)]);
    let demand = BTreeMap::from([
        ("e1".to_string(), rate(&[(0.0, SCALE * 2000.0), (1000.0, 0.0)])),
        ("e19".to_string(), pulse(600.0)),
        ("e20".to_string(), pulse(300.0)),
        ("e21".to_string(), pulse(1200.0)),
        ("e22".to_string(), rate(&[(0.0, SCALE * 750.0), (700.0, 0.0)])),
        ("e23".to_string(), rate(&[(0.0, SCALE * 1000.0), (650.0, 0.0)])),
    ]);

    Scenario {
        name: Some("artificial".into()),
        units: units(),
        dt_s: 12.5,
        horizon: 120,
        fds,
        cells,
        turning_rates,
        junctions,
        demand,
        solver: SolverSection {
            pwa_segments: Some(32),
            ..Default::default()
        },
    }
}

/// Ring-road model: 21 mainline cells with per-cell trapezoidal diagrams,
/// 8 metered onramps with 50-car queue caps, and 7 off-ramps expressed as
/// turning rates below one.
fn rocade(capacity_drop: Option<f64>) -> Scenario {
    const LEN: [f64; 21] = [
        0.5, 0.6, 0.5, 0.5, 0.7, 0.5, 0.5, 0.7, 1.3, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5,
        0.5, 0.5, 0.5,
    ];
    const CAP: [f64; 21] = [
        4410.0, 5364.0, 5500.0, 4950.0, 5257.0, 4311.0, 4680.0, 4950.0, 5167.0, 4878.0, 4320.0,
        4800.0, 4644.0, 5304.0, 4923.0, 4608.0, 5120.0, 5049.0, 4500.0, 5049.0, 7574.0,
    ];
    const BETA: [f64; 21] = [
        1.0, 1.0, 0.90, 1.0, 0.82, 1.0, 1.0, 1.0, 0.89, 1.0, 1.0, 0.90, 1.0, 0.84, 1.0, 1.0, 0.90,
        1.0, 0.92, 1.0, 1.0,
    ];
    // Mainline cells that receive a metered onramp.
    const RAMP_INTO: [usize; 8] = [2, 4, 6, 10, 13, 15, 18, 20];
    const V: f64 = 90.0;
    const RHO_BAR: f64 = 250.0;

    let mut fds = BTreeMap::new();
    for i in 0..21 {
        let cap = CAP[i];
        let rho_c = cap / V;
        let base = FundamentalDiagram::Trapezoidal {
            v: V,
            w: 1.05 * cap / (RHO_BAR - rho_c),
            cap_demand: cap,
            cap_supply: 1.05 * cap,
            rho_bar: RHO_BAR,
        };
        let fd = match capacity_drop {
            Some(f) => base.apply_capacity_drop(f).unwrap(),
            None => base,
        };
        fds.insert(format!("main{}", i + 1), fd);
    }
    fds.insert(
        "onramp".to_string(),
        FundamentalDiagram::Integrator { max_rate: 2000.0 },
    );

    let mut cells = Vec::new();
    for i in 0..21 {
        let mut c = cell(&format!("e{}", i + 1), LEN[i], 1, &format!("main{}", i + 1));
        if i == 0 {
            c.infinite_capacity = true; // mainline source
        }
        cells.push(c);
    }
    let mut turning_rates = Vec::new();
    for i in 0..20 {
        turning_rates.push(link(&format!("e{}", i + 1), &format!("e{}", i + 2), BETA[i]));
    }
    let mut asymmetric = Vec::new();
    let mut demand = BTreeMap::new();
    demand.insert(
        "e1".to_string(),
        rate(&[
            (0.0, 3000.0),
            (1800.0, 4000.0),
            (9000.0, 3000.0),
            (12600.0, 2200.0),
        ]),
    );
    for &k in &RAMP_INTO {
        let id = format!("r{k}");
        let mut c = infinite(cell(&id, 0.4, 1, "onramp"));
        c.queue_cap_cars = Some(50.0);
        cells.push(c);
        turning_rates.push(link(&id, &format!("e{k}"), 1.0));
        asymmetric.push(AsymJunction {
            into: format!("e{k}"),
            ramp: id.clone(),
        });
        demand.insert(
            id,
            rate(&[
                (0.0, 300.0),
                (1800.0, 750.0),
                (9000.0, 400.0),
                (12600.0, 200.0),
            ]),
        );
    }

    Scenario {
        name: Some(match capacity_drop {
            Some(_) => "rocade-capacity-drop".into(),
            None => "rocade".into(),
        }),
        units: units(),
        dt_s: 15.0,
        horizon: 1200,
        fds,
        cells,
        turning_rates,
        junctions: Junctions {
            asymmetric,
            ..Default::default()
        },
        demand,
        solver: SolverSection::default(),
    }
}

fn main() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    fs::create_dir_all(&dir).unwrap();
    let all = [
        ("example1.json", example1()),
        ("example2.json", example2()),
        ("artificial.json", artificial()),
        ("rocade.json", rocade(None)),
        ("rocade_capacity_drop.json", rocade(Some(0.10))),
    ];
    for (name, scenario) in all {
        // Round-trip through the parser so a generated file can never be
        // invalid.
        let text = scenario.to_json();
        let parsed = Scenario::from_str(&text).unwrap();
        parsed.to_network().unwrap();
        assert_eq!(parsed, scenario);
        fs::write(dir.join(name), text + "\n").unwrap();
        println!("wrote {name}");
    }
}
