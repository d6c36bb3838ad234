//! Scratch driver for eyeballing bundled-scenario numbers.

use freeway::fnc::{model_size, optimize};
use freeway::scenario::Scenario;
use freeway::sim::{simulate_uncontrolled, UncontrolledMerge};
use std::path::PathBuf;
use std::time::Instant;

fn main() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    let s = Scenario::from_path(&dir.join("artificial.json")).unwrap();
    let net = s.to_network().unwrap();
    let demand = s.demand_schedule().unwrap();
    let (vars, cons) = model_size(&net, s.horizon);
    println!("artificial size: {vars} vars, {cons} constraints");

    let unc = simulate_uncontrolled(&net, &demand, UncontrolledMerge::RampPriority).unwrap();
    let tts_ol = unc.total_time_spent(&net);
    println!("uncontrolled TTS = {tts_ol:.2} h");
    let peak = |e: usize| {
        (0..=s.horizon)
            .map(|t| unc.densities[t][e])
            .fold(0.0f64, f64::max)
    };
    for e in 0..net.num_cells() {
        let lanes = net.cells[e].lanes as f64;
        let per_lane = peak(e) / lanes;
        let first = (0..=s.horizon)
            .find(|&t| unc.densities[t][e] / lanes > 31.0)
            .map(|t| format!("  CONGESTED from {:.0} s", t as f64 * s.dt_s))
            .unwrap_or_default();
        println!("  {}: peak/lane {:.1}{}", net.cells[e].name, per_lane, first);
    }
    if std::env::args().nth(1).as_deref() == Some("tts") {
        for e in 0..net.num_cells() {
            let cell_tts: f64 = (0..=s.horizon)
                .map(|t| unc.densities[t][e] * net.cells[e].length_km * s.dt_s / 3600.0)
                .sum();
            println!("  {}: {:.1} h", net.cells[e].name, cell_tts);
        }
    }
    if std::env::args().nth(1).as_deref() == Some("trace") {
        println!("t_s  rho1 rho14 rho2 rho4 rho5  phi1 phi14 phi2 phi4");
        for t in (0..s.horizon).step_by(8) {
            let r = |e: usize| unc.densities[t][e];
            let f = |e: usize| unc.flows[t][e];
            println!(
                "{:5.0} {:6.1} {:6.1} {:6.1} {:6.1} {:6.1}  {:6.0} {:6.0} {:6.0} {:6.0}",
                t as f64 * s.dt_s, r(0), r(13), r(1), r(3), r(4), f(0), f(13), f(1), f(3)
            );
        }
    }
    if std::env::args().nth(1).as_deref() != Some("opt") {
        return;
    }

    let t0 = Instant::now();
    let out = optimize(&net, &demand, &s.fnc_options()).unwrap();
    println!(
        "optimal TTS = {:.2} h (relaxed {:.2}, gap {:.2e}, {} lp iters, {:.1} s)",
        out.tts_recovered,
        out.relaxed.tts,
        out.exactness_gap,
        out.relaxed.iterations,
        t0.elapsed().as_secs_f64()
    );
    println!("lp rows {} cols {}", out.stats.lp_rows, out.stats.lp_cols);
    let peak_opt = |e: usize| {
        (0..=s.horizon)
            .map(|t| out.trajectory.densities[t][e])
            .fold(0.0f64, f64::max)
    };
    for e in 0..net.num_cells() {
        println!("  opt {}: peak {:.1}", net.cells[e].name, peak_opt(e));
    }
}
