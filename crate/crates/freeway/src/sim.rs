//! Forward simulation of the cell-transmission dynamics with controlled
//! merging junctions, plus performance metrics (total time spent,
//! free-flow time, delay) and CSV trajectory export.

use crate::fundamental::FdError;
use crate::network::{CellClass, CellId, MergeKind, Network};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("step {t}: {source}")]
    Fd { t: usize, source: FdError },
    #[error("step {t}, cell {cell}: control {applied} infeasible ({msg})")]
    InfeasibleControl {
        t: usize,
        cell: String,
        applied: f64,
        msg: String,
    },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("horizon must be positive")]
    EmptyHorizon,
}

/// How merges without metering split scarce supply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UncontrolledMerge {
    /// Inflows scale back proportionally to their demands.
    ProportionalDemand,
    /// The onramp of an asymmetric merge forces its way in first; other
    /// merges fall back to proportional scaling.
    RampPriority,
}

#[derive(Debug, Clone, Copy)]
pub enum ControlPolicy {
    /// Metered flows must already be feasible up to a relative tolerance;
    /// larger violations are an error.
    Strict { rel_tol: f64 },
    /// Metered flows are clamped into the feasible set.
    Clamp,
}

#[derive(Debug, Clone)]
pub enum StepControl<'a> {
    /// Flows (cars/h) for the controlled cells in `Network::controlled_cells`
    /// order.
    Metered(&'a [f64], ControlPolicy),
    Uncontrolled(UncontrolledMerge),
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub next_density: Vec<f64>,
    /// Realized outflow of every cell (cars/h).
    pub flows: Vec<f64>,
    /// True if some asymmetric merge violated the priority-validity
    /// condition `supply >= beta * mainline demand` this step.
    pub asym_validity_violated: bool,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    /// `densities[t]` for t = 0..=T.
    pub densities: Vec<Vec<f64>>,
    /// `flows[t]` for t = 0..T (outflows applied during step t).
    pub flows: Vec<Vec<f64>>,
    /// Exogenous inflows actually applied, `inputs[t]` for t = 0..T.
    pub inputs: Vec<Vec<f64>>,
    pub dt_hours: f64,
    /// Number of steps at which the asymmetric-merge validity condition
    /// failed.
    pub asym_validity_violations: usize,
}

/// One update of every cell. `w` holds exogenous inflows in cars/h.
pub fn step(
    net: &Network,
    t: usize,
    rho: &[f64],
    w: &[f64],
    control: &StepControl,
) -> Result<StepOutcome, SimError> {
    let n = net.num_cells();
    if rho.len() != n || w.len() != n {
        return Err(SimError::Dimension(format!(
            "expected {n} densities and inputs, got {} and {}",
            rho.len(),
            w.len()
        )));
    }
    let mut d = vec![0.0; n];
    let mut s = vec![0.0; n];
    for e in 0..n {
        d[e] = net.demand(e, rho[e]).map_err(|source| SimError::Fd { t, source })?;
        s[e] = net.supply(e, rho[e]).map_err(|source| SimError::Fd { t, source })?;
    }

    let mut phi = vec![f64::NAN; n];
    let mut asym_violated = false;

    // Controlled and sub-critical outflows first: the mainline of an
    // asymmetric merge and FIFO cells depend only on supplies and on ramp
    // flows, which are decision variables (or demands when uncontrolled).
    let controlled = net.controlled_cells();
    match control {
        StepControl::Metered(flows, policy) => {
            if flows.len() != controlled.len() {
                return Err(SimError::Dimension(format!(
                    "expected {} metered flows, got {}",
                    controlled.len(),
                    flows.len()
                )));
            }
            for (k, &e) in controlled.iter().enumerate() {
                phi[e] = flows[k];
            }
            // Per-merge feasibility: demand bound per cell, joint supply
            // bound at symmetric junctions.
            for m in &net.merges {
                match m.kind {
                    MergeKind::Symmetric => {
                        let ins = net.inflows(m.into);
                        let mut total = 0.0;
                        for &(i, b) in ins {
                            let bound = d[i];
                            phi[i] = apply_policy(net, t, i, phi[i], bound, policy)?;
                            total += b * phi[i];
                        }
                        if total > s[m.into] * (1.0 + 1e-9) + 1e-9 {
                            match policy {
                                ControlPolicy::Strict { rel_tol } => {
                                    if total > s[m.into] * (1.0 + rel_tol) + rel_tol {
                                        return Err(SimError::InfeasibleControl {
                                            t,
                                            cell: net.cells[m.into].name.clone(),
                                            applied: total,
                                            msg: format!(
                                                "joint inflow exceeds supply {}",
                                                s[m.into]
                                            ),
                                        });
                                    }
                                }
                                ControlPolicy::Clamp => {}
                            }
                            let scale = s[m.into] / total;
                            for &(i, _) in ins {
                                phi[i] *= scale;
                            }
                        }
                    }
                    MergeKind::Asymmetric { ramp } => {
                        let bound = d[ramp];
                        phi[ramp] = apply_policy(net, t, ramp, phi[ramp], bound, policy)?;
                    }
                    MergeKind::Subcritical => {}
                }
            }
        }
        StepControl::Uncontrolled(model) => {
            for m in &net.merges {
                let ins = net.inflows(m.into);
                match m.kind {
                    MergeKind::Asymmetric { ramp }
                        if *model == UncontrolledMerge::RampPriority =>
                    {
                        let b_r = net.beta(m.into, ramp);
                        phi[ramp] = d[ramp].min(s[m.into] / b_r);
                    }
                    MergeKind::Symmetric | MergeKind::Asymmetric { .. } => {
                        let total: f64 = ins.iter().map(|&(i, b)| b * d[i]).sum();
                        let scale = if total > s[m.into] { s[m.into] / total } else { 1.0 };
                        for &(i, _) in ins {
                            phi[i] = scale * d[i];
                        }
                    }
                    MergeKind::Subcritical => {}
                }
            }
        }
    }

    for e in 0..n {
        match net.classes[e] {
            CellClass::Subcritical => phi[e] = d[e],
            CellClass::AsymmetricMainline { ramp } => {
                let outs = net.outflows(e);
                let (k, b_m) = (outs[0].0, outs[0].1);
                let b_r = net.beta(k, ramp);
                if s[k] < b_m * d[e] - 1e-9 {
                    asym_violated = true;
                }
                phi[e] = d[e].min(((s[k] - b_r * phi[ramp]).max(0.0)) / b_m);
            }
            CellClass::Local => {
                // FIFO: every downstream cell of a local cell has this cell
                // as its unique inflow, so the scale factor only involves
                // supplies.
                let mut kappa = 1.0f64;
                if d[e] > 0.0 {
                    for &(k, b) in net.outflows(e) {
                        kappa = kappa.min(s[k] / (b * d[e]));
                    }
                }
                phi[e] = kappa.max(0.0) * d[e];
            }
            CellClass::ControlledSymmetric | CellClass::ControlledRamp => {}
        }
    }

    let mut next = vec![0.0; n];
    for e in 0..n {
        let inflow: f64 = net.inflows(e).iter().map(|&(i, b)| b * phi[i]).sum();
        let mut r = rho[e] + net.dt_hours / net.cells[e].length_km * (inflow - phi[e] + w[e]);
        // Guard against accumulated rounding at the domain boundary.
        if r < 0.0 && r > -1e-7 {
            r = 0.0;
        }
        if !net.cells[e].infinite_capacity {
            let rb = net.cells[e].fd.rho_bar();
            if r > rb && r < rb * (1.0 + 1e-9) + 1e-7 {
                r = rb;
            }
        }
        next[e] = r;
    }

    Ok(StepOutcome {
        next_density: next,
        flows: phi,
        asym_validity_violated: asym_violated,
    })
}

fn apply_policy(
    net: &Network,
    t: usize,
    cell: CellId,
    value: f64,
    demand_bound: f64,
    policy: &ControlPolicy,
) -> Result<f64, SimError> {
    let clamped = value.clamp(0.0, demand_bound);
    match policy {
        ControlPolicy::Clamp => Ok(clamped),
        ControlPolicy::Strict { rel_tol } => {
            let slack = rel_tol * demand_bound.max(1.0);
            if value < -slack || value > demand_bound + slack {
                Err(SimError::InfeasibleControl {
                    t,
                    cell: net.cells[cell].name.clone(),
                    applied: value,
                    msg: format!("outside [0, {demand_bound}]"),
                })
            } else {
                Ok(clamped)
            }
        }
    }
}

/// Exogenous demand schedule: `w[t][e]` in cars/h for t = 0..T.
pub type DemandSchedule = Vec<Vec<f64>>;

/// Run `T` steps from the network's initial densities.
pub fn simulate(
    net: &Network,
    demand: &DemandSchedule,
    control: impl Fn(usize, &[f64]) -> StepControlOwned,
) -> Result<Trajectory, SimError> {
    let horizon = demand.len();
    if horizon == 0 {
        return Err(SimError::EmptyHorizon);
    }
    let n = net.num_cells();
    let mut rho: Vec<f64> = net.cells.iter().map(|c| c.initial_density).collect();
    let mut densities = Vec::with_capacity(horizon + 1);
    densities.push(rho.clone());
    let mut flows = Vec::with_capacity(horizon);
    let mut inputs = Vec::with_capacity(horizon);
    let mut violations = 0usize;
    for (t, w) in demand.iter().enumerate() {
        if w.len() != n {
            return Err(SimError::Dimension(format!(
                "demand row {t} has {} entries, expected {n}",
                w.len()
            )));
        }
        let ctrl = control(t, &rho);
        let out = step(net, t, &rho, w, &ctrl.as_ref())?;
        rho = out.next_density;
        densities.push(rho.clone());
        flows.push(out.flows);
        inputs.push(w.clone());
        if out.asym_validity_violated {
            violations += 1;
        }
    }
    Ok(Trajectory {
        densities,
        flows,
        inputs,
        dt_hours: net.dt_hours,
        asym_validity_violations: violations,
    })
}

/// Owned variant of [`StepControl`], convenient for closures.
#[derive(Debug, Clone)]
pub enum StepControlOwned {
    Metered(Vec<f64>, ControlPolicy),
    Uncontrolled(UncontrolledMerge),
}

impl StepControlOwned {
    pub fn as_ref(&self) -> StepControl<'_> {
        match self {
            StepControlOwned::Metered(v, p) => StepControl::Metered(v, *p),
            StepControlOwned::Uncontrolled(m) => StepControl::Uncontrolled(*m),
        }
    }
}

/// Uncontrolled rollout.
pub fn simulate_uncontrolled(
    net: &Network,
    demand: &DemandSchedule,
    model: UncontrolledMerge,
) -> Result<Trajectory, SimError> {
    simulate(net, demand, |_, _| StepControlOwned::Uncontrolled(model))
}

/// Open-loop metered rollout; `controls[t]` is in controlled-cell order.
pub fn simulate_open_loop(
    net: &Network,
    demand: &DemandSchedule,
    controls: &[Vec<f64>],
    policy: ControlPolicy,
) -> Result<Trajectory, SimError> {
    if controls.len() != demand.len() {
        return Err(SimError::Dimension(format!(
            "{} control rows for {} demand rows",
            controls.len(),
            demand.len()
        )));
    }
    simulate(net, demand, |t, _| {
        StepControlOwned::Metered(controls[t].clone(), policy)
    })
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.flows.len()
    }

    /// Total time spent: car-hours accumulated over the horizon,
    /// `dt * sum_{t=1..T} sum_e l_e rho_e(t)`.
    pub fn total_time_spent(&self, net: &Network) -> f64 {
        let mut tts = 0.0;
        for t in 1..self.densities.len() {
            for (e, c) in net.cells.iter().enumerate() {
                tts += c.length_km * self.densities[t][e];
            }
        }
        tts * self.dt_hours
    }
}

/// Free-flow time: car-hours if every car moved at the free-flow speed with
/// no capacity or supply limits. Simulated with linearized demand
/// `d = gamma_d * rho` and infinite supply everywhere.
pub fn free_flow_time(net: &Network, demand: &DemandSchedule) -> Result<f64, SimError> {
    let n = net.num_cells();
    let gammas: Vec<f64> = (0..n)
        .map(|e| {
            net.cells[e]
                .fd
                .lipschitz_constants()
                .map(|(gd, _)| gd)
                .unwrap_or(net.cells[e].length_km / net.dt_hours)
        })
        .collect();
    let mut rho: Vec<f64> = net.cells.iter().map(|c| c.initial_density).collect();
    let mut fft = 0.0;
    for w in demand {
        let phi: Vec<f64> = (0..n).map(|e| gammas[e] * rho[e]).collect();
        let mut next = vec![0.0; n];
        for e in 0..n {
            let inflow: f64 = net.inflows(e).iter().map(|&(i, b)| b * phi[i]).sum();
            next[e] =
                (rho[e] + net.dt_hours / net.cells[e].length_km * (inflow - phi[e] + w[e])).max(0.0);
        }
        rho = next;
        for (e, c) in net.cells.iter().enumerate() {
            fft += c.length_km * rho[e];
        }
    }
    Ok(fft * net.dt_hours)
}

/// Delay = total time spent minus free-flow time.
pub fn delay(net: &Network, traj: &Trajectory) -> Result<f64, SimError> {
    Ok(traj.total_time_spent(net) - free_flow_time(net, &traj.inputs)?)
}

/// Check the asymmetric-merge validity condition along a whole trajectory:
/// at every step and merge, downstream supply must cover the mainline
/// demand share. Returns the violating `(t, merge target)` pairs.
pub fn check_asymmetric_condition(
    net: &Network,
    traj: &Trajectory,
) -> Result<Vec<(usize, CellId)>, SimError> {
    let mut bad = Vec::new();
    for t in 0..traj.horizon() {
        let rho = &traj.densities[t];
        for m in &net.merges {
            if let MergeKind::Asymmetric { ramp } = m.kind {
                let &(mainline, _) = net
                    .inflows(m.into)
                    .iter()
                    .find(|&&(i, _)| i != ramp)
                    .expect("asymmetric merge has a mainline");
                let b_m = net.beta(m.into, mainline);
                let d_m = net
                    .demand(mainline, rho[mainline])
                    .map_err(|source| SimError::Fd { t, source })?;
                let s_k = net
                    .supply(m.into, rho[m.into])
                    .map_err(|source| SimError::Fd { t, source })?;
                if s_k < b_m * d_m - 1e-9 {
                    bad.push((t, m.into));
                }
            }
        }
    }
    Ok(bad)
}

/// Turn desired metering rates into flows feasible at the given state:
/// clamp to `[0, demand]`, then scale symmetric-merge groups into the
/// downstream supply.
pub fn realize_demand_control(
    net: &Network,
    rho: &[f64],
    desired: &[f64],
) -> Result<Vec<f64>, SimError> {
    let controlled = net.controlled_cells();
    if desired.len() != controlled.len() {
        return Err(SimError::Dimension(format!(
            "expected {} desired flows, got {}",
            controlled.len(),
            desired.len()
        )));
    }
    let mut by_cell = vec![f64::NAN; net.num_cells()];
    for (k, &e) in controlled.iter().enumerate() {
        let d = net.demand(e, rho[e]).map_err(|source| SimError::Fd { t: 0, source })?;
        by_cell[e] = desired[k].clamp(0.0, d);
    }
    for m in &net.merges {
        if matches!(m.kind, MergeKind::Symmetric) {
            let s_k = net
                .supply(m.into, rho[m.into])
                .map_err(|source| SimError::Fd { t: 0, source })?;
            let total: f64 = net.inflows(m.into).iter().map(|&(i, b)| b * by_cell[i]).sum();
            if total > s_k {
                let scale = s_k / total;
                for &(i, _) in net.inflows(m.into) {
                    by_cell[i] *= scale;
                }
            }
        }
    }
    Ok(controlled.iter().map(|&e| by_cell[e]).collect())
}

/// Long-format trajectory CSV: one row per (step, cell).
pub fn write_trajectory_csv<W: Write>(
    mut out: W,
    net: &Network,
    traj: &Trajectory,
) -> std::io::Result<()> {
    writeln!(out, "t_s,cell,density_cars_per_km,flow_cars_per_h,input_flow_cars_per_h")?;
    let dt_s = traj.dt_hours * 3600.0;
    for t in 0..traj.horizon() {
        for (e, c) in net.cells.iter().enumerate() {
            writeln!(
                out,
                "{:.8e},{},{:.8e},{:.8e},{:.8e}",
                t as f64 * dt_s,
                c.name,
                traj.densities[t][e],
                traj.flows[t][e],
                traj.inputs[t][e]
            )?;
        }
    }
    // Final densities, with no flow columns.
    let t_end = traj.horizon() as f64 * dt_s;
    for (e, c) in net.cells.iter().enumerate() {
        writeln!(
            out,
            "{:.8e},{},{:.8e},,",
            t_end,
            c.name,
            traj.densities[traj.horizon()][e]
        )?;
    }
    Ok(())
}

/// Density contour CSV: wide format, one row per step, one column per cell.
pub fn write_contour_csv<W: Write>(
    mut out: W,
    net: &Network,
    traj: &Trajectory,
) -> std::io::Result<()> {
    let names: Vec<&str> = net.cells.iter().map(|c| c.name.as_str()).collect();
    writeln!(out, "t_s,{}", names.join(","))?;
    let dt_s = traj.dt_hours * 3600.0;
    for (t, row) in traj.densities.iter().enumerate() {
        let vals: Vec<String> = row.iter().map(|v| format!("{v:.8e}")).collect();
        writeln!(out, "{:.8e},{}", t as f64 * dt_s, vals.join(","))?;
    }
    Ok(())
}
