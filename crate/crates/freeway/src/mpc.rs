//! Receding-horizon control: at a fixed period, measure the plant state,
//! solve the finite-horizon relaxation on a concave prediction model, and
//! apply the resulting metering plan to the plant until the next update.
//!
//! The plant may use non-concave capacity-drop diagrams that the
//! relaxation cannot model; the mismatch is what closed-loop feedback is
//! for.

use crate::fnc::{build_relaxed, discretize_network, solve_relaxed, FncError, FncOptions};
use crate::fundamental::{FundamentalDiagram, PwaCurve};
use crate::network::{CellSpec, Network};
use crate::sim::{self, ControlPolicy, DemandSchedule, StepControl, Trajectory};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MpcError {
    #[error(transparent)]
    Fnc(#[from] FncError),
    #[error(transparent)]
    Sim(#[from] sim::SimError),
    #[error("plant and prediction model disagree: {0}")]
    ModelMismatch(String),
}

#[derive(Debug, Clone, Copy)]
pub struct MpcOptions {
    /// Prediction horizon, in steps.
    pub horizon: usize,
    /// Steps between state measurements and re-solves.
    pub update_every: usize,
    pub fnc: FncOptions,
}

impl Default for MpcOptions {
    fn default() -> Self {
        Self {
            horizon: 40,
            update_every: 8,
            fnc: FncOptions::default(),
        }
    }
}

#[derive(Debug)]
pub struct MpcOutcome {
    /// Closed-loop plant trajectory over the full schedule.
    pub trajectory: Trajectory,
    pub tts: f64,
    /// Number of optimization solves performed.
    pub solves: usize,
    /// Metering plan actually applied, per step in controlled-cell order.
    pub applied_controls: Vec<Vec<f64>>,
}

/// Concave stand-in for a capacity-drop diagram: a trapezoidal demand whose
/// capacity averages the free-flow and the post-drop throughput, with the
/// free-flow slope and the supply curve kept. Other diagrams pass through
/// unchanged.
pub fn concave_proxy(fd: &FundamentalDiagram) -> Result<FundamentalDiagram, FncError> {
    match fd {
        FundamentalDiagram::CapacityDrop {
            base_demand,
            base_supply,
            drop_fraction,
            ..
        } => {
            let cap_free = base_demand.points.iter().fold(0.0f64, |m, p| m.max(p.1));
            let cap_post = (1.0 - drop_fraction) * cap_free;
            let cap_avg = 0.5 * (cap_free + cap_post);
            let gamma = base_demand
                .slopes()
                .first()
                .copied()
                .filter(|&g| g > 0.0)
                .ok_or_else(|| FncError::NonConcave("capacity-drop proxy".into()))?;
            let rho_bar = base_supply.points.last().map_or(f64::INFINITY, |p| p.0);
            let demand = PwaCurve::new(vec![
                (0.0, 0.0),
                (cap_avg / gamma, cap_avg),
                (rho_bar, cap_avg),
            ])
            .map_err(FncError::Fd)?;
            Ok(FundamentalDiagram::Pwa {
                demand,
                supply: base_supply.clone(),
            })
        }
        other => Ok(other.clone()),
    }
}

/// Build the concave prediction network for a plant by replacing every
/// capacity-drop diagram with its [`concave_proxy`].
pub fn prediction_model(plant: &Network) -> Result<Network, MpcError> {
    let mut specs = Vec::with_capacity(plant.num_cells());
    for c in &plant.cells {
        specs.push(CellSpec {
            name: c.name.clone(),
            length_km: c.length_km,
            lanes: 1, // diagrams are already lane-scaled
            fd: concave_proxy(&c.fd)?,
            infinite_capacity: c.infinite_capacity,
            queue_cap_cars: c.queue_cap_cars,
            initial_density: c.initial_density,
        });
    }
    let mut ratios = Vec::new();
    for e in 0..plant.num_cells() {
        for &(i, b) in plant.inflows(e) {
            ratios.push((i, e, b));
        }
    }
    Ok(Network::new(
        specs,
        &ratios,
        plant.merges.clone(),
        plant.dt_hours,
    )
    .map_err(FncError::Network)?)
}

/// Closed-loop receding-horizon run. `demand` drives the plant for its full
/// length and doubles as the controller's preview; beyond the schedule the
/// preview holds the last row.
pub fn run_receding_horizon(
    plant: &Network,
    controller: &Network,
    demand: &DemandSchedule,
    opts: &MpcOptions,
) -> Result<MpcOutcome, MpcError> {
    let n = plant.num_cells();
    let total = demand.len();
    if total == 0 {
        return Err(MpcError::Sim(sim::SimError::EmptyHorizon));
    }
    if controller.num_cells() != n {
        return Err(MpcError::ModelMismatch(format!(
            "{} plant cells vs {} controller cells",
            n,
            controller.num_cells()
        )));
    }
    if controller.controlled_cells() != plant.controlled_cells() {
        return Err(MpcError::ModelMismatch(
            "controlled cells differ".into(),
        ));
    }
    if opts.horizon == 0 || opts.update_every == 0 {
        return Err(MpcError::ModelMismatch(
            "horizon and update period must be positive".into(),
        ));
    }

    // Discretize the controller once; per solve we only reset its initial
    // densities to the measured plant state.
    let mut model = discretize_network(controller, opts.fnc.pwa_segments)?;

    let mut rho: Vec<f64> = plant.cells.iter().map(|c| c.initial_density).collect();
    let mut densities = vec![rho.clone()];
    let mut flows = Vec::with_capacity(total);
    let mut inputs = Vec::with_capacity(total);
    let mut applied_controls = Vec::with_capacity(total);
    let mut violations = 0usize;
    let mut plan: Vec<Vec<f64>> = Vec::new();
    let mut plan_offset = 0usize;
    let mut solves = 0usize;

    for t in 0..total {
        if t % opts.update_every == 0 {
            // Measure state (clamped into the model's density domain).
            for (e, cell) in model.cells.iter_mut().enumerate() {
                let hi = if cell.infinite_capacity {
                    f64::INFINITY
                } else {
                    cell.fd.rho_bar()
                };
                cell.initial_density = rho[e].clamp(0.0, hi);
            }
            // Preview: the scheduled demand, held constant past the end.
            let preview: DemandSchedule = (t..t + opts.horizon)
                .map(|s| demand[s.min(total - 1)].clone())
                .collect();
            let mut problem = build_relaxed(&model, controller, &preview, &opts.fnc)?;
            let solution = solve_relaxed(&model, &mut problem, &opts.fnc)?;
            plan = solution.controls;
            plan_offset = t;
            solves += 1;
        }
        let controls = &plan[t - plan_offset];
        let out = sim::step(
            plant,
            t,
            &rho,
            &demand[t],
            &StepControl::Metered(controls, ControlPolicy::Clamp),
        )?;
        // Record what the plant actually admitted after clamping.
        let applied: Vec<f64> = plant
            .controlled_cells()
            .iter()
            .map(|&e| out.flows[e])
            .collect();
        rho = out.next_density;
        densities.push(rho.clone());
        flows.push(out.flows);
        inputs.push(demand[t].clone());
        applied_controls.push(applied);
        if out.asym_validity_violated {
            violations += 1;
        }
    }

    let trajectory = Trajectory {
        densities,
        flows,
        inputs,
        dt_hours: plant.dt_hours,
        asym_validity_violations: violations,
    };
    let tts = trajectory.total_time_spent(plant);
    Ok(MpcOutcome {
        trajectory,
        tts,
        solves,
        applied_controls,
    })
}

#[cfg(test)]
mod tests;
