//! Finite-horizon optimal control of the network by linear programming.
//!
//! The non-convex optimal-control problem is relaxed by replacing the
//! flow-update equalities with their hypograph inequalities
//! (`flow <= demand`, `merged inflow <= supply`). With concave diagrams and
//! a total-time-spent objective the relaxation is exact: copying the
//! relaxed solution's controlled flows into the forward simulator
//! reproduces the relaxed optimum. The builder reports both the model-level
//! problem size (one demand constraint per cell and step, one supply
//! constraint per affine piece of the stated diagram) and the exact row
//! count of the LP it emits.

use crate::fundamental::{FdError, FundamentalDiagram};
use crate::lp::{self, Problem, Sense, SolveStatusError, Status};
use crate::network::{CellClass, CellId, CellSpec, Network, NetworkError};
use crate::sim::{self, ControlPolicy, DemandSchedule, SimError, Trajectory};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FncError {
    #[error("cell {0}: diagram is not concave; the relaxation does not apply")]
    NonConcave(String),
    #[error(transparent)]
    Fd(#[from] FdError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Lp(#[from] lp::LpError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("relaxed program not solved to optimality: {0}")]
    Solve(SolveStatusError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Clone, Copy)]
pub struct FncOptions {
    /// Secant count used when a smooth diagram is replaced by a piecewise
    /// affine under-approximation (both in the LP and in the recovery
    /// simulation, so the two stay exact w.r.t. each other).
    pub pwa_segments: usize,
    /// Weight discount on onramp cells in the objective: onramp densities
    /// count as `(1 - epsilon) * length`. Zero gives plain total time
    /// spent.
    pub epsilon: f64,
    /// Relative gap at which row generation stops early: once a trajectory
    /// recovered from the current iterate costs within this factor of the
    /// LP lower bound, the bound is proven and remaining cuts are moot.
    /// Zero disables the shortcut and runs until no piece is violated.
    pub early_stop_gap: f64,
    pub lp_options: lp::Options,
}

impl Default for FncOptions {
    fn default() -> Self {
        Self {
            pwa_segments: 32,
            epsilon: 0.0,
            early_stop_gap: 1e-9,
            lp_options: lp::Options::default(),
        }
    }
}

/// Model-level and solver-level size of the optimal-control program.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProblemStats {
    /// Decision variables of the stated model: one density and one flow per
    /// cell and step.
    pub num_vars: usize,
    /// Stated-model constraints: conservation, one demand bound per cell,
    /// one supply bound per affine piece of a piecewise-affine diagram (one
    /// for a smooth curve), queue caps, and control nonnegativity.
    pub num_constraints: usize,
    /// Rows actually emitted after discretization (bounds excluded).
    pub lp_rows: usize,
    pub lp_cols: usize,
    pub lp_nonzeros: usize,
}

/// Stated-model problem size, independent of the discretization level.
pub fn model_size(net: &Network, horizon: usize) -> (usize, usize) {
    let n = net.num_cells();
    let mut per_step = n; // conservation
    per_step += n; // demand bound per cell
    for c in &net.cells {
        if c.infinite_capacity {
            continue;
        }
        per_step += match &c.fd {
            FundamentalDiagram::Trapezoidal { .. } => 2,
            FundamentalDiagram::Pwa { supply, .. } => supply.segments().len(),
            _ => 1,
        };
        if c.queue_cap_cars.is_some() {
            per_step += 1;
        }
    }
    for c in &net.cells {
        if c.infinite_capacity && c.queue_cap_cars.is_some() {
            per_step += 1;
        }
    }
    per_step += net.controlled_cells().len(); // control nonnegativity
    (2 * n * horizon, per_step * horizon)
}

/// Replace smooth diagrams by concave piecewise-affine secant
/// under-approximations so that the LP and the forward simulator share the
/// same dynamics. Trapezoidal and piecewise-affine diagrams pass through
/// unchanged; capacity-drop diagrams are rejected.
pub fn discretize_network(net: &Network, segments: usize) -> Result<Network, FncError> {
    let mut specs = Vec::with_capacity(net.num_cells());
    for c in &net.cells {
        let fd = match &c.fd {
            FundamentalDiagram::CubicHermite { .. } => c.fd.pwa_discretize(segments)?,
            FundamentalDiagram::CapacityDrop { .. } => {
                return Err(FncError::NonConcave(c.name.clone()))
            }
            other => other.clone(),
        };
        specs.push(CellSpec {
            name: c.name.clone(),
            length_km: c.length_km,
            lanes: 1, // diagram is already lane-scaled
            fd,
            infinite_capacity: c.infinite_capacity,
            queue_cap_cars: c.queue_cap_cars,
            initial_density: c.initial_density,
        });
    }
    let mut ratios = Vec::new();
    for e in 0..net.num_cells() {
        for &(i, b) in net.inflows(e) {
            ratios.push((i, e, b));
        }
    }
    Ok(Network::new(specs, &ratios, net.merges.clone(), net.dt_hours)?)
}

/// Affine pieces `(slope, intercept)` of both curves of a concave diagram.
/// Infinite-capacity cells report no supply pieces.
fn affine_pieces(
    c: &crate::network::Cell,
) -> Result<(Vec<(f64, f64)>, Vec<(f64, f64)>), FncError> {
    let supply_unused = c.infinite_capacity;
    match &c.fd {
        FundamentalDiagram::Trapezoidal {
            v,
            w,
            cap_demand,
            cap_supply,
            rho_bar,
        } => {
            let mut d = vec![(*v, 0.0)];
            if cap_demand.is_finite() && cap_demand / v < *rho_bar {
                d.push((0.0, *cap_demand));
            }
            let s = if supply_unused {
                Vec::new()
            } else {
                vec![(0.0, *cap_supply), (-*w, w * rho_bar)]
            };
            Ok((d, s))
        }
        FundamentalDiagram::Pwa { demand, supply } => Ok((
            demand.segments(),
            if supply_unused {
                Vec::new()
            } else {
                supply.segments()
            },
        )),
        _ => Err(FncError::NonConcave(c.name.clone())),
    }
}

/// The relaxed program together with the index maps needed to read a
/// solution back out.
pub struct RelaxedProblem {
    pub lp: Problem,
    /// Crash-basis hint: each conservation row starts with its
    /// next-step density basic, a feasible lower-triangular basis.
    pub basis_hint: Vec<Option<usize>>,
    pub stats: ProblemStats,
    horizon: usize,
    n: usize,
    controlled: Vec<CellId>,
    lazy: LazyPieces,
}

/// Sloped hypograph pieces kept out of the initial LP. Only a couple of
/// pieces per cell and step can be active at an optimum, so rows are
/// generated on demand: each round scans the candidate pieces against the
/// current solution and appends the violated ones.
struct LazyPieces {
    /// Per cell: sloped demand pieces `(g, h)`.
    demand: Vec<Vec<(f64, f64)>>,
    /// Per cell with inflows: sloped supply pieces `(g, h)`.
    supply: Vec<Vec<(f64, f64)>>,
    inflows: Vec<Vec<(CellId, f64)>>,
    /// Rows already in the LP, keyed `(is_supply, cell, piece, t)`.
    present: std::collections::HashSet<(bool, usize, usize, usize)>,
}

impl RelaxedProblem {
    /// Variable index of the outflow of cell `e` during step `t`
    /// (`t = 0..T`).
    pub fn phi_var(&self, e: CellId, t: usize) -> usize {
        t * 2 * self.n + e
    }

    /// Variable index of the density of cell `e` at time `t` (`t = 1..=T`).
    pub fn rho_var(&self, e: CellId, t: usize) -> usize {
        debug_assert!(t >= 1);
        (t - 1) * 2 * self.n + self.n + e
    }

    /// Append lazily held hypograph pieces the point `x` violates by more
    /// than `tol`: for each cell, step, and curve only the piece violated
    /// the most (its neighbours are implied by concavity once the binding
    /// one holds). Returns the number of rows added; zero means `x`
    /// satisfies the full relaxation.
    pub fn add_violated_rows(&mut self, x: &[f64], tol: f64) -> usize {
        let n = self.n;
        let phi = |e: CellId, t: usize| t * 2 * n + e;
        let rho = |e: CellId, t: usize| (t - 1) * 2 * n + n + e;
        let worst = |pieces: &[(f64, f64)], lhs: f64, r: f64| -> Option<(usize, f64)> {
            pieces
                .iter()
                .enumerate()
                .map(|(i, &(g, h))| (i, lhs - (g * r + h)))
                .max_by(|a, b| a.1.total_cmp(&b.1))
        };
        let mut added = 0;
        for t in 1..self.horizon {
            for e in 0..n {
                let f = x[phi(e, t)];
                let r = x[rho(e, t)];
                if let Some((i, viol)) = worst(&self.lazy.demand[e], f, r) {
                    if viol > tol && self.lazy.present.insert((false, e, i, t)) {
                        let (g, h) = self.lazy.demand[e][i];
                        self.lp
                            .add_row(Sense::Le, h, &[(phi(e, t), 1.0), (rho(e, t), -g)]);
                        added += 1;
                    }
                }
            }
            for k in 0..n {
                let ins = &self.lazy.inflows[k];
                if ins.is_empty() || self.lazy.supply[k].is_empty() {
                    continue;
                }
                let inflow: f64 = ins.iter().map(|&(i, b)| b * x[phi(i, t)]).sum();
                let r = x[rho(k, t)];
                if let Some((i, viol)) = worst(&self.lazy.supply[k], inflow, r) {
                    if viol > tol && self.lazy.present.insert((true, k, i, t)) {
                        let (g, h) = self.lazy.supply[k][i];
                        let mut entries: Vec<(usize, f64)> =
                            ins.iter().map(|&(i, b)| (phi(i, t), b)).collect();
                        entries.push((rho(k, t), -g));
                        self.lp.add_row(Sense::Le, h, &entries);
                        added += 1;
                    }
                }
            }
        }
        added
    }
}

/// Build the exact convex relaxation of the optimal-control problem on a
/// network whose diagrams are all piecewise affine and concave (see
/// [`discretize_network`]). `stated_model` supplies the network used for
/// model-level size reporting (usually the pre-discretization original).
pub fn build_relaxed(
    net: &Network,
    stated_model: &Network,
    demand: &DemandSchedule,
    opts: &FncOptions,
) -> Result<RelaxedProblem, FncError> {
    let n = net.num_cells();
    let horizon = demand.len();
    if horizon == 0 {
        return Err(FncError::Dimension("empty horizon".into()));
    }
    for (t, row) in demand.iter().enumerate() {
        if row.len() != n {
            return Err(FncError::Dimension(format!(
                "demand row {t} has {} entries, expected {n}",
                row.len()
            )));
        }
    }
    let dt = net.dt_hours;
    let rho0: Vec<f64> = net.cells.iter().map(|c| c.initial_density).collect();
    let pieces: Vec<(Vec<(f64, f64)>, Vec<(f64, f64)>)> = net
        .cells
        .iter()
        .map(affine_pieces)
        .collect::<Result<_, _>>()?;
    let controlled = net.controlled_cells();
    let is_ramp: Vec<bool> = (0..n)
        .map(|e| matches!(net.classes[e], CellClass::ControlledRamp))
        .collect();

    let mut lp = Problem::new();
    // Variable layout per step t: the n flows phi_e(t), then the n
    // densities rho_e(t+1).
    for t in 0..horizon {
        for e in 0..n {
            // Flow upper bound: flat demand pieces cap the flow
            // unconditionally; at t = 0 the whole demand curve is a
            // constant because rho(0) is data.
            let mut ub = f64::INFINITY;
            for &(g, h) in &pieces[e].0 {
                if t == 0 {
                    ub = ub.min(g * rho0[e] + h);
                } else if g == 0.0 {
                    ub = ub.min(h);
                }
            }
            let _ = lp.add_var(0.0, 0.0, ub);
            debug_assert_eq!(lp.num_vars() - 1, t * 2 * n + e);
        }
        for e in 0..n {
            let c = &net.cells[e];
            let mut ub = if c.infinite_capacity {
                f64::INFINITY
            } else {
                c.fd.rho_bar()
            };
            if let Some(cap) = c.queue_cap_cars {
                ub = ub.min(cap / c.length_km);
            }
            let weight = if is_ramp[e] { 1.0 - opts.epsilon } else { 1.0 };
            let _ = lp.add_var(dt * c.length_km * weight, 0.0, ub);
        }
    }
    let phi = |e: CellId, t: usize| t * 2 * n + e;
    let rho = |e: CellId, t: usize| (t - 1) * 2 * n + n + e;

    // Sloped pieces are generated lazily; the initial LP carries only the
    // piece that is tight at the initial density of each cell.
    let argmin_at = |sloped: &[(f64, f64)], r: f64| -> Option<usize> {
        sloped
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| (a.0 * r + a.1).total_cmp(&(b.0 * r + b.1)))
            .map(|(i, _)| i)
    };
    let demand_sloped: Vec<Vec<(f64, f64)>> = (0..n)
        .map(|e| pieces[e].0.iter().copied().filter(|&(g, _)| g != 0.0).collect())
        .collect();
    let supply_sloped: Vec<Vec<(f64, f64)>> = (0..n)
        .map(|e| pieces[e].1.iter().copied().filter(|&(g, _)| g != 0.0).collect())
        .collect();
    let demand_seed: Vec<Option<usize>> =
        (0..n).map(|e| argmin_at(&demand_sloped[e], rho0[e])).collect();
    let supply_seed: Vec<Option<usize>> =
        (0..n).map(|e| argmin_at(&supply_sloped[e], rho0[e])).collect();
    // A forward simulation predicts which pieces bind where congestion
    // builds, sharpening the seed beyond the initial-density guess. Any
    // trajectory works as a hint; a wrong guess only costs extra rounds.
    let unc = sim::simulate_uncontrolled(net, demand, sim::UncontrolledMerge::RampPriority)
        .map(|t| t.densities)
        .unwrap_or_default();
    let mut present: std::collections::HashSet<(bool, usize, usize, usize)> =
        std::collections::HashSet::new();

    let mut basis_hint: Vec<Option<usize>> = Vec::new();
    for t in 0..horizon {
        // Conservation: l rho(t+1) - l rho(t) - dt * inflow + dt * phi = dt w.
        for e in 0..n {
            let l = net.cells[e].length_km;
            let mut entries = vec![(rho(e, t + 1), l), (phi(e, t), dt)];
            for &(i, b) in net.inflows(e) {
                entries.push((phi(i, t), -dt * b));
            }
            let mut rhs = dt * demand[t][e];
            if t == 0 {
                rhs += l * rho0[e];
            } else {
                entries.push((rho(e, t), -l));
            }
            lp.add_row(Sense::Eq, rhs, &entries);
            basis_hint.push(Some(rho(e, t + 1)));
        }
        // Demand hypograph: phi_e(t) <= g rho_e(t) + h. Rows only for
        // sloped pieces at t >= 1; everything else became a bound above.
        if t >= 1 {
            for e in 0..n {
                let unc_seed = unc.get(t).and_then(|r| argmin_at(&demand_sloped[e], r[e]));
                for i in [demand_seed[e], unc_seed].into_iter().flatten() {
                    if present.insert((false, e, i, t)) {
                        let (g, h) = demand_sloped[e][i];
                        lp.add_row(Sense::Le, h, &[(phi(e, t), 1.0), (rho(e, t), -g)]);
                        basis_hint.push(None);
                    }
                }
            }
        }
        // Supply hypograph on merged inflow: sum_i beta phi_i(t) <=
        // g rho_k(t) + h.
        for k in 0..n {
            let ins = net.inflows(k);
            if ins.is_empty() {
                continue;
            }
            for &(g, h) in &pieces[k].1 {
                if t == 0 || g == 0.0 {
                    // No density term (constant at t = 0; flat piece
                    // otherwise).
                    let rhs = if t == 0 { g * rho0[k] + h } else { h };
                    if ins.len() == 1 {
                        let (i, b) = ins[0];
                        let (lo, ub) = lp.bounds(phi(i, t));
                        lp.set_bounds(phi(i, t), lo, ub.min(rhs / b));
                    } else {
                        let entries: Vec<(usize, f64)> =
                            ins.iter().map(|&(i, b)| (phi(i, t), b)).collect();
                        lp.add_row(Sense::Le, rhs, &entries);
                        basis_hint.push(None);
                    }
                }
            }
            if t >= 1 {
                let unc_seed = unc.get(t).and_then(|r| argmin_at(&supply_sloped[k], r[k]));
                for i in [supply_seed[k], unc_seed].into_iter().flatten() {
                    if present.insert((true, k, i, t)) {
                        let (g, h) = supply_sloped[k][i];
                        let mut entries: Vec<(usize, f64)> =
                            ins.iter().map(|&(i, b)| (phi(i, t), b)).collect();
                        entries.push((rho(k, t), -g));
                        lp.add_row(Sense::Le, h, &entries);
                        basis_hint.push(None);
                    }
                }
            }
        }
    }
    debug_assert_eq!(basis_hint.len(), lp.num_rows());

    let (num_vars, num_constraints) = model_size(stated_model, horizon);
    let stats = ProblemStats {
        num_vars,
        num_constraints,
        lp_rows: lp.num_rows(),
        lp_cols: lp.num_vars(),
        lp_nonzeros: lp.num_nonzeros(),
    };
    let lazy = LazyPieces {
        demand: demand_sloped,
        supply: supply_sloped,
        inflows: (0..n).map(|e| net.inflows(e).to_vec()).collect(),
        present,
    };
    Ok(RelaxedProblem {
        lp,
        basis_hint,
        stats,
        horizon,
        n,
        controlled,
        lazy,
    })
}

#[derive(Debug, Clone)]
pub struct RelaxedSolution {
    /// Optimal objective of the relaxed program (discounted total time
    /// spent when `epsilon > 0`).
    pub objective: f64,
    /// Undiscounted total time spent of the relaxed trajectory, car-hours.
    pub tts: f64,
    /// `controls[t]` holds the optimal controlled flows in
    /// `Network::controlled_cells` order.
    pub controls: Vec<Vec<f64>>,
    /// Relaxed densities, `densities[t]` for t = 0..=T.
    pub densities: Vec<Vec<f64>>,
    /// Relaxed flows, `flows[t]` for t = 0..T.
    pub flows: Vec<Vec<f64>>,
    pub iterations: usize,
}

pub fn solve_relaxed(
    net: &Network,
    demand: &DemandSchedule,
    problem: &mut RelaxedProblem,
    opts: &FncOptions,
) -> Result<RelaxedSolution, FncError> {
    // Row generation: re-solve warm-started until no lazily held hypograph
    // piece is violated, at which point the optimum is optimal for the full
    // relaxation. Rows only accumulate, so this terminates. As a shortcut,
    // each round also prices the trajectory recovered from the current
    // iterate: its cost upper-bounds the true optimum while the partial LP
    // lower-bounds it, so once the two meet the remaining cuts cannot move
    // the optimum and the loop stops.
    let is_ramp: Vec<bool> = (0..problem.n).map(|e| net.inflows(e).is_empty()).collect();
    let recovered_cost = |x: &[f64]| -> Option<f64> {
        let controls: Vec<Vec<f64>> = (0..problem.horizon)
            .map(|t| {
                problem.controlled.iter().map(|&e| x[problem.phi_var(e, t)]).collect()
            })
            .collect();
        let traj = sim::simulate_open_loop(net, demand, &controls, ControlPolicy::Clamp).ok()?;
        let mut cost = 0.0;
        for t in 1..=problem.horizon {
            for e in 0..problem.n {
                let w = if is_ramp[e] { 1.0 - opts.epsilon } else { 1.0 };
                cost += net.cells[e].length_km * w * traj.densities[t][e];
            }
        }
        Some(cost * net.dt_hours)
    };
    let mut sol = lp::solve_with_basis(&problem.lp, &opts.lp_options, Some(&problem.basis_hint))?;
    let mut iterations = sol.iterations;
    loop {
        if sol.status != Status::Optimal {
            return Err(FncError::Solve(SolveStatusError(sol.status)));
        }
        let added = problem.add_violated_rows(&sol.x, opts.lp_options.feas_tol);
        if std::env::var_os("FREEWAY_LP_TRACE").is_some() {
            eprintln!(
                "fnc round: rows {} (+{added}), obj {:.6}, {} iters",
                problem.lp.num_rows(),
                sol.objective,
                sol.iterations
            );
        }
        if added == 0 {
            break;
        }
        if opts.early_stop_gap > 0.0 {
            if let Some(cost) = recovered_cost(&sol.x) {
                if cost - sol.objective <= opts.early_stop_gap * sol.objective.abs().max(1.0) {
                    break;
                }
            }
        }
        let warm = lp::WarmStart::from(&sol);
        sol = lp::solve_warm(&problem.lp, &opts.lp_options, &warm)?;
        iterations += sol.iterations;
    }
    problem.stats.lp_rows = problem.lp.num_rows();
    problem.stats.lp_nonzeros = problem.lp.num_nonzeros();
    sol.iterations = iterations;
    let (horizon, n) = (problem.horizon, problem.n);
    let rho0: Vec<f64> = net.cells.iter().map(|c| c.initial_density).collect();
    let mut densities = Vec::with_capacity(horizon + 1);
    densities.push(rho0);
    for t in 1..=horizon {
        densities.push((0..n).map(|e| sol.x[problem.rho_var(e, t)]).collect());
    }
    let mut flows = Vec::with_capacity(horizon);
    let mut controls = Vec::with_capacity(horizon);
    for t in 0..horizon {
        flows.push((0..n).map(|e| sol.x[problem.phi_var(e, t)]).collect::<Vec<f64>>());
        controls.push(
            problem
                .controlled
                .iter()
                .map(|&e| sol.x[problem.phi_var(e, t)])
                .collect(),
        );
    }
    let mut tts = 0.0;
    for t in 1..=horizon {
        for e in 0..n {
            tts += net.cells[e].length_km * densities[t][e];
        }
    }
    tts *= net.dt_hours;
    Ok(RelaxedSolution {
        objective: sol.objective,
        tts,
        controls,
        densities,
        flows,
        iterations: sol.iterations,
    })
}

#[derive(Debug)]
pub struct FncOutcome {
    pub stats: ProblemStats,
    pub relaxed: RelaxedSolution,
    /// Forward simulation driven by the relaxed controlled flows, on the
    /// same (discretized) dynamics the LP modeled.
    pub trajectory: Trajectory,
    pub tts_recovered: f64,
    /// |relaxed TTS - recovered TTS|, absolute car-hours. Near zero when
    /// the relaxation is exact.
    pub exactness_gap: f64,
    /// Largest difference between a requested controlled flow and the flow
    /// the simulator realized after clamping.
    pub max_control_clamp: f64,
    /// The network actually simulated (smooth curves discretized).
    pub net: Network,
}

/// Full pipeline: discretize, build the relaxation, solve it, and recover a
/// feasible trajectory by re-playing the optimal controlled flows through
/// the one-step dynamics.
pub fn optimize(
    net: &Network,
    demand: &DemandSchedule,
    opts: &FncOptions,
) -> Result<FncOutcome, FncError> {
    let dnet = discretize_network(net, opts.pwa_segments)?;
    let mut problem = build_relaxed(&dnet, net, demand, opts)?;
    let relaxed = solve_relaxed(&dnet, &mut problem, opts)?;
    let trajectory =
        sim::simulate_open_loop(&dnet, demand, &relaxed.controls, ControlPolicy::Clamp)?;
    let tts_recovered = trajectory.total_time_spent(&dnet);
    let exactness_gap = (relaxed.tts - tts_recovered).abs();
    let mut max_clamp: f64 = 0.0;
    let controlled = dnet.controlled_cells();
    for t in 0..trajectory.horizon() {
        for (k, &e) in controlled.iter().enumerate() {
            max_clamp = max_clamp.max((trajectory.flows[t][e] - relaxed.controls[t][k]).abs());
        }
    }
    Ok(FncOutcome {
        stats: problem.stats,
        relaxed,
        trajectory,
        tts_recovered,
        exactness_gap,
        max_control_clamp: max_clamp,
        net: dnet,
    })
}

#[cfg(test)]
mod tests;
