//! Network topology: cells, turning ratios, merge classification, and the
//! structural validators that the simulator and the relaxation builder
//! rely on.
//!
//! Cells are directed road segments. The graph is described by turning
//! ratios `beta(to, from)`: the fraction of `from`'s outflow that enters
//! `to`. Ratios out of a cell may sum to less than one; the remainder
//! leaves the network (an untracked off-ramp).

use crate::fundamental::{FdError, FundamentalDiagram};
use thiserror::Error;

pub type CellId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeKind {
    /// All cells merging into the junction are metered.
    Symmetric,
    /// Exactly two cells merge; only the ramp is metered, the mainline
    /// keeps priority.
    Asymmetric { ramp: CellId },
    /// No metering; the downstream cell must never congest, which is
    /// enforced by requiring it to have unbounded storage.
    Subcritical,
}

#[derive(Debug, Clone)]
pub struct Merge {
    /// Downstream cell the merge feeds.
    pub into: CellId,
    pub kind: MergeKind,
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub name: String,
    pub length_km: f64,
    pub lanes: u32,
    /// Lane-scaled, integrator-resolved diagram.
    pub fd: FundamentalDiagram,
    /// Unbounded storage: supply is the infinity sentinel, jam density
    /// plays no role.
    pub infinite_capacity: bool,
    /// Hard cap on the number of cars stored in the cell (used for onramp
    /// queue limits), in cars.
    pub queue_cap_cars: Option<f64>,
    pub initial_density: f64,
}

/// Cell description before lane scaling and integrator resolution.
#[derive(Debug, Clone)]
pub struct CellSpec {
    pub name: String,
    pub length_km: f64,
    pub lanes: u32,
    pub fd: FundamentalDiagram,
    pub infinite_capacity: bool,
    pub queue_cap_cars: Option<f64>,
    pub initial_density: f64,
}

/// Which update law governs a cell's outflow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellClass {
    /// Outflow is min(demand, scaled downstream supply).
    Local,
    /// Metered at a symmetric merge.
    ControlledSymmetric,
    /// Metered ramp at an asymmetric merge.
    ControlledRamp,
    /// Mainline at an asymmetric merge: priority over the ramp.
    AsymmetricMainline { ramp: CellId },
    /// Feeds a sub-critical merge: outflow equals demand.
    Subcritical,
}

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("cell {0}: {1}")]
    Cell(String, String),
    #[error("turning ratio ({to} <- {from}): {msg}")]
    TurningRatio { to: String, from: String, msg: String },
    #[error("merge into {0}: {1}")]
    Merge(String, String),
    #[error("graph: {0}")]
    Graph(String),
    #[error("sampling time {dt_s:.3} s exceeds stability bound {bound_s:.3} s")]
    UnstableDt { dt_s: f64, bound_s: f64 },
    #[error(transparent)]
    Fd(#[from] FdError),
}

#[derive(Debug)]
pub struct Network {
    pub cells: Vec<Cell>,
    pub dt_hours: f64,
    /// `beta[to]` lists `(from, ratio)` over upstream cells.
    beta_in: Vec<Vec<(CellId, f64)>>,
    /// `beta_out[from]` lists `(to, ratio)` over downstream cells.
    beta_out: Vec<Vec<(CellId, f64)>>,
    pub classes: Vec<CellClass>,
    pub merges: Vec<Merge>,
}

impl Network {
    /// Validate and assemble a network. `ratios` are `(from, to, beta)`
    /// triples; `merges` classify every vertex where two or more cells
    /// meet.
    pub fn new(
        specs: Vec<CellSpec>,
        ratios: &[(CellId, CellId, f64)],
        merges: Vec<Merge>,
        dt_hours: f64,
    ) -> Result<Self, NetworkError> {
        let n = specs.len();
        if n == 0 {
            return Err(NetworkError::Graph("network has no cells".into()));
        }
        if dt_hours <= 0.0 {
            return Err(NetworkError::Graph("sampling time must be positive".into()));
        }
        let name = |e: CellId| specs.get(e).map_or(format!("#{e}"), |s| s.name.clone());

        let mut beta_in: Vec<Vec<(CellId, f64)>> = vec![Vec::new(); n];
        let mut beta_out: Vec<Vec<(CellId, f64)>> = vec![Vec::new(); n];
        for &(from, to, b) in ratios {
            if from >= n || to >= n {
                return Err(NetworkError::Graph(format!(
                    "turning ratio references missing cell index {}",
                    from.max(to)
                )));
            }
            if from == to {
                return Err(NetworkError::TurningRatio {
                    to: name(to),
                    from: name(from),
                    msg: "self-loop".into(),
                });
            }
            if !(b > 0.0 && b <= 1.0 + 1e-12) {
                return Err(NetworkError::TurningRatio {
                    to: name(to),
                    from: name(from),
                    msg: format!("ratio {b} outside (0, 1]"),
                });
            }
            if beta_out[from].iter().any(|&(t, _)| t == to) {
                return Err(NetworkError::TurningRatio {
                    to: name(to),
                    from: name(from),
                    msg: "duplicate ratio".into(),
                });
            }
            beta_in[to].push((from, b));
            beta_out[from].push((to, b));
        }
        for e in 0..n {
            let sum: f64 = beta_out[e].iter().map(|&(_, b)| b).sum();
            if sum > 1.0 + 1e-9 {
                return Err(NetworkError::Cell(
                    name(e),
                    format!("outgoing turning ratios sum to {sum} > 1"),
                ));
            }
            beta_in[e].sort_by_key(|&(i, _)| i);
            beta_out[e].sort_by_key(|&(i, _)| i);
        }

        // Merge classification must cover exactly the cells with >= 2
        // upstream neighbors.
        let mut merge_of: Vec<Option<usize>> = vec![None; n];
        for (k, m) in merges.iter().enumerate() {
            if m.into >= n {
                return Err(NetworkError::Graph(format!(
                    "merge references missing cell index {}",
                    m.into
                )));
            }
            if merge_of[m.into].replace(k).is_some() {
                return Err(NetworkError::Merge(name(m.into), "classified twice".into()));
            }
        }
        for e in 0..n {
            let ins = beta_in[e].len();
            match (ins >= 2, merge_of[e]) {
                (true, None) => {
                    return Err(NetworkError::Merge(
                        name(e),
                        format!("{ins} inflows but no merge classification"),
                    ))
                }
                (false, Some(_)) => {
                    return Err(NetworkError::Merge(
                        name(e),
                        "classified as a merge but has fewer than two inflows".into(),
                    ))
                }
                _ => {}
            }
        }
        for m in &merges {
            let ins = &beta_in[m.into];
            // Merging cells may not also diverge, and a merge may not dump
            // straight off the network: its target must exist as a cell with
            // all inflow accounted for.
            for &(i, _) in ins {
                if beta_out[i].len() != 1 {
                    return Err(NetworkError::Merge(
                        name(m.into),
                        format!(
                            "upstream cell {} both merges and diverges",
                            name(i)
                        ),
                    ));
                }
            }
            match m.kind {
                MergeKind::Asymmetric { ramp } => {
                    if ins.len() != 2 {
                        return Err(NetworkError::Merge(
                            name(m.into),
                            "asymmetric merges take exactly two inflows".into(),
                        ));
                    }
                    if !ins.iter().any(|&(i, _)| i == ramp) {
                        return Err(NetworkError::Merge(
                            name(m.into),
                            format!("declared ramp {} is not an inflow", name(ramp)),
                        ));
                    }
                }
                MergeKind::Subcritical => {
                    if !specs[m.into].infinite_capacity {
                        return Err(NetworkError::Merge(
                            name(m.into),
                            "unmetered merge requires an infinite-capacity downstream cell"
                                .into(),
                        ));
                    }
                }
                MergeKind::Symmetric => {}
            }
        }

        let mut classes = vec![CellClass::Local; n];
        for m in &merges {
            for &(i, _) in &beta_in[m.into] {
                classes[i] = match m.kind {
                    MergeKind::Symmetric => CellClass::ControlledSymmetric,
                    MergeKind::Subcritical => CellClass::Subcritical,
                    MergeKind::Asymmetric { ramp } => {
                        if i == ramp {
                            CellClass::ControlledRamp
                        } else {
                            CellClass::AsymmetricMainline { ramp }
                        }
                    }
                };
            }
        }

        let mut cells = Vec::with_capacity(n);
        for (e, s) in specs.iter().enumerate() {
            if s.length_km <= 0.0 {
                return Err(NetworkError::Cell(name(e), "length must be positive".into()));
            }
            if s.initial_density < 0.0 {
                return Err(NetworkError::Cell(
                    name(e),
                    "initial density must be nonnegative".into(),
                ));
            }
            if s.fd.is_integrator() {
                if !s.infinite_capacity || !beta_in[e].is_empty() {
                    return Err(NetworkError::Cell(
                        name(e),
                        "integrator diagrams are reserved for infinite-capacity source cells"
                            .into(),
                    ));
                }
            }
            if beta_in[e].is_empty() && !s.infinite_capacity {
                return Err(NetworkError::Cell(
                    name(e),
                    "source cells must have infinite capacity".into(),
                ));
            }
            let fd = s
                .fd
                .resolve(s.length_km, dt_hours)
                .scale_lanes(s.lanes)?;
            fd.check_concavity().or_else(|err| match err {
                // Capacity-drop diagrams are legal for plant simulation;
                // the relaxation builder rejects them separately.
                FdError::NonConcave => Ok(()),
                e => Err(e),
            })?;
            if !s.infinite_capacity && s.initial_density > fd.rho_bar() {
                return Err(NetworkError::Cell(
                    name(e),
                    "initial density exceeds jam density".into(),
                ));
            }
            cells.push(Cell {
                name: s.name.clone(),
                length_km: s.length_km,
                lanes: s.lanes,
                fd,
                infinite_capacity: s.infinite_capacity,
                queue_cap_cars: s.queue_cap_cars,
                initial_density: s.initial_density,
            });
        }

        let net = Self {
            cells,
            dt_hours,
            beta_in,
            beta_out,
            classes,
            merges,
        };
        let bound = net.max_stable_dt();
        if dt_hours > bound * (1.0 + 1e-9) {
            return Err(NetworkError::UnstableDt {
                dt_s: dt_hours * 3600.0,
                bound_s: bound * 3600.0,
            });
        }
        Ok(net)
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    /// Upstream cells of `e` with their turning ratios `beta(e, from)`.
    pub fn inflows(&self, e: CellId) -> &[(CellId, f64)] {
        &self.beta_in[e]
    }

    /// Downstream cells of `e` with their turning ratios `beta(to, e)`.
    pub fn outflows(&self, e: CellId) -> &[(CellId, f64)] {
        &self.beta_out[e]
    }

    pub fn beta(&self, to: CellId, from: CellId) -> f64 {
        self.beta_in[to]
            .iter()
            .find(|&&(i, _)| i == from)
            .map_or(0.0, |&(_, b)| b)
    }

    /// Fraction of `e`'s outflow that leaves the network for good
    /// (1 minus the tracked turning ratios).
    pub fn exit_ratio(&self, e: CellId) -> f64 {
        (1.0 - self.beta_out[e].iter().map(|&(_, b)| b).sum::<f64>()).max(0.0)
    }

    /// Cells whose outflow is a decision variable, in index order:
    /// symmetric-merge inflows and metered ramps.
    pub fn controlled_cells(&self) -> Vec<CellId> {
        (0..self.num_cells())
            .filter(|&e| {
                matches!(
                    self.classes[e],
                    CellClass::ControlledSymmetric | CellClass::ControlledRamp
                )
            })
            .collect()
    }

    pub fn is_controlled(&self, e: CellId) -> bool {
        matches!(
            self.classes[e],
            CellClass::ControlledSymmetric | CellClass::ControlledRamp
        )
    }

    pub fn is_source(&self, e: CellId) -> bool {
        self.beta_in[e].is_empty()
    }

    pub fn cell_index(&self, name: &str) -> Option<CellId> {
        self.cells.iter().position(|c| c.name == name)
    }

    /// Largest sampling time (hours) compatible with the density update
    /// staying in its domain: shortest cell length over the steepest
    /// demand/supply slope. Onramp integrator diagrams are excluded — their
    /// slope is `l/dt`, which meets the bound with equality for every `dt`.
    pub fn max_stable_dt(&self) -> f64 {
        let mut min_len = f64::INFINITY;
        let mut max_gamma: f64 = 0.0;
        for (e, c) in self.cells.iter().enumerate() {
            min_len = min_len.min(c.length_km);
            let integrator_slope = c.length_km / self.dt_hours;
            if let Ok((gd, gs)) = c.fd.lipschitz_constants() {
                // Skip the resolved integrator slope but keep real curves.
                let is_resolved_integrator = self.is_source(e)
                    && c.infinite_capacity
                    && (gd - integrator_slope).abs() <= 1e-9 * integrator_slope;
                if !is_resolved_integrator {
                    max_gamma = max_gamma.max(gd);
                    if !c.infinite_capacity {
                        max_gamma = max_gamma.max(gs);
                    }
                }
            }
        }
        if max_gamma <= 0.0 {
            f64::INFINITY
        } else {
            min_len / max_gamma
        }
    }

    /// Demand of cell `e` at density `rho`.
    pub fn demand(&self, e: CellId, rho: f64) -> Result<f64, FdError> {
        self.cells[e].fd.eval_demand(rho)
    }

    /// Supply of cell `e` at density `rho`; infinite-capacity cells accept
    /// any inflow.
    pub fn supply(&self, e: CellId, rho: f64) -> Result<f64, FdError> {
        if self.cells[e].infinite_capacity {
            Ok(f64::INFINITY)
        } else {
            self.cells[e].fd.eval_supply(rho)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fundamental::FundamentalDiagram;
    use approx::assert_relative_eq;

    fn spec(name: &str, fd: FundamentalDiagram, infinite: bool) -> CellSpec {
        CellSpec {
            name: name.into(),
            length_km: 0.5,
            lanes: 1,
            fd,
            infinite_capacity: infinite,
            queue_cap_cars: None,
            initial_density: 0.0,
        }
    }

    fn tri() -> FundamentalDiagram {
        FundamentalDiagram::triangular(90.0, 20.0, 4500.0, 250.0)
    }

    #[test]
    fn line_network_builds() {
        let dt = 15.0 / 3600.0;
        let net = Network::new(
            vec![spec("a", tri(), true), spec("b", tri(), false)],
            &[(0, 1, 1.0)],
            vec![],
            dt,
        )
        .unwrap();
        assert_eq!(net.controlled_cells(), Vec::<usize>::new());
        assert_relative_eq!(net.beta(1, 0), 1.0);
        assert_relative_eq!(net.exit_ratio(1), 1.0);
        assert_relative_eq!(net.max_stable_dt() * 3600.0, 20.0, epsilon = 1e-9);
    }

    #[test]
    fn single_cell_stability_example() {
        // l = 1 km, v = 100, w = 25: bound is 1/100 h = 36 s.
        let fd = FundamentalDiagram::triangular(100.0, 25.0, 4000.0, 250.0);
        let mut s = spec("a", fd, true);
        s.length_km = 1.0;
        let net = Network::new(vec![s], &[], vec![], 30.0 / 3600.0).unwrap();
        assert_relative_eq!(net.max_stable_dt() * 3600.0, 36.0, epsilon = 1e-9);
        let fd2 = FundamentalDiagram::triangular(100.0, 25.0, 4000.0, 250.0);
        let mut s2 = spec("a", fd2, true);
        s2.length_km = 1.0;
        assert!(matches!(
            Network::new(vec![s2], &[], vec![], 40.0 / 3600.0),
            Err(NetworkError::UnstableDt { .. })
        ));
    }

    #[test]
    fn integrator_slope_excluded_from_stability_bound() {
        // Mainline v = 90 on 0.5 km cells gives 20 s; the ramp integrator's
        // resolved slope (0.5 km / 15 s = 120 km/h) must not shrink it.
        let dt = 15.0 / 3600.0;
        let ramp = spec(
            "r",
            FundamentalDiagram::Integrator { max_rate: 2000.0 },
            true,
        );
        let net = Network::new(
            vec![
                spec("m1", tri(), true),
                ramp,
                spec("m2", tri(), false),
                spec("m3", tri(), false),
            ],
            &[(0, 2, 1.0), (1, 2, 1.0), (2, 3, 1.0)],
            vec![Merge {
                into: 2,
                kind: MergeKind::Asymmetric { ramp: 1 },
            }],
            dt,
        )
        .unwrap();
        assert_relative_eq!(net.max_stable_dt() * 3600.0, 20.0, epsilon = 1e-9);
        assert!(matches!(net.classes[1], CellClass::ControlledRamp));
        assert!(matches!(
            net.classes[0],
            CellClass::AsymmetricMainline { ramp: 1 }
        ));
        assert_eq!(net.controlled_cells(), vec![1]);
        // Ramp demand: min((l/dt) rho, 2000).
        assert_relative_eq!(net.demand(1, 10.0).unwrap(), 1200.0, epsilon = 1e-9);
        assert_relative_eq!(net.demand(1, 30.0).unwrap(), 2000.0, epsilon = 1e-9);
        assert!(net.supply(1, 1e6).unwrap().is_infinite());
    }

    #[test]
    fn validators_reject_bad_structure() {
        let dt = 15.0 / 3600.0;
        // Self-loop.
        assert!(Network::new(
            vec![spec("a", tri(), true)],
            &[(0, 0, 1.0)],
            vec![],
            dt
        )
        .is_err());
        // Unclassified merge.
        assert!(Network::new(
            vec![
                spec("a", tri(), true),
                spec("b", tri(), true),
                spec("c", tri(), false)
            ],
            &[(0, 2, 1.0), (1, 2, 1.0)],
            vec![],
            dt
        )
        .is_err());
        // Merge-and-diverge: a merging cell also splits.
        assert!(Network::new(
            vec![
                spec("a", tri(), true),
                spec("b", tri(), true),
                spec("c", tri(), false),
                spec("d", tri(), false),
            ],
            &[(0, 2, 0.5), (0, 3, 0.5), (1, 2, 1.0), (2, 3, 1.0)],
            vec![Merge {
                into: 2,
                kind: MergeKind::Symmetric
            }],
            dt
        )
        .is_err());
        // Sub-critical merge into a finite-capacity cell.
        assert!(Network::new(
            vec![
                spec("a", tri(), true),
                spec("b", tri(), true),
                spec("c", tri(), false)
            ],
            &[(0, 2, 1.0), (1, 2, 1.0)],
            vec![Merge {
                into: 2,
                kind: MergeKind::Subcritical
            }],
            dt
        )
        .is_err());
        // Source without infinite capacity.
        assert!(Network::new(
            vec![spec("a", tri(), false)],
            &[],
            vec![],
            dt
        )
        .is_err());
        // Turning ratios summing above one.
        assert!(Network::new(
            vec![
                spec("a", tri(), true),
                spec("b", tri(), false),
                spec("c", tri(), false)
            ],
            &[(0, 1, 0.7), (0, 2, 0.7)],
            vec![],
            dt
        )
        .is_err());
    }
}
