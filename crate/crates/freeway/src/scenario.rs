//! Scenario files: a JSON description of a network, its demand profile,
//! and solver settings. Strict parsing — unknown keys are rejected so that
//! typos fail loudly.

use crate::fnc::FncOptions;
use crate::fundamental::FundamentalDiagram;
use crate::network::{CellSpec, Merge, MergeKind, Network, NetworkError};
use crate::sim::DemandSchedule;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("failed to read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("cell {cell}: unknown diagram '{fd}'")]
    UnknownFd { cell: String, fd: String },
    #[error("unknown cell '{0}'")]
    UnknownCell(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Units {
    /// Must be "seconds" (scenario timestamps and `dt_s`).
    pub time: String,
    /// Must be "kilometers" (lengths; densities are cars/km, flows cars/h).
    pub length: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioCell {
    pub id: String,
    pub length_km: f64,
    #[serde(default = "one")]
    pub lanes: u32,
    /// Name of an entry in `fds`.
    pub fd: String,
    #[serde(default)]
    pub initial_density: f64,
    #[serde(default)]
    pub infinite_capacity: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queue_cap_cars: Option<f64>,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurningRate {
    pub from: String,
    pub to: String,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsymJunction {
    pub into: String,
    pub ramp: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Junctions {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub symmetric: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub asymmetric: Vec<AsymJunction>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub subcritical: Vec<String>,
}

/// One piece of a piecewise-constant demand profile: `rate` cars/h from
/// `t_s` seconds until the next piece.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandStep {
    pub t_s: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pwa_segments: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feas_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dual_tol: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<Units>,
    /// Sampling time in seconds.
    pub dt_s: f64,
    /// Number of simulation steps.
    pub horizon: usize,
    pub fds: BTreeMap<String, FundamentalDiagram>,
    pub cells: Vec<ScenarioCell>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub turning_rates: Vec<TurningRate>,
    #[serde(default, skip_serializing_if = "is_default_junctions")]
    pub junctions: Junctions,
    /// Per-cell exogenous inflow profiles, keyed by cell id. Cells without
    /// an entry receive zero inflow.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub demand: BTreeMap<String, Vec<DemandStep>>,
    #[serde(default, skip_serializing_if = "is_default_solver")]
    pub solver: SolverSection,
}

fn is_default_junctions(j: &Junctions) -> bool {
    *j == Junctions::default()
}

fn is_default_solver(s: &SolverSection) -> bool {
    *s == SolverSection::default()
}

impl Scenario {
    pub fn from_str(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate_shallow()?;
        Ok(s)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self, ScenarioError> {
        Self::from_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serialization")
    }

    fn validate_shallow(&self) -> Result<(), ScenarioError> {
        if let Some(u) = &self.units {
            if u.time != "seconds" || u.length != "kilometers" {
                return Err(ScenarioError::Invalid(format!(
                    "units must be seconds/kilometers, got {}/{}",
                    u.time, u.length
                )));
            }
        }
        if self.dt_s <= 0.0 {
            return Err(ScenarioError::Invalid("dt_s must be positive".into()));
        }
        if self.horizon == 0 {
            return Err(ScenarioError::Invalid("horizon must be positive".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.cells {
            if !seen.insert(c.id.as_str()) {
                return Err(ScenarioError::Invalid(format!(
                    "duplicate cell id '{}'",
                    c.id
                )));
            }
        }
        for profile in self.demand.values() {
            for win in profile.windows(2) {
                if win[1].t_s <= win[0].t_s {
                    return Err(ScenarioError::Invalid(
                        "demand steps must have strictly increasing t_s".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn cell_index(&self, id: &str) -> Result<usize, ScenarioError> {
        self.cells
            .iter()
            .position(|c| c.id == id)
            .ok_or_else(|| ScenarioError::UnknownCell(id.into()))
    }

    pub fn to_network(&self) -> Result<Network, ScenarioError> {
        let mut specs = Vec::with_capacity(self.cells.len());
        for c in &self.cells {
            let fd = self.fds.get(&c.fd).ok_or_else(|| ScenarioError::UnknownFd {
                cell: c.id.clone(),
                fd: c.fd.clone(),
            })?;
            specs.push(CellSpec {
                name: c.id.clone(),
                length_km: c.length_km,
                lanes: c.lanes,
                fd: fd.clone(),
                infinite_capacity: c.infinite_capacity,
                queue_cap_cars: c.queue_cap_cars,
                initial_density: c.initial_density,
            });
        }
        let mut ratios = Vec::with_capacity(self.turning_rates.len());
        for r in &self.turning_rates {
            ratios.push((self.cell_index(&r.from)?, self.cell_index(&r.to)?, r.beta));
        }
        let mut merges = Vec::new();
        for id in &self.junctions.symmetric {
            merges.push(Merge {
                into: self.cell_index(id)?,
                kind: MergeKind::Symmetric,
            });
        }
        for j in &self.junctions.asymmetric {
            merges.push(Merge {
                into: self.cell_index(&j.into)?,
                kind: MergeKind::Asymmetric {
                    ramp: self.cell_index(&j.ramp)?,
                },
            });
        }
        for id in &self.junctions.subcritical {
            merges.push(Merge {
                into: self.cell_index(id)?,
                kind: MergeKind::Subcritical,
            });
        }
        for id in self.demand.keys() {
            self.cell_index(id)?;
        }
        Ok(Network::new(specs, &ratios, merges, self.dt_s / 3600.0)?)
    }

    /// Piecewise-constant demand sampled on the simulation grid:
    /// `w[t][e]` is the rate of the last step with `t_s <= t * dt_s`
    /// (zero before the first step).
    pub fn demand_schedule(&self) -> Result<DemandSchedule, ScenarioError> {
        let n = self.cells.len();
        let mut w = vec![vec![0.0; n]; self.horizon];
        for (id, profile) in &self.demand {
            let e = self.cell_index(id)?;
            for (t, row) in w.iter_mut().enumerate() {
                let now = t as f64 * self.dt_s;
                row[e] = profile
                    .iter()
                    .take_while(|s| s.t_s <= now + 1e-9)
                    .last()
                    .map_or(0.0, |s| s.rate);
            }
        }
        Ok(w)
    }

    pub fn fnc_options(&self) -> FncOptions {
        let mut opts = FncOptions::default();
        if let Some(k) = self.solver.pwa_segments {
            opts.pwa_segments = k;
        }
        if let Some(e) = self.solver.epsilon {
            opts.epsilon = e;
        }
        if let Some(t) = self.solver.feas_tol {
            opts.lp_options.feas_tol = t;
        }
        if let Some(t) = self.solver.dual_tol {
            opts.lp_options.dual_tol = t;
        }
        opts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> String {
        r#"{
            "name": "line",
            "units": {"time": "seconds", "length": "kilometers"},
            "dt_s": 15.0,
            "horizon": 10,
            "fds": {
                "main": {"kind": "trapezoidal", "v": 90.0, "w": 20.0,
                         "cap_demand": 4500.0, "cap_supply": 4500.0, "rho_bar": 250.0}
            },
            "cells": [
                {"id": "a", "length_km": 0.5, "fd": "main", "infinite_capacity": true},
                {"id": "b", "length_km": 0.5, "fd": "main", "initial_density": 20.0}
            ],
            "turning_rates": [{"from": "a", "to": "b", "beta": 1.0}],
            "demand": {"a": [{"t_s": 0.0, "rate": 1000.0}, {"t_s": 60.0, "rate": 0.0}]}
        }"#
        .into()
    }

    #[test]
    fn parses_and_builds() {
        let s = Scenario::from_str(&minimal()).unwrap();
        let net = s.to_network().unwrap();
        assert_eq!(net.num_cells(), 2);
        let w = s.demand_schedule().unwrap();
        assert_eq!(w.len(), 10);
        assert_eq!(w[0][0], 1000.0);
        assert_eq!(w[3][0], 1000.0); // t = 45 s
        assert_eq!(w[4][0], 0.0); // t = 60 s switches off
        assert_eq!(w[0][1], 0.0);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_refs() {
        let bad = minimal().replace("\"name\"", "\"nam\"");
        assert!(matches!(Scenario::from_str(&bad), Err(ScenarioError::Parse(_))));
        let bad = minimal().replace("\"fd\": \"main\", \"initial_density\"", "\"fd\": \"nope\", \"initial_density\"");
        let s = Scenario::from_str(&bad).unwrap();
        assert!(matches!(s.to_network(), Err(ScenarioError::UnknownFd { .. })));
        let bad = minimal().replace("\"demand\": {\"a\"", "\"demand\": {\"zz\"");
        let s = Scenario::from_str(&bad).unwrap();
        assert!(matches!(s.demand_schedule(), Err(ScenarioError::UnknownCell(_))));
    }

    #[test]
    fn round_trips() {
        let s = Scenario::from_str(&minimal()).unwrap();
        let again = Scenario::from_str(&s.to_json()).unwrap();
        assert_eq!(s, again);
        assert_eq!(s.to_json(), again.to_json());
    }
}
