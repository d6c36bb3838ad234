//! Demand/supply curve pairs (fundamental diagrams).
//!
//! All quantities use the internal unit system: densities in cars/km,
//! flows in cars/h, speeds in km/h. A diagram describes a single
//! physical configuration; lane multiplicity is folded in via
//! [`FundamentalDiagram::scale_lanes`] before simulation ever sees it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FdError {
    #[error("density {rho} outside domain [0, {rho_bar}]")]
    DensityOutOfDomain { rho: f64, rho_bar: f64 },
    #[error("demand curve is not concave: {0}")]
    DemandNotConcave(String),
    #[error("supply curve is not concave: {0}")]
    SupplyNotConcave(String),
    #[error("capacity-drop diagrams are not concave and cannot be used here")]
    NonConcave,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// A piecewise-affine curve given by breakpoints `(rho, flow)` with
/// strictly increasing densities. Evaluation clamps to the last value
/// beyond the final breakpoint (needed for infinite-capacity cells whose
/// demand must be defined for all densities).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PwaCurve {
    pub points: Vec<(f64, f64)>,
}

impl PwaCurve {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self, FdError> {
        if points.len() < 2 {
            return Err(FdError::InvalidParameter(
                "PWA curve needs at least two breakpoints".into(),
            ));
        }
        for w in points.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(FdError::InvalidParameter(
                    "PWA breakpoint densities must be strictly increasing".into(),
                ));
            }
        }
        Ok(Self { points })
    }

    pub fn eval(&self, rho: f64) -> f64 {
        let pts = &self.points;
        if rho <= pts[0].0 {
            return pts[0].1;
        }
        if rho >= pts[pts.len() - 1].0 {
            return pts[pts.len() - 1].1;
        }
        for w in pts.windows(2) {
            let ((x0, y0), (x1, y1)) = (w[0], w[1]);
            if rho <= x1 {
                return y0 + (y1 - y0) * (rho - x0) / (x1 - x0);
            }
        }
        unreachable!()
    }

    /// Slopes of consecutive segments.
    pub fn slopes(&self) -> Vec<f64> {
        self.points
            .windows(2)
            .map(|w| (w[1].1 - w[0].1) / (w[1].0 - w[0].0))
            .collect()
    }

    /// Concave iff segment slopes are nonincreasing.
    pub fn is_concave(&self, tol: f64) -> bool {
        let s = self.slopes();
        s.windows(2).all(|w| w[1] <= w[0] + tol)
    }

    fn scale(&self, n: f64) -> Self {
        Self {
            points: self.points.iter().map(|&(x, y)| (n * x, n * y)).collect(),
        }
    }

    /// Affine segments as `(slope, intercept)` pairs, flow = slope*rho + intercept.
    /// For a concave curve the pointwise minimum of these equals the curve on
    /// its breakpoint span.
    pub fn segments(&self) -> Vec<(f64, f64)> {
        self.points
            .windows(2)
            .map(|w| {
                let ((x0, y0), (x1, y1)) = (w[0], w[1]);
                let slope = (y1 - y0) / (x1 - x0);
                (slope, y0 - slope * x0)
            })
            .collect()
    }
}

/// Cubic polynomial `c3 x^3 + c2 x^2 + c1 x + c0`.
pub type CubicCoeffs = [f64; 4];

fn cubic_eval(c: &CubicCoeffs, x: f64) -> f64 {
    ((c[0] * x + c[1]) * x + c[2]) * x + c[3]
}

fn cubic_deriv(c: &CubicCoeffs, x: f64) -> f64 {
    (3.0 * c[0] * x + 2.0 * c[1]) * x + c[2]
}

/// Second derivative is affine, so concavity on an interval reduces to
/// endpoint checks.
fn cubic_concave_on(c: &CubicCoeffs, a: f64, b: f64) -> bool {
    let dd = |x: f64| 6.0 * c[0] * x + 2.0 * c[1];
    dd(a) <= 1e-9 && dd(b) <= 1e-9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FundamentalDiagram {
    /// `d = min(v rho, cap_demand)`, `s = min(cap_supply, w (rho_bar - rho))`.
    /// Triangular diagrams are the special case `cap_supply == cap_demand`.
    Trapezoidal {
        v: f64,
        w: f64,
        cap_demand: f64,
        cap_supply: f64,
        rho_bar: f64,
    },
    /// General concave PWA demand/supply pair.
    Pwa { demand: PwaCurve, supply: PwaCurve },
    /// Cubic Hermite demand on `[0, rho_c]` (constant `cap` after),
    /// constant `cap` supply on `[0, rho_c]` and cubic down to zero at `rho_bar`.
    CubicHermite {
        demand: CubicCoeffs,
        supply: CubicCoeffs,
        cap: f64,
        rho_c: f64,
        rho_bar: f64,
    },
    /// Onramp queue model: `d = min((l_e / dt) rho, max_rate)`. The slope is
    /// resolved against the owning cell at network construction; the implied
    /// Lipschitz constant `l_e/dt` satisfies the sampling-time bound with
    /// equality by construction and is excluded from `max_stable_dt`.
    Integrator { max_rate: f64 },
    /// Demand with a step capacity drop at `rho_c`; rejected by the
    /// relaxation builder.
    CapacityDrop {
        base_demand: PwaCurve,
        base_supply: PwaCurve,
        drop_fraction: f64,
        rho_c: f64,
    },
}

use FundamentalDiagram::*;

impl FundamentalDiagram {
    pub fn triangular(v: f64, w: f64, cap: f64, rho_bar: f64) -> Self {
        Trapezoidal {
            v,
            w,
            cap_demand: cap,
            cap_supply: cap,
            rho_bar,
        }
    }

    pub fn rho_bar(&self) -> f64 {
        match self {
            Trapezoidal { rho_bar, .. } | CubicHermite { rho_bar, .. } => *rho_bar,
            Pwa { supply, .. } => supply.points.last().unwrap().0,
            Integrator { .. } => f64::INFINITY,
            CapacityDrop { base_supply, .. } => base_supply.points.last().unwrap().0,
        }
    }

    pub fn is_concave_variant(&self) -> bool {
        !matches!(self, CapacityDrop { .. })
    }

    /// Onramp integrator diagrams need the owning cell's length and the
    /// network sampling time before they can be evaluated.
    pub fn is_integrator(&self) -> bool {
        matches!(self, Integrator { .. })
    }

    /// Resolve an integrator diagram into its trapezoidal realization for a
    /// cell of length `length_km` under sampling time `dt_hours`. Other
    /// variants are returned unchanged.
    pub fn resolve(&self, length_km: f64, dt_hours: f64) -> Self {
        match self {
            Integrator { max_rate } => {
                let slope = length_km / dt_hours;
                Trapezoidal {
                    v: slope,
                    w: slope,
                    cap_demand: *max_rate,
                    // Supply side is never used: integrator cells must have
                    // infinite capacity (validated in `network`).
                    cap_supply: *max_rate,
                    rho_bar: f64::INFINITY,
                }
            }
            other => other.clone(),
        }
    }

    pub fn eval_demand(&self, rho: f64) -> Result<f64, FdError> {
        if rho < 0.0 {
            return Err(FdError::DensityOutOfDomain {
                rho,
                rho_bar: self.rho_bar(),
            });
        }
        Ok(match self {
            Trapezoidal { v, cap_demand, .. } => (v * rho).min(*cap_demand),
            Pwa { demand, .. } => demand.eval(rho),
            CubicHermite {
                demand, cap, rho_c, ..
            } => {
                if rho < *rho_c {
                    cubic_eval(demand, rho)
                } else {
                    *cap
                }
            }
            Integrator { .. } => {
                return Err(FdError::InvalidParameter(
                    "integrator diagram must be resolved against its cell first".into(),
                ))
            }
            CapacityDrop {
                base_demand,
                drop_fraction,
                rho_c,
                ..
            } => {
                if rho <= *rho_c {
                    base_demand.eval(rho)
                } else {
                    let cap = base_demand.points.iter().fold(0.0f64, |m, p| m.max(p.1));
                    (1.0 - drop_fraction) * cap
                }
            }
        })
    }

    /// Supply evaluation; callers must not invoke this for infinite-capacity
    /// cells (their supply is the infinity sentinel handled at cell level).
    pub fn eval_supply(&self, rho: f64) -> Result<f64, FdError> {
        let rho_bar = self.rho_bar();
        if rho < 0.0 || rho > rho_bar + 1e-9 * rho_bar.max(1.0) {
            return Err(FdError::DensityOutOfDomain { rho, rho_bar });
        }
        Ok(match self {
            Trapezoidal {
                w,
                cap_supply,
                rho_bar,
                ..
            } => (w * (rho_bar - rho)).min(*cap_supply).max(0.0),
            Pwa { supply, .. } => supply.eval(rho),
            CubicHermite {
                supply, cap, rho_c, ..
            } => {
                if rho <= *rho_c {
                    *cap
                } else {
                    cubic_eval(supply, rho).max(0.0)
                }
            }
            Integrator { .. } => {
                return Err(FdError::InvalidParameter(
                    "integrator diagram has no supply curve".into(),
                ))
            }
            CapacityDrop { base_supply, .. } => base_supply.eval(rho),
        })
    }

    /// Lipschitz constants `(gamma_d, gamma_s)`. For a concave demand with
    /// `d(0) = 0` the maximal slope sits at the left end; for a concave,
    /// nonincreasing supply the steepest descent sits at `rho_bar`.
    pub fn lipschitz_constants(&self) -> Result<(f64, f64), FdError> {
        Ok(match self {
            Trapezoidal { v, w, .. } => (*v, *w),
            Pwa { demand, supply } => {
                let gd = demand.slopes().first().copied().unwrap_or(0.0).max(0.0);
                let gs = supply.slopes().last().copied().unwrap_or(0.0).abs();
                (gd, gs)
            }
            CubicHermite {
                demand,
                supply,
                rho_bar,
                ..
            } => (cubic_deriv(demand, 0.0), cubic_deriv(supply, *rho_bar).abs()),
            Integrator { .. } => {
                return Err(FdError::InvalidParameter(
                    "integrator diagram must be resolved against its cell first".into(),
                ))
            }
            CapacityDrop { .. } => return Err(FdError::NonConcave),
        })
    }

    /// Multiply flows and densities by the lane count; slopes (and thus the
    /// Lipschitz constants) are invariant.
    pub fn scale_lanes(&self, n: u32) -> Result<Self, FdError> {
        if n < 1 {
            return Err(FdError::InvalidParameter("lane count must be >= 1".into()));
        }
        let k = f64::from(n);
        Ok(match self {
            Trapezoidal {
                v,
                w,
                cap_demand,
                cap_supply,
                rho_bar,
            } => Trapezoidal {
                v: *v,
                w: *w,
                cap_demand: k * cap_demand,
                cap_supply: k * cap_supply,
                rho_bar: k * rho_bar,
            },
            Pwa { demand, supply } => Pwa {
                demand: demand.scale(k),
                supply: supply.scale(k),
            },
            CubicHermite {
                demand,
                supply,
                cap,
                rho_c,
                rho_bar,
            } => {
                // d_n(rho) = n d(rho/n): coefficients pick up powers of 1/n.
                let sc = |c: &CubicCoeffs| [c[0] / (k * k), c[1] / k, c[2], c[3] * k];
                CubicHermite {
                    demand: sc(demand),
                    supply: sc(supply),
                    cap: k * cap,
                    rho_c: k * rho_c,
                    rho_bar: k * rho_bar,
                }
            }
            Integrator { max_rate } => Integrator {
                max_rate: k * max_rate,
            },
            CapacityDrop {
                base_demand,
                base_supply,
                drop_fraction,
                rho_c,
            } => CapacityDrop {
                base_demand: base_demand.scale(k),
                base_supply: base_supply.scale(k),
                drop_fraction: *drop_fraction,
                rho_c: k * rho_c,
            },
        })
    }

    /// Replace the demand curve with a capacity-drop variant: free-flow cap
    /// is raised to `base_cap / (1 - fraction)` so that the post-drop
    /// throughput equals the cap of the monotone base model.
    pub fn apply_capacity_drop(&self, fraction: f64) -> Result<Self, FdError> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(FdError::InvalidParameter(
                "drop fraction must lie strictly in (0, 1)".into(),
            ));
        }
        let Pwa { demand, supply } = self.pwa_discretize(8)? else {
            unreachable!("pwa_discretize always yields the PWA variant");
        };
        let base_cap = demand.points.iter().fold(0.0f64, |m, p| m.max(p.1));
        let raised_cap = base_cap / (1.0 - fraction);
        let gamma_d = demand.slopes().first().copied().unwrap_or(0.0);
        if gamma_d <= 0.0 {
            return Err(FdError::InvalidParameter(
                "demand curve has no positive free-flow slope".into(),
            ));
        }
        // Raised free-flow branch: keep the initial slope, extend the cap.
        let rho_c = raised_cap / gamma_d;
        let rho_bar = self.rho_bar();
        let raised = PwaCurve::new(vec![(0.0, 0.0), (rho_c, raised_cap), (rho_bar, raised_cap)])?;
        Ok(CapacityDrop {
            base_demand: raised,
            base_supply: supply,
            drop_fraction: fraction,
            rho_c,
        })
    }

    /// Secant discretization of a concave diagram into PWA form with `k`
    /// equally spaced segments per curved portion. Chords of a concave
    /// function lie below it, so the result underestimates pointwise and its
    /// Lipschitz constants do not exceed the original's.
    pub fn pwa_discretize(&self, k: usize) -> Result<Self, FdError> {
        if k < 2 {
            return Err(FdError::InvalidParameter(
                "breakpoint count must be >= 2".into(),
            ));
        }
        match self {
            Trapezoidal {
                v,
                w,
                cap_demand,
                cap_supply,
                rho_bar,
            } => {
                let rho_c = cap_demand / v;
                let demand = if rho_c < *rho_bar {
                    PwaCurve::new(vec![(0.0, 0.0), (rho_c, *cap_demand), (*rho_bar, *cap_demand)])?
                } else {
                    PwaCurve::new(vec![(0.0, 0.0), (*rho_bar, v * rho_bar)])?
                };
                let rho_s = rho_bar - cap_supply / w;
                let supply = if rho_s > 0.0 {
                    PwaCurve::new(vec![(0.0, *cap_supply), (rho_s, *cap_supply), (*rho_bar, 0.0)])?
                } else {
                    PwaCurve::new(vec![(0.0, w * rho_bar), (*rho_bar, 0.0)])?
                };
                Ok(Pwa { demand, supply })
            }
            Pwa { .. } => Ok(self.clone()),
            CubicHermite {
                demand,
                supply,
                cap,
                rho_c,
                rho_bar,
            } => {
                let mut dp = Vec::with_capacity(k + 2);
                for i in 0..=k {
                    let x = rho_c * i as f64 / k as f64;
                    dp.push((x, cubic_eval(demand, x)));
                }
                dp.push((*rho_bar, *cap));
                let mut sp = vec![(0.0, *cap)];
                for i in 0..=k {
                    let x = rho_c + (rho_bar - rho_c) * i as f64 / k as f64;
                    sp.push((x, cubic_eval(supply, x)));
                }
                Ok(Pwa {
                    demand: PwaCurve::new(dp)?,
                    supply: PwaCurve::new(sp)?,
                })
            }
            Integrator { .. } => Err(FdError::InvalidParameter(
                "integrator diagram must be resolved against its cell first".into(),
            )),
            CapacityDrop { .. } => Err(FdError::NonConcave),
        }
    }

    /// Random-secant concavity audit of both curves, used by validators.
    pub fn check_concavity(&self) -> Result<(), FdError> {
        match self {
            CapacityDrop { .. } => return Err(FdError::NonConcave),
            Integrator { .. } => return Ok(()),
            Pwa { demand, supply } => {
                if !demand.is_concave(1e-9) {
                    return Err(FdError::DemandNotConcave("PWA slopes increase".into()));
                }
                if !supply.is_concave(1e-9) {
                    return Err(FdError::SupplyNotConcave("PWA slopes increase".into()));
                }
            }
            Trapezoidal {
                v,
                w,
                cap_demand,
                cap_supply,
                rho_bar,
            } => {
                if *v <= 0.0 || *w <= 0.0 || *cap_demand <= 0.0 || *cap_supply <= 0.0 || *rho_bar <= 0.0 {
                    return Err(FdError::InvalidParameter(
                        "trapezoidal parameters must be positive".into(),
                    ));
                }
            }
            CubicHermite {
                demand,
                supply,
                rho_c,
                rho_bar,
                ..
            } => {
                if !cubic_concave_on(demand, 0.0, *rho_c) {
                    return Err(FdError::DemandNotConcave(
                        "cubic second derivative positive on [0, rho_c]".into(),
                    ));
                }
                if !cubic_concave_on(supply, *rho_c, *rho_bar) {
                    return Err(FdError::SupplyNotConcave(
                        "cubic second derivative positive on [rho_c, rho_bar]".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Solve the 4x4 Hermite system `d(0)=0, d'(0)=v0, d(rho_c)=cap, d'(rho_c)=0`.
pub fn hermite_cubic_demand(v0: f64, rho_c: f64, cap: f64) -> Result<CubicCoeffs, FdError> {
    if v0 <= 0.0 || rho_c <= 0.0 || cap <= 0.0 {
        return Err(FdError::InvalidParameter(
            "hermite demand parameters must be positive".into(),
        ));
    }
    let c = hermite_interpolate(0.0, 0.0, v0, rho_c, cap, 0.0);
    if !cubic_concave_on(&c, 0.0, rho_c) {
        return Err(FdError::DemandNotConcave(format!(
            "no concave cubic matches d(0)=0, d'(0)={v0}, d({rho_c})={cap}, d'({rho_c})=0"
        )));
    }
    Ok(c)
}

/// Solve the 4x4 Hermite system `s(rho_c)=cap, s'(rho_c)=0, s(rho_bar)=0,
/// s'(rho_bar)=w_end` (`w_end` is the signed end slope, e.g. -35 km/h).
pub fn hermite_cubic_supply(
    rho_c: f64,
    cap: f64,
    rho_bar: f64,
    w_end: f64,
) -> Result<CubicCoeffs, FdError> {
    if rho_bar <= rho_c || cap <= 0.0 {
        return Err(FdError::InvalidParameter(
            "supply needs rho_bar > rho_c and positive cap".into(),
        ));
    }
    let c = hermite_interpolate(rho_c, cap, 0.0, rho_bar, 0.0, w_end);
    if !cubic_concave_on(&c, rho_c, rho_bar) {
        return Err(FdError::SupplyNotConcave(format!(
            "no concave cubic matches s({rho_c})={cap}, s'({rho_c})=0, s({rho_bar})=0, s'({rho_bar})={w_end}"
        )));
    }
    Ok(c)
}

/// Unique cubic with prescribed values and derivatives at two points,
/// via Gaussian elimination on the 4x4 Vandermonde-style system.
fn hermite_interpolate(x0: f64, f0: f64, df0: f64, x1: f64, f1: f64, df1: f64) -> CubicCoeffs {
    let mut m = [
        [x0 * x0 * x0, x0 * x0, x0, 1.0, f0],
        [3.0 * x0 * x0, 2.0 * x0, 1.0, 0.0, df0],
        [x1 * x1 * x1, x1 * x1, x1, 1.0, f1],
        [3.0 * x1 * x1, 2.0 * x1, 1.0, 0.0, df1],
    ];
    // Partial pivoting; the system is nonsingular for x0 != x1.
    for col in 0..4 {
        let piv = (col..4)
            .max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))
            .unwrap();
        m.swap(col, piv);
        for row in 0..4 {
            if row != col {
                let f = m[row][col] / m[col][col];
                for j in col..5 {
                    m[row][j] -= f * m[col][j];
                }
            }
        }
    }
    [
        m[0][4] / m[0][0],
        m[1][4] / m[1][1],
        m[2][4] / m[2][2],
        m[3][4] / m[3][3],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    // Independent oracle: solve a linear system by naive full elimination,
    // structured differently from `hermite_interpolate`.
    fn solve4_oracle(a: [[f64; 4]; 4], b: [f64; 4]) -> [f64; 4] {
        let mut aug = [[0.0; 5]; 4];
        for i in 0..4 {
            aug[i][..4].copy_from_slice(&a[i]);
            aug[i][4] = b[i];
        }
        for i in 0..4 {
            let p = (i..4).max_by(|&r, &s| aug[r][i].abs().total_cmp(&aug[s][i].abs())).unwrap();
            aug.swap(i, p);
            let d = aug[i][i];
            for j in i..5 {
                aug[i][j] /= d;
            }
            for r in 0..4 {
                if r != i {
                    let f = aug[r][i];
                    for j in i..5 {
                        aug[r][j] -= f * aug[i][j];
                    }
                }
            }
        }
        [aug[0][4], aug[1][4], aug[2][4], aug[3][4]]
    }

    #[test]
    fn hermite_demand_matches_linear_solve_oracle() {
        let (v0, rc, cap) = (100.0, 30.0, 2000.0);
        let c = hermite_cubic_demand(v0, rc, cap).unwrap();
        let a = [
            [0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, 1.0, 0.0],
            [rc * rc * rc, rc * rc, rc, 1.0],
            [3.0 * rc * rc, 2.0 * rc, 1.0, 0.0],
        ];
        let want = solve4_oracle(a, [0.0, v0, cap, 0.0]);
        for i in 0..4 {
            assert_relative_eq!(c[i], want[i], epsilon = 1e-9);
        }
        // Frozen value from the oracle: (-1/27, 0, 100, 0).
        assert_relative_eq!(c[0], -1.0 / 27.0, epsilon = 1e-12);
        assert_relative_eq!(c[1], 0.0, epsilon = 1e-9);
        assert_relative_eq!(c[2], 100.0, epsilon = 1e-9);
        assert_relative_eq!(c[3], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn hermite_demand_rejects_non_concave_targets() {
        // cap = v0 * rho_c forces the interpolant to bend upward first to
        // reach the flat crest: convex near zero, so it must be rejected.
        assert!(matches!(
            hermite_cubic_demand(80.0, 25.0, 2000.0),
            Err(FdError::DemandNotConcave(_))
        ));
        // Endpoint curvature checks bound cap to [v0 rho_c/3, 2 v0 rho_c/3]:
        // here [666.7, 1333.3].
        assert!(hermite_cubic_demand(80.0, 25.0, 1000.0).is_ok());
        assert!(hermite_cubic_demand(80.0, 25.0, 700.0).is_ok());
        assert!(hermite_cubic_demand(80.0, 25.0, 1400.0).is_err());
        assert!(hermite_cubic_demand(80.0, 25.0, 600.0).is_err());
    }

    #[test]
    fn hermite_supply_concavity_window() {
        // Window for rho_bar - rho_c with cap 2000, end slope -35 is
        // [2*3*2000/(2*35+... ] computed from endpoint second derivatives:
        // approximately [85.7, 171.4].
        assert!(hermite_cubic_supply(30.0, 2000.0, 150.0, -35.0).is_ok());
        assert!(matches!(
            hermite_cubic_supply(30.0, 2000.0, 110.0, -35.0),
            Err(FdError::SupplyNotConcave(_))
        ));
        let c = hermite_cubic_supply(30.0, 2000.0, 150.0, -35.0).unwrap();
        assert_relative_eq!(cubic_eval(&c, 150.0), 0.0, epsilon = 1e-6);
        assert_relative_eq!(cubic_deriv(&c, 150.0), -35.0, epsilon = 1e-9);
        assert_relative_eq!(cubic_eval(&c, 30.0), 2000.0, epsilon = 1e-6);
    }

    #[test]
    fn eval_demand_examples() {
        let rocade1 = Trapezoidal {
            v: 90.0,
            w: 20.0,
            cap_demand: 4410.0,
            cap_supply: 4630.5,
            rho_bar: 250.0,
        };
        assert_relative_eq!(rocade1.eval_demand(30.0).unwrap(), 2700.0);
        assert_relative_eq!(rocade1.eval_demand(100.0).unwrap(), 4410.0);
        assert_relative_eq!(rocade1.eval_demand(0.0).unwrap(), 0.0);

        let cubic = CubicHermite {
            demand: [-1.0 / 27.0, 0.0, 100.0, 0.0],
            supply: hermite_cubic_supply(30.0, 2000.0, 150.0, -35.0).unwrap(),
            cap: 2000.0,
            rho_c: 30.0,
            rho_bar: 150.0,
        };
        // -15^3/27 + 100*15 = 1375, independently: -125 + 1500.
        assert_relative_eq!(cubic.eval_demand(15.0).unwrap(), 1375.0, epsilon = 1e-9);
        assert_relative_eq!(cubic.eval_demand(0.0).unwrap(), 0.0);
    }

    fn section63_fd() -> FundamentalDiagram {
        CubicHermite {
            demand: hermite_cubic_demand(100.0, 30.0, 2000.0).unwrap(),
            supply: hermite_cubic_supply(30.0, 2000.0, 150.0, -35.0).unwrap(),
            cap: 2000.0,
            rho_c: 30.0,
            rho_bar: 150.0,
        }
    }

    #[test]
    fn lipschitz_examples() {
        let t = Trapezoidal {
            v: 90.0,
            w: 20.0,
            cap_demand: 4410.0,
            cap_supply: 4630.5,
            rho_bar: 250.0,
        };
        assert_eq!(t.lipschitz_constants().unwrap(), (90.0, 20.0));
        let (gd, gs) = section63_fd().lipschitz_constants().unwrap();
        assert_relative_eq!(gd, 100.0, epsilon = 1e-9);
        assert_relative_eq!(gs, 35.0, epsilon = 1e-9);
    }

    #[test]
    fn pwa_discretize_underestimates_cubic() {
        let fd = section63_fd();
        // K=2 on [0,30]: breakpoints 0, 15, 30; value at 22.5 is the secant
        // between (15, 1375) and (30, 2000): 1687.5, below true 1828.125.
        let pwa = fd.pwa_discretize(2).unwrap();
        assert_relative_eq!(pwa.eval_demand(22.5).unwrap(), 1687.5, epsilon = 1e-9);
        assert_relative_eq!(fd.eval_demand(22.5).unwrap(), 1828.125, epsilon = 1e-9);

        for k in [2usize, 4, 8, 32] {
            let p = fd.pwa_discretize(k).unwrap();
            let (gd, _) = fd.lipschitz_constants().unwrap();
            let mut max_gap = 0.0f64;
            for i in 0..10_000 {
                let rho = 150.0 * i as f64 / 9_999.0;
                let exact_d = fd.eval_demand(rho).unwrap();
                let approx_d = p.eval_demand(rho).unwrap();
                assert!(approx_d <= exact_d + 1e-9, "k={k} rho={rho}");
                let exact_s = fd.eval_supply(rho).unwrap();
                let approx_s = p.eval_supply(rho).unwrap();
                assert!(approx_s <= exact_s + 1e-9, "k={k} rho={rho}");
                max_gap = max_gap.max(exact_d - approx_d);
            }
            assert!(max_gap <= gd * 30.0 / k as f64, "k={k} gap={max_gap}");
        }
    }

    #[test]
    fn pwa_discretize_trapezoid_is_identity() {
        let t = FundamentalDiagram::triangular(100.0, 25.0, 5000.0, 250.0);
        let p = t.pwa_discretize(4).unwrap();
        for i in 0..1000 {
            let rho = 250.0 * i as f64 / 999.0;
            assert_relative_eq!(
                p.eval_demand(rho).unwrap(),
                t.eval_demand(rho).unwrap(),
                epsilon = 1e-9
            );
            assert_relative_eq!(
                p.eval_supply(rho).unwrap(),
                t.eval_supply(rho).unwrap(),
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn scale_lanes_preserves_slopes() {
        let fd = section63_fd();
        let scaled = fd.scale_lanes(3).unwrap();
        assert_eq!(
            fd.lipschitz_constants().unwrap(),
            scaled.lipschitz_constants().unwrap()
        );
        assert_relative_eq!(scaled.eval_demand(90.0).unwrap(), 6000.0, epsilon = 1e-9);
        assert_relative_eq!(scaled.rho_bar(), 450.0);
        // n d(rho / n) pointwise.
        for i in 0..200 {
            let rho = 450.0 * i as f64 / 199.0;
            assert_relative_eq!(
                scaled.eval_demand(rho).unwrap(),
                3.0 * fd.eval_demand(rho / 3.0).unwrap(),
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn capacity_drop_raises_free_flow_cap() {
        let base = FundamentalDiagram::triangular(90.0, 20.0, 4500.0, 250.0);
        let dropped = base.apply_capacity_drop(0.10).unwrap();
        if let CapacityDrop { rho_c, .. } = &dropped {
            assert_relative_eq!(dropped.eval_demand(*rho_c - 1e-9).unwrap(), 5000.0, epsilon = 1e-6);
            assert_relative_eq!(dropped.eval_demand(rho_c + 1.0).unwrap(), 4500.0, epsilon = 1e-9);
        } else {
            panic!("expected capacity-drop variant");
        }
        assert!(base.apply_capacity_drop(0.0).is_err());
        assert!(dropped.pwa_discretize(8).is_err());
        assert!(dropped.lipschitz_constants().is_err());
    }

    #[test]
    fn random_secant_concavity_audit() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let fds = [
            section63_fd(),
            FundamentalDiagram::triangular(100.0, 25.0, 5000.0, 250.0),
            Trapezoidal {
                v: 90.0,
                w: 20.2,
                cap_demand: 4410.0,
                cap_supply: 4630.5,
                rho_bar: 250.0,
            },
        ];
        for fd in &fds {
            fd.check_concavity().unwrap();
            let rho_bar = fd.rho_bar();
            for _ in 0..200 {
                let mut xs = [0.0f64; 3];
                for x in &mut xs {
                    *x = rng.gen_range(0.0..rho_bar);
                }
                xs.sort_by(f64::total_cmp);
                let [a, b, c] = xs;
                if b - a < 1e-6 || c - b < 1e-6 {
                    continue;
                }
                let scale = fd.eval_demand(rho_bar.min(1e9)).unwrap().abs().max(1.0);
                let s1 = (fd.eval_demand(b).unwrap() - fd.eval_demand(a).unwrap()) / (b - a);
                let s2 = (fd.eval_demand(c).unwrap() - fd.eval_demand(b).unwrap()) / (c - b);
                assert!(s2 <= s1 + 1e-9 * scale);
            }
        }
    }
}
