//! Strict JSON scenario files.
//!
//! ```json
//! {
//!   "name": "two links",
//!   "capacity": { "A": [[1, 0, 1], [0, 1, 1]], "c": [1, 1] },
//!   "traffic": { "nu_bar": [0.4, 0.4, 0.4], "mu": [1, 1, 1], "P": [[0, 0, 0], [0, 0, 0], [0, 0, 0]] },
//!   "allocator": { "kind": "pf" },
//!   "run": { "t_end": 1000, "seed": 7, "box": 6 }
//! }
//! ```
//!
//! Unknown keys are rejected and every error names the offending key.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::allocators::{AlphaFair, AllocatorKind};
use crate::capacity::CapacityRegion;
use crate::error::{Error, Result};
use crate::traffic::{expand_phase_type, PhaseExpansion, PhaseType, TrafficModel};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCapacity {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    c: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTraffic {
    nu_bar: Vec<f64>,
    mu: Vec<f64>,
    #[serde(rename = "P", default, skip_serializing_if = "Option::is_none")]
    p: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPhase {
    alpha: Vec<f64>,
    rates: Vec<f64>,
    #[serde(rename = "P", default, skip_serializing_if = "Option::is_none")]
    p: Option<Vec<Vec<f64>>>,
}

/// Run settings; every field is optional in the file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSettings {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub box_bound: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    capacity: RawCapacity,
    traffic: RawTraffic,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    phase_type: Option<Vec<RawPhase>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    allocator: Option<AllocatorKind>,
    #[serde(default, skip_serializing_if = "RunSettings::is_empty")]
    run: RunSettings,
}

impl RunSettings {
    fn is_empty(&self) -> bool {
        *self == RunSettings::default()
    }
}

/// A validated scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub region: CapacityRegion,
    pub model: TrafficModel,
    pub phases: Option<Vec<PhaseType>>,
    pub allocator: AllocatorKind,
    pub run: RunSettings,
}

fn bad(msg: String) -> Error {
    Error::Scenario(msg)
}

fn finite(key: &str, v: &[f64]) -> Result<()> {
    for (i, x) in v.iter().enumerate() {
        if !x.is_finite() {
            return Err(bad(format!("{key}[{i}] = {x} is not finite")));
        }
    }
    Ok(())
}

fn square(key: &str, rows: &[Vec<f64>], n: usize) -> Result<DMatrix<f64>> {
    if rows.len() != n {
        return Err(bad(format!("{key} has {} rows, expected {n}", rows.len())));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != n {
            return Err(bad(format!("{key} row {i} has {} entries, expected {n}", row.len())));
        }
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if !(v.is_finite() && v >= 0.0) {
                return Err(bad(format!("{key} row {i} entry {j} is {v}, must be finite and >= 0")));
            }
            sum += v;
        }
        if sum > 1.0 + 1e-12 {
            return Err(bad(format!("{key} row {i} sums to {sum}, must be <= 1")));
        }
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

impl Scenario {
    /// Parses and validates scenario JSON.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let raw: RawScenario = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if inner.is_syntax() || inner.is_eof() {
                bad(format!("malformed JSON: {inner}"))
            } else if path == "." {
                bad(inner.to_string())
            } else {
                bad(format!("{path}: {inner}"))
            }
        })?;
        Self::validate(raw)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Scenario(m) => Error::Scenario(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn validate(raw: RawScenario) -> Result<Self> {
        let cap = raw.capacity;
        if cap.a.is_empty() {
            return Err(bad("capacity.A must have at least one row".into()));
        }
        let n = cap.a[0].len();
        if n == 0 {
            return Err(bad("capacity.A row 0 is empty".into()));
        }
        for (l, row) in cap.a.iter().enumerate() {
            if row.len() != n {
                return Err(bad(format!("capacity.A row {l} has {} entries, expected {n}", row.len())));
            }
            finite(&format!("capacity.A row {l}"), row)?;
        }
        if cap.c.len() != cap.a.len() {
            return Err(bad(format!("capacity.c has {} entries but capacity.A has {} rows", cap.c.len(), cap.a.len())));
        }
        finite("capacity.c", &cap.c)?;
        let region = CapacityRegion::new(cap.a, cap.c).map_err(|e| bad(format!("capacity: {e}")))?;

        let tr = raw.traffic;
        for (key, v) in [("traffic.nu_bar", &tr.nu_bar), ("traffic.mu", &tr.mu)] {
            if v.len() != n {
                return Err(bad(format!("{key} has {} entries, expected {n}", v.len())));
            }
            finite(key, v)?;
        }
        let p = match &tr.p {
            Some(rows) => square("traffic.P", rows, n)?,
            None => DMatrix::zeros(n, n),
        };
        let model = TrafficModel::new(tr.nu_bar, tr.mu, p).map_err(|e| bad(format!("traffic: {e}")))?;

        let phases = match raw.phase_type {
            None => None,
            Some(list) => {
                if list.len() != n {
                    return Err(bad(format!("phase_type has {} entries, expected {n}", list.len())));
                }
                let mut out = Vec::with_capacity(n);
                for (r, ph) in list.into_iter().enumerate() {
                    let key = format!("phase_type[{r}]");
                    finite(&format!("{key}.alpha"), &ph.alpha)?;
                    finite(&format!("{key}.rates"), &ph.rates)?;
                    let k = ph.rates.len();
                    let p = match &ph.p {
                        Some(rows) => square(&format!("{key}.P"), rows, k)?,
                        None => DMatrix::zeros(k, k),
                    };
                    out.push(PhaseType::new(ph.alpha, ph.rates, p).map_err(|e| bad(format!("{key}: {e}")))?);
                }
                expand_phase_type(&region, &model, &out).map_err(|e| bad(format!("phase_type: {e}")))?;
                Some(out)
            }
        };

        let allocator = raw.allocator.unwrap_or(AllocatorKind::Pf);
        if let AllocatorKind::AlphaFair { w, alpha } = &allocator {
            AlphaFair::new(region.clone(), w.clone(), *alpha).map_err(|e| bad(format!("allocator: {e}")))?;
        }

        let run = raw.run;
        if let Some(t) = run.t_end {
            if !(t.is_finite() && t > 0.0) {
                return Err(bad(format!("run.t_end = {t} must be positive")));
            }
        }
        if let Some(b) = run.burn_in {
            if !(b.is_finite() && b >= 0.0) || run.t_end.is_some_and(|t| b >= t) {
                return Err(bad(format!("run.burn_in = {b} must lie in [0, run.t_end)")));
            }
        }
        if let Some(h) = run.h_step {
            if !(h.is_finite() && h > 0.0) {
                return Err(bad(format!("run.h_step = {h} must be positive")));
            }
        }
        if let Some(z) = run.scale {
            if !(z.is_finite() && z >= 1.0) {
                return Err(bad(format!("run.scale = {z} must be at least 1")));
            }
        }
        if let Some(x0) = &run.x0 {
            if x0.len() != n {
                return Err(bad(format!("run.x0 has {} entries, expected {n}", x0.len())));
            }
            if x0.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(bad("run.x0 entries must be finite and >= 0".into()));
            }
        }

        Ok(Scenario { name: raw.name.unwrap_or_default(), region, model, phases, allocator, run })
    }

    /// Serialises back to the file schema.
    pub fn to_json(&self) -> String {
        let n = self.region.num_classes();
        let matrix = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
        };
        let raw = RawScenario {
            name: (!self.name.is_empty()).then(|| self.name.clone()),
            capacity: RawCapacity { a: self.region.rows(), c: self.region.capacities().to_vec() },
            traffic: RawTraffic {
                nu_bar: self.model.nu_bar().to_vec(),
                mu: self.model.mu().to_vec(),
                p: self.model.has_routing().then(|| matrix(self.model.routing())),
            },
            phase_type: self.phases.as_ref().map(|ps| {
                ps.iter()
                    .map(|p| RawPhase { alpha: p.alpha.clone(), rates: p.rates.clone(), p: Some(matrix(&p.routing)) })
                    .collect()
            }),
            allocator: Some(self.allocator.clone()),
            run: self.run.clone(),
        };
        debug_assert_eq!(raw.traffic.nu_bar.len(), n);
        serde_json::to_string_pretty(&raw).expect("scenario serialises")
    }

    pub fn num_classes(&self) -> usize {
        self.region.num_classes()
    }

    pub fn num_links(&self) -> usize {
        self.region.num_links()
    }

    /// The phase-expanded model, when phase types are given.
    pub fn expansion(&self) -> Result<Option<PhaseExpansion>> {
        self.phases.as_ref().map(|p| expand_phase_type(&self.region, &self.model, p)).transpose()
    }
}
