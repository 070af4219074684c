//! Network data model: MATPOWER / JSON parsing, validation, and the bus
//! admittance matrix.
//!
//! All electrical quantities are stored in per-unit on the system MVA base;
//! cost coefficients stay in $/hr with generator power in MW (converted at
//! the point of use). Bus, branch and generator references are 0-based
//! internal indices; the original file numbering survives in [`Bus::id`].

use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type C64 = Complex<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BusKind {
    Slack,
    Pv,
    Pq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    /// Bus number as written in the source file (1-based, not necessarily dense).
    pub id: u32,
    pub kind: BusKind,
    pub p_load: f64,
    pub q_load: f64,
    /// Shunt conductance / susceptance at the bus (p.u.).
    pub gs: f64,
    pub bs: f64,
    /// Voltage magnitude held at Slack/PV buses (generator setpoint).
    pub v_setpoint: f64,
    pub v_max: f64,
    /// Parsed and kept for reporting; the relaxed dispatch model has no lower
    /// voltage bound, so nothing downstream constrains against it.
    pub v_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    /// Total line-charging susceptance (p.u.); half lands at each end.
    pub b_charge: f64,
    /// Off-nominal tap ratio at the from end; 1.0 = none.
    pub tap: f64,
    /// Phase shift at the from end, radians.
    pub shift: f64,
    /// Apparent-power rating (p.u.); 0 = unlimited.
    pub s_max: f64,
}

impl Branch {
    pub fn z(&self) -> C64 {
        C64::new(self.r, self.x)
    }

    pub fn is_rated(&self) -> bool {
        self.s_max > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostCurve {
    /// $/hr constant term.
    pub c0: f64,
    /// $/MWh linear term.
    pub c1: f64,
    /// $/MWh² quadratic term; must be ≥ 0 so dispatch objectives are convex.
    pub c2: f64,
}

impl CostCurve {
    pub fn eval_mw(&self, p_mw: f64) -> f64 {
        self.c0 + self.c1 * p_mw + self.c2 * p_mw * p_mw
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    /// Scheduled active output used when sampling power flows (p.u.).
    pub p_setpoint: f64,
    pub cost: CostCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkCase {
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
}

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("syntax error at line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("invalid case: {0}")]
    Semantic(String),
}

impl NetworkCase {
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    /// Internal index of the slack bus. Valid cases have exactly one.
    pub fn slack(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .expect("validated case has a slack bus")
    }

    /// Generators attached to one bus, as internal generator indices.
    pub fn gens_at(&self, bus: usize) -> Vec<usize> {
        (0..self.generators.len())
            .filter(|&g| self.generators[g].bus == bus)
            .collect()
    }

    /// Copy of the case with every bus load multiplied by its own factor
    /// (p and q together, preserving the power factor).
    pub fn with_scaled_loads(&self, factors: &[f64]) -> NetworkCase {
        assert_eq!(factors.len(), self.n_buses(), "one factor per bus");
        let mut out = self.clone();
        for (bus, &u) in out.buses.iter_mut().zip(factors) {
            bus.p_load *= u;
            bus.q_load *= u;
        }
        out
    }

    pub fn validate(&self) -> Result<(), CaseError> {
        let err = |msg: String| Err(CaseError::Semantic(msg));
        let n = self.n_buses();
        if n == 0 {
            return err("case has no buses".into());
        }
        let slacks = self
            .buses
            .iter()
            .filter(|b| b.kind == BusKind::Slack)
            .count();
        if slacks == 0 {
            return err("no slack bus".into());
        }
        if slacks > 1 {
            return err(format!("{slacks} slack buses, expected exactly one"));
        }
        for (i, bus) in self.buses.iter().enumerate() {
            if bus.kind != BusKind::Pq && !(bus.v_min <= bus.v_setpoint && bus.v_setpoint <= bus.v_max) {
                return err(format!(
                    "bus {} setpoint {} outside [{}, {}]",
                    bus.id, bus.v_setpoint, bus.v_min, bus.v_max
                ));
            }
            if bus.kind != BusKind::Pq && self.gens_at(i).is_empty() {
                return err(format!("bus {} is {:?} but has no generator", bus.id, bus.kind));
            }
        }
        for br in &self.branches {
            if br.from >= n || br.to >= n {
                return err(format!("branch references missing bus ({} or {})", br.from, br.to));
            }
            if br.from == br.to {
                return err(format!("branch from bus {} to itself", self.buses[br.from].id));
            }
            if br.z().norm() == 0.0 {
                return err(format!(
                    "branch {}-{} has zero series impedance",
                    self.buses[br.from].id, self.buses[br.to].id
                ));
            }
        }
        for (g, gen) in self.generators.iter().enumerate() {
            if gen.bus >= n {
                return err(format!("generator {g} references missing bus"));
            }
            if gen.p_min > gen.p_max || gen.q_min > gen.q_max {
                return err(format!("generator {g} has inverted limits"));
            }
            if gen.cost.c2 < 0.0 {
                return err(format!("generator {g} has negative quadratic cost"));
            }
        }
        // Connectivity: every bus reachable from the slack over branches.
        let mut seen = vec![false; n];
        let mut stack = vec![self.slack()];
        seen[self.slack()] = true;
        while let Some(i) = stack.pop() {
            for br in &self.branches {
                let other = if br.from == i {
                    br.to
                } else if br.to == i {
                    br.from
                } else {
                    continue;
                };
                if !seen[other] {
                    seen[other] = true;
                    stack.push(other);
                }
            }
        }
        if let Some(i) = seen.iter().position(|&s| !s) {
            return err(format!("bus {} is disconnected from the slack", self.buses[i].id));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("case serializes")
    }
}

/// Nodal admittance matrix from the standard pi model with off-nominal taps,
/// phase shifts and bus shunts.
pub fn build_admittance(case: &NetworkCase) -> DMatrix<C64> {
    let n = case.n_buses();
    let mut y = DMatrix::<C64>::zeros(n, n);
    for br in &case.branches {
        let ys = C64::new(1.0, 0.0) / br.z();
        let ych = C64::new(0.0, br.b_charge / 2.0);
        let t = C64::from_polar(br.tap, br.shift);
        let (f, k) = (br.from, br.to);
        y[(f, f)] += (ys + ych) / (br.tap * br.tap);
        y[(f, k)] += -ys / t.conj();
        y[(k, f)] += -ys / t;
        y[(k, k)] += ys + ych;
    }
    for (i, bus) in case.buses.iter().enumerate() {
        y[(i, i)] += C64::new(bus.gs, bus.bs);
    }
    y
}

/// Parse MATPOWER case text or the JSON mirror, then validate.
pub fn parse_case(text: &str) -> Result<NetworkCase, CaseError> {
    let case = if text.trim_start().starts_with('{') {
        serde_json::from_str::<NetworkCase>(text)
            .map_err(|e| CaseError::Syntax { line: e.line(), msg: e.to_string() })?
    } else {
        parse_matpower(text)?
    };
    case.validate()?;
    Ok(case)
}

/// One bundled case by short name, or None.
pub fn bundled_case(name: &str) -> Option<&'static str> {
    match name {
        "case5" => Some(include_str!("../data/case5.m")),
        "case57" => Some(include_str!("../data/case57.m")),
        "case118" => Some(include_str!("../data/case118.m")),
        _ => None,
    }
}

pub fn load_bundled(name: &str) -> Result<NetworkCase, CaseError> {
    let text = bundled_case(name)
        .ok_or_else(|| CaseError::Semantic(format!("no bundled case named {name:?}")))?;
    let mut case = parse_case(text)?;
    case.name = name.to_string();
    Ok(case)
}

fn parse_matpower(text: &str) -> Result<NetworkCase, CaseError> {
    let syntax = |line: usize, msg: String| CaseError::Syntax { line, msg };

    let mut name = String::from("case");
    let mut base_mva: Option<f64> = None;
    let mut sections: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    let mut current: Option<(String, Vec<Vec<f64>>)> = None;
    let mut skipping_cell = false;

    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = match raw.find('%') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if skipping_cell {
            if line.starts_with('}') {
                skipping_cell = false;
            }
            continue;
        }
        if let Some((_, rows)) = current.as_mut() {
            if line.starts_with(']') {
                let done = current.take().unwrap();
                sections.push(done);
                continue;
            }
            let row: Result<Vec<f64>, _> = line
                .trim_end_matches(';')
                .split_whitespace()
                .map(|tok| tok.parse::<f64>())
                .collect();
            match row {
                Ok(r) if !r.is_empty() => rows.push(r),
                Ok(_) => {}
                Err(e) => return Err(syntax(lineno, format!("bad matrix row: {e}"))),
            }
            continue;
        }
        if let Some(rest) = line.strip_prefix("function") {
            if let Some(eq) = rest.find('=') {
                name = rest[eq + 1..].trim().trim_end_matches(';').to_string();
            }
            continue;
        }
        if let Some(rest) = line.strip_prefix("mpc.") {
            let (field, rhs) = match rest.split_once('=') {
                Some((f, r)) => (f.trim(), r.trim()),
                None => continue,
            };
            if rhs.starts_with('[') {
                current = Some((field.to_string(), Vec::new()));
                // tolerate single-line matrices: mpc.x = [1 2; 3 4];
                let inner = rhs.trim_start_matches('[');
                if let Some(end) = inner.find(']') {
                    let (body, _) = inner.split_at(end);
                    let (field, mut rows) = current.take().unwrap();
                    for part in body.split(';') {
                        let row: Vec<f64> = part
                            .split_whitespace()
                            .filter_map(|t| t.parse().ok())
                            .collect();
                        if !row.is_empty() {
                            rows.push(row);
                        }
                    }
                    sections.push((field, rows));
                }
            } else if rhs.starts_with('{') {
                skipping_cell = !rhs.contains('}');
            } else if field == "baseMVA" {
                let v = rhs
                    .trim_end_matches(';')
                    .parse::<f64>()
                    .map_err(|e| syntax(lineno, format!("bad baseMVA: {e}")))?;
                base_mva = Some(v);
            }
            // other scalar/string assignments (version, …) are ignored
        }
    }

    let base = base_mva.ok_or_else(|| CaseError::Semantic("missing mpc.baseMVA".into()))?;
    let take = |key: &str| -> Option<&Vec<Vec<f64>>> {
        sections.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    };
    let bus_rows = take("bus").ok_or_else(|| CaseError::Semantic("missing mpc.bus".into()))?;
    let gen_rows = take("gen").ok_or_else(|| CaseError::Semantic("missing mpc.gen".into()))?;
    let branch_rows =
        take("branch").ok_or_else(|| CaseError::Semantic("missing mpc.branch".into()))?;
    let cost_rows = take("gencost");

    let mut buses = Vec::with_capacity(bus_rows.len());
    let mut index_of = std::collections::HashMap::new();
    for row in bus_rows {
        if row.len() < 13 {
            return Err(CaseError::Semantic(format!(
                "bus row has {} columns, expected 13",
                row.len()
            )));
        }
        let kind = match row[1] as i64 {
            1 => BusKind::Pq,
            2 => BusKind::Pv,
            3 => BusKind::Slack,
            k => return Err(CaseError::Semantic(format!("bus {} has unsupported type {k}", row[0]))),
        };
        index_of.insert(row[0] as u32, buses.len());
        buses.push(Bus {
            id: row[0] as u32,
            kind,
            p_load: row[2] / base,
            q_load: row[3] / base,
            gs: row[4] / base,
            bs: row[5] / base,
            v_setpoint: 1.0,
            v_max: row[11],
            v_min: row[12],
        });
    }

    let lookup = |ext: f64| -> Result<usize, CaseError> {
        index_of
            .get(&(ext as u32))
            .copied()
            .ok_or_else(|| CaseError::Semantic(format!("reference to unknown bus {ext}")))
    };

    if let Some(costs) = cost_rows {
        // gencost rows align with the full generator table (q-cost block, if
        // present, trails it and is ignored)
        if costs.len() != gen_rows.len() && costs.len() != 2 * gen_rows.len() {
            return Err(CaseError::Semantic(format!(
                "{} gencost rows for {} generators",
                costs.len(),
                gen_rows.len()
            )));
        }
    }

    let mut generators = Vec::new();
    for (gi, row) in gen_rows.iter().enumerate() {
        if row.len() < 10 {
            return Err(CaseError::Semantic(format!(
                "gen row has {} columns, expected 10",
                row.len()
            )));
        }
        if row[7] <= 0.0 {
            continue; // out of service
        }
        let bus = lookup(row[0])?;
        buses[bus].v_setpoint = row[5];
        let cost = match cost_rows {
            None => CostCurve { c0: 0.0, c1: 0.0, c2: 0.0 },
            Some(costs) => {
                let c = &costs[gi];
                if c.len() < 4 || c[0] as i64 != 2 {
                    return Err(CaseError::Semantic(format!(
                        "generator {gi}: only polynomial cost model 2 is supported"
                    )));
                }
                let ncoef = c[3] as usize;
                if c.len() < 4 + ncoef || ncoef > 3 {
                    return Err(CaseError::Semantic(format!(
                        "generator {gi}: polynomial degree above quadratic"
                    )));
                }
                let coef = &c[4..4 + ncoef];
                match ncoef {
                    0 => CostCurve { c0: 0.0, c1: 0.0, c2: 0.0 },
                    1 => CostCurve { c0: coef[0], c1: 0.0, c2: 0.0 },
                    2 => CostCurve { c0: coef[1], c1: coef[0], c2: 0.0 },
                    _ => CostCurve { c0: coef[2], c1: coef[1], c2: coef[0] },
                }
            }
        };
        generators.push(Generator {
            bus,
            p_min: row[9] / base,
            p_max: row[8] / base,
            q_min: row[4] / base,
            q_max: row[3] / base,
            p_setpoint: row[1] / base,
            cost,
        });
    }

    let mut branches = Vec::new();
    for row in branch_rows {
        if row.len() < 11 {
            return Err(CaseError::Semantic(format!(
                "branch row has {} columns, expected at least 11",
                row.len()
            )));
        }
        if row[10] <= 0.0 {
            continue; // out of service
        }
        branches.push(Branch {
            from: lookup(row[0])?,
            to: lookup(row[1])?,
            r: row[2],
            x: row[3],
            b_charge: row[4],
            tap: if row[8] == 0.0 { 1.0 } else { row[8] },
            shift: row[9].to_radians(),
            s_max: row[5] / base,
        });
    }

    Ok(NetworkCase { name, base_mva: base, buses, branches, generators })
}
