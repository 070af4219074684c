//! Newton–Raphson AC power flow (polar form) and extraction of bus
//! injections / from-end branch flows for dataset labelling.
//!
//! The solver holds PV-bus voltage magnitudes at their setpoints without
//! reactive-limit switching: samples describe network physics, while
//! generator capability is enforced later by the dispatch models.

use crate::case::{build_admittance, BusKind, NetworkCase, C64};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Rectangular bus voltages; the feature source for every fitted model.
#[derive(Debug, Clone, PartialEq)]
pub struct VoltageState {
    pub e: DVector<f64>,
    pub f: DVector<f64>,
}

impl VoltageState {
    pub fn n(&self) -> usize {
        self.e.len()
    }

    /// Feature layout used across the toolkit: [e_1, f_1, e_2, f_2, …].
    pub fn interleaved(&self) -> DVector<f64> {
        let n = self.n();
        DVector::from_fn(2 * n, |k, _| if k % 2 == 0 { self.e[k / 2] } else { self.f[k / 2] })
    }

    pub fn from_interleaved(x: &[f64]) -> VoltageState {
        assert!(x.len() % 2 == 0, "feature vector must interleave (e, f) pairs");
        let n = x.len() / 2;
        VoltageState {
            e: DVector::from_fn(n, |i, _| x[2 * i]),
            f: DVector::from_fn(n, |i, _| x[2 * i + 1]),
        }
    }

    pub fn magnitude(&self, i: usize) -> f64 {
        self.e[i].hypot(self.f[i])
    }
}

/// Per-bus net injections and per-branch flows measured at the from end.
#[derive(Debug, Clone)]
pub struct FlowRecord {
    pub p_inj: DVector<f64>,
    pub q_inj: DVector<f64>,
    pub p_flow: DVector<f64>,
    pub q_flow: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct AcpfSolution {
    pub voltages: VoltageState,
    pub iterations: usize,
    pub max_mismatch: f64,
}

#[derive(Debug, Error)]
pub enum AcpfError {
    #[error("power flow did not converge in {iterations} iterations (mismatch {mismatch:.3e} p.u.)")]
    NonConvergence { iterations: usize, mismatch: f64 },
    #[error("singular Jacobian at iteration {iteration}")]
    SingularJacobian { iteration: usize },
}

struct NewtonContext {
    y: DMatrix<C64>,
    p_sched: DVector<f64>,
    q_sched: DVector<f64>,
    pvpq: Vec<usize>,
    pq: Vec<usize>,
}

impl NewtonContext {
    fn new(case: &NetworkCase) -> Self {
        let n = case.n_buses();
        let mut p_sched = DVector::from_fn(n, |i, _| -case.buses[i].p_load);
        let q_sched = DVector::from_fn(n, |i, _| -case.buses[i].q_load);
        for gen in &case.generators {
            p_sched[gen.bus] += gen.p_setpoint;
        }
        let pvpq: Vec<usize> =
            (0..n).filter(|&i| case.buses[i].kind != BusKind::Slack).collect();
        let pq: Vec<usize> = (0..n).filter(|&i| case.buses[i].kind == BusKind::Pq).collect();
        NewtonContext { y: build_admittance(case), p_sched, q_sched, pvpq, pq }
    }

    fn voltages(&self, vm: &DVector<f64>, va: &DVector<f64>) -> DVector<C64> {
        DVector::from_fn(vm.len(), |i, _| C64::from_polar(vm[i], va[i]))
    }

    /// Mismatch F = S_calc − S_sched, stacked [ΔP over PV+PQ, ΔQ over PQ].
    fn mismatch(&self, vm: &DVector<f64>, va: &DVector<f64>) -> DVector<f64> {
        let v = self.voltages(vm, va);
        let i_bus = &self.y * &v;
        let s: Vec<C64> = (0..v.len()).map(|i| v[i] * i_bus[i].conj()).collect();
        let mut out = DVector::zeros(self.pvpq.len() + self.pq.len());
        for (r, &i) in self.pvpq.iter().enumerate() {
            out[r] = s[i].re - self.p_sched[i];
        }
        for (r, &i) in self.pq.iter().enumerate() {
            out[self.pvpq.len() + r] = s[i].im - self.q_sched[i];
        }
        out
    }

    /// Dense polar Jacobian of the mismatch in the same row/column order.
    fn jacobian(&self, vm: &DVector<f64>, va: &DVector<f64>) -> DMatrix<f64> {
        let n = vm.len();
        let v = self.voltages(vm, va);
        let i_bus = &self.y * &v;
        let j = C64::new(0.0, 1.0);
        // dS_i/dθ_k and dS_i/d|V|_k of the injection S = V ∘ conj(YV)
        let ds_dva = DMatrix::from_fn(n, n, |i, k| {
            if i == k {
                j * v[i] * (i_bus[i] - self.y[(i, i)] * v[i]).conj()
            } else {
                j * v[i] * (-self.y[(i, k)] * v[k]).conj()
            }
        });
        let ds_dvm = DMatrix::from_fn(n, n, |i, k| {
            let vnorm = v[k] / vm[k];
            let base = v[i] * (self.y[(i, k)] * vnorm).conj();
            if i == k {
                base + i_bus[i].conj() * vnorm
            } else {
                base
            }
        });
        let (na, nq) = (self.pvpq.len(), self.pq.len());
        let mut jac = DMatrix::zeros(na + nq, na + nq);
        for (r, &i) in self.pvpq.iter().enumerate() {
            for (c, &k) in self.pvpq.iter().enumerate() {
                jac[(r, c)] = ds_dva[(i, k)].re;
            }
            for (c, &k) in self.pq.iter().enumerate() {
                jac[(r, na + c)] = ds_dvm[(i, k)].re;
            }
        }
        for (r, &i) in self.pq.iter().enumerate() {
            for (c, &k) in self.pvpq.iter().enumerate() {
                jac[(na + r, c)] = ds_dva[(i, k)].im;
            }
            for (c, &k) in self.pq.iter().enumerate() {
                jac[(na + r, na + c)] = ds_dvm[(i, k)].im;
            }
        }
        jac
    }
}

/// Solve the AC power flow from a flat start.
pub fn solve_ac(case: &NetworkCase, tol: f64, max_iter: usize) -> Result<AcpfSolution, AcpfError> {
    assert!(tol > 0.0, "tolerance must be positive");
    let n = case.n_buses();
    let ctx = NewtonContext::new(case);
    let mut vm = DVector::from_fn(n, |i, _| match case.buses[i].kind {
        BusKind::Pq => 1.0,
        _ => case.buses[i].v_setpoint,
    });
    let mut va = DVector::zeros(n);

    for it in 0..=max_iter {
        let f = ctx.mismatch(&vm, &va);
        let mismatch = f.amax();
        if mismatch <= tol {
            let voltages = VoltageState {
                e: DVector::from_fn(n, |i, _| vm[i] * va[i].cos()),
                f: DVector::from_fn(n, |i, _| vm[i] * va[i].sin()),
            };
            return Ok(AcpfSolution { voltages, iterations: it, max_mismatch: mismatch });
        }
        if it == max_iter {
            return Err(AcpfError::NonConvergence { iterations: it, mismatch });
        }
        let jac = ctx.jacobian(&vm, &va);
        let dx = jac
            .lu()
            .solve(&f)
            .ok_or(AcpfError::SingularJacobian { iteration: it })?;
        for (c, &i) in ctx.pvpq.iter().enumerate() {
            va[i] -= dx[c];
        }
        for (c, &i) in ctx.pq.iter().enumerate() {
            vm[i] -= dx[ctx.pvpq.len() + c];
        }
    }
    unreachable!("loop returns or errors");
}

/// Net injections S_i = V_i · conj(Σ_k Y_ik V_k) and from-end pi-model flows.
pub fn compute_flows(case: &NetworkCase, v: &VoltageState) -> FlowRecord {
    let n = case.n_buses();
    assert_eq!(v.n(), n, "voltage state must match the case");
    let y = build_admittance(case);
    let vc = DVector::from_fn(n, |i, _| C64::new(v.e[i], v.f[i]));
    let i_bus = &y * &vc;
    let mut p_inj = DVector::zeros(n);
    let mut q_inj = DVector::zeros(n);
    for i in 0..n {
        let s = vc[i] * i_bus[i].conj();
        p_inj[i] = s.re;
        q_inj[i] = s.im;
    }
    let l = case.n_branches();
    let mut p_flow = DVector::zeros(l);
    let mut q_flow = DVector::zeros(l);
    for (bi, br) in case.branches.iter().enumerate() {
        let ys = C64::new(1.0, 0.0) / br.z();
        let ych = C64::new(0.0, br.b_charge / 2.0);
        let t = C64::from_polar(br.tap, br.shift);
        let yff = (ys + ych) / (br.tap * br.tap);
        let yft = -ys / t.conj();
        let s_from = vc[br.from] * (yff * vc[br.from] + yft * vc[br.to]).conj();
        p_flow[bi] = s_from.re;
        q_flow[bi] = s_from.im;
    }
    FlowRecord { p_inj, q_inj, p_flow, q_flow }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case::{load_bundled, Branch, Bus, CostCurve, Generator};
    use approx::assert_relative_eq;

    fn two_bus(load_p: f64, load_q: f64) -> NetworkCase {
        NetworkCase {
            name: "twobus".into(),
            base_mva: 100.0,
            buses: vec![
                Bus {
                    id: 1,
                    kind: BusKind::Slack,
                    p_load: 0.0,
                    q_load: 0.0,
                    gs: 0.0,
                    bs: 0.0,
                    v_setpoint: 1.0,
                    v_max: 1.1,
                    v_min: 0.9,
                },
                Bus {
                    id: 2,
                    kind: BusKind::Pq,
                    p_load: load_p,
                    q_load: load_q,
                    gs: 0.0,
                    bs: 0.0,
                    v_setpoint: 1.0,
                    v_max: 1.1,
                    v_min: 0.9,
                },
            ],
            branches: vec![Branch {
                from: 0,
                to: 1,
                r: 0.0,
                x: 0.1,
                b_charge: 0.0,
                tap: 1.0,
                shift: 0.0,
                s_max: 0.0,
            }],
            generators: vec![Generator {
                bus: 0,
                p_min: 0.0,
                p_max: 10.0,
                q_min: -10.0,
                q_max: 10.0,
                p_setpoint: 0.0,
                cost: CostCurve { c0: 0.0, c1: 1.0, c2: 0.0 },
            }],
        }
    }

    // Closed form for the two-bus case (slack 1∠0, line jx = j0.1, load 0.5):
    // P2 = 10·f2 ⇒ f2 = −0.05 exactly; Q2 = 0 ⇒ e2² − e2 + 0.0025 = 0,
    // e2 = (1 + √0.99)/2, and |V2|² = e2² + f2² = e2.
    const E2: f64 = 0.997_493_718_553_309_8;
    const F2: f64 = -0.05;

    #[test]
    fn two_bus_matches_closed_form() {
        let case = two_bus(0.5, 0.0);
        let sol = solve_ac(&case, 1e-10, 30).unwrap();
        let v = &sol.voltages;
        assert!(sol.max_mismatch < 1e-10);
        assert_relative_eq!(v.f[1], F2, epsilon = 1e-9);
        assert_relative_eq!(v.e[1], E2, epsilon = 1e-9);
        assert_relative_eq!(v.magnitude(1), E2.sqrt(), epsilon = 1e-9);
        // slack pinned
        assert_eq!(v.f[0], 0.0);
        assert_relative_eq!(v.e[0], 1.0);
    }

    #[test]
    fn two_bus_flows_match_closed_form() {
        let case = two_bus(0.5, 0.0);
        let sol = solve_ac(&case, 1e-12, 30).unwrap();
        let flows = compute_flows(&case, &sol.voltages);
        // lossless line: from-end active flow is exactly the load
        assert_relative_eq!(flows.p_flow[0], 0.5, epsilon = 1e-9);
        // reactive consumed by the series reactance: Q1 = 10(1 − e2)
        assert_relative_eq!(flows.q_flow[0], 10.0 * (1.0 - E2), epsilon = 1e-9);
        assert_relative_eq!(flows.p_inj[1], -0.5, epsilon = 1e-10);
        assert_relative_eq!(flows.q_inj[1], 0.0, epsilon = 1e-10);
    }

    #[test]
    fn unloaded_network_is_flat_and_flowless() {
        let case = two_bus(0.0, 0.0);
        let sol = solve_ac(&case, 1e-10, 30).unwrap();
        assert_relative_eq!(sol.voltages.magnitude(1), 1.0, epsilon = 1e-12);
        let flows = compute_flows(&case, &sol.voltages);
        assert!(flows.p_flow.amax() < 1e-12);
        assert!(flows.q_flow.amax() < 1e-12);
        assert!(flows.p_inj.amax() < 1e-12);
    }

    #[test]
    fn bundled_cases_converge_fast_from_flat_start() {
        for (name, max_expected) in [("case5", 10), ("case57", 10), ("case118", 10)] {
            let case = load_bundled(name).unwrap();
            let sol = solve_ac(&case, 1e-8, 30).unwrap();
            assert!(
                sol.iterations <= max_expected,
                "{name} took {} iterations",
                sol.iterations
            );
        }
    }

    #[test]
    fn active_losses_are_nonnegative() {
        for name in ["case5", "case57", "case118"] {
            let case = load_bundled(name).unwrap();
            let sol = solve_ac(&case, 1e-8, 30).unwrap();
            let flows = compute_flows(&case, &sol.voltages);
            let losses = flows.p_inj.sum();
            assert!(losses >= -1e-9, "{name}: negative losses {losses}");
        }
    }

    #[test]
    fn pv_injections_reproduce_schedules() {
        let case = load_bundled("case57").unwrap();
        let sol = solve_ac(&case, 1e-9, 30).unwrap();
        let flows = compute_flows(&case, &sol.voltages);
        for (i, bus) in case.buses.iter().enumerate() {
            if bus.kind == BusKind::Pv {
                let sched: f64 = case
                    .gens_at(i)
                    .iter()
                    .map(|&g| case.generators[g].p_setpoint)
                    .sum::<f64>()
                    - bus.p_load;
                assert_relative_eq!(flows.p_inj[i], sched, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn solver_is_deterministic() {
        let case = load_bundled("case118").unwrap();
        let a = solve_ac(&case, 1e-8, 30).unwrap();
        let b = solve_ac(&case, 1e-8, 30).unwrap();
        assert_eq!(a.voltages, b.voltages);
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let case = load_bundled("case5").unwrap();
        let ctx = NewtonContext::new(&case);
        let n = case.n_buses();
        // evaluate away from the flat start so no term is trivially zero
        let mut vm = DVector::from_element(n, 1.0);
        let mut va = DVector::zeros(n);
        for i in 0..n {
            vm[i] += 0.01 * (i as f64 + 1.0) / n as f64;
            va[i] -= 0.02 * i as f64 / n as f64;
        }
        let jac = ctx.jacobian(&vm, &va);
        let (na, nq) = (ctx.pvpq.len(), ctx.pq.len());
        let h = 1e-6;
        let mut fd = DMatrix::zeros(na + nq, na + nq);
        for c in 0..na + nq {
            let bump = |sign: f64| {
                let (mut vmp, mut vap) = (vm.clone(), va.clone());
                if c < na {
                    vap[ctx.pvpq[c]] += sign * h;
                } else {
                    vmp[ctx.pq[c - na]] += sign * h;
                }
                ctx.mismatch(&vmp, &vap)
            };
            let diff = (bump(1.0) - bump(-1.0)) / (2.0 * h);
            fd.set_column(c, &diff);
        }
        let scale = jac.amax();
        let worst = (&jac - &fd).amax() / scale;
        assert!(worst <= 1e-5, "finite-difference mismatch {worst:.2e}");
    }
}
