//! Per-unit model of the nine-bus distribution feeder and a Newton-Raphson
//! power-flow solver.
//!
//! The feeder runs from bus 3 to bus 11 with three DGs (buses 8, 10, 11) and
//! a capacitor bank at bus 6. The utility grid is a slack source at bus 1,
//! tied to bus 3 through a stiff breaker branch; opening the breaker islands
//! the feeder and bus 8 (the largest DG) takes over as the angle reference.
//! All solver arithmetic is in per-unit on the feeder bases.

use num_complex::Complex64 as C64;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("power flow did not converge after {iterations} iterations (max mismatch {mismatch:.3e} pu)")]
    NonConvergent { iterations: usize, mismatch: f64 },
    #[error("unknown bus {0}")]
    UnknownBus(usize),
    #[error("bus {0} has no generation to shift")]
    NoGeneration(usize),
    #[error("network file, line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Feeder bases. Line voltage in volts, apparent power in VA.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseQuantities {
    pub v_base: f64,
    pub s_base: f64,
    pub f_base: f64,
}

impl Default for BaseQuantities {
    fn default() -> Self {
        Self {
            v_base: 12.7e3,
            s_base: 10.0e6,
            f_base: 60.0,
        }
    }
}

impl BaseQuantities {
    pub fn validate(&self) -> Result<(), GridError> {
        if !(self.v_base > 0.0 && self.s_base > 0.0 && self.f_base > 0.0) {
            return Err(GridError::InvalidNetwork(format!(
                "bases must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn z_base(&self) -> f64 {
        self.v_base * self.v_base / self.s_base
    }

    pub fn s_base_mva(&self) -> f64 {
        self.s_base / 1e6
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bus {
    pub id: usize,
    pub gen_p_mw: f64,
    pub gen_q_mvar: f64,
    pub load_p_mw: f64,
    pub load_q_mvar: f64,
}

impl Bus {
    /// Net scheduled injection in per-unit.
    pub fn injection_pu(&self, base: &BaseQuantities) -> C64 {
        let s = base.s_base_mva();
        C64::new(
            (self.gen_p_mw - self.load_p_mw) / s,
            (self.gen_q_mvar - self.load_q_mvar) / s,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub r_ohm: f64,
    pub l_mh: f64,
}

impl Line {
    pub fn impedance_ohm(&self, f_base: f64) -> C64 {
        let x = 2.0 * std::f64::consts::PI * f_base * self.l_mh * 1e-3;
        C64::new(self.r_ohm, x)
    }

    pub fn impedance_pu(&self, base: &BaseQuantities) -> C64 {
        self.impedance_ohm(base.f_base) / base.z_base()
    }

    pub fn to_per_unit(&self, base: &BaseQuantities) -> (f64, f64) {
        let z = self.impedance_pu(base);
        (z.re, z.im)
    }

    pub fn from_per_unit(
        from: usize,
        to: usize,
        r_pu: f64,
        x_pu: f64,
        base: &BaseQuantities,
    ) -> Self {
        let zb = base.z_base();
        let l_mh = x_pu * zb / (2.0 * std::f64::consts::PI * base.f_base) * 1e3;
        Self {
            from,
            to,
            r_ohm: r_pu * zb,
            l_mh,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub base: BaseQuantities,
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub breaker_closed: bool,
    /// Utility source bus; slack while the breaker is closed.
    pub grid_bus: usize,
    /// Angle-reference bus when islanded.
    pub islanded_slack: usize,
}

/// The built-in nine-bus feeder. Bus 1 is the utility source behind the
/// breaker branch (1, 3); buses 3 to 11 form the feeder.
pub fn network_from_tables() -> NetworkModel {
    let bus = |id, gp, gq, lp, lq| Bus {
        id,
        gen_p_mw: gp,
        gen_q_mvar: gq,
        load_p_mw: lp,
        load_q_mvar: lq,
    };
    let line = |from, to, r_ohm, l_mh| Line {
        from,
        to,
        r_ohm,
        l_mh,
    };
    NetworkModel {
        base: BaseQuantities::default(),
        buses: vec![
            bus(1, 0.0, 0.0, 0.0, 0.0),
            bus(3, 0.0, 0.0, 1.5, 0.0),
            bus(4, 0.0, 0.0, 5.3, 0.0),
            bus(5, 0.0, 0.0, 1.0, 0.0),
            bus(6, 0.0, 5.0, 0.7, 0.0),
            bus(7, 0.0, 0.0, 5.0, 4.0),
            bus(8, 6.0, 0.0, 0.0, 0.0),
            bus(9, 0.0, 0.0, 2.0, 0.0),
            bus(10, 1.5, 0.0, 0.0, 0.0),
            bus(11, 5.0, 0.0, 0.0, 0.0),
        ],
        lines: vec![
            // breaker branch: stiff tie between the grid source and bus 3
            line(1, 3, 0.01, 0.01),
            line(3, 4, 1.3825, 2.62),
            line(4, 5, 0.18825, 0.262),
            line(5, 6, 0.11295, 0.1572),
            line(6, 7, 0.26355, 0.3668),
            line(7, 8, 0.09036, 0.12576),
            line(7, 9, 1.09185, 1.5196),
            line(9, 10, 0.33885, 0.4716),
            line(10, 11, 0.3765, 0.524),
        ],
        breaker_closed: true,
        grid_bus: 1,
        islanded_slack: 8,
    }
}

impl NetworkModel {
    pub fn bus(&self, id: usize) -> Option<&Bus> {
        self.buses.iter().find(|b| b.id == id)
    }

    pub fn bus_mut(&mut self, id: usize) -> Option<&mut Bus> {
        self.buses.iter_mut().find(|b| b.id == id)
    }

    /// Buses energized under the current breaker state, ascending by id.
    /// The grid bus (and the breaker branch) drop out when islanded.
    pub fn active_bus_ids(&self) -> Vec<usize> {
        self.buses
            .iter()
            .map(|b| b.id)
            .filter(|&id| self.breaker_closed || id != self.grid_bus)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn active_lines(&self) -> Vec<&Line> {
        self.lines
            .iter()
            .filter(|l| {
                self.breaker_closed || (l.from != self.grid_bus && l.to != self.grid_bus)
            })
            .collect()
    }

    pub fn slack_bus(&self) -> usize {
        if self.breaker_closed {
            self.grid_bus
        } else {
            self.islanded_slack
        }
    }

    pub fn set_breaker(&mut self, closed: bool) {
        self.breaker_closed = closed;
    }

    /// Rescale a DG's active power to `fraction` of its current output.
    pub fn scale_dg(&mut self, bus_id: usize, fraction: f64) -> Result<(), GridError> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(GridError::InvalidNetwork(format!(
                "shift fraction must be in (0, 1], got {fraction}"
            )));
        }
        let bus = self.bus_mut(bus_id).ok_or(GridError::UnknownBus(bus_id))?;
        if bus.gen_p_mw <= 0.0 {
            return Err(GridError::NoGeneration(bus_id));
        }
        bus.gen_p_mw *= fraction;
        Ok(())
    }

    /// Rescale a bus load (both P and Q) to `fraction` of its current value.
    pub fn scale_load(&mut self, bus_id: usize, fraction: f64) -> Result<(), GridError> {
        if fraction < 0.0 {
            return Err(GridError::InvalidNetwork(format!(
                "load fraction must be non-negative, got {fraction}"
            )));
        }
        let bus = self.bus_mut(bus_id).ok_or(GridError::UnknownBus(bus_id))?;
        if bus.load_p_mw == 0.0 && bus.load_q_mvar == 0.0 {
            return Err(GridError::InvalidNetwork(format!(
                "bus {bus_id} has no load to scale"
            )));
        }
        bus.load_p_mw *= fraction;
        bus.load_q_mvar *= fraction;
        Ok(())
    }

    pub fn set_load(&mut self, bus_id: usize, p_mw: f64, q_mvar: f64) -> Result<(), GridError> {
        let bus = self.bus_mut(bus_id).ok_or(GridError::UnknownBus(bus_id))?;
        bus.load_p_mw = p_mw;
        bus.load_q_mvar = q_mvar;
        Ok(())
    }

    pub fn total_load_mw(&self) -> f64 {
        self.buses.iter().map(|b| b.load_p_mw).sum()
    }

    pub fn total_gen_mw(&self) -> f64 {
        self.buses.iter().map(|b| b.gen_p_mw).sum()
    }

    /// Active-power deficiency of the islanded feeder in per-unit: scheduled
    /// load minus scheduled generation over the active buses, ignoring
    /// losses. Positive means the island is under-generated.
    pub fn island_deficiency_pu(&self) -> C64 {
        let s = self.base.s_base_mva();
        let mut d = C64::new(0.0, 0.0);
        for b in &self.buses {
            if b.id == self.grid_bus {
                continue;
            }
            d += C64::new(
                (b.load_p_mw - b.gen_p_mw) / s,
                (b.load_q_mvar - b.gen_q_mvar) / s,
            );
        }
        d
    }

    pub fn validate(&self) -> Result<(), GridError> {
        self.base.validate()?;
        let mut seen = BTreeSet::new();
        for b in &self.buses {
            if !seen.insert(b.id) {
                return Err(GridError::InvalidNetwork(format!("duplicate bus {}", b.id)));
            }
            if b.load_p_mw < 0.0 || b.gen_p_mw < 0.0 {
                return Err(GridError::InvalidNetwork(format!(
                    "bus {} has negative P figures",
                    b.id
                )));
            }
        }
        for l in &self.lines {
            if !(l.r_ohm > 0.0 && l.l_mh > 0.0) {
                return Err(GridError::InvalidNetwork(format!(
                    "line ({}, {}) parameters must be positive",
                    l.from, l.to
                )));
            }
            for end in [l.from, l.to] {
                if !seen.contains(&end) {
                    return Err(GridError::InvalidNetwork(format!(
                        "line ({}, {}) references undefined bus {end}",
                        l.from, l.to
                    )));
                }
            }
            if l.from == l.to {
                return Err(GridError::InvalidNetwork(format!(
                    "line ({}, {}) is a self-loop",
                    l.from, l.to
                )));
            }
        }
        if !seen.contains(&self.grid_bus) {
            return Err(GridError::UnknownBus(self.grid_bus));
        }
        if !seen.contains(&self.islanded_slack) {
            return Err(GridError::UnknownBus(self.islanded_slack));
        }
        if self.islanded_slack == self.grid_bus {
            return Err(GridError::InvalidNetwork(
                "islanded slack cannot be the grid bus".into(),
            ));
        }
        // the energized portion must be one connected component
        let active = self.active_bus_ids();
        let mut adj: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for l in self.active_lines() {
            adj.entry(l.from).or_default().push(l.to);
            adj.entry(l.to).or_default().push(l.from);
        }
        let mut visited = BTreeSet::new();
        let mut queue = VecDeque::from([self.slack_bus()]);
        while let Some(b) = queue.pop_front() {
            if visited.insert(b) {
                if let Some(next) = adj.get(&b) {
                    queue.extend(next);
                }
            }
        }
        if visited.len() != active.len() {
            let missing: Vec<_> = active.iter().filter(|b| !visited.contains(b)).collect();
            return Err(GridError::InvalidNetwork(format!(
                "network is not connected; unreachable buses {missing:?}"
            )));
        }
        Ok(())
    }

    /// Serialize to the plain-text network format.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[base]");
        let _ = writeln!(s, "v_base_kv {}", self.base.v_base / 1e3);
        let _ = writeln!(s, "s_base_mva {}", self.base.s_base / 1e6);
        let _ = writeln!(s, "f_base_hz {}", self.base.f_base);
        let _ = writeln!(s);
        let _ = writeln!(s, "[buses]");
        let _ = writeln!(s, "# bus  PG_MW  QG_Mvar  PL_MW  QL_Mvar");
        for b in &self.buses {
            let _ = writeln!(
                s,
                "{} {} {} {} {}",
                b.id, b.gen_p_mw, b.gen_q_mvar, b.load_p_mw, b.load_q_mvar
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "[lines]");
        let _ = writeln!(s, "# from  to  R_ohm  L_mH");
        for l in &self.lines {
            let _ = writeln!(s, "{} {} {} {}", l.from, l.to, l.r_ohm, l.l_mh);
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "[topology]");
        let _ = writeln!(s, "grid_bus {}", self.grid_bus);
        let _ = writeln!(s, "islanded_slack {}", self.islanded_slack);
        let _ = writeln!(
            s,
            "breaker {}",
            if self.breaker_closed { "closed" } else { "open" }
        );
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self, GridError> {
        enum Section {
            None,
            Base,
            Buses,
            Lines,
            Topology,
        }
        let mut section = Section::None;
        let mut net = NetworkModel {
            base: BaseQuantities::default(),
            buses: Vec::new(),
            lines: Vec::new(),
            breaker_closed: true,
            grid_bus: 1,
            islanded_slack: 8,
        };
        let err = |line: usize, message: String| GridError::Parse { line, message };
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = match name {
                    "base" => Section::Base,
                    "buses" => Section::Buses,
                    "lines" => Section::Lines,
                    "topology" => Section::Topology,
                    other => return Err(err(lineno, format!("unknown section [{other}]"))),
                };
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| -> Result<f64, GridError> {
                s.parse()
                    .map_err(|_| err(lineno, format!("expected a number, got {s:?}")))
            };
            let int = |s: &str| -> Result<usize, GridError> {
                s.parse()
                    .map_err(|_| err(lineno, format!("expected a bus id, got {s:?}")))
            };
            match section {
                Section::None => {
                    return Err(err(lineno, "data before any [section] header".into()))
                }
                Section::Base => {
                    if fields.len() != 2 {
                        return Err(err(lineno, "base entries are `key value`".into()));
                    }
                    match fields[0] {
                        "v_base_kv" => net.base.v_base = num(fields[1])? * 1e3,
                        "s_base_mva" => net.base.s_base = num(fields[1])? * 1e6,
                        "f_base_hz" => net.base.f_base = num(fields[1])?,
                        other => return Err(err(lineno, format!("unknown base key {other:?}"))),
                    }
                }
                Section::Buses => {
                    if fields.len() != 5 {
                        return Err(err(
                            lineno,
                            "bus rows are `bus PG_MW QG_Mvar PL_MW QL_Mvar`".into(),
                        ));
                    }
                    net.buses.push(Bus {
                        id: int(fields[0])?,
                        gen_p_mw: num(fields[1])?,
                        gen_q_mvar: num(fields[2])?,
                        load_p_mw: num(fields[3])?,
                        load_q_mvar: num(fields[4])?,
                    });
                }
                Section::Lines => {
                    if fields.len() != 4 {
                        return Err(err(lineno, "line rows are `from to R_ohm L_mH`".into()));
                    }
                    net.lines.push(Line {
                        from: int(fields[0])?,
                        to: int(fields[1])?,
                        r_ohm: num(fields[2])?,
                        l_mh: num(fields[3])?,
                    });
                }
                Section::Topology => {
                    if fields.len() != 2 {
                        return Err(err(lineno, "topology entries are `key value`".into()));
                    }
                    match fields[0] {
                        "grid_bus" => net.grid_bus = int(fields[1])?,
                        "islanded_slack" => net.islanded_slack = int(fields[1])?,
                        "breaker" => {
                            net.breaker_closed = match fields[1] {
                                "closed" => true,
                                "open" => false,
                                other => {
                                    return Err(err(
                                        lineno,
                                        format!("breaker must be open or closed, got {other:?}"),
                                    ))
                                }
                            }
                        }
                        other => {
                            return Err(err(lineno, format!("unknown topology key {other:?}")))
                        }
                    }
                }
            }
        }
        net.validate()?;
        Ok(net)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GridError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_file_string(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GridError> {
        Ok(std::fs::write(path, self.to_file_string())?)
    }
}

/// Converged power-flow state on the active buses.
#[derive(Debug, Clone)]
pub struct PowerFlowSolution {
    pub bus_ids: Vec<usize>,
    /// Per-unit voltage phasors aligned with `bus_ids`.
    pub v: Vec<C64>,
    pub iterations: usize,
    pub max_mismatch: f64,
    pub slack_bus: usize,
    /// Complex power the slack bus injects, in pu.
    pub slack_injection: C64,
    /// Series losses summed over energized lines, in pu.
    pub total_losses: C64,
}

impl PowerFlowSolution {
    pub fn voltage(&self, bus_id: usize) -> Option<C64> {
        let idx = self.bus_ids.iter().position(|&b| b == bus_id)?;
        Some(self.v[idx])
    }
}

const MAX_ITERATIONS: usize = 50;
const TOLERANCE: f64 = 1e-8;

/// Solve the steady state of `net` by Newton-Raphson in polar form. The
/// slack bus is held at 1.0 per unit, zero angle; every other bus is a PQ
/// node with its scheduled net injection.
pub fn solve_power_flow(net: &NetworkModel) -> Result<PowerFlowSolution, GridError> {
    net.validate()?;
    let bus_ids = net.active_bus_ids();
    let n = bus_ids.len();
    let index: BTreeMap<usize, usize> = bus_ids.iter().copied().zip(0..).collect();
    let slack_id = net.slack_bus();
    let slack = index[&slack_id];

    // nodal admittance matrix
    let mut y = vec![C64::new(0.0, 0.0); n * n];
    for l in net.active_lines() {
        let ya = 1.0 / l.impedance_pu(&net.base);
        let (i, j) = (index[&l.from], index[&l.to]);
        y[i * n + i] += ya;
        y[j * n + j] += ya;
        y[i * n + j] -= ya;
        y[j * n + i] -= ya;
    }

    // scheduled injections; slack entry unused
    let mut s_spec = vec![C64::new(0.0, 0.0); n];
    for b in &net.buses {
        if let Some(&i) = index.get(&b.id) {
            s_spec[i] = b.injection_pu(&net.base);
        }
    }

    // state: polar voltages, flat start
    let mut vm = vec![1.0f64; n];
    let mut th = vec![0.0f64; n];

    // PQ unknowns, mapped around the slack
    let pq: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let m = pq.len();

    let calc_power = |vm: &[f64], th: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let mut p = vec![0.0; n];
        let mut q = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                let g = y[i * n + j].re;
                let b = y[i * n + j].im;
                let tij = th[i] - th[j];
                p[i] += vm[i] * vm[j] * (g * tij.cos() + b * tij.sin());
                q[i] += vm[i] * vm[j] * (g * tij.sin() - b * tij.cos());
            }
        }
        (p, q)
    };

    let mut iterations = 0;
    let mut max_mismatch;
    loop {
        let (p, q) = calc_power(&vm, &th);
        let mut rhs = nalgebra::DVector::<f64>::zeros(2 * m);
        for (k, &i) in pq.iter().enumerate() {
            rhs[k] = s_spec[i].re - p[i];
            rhs[m + k] = s_spec[i].im - q[i];
        }
        max_mismatch = rhs.amax();
        if max_mismatch < TOLERANCE {
            break;
        }
        if iterations >= MAX_ITERATIONS {
            return Err(GridError::NonConvergent {
                iterations,
                mismatch: max_mismatch,
            });
        }

        let mut jac = nalgebra::DMatrix::<f64>::zeros(2 * m, 2 * m);
        for (r, &i) in pq.iter().enumerate() {
            let gii = y[i * n + i].re;
            let bii = y[i * n + i].im;
            for (c, &j) in pq.iter().enumerate() {
                if i == j {
                    jac[(r, c)] = -q[i] - bii * vm[i] * vm[i];
                    jac[(r, m + c)] = p[i] / vm[i] + gii * vm[i];
                    jac[(m + r, c)] = p[i] - gii * vm[i] * vm[i];
                    jac[(m + r, m + c)] = q[i] / vm[i] - bii * vm[i];
                } else {
                    let g = y[i * n + j].re;
                    let b = y[i * n + j].im;
                    let tij = th[i] - th[j];
                    let dp_dth = vm[i] * vm[j] * (g * tij.sin() - b * tij.cos());
                    let dp_dv = vm[i] * (g * tij.cos() + b * tij.sin());
                    jac[(r, c)] = dp_dth;
                    jac[(r, m + c)] = dp_dv;
                    jac[(m + r, c)] = -vm[j] * dp_dv;
                    jac[(m + r, m + c)] = dp_dth / vm[j];
                }
            }
        }
        let delta = jac
            .lu()
            .solve(&rhs)
            .ok_or_else(|| GridError::InvalidNetwork("singular power-flow Jacobian".into()))?;
        for (k, &i) in pq.iter().enumerate() {
            th[i] += delta[k];
            vm[i] += delta[m + k];
        }
        iterations += 1;
    }

    let v: Vec<C64> = (0..n).map(|i| C64::from_polar(vm[i], th[i])).collect();

    // slack injection from the solved field
    let mut i_slack = C64::new(0.0, 0.0);
    for j in 0..n {
        i_slack += y[slack * n + j] * v[j];
    }
    let slack_injection = v[slack] * i_slack.conj();

    // series losses from branch currents
    let mut total_losses = C64::new(0.0, 0.0);
    for l in net.active_lines() {
        let z = l.impedance_pu(&net.base);
        let (i, j) = (index[&l.from], index[&l.to]);
        let current = (v[i] - v[j]) / z;
        total_losses += z * current.norm_sqr();
    }

    Ok(PowerFlowSolution {
        bus_ids,
        v,
        iterations,
        max_mismatch,
        slack_bus: slack_id,
        slack_injection,
        total_losses,
    })
}
