//! Independent reference implementations used by the integration suites:
//! a sliding-window least-squares harmonic fit and a Gauss-Seidel power
//! flow. Both share only the input data with the library code, never the
//! solution method.

use std::collections::BTreeMap;

use islekit::detector::Verdict;
use islekit::grid::NetworkModel;
use nalgebra::{Cholesky, DMatrix, DVector};
use num_complex::Complex64 as C64;

pub const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Least-squares amplitudes of the given frequency orders over a sample
/// window. Columns are cos/sin per order plus a DC term; the fit solves
/// the normal equations, which are well conditioned here because the
/// orders are distinct and the windows span multiple beats.
pub fn ls_amplitudes(samples: &[(f64, f64)], orders: &[f64], f1_hz: f64) -> Vec<f64> {
    let rows = samples.len();
    let cols = 2 * orders.len() + 1;
    assert!(rows >= cols, "window too short for the model: {rows} x {cols}");
    let mut a = DMatrix::<f64>::zeros(rows, cols);
    let mut z = DVector::<f64>::zeros(rows);
    for (r, &(t, v)) in samples.iter().enumerate() {
        for (c, &m) in orders.iter().enumerate() {
            let arg = TWO_PI * m * f1_hz * t;
            a[(r, 2 * c)] = arg.cos();
            a[(r, 2 * c + 1)] = arg.sin();
        }
        a[(r, cols - 1)] = 1.0;
        z[r] = v;
    }
    let ata = a.transpose() * &a;
    let atz = a.transpose() * z;
    let sol = Cholesky::new(ata)
        .expect("normal equations not positive definite")
        .solve(&atz);
    orders
        .iter()
        .enumerate()
        .map(|(c, _)| sol[2 * c].hypot(sol[2 * c + 1]))
        .collect()
}

/// Gauss-Seidel power flow over the energized section of `net`. Returns
/// (bus id, voltage) pairs in active-bus order. Converges on the maximum
/// complex power mismatch, so its fixed point is comparable with the
/// Newton solution to the same tolerance.
pub fn gauss_seidel(
    net: &NetworkModel,
    tol: f64,
    max_sweeps: usize,
) -> Result<Vec<(usize, C64)>, String> {
    let bus_ids = net.active_bus_ids();
    let n = bus_ids.len();
    let index: BTreeMap<usize, usize> = bus_ids.iter().copied().zip(0..).collect();
    let slack = index[&net.slack_bus()];

    let mut y = vec![C64::new(0.0, 0.0); n * n];
    for l in net.active_lines() {
        let ya = 1.0 / l.impedance_pu(&net.base);
        let (i, j) = (index[&l.from], index[&l.to]);
        y[i * n + i] += ya;
        y[j * n + j] += ya;
        y[i * n + j] -= ya;
        y[j * n + i] -= ya;
    }

    let mut s = vec![C64::new(0.0, 0.0); n];
    for b in &net.buses {
        if let Some(&i) = index.get(&b.id) {
            s[i] = b.injection_pu(&net.base);
        }
    }

    let mut v = vec![C64::new(1.0, 0.0); n];
    for sweep in 0..max_sweeps {
        for i in 0..n {
            if i == slack {
                continue;
            }
            let mut sum = C64::new(0.0, 0.0);
            for j in 0..n {
                if j != i {
                    sum += y[i * n + j] * v[j];
                }
            }
            v[i] = ((s[i] / v[i]).conj() - sum) / y[i * n + i];
        }
        let mut worst = 0.0f64;
        for i in 0..n {
            if i == slack {
                continue;
            }
            let mut inj = C64::new(0.0, 0.0);
            for j in 0..n {
                inj += y[i * n + j] * v[j];
            }
            let mismatch = v[i] * inj.conj() - s[i];
            worst = worst.max(mismatch.norm());
        }
        if worst < tol {
            return Ok(bus_ids.iter().copied().zip(v).collect());
        }
        let _ = sweep;
    }
    Err(format!("no convergence in {max_sweeps} sweeps"))
}

/// Reference decision fixtures: per case and event, a recorded
/// (A75, ARCV1, ARCV2) triple and the verdict the staged thresholds must
/// produce for it.
pub const DECISION_FIXTURES: [(&str, &str, f64, f64, f64, Verdict); 16] = [
    ("case1", "islanding", 172.64, 3.2215, 2.9716, Verdict::Islanding),
    ("case1", "three_phase_fault", 4.96, 13.6943, 0.0983, Verdict::NonIslanding),
    ("case1", "single_phase_fault", 0.03, 4.7750, 0.1180, Verdict::HarmonicRejected),
    ("case1", "load_decrease", 0.03, 1.1457, 0.0976, Verdict::HarmonicRejected),
    ("case2", "islanding", 45.43, 2.7285, 1.4558, Verdict::Islanding),
    ("case2", "three_phase_fault", 4.92, 14.5979, 0.0870, Verdict::FaultFiltered),
    ("case2", "single_phase_fault", 0.10, 5.5911, 0.2762, Verdict::HarmonicRejected),
    ("case2", "load_decrease", 0.15, 0.8069, 0.1693, Verdict::HarmonicRejected),
    ("case3", "islanding", 5.26, 1.8058, 1.0774, Verdict::Islanding),
    ("case3", "three_phase_fault", 6.06, 16.0325, 0.1141, Verdict::FaultFiltered),
    ("case3", "single_phase_fault", 0.07, 12.8253, 0.1277, Verdict::HarmonicRejected),
    ("case3", "load_decrease", 0.06, 0.3187, 0.0887, Verdict::HarmonicRejected),
    ("case4", "islanding", 23.6, 0.5561, 1.0569, Verdict::Islanding),
    ("case4", "three_phase_fault", 5.05, 15.7184, 0.0904, Verdict::FaultFiltered),
    ("case4", "single_phase_fault", 0.11, 7.6998, 0.2686, Verdict::HarmonicRejected),
    ("case4", "load_decrease", 0.13, 0.7422, 0.1566, Verdict::HarmonicRejected),
];
