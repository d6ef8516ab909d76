//! Shared oracles for integration tests: an exact transient law for
//! small continuous-time chains via generator enumeration plus
//! uniformization, a dense matrix exponential for linear drift checks,
//! and distribution-distance helpers.
//!
//! Everything here is deliberately independent of the crate under test:
//! callers hand in the transition rates as an explicit function of the
//! integer count vector, written out from the model's defining math, so
//! a law computed here never flows through the crate's rate compiler,
//! stochastic engine, or ODE integrator.

use std::collections::HashMap;

/// Exact finite chain built by breadth-first enumeration of the
/// reachable count vectors under a caller-supplied rate function. States
/// outside the supplied bound are merged into one absorbing overflow
/// state, whose mass bounds the enumeration error of any law computed
/// from this generator.
pub struct EnumeratedChain {
    /// Count vectors by state index; the overflow state is the last
    /// index and has no count vector.
    pub states: Vec<Vec<u64>>,
    pub index: HashMap<Vec<u64>, usize>,
    /// Outgoing transitions per state: (target, rate).
    pub transitions: Vec<Vec<(usize, f64)>>,
    pub overflow: usize,
}

/// Enumerates every state reachable from `init` under `rates`, which
/// maps a count vector to its outgoing `(next_counts, rate)` list.
/// States where `frozen` holds get no outgoing transitions (they absorb,
/// mirroring a simulator that stops there), and states failing
/// `in_bounds` are routed to the overflow state.
pub fn enumerate_chain(
    init: &[u64],
    rates: impl Fn(&[u64]) -> Vec<(Vec<u64>, f64)>,
    frozen: impl Fn(&[u64]) -> bool,
    in_bounds: impl Fn(&[u64]) -> bool,
) -> EnumeratedChain {
    assert!(in_bounds(init), "initial state must satisfy the bound");

    let mut states = vec![init.to_vec()];
    let mut index = HashMap::new();
    index.insert(init.to_vec(), 0usize);
    let mut transitions: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut frontier = 0usize;

    while frontier < states.len() {
        let counts = states[frontier].clone();
        let mut out = Vec::new();
        if !frozen(&counts) {
            for (next, rate) in rates(&counts) {
                assert!(rate.is_finite() && rate >= 0.0, "bad rate {rate} at {counts:?}");
                if rate == 0.0 {
                    continue;
                }
                let target = if in_bounds(&next) {
                    *index.entry(next.clone()).or_insert_with(|| {
                        states.push(next);
                        states.len() - 1
                    })
                } else {
                    usize::MAX // overflow, patched below
                };
                out.push((target, rate));
            }
        }
        transitions.push(out);
        frontier += 1;
    }

    let overflow = states.len();
    for row in &mut transitions {
        for t in row.iter_mut() {
            if t.0 == usize::MAX {
                t.0 = overflow;
            }
        }
    }
    transitions.push(Vec::new()); // overflow is absorbing
    EnumeratedChain { states, index, transitions, overflow }
}

impl EnumeratedChain {
    /// Transient distribution at time `t` started from `start`, by
    /// uniformization: p(t) = e^{-Λt} Σ_k (Λt)^k/k! · p₀Pᵏ with
    /// P = I + Q/Λ. The series stops once the remaining Poisson tail
    /// drops below `tail_tol`, which bounds the truncation error in
    /// total variation.
    pub fn transient_law(&self, start: usize, t: f64, tail_tol: f64) -> Vec<f64> {
        let n = self.transitions.len();
        let rate_out: Vec<f64> =
            self.transitions.iter().map(|row| row.iter().map(|&(_, r)| r).sum()).collect();
        let lambda = rate_out.iter().cloned().fold(0.0f64, f64::max) * 1.05 + 1e-9;

        let mut p = vec![0.0; n];
        p[start] = 1.0;
        let mut law = vec![0.0; n];

        // Poisson(Λt) weights, accumulated until the tail is negligible.
        let lt = lambda * t;
        let mut weight = (-lt).exp(); // k = 0 term
        let mut cum = weight;
        for (acc, mass) in law.iter_mut().zip(&p) {
            *acc += weight * mass;
        }
        let mut k = 1u32;
        while 1.0 - cum > tail_tol {
            // one step of p <- pP, with P = I + Q/Λ
            let mut next = vec![0.0; n];
            for (s, mass) in p.iter().enumerate() {
                if *mass == 0.0 {
                    continue;
                }
                next[s] += mass * (1.0 - rate_out[s] / lambda);
                for &(to, r) in &self.transitions[s] {
                    next[to] += mass * (r / lambda);
                }
            }
            p = next;
            weight *= lt / f64::from(k);
            cum += weight;
            for (acc, mass) in law.iter_mut().zip(&p) {
                *acc += weight * mass;
            }
            k += 1;
            assert!(k < 1_000_000, "uniformization series failed to converge");
        }
        law
    }
}

/// Total variation between an empirical histogram over state indices and
/// an exact law. Empirical mass on states the enumeration never reached
/// counts in full.
pub fn tv_hist_vs_law(hist: &HashMap<usize, u64>, law: &[f64], samples: u64) -> f64 {
    let mut tv = 0.0;
    for (s, &p) in law.iter().enumerate() {
        let emp = hist.get(&s).copied().unwrap_or(0) as f64 / samples as f64;
        tv += (emp - p).abs();
    }
    let known: u64 = hist.iter().filter(|(s, _)| **s < law.len()).map(|(_, c)| *c).sum();
    tv += (samples - known) as f64 / samples as f64;
    tv / 2.0
}

/// Dense matrix exponential action `e^{tA} x₀` by scaling and squaring
/// with a Taylor kernel; adequate for the small hand-built generators
/// used in tests. `a` is row-major: (d/dt x)_i = Σ_j a[i][j] x_j.
pub fn expm_times(a: &[Vec<f64>], x0: &[f64], t: f64) -> Vec<f64> {
    let n = x0.len();
    assert!(a.len() == n && a.iter().all(|row| row.len() == n));
    let norm: f64 = a
        .iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    let squarings = (norm * t.abs()).log2().ceil().max(0.0) as u32 + 1;
    let h = t / f64::from(1u32 << squarings);

    // dense e^{hA} by Taylor series; ||hA|| <= 1/2, so 24 terms land
    // well below f64 resolution
    let mut exp_h = vec![vec![0.0; n]; n];
    let mut term = vec![vec![0.0; n]; n];
    for i in 0..n {
        exp_h[i][i] = 1.0;
        term[i][i] = 1.0;
    }
    for k in 1..=24 {
        let mut next = vec![vec![0.0; n]; n];
        for i in 0..n {
            for l in 0..n {
                if term[i][l] == 0.0 {
                    continue;
                }
                let v = term[i][l] * h / f64::from(k);
                for j in 0..n {
                    next[i][j] += v * a[l][j];
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                exp_h[i][j] += next[i][j];
            }
        }
        term = next;
    }
    // square back up: e^{tA} = (e^{hA})^{2^s}
    for _ in 0..squarings {
        let mut sq = vec![vec![0.0; n]; n];
        for i in 0..n {
            for l in 0..n {
                if exp_h[i][l] == 0.0 {
                    continue;
                }
                let v = exp_h[i][l];
                for j in 0..n {
                    sq[i][j] += v * exp_h[l][j];
                }
            }
        }
        exp_h = sq;
    }
    (0..n).map(|i| (0..n).map(|j| exp_h[i][j] * x0[j]).sum()).collect()
}

#[allow(dead_code)]
pub fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}
