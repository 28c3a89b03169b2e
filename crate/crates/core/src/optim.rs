//! Limited-memory BFGS with backtracking Armijo line search.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Residency {
    /// History kept in one contiguous ring buffer next to the iterate.
    Device,
    /// History kept as separately allocated host vectors.
    #[default]
    Host,
}

impl std::str::FromStr for Residency {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "device" => Ok(Residency::Device),
            "host" => Ok(Residency::Host),
            _ => Err(Error::Config(format!("unknown state residency {s:?} (device|host)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineSearch {
    /// Sufficient-decrease constant, `0 < c1 < 1`.
    pub c1: f64,
    /// Step multiplier after a rejected trial, `0 < shrink < 1`.
    pub shrink: f64,
    pub max_evals: usize,
}

impl Default for LineSearch {
    fn default() -> Self {
        LineSearch {
            c1: 1e-4,
            shrink: 0.5,
            max_evals: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LbfgsConfig {
    pub history_size: usize,
    pub max_iters: usize,
    pub line_search: LineSearch,
    /// Stop once `max |grad_i| <= grad_tol`.
    pub grad_tol: f64,
    pub residency: Residency,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            history_size: 10,
            max_iters: 100,
            line_search: LineSearch::default(),
            grad_tol: 1e-10,
            residency: Residency::Host,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        let ls = &self.line_search;
        if self.history_size == 0 {
            return Err(Error::Config("history_size must be at least 1".into()));
        }
        if !(ls.c1 > 0.0 && ls.c1 < 1.0) {
            return Err(Error::Config(format!(
                "line search c1 must be in (0, 1), got {}",
                ls.c1
            )));
        }
        if !(ls.shrink > 0.0 && ls.shrink < 1.0) {
            return Err(Error::Config(format!(
                "line search shrink must be in (0, 1), got {}",
                ls.shrink
            )));
        }
        if ls.max_evals == 0 {
            return Err(Error::Config("line search needs at least one evaluation".into()));
        }
        if self.grad_tol.is_nan() || self.grad_tol < 0.0 {
            return Err(Error::Config("grad_tol must be >= 0".into()));
        }
        Ok(())
    }
}

/// Storage for the curvature pairs. Index 0 is the oldest pair.
pub trait HistoryStore {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn s(&self, i: usize) -> &[f64];
    fn y(&self, i: usize) -> &[f64];
    fn rho(&self, i: usize) -> f64;
    /// Appends a pair, evicting the oldest one when full.
    fn push(&mut self, s: &[f64], y: &[f64], rho: f64);
    fn pop_oldest(&mut self);
}

pub struct HostHistory {
    cap: usize,
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
}

impl HostHistory {
    pub fn new(cap: usize) -> Self {
        HostHistory {
            cap,
            pairs: VecDeque::with_capacity(cap),
        }
    }
}

impl HistoryStore for HostHistory {
    fn len(&self) -> usize {
        self.pairs.len()
    }
    fn s(&self, i: usize) -> &[f64] {
        &self.pairs[i].0
    }
    fn y(&self, i: usize) -> &[f64] {
        &self.pairs[i].1
    }
    fn rho(&self, i: usize) -> f64 {
        self.pairs[i].2
    }
    fn push(&mut self, s: &[f64], y: &[f64], rho: f64) {
        if self.pairs.len() == self.cap {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s.to_vec(), y.to_vec(), rho));
    }
    fn pop_oldest(&mut self) {
        self.pairs.pop_front();
    }
}

/// Ring buffer over two preallocated `cap x n` slabs.
pub struct DeviceHistory {
    cap: usize,
    n: usize,
    s: Vec<f64>,
    y: Vec<f64>,
    rho: Vec<f64>,
    head: usize,
    len: usize,
}

impl DeviceHistory {
    pub fn new(cap: usize, n: usize) -> Self {
        DeviceHistory {
            cap,
            n,
            s: vec![0.0; cap * n],
            y: vec![0.0; cap * n],
            rho: vec![0.0; cap],
            head: 0,
            len: 0,
        }
    }

    fn slot(&self, i: usize) -> usize {
        (self.head + i) % self.cap
    }
}

impl HistoryStore for DeviceHistory {
    fn len(&self) -> usize {
        self.len
    }
    fn s(&self, i: usize) -> &[f64] {
        let k = self.slot(i);
        &self.s[k * self.n..(k + 1) * self.n]
    }
    fn y(&self, i: usize) -> &[f64] {
        let k = self.slot(i);
        &self.y[k * self.n..(k + 1) * self.n]
    }
    fn rho(&self, i: usize) -> f64 {
        self.rho[self.slot(i)]
    }
    fn push(&mut self, s: &[f64], y: &[f64], rho: f64) {
        if self.len == self.cap {
            self.pop_oldest();
        }
        let k = self.slot(self.len);
        self.s[k * self.n..(k + 1) * self.n].copy_from_slice(s);
        self.y[k * self.n..(k + 1) * self.n].copy_from_slice(y);
        self.rho[k] = rho;
        self.len += 1;
    }
    fn pop_oldest(&mut self) {
        if self.len > 0 {
            self.head = (self.head + 1) % self.cap;
            self.len -= 1;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// `-H grad` by the two-loop recursion, with `H0 = gamma I` and
/// `gamma = <s, y> / <y, y>` of the newest pair (1 when empty).
pub fn two_loop_direction(grad: &[f64], hist: &dyn HistoryStore) -> Vec<f64> {
    let m = hist.len();
    let mut q = grad.to_vec();
    let mut alpha = vec![0.0; m];
    for i in (0..m).rev() {
        alpha[i] = hist.rho(i) * dot(hist.s(i), &q);
        axpy(-alpha[i], hist.y(i), &mut q);
    }
    let gamma = if m == 0 {
        1.0
    } else {
        let (s, y) = (hist.s(m - 1), hist.y(m - 1));
        dot(s, y) / dot(y, y)
    };
    q.iter_mut().for_each(|v| *v *= gamma);
    for (i, &a) in alpha.iter().enumerate() {
        let beta = hist.rho(i) * dot(hist.y(i), &q);
        axpy(a - beta, hist.s(i), &mut q);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// One row of the optimisation trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterInfo {
    /// 1-based iteration number.
    pub iter: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub step: f64,
    /// Objective evaluations spent in this iteration's line search.
    pub evals: usize,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    MaxIters,
    GradTol,
}

#[derive(Clone, Debug)]
pub struct MinimizeResult {
    pub x: Vec<f64>,
    pub loss: f64,
    /// Loss before the first iteration.
    pub initial_loss: f64,
    pub trace: Vec<IterInfo>,
    pub stop: StopReason,
}

/// Minimises `f` from `x0`. `f` returns the loss and its gradient; the
/// callback sees every completed iteration and the current iterate.
pub fn minimize<F, C>(mut f: F, x0: Vec<f64>, cfg: &LbfgsConfig, mut callback: C) -> Result<MinimizeResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    C: FnMut(&IterInfo, &[f64]),
{
    cfg.validate()?;
    let n = x0.len();
    let mut hist: Box<dyn HistoryStore> = match cfg.residency {
        Residency::Host => Box::new(HostHistory::new(cfg.history_size)),
        Residency::Device => Box::new(DeviceHistory::new(cfg.history_size, n)),
    };
    let mut x = x0;
    let (mut loss, mut g) = f(&x)?;
    check_finite(loss, &g, 0, &x)?;
    let initial_loss = loss;
    let mut trace = Vec::new();
    let ls = cfg.line_search;

    for iter in 1..=cfg.max_iters {
        let gnorm = norm_inf(&g);
        if gnorm <= cfg.grad_tol {
            return Ok(MinimizeResult {
                x,
                loss,
                initial_loss,
                trace,
                stop: StopReason::GradTol,
            });
        }
        let mut d = two_loop_direction(&g, hist.as_ref());
        let mut slope = dot(&g, &d);
        if slope.is_nan() || slope >= 0.0 {
            while !hist.is_empty() {
                hist.pop_oldest();
            }
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }
        let mut t = if hist.is_empty() { 1.0 / gnorm } else { 1.0 };
        let mut accepted = None;
        let mut evals = 0;
        while evals < ls.max_evals {
            evals += 1;
            let xt: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + t * di).collect();
            let (lt, gt) = f(&xt)?;
            check_finite(lt, &gt, iter, &x)?;
            if lt <= loss + ls.c1 * t * slope {
                accepted = Some((xt, lt, gt));
                break;
            }
            t *= ls.shrink;
        }
        let info = match accepted {
            Some((xt, lt, gt)) => {
                let s: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                let (ns, ny) = (dot(&s, &s).sqrt(), dot(&y, &y).sqrt());
                if sy > 1e-10 * ns * ny {
                    hist.push(&s, &y, 1.0 / sy);
                }
                x = xt;
                loss = lt;
                g = gt;
                IterInfo {
                    iter,
                    loss,
                    grad_norm: norm_inf(&g),
                    step: t,
                    evals,
                    accepted: true,
                }
            }
            None => {
                hist.pop_oldest();
                IterInfo {
                    iter,
                    loss,
                    grad_norm: gnorm,
                    step: 0.0,
                    evals,
                    accepted: false,
                }
            }
        };
        callback(&info, &x);
        trace.push(info);
    }
    let stop = if norm_inf(&g) <= cfg.grad_tol {
        StopReason::GradTol
    } else {
        StopReason::MaxIters
    };
    Ok(MinimizeResult {
        x,
        loss,
        initial_loss,
        trace,
        stop,
    })
}

fn check_finite(loss: f64, g: &[f64], iter: usize, last_x: &[f64]) -> Result<()> {
    if loss.is_finite() && g.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            iter,
            last_x: last_x.to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn quadratic(a: &[f64]) -> impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)> + '_ {
        move |x: &[f64]| {
            let d: Vec<f64> = x.iter().zip(a).map(|(x, a)| x - a).collect();
            Ok((dot(&d, &d), d.iter().map(|v| 2.0 * v).collect()))
        }
    }

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let ga = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
        let gb = 200.0 * (b - a * a);
        Ok((f, vec![ga, gb]))
    }

    #[test]
    fn quadratic_converges_to_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..100).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let x0: Vec<f64> = (0..100).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let cfg = LbfgsConfig {
            max_iters: 30,
            grad_tol: 0.0,
            ..Default::default()
        };
        let r = minimize(quadratic(&a), x0, &cfg, |_, _| {}).unwrap();
        let err: f64 = r.x.iter().zip(&a).map(|(x, a)| (x - a).powi(2)).sum::<f64>().sqrt();
        assert!(err <= 1e-6, "error {err}");
    }

    #[test]
    fn rosenbrock_reaches_optimum() {
        let cfg = LbfgsConfig {
            max_iters: 200,
            grad_tol: 1e-12,
            ..Default::default()
        };
        let r = minimize(rosenbrock, vec![-1.2, 1.0], &cfg, |_, _| {}).unwrap();
        assert!(r.loss <= 1e-8, "loss {}", r.loss);
        assert!(r.trace.len() <= 200);
        for w in r.trace.windows(2) {
            assert!(w[1].loss <= w[0].loss);
        }
    }

    #[test]
    fn inconsistent_constant_objective_keeps_x0() {
        let x0 = vec![0.3, -0.7, 1.1];
        let f = |_: &[f64]| Ok((2.5, vec![1.0, -1.0, 0.5]));
        let cfg = LbfgsConfig {
            max_iters: 3,
            ..Default::default()
        };
        let r = minimize(f, x0.clone(), &cfg, |_, _| {}).unwrap();
        assert_eq!(r.x, x0);
        assert_eq!(r.trace.len(), 3);
        assert!(r.trace.iter().all(|i| i.loss == 2.5 && !i.accepted && i.evals == 20));
    }

    #[test]
    fn zero_gradient_stops_immediately() {
        let f = |_: &[f64]| Ok((1.0, vec![0.0; 4]));
        let r = minimize(f, vec![0.0; 4], &LbfgsConfig::default(), |_, _| {}).unwrap();
        assert_eq!(r.stop, StopReason::GradTol);
        assert!(r.trace.is_empty());
    }

    #[test]
    fn non_finite_loss_returns_last_finite_iterate() {
        let mut calls = 0;
        let f = |x: &[f64]| {
            calls += 1;
            let loss = if calls > 2 { f64::NAN } else { x[0] * x[0] };
            Ok((loss, vec![2.0 * x[0]]))
        };
        let cfg = LbfgsConfig {
            max_iters: 10,
            ..Default::default()
        };
        match minimize(f, vec![4.0], &cfg, |_, _| {}) {
            Err(Error::NonFinite { last_x, iter }) => {
                assert_eq!(iter, 2);
                // The first step from 4.0 has length 1/|g| * |g| = 1.
                assert_eq!(last_x, vec![3.0]);
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn empty_history_direction_is_negative_gradient() {
        let g = vec![1.0, -2.0, 0.5];
        assert_eq!(two_loop_direction(&g, &HostHistory::new(3)), vec![-1.0, 2.0, -0.5]);
    }

    #[test]
    fn single_unit_pair_hand_evaluation() {
        let mut h = HostHistory::new(3);
        h.push(&[1.0, 0.0], &[1.0, 0.0], 1.0);
        assert_eq!(two_loop_direction(&[1.0, 0.0], &h), vec![-1.0, 0.0]);
    }

    #[test]
    fn history_is_bounded_and_evicts_oldest() {
        for store in [
            Box::new(HostHistory::new(2)) as Box<dyn HistoryStore>,
            Box::new(DeviceHistory::new(2, 1)),
        ] {
            let mut h = store;
            for k in 0..5 {
                h.push(&[k as f64], &[k as f64 + 1.0], 1.0);
                assert!(h.len() <= 2);
            }
            assert_eq!((h.s(0)[0], h.s(1)[0]), (3.0, 4.0));
            h.pop_oldest();
            assert_eq!(h.s(0)[0], 4.0);
        }
    }

    #[test]
    fn host_and_device_residency_give_identical_iterates() {
        let run = |residency| {
            let cfg = LbfgsConfig {
                max_iters: 60,
                history_size: 4,
                residency,
                grad_tol: 0.0,
                ..Default::default()
            };
            let mut xs = Vec::new();
            minimize(rosenbrock, vec![-1.2, 1.0], &cfg, |_, x| xs.push(x.to_vec())).unwrap();
            xs
        };
        let a = run(Residency::Host);
        let b = run(Residency::Device);
        assert_eq!(a.len(), b.len());
        for (p, q) in a.iter().zip(&b) {
            assert_eq!(
                p.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                q.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let bad = LbfgsConfig {
            history_size: 0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = LbfgsConfig {
            line_search: LineSearch {
                c1: 1.0,
                ..Default::default()
            },
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn two_loop_direction_is_descent(seed in 0u64..500, m in 1usize..6, n in 2usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut h = HostHistory::new(m);
            for _ in 0..m {
                // Pairs from a random SPD quadratic keep <s, y> > 0.
                let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let y: Vec<f64> = s.iter().map(|v| v * rng.gen_range(0.5..2.0) ).collect();
                let sy = dot(&s, &y);
                prop_assume!(sy > 1e-8);
                h.push(&s, &y, 1.0 / sy);
            }
            let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            prop_assume!(norm_inf(&g) > 1e-6);
            let d = two_loop_direction(&g, &h);
            prop_assert!(dot(&d, &g) < 0.0);
        }
    }
}
