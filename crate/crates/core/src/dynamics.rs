//! Second-order Kuramoto dynamics on a network:
//!
//! ```text
//! φ̈_i = P_i − α φ̇_i − K Σ_j A_ij sin(φ_i − φ_j)
//! ```
//!
//! Trajectories are integrated until the synchronization condition has held
//! for a full stop window, or until the horizon.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fixed_point::FixedPoint;
use crate::graph::Graph;
use crate::integrator::{Dopri5, IntegrateError, IntegratorOptions, OdeSystem};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("invalid simulation parameters: {0}")]
    InvalidParams(String),
    #[error("node {node} out of range for {num_nodes} nodes")]
    NodeOutOfRange { node: usize, num_nodes: usize },
    #[error(transparent)]
    Integrate(#[from] IntegrateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    pub alpha: f64,
    pub coupling: f64,
    pub horizon: f64,
    pub sync_threshold: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Duration over which the synchronization condition must hold to stop early.
    pub stop_window: f64,
    /// Spacing of the dense-output samples used by the stop condition.
    pub sample_interval: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_step: Option<f64>,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            coupling: 9.0,
            horizon: 500.0,
            sync_threshold: 0.1,
            rel_tol: 1e-6,
            abs_tol: 1e-6,
            stop_window: 1.0,
            sample_interval: 0.1,
            initial_step: None,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let positive = [
            ("alpha", self.alpha),
            ("coupling", self.coupling),
            ("horizon", self.horizon),
            ("sync_threshold", self.sync_threshold),
            ("rel_tol", self.rel_tol),
            ("abs_tol", self.abs_tol),
            ("stop_window", self.stop_window),
            ("sample_interval", self.sample_interval),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DynamicsError::InvalidParams(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(h) = self.initial_step {
            if h.is_nan() || h <= 0.0 {
                return Err(DynamicsError::InvalidParams("initial_step must be positive".into()));
            }
        }
        Ok(())
    }

    fn integrator_options(&self) -> IntegratorOptions {
        IntegratorOptions {
            rel_tol: self.rel_tol,
            abs_tol: self.abs_tol,
            initial_step: self.initial_step,
            ..IntegratorOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub phases: Vec<f64>,
    pub freqs: Vec<f64>,
}

impl State {
    pub fn at_rest(phases: Vec<f64>) -> Self {
        let n = phases.len();
        Self {
            phases,
            freqs: vec![0.0; n],
        }
    }

    pub fn max_abs_freq(&self) -> f64 {
        self.freqs.iter().fold(0.0, |m, w| m.max(w.abs()))
    }

    fn pack(&self) -> Vec<f64> {
        let mut y = self.phases.clone();
        y.extend_from_slice(&self.freqs);
        y
    }

    fn unpack(y: &[f64]) -> Self {
        let n = y.len() / 2;
        Self {
            phases: y[..n].to_vec(),
            freqs: y[n..].to_vec(),
        }
    }
}

/// Phase offset (rad) and frequency offset (rad/s) applied to one node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub phase: f64,
    pub freq: f64,
}

impl Perturbation {
    pub const ZERO: Perturbation = Perturbation { phase: 0.0, freq: 0.0 };

    pub fn new(phase: f64, freq: f64) -> Self {
        Self { phase, freq }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialOutcome {
    pub perturbation: Perturbation,
    /// Max over nodes of |φ̇| at termination.
    pub max_final_abs_freq: f64,
    pub stable: bool,
    pub t_end: f64,
}

/// The network ODE with state layout `[φ_0..φ_{N-1}, φ̇_0..φ̇_{N-1}]`.
pub struct KuramotoSystem<'a> {
    edges: &'a [(usize, usize)],
    power: Vec<f64>,
    alpha: f64,
    coupling: f64,
}

impl<'a> KuramotoSystem<'a> {
    pub fn new(graph: &'a Graph, params: &SimParams) -> Self {
        Self {
            edges: &graph.edges,
            power: graph.power_f64(),
            alpha: params.alpha,
            coupling: params.coupling,
        }
    }
}

impl OdeSystem for KuramotoSystem<'_> {
    fn dim(&self) -> usize {
        2 * self.power.len()
    }

    fn rhs(&self, y: &[f64], dy: &mut [f64]) {
        let n = self.power.len();
        let (phases, freqs) = y.split_at(n);
        let (dphase, dfreq) = dy.split_at_mut(n);
        dphase.copy_from_slice(freqs);
        for i in 0..n {
            dfreq[i] = self.power[i] - self.alpha * freqs[i];
        }
        for &(a, b) in self.edges {
            let flow = self.coupling * (phases[a] - phases[b]).sin();
            dfreq[a] -= flow;
            dfreq[b] += flow;
        }
    }
}

/// Time derivative of `state`.
pub fn kuramoto_rhs(state: &State, graph: &Graph, params: &SimParams) -> State {
    let sys = KuramotoSystem::new(graph, params);
    let y = state.pack();
    let mut dy = vec![0.0; y.len()];
    sys.rhs(&y, &mut dy);
    State::unpack(&dy)
}

/// Integrates from `state0` until the windowed synchronization condition
/// holds or the horizon is reached. Returns the final state and time.
pub fn integrate(graph: &Graph, state0: &State, params: &SimParams) -> Result<(State, f64), DynamicsError> {
    params.validate()?;
    let n = graph.num_nodes;
    let sys = KuramotoSystem::new(graph, params);
    let mut y = state0.pack();
    debug_assert!(y.iter().all(|v| v.is_finite()));

    let dt = params.sample_interval;
    // Samples covering [t − window, t] inclusive.
    let needed = (params.stop_window / dt).round() as usize + 1;
    let mut run = usize::from(state0.max_abs_freq() <= params.sync_threshold);
    let mut next_k = 1usize;

    let mut solver = Dopri5::new(2 * n);
    let (t_end, _) = solver.integrate(&sys, 0.0, &mut y, params.horizon, &params.integrator_options(), |step| {
        let t_new = step.t_new();
        loop {
            let tau = next_k as f64 * dt;
            if tau > t_new + 1e-9 * t_new.max(1.0) {
                return None;
            }
            let tau = tau.min(t_new);
            next_k += 1;
            let max_freq = (n..2 * n).fold(0.0f64, |m, i| m.max(step.component(tau, i).abs()));
            if max_freq <= params.sync_threshold {
                run += 1;
            } else {
                run = 0;
            }
            if run >= needed && tau >= params.stop_window {
                return Some(tau);
            }
        }
    })?;
    Ok((State::unpack(&y), t_end))
}

/// Runs one perturbation experiment starting from the synchronous state.
pub fn basin_trial(
    graph: &Graph,
    fp: &FixedPoint,
    node: usize,
    perturbation: Perturbation,
    params: &SimParams,
) -> Result<TrialOutcome, DynamicsError> {
    if node >= graph.num_nodes {
        return Err(DynamicsError::NodeOutOfRange {
            node,
            num_nodes: graph.num_nodes,
        });
    }
    let mut state = State::at_rest(fp.phases.clone());
    state.phases[node] += perturbation.phase;
    state.freqs[node] = perturbation.freq;
    let (last, t_end) = integrate(graph, &state, params)?;
    let max_final_abs_freq = last.max_abs_freq();
    Ok(TrialOutcome {
        perturbation,
        max_final_abs_freq,
        stable: max_final_abs_freq <= params.sync_threshold,
        t_end,
    })
}
