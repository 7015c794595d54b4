//! Explicit adaptive Runge–Kutta integration with the Dormand–Prince 5(4)
//! pair, a PI step-size controller and fourth-order dense output.

use thiserror::Error;

/// Autonomous first-order system `y' = f(y)`.
pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn rhs(&self, y: &[f64], dy: &mut [f64]);
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntegrateError {
    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepSizeUnderflow { t: f64, h: f64 },
    #[error("step limit of {steps} reached at t = {t}")]
    StepLimit { t: f64, steps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Starting step; chosen automatically when `None`.
    pub initial_step: Option<f64>,
    pub max_step: f64,
    pub max_steps: usize,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-6,
            abs_tol: 1e-6,
            initial_step: None,
            max_step: f64::INFINITY,
            max_steps: 10_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IntegrationStats {
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
}

// Dormand–Prince tableau. The system is autonomous, so the nodes c_i are unused.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

// PI controller constants.
const SAFETY: f64 = 0.9;
const BETA: f64 = 0.04;
const EXPO1: f64 = 0.2 - BETA * 0.75;
const MAX_GROWTH: f64 = 10.0;
const MAX_SHRINK: f64 = 5.0;

/// Interpolant over one accepted step `[t_old, t_old + h]`.
pub struct DenseStep<'a> {
    pub t_old: f64,
    pub h: f64,
    rcont: &'a [Vec<f64>; 5],
}

impl DenseStep<'_> {
    pub fn t_new(&self) -> f64 {
        self.t_old + self.h
    }

    pub fn interpolate(&self, t: f64, out: &mut [f64]) {
        let theta = (t - self.t_old) / self.h;
        let theta1 = 1.0 - theta;
        let [r1, r2, r3, r4, r5] = self.rcont;
        for i in 0..out.len() {
            out[i] = r1[i] + theta * (r2[i] + theta1 * (r3[i] + theta * (r4[i] + theta1 * r5[i])));
        }
    }

    /// Interpolates a single component.
    pub fn component(&self, t: f64, i: usize) -> f64 {
        let theta = (t - self.t_old) / self.h;
        let theta1 = 1.0 - theta;
        let [r1, r2, r3, r4, r5] = self.rcont;
        r1[i] + theta * (r2[i] + theta1 * (r3[i] + theta * (r4[i] + theta1 * r5[i])))
    }
}

/// Reusable Dormand–Prince workspace.
pub struct Dopri5 {
    k: [Vec<f64>; 7],
    ytmp: Vec<f64>,
    ynew: Vec<f64>,
    rcont: [Vec<f64>; 5],
}

impl Dopri5 {
    pub fn new(dim: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![0.0; dim]),
            ytmp: vec![0.0; dim],
            ynew: vec![0.0; dim],
            rcont: std::array::from_fn(|_| vec![0.0; dim]),
        }
    }

    fn initial_step<S: OdeSystem>(&mut self, sys: &S, y: &[f64], f0: &[f64], opts: &IntegratorOptions) -> f64 {
        let n = y.len() as f64;
        let sk = |yi: f64| opts.abs_tol + opts.rel_tol * yi.abs();
        let rms = |it: &mut dyn Iterator<Item = f64>| (it.map(|v| v * v).sum::<f64>() / n).sqrt();
        let d0 = rms(&mut y.iter().map(|&yi| yi / sk(yi)));
        let d1 = rms(&mut y.iter().zip(f0).map(|(&yi, &fi)| fi / sk(yi)));
        let mut h0 = if d0 < 1e-10 || d1 < 1e-10 { 1e-6 } else { 0.01 * d0 / d1 };
        h0 = h0.min(opts.max_step);
        for i in 0..y.len() {
            self.ytmp[i] = y[i] + h0 * f0[i];
        }
        sys.rhs(&self.ytmp, &mut self.k[1]);
        let d2 = rms(&mut y
            .iter()
            .zip(f0.iter().zip(&self.k[1]))
            .map(|(&yi, (&a, &b))| (b - a) / sk(yi)))
            / h0;
        let dm = d1.max(d2);
        let h1 = if dm <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / dm).powf(0.2)
        };
        (100.0 * h0).min(h1).min(opts.max_step)
    }

    /// Integrates `y` in place from `t0` towards `t_end`.
    ///
    /// After every accepted step the observer sees the step interpolant. If it
    /// returns `Some(t_stop)` (with `t_stop` inside the step), integration ends
    /// there and `y` holds the interpolated state. Returns the final time.
    pub fn integrate<S, F>(
        &mut self,
        sys: &S,
        t0: f64,
        y: &mut [f64],
        t_end: f64,
        opts: &IntegratorOptions,
        mut observer: F,
    ) -> Result<(f64, IntegrationStats), IntegrateError>
    where
        S: OdeSystem,
        F: FnMut(&DenseStep) -> Option<f64>,
    {
        let dim = y.len();
        debug_assert_eq!(dim, sys.dim());
        let mut stats = IntegrationStats::default();
        let mut t = t0;
        sys.rhs(y, &mut self.k[0]);
        stats.rhs_evals += 1;
        let f0 = self.k[0].clone();
        let mut h = match opts.initial_step {
            Some(h) => h.min(opts.max_step),
            None => {
                stats.rhs_evals += 1;
                self.initial_step(sys, y, &f0, opts)
            }
        };
        let mut fac_old = 1e-4f64;
        let mut last_rejected = false;

        while t < t_end {
            if stats.accepted + stats.rejected >= opts.max_steps {
                return Err(IntegrateError::StepLimit {
                    t,
                    steps: opts.max_steps,
                });
            }
            if h <= 16.0 * f64::EPSILON * t.abs().max(1.0) {
                return Err(IntegrateError::StepSizeUnderflow { t, h });
            }
            let last = t + 1.01 * h >= t_end;
            if last {
                h = t_end - t;
            }

            self.stages(sys, y, h);
            stats.rhs_evals += 6;

            let [k1, _, k3, k4, k5, k6, k7] = &self.k;
            let mut err = 0.0f64;
            for i in 0..dim {
                let e = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
                let sc = opts.abs_tol + opts.rel_tol * y[i].abs().max(self.ynew[i].abs());
                err = err.max((e / sc).abs());
            }
            if !err.is_finite() {
                err = f64::INFINITY;
            }

            let fac11 = err.powf(EXPO1);
            if err <= 1.0 {
                let fac = (fac11 / fac_old.powf(BETA) / SAFETY).clamp(1.0 / MAX_GROWTH, MAX_SHRINK);
                let mut h_new = h / fac;
                fac_old = err.max(1e-4);
                if last_rejected {
                    h_new = h_new.min(h);
                }
                last_rejected = false;
                stats.accepted += 1;

                self.dense_coefficients(y, h);
                let t_old = t;
                t = if last { t_end } else { t + h };
                let step = DenseStep {
                    t_old,
                    h,
                    rcont: &self.rcont,
                };
                if let Some(t_stop) = observer(&step) {
                    step.interpolate(t_stop, y);
                    return Ok((t_stop, stats));
                }
                y.copy_from_slice(&self.ynew);
                self.k.swap(0, 6);
                h = h_new.min(opts.max_step);
            } else {
                h /= MAX_SHRINK.min(fac11 / SAFETY);
                last_rejected = true;
                stats.rejected += 1;
            }
        }
        Ok((t, stats))
    }

    /// Stages 2..7; `k[0]` must already hold `f(y)`. Leaves the fifth-order
    /// solution in `ynew` and `f(ynew)` in `k[6]`.
    fn stages<S: OdeSystem>(&mut self, sys: &S, y: &[f64], h: f64) {
        let dim = y.len();
        let (k1, rest) = self.k.split_first_mut().unwrap();
        let [k2, k3, k4, k5, k6, k7] = rest else { unreachable!() };
        let ytmp = &mut self.ytmp;

        for i in 0..dim {
            ytmp[i] = y[i] + h * A21 * k1[i];
        }
        sys.rhs(ytmp, k2);
        for i in 0..dim {
            ytmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        sys.rhs(ytmp, k3);
        for i in 0..dim {
            ytmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        sys.rhs(ytmp, k4);
        for i in 0..dim {
            ytmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        sys.rhs(ytmp, k5);
        for i in 0..dim {
            ytmp[i] = y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        sys.rhs(ytmp, k6);
        for i in 0..dim {
            self.ynew[i] = y[i] + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        sys.rhs(&self.ynew, k7);
    }

    fn dense_coefficients(&mut self, y: &[f64], h: f64) {
        let [k1, _, k3, k4, k5, k6, k7] = &self.k;
        let [r1, r2, r3, r4, r5] = &mut self.rcont;
        for i in 0..y.len() {
            let ydiff = self.ynew[i] - y[i];
            let bspl = h * k1[i] - ydiff;
            r1[i] = y[i];
            r2[i] = ydiff;
            r3[i] = bspl;
            r4[i] = ydiff - h * k7[i] - bspl;
            r5[i] = h * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]);
        }
    }
}
