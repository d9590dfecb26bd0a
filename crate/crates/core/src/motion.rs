//! Trait trajectories of single individuals between divisions.
//!
//! Deterministic flows store only the birth point and reconstruct
//! analytically; diffusions store their integrator grid (linearly
//! interpolated); jump traits store the exact event list.

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FlowKind {
    /// Trait constant in time.
    Constant,
    /// x(t) = x0 + a (t - t0)
    LinearDrift { a: f64 },
    /// x(t) = x0 e^{a (t - t0)}
    ExponentialGrowth { a: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum MotionRecord {
    Flow {
        kind: FlowKind,
        x0: f64,
        t0: f64,
    },
    /// Euler grid: values[i] at t0 + i*step for i < n-1; the final value sits
    /// at t_end (the segment may close mid-step at a division).
    Grid {
        t0: f64,
        step: f64,
        t_end: f64,
        values: Vec<f64>,
    },
    /// Piecewise-constant integer-valued path: x0 on [t0, jumps[0].0), then
    /// jumps[i].1 from jumps[i].0 on.
    Steps {
        t0: f64,
        x0: f64,
        jumps: Vec<(f64, f64)>,
    },
}

impl MotionRecord {
    pub fn constant(x: f64, t0: f64) -> Self {
        MotionRecord::Flow {
            kind: FlowKind::Constant,
            x0: x,
            t0,
        }
    }

    /// Trait value at absolute time t (caller keeps t inside the record's
    /// lifetime; out-of-range queries clamp to the ends).
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            MotionRecord::Flow { kind, x0, t0 } => {
                let dt = (t - t0).max(0.0);
                match *kind {
                    FlowKind::Constant => *x0,
                    FlowKind::LinearDrift { a } => x0 + a * dt,
                    FlowKind::ExponentialGrowth { a } => x0 * (a * dt).exp(),
                }
            }
            MotionRecord::Grid {
                t0,
                step,
                t_end,
                values,
            } => {
                if values.len() == 1 || t <= *t0 {
                    return values[0];
                }
                if t >= *t_end {
                    return values[values.len() - 1];
                }
                let n = values.len();
                // time of the second-to-last grid point
                let t_last_regular = t0 + (n as f64 - 2.0) * step;
                if t >= t_last_regular {
                    let w = (t - t_last_regular) / (t_end - t_last_regular);
                    return values[n - 2] * (1.0 - w) + values[n - 1] * w;
                }
                let idx = ((t - t0) / step).floor() as usize;
                let idx = idx.min(n - 2);
                let tl = t0 + idx as f64 * step;
                let w = ((t - tl) / step).clamp(0.0, 1.0);
                values[idx] * (1.0 - w) + values[idx + 1] * w
            }
            MotionRecord::Steps { x0, jumps, .. } => {
                let mut x = *x0;
                for &(tj, xj) in jumps {
                    if tj <= t {
                        x = xj;
                    } else {
                        break;
                    }
                }
                x
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flow_eval() {
        let lin = MotionRecord::Flow {
            kind: FlowKind::LinearDrift { a: 2.0 },
            x0: 1.0,
            t0: 1.0,
        };
        assert_eq!(lin.eval(2.5), 4.0);
        let exp = MotionRecord::Flow {
            kind: FlowKind::ExponentialGrowth { a: 0.1 },
            x0: 1.0,
            t0: 0.0,
        };
        assert!((exp.eval(10.0) - 1f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn grid_interpolates_with_irregular_tail() {
        let g = MotionRecord::Grid {
            t0: 0.0,
            step: 1.0,
            t_end: 2.5,
            values: vec![0.0, 1.0, 2.0],
        };
        assert_eq!(g.eval(0.5), 0.5);
        assert_eq!(g.eval(1.0), 1.0);
        // last leg spans [1.0, 2.5] linearly from 1.0 to 2.0
        assert!((g.eval(1.75) - 1.5).abs() < 1e-12);
        assert_eq!(g.eval(3.0), 2.0);
    }

    #[test]
    fn steps_are_right_continuous() {
        let s = MotionRecord::Steps {
            t0: 0.0,
            x0: 3.0,
            jumps: vec![(1.0, 4.0), (2.0, 3.0)],
        };
        assert_eq!(s.eval(0.99), 3.0);
        assert_eq!(s.eval(1.0), 4.0);
        assert_eq!(s.eval(2.0), 3.0);
    }
}
