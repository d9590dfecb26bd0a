//! Trait trajectory of one line of descent, shared by auxiliary paths,
//! tagged-cell paths and lineages extracted from simulated trees.

use crate::motion::MotionRecord;

#[derive(Debug, Clone, PartialEq)]
pub struct PathSegment {
    pub start: f64,
    pub end: f64,
    pub motion: MotionRecord,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathJump {
    pub time: f64,
    pub pre: f64,
    pub post: f64,
}

/// Piecewise trait trajectory on [start, horizon] with division events.
/// Right-continuous: at a jump time the path takes the post-division value.
#[derive(Debug, Clone, PartialEq)]
pub struct TraitPath {
    pub horizon: f64,
    pub segments: Vec<PathSegment>,
    pub jumps: Vec<PathJump>,
}

pub type AuxiliaryPath = TraitPath;
pub type LineagePath = TraitPath;

impl TraitPath {
    /// Number of division events on [start, horizon).
    pub fn division_count(&self) -> usize {
        self.jumps.len()
    }

    pub fn start_time(&self) -> f64 {
        self.segments.first().map_or(0.0, |s| s.start)
    }

    pub fn trait_at(&self, t: f64) -> f64 {
        for seg in &self.segments {
            if t < seg.end || (t <= seg.end && seg.end == self.horizon) {
                return seg.motion.eval(t);
            }
        }
        self.segments
            .last()
            .map_or(f64::NAN, |s| s.motion.eval(t.min(s.end)))
    }

    pub fn terminal(&self) -> f64 {
        self.trait_at(self.horizon)
    }

    /// Structural sanity used by tests: segments tile [start, horizon],
    /// jumps strictly increase and glue consecutive segments together.
    pub fn check_consistency(&self) -> bool {
        if self.segments.is_empty() {
            return self.jumps.is_empty();
        }
        let mut ok = (self.segments.last().unwrap().end - self.horizon).abs() < 1e-12;
        for w in self.segments.windows(2) {
            ok &= (w[0].end - w[1].start).abs() < 1e-12;
        }
        ok &= self.jumps.len() + 1 == self.segments.len();
        for (i, j) in self.jumps.iter().enumerate() {
            ok &= (j.time - self.segments[i].end).abs() < 1e-12;
            ok &= (self.segments[i + 1].motion.eval(j.time) - j.post).abs() < 1e-9;
            if i + 1 < self.jumps.len() {
                ok &= j.time < self.jumps[i + 1].time;
            }
        }
        ok
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::FlowKind;

    #[test]
    fn path_eval_is_right_continuous_at_jumps() {
        let p = TraitPath {
            horizon: 2.0,
            segments: vec![
                PathSegment {
                    start: 0.0,
                    end: 1.0,
                    motion: MotionRecord::Flow {
                        kind: FlowKind::LinearDrift { a: 1.0 },
                        x0: 1.0,
                        t0: 0.0,
                    },
                },
                PathSegment {
                    start: 1.0,
                    end: 2.0,
                    motion: MotionRecord::Flow {
                        kind: FlowKind::LinearDrift { a: 1.0 },
                        x0: 1.0,
                        t0: 1.0,
                    },
                },
            ],
            jumps: vec![PathJump {
                time: 1.0,
                pre: 2.0,
                post: 1.0,
            }],
        };
        assert!(p.check_consistency());
        assert_eq!(p.division_count(), 1);
        assert_eq!(p.trait_at(1.0), 1.0);
        assert_eq!(p.trait_at(0.5), 1.5);
        assert_eq!(p.terminal(), 2.0);
    }
}
