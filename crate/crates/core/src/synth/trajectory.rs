//! Piecewise-linear flight paths for the four action classes.

use serde::{Deserialize, Serialize};

use crate::error::{MavrError, Result};

/// Minimum distance between a path point and the frame edge.
pub const PATH_MARGIN_PX: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActionKind {
    #[serde(rename = "vShape")]
    VShape,
    #[serde(rename = "inv_vShape")]
    InvVShape,
    #[serde(rename = "left_right")]
    LeftRight,
    #[serde(rename = "up_down")]
    UpDown,
}

impl ActionKind {
    /// Class order; the index is the label.
    pub const ALL: [ActionKind; 4] = [ActionKind::VShape, ActionKind::InvVShape, ActionKind::LeftRight, ActionKind::UpDown];

    pub fn name(self) -> &'static str {
        match self {
            ActionKind::VShape => "vShape",
            ActionKind::InvVShape => "inv_vShape",
            ActionKind::LeftRight => "left_right",
            ActionKind::UpDown => "up_down",
        }
    }

    pub fn label(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap()
    }

    pub fn from_label(label: usize) -> Option<Self> {
        Self::ALL.get(label).copied()
    }

    pub fn names() -> [&'static str; 4] {
        Self::ALL.map(Self::name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub kind: ActionKind,
    pub amplitude_px: f64,
    /// Horizontal progress per frame of the V-shaped paths.
    pub speed_px_per_frame: f64,
    /// `(x, y)` in pixels, y pointing down.
    pub start: (f64, f64),
    pub duration_frames: usize,
}

/// Triangle wave over `[0, period]`: 0 at both ends, 1 in the middle.
fn triangle(t: f64, period: f64) -> f64 {
    if period <= 0.0 {
        return 0.0;
    }
    1.0 - (1.0 - 2.0 * t / period).abs()
}

impl TrajectorySpec {
    /// Position at frame `t`. Sweeps peak at `t = duration/2`; the V shapes
    /// close at `t = duration − 1`.
    pub fn point(&self, t: usize) -> Result<(f64, f64)> {
        if t >= self.duration_frames {
            return Err(MavrError::Config(format!(
                "frame {t} outside trajectory of {} frames",
                self.duration_frames
            )));
        }
        let (x0, y0) = self.start;
        let a = self.amplitude_px;
        let tf = t as f64;
        let d = self.duration_frames as f64;
        Ok(match self.kind {
            ActionKind::LeftRight => (x0 + a * triangle(tf, d), y0),
            ActionKind::UpDown => (x0, y0 + a * triangle(tf, d)),
            ActionKind::VShape => (x0 + self.speed_px_per_frame * tf, y0 + a * triangle(tf, d - 1.0)),
            ActionKind::InvVShape => (x0 + self.speed_px_per_frame * tf, y0 - a * triangle(tf, d - 1.0)),
        })
    }

    pub fn points(&self) -> Vec<(f64, f64)> {
        (0..self.duration_frames).map(|t| self.point(t).unwrap()).collect()
    }

    /// Checks the amplitude and that every point keeps `margin` pixels from
    /// the edges of a `height × width` frame.
    pub fn validate(&self, height: usize, width: usize, margin: f64) -> Result<()> {
        if !(self.amplitude_px > 0.0) || self.duration_frames < 2 {
            return Err(MavrError::Config(format!(
                "trajectory needs positive amplitude and at least 2 frames (got {} px, {} frames)",
                self.amplitude_px, self.duration_frames
            )));
        }
        for (t, (x, y)) in self.points().into_iter().enumerate() {
            let inside = |v: f64, n: usize| v >= margin && v <= n as f64 - 1.0 - margin;
            if !inside(x, width) || !inside(y, height) {
                return Err(MavrError::Config(format!(
                    "trajectory point ({x:.2}, {y:.2}) at frame {t} leaves the {height}x{width} frame (margin {margin} px)"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: ActionKind) -> TrajectorySpec {
        TrajectorySpec {
            kind,
            amplitude_px: 10.0,
            speed_px_per_frame: 1.5,
            start: (20.0, 30.0),
            duration_frames: 16,
        }
    }

    #[test]
    fn documented_points() {
        let v = spec(ActionKind::VShape);
        assert_eq!(v.point(0).unwrap().1, v.point(15).unwrap().1);
        let lr = spec(ActionKind::LeftRight);
        assert_eq!(lr.point(8).unwrap(), (30.0, 30.0));
        let inv = spec(ActionKind::InvVShape);
        for t in 0..16 {
            let (a, b) = (inv.point(t).unwrap().1 - 30.0, v.point(t).unwrap().1 - 30.0);
            assert!((a + b).abs() < 1e-12);
        }
        assert!(v.point(16).is_err());
    }

    #[test]
    fn labels_round_trip() {
        for k in ActionKind::ALL {
            assert_eq!(ActionKind::from_label(k.label()), Some(k));
            let s = serde_json::to_string(&k).unwrap();
            assert_eq!(s, format!("\"{}\"", k.name()));
        }
    }

    #[test]
    fn margin_check() {
        let mut s = spec(ActionKind::LeftRight);
        assert!(s.validate(64, 64, PATH_MARGIN_PX).is_ok());
        s.start.0 = 50.0;
        assert!(s.validate(64, 64, PATH_MARGIN_PX).is_err());
    }
}
