use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 2-D position or displacement, serialized as `[x, y]`.
pub type Point = [f64; 2];

pub(crate) fn all_finite(points: &[Point]) -> bool {
    points.iter().all(|p| p[0].is_finite() && p[1].is_finite())
}

/// Ordered positions sampled at a fixed timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub points: Vec<Point>,
    pub dt: f64,
    pub agent_id: u64,
    pub scene_id: String,
}

impl Trajectory {
    pub fn new(points: Vec<Point>, dt: f64, agent_id: u64, scene_id: impl Into<String>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "trajectory needs at least 2 points, got {}",
                points.len()
            )));
        }
        if !all_finite(&points) {
            return Err(Error::InvalidInput("trajectory has non-finite coordinates".into()));
        }
        Ok(Self {
            points,
            dt,
            agent_id,
            scene_id: scene_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One observation: a past segment and the future that followed it.
///
/// `step` is the index of the first future point within the generating
/// path; it is only set for sliding-window (branching) scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Situation {
    pub scene_id: String,
    pub agent_id: u64,
    pub mode_label: Option<usize>,
    pub past: Vec<Point>,
    pub future: Vec<Point>,
    pub dt: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
}

impl Situation {
    /// Last observed position, the anchor of the future displacements.
    pub fn current_position(&self) -> Point {
        *self.past.last().expect("situation past is nonempty")
    }

    pub fn future_displacements(&self) -> DisplacementSeries {
        to_displacements(&self.future, self.current_position())
            .expect("situation future is nonempty")
    }

    /// Future flattened to `[x0, y0, x1, y1, ...]`.
    pub fn flat_future(&self) -> Vec<f64> {
        flatten(&self.future)
    }
}

pub fn flatten(points: &[Point]) -> Vec<f64> {
    points.iter().flat_map(|p| [p[0], p[1]]).collect()
}

/// Relative displacements anchored at `origin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplacementSeries {
    pub origin: Point,
    pub deltas: Vec<Point>,
}

impl DisplacementSeries {
    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    /// Mean Euclidean length of the steps.
    pub fn mean_step_length(&self) -> f64 {
        if self.deltas.is_empty() {
            return 0.0;
        }
        self.deltas.iter().map(|d| d[0].hypot(d[1])).sum::<f64>() / self.deltas.len() as f64
    }
}

/// `deltas[0] = points[0] - anchor`, `deltas[k] = points[k] - points[k-1]`.
pub fn to_displacements(points: &[Point], anchor: Point) -> Result<DisplacementSeries> {
    if points.is_empty() {
        return Err(Error::InvalidInput("cannot take displacements of an empty trajectory".into()));
    }
    if !anchor[0].is_finite() || !anchor[1].is_finite() {
        return Err(Error::InvalidInput("anchor is not finite".into()));
    }
    let mut prev = anchor;
    let deltas = points
        .iter()
        .map(|p| {
            let d = [p[0] - prev[0], p[1] - prev[1]];
            prev = *p;
            d
        })
        .collect();
    Ok(DisplacementSeries { origin: anchor, deltas })
}

/// Cumulative sum of the deltas starting from the origin.
pub fn from_displacements(series: &DisplacementSeries) -> Result<Vec<Point>> {
    if !all_finite(&series.deltas) || !all_finite(&[series.origin]) {
        return Err(Error::InvalidInput("displacements are not finite".into()));
    }
    let mut cur = series.origin;
    Ok(series
        .deltas
        .iter()
        .map(|d| {
            cur = [cur[0] + d[0], cur[1] + d[1]];
            cur
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn displacements_simple() {
        let d = to_displacements(&[[1.0, 0.0], [2.0, 0.0]], [0.0, 0.0]).unwrap();
        assert_eq!(d.deltas, vec![[1.0, 0.0], [1.0, 0.0]]);
        let d = to_displacements(&[[2.0, 2.0]], [2.0, 2.0]).unwrap();
        assert_eq!(d.deltas, vec![[0.0, 0.0]]);
    }

    #[test]
    fn empty_trajectory_rejected() {
        assert!(matches!(
            to_displacements(&[], [0.0, 0.0]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn cumulative_sum() {
        let s = DisplacementSeries {
            origin: [2.0, 2.0],
            deltas: vec![[1.0, 0.0], [0.0, 1.0]],
        };
        assert_eq!(from_displacements(&s).unwrap(), vec![[3.0, 2.0], [3.0, 3.0]]);
        let zeros = DisplacementSeries {
            origin: [2.0, -1.0],
            deltas: vec![[0.0, 0.0]; 5],
        };
        assert!(from_displacements(&zeros).unwrap().iter().all(|p| *p == [2.0, -1.0]));
    }

    #[test]
    fn non_finite_rejected() {
        let s = DisplacementSeries {
            origin: [0.0, 0.0],
            deltas: vec![[f64::NAN, 0.0]],
        };
        assert!(from_displacements(&s).is_err());
        assert!(Trajectory::new(vec![[0.0, 0.0]], 0.1, 0, "s").is_err());
    }

    proptest! {
        #[test]
        fn round_trip(points in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..30),
                      ax in -100.0f64..100.0, ay in -100.0f64..100.0) {
            let pts: Vec<Point> = points.iter().map(|&(x, y)| [x, y]).collect();
            let d = to_displacements(&pts, [ax, ay]).unwrap();
            prop_assert_eq!(d.len(), pts.len());
            let back = from_displacements(&d).unwrap();
            for (a, b) in back.iter().zip(&pts) {
                prop_assert!((a[0] - b[0]).abs() <= 1e-12 && (a[1] - b[1]).abs() <= 1e-12);
            }
        }
    }
}
