//! Declarative scene descriptions and their validation.
//!
//! A scene spec is a JSON document:
//!
//! ```json
//! {
//!   "scene_id": "bimodal_sigma015",
//!   "kind": "bimodal",
//!   "mode_names": ["left", "right"],
//!   "past_template": [[-9.01, 0.001], "... t_past points"],
//!   "mode_templates": [{"shape": "polyline", "points": ["... t_pred points"]}],
//!   "mode_proportions": [0.5, 0.5],
//!   "scaling": {"mean": 1.0, "std": 0.15},
//!   "t_past": 10, "t_pred": 14, "n_samples": 3000, "dt": 0.1, "seed": 1
//! }
//! ```
//!
//! Branching scenes use `"kind": "branching"`, `"shape": "branch"` templates
//! (a straight run along +x up to `branch_step`, then a clamped cubic spline
//! through `control_points`), plus `total_len` and `window_steps`.

use serde::{Deserialize, Serialize};

use super::spline::{resample_unit_steps, ClampedSpline};
use super::types::{all_finite, Point};
use crate::error::{Error, Result};
use crate::rng::sha256_hex;

pub const PROPORTION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Bimodal,
    Branching,
}

/// Normal distribution over the speed scale factor `s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum ModeTemplate {
    /// Explicit future positions following the shared past.
    Polyline { points: Vec<Point> },
    /// Straight unit steps from the origin along +x up to `branch_step`, then a
    /// spline through `control_points`. No control points means straight throughout.
    Branch {
        branch_step: usize,
        #[serde(default)]
        control_points: Vec<Point>,
    },
}

impl ModeTemplate {
    /// Full path of `total_len` points for a `Branch` template.
    pub fn branch_path(&self, total_len: usize) -> Option<Vec<Point>> {
        let ModeTemplate::Branch {
            branch_step,
            control_points,
        } = self
        else {
            return None;
        };
        if control_points.is_empty() || *branch_step + 1 >= total_len {
            return Some((0..total_len).map(|i| [i as f64, 0.0]).collect());
        }
        let mut path: Vec<Point> = (0..=*branch_step).map(|i| [i as f64, 0.0]).collect();
        let mut knots = vec![[*branch_step as f64, 0.0]];
        knots.extend_from_slice(control_points);
        let spline = ClampedSpline::new(&knots, [1.0, 0.0]);
        path.extend(resample_unit_steps(&spline, total_len - path.len()));
        Some(path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub scene_id: String,
    pub kind: SceneKind,
    pub mode_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub past_template: Option<Vec<Point>>,
    pub mode_templates: Vec<ModeTemplate>,
    pub mode_proportions: Vec<f64>,
    #[serde(default)]
    pub scaling: Option<Scaling>,
    pub t_past: usize,
    pub t_pred: usize,
    pub n_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_steps: Option<usize>,
    pub dt: f64,
    pub seed: u64,
}

impl SceneSpec {
    /// Parses and validates a JSON scene spec. Errors carry the field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let spec: SceneSpec = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene spec serializes")
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("scene spec serializes"))
    }

    pub fn n_modes(&self) -> usize {
        self.mode_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scene_id.is_empty() {
            return Err(Error::config("scene_id", "must be nonempty"));
        }
        let n = self.mode_names.len();
        if n == 0 {
            return Err(Error::config("mode_names", "at least one mode is required"));
        }
        if self.mode_templates.len() != n {
            return Err(Error::config(
                "mode_templates",
                format!("expected {n} templates, got {}", self.mode_templates.len()),
            ));
        }
        if self.mode_proportions.len() != n {
            return Err(Error::config(
                "mode_proportions",
                format!("expected {n} proportions, got {}", self.mode_proportions.len()),
            ));
        }
        for (i, &p) in self.mode_proportions.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::config(format!("mode_proportions[{i}]"), "must be finite and nonnegative"));
            }
        }
        let sum: f64 = self.mode_proportions.iter().sum();
        if (sum - 1.0).abs() > PROPORTION_TOLERANCE {
            return Err(Error::config("mode_proportions", format!("must sum to 1, got {sum}")));
        }
        if let Some(s) = self.scaling {
            if !s.mean.is_finite() || !s.std.is_finite() || s.std < 0.0 {
                return Err(Error::config("scaling.std", "must be finite and nonnegative"));
            }
        }
        if self.t_past < 2 {
            return Err(Error::config("t_past", "must be at least 2"));
        }
        if self.t_pred < 2 {
            return Err(Error::config("t_pred", "must be at least 2"));
        }
        if self.n_samples == 0 {
            return Err(Error::config("n_samples", "must be positive"));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::config("dt", "must be positive"));
        }
        match self.kind {
            SceneKind::Bimodal => self.validate_bimodal(),
            SceneKind::Branching => self.validate_branching(),
        }
    }

    fn validate_bimodal(&self) -> Result<()> {
        let past = self
            .past_template
            .as_ref()
            .ok_or_else(|| Error::config("past_template", "required for bimodal scenes"))?;
        if past.len() != self.t_past || !all_finite(past) {
            return Err(Error::config(
                "past_template",
                format!("expected {} finite points", self.t_past),
            ));
        }
        for (i, t) in self.mode_templates.iter().enumerate() {
            match t {
                ModeTemplate::Polyline { points } if points.len() == self.t_pred && all_finite(points) => {}
                _ => {
                    return Err(Error::config(
                        format!("mode_templates[{i}]"),
                        format!("expected a polyline of {} finite points", self.t_pred),
                    ))
                }
            }
        }
        Ok(())
    }

    fn validate_branching(&self) -> Result<()> {
        let total = self
            .total_len
            .ok_or_else(|| Error::config("total_len", "required for branching scenes"))?;
        self.window_steps
            .ok_or_else(|| Error::config("window_steps", "required for branching scenes"))?;
        for (i, t) in self.mode_templates.iter().enumerate() {
            match t {
                ModeTemplate::Branch { control_points, branch_step } => {
                    if !all_finite(control_points) {
                        return Err(Error::config(format!("mode_templates[{i}].control_points"), "must be finite"));
                    }
                    if *branch_step >= total {
                        return Err(Error::config(format!("mode_templates[{i}].branch_step"), "beyond total_len"));
                    }
                }
                ModeTemplate::Polyline { .. } => {
                    return Err(Error::config(format!("mode_templates[{i}]"), "branching scenes need branch templates"))
                }
            }
        }
        Ok(())
    }

    /// Full-length template paths of a branching scene, one per mode.
    pub fn branch_paths(&self) -> Result<Vec<Vec<Point>>> {
        let total = self
            .total_len
            .ok_or_else(|| Error::config("total_len", "required for branching scenes"))?;
        self.mode_templates
            .iter()
            .enumerate()
            .map(|(i, t)| {
                t.branch_path(total)
                    .ok_or_else(|| Error::config(format!("mode_templates[{i}]"), "not a branch template"))
            })
            .collect()
    }
}

macro_rules! bundled {
    ($($name:literal),* $(,)?) => {
        /// Names of the scene specs shipped with the crate.
        pub const BUNDLED_SCENES: &[&str] = &[$($name),*];

        /// A scene spec shipped with the crate, by name (with or without `.json`).
        pub fn bundled_scene(name: &str) -> Option<SceneSpec> {
            let name = name.strip_suffix(".json").unwrap_or(name);
            let text = match name {
                $($name => include_str!(concat!("../../scenes/", $name, ".json")),)*
                _ => return None,
            };
            Some(SceneSpec::from_json(text).expect("bundled scene specs are valid"))
        }
    };
}

bundled!(
    "bimodal_sigma005",
    "bimodal_sigma010",
    "bimodal_sigma015",
    "branching_scene1",
    "branching_scene2",
    "branching_scene3",
    "branching_scene4",
    "branching_scene5",
    "branching_scene6",
);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_bundled_scenes_parse() {
        for name in BUNDLED_SCENES {
            let spec = bundled_scene(name).unwrap();
            assert_eq!(&spec.scene_id, name);
        }
    }

    #[test]
    fn bundled_branching_proportions() {
        let s1 = bundled_scene("branching_scene1").unwrap();
        for p in &s1.mode_proportions {
            assert!((p - 0.33).abs() < 0.005);
        }
        let s6 = bundled_scene("branching_scene6").unwrap();
        assert_eq!(s6.mode_proportions, vec![0.0, 0.01, 0.99]);
        let s4 = bundled_scene("branching_scene4").unwrap();
        assert_eq!(s4.mode_proportions, vec![0.0, 0.5, 0.5]);
    }

    #[test]
    fn bad_proportions_report_field() {
        let mut spec = bundled_scene("bimodal_sigma005").unwrap();
        spec.mode_proportions = vec![0.6, 0.6];
        let err = SceneSpec::from_json(&serde_json::to_string(&spec).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "mode_proportions"), "{err}");
    }

    #[test]
    fn schema_violation_reports_path() {
        let text = r#"{"scene_id": "x", "kind": "bimodal", "mode_names": ["a"], "mode_templates": [{"shape": "polyline", "points": [[0, "a"]]}]}"#;
        let err = SceneSpec::from_json(text).unwrap_err();
        match err {
            Error::Config { field, .. } => assert!(field.starts_with("mode_templates[0]"), "{field}"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn negative_sigma_rejected() {
        let mut spec = bundled_scene("bimodal_sigma005").unwrap();
        spec.scaling = Some(Scaling { mean: 1.0, std: -0.1 });
        assert!(spec.validate().is_err());
    }

    #[test]
    fn branch_paths_have_unit_steps() {
        let spec = bundled_scene("branching_scene1").unwrap();
        let total = spec.total_len.unwrap();
        for path in spec.branch_paths().unwrap() {
            assert_eq!(path.len(), total);
            for w in path.windows(2) {
                let step = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
                assert!(step <= 1.0 + 1e-9 && step > 0.95, "step {step}");
            }
        }
    }
}
