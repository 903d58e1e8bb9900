//! Scale schedules and per-action normalization weights.
//!
//! A schedule lists the token-grid shape emitted at each generation step,
//! coarse to fine. The normalization weight of a step shrinks with the
//! number of tokens it emits, `k_t = (h_t * w_t)^(-alpha)`, so that
//! token-rich fine steps do not dominate the loss.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, VarlError};

/// Grid shape `(rows, cols)`.
pub type Shape = (usize, usize);

/// Ordered token-grid shapes, one per generation step.
///
/// Serialized as a JSON array of `[h, w]` pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Shape>", into = "Vec<Shape>")]
pub struct ScaleSchedule {
    shapes: Vec<Shape>,
}

impl ScaleSchedule {
    pub fn new(shapes: Vec<Shape>) -> Result<Self> {
        if shapes.is_empty() {
            return Err(invalid("schedule must contain at least one shape"));
        }
        if let Some(&(h, w)) = shapes.iter().find(|&&(h, w)| h == 0 || w == 0) {
            return Err(invalid(format!("shape ({h},{w}) has a zero dimension")));
        }
        for pair in shapes.windows(2) {
            let (a, b) = (pair[0].0 * pair[0].1, pair[1].0 * pair[1].1);
            if b < a {
                return Err(invalid(format!(
                    "token counts must be nondecreasing, got {a} then {b}"
                )));
            }
        }
        Ok(Self { shapes })
    }

    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    /// Number of generation steps.
    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    pub fn shape(&self, step: usize) -> Shape {
        self.shapes[step]
    }

    pub fn sites(&self, step: usize) -> usize {
        let (h, w) = self.shapes[step];
        h * w
    }

    pub fn finest(&self) -> Shape {
        *self.shapes.last().expect("schedule is nonempty")
    }

    /// Tokens emitted strictly before `step`.
    pub fn tokens_before(&self, step: usize) -> usize {
        self.shapes[..step].iter().map(|&(h, w)| h * w).sum()
    }

    pub fn total_tokens(&self) -> usize {
        self.tokens_before(self.len())
    }

    pub fn is_prefix_of(&self, other: &ScaleSchedule) -> bool {
        other.shapes.starts_with(&self.shapes)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

impl TryFrom<Vec<Shape>> for ScaleSchedule {
    type Error = VarlError;

    fn try_from(shapes: Vec<Shape>) -> Result<Self> {
        Self::new(shapes)
    }
}

impl From<ScaleSchedule> for Vec<Shape> {
    fn from(s: ScaleSchedule) -> Self {
        s.shapes
    }
}

/// Output resolutions with a built-in square schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resolution {
    R64,
    R128,
    R256,
    R512,
    R1024,
}

impl Resolution {
    pub const ALL: [Resolution; 5] = [
        Resolution::R64,
        Resolution::R128,
        Resolution::R256,
        Resolution::R512,
        Resolution::R1024,
    ];

    fn sides(self) -> &'static [usize] {
        const SIDES: [usize; 18] = [
            1, 2, 3, 4, 5, 6, 7, 8, 10, 12, 14, 16, 20, 24, 28, 32, 48, 64,
        ];
        let n = match self {
            Resolution::R64 => 4,
            Resolution::R128 => 8,
            Resolution::R256 => 12,
            Resolution::R512 => 16,
            Resolution::R1024 => 18,
        };
        &SIDES[..n]
    }
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Resolution::R64 => "r64",
            Resolution::R128 => "r128",
            Resolution::R256 => "r256",
            Resolution::R512 => "r512",
            Resolution::R1024 => "r1024",
        };
        f.write_str(s)
    }
}

impl FromStr for Resolution {
    type Err = VarlError;

    fn from_str(s: &str) -> Result<Self> {
        Resolution::ALL
            .into_iter()
            .find(|r| r.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| invalid(format!("unknown resolution tag '{s}'")))
    }
}

/// The square schedule used for a given output resolution.
pub fn builtin_schedule(tag: Resolution) -> ScaleSchedule {
    let shapes = tag.sides().iter().map(|&s| (s, s)).collect();
    ScaleSchedule::new(shapes).expect("builtin schedules are valid")
}

/// Number of leading steps of `schedule` covered by the built-in schedule
/// for `tag`. The prefix policy generates exactly these steps.
pub fn split_index(schedule: &ScaleSchedule, tag: Resolution) -> Result<usize> {
    let prefix = builtin_schedule(tag);
    if prefix.is_prefix_of(schedule) {
        Ok(prefix.len())
    } else {
        Err(VarlError::NotAPrefix {
            tag: tag.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PanwConfig {
    /// Decay exponent applied to the token count of a step.
    pub alpha: f64,
    /// Rescale the per-step weights to sum to one over the steps in use.
    pub normalize: bool,
}

impl Default for PanwConfig {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            normalize: true,
        }
    }
}

impl PanwConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(invalid(format!(
                "panw alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Unnormalized weight `(h*w)^(-alpha)` of one step.
pub fn panw_weight(shape: Shape, cfg: &PanwConfig) -> f64 {
    let tokens = (shape.0 * shape.1) as f64;
    tokens.powf(-cfg.alpha)
}

/// Per-step weights for a whole schedule, normalized when `cfg.normalize`.
pub fn panw_weights(schedule: &ScaleSchedule, cfg: &PanwConfig) -> Vec<f64> {
    panw_weights_for(schedule, 0..schedule.len(), cfg)
}

/// Weights for the steps in `steps` only; other steps get zero. With
/// normalization the active steps sum to one.
pub fn panw_weights_for(
    schedule: &ScaleSchedule,
    steps: std::ops::Range<usize>,
    cfg: &PanwConfig,
) -> Vec<f64> {
    let mut w = vec![0.0; schedule.len()];
    for t in steps {
        w[t] = panw_weight(schedule.shape(t), cfg);
    }
    if cfg.normalize {
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            w.iter_mut().for_each(|x| *x /= total);
        }
    }
    w
}
