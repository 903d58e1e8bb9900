//! Reward-relevance masks propagated from the finest grid to coarser ones.
//!
//! A finest site `(a, b)` on an `H x W` grid falls into the coarse cell
//! `(a * h / H, b * w / W)` of an `h x w` grid (floor division); a coarse
//! site is relevant when any finest site in its cell is.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VarlError};
use crate::schedule::{ScaleSchedule, Shape};

/// Boolean grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    shape: Shape,
    cells: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Shape, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != shape.0 * shape.1 {
            return Err(VarlError::ShapeMismatch(format!(
                "mask {shape:?} needs {} cells",
                shape.0 * shape.1
            )));
        }
        Ok(Self { shape, cells })
    }

    pub fn filled(shape: Shape, value: bool) -> Self {
        Self {
            shape,
            cells: vec![value; shape.0 * shape.1],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.shape.1 + j]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    fn to_rows(&self) -> Vec<Vec<u8>> {
        self.cells
            .chunks(self.shape.1)
            .map(|r| r.iter().map(|&c| u8::from(c)).collect())
            .collect()
    }
}

/// True exactly at the listed sites.
pub fn seed_mask(shape: Shape, regions: &[(usize, usize)]) -> Result<Mask> {
    let mut m = Mask::filled(shape, false);
    for &(i, j) in regions {
        if i >= shape.0 || j >= shape.1 {
            return Err(VarlError::OutOfBounds(i, j));
        }
        m.cells[i * shape.1 + j] = true;
    }
    Ok(m)
}

/// One mask per schedule step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPyramid {
    masks: Vec<Mask>,
    provenance: String,
}

#[derive(Serialize, Deserialize)]
struct PyramidJson {
    provenance: String,
    masks: Vec<Vec<Vec<u8>>>,
}

impl MaskPyramid {
    pub fn masks(&self) -> &[Mask] {
        &self.masks
    }

    pub fn mask(&self, step: usize) -> &Mask {
        &self.masks[step]
    }

    pub fn finest(&self) -> &Mask {
        self.masks.last().expect("pyramids are nonempty")
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn with_provenance(mut self, tag: impl Into<String>) -> Self {
        self.provenance = tag.into();
        self
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = PyramidJson {
            provenance: self.provenance.clone(),
            masks: self.masks.iter().map(Mask::to_rows).collect(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str, schedule: &ScaleSchedule) -> Result<Self> {
        let doc: PyramidJson = serde_json::from_str(text)?;
        if doc.masks.len() != schedule.len() {
            return Err(VarlError::ShapeMismatch(format!(
                "{} masks for {} steps",
                doc.masks.len(),
                schedule.len()
            )));
        }
        let masks = doc
            .masks
            .iter()
            .zip(schedule.shapes())
            .map(|(rows, &shape)| {
                if rows.len() != shape.0 || rows.iter().any(|r| r.len() != shape.1) {
                    return Err(VarlError::ShapeMismatch(format!(
                        "mask rows do not match {shape:?}"
                    )));
                }
                Mask::new(shape, rows.iter().flatten().map(|&c| c != 0).collect())
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            masks,
            provenance: doc.provenance,
        })
    }
}

/// Coarse cell of finest site `(a, b)` on a grid of shape `coarse`.
pub fn cell_of(finest: Shape, coarse: Shape, a: usize, b: usize) -> (usize, usize) {
    (a * coarse.0 / finest.0, b * coarse.1 / finest.1)
}

/// OR-reduces the finest mask onto every scale of the schedule.
pub fn propagate(schedule: &ScaleSchedule, finest: &Mask) -> Result<MaskPyramid> {
    let fs = schedule.finest();
    if finest.shape() != fs {
        return Err(VarlError::ShapeMismatch(format!(
            "finest mask {:?} does not match schedule {:?}",
            finest.shape(),
            fs
        )));
    }
    let masks = schedule
        .shapes()
        .iter()
        .map(|&shape| {
            let mut m = Mask::filled(shape, false);
            for a in 0..fs.0 {
                for b in 0..fs.1 {
                    if finest.get(a, b) {
                        let (i, j) = cell_of(fs, shape, a, b);
                        m.cells[i * shape.1 + j] = true;
                    }
                }
            }
            m
        })
        .collect();
    Ok(MaskPyramid {
        masks,
        provenance: String::new(),
    })
}

/// Keeps weights on relevant sites and scales the rest by `off_factor`.
pub fn gate_weights(
    pyramid: &MaskPyramid,
    base: &[Vec<f64>],
    off_factor: f64,
) -> Result<Vec<Vec<f64>>> {
    if base.len() != pyramid.masks.len() {
        return Err(VarlError::ShapeMismatch(format!(
            "{} weight rows for {} masks",
            base.len(),
            pyramid.masks.len()
        )));
    }
    pyramid
        .masks
        .iter()
        .zip(base)
        .map(|(m, w)| {
            if w.len() != m.cells.len() {
                return Err(VarlError::ShapeMismatch(format!(
                    "{} weights for a {:?} mask",
                    w.len(),
                    m.shape
                )));
            }
            Ok(w.iter()
                .zip(&m.cells)
                .map(|(&x, &on)| if on { x } else { x * off_factor })
                .collect())
        })
        .collect()
}
