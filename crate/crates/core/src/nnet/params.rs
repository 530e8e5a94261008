use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Location of one named tensor inside a flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub slot: Slot,
}

/// Flat parameter vector plus the name → (offset, shape) layout that covers it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    values: Vec<f64>,
    layout: Vec<LayoutEntry>,
}

impl ParameterSet {
    pub fn from_parts(values: Vec<f64>, layout: Vec<LayoutEntry>) -> Result<Self> {
        let mut expected = 0;
        for e in &layout {
            if e.slot.offset != expected {
                return Err(Error::invalid(format!(
                    "layout entry {} starts at {}, expected {expected}",
                    e.name, e.slot.offset
                )));
            }
            expected += e.slot.len();
        }
        Error::check_dim(expected, values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameters"));
        }
        Ok(Self { values, layout })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &[LayoutEntry] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slot(&self, name: &str) -> Option<Slot> {
        self.layout.iter().find(|e| e.name == name).map(|e| e.slot)
    }

    pub fn view(&self, slot: Slot) -> ArrayView2<'_, f64> {
        view(&self.values, slot)
    }

    pub fn view_mut(&mut self, slot: Slot) -> ArrayViewMut2<'_, f64> {
        view_mut(&mut self.values, slot)
    }

    pub fn row(&self, slot: Slot) -> &[f64] {
        &self.values[slot.range()]
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.values.len()]
    }
}

pub(crate) fn view(values: &[f64], slot: Slot) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((slot.rows, slot.cols), &values[slot.range()]).expect("slot shape")
}

pub(crate) fn view_mut(values: &mut [f64], slot: Slot) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((slot.rows, slot.cols), &mut values[slot.range()]).expect("slot shape")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
}

pub struct ParamBuilder<'r, R: Rng> {
    values: Vec<f64>,
    layout: Vec<LayoutEntry>,
    rng: &'r mut R,
}

impl<'r, R: Rng> ParamBuilder<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Self {
            values: Vec::new(),
            layout: Vec::new(),
            rng,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init) -> Slot {
        let slot = Slot {
            offset: self.values.len(),
            rows,
            cols,
        };
        for _ in 0..slot.len() {
            let v = match init {
                Init::Zeros => 0.0,
                Init::Constant(c) => c,
                Init::Uniform(b) => (self.rng.random::<f64>() * 2.0 - 1.0) * b,
                Init::Normal(s) => s * self.rng.sample::<f64, _>(StandardNormal),
            };
            self.values.push(v);
        }
        self.layout.push(LayoutEntry {
            name: name.into(),
            slot,
        });
        slot
    }

    pub fn finish(self) -> ParameterSet {
        ParameterSet {
            values: self.values,
            layout: self.layout,
        }
    }
}
