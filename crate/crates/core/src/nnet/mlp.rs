//! Conditioned MLP with adaptive layer normalization.
//!
//! Each hidden layer computes `affine → activation → layer norm`, then scales
//! and shifts the normalized features with vectors predicted by an affine map
//! of the conditioning input. The reverse pass is written out by hand against
//! the activations recorded in [`MlpTrace`].

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{view, view_mut, Init, ParamBuilder, ParameterSet, Slot};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// tanh approximation of GELU
    Gelu,
    Tanh,
    Identity,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                let th = u.tanh();
                0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_dim: usize,
    /// Width of an auxiliary input that is linearly projected and added to the
    /// first layer's pre-activation (0 disables it).
    pub aux_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub cond_dim: usize,
    pub activation: Activation,
    pub layer_norm: bool,
}

impl NetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() {
            return Err(Error::invalid("a network needs at least one hidden layer"));
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::invalid("network widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct HiddenSlots {
    w: Slot,
    b: Slot,
    scale_w: Option<Slot>,
    scale_b: Slot,
    shift_w: Option<Slot>,
    shift_b: Slot,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: NetSpec,
    aux_w: Option<Slot>,
    hidden: Vec<HiddenSlots>,
    out_w: Slot,
    out_b: Slot,
}

/// Activations recorded by [`Mlp::forward_traced`] for the reverse pass.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    input: Array2<f64>,
    aux: Option<Array2<f64>>,
    cond: Option<Array2<f64>>,
    layers: Vec<LayerTrace>,
    last_hidden: Array2<f64>,
}

#[derive(Debug, Clone)]
struct LayerTrace {
    layer_input: Array2<f64>,
    pre: Array2<f64>,
    normed: Array2<f64>,
    inv_std: Array1<f64>,
    scale: Array2<f64>,
}

/// Gradients with respect to the non-parameter inputs of a traced forward pass.
#[derive(Debug, Clone)]
pub struct InputGrads {
    pub input: Array2<f64>,
    pub aux: Option<Array2<f64>>,
    pub cond: Option<Array2<f64>>,
}

impl Mlp {
    /// Allocates the network's parameters under `prefix` with fan-in uniform
    /// initialization and identity-initialized conditioning projections.
    pub fn build<R: Rng>(spec: NetSpec, builder: &mut ParamBuilder<'_, R>, prefix: &str) -> Result<Self> {
        spec.validate()?;
        let fan = |n: usize| Init::Uniform(1.0 / (n as f64).sqrt());
        let aux_w = (spec.aux_dim > 0).then(|| {
            builder.add(format!("{prefix}.aux.w"), spec.aux_dim, spec.hidden_dims[0], fan(spec.aux_dim))
        });
        let mut hidden = Vec::with_capacity(spec.hidden_dims.len());
        let mut prev = spec.input_dim;
        for (l, &h) in spec.hidden_dims.iter().enumerate() {
            let w = builder.add(format!("{prefix}.hidden{l}.w"), prev, h, fan(prev));
            let b = builder.add(format!("{prefix}.hidden{l}.b"), 1, h, Init::Zeros);
            let cond = spec.cond_dim;
            let scale_w = (cond > 0).then(|| builder.add(format!("{prefix}.hidden{l}.scale_w"), cond, h, Init::Zeros));
            let scale_b = builder.add(format!("{prefix}.hidden{l}.scale_b"), 1, h, Init::Constant(1.0));
            let shift_w = (cond > 0).then(|| builder.add(format!("{prefix}.hidden{l}.shift_w"), cond, h, Init::Zeros));
            let shift_b = builder.add(format!("{prefix}.hidden{l}.shift_b"), 1, h, Init::Zeros);
            hidden.push(HiddenSlots {
                w,
                b,
                scale_w,
                scale_b,
                shift_w,
                shift_b,
            });
            prev = h;
        }
        let out_w = builder.add(format!("{prefix}.out.w"), prev, spec.output_dim, fan(prev));
        let out_b = builder.add(format!("{prefix}.out.b"), 1, spec.output_dim, Init::Zeros);
        Ok(Self {
            spec,
            aux_w,
            hidden,
            out_w,
            out_b,
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    /// Slots of the final affine layer `(weights, bias)`.
    pub fn output_slots(&self) -> (Slot, Slot) {
        (self.out_w, self.out_b)
    }

    /// Slots that map conditioning to scale: `(weight, bias)` per hidden layer.
    pub fn scale_slots(&self) -> Vec<(Option<Slot>, Slot)> {
        self.hidden.iter().map(|h| (h.scale_w, h.scale_b)).collect()
    }

    pub fn shift_slots(&self) -> Vec<(Option<Slot>, Slot)> {
        self.hidden.iter().map(|h| (h.shift_w, h.shift_b)).collect()
    }

    fn check_inputs(&self, x: &ArrayView2<f64>, aux: Option<&ArrayView2<f64>>, cond: Option<&ArrayView2<f64>>) -> Result<()> {
        let b = x.nrows();
        Error::check_dim(self.spec.input_dim, x.ncols())?;
        match (self.spec.aux_dim, aux) {
            (0, None) => {}
            (0, Some(a)) => Error::check_dim(0, a.ncols())?,
            (d, Some(a)) => {
                Error::check_dim(d, a.ncols())?;
                Error::check_dim(b, a.nrows())?;
            }
            (d, None) => return Err(Error::DimensionMismatch { expected: d, actual: 0 }),
        }
        match (self.spec.cond_dim, cond) {
            (0, None) => {}
            (0, Some(c)) => Error::check_dim(0, c.ncols())?,
            (d, Some(c)) => {
                Error::check_dim(d, c.ncols())?;
                Error::check_dim(b, c.nrows())?;
            }
            (d, None) => return Err(Error::DimensionMismatch { expected: d, actual: 0 }),
        }
        let finite = x.iter().all(|v| v.is_finite())
            && aux.is_none_or(|a| a.iter().all(|v| v.is_finite()))
            && cond.is_none_or(|c| c.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::NonFinite("network input"));
        }
        Ok(())
    }

    /// Batched forward pass; rows of `x`, `aux` and `cond` are examples.
    pub fn forward(
        &self,
        params: &ParameterSet,
        x: ArrayView2<f64>,
        aux: Option<ArrayView2<f64>>,
        cond: Option<ArrayView2<f64>>,
    ) -> Result<Array2<f64>> {
        self.forward_impl(params, x, aux, cond, false).map(|(y, _)| y)
    }

    pub fn forward_traced(
        &self,
        params: &ParameterSet,
        x: ArrayView2<f64>,
        aux: Option<ArrayView2<f64>>,
        cond: Option<ArrayView2<f64>>,
    ) -> Result<(Array2<f64>, MlpTrace)> {
        self.forward_impl(params, x, aux, cond, true)
            .map(|(y, t)| (y, t.expect("trace requested")))
    }

    fn forward_impl(
        &self,
        params: &ParameterSet,
        x: ArrayView2<f64>,
        aux: Option<ArrayView2<f64>>,
        cond: Option<ArrayView2<f64>>,
        record: bool,
    ) -> Result<(Array2<f64>, Option<MlpTrace>)> {
        self.check_inputs(&x, aux.as_ref(), cond.as_ref())?;
        let aux = aux.filter(|_| self.spec.aux_dim > 0);
        let cond = cond.filter(|_| self.spec.cond_dim > 0);
        let act = self.spec.activation;
        let mut layers = Vec::new();
        let mut h = x.to_owned();
        for (l, slots) in self.hidden.iter().enumerate() {
            let mut pre = h.dot(&params.view(slots.w));
            pre += &params.view(slots.b).row(0);
            if l == 0 {
                if let (Some(a), Some(aw)) = (aux.as_ref(), self.aux_w) {
                    general_mat_mul(1.0, a, &params.view(aw), 1.0, &mut pre);
                }
            }
            let mut normed = pre.mapv(|v| act.apply(v));
            let mut inv_std = Array1::<f64>::ones(normed.nrows());
            if self.spec.layer_norm {
                for (mut row, inv) in normed.outer_iter_mut().zip(inv_std.iter_mut()) {
                    let n = row.len() as f64;
                    let mean = row.sum() / n;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    *inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let s = *inv;
                    row.mapv_inplace(|v| (v - mean) * s);
                }
            }
            let (scale, shift) = self.modulation(params, slots, cond.as_ref(), normed.nrows());
            let mut out = &normed * &scale;
            out += &shift;
            if record {
                layers.push(LayerTrace {
                    layer_input: h,
                    pre,
                    normed,
                    inv_std,
                    scale,
                });
            }
            h = out;
        }
        let mut y = h.dot(&params.view(self.out_w));
        y += &params.view(self.out_b).row(0);
        let trace = record.then(|| MlpTrace {
            input: x.to_owned(),
            aux: aux.map(|a| a.to_owned()),
            cond: cond.map(|c| c.to_owned()),
            layers,
            last_hidden: h,
        });
        Ok((y, trace))
    }

    fn modulation(
        &self,
        params: &ParameterSet,
        slots: &HiddenSlots,
        cond: Option<&ArrayView2<f64>>,
        batch: usize,
    ) -> (Array2<f64>, Array2<f64>) {
        let width = slots.b.cols;
        let mut scale = Array2::<f64>::zeros((batch, width));
        let mut shift = Array2::<f64>::zeros((batch, width));
        scale += &params.view(slots.scale_b).row(0);
        shift += &params.view(slots.shift_b).row(0);
        if let Some(c) = cond {
            if let (Some(sw), Some(hw)) = (slots.scale_w, slots.shift_w) {
                general_mat_mul(1.0, c, &params.view(sw), 1.0, &mut scale);
                general_mat_mul(1.0, c, &params.view(hw), 1.0, &mut shift);
            }
        }
        (scale, shift)
    }

    /// Reverse pass: accumulates parameter gradients of a scalar loss into
    /// `grads` (aligned with the parameter vector) given `d_out = ∂loss/∂y`.
    pub fn backward(
        &self,
        params: &ParameterSet,
        trace: &MlpTrace,
        d_out: ArrayView2<f64>,
        grads: &mut [f64],
    ) -> Result<InputGrads> {
        Error::check_dim(params.len(), grads.len())?;
        Error::check_dim(self.spec.output_dim, d_out.ncols())?;
        Error::check_dim(trace.input.nrows(), d_out.nrows())?;
        if trace.layers.len() != self.hidden.len() {
            return Err(Error::invalid("trace does not belong to this network"));
        }
        let values = params.values();
        let act = self.spec.activation;

        general_mat_mul(1.0, &trace.last_hidden.t(), &d_out, 1.0, &mut view_mut(grads, self.out_w));
        add_col_sums(&d_out, view_mut(grads, self.out_b));
        let mut dh = d_out.dot(&view(values, self.out_w).t());

        let mut d_cond = trace
            .cond
            .as_ref()
            .map(|c| Array2::<f64>::zeros(c.raw_dim()));
        let mut d_aux = None;

        for (l, (slots, lt)) in self.hidden.iter().zip(&trace.layers).enumerate().rev() {
            // adaptive scale/shift
            let d_scale = &dh * &lt.normed;
            add_col_sums(&d_scale.view(), view_mut(grads, slots.scale_b));
            add_col_sums(&dh.view(), view_mut(grads, slots.shift_b));
            if let (Some(c), Some(dc)) = (trace.cond.as_ref(), d_cond.as_mut()) {
                let sw = slots.scale_w.expect("cond slots");
                let hw = slots.shift_w.expect("cond slots");
                general_mat_mul(1.0, &c.t(), &d_scale, 1.0, &mut view_mut(grads, sw));
                general_mat_mul(1.0, &c.t(), &dh, 1.0, &mut view_mut(grads, hw));
                general_mat_mul(1.0, &d_scale, &view(values, sw).t(), 1.0, dc);
                general_mat_mul(1.0, &dh, &view(values, hw).t(), 1.0, dc);
            }
            let mut dn = dh;
            dn *= &lt.scale;

            // layer norm
            let mut dg = dn;
            if self.spec.layer_norm {
                Zip::from(dg.axis_iter_mut(Axis(0)))
                    .and(lt.normed.axis_iter(Axis(0)))
                    .and(&lt.inv_std)
                    .for_each(|mut drow, nrow, &inv| {
                        let n = drow.len() as f64;
                        let mean_d = drow.sum() / n;
                        let mean_dn = drow.iter().zip(nrow.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                        Zip::from(&mut drow).and(&nrow).for_each(|d, &nv| {
                            *d = inv * (*d - mean_d - nv * mean_dn);
                        });
                    });
            }

            // activation
            let mut da = dg;
            Zip::from(&mut da).and(&lt.pre).for_each(|d, &p| *d *= act.derivative(p));

            general_mat_mul(1.0, &lt.layer_input.t(), &da, 1.0, &mut view_mut(grads, slots.w));
            add_col_sums(&da.view(), view_mut(grads, slots.b));
            if l == 0 {
                if let (Some(a), Some(aw)) = (trace.aux.as_ref(), self.aux_w) {
                    general_mat_mul(1.0, &a.t(), &da, 1.0, &mut view_mut(grads, aw));
                    d_aux = Some(da.dot(&view(values, aw).t()));
                }
            }
            dh = da.dot(&view(values, slots.w).t());
        }

        Ok(InputGrads {
            input: dh,
            aux: d_aux,
            cond: d_cond,
        })
    }
}

fn add_col_sums(m: &ArrayView2<f64>, mut out: ndarray::ArrayViewMut2<f64>) {
    let mut row = out.row_mut(0);
    for r in m.outer_iter() {
        row += &r;
    }
}
