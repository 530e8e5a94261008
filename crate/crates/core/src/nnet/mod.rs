//! Small trainable networks: parameter storage, a conditioned MLP with a
//! hand-written reverse pass, embeddings and the optimizer.

mod adam;
mod embed;
mod mlp;
mod params;

pub use adam::{adam_step, lr_at, AdamHyper, AdamState, LrSchedule};
pub use embed::{StageEmbedding, TimeEmbedding};
pub use mlp::{Activation, InputGrads, Mlp, MlpTrace, NetSpec, LAYER_NORM_EPS};
pub use params::{Init, LayoutEntry, ParamBuilder, ParameterSet, Slot};
pub(crate) use params::{view, view_mut};
