//! The scene graph model: object-relational embedding, global context
//! encoding, edge-relational embedding, geometric layout encoding, the
//! relation head, and the three training losses.

pub mod config;
pub mod forward;
pub mod graph;
pub mod layout;
pub mod loss;
pub mod params;

pub use config::{EdgeInput, ModelConfig, RowOp, Similarity};
pub use forward::{
    build_graph, check_model_gradients, check_scene, forward, loss_and_gradients, model_loss_fn,
    GraphVars, Gradients, LossTerms, ModelOutput,
};
pub use layout::geometric_layout;
pub use params::{layout as param_layout, BoundParams, ModelParams, ParamKind, ParamSpec};
