//! Weight-entangled once-for-all Transformer: search spaces, the maximal weight
//! store, subnet views and extraction, counting, and the checkpoint format.

pub mod checkpoint;
mod encoder;
mod frontend;
mod model;
pub mod params;
pub mod space;

pub use checkpoint::{Checkpoint, CheckpointMeta, Role};
pub use encoder::{Bound, EncoderOutput};
pub use frontend::run_frontend;
pub use model::{
    build_supernet, ForwardOutput, StandaloneModel, SubnetRunner, SupernetModel, SupernetView,
};
pub use params::{count_params, touched_extents, ParamCount, ParamSet};
pub use space::{
    count_subnets, ffn_hidden, max_subnet, min_subnet, sample_subnet, ConvLayerSpec, FrontendSpec,
    SearchSpace, SubnetConfig,
};
