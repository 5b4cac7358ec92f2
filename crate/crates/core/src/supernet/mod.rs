//! Weight-sharing quantized network and its training loop.

mod model;
mod policy;
mod topology;
mod train;

pub use model::{
    count_correct, BnMode, EvalReport, ForwardOut, IdmSlots, LayerSlots, ParamInfo, ParamRole, RunningStats,
    Supernet, BN_EPS, BN_MOMENTUM,
};
pub use policy::{
    fairness_decay_mask, sample_policy, BitPair, BitSpace, FreezeEntry, FreezeMask, LayerBits, Policy,
    PolicySampler, RngState, SamplerConfig,
};
pub use topology::{content_hash, LayerOp, LayerSpec, ResolvedLayer, Topology};
pub use train::{PolicyLoss, StepMetrics, TrainConfig, Trainer};
