//! Recursive feature machine probes over layerwise activations and
//! activation steering for autoregressive sequence models.

pub mod error;
pub mod kernel;
pub mod metrics;
pub mod model;
pub mod rfm;
pub mod rng;
pub mod steering;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use error::{Error, Result};
pub use kernel::{
    kernel_eval, kernel_matrix, ChannelMode, GradientBatch, KernelParams, KrrModel,
};
pub use metrics::{FeatureSet, Provenance, TemporalTrace, Tolerance, TraceOptions, TrendStats};
pub use model::{
    generate, ConceptKind, ConceptSpec, Dataset, FrozenModel, GenerationTrace, InjectionPoint,
    ModelConfig, RecordOptions,
};
pub use rfm::{
    ConceptProbe, EigenBasis, HyperConfig, HyperSearchSpace, LinearProbe, Pooling, RfmConfig,
    Split, SteeringDirection, Targets, TaskKind,
};
pub use steering::{
    LayerWeightScheme, PlanEntry, Schedule, ScheduleKind, SteeringPlan, WeightKind,
};
