pub mod agop;
pub mod aggregate;
pub mod io;
pub mod linear;
pub mod probe;
pub mod scoring;
pub mod search;

pub use agop::{compute_agop, eigendecompose_psd, feature_map, AgopMatrix, EigenBasis};
pub use aggregate::{stack_layer_outputs, train_aggregation_model};
pub use io::{load_probe, probe_from_json, probe_to_json, save_probe};
pub use linear::LinearProbe;
pub use probe::{
    rfm_train, ConceptProbe, Pooling, RfmConfig, SteeringDirection, Targets, TaskKind,
};
pub use scoring::{auc, Split};
pub use search::{
    hyperparameter_search, search_probe, HyperConfig, HyperSearchSpace, KernelFamily,
    SearchOutcome, TrialRecord,
};
