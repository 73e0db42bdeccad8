//! temporary build shim while modules land
pub mod classifier;
pub mod error;
pub mod flow;
pub mod model_io;
pub mod nn;
pub mod rng;
pub mod tensor;
#[cfg(test)]
pub(crate) mod testsupport;

pub use classifier::{ClassifierConfig, ClassifierModel, Embedding};
pub use error::{Error, Result};
pub use flow::{generate, generate_batch, negative_log_likelihood, train_flow, CouplingLayer, FlowConfig, FlowModel, LocalNoise};
pub use tensor::{sqrtm_psd, sym_eig, SymmetricMatrix, Tape, Tensor, Var};
