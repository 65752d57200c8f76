//! Training losses with hand-derived adjoints.
//!
//! Every loss comes as a value function and a `*_grad` companion that also
//! returns the gradient with respect to each real-valued input. All of them
//! run in `f64` and reduce in a fixed order.

mod cc;
mod focal;
mod mi;
mod registration;
mod smooth;

pub use cc::{box_sum, local_cross_correlation, local_cross_correlation_grad, CCParams};
pub use focal::{binary_cross_entropy, focal_loss, focal_loss_grad, FocalParams, Reduction};
pub use mi::{mutual_information, mutual_information_grad, soft_entropy, MIParams};
pub use registration::{
    registration_loss, LossComponents, LossWeights, RegistrationGrad, RegistrationLoss,
};
pub use smooth::{smoothness_loss, smoothness_loss_grad, smoothness_loss_with, SmoothnessMode};
