//! Training losses, hard-negative mining, gradient checking and a small
//! full-batch trainer for the reranking head.

pub mod backprop;
pub mod gradcheck;
pub mod losses;
pub mod train;

pub use backprop::{cscc_backward, scc_backward, zeros_like, CsccGrads};
pub use gradcheck::{check_gradients, decision_margin, toy_instance, MIN_DECISION_MARGIN, BlockError, GradCheckInstance};
pub use losses::{
    mine_hard_negatives, rerank_cross_entropy, total_loss, triplet_loss, verify_gradient, verify_gradient_at,
    verify_gradient_detailed, LossWeights, RerankLabel, TripletBatch, DEFAULT_HARD_NEGATIVES, DEFAULT_MARGIN,
};
pub use train::{
    batch_loss, batch_loss_and_grad, bundled_toy_pairs, cosine_lr, descriptor_triplet_loss, pair_loss, pair_loss_and_grad, toy_train,
    Optimizer, RerankModel, ToyPair, ToyTrainConfig, TrainStep,
};
