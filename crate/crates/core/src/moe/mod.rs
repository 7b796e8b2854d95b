//! Routed feed-forward layers: routers, auxiliary losses, and experts.

pub mod layer;
pub mod losses;
pub mod router;

pub use layer::{
    expert_forward, flops_report, Activation, ExpertFFN, ExpertParams, FlopsReport, MoeForward, MoeGraphOut,
    MoeLayer, MoeLayerConfig, MoeMode,
};
pub use losses::{
    grouped_load_balancing_loss, load_balancing_loss, load_balancing_on, load_biasing_loss, load_biasing_term_on,
    router_z_loss, router_z_loss_on, total_aux_loss, LossBundle, LossCoeffs,
};
pub use router::{
    argmax, dispatch_stats, dispatch_stats_tokens, group_weight_vector, route_dense, route_hard, route_hierarchical,
    select_topk, DispatchStats, Modality, RouterParams, RoutingDecision,
};
