from .head import ProjectionHead
from .losses import batch_info_nce, info_nce, info_nce_batched, info_nce_grad, pretrain_loss
from .targets import DistillTriple, FeatureRef, same_view_negative, select_targets
from .train import DistillConfig, DistillResult, EpochMetrics, latent_alignment, train_distill

__all__ = [
    "DistillConfig",
    "DistillResult",
    "DistillTriple",
    "EpochMetrics",
    "FeatureRef",
    "ProjectionHead",
    "batch_info_nce",
    "info_nce",
    "info_nce_batched",
    "info_nce_grad",
    "latent_alignment",
    "pretrain_loss",
    "same_view_negative",
    "select_targets",
    "train_distill",
]
