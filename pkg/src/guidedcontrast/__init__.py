"""Contrastive point cloud pretraining with guided augmentation sampling and
structure-aware feature mapping between augmented views."""

from .augmentation import (
    AppliedRecord,
    Augmentation,
    AugmentationError,
    AugRanges,
    Crop,
    Jitter,
    apply,
    aug_distance,
    invert_apply,
    sample_random,
)
from .config import ConfigError, TrainConfig, load_config
from .contrastive import batch_loss, cosine_sim, loss_backward, nt_xent_pair_loss
from .encoder import EncoderParams, backward, encode, forward, init_params, pool_project
from .gfm import gather_features, structural_map
from .guided import AugMemoryBank, novelty_score, pair_for_sample, select_novel
from .pointcloud import PointCloud, PointCloudError, SpatialIndex, load_xyz, save_xyz, synth_shape
from .probe import linear_probe
from .trainer import ablation_run, pretrain

__version__ = "0.1.0"
