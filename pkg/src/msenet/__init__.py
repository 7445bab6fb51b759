"""Multi-scale, attention-refined prototypical networks for few-shot classification."""

from .attention import (StageAttention, StageAttentionSet, apply_attention, attend_all_stages,
                        attention_weights, global_avg_pool, project_qkv)
from .backbone import ResNet18Backbone, TinyBackbone, forward_multiscale, load_pretrained, make_tiny_backbone
from .config import RunConfig, desk_config, load_config
from .data import (DatasetIndex, Episode, EpisodeSpec, ImageLoader, SplitSpec, build_index, make_splits,
                   preprocess, sample_episode)
from .engine import TrainState, init_params, load_checkpoint, save_checkpoint, train, train_step
from .evaluation import (ConfusionMatrix, EvalReport, confusion, cross_domain_eval, evaluate, export_samples,
                         run_ablation)
from .head import (aggregate_distances, class_posterior, compute_prototypes, episode_loss, predict,
                   stage_distances)
from .model import MSENet

__version__ = "0.1.0"
