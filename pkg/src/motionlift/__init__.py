"""Dual-stream Transformer-GCN pose lifter with masked self-distillation pre-training."""

from .autograd import Tensor, no_grad
from .checkpoint import Checkpoint, load_backbone, load_checkpoint, model_from_checkpoint, save_checkpoint
from .config import RunConfig, load_run_config, parse_run_config
from .errors import (CheckpointMismatch, ConfigError, DataError, GradcheckError, MotionLiftError,
                     NumericError, ShapeError)
from .finetune import FinetuneConfig, finetune_loop
from .metrics import EvalReport, evaluate, metric_auc, metric_mpjpe, metric_pck, metric_pmpjpe, metric_top1
from .network import Model, NetworkConfig
from .pretrain import PretrainConfig, TeacherState, pretrain_loop
from .skeleton import (JointTopology, PoseSequence, default_h36m_topology, generate_synthetic_dataset,
                       read_dataset, write_dataset)

__version__ = "0.1.0"
