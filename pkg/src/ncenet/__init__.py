"""Continual generalized category discovery with neighborhood-commonality learning and contrastive distillation."""
from .bckd import BckdConfig, DistillPair, bckd_loss, sa_loss, ta_loss
from .data import SessionStream, StreamConfig, augment_views, generate_synthetic_stream, load_embedding_dataset, save_embedding_dataset
from .estimator import NCENet
from .evaluation import EvalReport, KmeansConfig, hungarian_acc, kmeans_cluster, session_report, subset_acc
from .model import ModelConfig, ModelState, forward, init_model, load_checkpoint, save_checkpoint, snapshot_teacher
from .ncrl import NcrlConfig, ncrl_loss, ncrl_objective
from .objectives import BaseLossConfig, BlendConfig, base_objective, blend, total_objective
from .pipeline import RunConfig, load_config, resolve_config, run_stream
from .training import TrainConfig, train_base_session, train_incremental_session

__version__ = "0.1.0"
