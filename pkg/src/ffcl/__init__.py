"""Forward-forward contrastive learning on a small numpy autodiff engine.

Blocks are first trained with their own local contrastive losses, then end to
end with a global contrastive loss, and finally fine-tuned as a binary
classifier. See ``ffcl.pipeline`` for the five training modes.
"""

__version__ = "0.1.0"

from .config import GRID_MODES, PipelineConfig, PipelineMode, load_config, parse_config
from .contrastive import ContrastiveStageConfig, cosine_embedding_loss, global_pretrain, local_pretrain
from .data import Dataset, SplitSpec, SyntheticSpec, gen_synthetic, load_idx, write_idx
from .metrics import MetricsReport, evaluate, macro_metrics, roc_auc
from .network import DEFAULT_BACKBONE, BlockSpec, BlockStack, build_model
from .pipeline import ablation_grid, finetune_classify, run_pipeline
from .tensor import Tensor, no_grad

__all__ = [
    "__version__",
    "BlockSpec", "BlockStack", "ContrastiveStageConfig", "DEFAULT_BACKBONE", "Dataset", "GRID_MODES",
    "MetricsReport", "PipelineConfig", "PipelineMode", "SplitSpec", "SyntheticSpec", "Tensor",
    "ablation_grid", "build_model", "cosine_embedding_loss", "evaluate", "finetune_classify", "gen_synthetic",
    "global_pretrain", "load_config", "load_idx", "local_pretrain", "macro_metrics", "no_grad", "parse_config",
    "roc_auc", "run_pipeline", "write_idx",
]
