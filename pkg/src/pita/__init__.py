"""Relative ingredient amount prediction from precomputed food embeddings."""

from .core import (
    Dataset,
    RecipeRecord,
    Vocabulary,
    detection_from_amounts,
    load_dataset,
    read_matrix,
    relative_amounts,
    save_dataset,
    write_matrix,
)
from .groups import (
    SubstitutionModel,
    apply_verdicts,
    build_distance_matrix,
    build_group_distance_matrix,
    build_substitution_model,
    collapse_amounts,
    collapse_detection,
    connected_components,
    propose_pairs,
)
from .metrics import RecipeMetrics, brute_force_common_count, common_count, cvg, group_metrics, iou, recipe_metrics
from .nn import (
    AdamState,
    MlpModel,
    adam_step,
    amount_ce_loss,
    init_adam,
    init_mlp,
    load_checkpoint,
    mlp_backward,
    mlp_forward,
    positive_weight,
    positive_weights,
    save_checkpoint,
    triplet_retrieval_loss,
    weighted_bce_loss,
)
from .pipeline import (
    PipelineConfig,
    TrainedPipeline,
    detect,
    evaluate,
    predict,
    predict_batch,
    top_k_threshold,
    train_ap,
    train_id,
    uniform_baseline_amounts,
)
from .retrieval import PairedFeatures, project, train_projection
from .transport import SinkhornConfig, TransportProblem, TransportResult, emd_metric, exact_emd, sinkhorn, sinkhorn_batch

__version__ = "0.1.0"
