"""Training against non-differentiable evaluation metrics.

Two strategies are provided: a hand-crafted differentiable relaxation of
recall@k (smooth sorting and counting, similarity mixup, chunked large-batch
gradients) and a learned deep-embedding surrogate of edit distance with
alternating training and ramp-based sample filtering. Exact metric oracles,
a contrastive classification loss with prototype readout, and a synthetic
experiment harness round out the package.
"""

from .autodiff import (
    DomainError,
    Graph,
    GraphMeter,
    Optimizer,
    ShapeMismatch,
    Tensor,
    grad_check,
    graph_meter,
)
from .metrics import (
    Box,
    LabeledEmbeddings,
    SymbolSeq,
    edit_distance,
    edit_distance_naive,
    iou_axis_aligned,
    iou_monte_carlo,
    iou_rotated,
    knn_classify,
    recall_at_k,
    total_edit_distance,
)
from .rsk import (
    BatchPlan,
    SimilarityBlock,
    SmoothParams,
    chunked_gradients,
    rsk_loss,
    sample_batch,
    similarity_matrix,
    simix_expand,
    smooth_heaviside,
    smooth_rank,
)
from .esupcon import ClassifierPrototypes, esupcon_loss, predict_proba, supcon_loss
from .learned import (
    RampFilter,
    SurrogateNet,
    TaskModel,
    alternate_train,
    decode_greedy,
    encode,
    feds_weight,
    fit_surrogate_step,
    surrogate_value,
)

__version__ = "0.1.0"
