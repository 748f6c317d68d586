"""Dual-view contrastive pre-training and structure prompt tuning for graphs."""

from .autodiff import (
    AdamState,
    CsrMatrix,
    Tape,
    Tensor,
    absolute,
    adam_step,
    add,
    backward,
    concat_rows,
    cosine_sim_matrix,
    dropout,
    elementwise,
    exp,
    grad_check,
    log,
    matmul,
    mul,
    relu,
    row_sum,
    rsqrt,
    scale,
    select_rows,
    spmm,
    sub,
    total_sum,
    transpose,
)
from .data import (
    Checkpoint,
    SplitSpec,
    TunedPrompt,
    export_weight_matrix,
    generate_sbm,
    load_checkpoint,
    load_node_dataset,
    load_tu_dataset,
    mask_training_labels,
    sample_k_shot,
    save_checkpoint,
    save_node_dataset,
)
from .encoders import EncoderParams, freeze, gnn_forward, init_encoder_params, mlp_forward
from .errors import (
    ContractError,
    DataError,
    DimensionError,
    FormatError,
    NumericError,
    ParameterError,
    PspError,
)
from .graph import (
    GraphData,
    PromptedGraph,
    augment_prompted,
    build_csr,
    gcn_normalize,
    mean_readout,
    normalize_prompted,
)
from .inference import Prediction, evaluate, np_prototypes, predict
from .pretrain import PretrainConfig, ntxent_pretrain_loss, pretrain
from .prompt import (
    LabeledSet,
    PromptConfig,
    graph_task_views,
    init_edge_weights,
    init_prototype_features,
    prompt_loss,
    prompt_tune,
    prototype_embeddings,
    restrict_edge_ratio,
)

__version__ = "0.1.0"
