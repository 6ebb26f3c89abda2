"""Similarity-condition embeddings with a data-driven mask weighting branch.

A general encoder maps raw item features into a shared space, a bank of
learnable masks carves that space into semantic subspaces, and a weight
branch decides, per comparison, how much each subspace matters.  The
package bundles the model, a composite triplet objective with exact
gradients, a deterministic trainer, synthetic planted-condition data, and
evaluation harnesses for triplet error, outfit compatibility, and
fill-in-the-blank tasks.
"""

from .autodiff import (
    GradCheckReport,
    ParamSet,
    Tensor,
    affine_forward,
    check_gradients,
    euclidean_distance,
    hadamard,
    softmax,
)
from .data import (
    FilteredData,
    FitbQuestion,
    FitbSet,
    Item,
    ItemTable,
    Outfit,
    OutfitSet,
    SyntheticData,
    SyntheticSpec,
    Triplet,
    TripletSet,
    filter_categories,
    generate_synthetic,
    hash_text_features,
    inject_noise,
    load_feature_table,
    load_fitb,
    load_outfits,
    load_triplets,
    save_feature_table,
    save_fitb,
    save_outfits,
    save_triplets,
)
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    InputError,
    IoError,
    NumericError,
    ParseError,
    SceError,
    UnknownIdError,
    ValidationError,
)
from .evaluation import (
    BASELINE_KINDS,
    AblationResult,
    EvalReport,
    ablation_sweep,
    compatibility_auc,
    condition_purity,
    evaluate,
    export_condition_embeddings,
    fitb_accuracy,
    load_condition_embeddings,
    make_baseline,
    outfit_score,
    read_report,
    roc_auc,
    top_k_compatible,
    triplet_error_rate,
    write_report,
)
from .losses import (
    LossWeights,
    TripletBatch,
    gradient_suite,
    l1_mask_penalty,
    l2_embedding_penalty,
    objective_tensor,
    sim_loss,
    total_objective,
    triplet_loss,
    vse_loss,
)
from .model import (
    SceModel,
    apply_masks,
    compose_embedding,
    load_model,
    save_model,
)
from .training import (
    Adam,
    TrainConfig,
    TrainHistory,
    adam_step,
    build_model,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
