"""Train an image encoder against frozen, precomputed caption embeddings.

The package covers the full loop: an on-disk embedding cache, a numpy ViT
with hand-written backward passes, contrastive and cosine alignment losses,
a small trainer with AdamW and cosine LR decay, retrieval-style evaluation,
a synthetic paired corpus for end-to-end checks, and an analytic FLOPs model
for the joint-vs-frozen training cost comparison.
"""

from .cache import (
    EmbeddingCache,
    bfloat16_decode,
    bfloat16_encode,
    build_cache,
    cache_summary,
    validate_cache,
)
from .costmodel import (
    CostReport,
    LangCostConfig,
    VisionCostConfig,
    compare_joint_vs_frozen,
    language_flops,
    reference_comparison,
    vision_flops,
)
from .data import SynthSpec, SyntheticImageSource, build_corpus
from .errors import (
    CacheError,
    CapalignError,
    ConfigError,
    CorruptCacheError,
    DegenerateInputError,
    DimensionMismatchError,
    DuplicateIdError,
    EmptyBatchError,
    EmptyPoolError,
    RangeError,
    ShapeError,
    UnknownIdError,
    ZeroVectorError,
)
from .evaluator import (
    AnchorSet,
    RetrievalPool,
    classify,
    pairwise_similarity_probe,
    pick_caption,
    retrieve_top1,
)
from .losses import (
    AlignedBatch,
    LossResult,
    Temperature,
    contrastive_loss,
    cosine_loss,
    l2_normalize_rows,
    similarity_matrix,
)
from .trainer import TrainConfig, TrainState, load_checkpoint, save_checkpoint
from .vision import EncoderParams, ViTConfig, forward, forward_backward, init_params

__version__ = "0.1.0"
