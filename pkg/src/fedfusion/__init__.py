"""Training-free one-shot federated adaptation of vision-language embeddings."""

__version__ = "0.1.0"

from .embeddings import (  # noqa: F401
    ClassMeta,
    EmbeddingDataset,
    PromptBank,
    load_embeddings,
    load_prompt_bank,
    normalize,
    save_embeddings,
    save_prompt_bank,
)
from .suffstats import (  # noqa: F401
    ClassStats,
    ClientStatsMessage,
    compute_stats,
    merge,
    merge_messages,
    scatter,
)
from .bayes import (  # noqa: F401
    GDAClassifier,
    NIWPosterior,
    gda_fit,
    gda_predict,
    global_posterior,
    map_estimate,
    personalized_posterior,
    posterior_update,
    uninformative_prior,
)
from .textalign import (  # noqa: F401
    AlignedPromptWeights,
    ClientTextReport,
    align_scores,
    client_confidences,
    prefilter_prompts,
    text_predict,
)
from .fusion import (  # noqa: F401
    CalibrationResult,
    FusionModel,
    calibrate,
    confidence,
    fuse_predict,
    mixing_weight,
)
from .partition import ClientSplit, PartitionSpec, partition, synth_generate  # noqa: F401
from .orchestrator import EvalReport, MessageBus, RunConfig, evaluate, run_round  # noqa: F401
