"""Merge LoRA adapters and search for negative modules worth pruning.

The library merges per-task low-rank adapter checkpoints with six merging
algorithms and searches, via CMA-ES over a budgeted binary mask, for the
module-level updates whose removal improves merged multi-task fitness.
"""

from .adapters import (
    NAMING_SCHEMES,
    AdapterCheckpoint,
    ModuleGrid,
    NamingScheme,
    build_grid,
    delta_matrix,
    load_adapter,
    load_delta,
    save_delta,
)
from .cmaes import CmaState, cma_ask, cma_init, cma_tell
from .config import AdapterEntry, EvaluatorSpec, RunConfig, load_config, parse_config
from .errors import (
    AdapterSchemaError,
    CheckpointError,
    ConfigError,
    EvaluatorCrashError,
    EvaluatorError,
    EvaluatorProtocolError,
    EvaluatorRemoteError,
    EvaluatorTimeoutError,
    GridStructureError,
    LoraMergeError,
    MaskFormatError,
    SearchAbortedError,
    ShapeMismatchError,
    TensorFileError,
    UnsupportedMethodError,
)
from .fitness import (
    BuiltinEvaluator,
    ExpertScores,
    ExternalEvaluator,
    fitness,
    normalized_accuracy,
)
from .masks import PruningMask, map_latent, mask_from_json, mask_to_json
from .merge import MergedDelta, MergeParams, merge_with_mask, preset_params
from .search import (
    ExhaustiveResult,
    GreedyResult,
    LeaveOneOutResult,
    RandomReport,
    SearchConfig,
    SearchResult,
    TraceRow,
    exhaustive_search,
    greedy_prune,
    leave_one_out,
    random_prune,
    random_report,
    run_search,
)
from .testbed import (
    SyntheticTestbed,
    TestbedSpec,
    export_testbed,
    load_testbed,
    make_testbed,
)

__version__ = "0.1.0"

__all__ = [
    "AdapterCheckpoint",
    "AdapterEntry",
    "AdapterSchemaError",
    "BuiltinEvaluator",
    "CheckpointError",
    "CmaState",
    "ConfigError",
    "EvaluatorCrashError",
    "EvaluatorError",
    "EvaluatorProtocolError",
    "EvaluatorRemoteError",
    "EvaluatorSpec",
    "EvaluatorTimeoutError",
    "ExhaustiveResult",
    "ExpertScores",
    "ExternalEvaluator",
    "GreedyResult",
    "GridStructureError",
    "LeaveOneOutResult",
    "LoraMergeError",
    "MaskFormatError",
    "MergeParams",
    "MergedDelta",
    "ModuleGrid",
    "NAMING_SCHEMES",
    "NamingScheme",
    "PruningMask",
    "RandomReport",
    "RunConfig",
    "SearchAbortedError",
    "SearchConfig",
    "SearchResult",
    "ShapeMismatchError",
    "SyntheticTestbed",
    "TensorFileError",
    "TestbedSpec",
    "TraceRow",
    "UnsupportedMethodError",
    "build_grid",
    "cma_ask",
    "cma_init",
    "cma_tell",
    "delta_matrix",
    "exhaustive_search",
    "export_testbed",
    "fitness",
    "greedy_prune",
    "leave_one_out",
    "load_adapter",
    "load_config",
    "load_delta",
    "load_testbed",
    "make_testbed",
    "map_latent",
    "mask_from_json",
    "mask_to_json",
    "merge_with_mask",
    "normalized_accuracy",
    "parse_config",
    "preset_params",
    "random_prune",
    "random_report",
    "run_search",
    "save_delta",
]
