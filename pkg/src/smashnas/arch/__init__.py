from .config import SearchSpaceConfig
from .dot import to_graphviz
from .encoding import (
    CORRUPTION_MODES,
    BlockLayout,
    EmptyArchitectureError,
    EncodingError,
    EncodingTensor,
    NoOpCorruptionWarning,
    corrupt_encoding,
    decode,
    encode,
    encoding_shape,
    layer_windows,
    row_extent,
)
from .patterns import canonical_pattern, fractal_program
from .sampling import BudgetError, PerturbationError, perturb, sample_architecture
from .spec import ArchitectureSpec, BlockSpec, OpSpec, generated_count, param_count, validate

__all__ = [
    "ArchitectureSpec",
    "BlockLayout",
    "BlockSpec",
    "BudgetError",
    "CORRUPTION_MODES",
    "EmptyArchitectureError",
    "EncodingError",
    "EncodingTensor",
    "NoOpCorruptionWarning",
    "OpSpec",
    "PerturbationError",
    "SearchSpaceConfig",
    "canonical_pattern",
    "corrupt_encoding",
    "decode",
    "encode",
    "encoding_shape",
    "fractal_program",
    "generated_count",
    "layer_windows",
    "param_count",
    "perturb",
    "row_extent",
    "sample_architecture",
    "to_graphviz",
    "validate",
]
