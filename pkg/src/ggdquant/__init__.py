"""Fixed-point quantization of CNNs with gamma-modeled feature maps."""

from .bft import BftConfig, BftTrace, run_bft
from .errors import (
    AsymptoticDomainError,
    DegenerateStatsError,
    FormatError,
    InvalidSampleError,
    ModelError,
    QuantDomainError,
)
from .fixedpoint import (
    FixedPointFormat,
    QuantizationError,
    quantize,
    quantize_tensor,
    sqnr_db,
)
from .ggd import (
    GgdParams,
    QuantizerDesign,
    design_single_sided,
    design_symmetric,
    estimate_from_moments,
)
from .netsim import (
    LayerQuant,
    LayerSpec,
    NetworkModel,
    QuantConfig,
    forward_fixed,
    forward_float,
)
from .quantizers import (
    FlSearchConfig,
    LayerQuantResult,
    Mode,
    SampleStats,
    collect_stats,
)

__all__ = [
    "AsymptoticDomainError",
    "BftConfig",
    "BftTrace",
    "DegenerateStatsError",
    "FixedPointFormat",
    "FlSearchConfig",
    "FormatError",
    "GgdParams",
    "InvalidSampleError",
    "LayerQuant",
    "LayerQuantResult",
    "LayerSpec",
    "Mode",
    "ModelError",
    "NetworkModel",
    "QuantConfig",
    "QuantDomainError",
    "QuantizationError",
    "QuantizerDesign",
    "SampleStats",
    "collect_stats",
    "design_single_sided",
    "design_symmetric",
    "estimate_from_moments",
    "forward_fixed",
    "forward_float",
    "quantize",
    "quantize_tensor",
    "run_bft",
    "sqnr_db",
]
