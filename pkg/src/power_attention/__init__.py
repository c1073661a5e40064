"""Power attention at desk scale.

Linear attention whose similarity is the p-th power of the query-key
inner product, with three interchangeable state expansions (tpow / spow /
tspow), three equivalent computational forms (attention, recurrent,
chunked), per-timestep gating, fused score-sum normalization, analytic
gradients, FLOP accounting, and a benchmark CLI.
"""

from .attention import (
    AttentionConfig,
    AttentionOutput,
    Mechanism,
    SequenceBatch,
    attention,
    exp_attention,
    linear_attention_form,
    power_attention_form,
    window_attention,
)
from .chunked import (
    ChunkPlan,
    ChunkState,
    chunked_power_attention,
    discumsum,
    discumsum_states,
    power_attention,
    query_state,
    recurrent_power_attention,
    stream_chunk,
    update_state,
)
from .errors import (
    DimensionMismatch,
    InvalidSpec,
    NonFiniteInput,
    OddPowerWithNormalize,
    PowerAttentionError,
    ShapeMismatch,
    StateTooLarge,
    ZeroDenominator,
)
from .expansions import (
    ExpansionKind,
    ExpansionSpec,
    enumerate_ndmi,
    expand,
    expansion_dim,
    expansion_inner,
    multinomial_weight,
)
from .flops import (
    ArchSpec,
    FlopReport,
    count_flops_attention,
    count_flops_chunked,
    dense_transformer_params,
    state_flops,
    weight_flops,
    wsfr,
)
from .gradients import (
    GradBundle,
    expand_vjp,
    finite_difference_oracle,
    vjp_attention_form,
    vjp_chunked,
    vjp_power_attention,
)
from .kernels import available_backends, resolve_backend

__version__ = "0.1.0"

__all__ = [
    "ArchSpec",
    "AttentionConfig",
    "AttentionOutput",
    "ChunkPlan",
    "ChunkState",
    "DimensionMismatch",
    "ExpansionKind",
    "ExpansionSpec",
    "FlopReport",
    "GradBundle",
    "InvalidSpec",
    "Mechanism",
    "NonFiniteInput",
    "OddPowerWithNormalize",
    "PowerAttentionError",
    "SequenceBatch",
    "ShapeMismatch",
    "StateTooLarge",
    "ZeroDenominator",
    "attention",
    "available_backends",
    "chunked_power_attention",
    "count_flops_attention",
    "count_flops_chunked",
    "dense_transformer_params",
    "discumsum",
    "discumsum_states",
    "enumerate_ndmi",
    "exp_attention",
    "expand",
    "expand_vjp",
    "expansion_dim",
    "expansion_inner",
    "finite_difference_oracle",
    "linear_attention_form",
    "multinomial_weight",
    "power_attention",
    "power_attention_form",
    "query_state",
    "recurrent_power_attention",
    "resolve_backend",
    "state_flops",
    "stream_chunk",
    "update_state",
    "vjp_attention_form",
    "vjp_chunked",
    "vjp_power_attention",
    "weight_flops",
    "window_attention",
    "wsfr",
]
