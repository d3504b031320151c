"""Weight-to-approximation mapping for quantized CNNs.

The package searches per-layer weight-to-multiplier-mode mappings that
maximize energy gain while a user query over the per-batch accuracy-drop
trace stays satisfied.
"""

from .engine import (
    Batch,
    Layer,
    QuantModel,
    QuantTensor,
    TableMul,
    UniformMul,
    conv2d_q,
    count_multiplications,
    dense_q,
    exact_mul,
    infer_batch,
    products_per_weight,
)
from .errors import AxmapError, FormatError, InternalError, QueryError, ValidationError
from .mapping import (
    FractionVectors,
    LayerRanges,
    Utilization,
    WeightHistogram,
    energy_gain,
    layer_histogram,
    mapped_multiplier,
    mode_for_weight,
    model_ranges,
    ranges_from_fractions,
    read_mapping,
    utilization,
    utilization_by_layer,
    write_mapping,
)
from .mining import (
    MiningConfig,
    MiningResult,
    TestRecord,
    anneal,
    evaluate_mapping,
    initial_fractions,
    pareto_front,
    propose,
    reevaluate,
    run_mining,
)
from .model_io import (
    Dataset,
    batches_for,
    load_dataset,
    load_idx_pair,
    load_model,
    save_dataset,
    save_model,
)
from .multipliers import (
    AxMode,
    AxMultiplier,
    ErrorProfile,
    builtin_truncation,
    default_multiplier,
    error_profile,
    exact_table,
    load_lut,
    save_lut,
)
from .queries import (
    Query,
    Trace,
    conjuncts,
    consequent,
    consequent_robustness,
    parse_query,
    read_trace,
    robustness,
    satisfies,
    write_trace,
)

__version__ = "0.1.0"
