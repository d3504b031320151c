"""Reference model exporter and cross-implementation oracle."""

from .export import ExportResult, ExportSpec, train_and_export
from .reference import (
    Divergence,
    first_divergence,
    parse_dataset,
    parse_mapping,
    parse_model,
    reference_infer,
)

__version__ = "0.1.0"
