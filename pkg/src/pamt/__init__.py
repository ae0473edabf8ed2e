"""Parameter-efficient bag-of-patches training over a frozen conv backbone.

The public surface is the estimator (:class:`PamtClassifier`), the pipeline
functions (``run_pipeline``, ``fit_pipeline``), the synthetic data tools, and
the metric helpers; the ``pamt`` console command drives the same pipeline
from the shell.
"""

from .backbone import BackboneConfig
from .data import (
    SyntheticConfig,
    WsiBag,
    generate_dataset,
    load_dataset,
    save_dataset,
    split_dataset,
)
from .errors import (
    ConfigError,
    DataError,
    EmptyBagError,
    NonFiniteError,
    PamtError,
    ShapeMismatchError,
)
from .metrics import auc, evaluate, f1_acc, fraction_curve, report
from .model import PamtClassifier
from .training import (
    STRATEGIES,
    Components,
    FittedPipeline,
    RunResult,
    TrainConfig,
    fit_pipeline,
    run_pipeline,
)

__version__ = "0.1.0"

__all__ = [
    "PamtClassifier",
    "BackboneConfig",
    "SyntheticConfig",
    "WsiBag",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
    "split_dataset",
    "TrainConfig",
    "Components",
    "STRATEGIES",
    "FittedPipeline",
    "RunResult",
    "fit_pipeline",
    "run_pipeline",
    "auc",
    "f1_acc",
    "evaluate",
    "report",
    "fraction_curve",
    "PamtError",
    "ConfigError",
    "DataError",
    "EmptyBagError",
    "NonFiniteError",
    "ShapeMismatchError",
    "__version__",
]
