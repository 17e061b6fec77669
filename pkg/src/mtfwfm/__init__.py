"""Multi-task field-weighted factorization machines for multi-type conversion prediction."""

from .errors import (
    AucUndefinedError, ConvTypeError, DataError, DivergenceError, EmptyBatchError, ExportError, MtfwfmError,
    SchemaError, SyntheticConfigError,
)
from .metrics import MetricsReport, auc, report
from .model import (
    ModelConfig, ModelKind, ModelParams, Prediction, forward, load_model, phi_3way_ctf, phi_fwfm, phi_mt_fwfm,
    predict, predict_proba, save_model, score,
)
from .schema import FieldSchema, InstanceSet, SparseInstance
from .trainer import TrainConfig, gradients, init_params, loss, sgd_step, train

__version__ = "0.1.0"
