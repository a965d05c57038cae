"""Capsule-head network with inverted dynamic routing.

Thin wrapper around the C++ core: tensor/routing primitives, the margin
loss, activation-map utilities, detection metrics, and the full CLI
(`run_cli`) for dataset generation, training, evaluation and ablation.
"""

try:
    from . import _decaps as _core  # installed wheel layout
except ImportError:  # pragma: no cover - in-tree build, module on sys.path
    import _decaps as _core

ConfigError = _core.ConfigError
ContractError = _core.ContractError
DataError = _core.DataError
NumericError = _core.NumericError
ShapeError = _core.ShapeError

__version__ = _core.__version__

crop_bbox = _core.crop_bbox
idr_route = _core.idr_route
iou = _core.iou
margin_loss = _core.margin_loss
normalize_ham = _core.normalize_ham
roc_auc = _core.roc_auc
run_cli = _core.run_cli
softmax = _core.softmax
squash = _core.squash

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "NumericError",
    "ShapeError",
    "__version__",
    "crop_bbox",
    "idr_route",
    "iou",
    "margin_loss",
    "normalize_ham",
    "roc_auc",
    "run_cli",
    "softmax",
    "squash",
]
