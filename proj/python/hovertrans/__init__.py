from ._core import (
    Model,
    ModelConfig,
    confusion_metrics,
    delong_test,
    extract_foreground,
    lr_at,
    make_layered_dataset,
    resize_image,
    roc_auc,
    run_cli,
)

__all__ = [
    "Model",
    "ModelConfig",
    "confusion_metrics",
    "delong_test",
    "extract_foreground",
    "lr_at",
    "make_layered_dataset",
    "resize_image",
    "roc_auc",
    "run_cli",
]
