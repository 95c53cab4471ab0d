"""Cross-modality dense correspondence: tensors, model, data, metrics, CLI."""

__version__ = "0.1.0"
