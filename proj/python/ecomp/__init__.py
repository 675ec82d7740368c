"""Elastic low-rank / low-bit compression with certified drift bounds."""

from ._ecomp import (
    Manifest,
    ManifestError,
    __version__,
    expected_bytes,
    plan_synthetic,
    svd,
    train_toy,
)

__all__ = ["Manifest", "ManifestError", "expected_bytes", "plan_synthetic", "svd", "train_toy", "__version__"]
