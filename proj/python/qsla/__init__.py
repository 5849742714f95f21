# SPDX-License-Identifier: Apache-2.0
"""Quad-stream LSTM-attention modulation classifier."""

from ._core import (
    accuracy_by_snr,
    average_precision,
    generate,
    param_count,
    pr_curve,
    read_dataset,
    run,
    spearman,
    variants,
)

__all__ = [
    "accuracy_by_snr",
    "average_precision",
    "generate",
    "param_count",
    "pr_curve",
    "read_dataset",
    "run",
    "spearman",
    "variants",
]
