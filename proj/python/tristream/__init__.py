# Copyright (c) 2026, The tristream authors
# SPDX-License-Identifier: Apache-2.0
"""Python access to the tristream streaming tri-modal toy model."""

from ._core import (
    Codec,
    ConfigError,
    DataError,
    Model,
    NumericError,
    Vocab,
    build_vocab,
    collapse,
    ctc_greedy_decode,
    ctc_loss,
    edit_distance,
    fusion_window,
    generate_records,
    gradcheck,
    word_error_rate,
)

__all__ = [
    "Codec",
    "ConfigError",
    "DataError",
    "Model",
    "NumericError",
    "Vocab",
    "build_vocab",
    "collapse",
    "ctc_greedy_decode",
    "ctc_loss",
    "edit_distance",
    "fusion_window",
    "generate_records",
    "gradcheck",
    "word_error_rate",
]
