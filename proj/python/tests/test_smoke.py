# Copyright (c) 2026, The tristream authors
# SPDX-License-Identifier: Apache-2.0

import itertools
import math
import pathlib

import numpy as np
import pytest

import tristream

DATA = pathlib.Path(__file__).resolve().parents[2] / "tests" / "data"


def test_vocab_layout():
    v = tristream.build_vocab(64, 32)
    assert v.blank_id == 96
    assert v.total_size == 97
    assert v.classify(0) == "text"
    assert v.classify(64) == "unit"
    assert v.classify(96) == "blank"
    with pytest.raises(tristream.ConfigError):
        tristream.build_vocab(3, 1)


def _enumerate(logits, target, blank):
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    total = 0.0
    for path in itertools.product(range(logits.shape[1]), repeat=logits.shape[0]):
        if tristream.collapse(list(path), blank) == target:
            total += np.prod([probs[t, s] for t, s in enumerate(path)])
    return -math.log(total)


def test_ctc_loss_against_enumeration():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(4, 3))
    loss, grad = tristream.ctc_loss(logits, [0, 1], 2)
    assert abs(loss - _enumerate(logits, [0, 1], 2)) < 1e-9
    assert grad.shape == (4, 3)
    # gradient rows of a softmax-normalized loss sum to zero
    assert np.allclose(grad.sum(axis=1), 0.0, atol=1e-12)


def test_greedy_decode_counts():
    eye = np.eye(3) * 5
    out = tristream.ctc_greedy_decode(eye[[2, 0, 0, 2, 1]], 2, 2)
    assert out["prefix_counts"] == [0, 1, 1, 1, 2]
    assert out["text"] == [0, 1]


def test_codec_round_trip():
    codec = tristream.Codec(tristream.build_vocab(64, 96), 7)
    text = [9, 9, 40, 12]
    units = codec.tokenize(text)
    assert len(text) <= len(units) <= 4 * len(text)
    assert codec.decode(units) == text
    assert codec.decode(units[1:]) is None


def test_metrics_and_windows():
    assert tristream.word_error_rate(list(range(10)), list(range(9)) + [42]) == pytest.approx(0.1)
    assert tristream.fusion_window(4, 5, 10) == (1, 5)
    assert tristream.fusion_window(0, 5, 10) == (1, 1)


def test_records_are_deterministic():
    a = tristream.generate_records(3, "dev", 5)
    assert a == tristream.generate_records(3, "dev", 5)
    assert len(a) == 5
    assert all("task" in r and "target_text" in r for r in a)


def test_gradcheck_passes():
    passed, groups = tristream.gradcheck(1, 1)
    assert passed
    assert max(groups.values()) < 1e-3


def test_stream_trace():
    model = tristream.Model(str(DATA / "golden.ckpt"))
    assert model.stage == 3
    events = model.stream(input_units=[70, 71, 80, 100], speech_output=True, wait_k=1)
    assert events[-1]["kind"] == "Eos"
    assert [list(e) for e in events[:1]] == [["step", "kind", "payload", "wall_ns"]]
    kinds = [e["kind"] for e in events]
    if "SpeechUnit" in kinds:
        assert kinds[: kinds.index("SpeechUnit")].count("TextToken") == 1
    again = model.stream(input_units=[70, 71, 80, 100], speech_output=True, wait_k=1)
    assert events == again
    with pytest.raises(tristream.DataError):
        model.stream(input_units=[3])
