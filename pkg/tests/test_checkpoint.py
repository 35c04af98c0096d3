#!/usr/bin/env python3
"""
Unit tests for checkpoints and the history stream.
"""

import json
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from checkpoint import (
    FORMAT_VERSION,
    HistoryWriter,
    check_compatible,
    load_checkpoint,
    read_history,
    save_checkpoint,
)
from errors import IncompatibleCheckpointError
from graph import build_graph, from_pairs
from model import ABLATIONS, ParamSet, forward, init_params, score_all

PAIRS = [(10, 100), (10, 101), (11, 101), (11, 102), (12, 100), (12, 103)]


def rewrite_meta(path: Path, **changes) -> None:
    with np.load(path) as data:
        arrays = {name: data[name] for name in data.files}
    meta = json.loads(str(arrays.pop("meta")))
    meta.update(changes)
    with open(path, "wb") as f:
        np.savez(f, meta=np.array(json.dumps(meta)), **arrays)


class TestCheckpointRoundTrip:
    def setup_method(self):
        self.data = from_pairs(PAIRS)
        self.graph = build_graph(self.data)
        self.params = init_params(self.data.user_count, self.data.item_count, 4, seed=11)
        with torch.no_grad():
            self.params.gamma.fill_(0.25)
            self.params.gamma_prime.fill_(-0.125)
            self.params.lam.fill_(0.7)

    def save(self, path, flags=ABLATIONS["full"], **kwargs):
        return save_checkpoint(
            path, self.params, 2, flags, self.data.user_ids, self.data.item_ids, **kwargs
        )

    def test_tensors_are_bitwise_identical(self, tmp_path):
        path = self.save(tmp_path / "model.npz", split_hash="abc", config_hash="def")
        ckpt = load_checkpoint(path)
        for name in ParamSet.names():
            original = getattr(self.params, name).detach()
            restored = getattr(ckpt.params, name)
            assert restored.dtype == torch.float64
            assert torch.equal(original, restored)
        assert ckpt.layers == 2
        assert ckpt.dim == 4
        assert ckpt.split_hash == "abc"
        assert ckpt.config_hash == "def"
        np.testing.assert_array_equal(ckpt.user_ids, [10, 11, 12])
        np.testing.assert_array_equal(ckpt.item_ids, [100, 101, 102, 103])

    def test_restored_model_scores_identically(self, tmp_path):
        ckpt = load_checkpoint(self.save(tmp_path / "model.npz"))
        with torch.no_grad():
            before = score_all(forward(self.graph, self.params, 2), [0, 1, 2], self.params.lam)
            after = score_all(forward(self.graph, ckpt.params, ckpt.layers, ckpt.flags), [0, 1, 2], ckpt.params.lam)
        assert torch.equal(before, after)

    def test_flags_round_trip(self, tmp_path):
        ckpt = load_checkpoint(self.save(tmp_path / "model.npz", flags=ABLATIONS["euclidean-only"]))
        assert ckpt.flags == ABLATIONS["euclidean-only"]
        assert ckpt.flags.name == "euclidean-only"

    def test_extra_metadata(self, tmp_path):
        ckpt = load_checkpoint(self.save(tmp_path / "model.npz", extra={"epoch": 7, "dataset": "movielens"}))
        assert ckpt.meta["epoch"] == 7
        assert ckpt.meta["format_version"] == FORMAT_VERSION

    def test_no_tmp_file_left(self, tmp_path):
        self.save(tmp_path / "nested" / "model.npz")
        assert [p.name for p in (tmp_path / "nested").iterdir()] == ["model.npz"]

    def test_unknown_version(self, tmp_path):
        path = self.save(tmp_path / "model.npz")
        rewrite_meta(path, format_version=FORMAT_VERSION + 1)
        with pytest.raises(IncompatibleCheckpointError, match="version"):
            load_checkpoint(path)

    def test_width_mismatch(self, tmp_path):
        path = self.save(tmp_path / "model.npz")
        rewrite_meta(path, dim=8)
        with pytest.raises(IncompatibleCheckpointError):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "absent.npz")


class TestCheckCompatible:
    def setup_method(self):
        data = from_pairs(PAIRS)
        self.data = data
        params = init_params(data.user_count, data.item_count, 3, seed=0)
        self.path_args = (params, 1, ABLATIONS["full"], data.user_ids, data.item_ids)

    def test_matching(self, tmp_path):
        ckpt = load_checkpoint(save_checkpoint(tmp_path / "m.npz", *self.path_args, split_hash="h1"))
        check_compatible(ckpt, self.data.user_ids, self.data.item_ids, "h1")

    def test_other_split(self, tmp_path):
        ckpt = load_checkpoint(save_checkpoint(tmp_path / "m.npz", *self.path_args, split_hash="h1"))
        with pytest.raises(IncompatibleCheckpointError, match="split"):
            check_compatible(ckpt, self.data.user_ids, self.data.item_ids, "h2")

    def test_other_catalog_size(self, tmp_path):
        ckpt = load_checkpoint(save_checkpoint(tmp_path / "m.npz", *self.path_args))
        with pytest.raises(IncompatibleCheckpointError):
            check_compatible(ckpt, self.data.user_ids, np.array([100, 101, 102]), None)

    def test_other_ids(self, tmp_path):
        ckpt = load_checkpoint(save_checkpoint(tmp_path / "m.npz", *self.path_args))
        with pytest.raises(IncompatibleCheckpointError, match="id maps"):
            check_compatible(ckpt, np.array([10, 11, 13]), self.data.item_ids, None)

    def test_shape_checked_when_given(self, tmp_path):
        ckpt = load_checkpoint(save_checkpoint(tmp_path / "m.npz", *self.path_args))
        check_compatible(ckpt, self.data.user_ids, self.data.item_ids, None, dim=3, layers=1)
        with pytest.raises(IncompatibleCheckpointError, match="dimension"):
            check_compatible(ckpt, self.data.user_ids, self.data.item_ids, None, dim=8)
        with pytest.raises(IncompatibleCheckpointError, match="layers"):
            check_compatible(ckpt, self.data.user_ids, self.data.item_ids, None, layers=3)


class TestHistory:
    def test_write_and_read(self, tmp_path):
        path = tmp_path / "run" / "history.jsonl"
        writer = HistoryWriter(path)
        writer.write({"epoch": 1, "loss": 0.69, "recall@20": None})
        writer({"epoch": 2, "loss": 0.5, "recall@20": 0.1})
        records = read_history(path)
        assert [r["epoch"] for r in records] == [1, 2]
        assert records[0]["recall@20"] is None

    def test_lines_have_sorted_keys(self, tmp_path):
        path = tmp_path / "history.jsonl"
        HistoryWriter(path).write({"loss": 0.1, "epoch": 1})
        assert path.read_text() == '{"epoch": 1, "loss": 0.1}\n'

    def test_truncates_by_default(self, tmp_path):
        path = tmp_path / "history.jsonl"
        HistoryWriter(path).write({"epoch": 1})
        HistoryWriter(path).write({"epoch": 1})
        assert len(read_history(path)) == 1

    def test_append_mode(self, tmp_path):
        path = tmp_path / "history.jsonl"
        HistoryWriter(path).write({"epoch": 1})
        HistoryWriter(path, truncate=False).write({"epoch": 2})
        assert [r["epoch"] for r in read_history(path)] == [1, 2]
