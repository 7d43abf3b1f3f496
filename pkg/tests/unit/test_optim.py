"""Tests for the parameter tree, Adam and checkpoints."""

import json
from pathlib import Path

import numpy as np
import pytest

from adapt_asr import tensor as T
from adapt_asr.errors import ContractError, CorpusFormatError, DependencyError
from adapt_asr.optim import (
    AdamState,
    ModelParams,
    adam_step,
    component_rng,
    load_checkpoint,
    save_checkpoint,
)
from adapt_asr.tensor import Tape


def _scalar_params(value: float) -> ModelParams:
    params = ModelParams()
    params.add("p", np.array([value]))
    return params


class TestModelParams:
    def test_duplicate_path_rejected(self) -> None:
        params = _scalar_params(1.0)
        with pytest.raises(ContractError, match="already exists"):
            params.add("p", np.zeros(1))

    def test_subtree_and_without(self) -> None:
        params = ModelParams()
        params.add("encoder.a", np.zeros(2))
        params.add("encoder.b", np.zeros(3))
        params.add("joint.c", np.zeros(1))
        assert list(params.subtree("encoder")) == ["encoder.a", "encoder.b"]
        assert list(params.without("encoder")) == ["joint.c"]
        assert params.n_parameters == 6

    def test_load_matching_copies_shape_matches_only(self) -> None:
        target = ModelParams()
        target.add("encoder.a", np.zeros(2))
        target.add("encoder.b", np.zeros(3))
        target.add("joint.c", np.zeros(1))
        source = ModelParams()
        source.add("encoder.a", np.ones(2))
        source.add("encoder.b", np.ones(4))
        source.add("joint.c", np.ones(1))
        copied = target.load_matching(source, prefix="encoder.")
        assert copied == ["encoder.a"]
        np.testing.assert_array_equal(target["encoder.a"].data, [1.0, 1.0])
        np.testing.assert_array_equal(target["joint.c"].data, [0.0])

    def test_copy_is_independent(self) -> None:
        params = _scalar_params(1.0)
        clone = params.copy()
        clone["p"].data[0] = 5.0
        assert params["p"].data[0] == 1.0

    def test_component_rng_depends_on_path(self) -> None:
        a = component_rng(0, "encoder.input").normal(size=3)
        b = component_rng(0, "joint.out").normal(size=3)
        again = component_rng(0, "encoder.input").normal(size=3)
        assert not np.array_equal(a, b)
        assert np.array_equal(a, again)


class TestAdam:
    def test_zero_grad_leaves_params(self) -> None:
        params = _scalar_params(1.0)
        state = AdamState.for_params(params)
        adam_step(params, state, lr=0.1)
        assert params["p"].data[0] == 1.0
        assert state.step == 1

    def test_descends(self) -> None:
        params = _scalar_params(1.0)
        params["p"].grad = np.array([1.0])
        state = AdamState.for_params(params)
        adam_step(params, state, lr=0.1)
        assert params["p"].data[0] < 1.0

    def test_converges_on_quadratic(self) -> None:
        params = _scalar_params(0.0)
        p = params["p"]
        state = AdamState.for_params(params)
        for _ in range(200):
            params.zero_grad()
            with Tape() as tape:
                diff = T.sub(p, T.Tensor(np.array([3.0])))
                tape.backward(T.sum(T.mul(diff, diff)))
            adam_step(params, state, lr=0.1)
        assert abs(p.data[0] - 3.0) < 1e-2

    def test_non_finite_grad_skipped_and_counted(self) -> None:
        params = _scalar_params(1.0)
        params.add("q", np.array([2.0]))
        params["p"].grad = np.array([np.nan])
        params["q"].grad = np.array([1.0])
        state = AdamState.for_params(params)
        adam_step(params, state, lr=0.1)
        assert params["p"].data[0] == 1.0
        assert params["q"].data[0] < 2.0
        assert state.skipped_updates == 1
        assert state.m["p"][0] == 0.0

    def test_clip_norm_bounds_first_step(self) -> None:
        clipped = _scalar_params(0.0)
        clipped["p"].grad = np.array([100.0])
        state = AdamState.for_params(clipped)
        adam_step(clipped, state, lr=0.1, clip_norm=1.0)
        assert state.m["p"][0] == pytest.approx(0.1)

    def test_moment_shape_mismatch(self) -> None:
        params = _scalar_params(1.0)
        state = AdamState.for_params(params)
        params["p"].data = np.zeros(2)
        with pytest.raises(ContractError, match="moment buffer"):
            adam_step(params, state, lr=0.1)


class TestCheckpoint:
    def test_round_trip_is_bitwise(self, tmp_path: Path) -> None:
        params = ModelParams()
        params.add("encoder.w", np.random.default_rng(0).normal(size=(3, 4)))
        path = save_checkpoint(params, tmp_path / "ckpt.npz", {"stage": "test"})
        loaded, meta = load_checkpoint(path)
        assert np.array_equal(loaded["encoder.w"].data, params["encoder.w"].data)
        assert loaded["encoder.w"].requires_grad
        assert meta["stage"] == "test"

    def test_missing_checkpoint(self, tmp_path: Path) -> None:
        with pytest.raises(DependencyError):
            load_checkpoint(tmp_path / "absent.npz")

    def test_garbage_file(self, tmp_path: Path) -> None:
        path = tmp_path / "bad.npz"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(CorpusFormatError):
            load_checkpoint(path)

    def test_version_mismatch(self, tmp_path: Path) -> None:
        path = tmp_path / "old.npz"
        meta = np.array(json.dumps({"format_version": 0}))
        with open(path, "wb") as f:
            np.savez(f, w=np.zeros(2), __meta__=meta)
        with pytest.raises(CorpusFormatError, match="format version"):
            load_checkpoint(path)
