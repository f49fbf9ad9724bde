"""Checkpoint binary format: round trips and distinct failure modes."""

import numpy as np
import pytest

from u2s import checkpoint as cp
from u2s.autodiff import OptimizerState
from u2s.csm import binarize_with_target_degree


def sample_checkpoint(with_csm=True):
    rng = np.random.default_rng(0)
    params = {
        "bottom.0.weight": rng.normal(size=(4, 8)),
        "bottom.0.bias": np.zeros(8),
        "un_head.weight": rng.normal(size=(8, 3)),
    }
    velocity = {k: rng.normal(size=v.shape) * 0.01 for k, v in params.items()}
    csm = None
    names = []
    if with_csm:
        base = rng.uniform(0, 1, size=(3, 3))
        s = (base + base.T) / 2
        np.fill_diagonal(s, 1.0)
        csm = binarize_with_target_degree(s, 1)
        names = ["a", "b", "c"]
    return cp.Checkpoint(
        fingerprint="f" * 64,
        stage="universal",
        params=params,
        optimizer=OptimizerState(learning_rate=0.1, momentum=0.9, weight_decay=1e-4,
                                 velocity=velocity),
        csm=csm,
        class_names=names,
    )


class TestRoundTrip:
    def test_load_save_preserves_every_tensor_bit_exactly(self, tmp_path):
        original = sample_checkpoint()
        path = tmp_path / "ck.bin"
        cp.save_checkpoint(path, original)
        loaded = cp.load_checkpoint(path)
        assert loaded.fingerprint == original.fingerprint
        assert loaded.stage == original.stage
        assert set(loaded.params) == set(original.params)
        for name in original.params:
            assert np.array_equal(loaded.params[name], original.params[name])
        for name in original.optimizer.velocity:
            assert np.array_equal(loaded.optimizer.velocity[name], original.optimizer.velocity[name])
        assert loaded.optimizer.learning_rate == original.optimizer.learning_rate
        assert np.array_equal(loaded.csm.S, original.csm.S)
        assert loaded.class_names == original.class_names

    def test_save_load_save_byte_identical(self, tmp_path):
        original = sample_checkpoint()
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        cp.save_checkpoint(p1, original)
        cp.save_checkpoint(p2, cp.load_checkpoint(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_without_csm(self, tmp_path):
        original = sample_checkpoint(with_csm=False)
        path = tmp_path / "ck.bin"
        cp.save_checkpoint(path, original)
        loaded = cp.load_checkpoint(path)
        assert loaded.csm is None and loaded.class_names == []


class TestErrors:
    def test_magic_mismatch(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(cp.CheckpointMagicError):
            cp.load_checkpoint(path)

    def test_truncation(self, tmp_path):
        path = tmp_path / "ck.bin"
        cp.save_checkpoint(path, sample_checkpoint())
        blob = path.read_bytes()
        for cut in (2, 10, len(blob) // 2, len(blob) - 3):
            path.write_bytes(blob[:cut])
            with pytest.raises(cp.CheckpointTruncatedError):
                cp.load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "ck.bin"
        cp.save_checkpoint(path, sample_checkpoint())
        blob = bytearray(path.read_bytes())
        blob[4] = 99  # little-endian version field
        path.write_bytes(bytes(blob))
        with pytest.raises(cp.CheckpointVersionError):
            cp.load_checkpoint(path)

    def test_trailing_garbage(self, tmp_path):
        path = tmp_path / "ck.bin"
        cp.save_checkpoint(path, sample_checkpoint())
        path.write_bytes(path.read_bytes() + b"x")
        with pytest.raises(cp.CheckpointError, match="trailing"):
            cp.load_checkpoint(path)

    def test_errors_are_distinct_types(self):
        kinds = {cp.CheckpointMagicError, cp.CheckpointTruncatedError, cp.CheckpointVersionError}
        assert len(kinds) == 3
        for k in kinds:
            assert issubclass(k, cp.CheckpointError)
