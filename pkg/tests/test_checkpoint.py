"""Tests for checkpoint persistence."""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from patchrec.checkpoint import (
    BLOB_FILE, MANIFEST_FILE, TRAINER_STATE_FILE, checkpoint_roundtrip, checkpoints_equal, load_checkpoint,
    read_arrays, save_checkpoint, write_arrays,
)
from patchrec.model import ModelState, loss
from patchrec.optim import OptimizerState, optimizer_step
from patchrec.utils import CheckpointCorruptError


class TestRoundTrip:
    """Save / load fidelity."""

    @pytest.mark.integration
    def test_parameters_bit_exact(self, tmp_path, tiny_model):
        """Every parameter survives save and load unchanged, bit for bit."""
        restored = checkpoint_roundtrip(tiny_model, tmp_path / "ckpt")
        assert restored.config == tiny_model.config
        for name, p in tiny_model.params.items():
            assert restored[name].data.tobytes() == p.data.tobytes()

    @pytest.mark.integration
    def test_loss_identical_after_reload(self, tmp_path, tiny_context, tiny_model, text_config):
        """A reloaded state computes exactly the same loss."""
        layout = tiny_context.builder.build([1, 2, 3], text_config, target_item=4)
        before = loss(tiny_model, layout, tiny_context.title_tokens).item()
        restored = checkpoint_roundtrip(tiny_model, tmp_path / "ckpt")
        assert loss(restored, layout, tiny_context.title_tokens).item() == before

    @pytest.mark.integration
    def test_optimizer_moments_restored(self, tmp_path, tiny_context, tiny_model, text_config):
        """Moments, settings and the step counter come back with the model."""
        layout = tiny_context.builder.build([1, 2], text_config, target_item=3)
        optimizer = OptimizerState(lr=0.01, total_steps=10)
        loss(tiny_model, layout, tiny_context.title_tokens).backward()
        optimizer_step(optimizer, tiny_model.parameters())

        save_checkpoint(tmp_path / "ckpt", tiny_model, optimizer, {"plan": "demo"})
        checkpoint = load_checkpoint(tmp_path / "ckpt")
        restored = checkpoint.optimizer()
        assert checkpoint.trainer_state["plan"] == "demo"
        assert restored.step == 1
        assert restored.settings() == optimizer.settings()
        for name in tiny_model.params:
            np.testing.assert_array_equal(restored.m[name], optimizer.m[name])
            np.testing.assert_array_equal(restored.v[name], optimizer.v[name])

    @pytest.mark.integration
    def test_no_optimizer_saved(self, tmp_path, tiny_model):
        """A bare model checkpoint has no optimizer to rebuild."""
        save_checkpoint(tmp_path / "ckpt", tiny_model)
        assert load_checkpoint(tmp_path / "ckpt").optimizer() is None

    @pytest.mark.integration
    def test_resave_without_optimizer_drops_trainer_state(self, tmp_path, tiny_model):
        """Overwriting a full checkpoint with a bare one leaves no stale trainer state behind."""
        directory = tmp_path / "ckpt"
        save_checkpoint(directory, tiny_model, OptimizerState(lr=0.01, total_steps=10), {"plan": "demo"})
        assert (directory / TRAINER_STATE_FILE).exists()

        save_checkpoint(directory, tiny_model)
        assert not (directory / TRAINER_STATE_FILE).exists()
        checkpoint = load_checkpoint(directory)
        assert checkpoint.trainer_state is None
        assert checkpoint.optimizer() is None

    @pytest.mark.integration
    def test_checkpoints_equal(self, tmp_path, tiny_model):
        """Identical states give byte-identical directories; another seed does not."""
        save_checkpoint(tmp_path / "a", tiny_model)
        save_checkpoint(tmp_path / "b", tiny_model)
        other = ModelState.initialize(tiny_model.config, seed=1)
        save_checkpoint(tmp_path / "c", other)
        assert checkpoints_equal(tmp_path / "a", tmp_path / "b")
        assert not checkpoints_equal(tmp_path / "a", tmp_path / "c")


class TestCorruption:
    """Damaged checkpoints are refused with CheckpointCorruptError."""

    @pytest.fixture
    def arrays_dir(self, tmp_path):
        return write_arrays(tmp_path / "arrays", {"a": np.arange(6.0).reshape(2, 3), "b": np.ones(4)})

    @pytest.mark.unit
    def test_arrays_roundtrip(self, arrays_dir):
        """Names, shapes and values come back in manifest order."""
        arrays = read_arrays(arrays_dir)
        assert list(arrays) == ["a", "b"]
        np.testing.assert_array_equal(arrays["a"], np.arange(6.0).reshape(2, 3))

    @pytest.mark.unit
    def test_truncated_blob(self, arrays_dir):
        """A blob shorter than the manifest says is corrupt."""
        blob = arrays_dir / BLOB_FILE
        blob.write_bytes(blob.read_bytes()[:-8])
        with pytest.raises(CheckpointCorruptError, match="'b'"):
            read_arrays(arrays_dir)

    @pytest.mark.unit
    def test_trailing_bytes(self, arrays_dir):
        """Extra bytes after the last array are corrupt."""
        blob = arrays_dir / BLOB_FILE
        blob.write_bytes(blob.read_bytes() + b"\x00" * 8)
        with pytest.raises(CheckpointCorruptError, match="trailing"):
            read_arrays(arrays_dir)

    @pytest.mark.unit
    def test_bad_header(self, arrays_dir):
        """An unknown manifest header is refused."""
        manifest = arrays_dir / MANIFEST_FILE
        manifest.write_text("# something-else v9\n", encoding="utf-8")
        with pytest.raises(CheckpointCorruptError, match="header"):
            read_arrays(arrays_dir)

    @pytest.mark.unit
    def test_malformed_entry(self, arrays_dir):
        """Manifest lines need name, shape and offset."""
        manifest = arrays_dir / MANIFEST_FILE
        lines = manifest.read_text(encoding="utf-8").splitlines()
        manifest.write_text("\n".join([lines[0], "a\t2,x\t0"]) + "\n", encoding="utf-8")
        with pytest.raises(CheckpointCorruptError, match="malformed"):
            read_arrays(arrays_dir)

    @pytest.mark.unit
    def test_missing_files(self, tmp_path):
        """A directory without the blob is corrupt."""
        (tmp_path / "empty").mkdir()
        with pytest.raises(CheckpointCorruptError, match="missing"):
            read_arrays(tmp_path / "empty")

    @pytest.mark.integration
    def test_missing_parameter(self, tmp_path, tiny_model):
        """A blob missing a parameter no longer matches its config."""
        save_checkpoint(tmp_path / "ckpt", tiny_model)
        arrays = read_arrays(tmp_path / "ckpt")
        arrays.pop("pos_emb")
        write_arrays(tmp_path / "ckpt", arrays)
        with pytest.raises(CheckpointCorruptError, match="model_config"):
            load_checkpoint(tmp_path / "ckpt")
