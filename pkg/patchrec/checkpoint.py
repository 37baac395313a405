"""
Checkpoint - Bit-exact parameter persistence.

A checkpoint is a directory:
    manifest.txt       header line, then one line per array: name<TAB>shape<TAB>byte offset
    params.bin         every array concatenated as little-endian float64
    model_config.json  ModelConfig (with version and vocab fingerprint)
    trainer_state.json optional: optimizer settings/step, plan progress, RNG-free resume data

Optimizer moments are stored in the same blob as optim.m.<param> / optim.v.<param>.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

try:
    from patchrec.autograd import Tensor
    from patchrec.model import ModelConfig, ModelState
    from patchrec.optim import OptimizerState
    from patchrec.utils import CheckpointCorruptError, read_json, setup_logger, write_json
except ImportError:
    from autograd import Tensor
    from model import ModelConfig, ModelState
    from optim import OptimizerState
    from utils import CheckpointCorruptError, read_json, setup_logger, write_json

logger = setup_logger(__name__)

CHECKPOINT_FORMAT = "patchrec-checkpoint"
CHECKPOINT_VERSION = 1
MANIFEST_FILE = "manifest.txt"
BLOB_FILE = "params.bin"
CONFIG_FILE = "model_config.json"
TRAINER_STATE_FILE = "trainer_state.json"
DTYPE = np.dtype("<f8")
MOMENT_PREFIXES = ("optim.m.", "optim.v.")


@dataclass
class Checkpoint:
    state: ModelState
    moments: Dict[str, np.ndarray] = field(default_factory=dict)
    trainer_state: Optional[dict] = None
    path: Optional[Path] = None

    def optimizer(self) -> Optional[OptimizerState]:
        """Rebuild the optimizer saved with this checkpoint, if any."""
        if not self.trainer_state or "optimizer" not in self.trainer_state:
            return None
        opt = OptimizerState(**self.trainer_state["optimizer"])
        for key, array in self.moments.items():
            if key.startswith("optim.m."):
                opt.m[key[len("optim.m."):]] = array
            elif key.startswith("optim.v."):
                opt.v[key[len("optim.v."):]] = array
        return opt


# ============================================================================
# Blob + manifest
# ============================================================================

def write_arrays(directory: Path, arrays: Dict[str, np.ndarray]) -> Path:
    """Write the manifest and blob for named arrays, in the given order."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"# {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}"]
    offset = 0
    with open(directory / BLOB_FILE, "wb") as blob:
        for name, array in arrays.items():
            data = np.ascontiguousarray(array, dtype=DTYPE)
            shape = ",".join(str(s) for s in data.shape)
            lines.append(f"{name}\t{shape}\t{offset}")
            raw = data.tobytes(order="C")
            blob.write(raw)
            offset += len(raw)
    (directory / MANIFEST_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return directory


def read_arrays(directory: Path) -> Dict[str, np.ndarray]:
    """
    Read every array named in the manifest.

    Raises:
        CheckpointCorruptError: On a missing file, a malformed manifest or a blob
            whose size does not match the manifest.
    """
    directory = Path(directory)
    manifest_path, blob_path = directory / MANIFEST_FILE, directory / BLOB_FILE
    for path in (manifest_path, blob_path):
        if not path.exists():
            raise CheckpointCorruptError(f"checkpoint file missing: {path}")

    lines = manifest_path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != f"# {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}":
        raise CheckpointCorruptError(f"{manifest_path}: unknown header {lines[:1]}")
    blob = blob_path.read_bytes()

    arrays: Dict[str, np.ndarray] = {}
    expected_offset = 0
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            name, shape_text, offset_text = line.split("\t")
            shape = tuple(int(s) for s in shape_text.split(",")) if shape_text else ()
            offset = int(offset_text)
        except ValueError:
            raise CheckpointCorruptError(f"{manifest_path}:{line_no}: malformed entry {line!r}") from None
        if offset != expected_offset:
            raise CheckpointCorruptError(f"{manifest_path}:{line_no}: offset {offset}, expected {expected_offset}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * DTYPE.itemsize
        if offset + nbytes > len(blob):
            raise CheckpointCorruptError(
                f"{blob_path} holds {len(blob)} bytes but '{name}' needs bytes {offset}..{offset + nbytes}"
            )
        arrays[name] = np.frombuffer(blob, dtype=DTYPE, count=nbytes // DTYPE.itemsize, offset=offset).reshape(shape).astype(np.float64)
        expected_offset = offset + nbytes
    if expected_offset != len(blob):
        raise CheckpointCorruptError(f"{blob_path} has {len(blob) - expected_offset} trailing bytes")
    return arrays


# ============================================================================
# Model checkpoints
# ============================================================================

def save_checkpoint(directory: Path, state: ModelState, optimizer: Optional[OptimizerState] = None,
                    trainer_state: Optional[dict] = None) -> Path:
    """Persist the model (and optionally optimizer + trainer progress)."""
    arrays = {name: p.data for name, p in state.params.items()}
    if optimizer is not None:
        for name in state.params:
            if name in optimizer.m:
                arrays["optim.m." + name] = optimizer.m[name]
                arrays["optim.v." + name] = optimizer.v[name]
        trainer_state = dict(trainer_state or {})
        trainer_state["optimizer"] = optimizer.settings()
    directory = write_arrays(directory, arrays)
    write_json(directory / CONFIG_FILE, state.config.to_dict())
    trainer_path = directory / TRAINER_STATE_FILE
    if trainer_state is not None:
        write_json(trainer_path, trainer_state)
    elif trainer_path.exists():
        trainer_path.unlink()
    logger.debug(f"Saved checkpoint to {directory} ({state.num_parameters()} parameters)")
    return directory


def load_checkpoint(directory: Path) -> Checkpoint:
    directory = Path(directory)
    config_path = directory / CONFIG_FILE
    if not config_path.exists():
        raise CheckpointCorruptError(f"checkpoint file missing: {config_path}")
    config = ModelConfig.from_dict(read_json(config_path))
    arrays = read_arrays(directory)

    moments = {k: v for k, v in arrays.items() if k.startswith(MOMENT_PREFIXES)}
    params = {}
    for name in (k for k in arrays if not k.startswith(MOMENT_PREFIXES)):
        params[name] = Tensor(arrays[name], requires_grad=True, name=name)
    try:
        state = ModelState(config, params)
    except Exception as e:
        raise CheckpointCorruptError(f"{directory}: parameters do not match model_config.json: {e}") from e

    trainer_path = directory / TRAINER_STATE_FILE
    trainer_state = read_json(trainer_path) if trainer_path.exists() else None
    return Checkpoint(state=state, moments=moments, trainer_state=trainer_state, path=directory)


def checkpoint_roundtrip(state: ModelState, directory: Path) -> ModelState:
    """Save then load; the result equals the input bit for bit."""
    save_checkpoint(directory, state)
    return load_checkpoint(directory).state


def checkpoints_equal(a: Path, b: Path) -> bool:
    """Byte comparison of two checkpoints' manifests and blobs."""
    a, b = Path(a), Path(b)
    return all((a / f).read_bytes() == (b / f).read_bytes() for f in (MANIFEST_FILE, BLOB_FILE, CONFIG_FILE))
