"""Checkpoint container: manifest JSON plus raw little-endian float64 blobs

Layout of one checkpoint directory:

    manifest.json             format version, seeds, configs, parameter shapes
    student/<name>.f64        hierarchical policy parameters
    imitation/<name>.f64      imitation model parameters
    teacher.json              teacher state (clusters, Exp3 weights, normaliser)
"""

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from spclab.core.imitation import ImitationModel
from spclab.core.numerics import ParamStore
from spclab.core.student import HierarchicalPolicy, StudentConfig
from spclab.core.teacher import Teacher
from spclab.utils.errors import CheckpointError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
BLOB_DTYPE = "<f8"


@dataclass
class Checkpoint:
    """Everything restored from one checkpoint directory"""
    policy: HierarchicalPolicy
    imitation: Optional[ImitationModel]
    teacher: Optional[Teacher]
    manifest: Dict


def _write_store(store: ParamStore, directory: Path) -> Dict[str, Dict]:
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, param in store.items():
        filename = f"{name}.f64"
        np.ascontiguousarray(param.data, dtype=BLOB_DTYPE).tofile(directory / filename)
        entries[name] = {"shape": list(param.shape), "file": filename}
    return entries


def _read_store(entries: Dict[str, Dict], directory: Path) -> Dict[str, np.ndarray]:
    values = {}
    for name, entry in entries.items():
        path = directory / entry["file"]
        if not path.is_file():
            raise CheckpointError(f"Missing parameter blob: {path}")
        raw = np.fromfile(path, dtype=BLOB_DTYPE)
        shape = tuple(entry["shape"])
        if raw.size != int(np.prod(shape)):
            raise CheckpointError(
                f"Blob {path} holds {raw.size} values, manifest expects shape {shape}"
            )
        values[name] = raw.reshape(shape).astype(np.float64)
    return values


def save_checkpoint(
    directory: Union[str, Path],
    policy: HierarchicalPolicy,
    imitation: Optional[ImitationModel] = None,
    teacher: Optional[Teacher] = None,
    metadata: Optional[Dict] = None,
) -> str:
    """Write a checkpoint directory

    Returns:
        Path to the directory
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "student": {
            "observation_dim": policy.observation_dim,
            "config": asdict(policy.config),
            "policy_version": policy.version,
            "params": _write_store(policy.store, directory / "student"),
        },
        "metadata": metadata or {},
    }
    if imitation is not None:
        manifest["imitation"] = {
            "observation_dim": imitation.observation_dim,
            "hidden_dim": imitation.hidden_dim,
            "action_count": imitation.action_count,
            "params": _write_store(imitation.store, directory / "imitation"),
        }
    if teacher is not None:
        (directory / "teacher.json").write_text(
            json.dumps(teacher.to_dict(), indent=2) + "\n", encoding="utf-8"
        )
        manifest["teacher"] = "teacher.json"
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    logger.info("Wrote checkpoint %s", directory)
    return str(directory)


def load_checkpoint(directory: Union[str, Path]) -> Checkpoint:
    """Restore policy, imitation model and teacher from a checkpoint directory

    Raises:
        CheckpointError: If the directory, manifest or a blob is missing or corrupt
    """
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise CheckpointError(f"No checkpoint manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"Corrupt checkpoint manifest {manifest_path}: {e}")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"Unsupported checkpoint format {manifest.get('format_version')!r}"
        )

    student = manifest["student"]
    policy = HierarchicalPolicy(student["observation_dim"], StudentConfig(**student["config"]))
    policy.store.load(_read_store(student["params"], directory / "student"))
    policy.version = int(student["policy_version"])

    imitation = None
    if "imitation" in manifest:
        meta = manifest["imitation"]
        imitation = ImitationModel(meta["observation_dim"], meta["hidden_dim"],
                                   meta["action_count"])
        imitation.store.load(_read_store(meta["params"], directory / "imitation"))

    teacher = None
    if "teacher" in manifest:
        teacher_path = directory / manifest["teacher"]
        if not teacher_path.is_file():
            raise CheckpointError(f"Missing teacher state {teacher_path}")
        teacher = Teacher.from_dict(json.loads(teacher_path.read_text(encoding="utf-8")))
    return Checkpoint(policy, imitation, teacher, manifest)


def latest_checkpoint(run_dir: Union[str, Path]) -> Path:
    """Newest round_<k> checkpoint of a run (or the directory itself if it is one)

    Raises:
        CheckpointError: If no checkpoint exists
    """
    run_dir = Path(run_dir)
    if (run_dir / "manifest.json").is_file():
        return run_dir
    rounds = sorted(
        (p for p in (run_dir / "checkpoints").glob("round_*") if p.is_dir()),
        key=lambda p: int(p.name.split("_")[1]),
    )
    if not rounds:
        raise CheckpointError(f"No checkpoint found under {run_dir}")
    return rounds[-1]
