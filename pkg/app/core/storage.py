"""Storage utilities for checkpoints, record files and run manifests.

This module handles all file I/O: fusor-v1 checkpoints (safetensors with the
config as JSON metadata), line-delimited JSON record files and the run
manifest written beside every command's outputs. Every write goes through a
temporary file in the target directory followed by an atomic replace.
"""

import json
import os
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, TypeVar

import torch
from pydantic import BaseModel, Field
from safetensors import safe_open
from safetensors.torch import save_file

from app.core.fusor import VisionFusor
from app.core.fusor_model import FUSOR_FORMAT_VERSION, FusorConfig
from app.logger import logger

RecordT = TypeVar("RecordT", bound=BaseModel)


class CheckpointFormatError(ValueError):
    """Raised when a checkpoint is not a readable fusor-v1 archive."""


class RunManifest(BaseModel):
    """Provenance written beside every command's output.

    Attributes:
        subcommand: CLI subcommand that produced the outputs
        config: Resolved configuration snapshot
        seed: Seed used by the run, if any
        tool_version: aesfusor version
        started_at: ISO-8601 start time (UTC)
        finished_at: ISO-8601 end time (UTC)
        outputs: Paths of the files written
        status: ok or failed
    """
    subcommand: str
    config: dict[str, Any] = Field(default_factory=dict)
    seed: int | None = None
    tool_version: str
    started_at: str
    finished_at: str | None = None
    outputs: list[str] = Field(default_factory=list)
    status: str = "ok"


def utc_now() -> str:
    """Current UTC time in ISO-8601 format."""
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def ensure_out_dir(out_dir: str | Path) -> Path:
    """Ensure an output directory exists.

    Args:
        out_dir: Directory to create

    Returns:
        The directory as a Path
    """
    path = Path(out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _atomic_write(path: Path, write) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    os.close(fd)
    try:
        write(Path(tmp_name))
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise
    return path


def atomic_write_text(path: str | Path, text: str) -> Path:
    """Write text to ``path`` atomically.

    Args:
        path: Destination file
        text: UTF-8 content

    Returns:
        Path to the written file
    """
    return _atomic_write(Path(path), lambda tmp: tmp.write_text(text, encoding="utf-8"))


def atomic_write_bytes(path: str | Path, data: bytes) -> Path:
    """Write bytes to ``path`` atomically."""
    return _atomic_write(Path(path), lambda tmp: tmp.write_bytes(data))


def to_json_line(record: BaseModel | dict[str, Any]) -> str:
    """Serialize one record as a JSON line (no trailing newline)."""
    data = record.model_dump(mode="json") if isinstance(record, BaseModel) else record
    return json.dumps(data, ensure_ascii=False)


def write_jsonl(path: str | Path, records: Iterable[BaseModel | dict[str, Any]]) -> Path:
    """Write records as line-delimited JSON, in iteration order.

    Args:
        path: Destination file
        records: Pydantic models or plain dictionaries

    Returns:
        Path to the written file
    """
    lines = [to_json_line(r) + "\n" for r in records]
    logger.debug(f"Writing {len(lines)} records to {path}")
    return atomic_write_text(path, "".join(lines))


def read_jsonl(path: str | Path, model_cls: type[RecordT]) -> list[RecordT]:
    """Read line-delimited JSON records, skipping blank lines.

    Args:
        path: Source file
        model_cls: Model each line validates into

    Returns:
        Parsed records in file order
    """
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(model_cls.model_validate_json(line))
            except ValueError:
                logger.error(f"Invalid record at {path}:{line_no}", exc_info=True)
                raise
    return records


def write_json(path: str | Path, data: BaseModel | dict[str, Any] | list[Any]) -> Path:
    """Write pretty-printed JSON atomically."""
    if isinstance(data, BaseModel):
        data = data.model_dump(mode="json")
    return atomic_write_text(path, json.dumps(data, indent=2, ensure_ascii=False) + "\n")


def save_checkpoint(
    model: VisionFusor,
    path: str | Path,
    extra_tensors: dict[str, torch.Tensor] | None = None,
    extra_metadata: dict[str, str] | None = None,
) -> Path:
    """Save a fusor as a fusor-v1 safetensors archive.

    Args:
        model: Fusor to save
        path: Destination ``.safetensors`` file
        extra_tensors: Additional tensors (e.g. a classifier head), stored
            under an ``extra.`` prefix
        extra_metadata: Additional string metadata

    Returns:
        Path to the written checkpoint
    """
    tensors = {name: t.detach().contiguous() for name, t in model.state_dict().items()}
    for name, t in (extra_tensors or {}).items():
        tensors[f"extra.{name}"] = t.detach().contiguous()
    metadata = dict(extra_metadata or {})
    metadata["format"] = FUSOR_FORMAT_VERSION
    metadata["config"] = json.dumps(model.config.to_dict(), sort_keys=True)
    _atomic_write(Path(path), lambda tmp: save_file(tensors, str(tmp), metadata=metadata))
    logger.info(f"Saved {FUSOR_FORMAT_VERSION} checkpoint with {len(tensors)} tensors to {path}")
    return Path(path)


def load_checkpoint(path: str | Path) -> tuple[VisionFusor, dict[str, torch.Tensor], dict[str, str]]:
    """Load a fusor-v1 checkpoint.

    Args:
        path: Checkpoint file

    Returns:
        Tuple of (fusor, extra tensors without prefix, metadata)

    Raises:
        CheckpointFormatError: If the version field or config is missing/wrong
    """
    with safe_open(str(path), framework="pt") as f:
        metadata = f.metadata() or {}
        tensors = {name: f.get_tensor(name) for name in f.keys()}
    if metadata.get("format") != FUSOR_FORMAT_VERSION:
        raise CheckpointFormatError(
            f"{path} is not a {FUSOR_FORMAT_VERSION} checkpoint (format={metadata.get('format')!r})"
        )
    if "config" not in metadata:
        raise CheckpointFormatError(f"{path} has no config metadata")
    config = FusorConfig.from_dict(json.loads(metadata["config"]))
    model = VisionFusor(config)
    extras = {name[len("extra."):]: t for name, t in tensors.items() if name.startswith("extra.")}
    state = {name: t for name, t in tensors.items() if not name.startswith("extra.")}
    if state:
        model.to(dtype=next(iter(state.values())).dtype)
    model.load_state_dict(state, strict=True)
    return model, extras, metadata


def write_manifest(out_dir: str | Path, manifest: RunManifest) -> Path:
    """Write ``run_manifest.json`` into ``out_dir`` atomically."""
    path = Path(out_dir) / "run_manifest.json"
    write_json(path, manifest)
    return path
