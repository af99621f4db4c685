"""
Checkpoint directories: ``manifest.txt`` + ``tensors.bin`` + ``config.json``.

Manifest lines::

    format_version 1
    step 320
    config_hash <sha256>
    tensor <name> float32 <d0,d1,...|-> tensors.bin <byte offset>

Tensors are little-endian float32, row-major, packed back to back.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from .config import RunConfig, build_config
from .errors import CheckpointError
from .model import CrossViewNet
from .objective import InfoNCELoss

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.txt"
BLOB_NAME = "tensors.bin"
CONFIG_NAME = "config.json"
_DTYPE = "float32"


@dataclass
class TensorEntry:
    name: str
    dtype: str
    shape: Tuple[int, ...]
    file: str
    offset: int

    @property
    def nbytes(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) * 4


@dataclass
class CheckpointManifest:
    format_version: int
    step: int
    config_hash: str
    entries: List[TensorEntry] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"format_version {self.format_version}", f"step {self.step}", f"config_hash {self.config_hash}"]
        for e in self.entries:
            shape = ",".join(str(d) for d in e.shape) if e.shape else "-"
            lines.append(f"tensor {e.name} {e.dtype} {shape} {e.file} {e.offset}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "CheckpointManifest":
        header: Dict[str, str] = {}
        entries: List[TensorEntry] = []
        for line_no, line in enumerate(text.splitlines(), start=1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "tensor":
                if len(parts) != 6:
                    raise CheckpointError(f"manifest line {line_no}: expected 6 fields, got {len(parts)}")
                _, name, dtype, shape, file, offset = parts
                try:
                    dims = () if shape == "-" else tuple(int(d) for d in shape.split(","))
                    entries.append(TensorEntry(name, dtype, dims, file, int(offset)))
                except ValueError as exc:
                    raise CheckpointError(f"manifest line {line_no}: malformed tensor entry", tensor=name) from exc
            elif len(parts) == 2:
                header[parts[0]] = parts[1]
            else:
                raise CheckpointError(f"manifest line {line_no}: cannot parse {line!r}")
        try:
            version = int(header["format_version"])
            step = int(header.get("step", "0"))
        except (KeyError, ValueError) as exc:
            raise CheckpointError("manifest lacks a valid format_version/step header") from exc
        return cls(version, step, header.get("config_hash", ""), entries)


@dataclass
class CheckpointState:
    tensors: Dict[str, torch.Tensor]
    step: int
    config: RunConfig
    manifest: CheckpointManifest


def model_tensors(model: CrossViewNet, objective: Optional[InfoNCELoss] = None) -> Dict[str, torch.Tensor]:
    """Every learnable tensor exactly once (shared encoders are deduplicated)."""
    tensors = {name: p for name, p in model.named_parameters()}
    if objective is not None and objective.learnable:
        tensors["objective.log_tau"] = objective.log_tau
    return tensors


def save_checkpoint(
    directory: str | Path,
    tensors: Dict[str, torch.Tensor],
    config: RunConfig,
    step: int = 0,
) -> CheckpointManifest:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    manifest = CheckpointManifest(FORMAT_VERSION, step, config.config_hash())
    offset = 0
    with (out / BLOB_NAME).open("wb") as f:
        for name, tensor in tensors.items():
            if any(ch.isspace() for ch in name):
                raise CheckpointError(f"tensor name {name!r} contains whitespace", tensor=name)
            # 0-d tensors stay 0-d
            arr = np.asarray(tensor.detach().cpu().numpy(), dtype="<f4")
            f.write(arr.tobytes(order="C"))
            manifest.entries.append(TensorEntry(name, _DTYPE, tuple(tensor.shape), BLOB_NAME, offset))
            offset += arr.nbytes
    (out / CONFIG_NAME).write_text(json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
    (out / MANIFEST_NAME).write_text(manifest.to_text(), encoding="utf-8")
    logger.info("checkpoint saved dir=%s tensors=%d bytes=%d step=%d", out, len(manifest.entries), offset, step)
    return manifest


def _validate(manifest: CheckpointManifest, directory: Path) -> None:
    if manifest.format_version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format_version {manifest.format_version}, expected {FORMAT_VERSION}")
    names = set()
    spans: Dict[str, List[Tuple[int, int, str]]] = {}
    for e in manifest.entries:
        if e.name in names:
            raise CheckpointError(f"tensor {e.name} listed twice", tensor=e.name)
        names.add(e.name)
        if e.dtype != _DTYPE:
            raise CheckpointError(f"tensor {e.name} has dtype {e.dtype}, expected {_DTYPE}", tensor=e.name)
        blob = directory / e.file
        if not blob.exists():
            raise CheckpointError(f"tensor {e.name}: data file {e.file} missing", tensor=e.name)
        if e.offset < 0 or e.offset + e.nbytes > blob.stat().st_size:
            raise CheckpointError(
                f"tensor {e.name}: bytes {e.offset}..{e.offset + e.nbytes} exceed {e.file} "
                f"({blob.stat().st_size} bytes); file truncated or manifest wrong",
                tensor=e.name,
            )
        spans.setdefault(e.file, []).append((e.offset, e.offset + e.nbytes, e.name))
    for file, ranges in spans.items():
        ranges.sort()
        for (_, end, a), (start, _, b) in zip(ranges, ranges[1:]):
            if start < end:
                raise CheckpointError(f"tensors {a} and {b} overlap in {file}", tensor=b)


def load_checkpoint(directory: str | Path) -> CheckpointState:
    """Validate the whole manifest first, then read every tensor."""
    root = Path(directory)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise CheckpointError(f"no {MANIFEST_NAME} in {root}")
    manifest = CheckpointManifest.parse(manifest_path.read_text(encoding="utf-8"))
    _validate(manifest, root)

    config_path = root / CONFIG_NAME
    if not config_path.exists():
        raise CheckpointError(f"no {CONFIG_NAME} in {root}")
    try:
        raw = json.loads(config_path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{config_path} is not valid JSON: {exc}") from exc
    config = build_config(raw)
    if manifest.config_hash and manifest.config_hash != config.config_hash():
        raise CheckpointError("config.json does not match the manifest's config_hash")

    blobs: Dict[str, bytes] = {}
    tensors: Dict[str, torch.Tensor] = {}
    for e in manifest.entries:
        if e.file not in blobs:
            blobs[e.file] = (root / e.file).read_bytes()
        arr = np.frombuffer(blobs[e.file], dtype="<f4", count=e.nbytes // 4, offset=e.offset)
        tensors[e.name] = torch.from_numpy(arr.reshape(e.shape).astype(np.float32))
    return CheckpointState(tensors, manifest.step, config, manifest)


def restore_model(
    state: CheckpointState,
    model: Optional[CrossViewNet] = None,
    objective: Optional[InfoNCELoss] = None,
) -> CrossViewNet:
    """
    Copy checkpoint tensors into ``model`` (built from the stored config when
    omitted). Names and shapes are all checked before anything is written.
    """
    if model is None:
        cfg = state.config
        model = CrossViewNet(cfg.encoder, cfg.train.preset, seed=cfg.train.seed)
    targets = model_tensors(model, objective)

    missing = sorted(set(targets) - set(state.tensors))
    if missing:
        raise CheckpointError(f"checkpoint is missing tensor {missing[0]}", tensor=missing[0])
    unexpected = sorted(set(state.tensors) - set(targets))
    if unexpected:
        raise CheckpointError(f"checkpoint has unexpected tensor {unexpected[0]}", tensor=unexpected[0])
    for name, target in targets.items():
        if tuple(state.tensors[name].shape) != tuple(target.shape):
            raise CheckpointError(
                f"tensor {name}: checkpoint shape {tuple(state.tensors[name].shape)} != model shape {tuple(target.shape)}",
                tensor=name,
            )

    with torch.no_grad():
        for name, target in targets.items():
            target.copy_(state.tensors[name].to(target.dtype))
    return model


def load_model(directory: str | Path) -> Tuple[CrossViewNet, CheckpointState]:
    state = load_checkpoint(directory)
    objective = None
    if "objective.log_tau" in state.tensors:
        train = state.config.train
        objective = InfoNCELoss(train.tau, train.direction, learnable=True)
    model = restore_model(state, objective=objective)
    model.eval()
    return model, state
