from __future__ import annotations

import csv
import struct
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import EmbeddingFormatError, ValidationError

EMBEDDING_MAGIC = b"EMB1"
_HEADER = struct.Struct("<4sII")


def load_image(path: str | Path) -> torch.Tensor:
    """
    Decode a raster image to a float32 ``(3, H, W)`` tensor in [0, 1].
    """
    p = Path(path)
    try:
        with Image.open(p) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise ValidationError(f"unreadable image {p}: {exc}") from exc
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def save_image(path: str | Path, image: torch.Tensor) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    arr = image.detach().cpu().clamp(0, 1).permute(1, 2, 0).numpy()
    Image.fromarray(np.round(arr * 255).astype(np.uint8)).save(p, format="PNG")


def save_embeddings(path: str | Path, ids: Sequence[str], vectors: np.ndarray) -> None:
    """
    Binary layout: magic ``EMB1``, u32 N, u32 D, N*D little-endian float32
    row-major, then N newline-terminated ids.
    """
    vectors = np.asarray(vectors, dtype="<f4")
    if vectors.ndim != 2 or vectors.shape[0] != len(ids):
        raise ValidationError(f"embedding matrix {vectors.shape} does not match {len(ids)} ids")
    for i in ids:
        if "\n" in i:
            raise ValidationError(f"embedding id {i!r} contains a newline")
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("wb") as f:
        f.write(_HEADER.pack(EMBEDDING_MAGIC, vectors.shape[0], vectors.shape[1]))
        f.write(np.ascontiguousarray(vectors).tobytes())
        for i in ids:
            f.write(i.encode("utf-8") + b"\n")


def load_embeddings(path: str | Path) -> Tuple[List[str], np.ndarray]:
    p = Path(path)
    try:
        data = p.read_bytes()
    except OSError as exc:
        raise EmbeddingFormatError(f"{p}: cannot read embedding file ({exc.strerror or exc})") from exc
    if len(data) < _HEADER.size:
        raise EmbeddingFormatError(f"{p}: file too short for an embedding header")
    magic, n, d = _HEADER.unpack_from(data)
    if magic != EMBEDDING_MAGIC:
        raise EmbeddingFormatError(f"{p}: bad magic {magic!r}, expected {EMBEDDING_MAGIC!r}")
    body = _HEADER.size + n * d * 4
    if len(data) < body:
        raise EmbeddingFormatError(f"{p}: truncated vector block ({len(data)} bytes, need {body})")
    vectors = np.frombuffer(data, dtype="<f4", count=n * d, offset=_HEADER.size).reshape(n, d).copy()
    try:
        ids = data[body:].decode("utf-8").split("\n")
    except UnicodeDecodeError as exc:
        raise EmbeddingFormatError(f"{p}: id block is not valid UTF-8 (byte {exc.start})") from exc
    if ids and ids[-1] == "":
        ids.pop()
    if len(ids) != n:
        raise EmbeddingFormatError(f"{p}: expected {n} ids, found {len(ids)}")
    return ids, vectors


def save_loss_history(path: str | Path, history: Sequence[Tuple[int, float, float]]) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["step", "loss", "lr"])
        for step, loss, lr in history:
            writer.writerow([step, repr(float(loss)), repr(float(lr))])


def load_loss_history(path: str | Path) -> List[Tuple[int, float, float]]:
    with Path(path).open("r", encoding="utf-8", newline="") as f:
        return [(int(r["step"]), float(r["loss"]), float(r["lr"])) for r in csv.DictReader(f)]
