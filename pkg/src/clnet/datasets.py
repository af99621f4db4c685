"""
Pair datasets: lazily rendered synthetic scenes and manifest-driven image folders.
"""
from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Dict, Iterator, List, Literal, Optional, Sequence, Tuple

import torch
from torch.utils.data import Dataset

from .config import DataConfig, EncoderConfig
from .errors import DatasetError, DegenerateSceneError, ValidationError
from .io import load_image, save_image
from .scenes import PairRecord, augment_pair, generate_scene, render_offset_group, render_pair

logger = logging.getLogger(__name__)

MANIFEST_HEADER = ["pair_id", "ground_path", "satellite_path", "semi_positive_ids"]
MAX_SCENE_ATTEMPTS = 16

Mode = Literal["center_aligned", "offset"]
Split = Literal["train", "eval"]


class PairDataset(Dataset):
    mode: Mode = "center_aligned"
    split: Split = "train"

    def __len__(self) -> int:
        raise NotImplementedError

    def __getitem__(self, i: int) -> PairRecord:
        raise NotImplementedError

    def __iter__(self) -> Iterator[PairRecord]:
        for i in range(len(self)):
            yield self[i]

    def pair_ids(self) -> List[str]:
        return [rec.pair_id for rec in self]

    def references(self) -> Tuple[List[str], List[torch.Tensor]]:
        """Every satellite image a query can be matched against, semi-positives included."""
        ids: List[str] = []
        images: List[torch.Tensor] = []
        seen = set()
        for rec in self:
            for ref_id, img in [(rec.pair_id, rec.satellite), *rec.semi_positive_images.items()]:
                if ref_id not in seen:
                    seen.add(ref_id)
                    ids.append(ref_id)
                    images.append(img)
        return ids, images

    def semi_positives(self) -> Dict[str, List[str]]:
        return {rec.pair_id: list(rec.semi_positive_ids) for rec in self}


class SyntheticPairDataset(PairDataset):
    """
    Record ``i`` is scene ``start + i`` of ``seed``; a pure function of (seed, index).
    """

    def __init__(
        self,
        seed: int,
        start: int,
        count: int,
        encoder: EncoderConfig,
        mode: Mode = "center_aligned",
        split: Split = "train",
        noise: float = 0.02,
        extent: float = 100.0,
        cache: bool = True,
    ):
        self.seed = seed
        self.start = start
        self.count = count
        self.ground_hw = tuple(encoder.ground_input_hw)
        self.satellite_hw = tuple(encoder.satellite_input_hw)
        self.mode = mode
        self.split = split
        self.noise = noise
        self.extent = extent
        self._cache: Optional[Dict[int, PairRecord]] = {} if cache else None

    def __len__(self) -> int:
        return self.count

    def pair_id(self, index: int) -> str:
        return f"{self.seed}-{index:06d}"

    def pair_ids(self) -> List[str]:
        return [self.pair_id(self.start + i) for i in range(self.count)]

    def _render(self, index: int) -> PairRecord:
        render = render_offset_group if self.mode == "offset" else render_pair
        for attempt in range(MAX_SCENE_ATTEMPTS):
            scene = generate_scene(self.seed, index, extent=self.extent, noise=self.noise, attempt=attempt)
            try:
                return render(scene, self.ground_hw, self.satellite_hw, pair_id=self.pair_id(index))
            except DegenerateSceneError:
                logger.debug("scene seed=%d index=%d attempt=%d degenerate, regenerating", self.seed, index, attempt)
        raise DegenerateSceneError(f"scene {index} of seed {self.seed} degenerate after {MAX_SCENE_ATTEMPTS} attempts")

    def __getitem__(self, i: int) -> PairRecord:
        if not 0 <= i < self.count:
            raise IndexError(i)
        index = self.start + i
        if self._cache is None:
            return self._render(index)
        if index not in self._cache:
            self._cache[index] = self._render(index)
        return self._cache[index]


class DirectoryPairDataset(PairDataset):
    def __init__(self, records: List[PairRecord], root: Path, split: Split = "eval"):
        self.records = records
        self.root = root
        self.split = split
        self.mode = "offset" if any(r.semi_positive_ids for r in records) else "center_aligned"

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> PairRecord:
        return self.records[i]


def synthetic_splits(data: DataConfig, encoder: EncoderConfig) -> Tuple[SyntheticPairDataset, SyntheticPairDataset]:
    """Train and eval splits over disjoint scene index ranges of one seed."""
    common = dict(encoder=encoder, mode=data.mode, noise=data.noise, extent=data.extent)
    train = SyntheticPairDataset(data.seed, 0, data.num_train, split="train", **common)
    evaluation = SyntheticPairDataset(data.seed, data.num_train, data.num_eval, split="eval", **common)
    return train, evaluation


def read_manifest(path: str | Path) -> List[Dict[str, str]]:
    """Rows of a dataset ``manifest.csv``, column set checked, images untouched."""
    path = Path(path)
    if not path.exists():
        raise DatasetError([f"manifest not found: {path}"])
    with path.open("r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        missing_cols = [c for c in MANIFEST_HEADER[:3] if c not in header]
        if missing_cols:
            raise DatasetError([f"manifest missing columns: {', '.join(missing_cols)}"])
        return list(reader)


def _cell(row: Dict[str, str], column: str) -> str:
    # short rows leave trailing columns as None
    return (row.get(column) or "").strip()


def _semi_ids(row: Dict[str, str]) -> List[str]:
    return [s.strip() for s in _cell(row, "semi_positive_ids").split(";") if s.strip()]


def manifest_semi_positives(path: str | Path) -> Dict[str, List[str]]:
    return {_cell(row, "pair_id"): _semi_ids(row) for row in read_manifest(path)}


def load_directory_dataset(
    root: str | Path,
    manifest: str | Path = "manifest.csv",
    split: Split = "eval",
    ground_hw: Optional[Tuple[int, int]] = None,
    satellite_hw: Optional[Tuple[int, int]] = None,
) -> DirectoryPairDataset:
    """
    Load a ``pair_id,ground_path,satellite_path,semi_positive_ids`` manifest.

    Semi-positive ids resolve to another row's satellite image, or else to
    ``satellite/<id>.png`` under ``root``. All problems are reported together.
    """
    root = Path(root)
    manifest_path = Path(manifest) if Path(manifest).is_absolute() else root / manifest
    rows = read_manifest(manifest_path)

    problems: List[str] = []
    seen: Dict[str, int] = {}
    for line_no, row in enumerate(rows, start=2):
        pid = _cell(row, "pair_id")
        if not pid:
            problems.append(f"line {line_no}: empty pair_id")
        elif pid in seen:
            problems.append(f"line {line_no}: duplicate pair_id {pid!r} (first on line {seen[pid]})")
        else:
            seen[pid] = line_no
        for column in ("ground_path", "satellite_path"):
            if not _cell(row, column):
                problems.append(f"line {line_no}: missing {column}")
    satellite_by_id = {_cell(row, "pair_id"): _cell(row, "satellite_path") for row in rows}

    def read(rel: str, what: str) -> Optional[torch.Tensor]:
        path = root / rel
        if not path.exists():
            problems.append(f"missing {what} file {path}")
            return None
        try:
            return load_image(path)
        except ValidationError as exc:
            problems.append(str(exc))
            return None

    def check_size(img: Optional[torch.Tensor], hw: Optional[Tuple[int, int]], pid: str, what: str) -> None:
        if img is not None and hw is not None and tuple(img.shape[-2:]) != tuple(hw):
            problems.append(f"pair {pid!r}: {what} is {tuple(img.shape[-2:])}, expected {tuple(hw)}")

    records: List[PairRecord] = []
    semi_cache: Dict[str, Optional[torch.Tensor]] = {}
    for row in rows:
        pid = _cell(row, "pair_id")
        if not (_cell(row, "ground_path") and _cell(row, "satellite_path")):
            continue
        ground = read(_cell(row, "ground_path"), f"ground ({pid})")
        satellite = read(_cell(row, "satellite_path"), f"satellite ({pid})")
        check_size(ground, ground_hw, pid, "ground image")
        check_size(satellite, satellite_hw, pid, "satellite image")

        semi_ids = _semi_ids(row)
        semi_images: Dict[str, torch.Tensor] = {}
        for sid in semi_ids:
            if sid not in semi_cache:
                rel = satellite_by_id.get(sid, f"satellite/{sid}.png")
                semi_cache[sid] = read(rel, f"semi-positive satellite ({sid})")
            if semi_cache[sid] is not None:
                semi_images[sid] = semi_cache[sid]
        if ground is not None and satellite is not None:
            records.append(PairRecord(pid, ground, satellite, semi_positive_ids=semi_ids, semi_positive_images=semi_images))

    if problems:
        raise DatasetError(problems)
    logger.info("loaded directory dataset root=%s pairs=%d", root, len(records))
    return DirectoryPairDataset(records, root, split=split)


def write_dataset(dataset: PairDataset, out_dir: str | Path, force: bool = False) -> Path:
    """
    Write PNGs under ``ground/`` and ``satellite/`` plus ``manifest.csv``.
    """
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise ValidationError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)

    manifest = out / "manifest.csv"
    with manifest.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for rec in dataset:
            ground_rel = f"ground/{rec.pair_id}.png"
            satellite_rel = f"satellite/{rec.pair_id}.png"
            save_image(out / ground_rel, rec.ground)
            save_image(out / satellite_rel, rec.satellite)
            for sid, img in rec.semi_positive_images.items():
                save_image(out / f"satellite/{sid}.png", img)
            writer.writerow([rec.pair_id, ground_rel, satellite_rel, ";".join(rec.semi_positive_ids)])
    return manifest


def collate_pairs(records: Sequence[PairRecord]) -> Tuple[List[str], torch.Tensor, torch.Tensor]:
    ids = [r.pair_id for r in records]
    return ids, torch.stack([r.ground for r in records]), torch.stack([r.satellite for r in records])


class AugmentedPairs(Dataset):
    """
    Training view of a dataset; sample ``i`` in epoch ``e`` is augmented with
    the generator seeded by (seed, e, i).
    """

    def __init__(self, base: PairDataset, seed: int, enabled: bool = True):
        self.base = base
        self.seed = seed
        self.enabled = enabled and base.mode == "center_aligned"
        self.epoch = 0
        if enabled and not self.enabled:
            logger.warning("augmentation disabled: dataset mode=%s is not center-aligned", base.mode)

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.base)

    def __getitem__(self, i: int) -> PairRecord:
        rec = self.base[i]
        if not self.enabled:
            return rec
        return augment_pair(rec, [self.seed, self.epoch, i])
