"""Dataset discovery, stratified splitting and manifest files.

Expected layout::

    root/
      colon_aca/   *.jpeg
      colon_n/     *.jpeg
      lung_aca/    ...
      lung_n/
      lung_scc/

Class indices follow the alphabetical order of the folder names.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DatasetError, ManifestError

log = logging.getLogger(__name__)

MANIFEST_SCHEMA_VERSION = 1
MANIFEST_MAGIC = "histoxai-manifest"
IMAGE_SUFFIXES = (".jpeg", ".jpg", ".png")
SPLITS = ("train", "val", "test")
UNASSIGNED = "-"


@dataclass(frozen=True)
class ClassLabel:
    name: str
    index: int


@dataclass(frozen=True)
class SampleRecord:
    path: str  # relative to the manifest root, POSIX separators
    label: ClassLabel
    split: Optional[str] = None
    source_dims: tuple[int, int] = (0, 0)  # (height, width)


@dataclass(frozen=True)
class DatasetManifest:
    root: str
    classes: tuple[str, ...]
    records: tuple[SampleRecord, ...]
    split_seed: Optional[int] = None
    split_fractions: Optional[tuple[float, float, float]] = None
    skipped: tuple[str, ...] = field(default=(), compare=False)

    @property
    def labels(self) -> tuple[ClassLabel, ...]:
        return tuple(ClassLabel(n, i) for i, n in enumerate(self.classes))

    @property
    def class_counts(self) -> dict[str, int]:
        counts = {name: 0 for name in self.classes}
        for r in self.records:
            counts[r.label.name] += 1
        return counts

    def split(self, name: str) -> tuple[SampleRecord, ...]:
        return tuple(r for r in self.records if r.split == name)

    def split_counts(self) -> dict[str, dict[str, int]]:
        out = {s: {c: 0 for c in self.classes} for s in SPLITS}
        for r in self.records:
            if r.split in out:
                out[r.split][r.label.name] += 1
        return out

    def abspath(self, record: SampleRecord) -> Path:
        return Path(self.root) / record.path

    def digest(self) -> str:
        return hashlib.sha256(manifest_to_text(self).encode("utf-8")).hexdigest()


def _probe(path: Path) -> tuple[int, int] | str:
    """Fully decode ``path``; return (h, w) or the reason it was rejected."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode != "RGB":
                return f"not a 3-channel color image (mode {im.mode})"
            w, h = im.size
            return (h, w)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        return f"cannot decode ({exc.__class__.__name__}: {exc})"


def scan_dataset(root: str | Path, num_classes: int = 5, workers: int = 4) -> DatasetManifest:
    """Index every decodable image under ``root/<class>/``.

    Undecodable files are skipped with a logged warning; their relative
    paths are kept on ``manifest.skipped``.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root does not exist or is not a directory: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    if not class_dirs:
        raise DatasetError(f"no class subdirectories found in {root}")
    if len(class_dirs) != num_classes:
        names = ", ".join(p.name for p in class_dirs)
        raise DatasetError(f"expected {num_classes} class subdirectories in {root}, found {len(class_dirs)}: {names}")

    classes = tuple(p.name for p in class_dirs)
    candidates: list[tuple[str, ClassLabel, Path]] = []
    for index, d in enumerate(class_dirs):
        label = ClassLabel(d.name, index)
        for f in d.iterdir():
            if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES:
                candidates.append((f.relative_to(root).as_posix(), label, f))
    candidates.sort(key=lambda c: c[0])

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        probes = list(pool.map(lambda c: _probe(c[2]), candidates))

    records, skipped = [], []
    for (rel, label, _), probe in zip(candidates, probes):
        if isinstance(probe, str):
            log.warning("skipping %s: %s", rel, probe)
            skipped.append(rel)
            continue
        records.append(SampleRecord(rel, label, None, probe))
    if skipped:
        log.warning("skipped %d undecodable file(s) under %s", len(skipped), root)
    if not records:
        raise DatasetError(f"no decodable images found under {root}")
    return DatasetManifest(str(root.resolve()), classes, tuple(records), skipped=tuple(skipped))


def subset_classes(manifest: DatasetManifest, names: Sequence[str]) -> DatasetManifest:
    """Keep only ``names`` (e.g. a single organ), re-indexed alphabetically."""
    missing = [n for n in names if n not in manifest.classes]
    if missing:
        raise DatasetError(f"unknown class name(s) {missing}; available: {list(manifest.classes)}")
    classes = tuple(sorted(names))
    index = {n: i for i, n in enumerate(classes)}
    records = tuple(
        replace(r, label=ClassLabel(r.label.name, index[r.label.name]))
        for r in manifest.records
        if r.label.name in index
    )
    return replace(manifest, classes=classes, records=records)


def _allocate(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder allocation: sizes sum to n, each within 1 of f*n."""
    exact = [f * n for f in fractions]
    sizes = [math.floor(x + 1e-9) for x in exact]
    remainders = sorted(range(len(exact)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in remainders[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_manifest(
    manifest: DatasetManifest,
    fractions: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> DatasetManifest:
    """Stratified train/val/test assignment.

    Records of class ``c`` (in path order) are permuted with a generator
    seeded by ``[seed, c]``; the first block goes to train, the next to val,
    the rest to test.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DatasetError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")

    by_class: dict[int, list[int]] = {i: [] for i in range(len(manifest.classes))}
    for pos, r in enumerate(manifest.records):
        by_class[r.label.index].append(pos)

    assignment: dict[int, str] = {}
    for c, positions in by_class.items():
        sizes = _allocate(len(positions), fractions)
        for split_name, frac, size in zip(SPLITS, fractions, sizes):
            if frac > 0 and positions and size == 0:
                raise DatasetError(
                    f"split {split_name!r} would receive 0 records of class {manifest.classes[c]!r} "
                    f"({len(positions)} available, fraction {frac})"
                )
        order = np.random.default_rng([seed, c]).permutation(len(positions))
        start = 0
        for split_name, size in zip(SPLITS, sizes):
            for k in order[start:start + size]:
                assignment[positions[int(k)]] = split_name
            start += size

    records = tuple(replace(r, split=assignment[i]) for i, r in enumerate(manifest.records))
    return replace(manifest, records=records, split_seed=int(seed), split_fractions=fractions)


# ---------------------------------------------------------------------------
# manifest files
# ---------------------------------------------------------------------------

_COLUMNS = ("path", "label", "split", "height", "width")


def manifest_to_text(manifest: DatasetManifest) -> str:
    buf = io.StringIO()
    buf.write(f"# {MANIFEST_MAGIC} schema_version={MANIFEST_SCHEMA_VERSION}\n")
    buf.write(f"# root={manifest.root}\n")
    buf.write(f"# classes={','.join(manifest.classes)}\n")
    seed = "" if manifest.split_seed is None else str(manifest.split_seed)
    fr = "" if manifest.split_fractions is None else ",".join(repr(f) for f in manifest.split_fractions)
    buf.write(f"# split_seed={seed}\n")
    buf.write(f"# split_fractions={fr}\n")
    writer = csv.writer(buf, delimiter="\t", lineterminator="\n")
    writer.writerow(_COLUMNS)
    for r in manifest.records:
        writer.writerow((r.path, r.label.name, r.split or UNASSIGNED, r.source_dims[0], r.source_dims[1]))
    return buf.getvalue()


def export_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest_to_text(manifest), encoding="utf-8", newline="\n")
    return path


def _header_value(lines: Iterable[str], key: str) -> str:
    for line in lines:
        if line.startswith(f"# {key}="):
            return line[len(key) + 3:]
    raise ManifestError(f"manifest header is missing {key!r}")


def manifest_from_text(text: str) -> DatasetManifest:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(f"# {MANIFEST_MAGIC} "):
        raise ManifestError("not a manifest file (missing magic header line)")
    try:
        version = int(lines[0].split("schema_version=")[1])
    except (IndexError, ValueError) as exc:
        raise ManifestError("manifest header has no readable schema_version") from exc
    if version != MANIFEST_SCHEMA_VERSION:
        raise ManifestError(
            f"manifest schema version mismatch: file has {version}, this toolkit reads {MANIFEST_SCHEMA_VERSION}"
        )
    header = [l for l in lines if l.startswith("#")]
    root = _header_value(header, "root")
    classes = tuple(c for c in _header_value(header, "classes").split(",") if c)
    seed_text = _header_value(header, "split_seed")
    fr_text = _header_value(header, "split_fractions")
    split_seed = int(seed_text) if seed_text else None
    split_fractions = tuple(float(x) for x in fr_text.split(",")) if fr_text else None

    body = [l for l in lines if not l.startswith("#")]
    reader = csv.reader(body, delimiter="\t")
    columns = next(reader, None)
    if tuple(columns or ()) != _COLUMNS:
        raise ManifestError(f"manifest column header must be {list(_COLUMNS)}, got {columns}")

    index = {n: i for i, n in enumerate(classes)}
    records, seen = [], set()
    for lineno, row in enumerate(reader, start=1):
        if len(row) != len(_COLUMNS):
            raise ManifestError(f"data row {lineno}: expected {len(_COLUMNS)} fields, got {len(row)}")
        rel, label, split, h, w = row
        if rel in seen:
            raise ManifestError(f"data row {lineno}: duplicate path {rel!r}")
        seen.add(rel)
        if label not in index:
            raise ManifestError(f"data row {lineno}: label {label!r} not among classes {list(classes)}")
        if split != UNASSIGNED and split not in SPLITS:
            raise ManifestError(f"data row {lineno}: unknown split {split!r}")
        records.append(SampleRecord(rel, ClassLabel(label, index[label]),
                                    None if split == UNASSIGNED else split, (int(h), int(w))))
    return DatasetManifest(root, classes, tuple(records), split_seed, split_fractions)


def import_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest file not found: {path}")
    return manifest_from_text(path.read_text(encoding="utf-8"))
