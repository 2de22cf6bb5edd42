"""Image catalogs: directory scanning, manifest files and stratified splits."""

from __future__ import annotations

import csv
import enum
import io
import os
from collections import defaultdict
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

from PIL import Image as PILImage

from .seeding import check_seed, hash_seed, make_rng

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp", ".ppm", ".pgm"}

MANIFEST_COLUMNS = [
    "image_id",
    "path",
    "coarse",
    "subclass",
    "magnification",
    "split",
    "provenance",
    "parent_id",
    "copy_index",
]


class ManifestError(ValueError):
    pass


class Coarse(str, enum.Enum):
    BENIGN = "Benign"
    MALIGNANT = "Malignant"


class Subclass(str, enum.Enum):
    A = "A"
    F = "F"
    TA = "TA"
    PA = "PA"
    DC = "DC"
    LC = "LC"
    MC = "MC"
    PC = "PC"

    @property
    def coarse(self) -> Coarse:
        return Coarse.BENIGN if self in _BENIGN else Coarse.MALIGNANT


_BENIGN = {Subclass.A, Subclass.F, Subclass.TA, Subclass.PA}


class Magnification(str, enum.Enum):
    X40 = "40X"
    X100 = "100X"
    X200 = "200X"
    X400 = "400X"


class Split(str, enum.Enum):
    TRAIN = "Train"
    VAL = "Val"
    TEST = "Test"
    UNASSIGNED = "Unassigned"


class Layout(str, enum.Enum):
    CLASS_PER_DIR = "class-per-dir"
    SUBCLASS_PER_DIR = "subclass-per-dir"


# directory-name tokens (compared case-insensitively, "-" and " " read as "_")
COARSE_TOKENS = {"benign": Coarse.BENIGN, "malignant": Coarse.MALIGNANT}
SUBCLASS_TOKENS = {
    "adenosis": Subclass.A,
    "a": Subclass.A,
    "fibroadenoma": Subclass.F,
    "f": Subclass.F,
    "tubular_adenoma": Subclass.TA,
    "ta": Subclass.TA,
    "phyllodes_tumor": Subclass.PA,
    "phyllodes_adenoma": Subclass.PA,
    "pa": Subclass.PA,
    "pt": Subclass.PA,
    "ductal_carcinoma": Subclass.DC,
    "dc": Subclass.DC,
    "lobular_carcinoma": Subclass.LC,
    "lc": Subclass.LC,
    "mucinous_carcinoma": Subclass.MC,
    "mc": Subclass.MC,
    "papillary_carcinoma": Subclass.PC,
    "pc": Subclass.PC,
}


def _token(name: str) -> str:
    return name.strip().lower().replace("-", "_").replace(" ", "_")


@dataclass(frozen=True)
class ClassLabel:
    """Coarse class plus optional subclass.

    ``subclass`` is None only for catalogs scanned with the class-per-dir
    layout, where the directory tree carries the coarse class alone.
    """

    coarse: Coarse
    subclass: Subclass | None = None

    @classmethod
    def of(cls, subclass: Subclass | str) -> "ClassLabel":
        sub = Subclass(subclass)
        return cls(sub.coarse, sub)

    @property
    def consistent(self) -> bool:
        return self.subclass is None or self.subclass.coarse == self.coarse


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    path: str
    label: ClassLabel
    magnification: Magnification | None = None
    split: Split = Split.UNASSIGNED
    parent_id: str | None = None
    copy_index: int | None = None

    @property
    def is_original(self) -> bool:
        return self.parent_id is None

    @property
    def provenance(self) -> str:
        return "Original" if self.is_original else "Augmented"


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))

    def __len__(self) -> int:
        return len(self.entries)

    def in_split(self, split: Split | str, originals_only: bool = False) -> list[ManifestEntry]:
        split = Split(split)
        return [
            e for e in self.entries if e.split == split and (e.is_original or not originals_only)
        ]

    def by_id(self) -> dict[str, ManifestEntry]:
        return {e.image_id: e for e in self.entries}


# --------------------------------------------------------------------------
# scanning


def _check_readable(path: Path) -> None:
    try:
        with PILImage.open(path) as im:
            im.size
    except Exception as exc:  # PIL raises a zoo of types for bad files
        raise ManifestError(f"unreadable image file {path}: {exc}") from exc


def scan_directory(root: str | os.PathLike, layout: Layout | str = Layout.SUBCLASS_PER_DIR) -> DatasetManifest:
    """Catalog every image under ``root``.

    The first directory below ``root`` must name the coarse class. With the
    subclass-per-dir layout some deeper directory must name a subclass of that
    coarse class; other directories (patient folders, ``40X`` and so on) are
    allowed in between, so the BreakHis tree scans as shipped.
    """
    root = Path(root)
    layout = Layout(layout)
    if not root.is_dir():
        raise ManifestError(f"root directory does not exist: {root}")

    entries = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for fname in sorted(filenames):
            path = Path(dirpath) / fname
            if path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            rel = path.relative_to(root)
            dirs = rel.parts[:-1]
            if not dirs or _token(dirs[0]) not in COARSE_TOKENS:
                bad = dirs[0] if dirs else rel.as_posix()
                raise ManifestError(f"unknown class directory {bad!r} for image {rel.as_posix()}")
            coarse = COARSE_TOKENS[_token(dirs[0])]
            subclass = None
            magnification = None
            for d in dirs[1:]:
                tok = _token(d)
                if tok.upper() in Magnification._value2member_map_:
                    magnification = Magnification(tok.upper())
                elif layout is Layout.SUBCLASS_PER_DIR and subclass is None and tok in SUBCLASS_TOKENS:
                    subclass = SUBCLASS_TOKENS[tok]
            if layout is Layout.SUBCLASS_PER_DIR:
                if subclass is None:
                    raise ManifestError(
                        f"no known subclass directory for image {rel.as_posix()} "
                        f"(directories: {'/'.join(dirs)})"
                    )
                if subclass.coarse != coarse:
                    raise ManifestError(
                        f"subclass {subclass.value} is not {coarse.value} in {rel.as_posix()}"
                    )
            _check_readable(path)
            entries.append(
                ManifestEntry(
                    image_id=rel.as_posix(),
                    path=str(path),
                    label=ClassLabel(coarse, subclass),
                    magnification=magnification,
                )
            )
    if not entries:
        raise ManifestError(f"zero images found under {root}")
    return DatasetManifest(tuple(entries))


# --------------------------------------------------------------------------
# splitting


def largest_remainder(n: int, ratios: Sequence[Fraction]) -> list[int]:
    """Split ``n`` items by ``ratios``: floor each quota, then hand the
    leftover items to the largest fractional parts (earlier index wins ties)."""
    quotas = [Fraction(n) * r for r in ratios]
    sizes = [q.numerator // q.denominator for q in quotas]
    leftover = n - sum(sizes)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[:leftover]:
        sizes[i] += 1
    return sizes


def _exact_ratios(ratios: Sequence[float]) -> list[Fraction]:
    if len(ratios) != 3:
        raise ValueError(f"need three ratios (train, val, test), got {len(ratios)}")
    if any(not r > 0 for r in ratios):
        raise ValueError(f"ratios must be positive, got {tuple(ratios)}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)!r}")
    exact = [Fraction(r).limit_denominator(10**9) for r in ratios]
    # absorb decimal round-off so quotas sum to n exactly
    exact[0] = 1 - exact[1] - exact[2]
    return exact


def stratum_key(label: ClassLabel) -> str:
    return label.subclass.value if label.subclass is not None else label.coarse.value


def stratified_split(
    manifest: DatasetManifest,
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> DatasetManifest:
    """Assign Train/Val/Test within each subclass.

    Entries of a stratum are sorted by image_id, shuffled with a generator
    seeded from (seed, stratum) and cut by largest-remainder sizes, so the
    result does not depend on input order.
    """
    seed = check_seed(seed)
    exact = _exact_ratios(ratios)
    groups: dict[str, list[ManifestEntry]] = defaultdict(list)
    for e in manifest.entries:
        if not e.is_original:
            raise ManifestError(f"cannot split augmented entry {e.image_id}; split before augmenting")
        groups[stratum_key(e.label)].append(e)

    assigned: dict[str, Split] = {}
    for key in sorted(groups):
        members = sorted(groups[key], key=lambda e: e.image_id)
        if len(members) < 3:
            raise ManifestError(
                f"class {key} has {len(members)} entries; at least 3 are needed to populate train/val/test"
            )
        order = make_rng(hash_seed(seed, "split", key)).permutation(len(members))
        sizes = largest_remainder(len(members), exact)
        cuts = [sizes[0], sizes[0] + sizes[1]]
        for rank, idx in enumerate(order):
            split = Split.TRAIN if rank < cuts[0] else Split.VAL if rank < cuts[1] else Split.TEST
            assigned[members[idx].image_id] = split

    entries = tuple(replace(e, split=assigned[e.image_id]) for e in manifest.entries)
    return DatasetManifest(entries, seed)


# --------------------------------------------------------------------------
# validation


def validate_manifest(manifest: DatasetManifest, check_paths: bool = True) -> list[str]:
    """Return a list of human-readable violations; empty means well formed."""
    problems = []
    seen: dict[str, int] = {}
    for e in manifest.entries:
        seen[e.image_id] = seen.get(e.image_id, 0) + 1
    for image_id, n in seen.items():
        if n > 1:
            problems.append(f"duplicate image_id {image_id!r} ({n} entries)")

    by_id = manifest.by_id()
    for e in manifest.entries:
        if not e.label.consistent:
            problems.append(
                f"{e.image_id}: subclass {e.label.subclass.value} is not {e.label.coarse.value}"
            )
        if not e.is_original:
            parent = by_id.get(e.parent_id)
            if parent is None:
                problems.append(f"{e.image_id}: augmented entry references missing parent {e.parent_id!r}")
            elif not parent.is_original:
                problems.append(f"{e.image_id}: parent {e.parent_id!r} is not an original entry")
            if e.copy_index is None or e.copy_index < 1:
                problems.append(f"{e.image_id}: augmented entry needs copy_index >= 1")
        elif e.copy_index is not None:
            problems.append(f"{e.image_id}: original entry carries copy_index {e.copy_index}")
        if check_paths and not Path(e.path).exists():
            problems.append(f"{e.image_id}: path does not exist: {e.path}")
    return problems


# --------------------------------------------------------------------------
# CSV file format


def _entry_row(e: ManifestEntry) -> list[str]:
    return [
        e.image_id,
        e.path,
        e.label.coarse.value,
        e.label.subclass.value if e.label.subclass else "",
        e.magnification.value if e.magnification else "",
        e.split.value,
        e.provenance,
        e.parent_id or "",
        "" if e.copy_index is None else str(e.copy_index),
    ]


def manifest_to_csv(manifest: DatasetManifest) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_COLUMNS)
    for e in manifest.entries:
        w.writerow(_entry_row(e))
    return buf.getvalue()


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(manifest_to_csv(manifest).encode("utf-8"))


def _parse_row(row: dict[str, str], lineno: int) -> ManifestEntry:
    try:
        provenance = row["provenance"]
        if provenance not in ("Original", "Augmented"):
            raise ValueError(f"unknown provenance {provenance!r}")
        return ManifestEntry(
            image_id=row["image_id"],
            path=row["path"],
            label=ClassLabel(Coarse(row["coarse"]), Subclass(row["subclass"]) if row["subclass"] else None),
            magnification=Magnification(row["magnification"]) if row["magnification"] else None,
            split=Split(row["split"]),
            parent_id=(row["parent_id"] or None) if provenance == "Augmented" else None,
            copy_index=int(row["copy_index"]) if row["copy_index"] else None,
        )
    except (KeyError, ValueError) as exc:
        raise ManifestError(f"manifest line {lineno}: {exc}") from exc


def read_manifest(path: str | os.PathLike, seed: int = 0) -> DatasetManifest:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != MANIFEST_COLUMNS:
            raise ManifestError(f"{path}: unexpected header {reader.fieldnames}")
        entries = [_parse_row(row, i + 2) for i, row in enumerate(reader)]
    return DatasetManifest(tuple(entries), seed)


def split_counts(manifest: DatasetManifest) -> dict[tuple[str, Split], int]:
    counts: dict[tuple[str, Split], int] = defaultdict(int)
    for e in manifest.entries:
        counts[stratum_key(e.label), e.split] += 1
    return dict(counts)


def with_entries(manifest: DatasetManifest, extra: Iterable[ManifestEntry]) -> DatasetManifest:
    return DatasetManifest(manifest.entries + tuple(extra), manifest.seed)
