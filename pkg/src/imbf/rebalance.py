"""Mean-threshold class selection, augmentation plans and their materialization.

A class is under-represented when its training count is strictly below the
mean count over all classes. The default plan doubles every such class; an
explicit per-class target map is also accepted.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path, PurePosixPath
from typing import Mapping

from . import augment, imageops
from .augment import INTENSIVE, IntensivePolicy
from .dataset import (
    ClassLabel,
    Coarse,
    DatasetManifest,
    ManifestEntry,
    Split,
    Subclass,
    with_entries,
)
from .seeding import check_seed

log = logging.getLogger(__name__)

DOUBLE_BELOW_MEAN = "double-below-mean"
EXPLICIT_TARGETS = "explicit-targets"

SUBCLASS_NAMES = [s.value for s in Subclass]
COARSE_NAMES = [c.value for c in Coarse]


class PlanError(ValueError):
    pass


def class_counts(manifest: DatasetManifest, split: Split | str = Split.TRAIN, level: str = "subclass") -> dict[str, int]:
    """Original-entry counts per class in ``split``.

    ``level`` is "subclass" (BreakHis subtypes) or "coarse" (benign/malignant).
    The keys are the classes that occur anywhere in the manifest, in canonical
    order, so a subset catalog does not drag absent classes into the mean; an
    empty manifest yields every known class at zero.
    """
    if level not in ("subclass", "coarse"):
        raise ValueError(f"level must be 'subclass' or 'coarse', got {level!r}")
    split = Split(split)
    names = SUBCLASS_NAMES if level == "subclass" else COARSE_NAMES
    present = set()
    for e in manifest.entries:
        if level == "subclass" and e.label.subclass is None:
            raise PlanError(f"{e.image_id} has no subclass; use level='coarse'")
        present.add(_class_of(e, level))
    counts = {name: 0 for name in names if name in present or not present}
    for e in manifest.entries:
        if e.split == split and e.is_original:
            counts[_class_of(e, level)] += 1
    return counts


def mean_count(counts: Mapping[str, int]) -> Fraction:
    return Fraction(sum(counts.values()), len(counts))


def select_underrepresented(counts: Mapping[str, int]) -> set[str]:
    if not counts or not any(counts.values()):
        raise PlanError("cannot select under-represented classes: all counts are zero")
    mean = mean_count(counts)
    return {name for name, n in counts.items() if n < mean}


@dataclass(frozen=True)
class ClassPlan:
    name: str
    original: int
    target: int

    @property
    def extra(self) -> int:
        return self.target - self.original

    @property
    def copies_per_image(self) -> int:
        return self.extra // self.original if self.original else 0

    @property
    def remainder(self) -> int:
        return self.extra % self.original if self.original else 0

    def copies_for(self, rank: int) -> int:
        """Copies owed to the image at position ``rank`` in image_id order."""
        return self.copies_per_image + (1 if rank < self.remainder else 0)


@dataclass(frozen=True)
class RebalancePlan:
    strategy: str
    mean: Fraction
    classes: tuple[ClassPlan, ...]
    seed: int = 0
    targets: dict[str, int] | None = field(default=None, compare=False)

    @property
    def level(self) -> str:
        names = {c.name for c in self.classes}
        return "coarse" if names <= set(COARSE_NAMES) else "subclass"

    @property
    def total(self) -> int:
        return sum(c.target for c in self.classes)

    def targets_map(self) -> dict[str, int]:
        return {c.name: c.target for c in self.classes}

    def selected(self) -> set[str]:
        return {c.name for c in self.classes if c.extra > 0}

    def to_json(self) -> str:
        doc = {
            "strategy": self.strategy,
            "seed": self.seed,
            "mean": f"{self.mean.numerator}/{self.mean.denominator}",
            "classes": [
                {
                    "name": c.name,
                    "original": c.original,
                    "target": c.target,
                    "copies_per_image": c.copies_per_image,
                    "remainder": c.remainder,
                }
                for c in self.classes
            ],
        }
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RebalancePlan":
        doc = json.loads(text)
        try:
            classes = tuple(ClassPlan(c["name"], int(c["original"]), int(c["target"])) for c in doc["classes"])
            plan = cls(doc["strategy"], Fraction(doc["mean"]), classes, check_seed(doc["seed"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise PlanError(f"malformed plan file: {exc}") from exc
        for c, raw in zip(classes, doc["classes"]):
            if (c.copies_per_image, c.remainder) != (raw["copies_per_image"], raw["remainder"]):
                raise PlanError(f"plan entry {c.name}: copies/remainder disagree with original/target")
        return plan


def build_plan(
    counts: Mapping[str, int],
    strategy: str = DOUBLE_BELOW_MEAN,
    seed: int = 0,
    targets: Mapping[str, int] | None = None,
) -> RebalancePlan:
    seed = check_seed(seed)
    if any(n < 0 for n in counts.values()):
        raise PlanError(f"counts must be nonnegative: {dict(counts)}")
    if strategy == DOUBLE_BELOW_MEAN:
        chosen = select_underrepresented(counts)
        resolved = {name: 2 * n if name in chosen else n for name, n in counts.items()}
    elif strategy == EXPLICIT_TARGETS:
        if targets is None:
            raise PlanError("explicit-targets strategy needs a target map")
        unknown = set(targets) - set(counts)
        if unknown:
            raise PlanError(f"targets name unknown classes: {sorted(unknown)}")
        resolved = {name: int(targets.get(name, n)) for name, n in counts.items()}
        for name, n in counts.items():
            if resolved[name] < n:
                raise PlanError(f"target for {name} ({resolved[name]}) is below its original count ({n})")
            if n == 0 and resolved[name] > 0:
                raise PlanError(f"class {name} has no originals to augment toward target {resolved[name]}")
    else:
        raise PlanError(f"unknown strategy {strategy!r}")
    classes = tuple(ClassPlan(name, n, resolved[name]) for name, n in counts.items())
    return RebalancePlan(strategy, mean_count(counts), classes, seed, dict(targets) if targets else None)


# --------------------------------------------------------------------------
# materialization


def augmented_name(parent_id: str, copy_index: int) -> str:
    """``<parent_id>__aug<k>.png`` with the parent's file suffix dropped."""
    stem = PurePosixPath(parent_id).with_suffix("")
    return f"{stem}__aug{copy_index}.png"


def _class_of(entry: ManifestEntry, level: str) -> str:
    if level == "coarse":
        return entry.label.coarse.value
    return entry.label.subclass.value


def _jobs(plan: RebalancePlan, manifest: DatasetManifest) -> list[tuple[ManifestEntry, int]]:
    level = plan.level
    counts = class_counts(manifest, Split.TRAIN, level)
    by_name = {c.name: c for c in plan.classes}
    mismatched = [
        f"{name}: plan {by_name[name].original if name in by_name else 'missing'}, manifest {n}"
        for name, n in counts.items()
        if (by_name[name].original if name in by_name else 0) != n
    ]
    mismatched += [f"{name}: in plan, absent from manifest" for name in by_name if name not in counts]
    if mismatched:
        raise PlanError("plan does not match manifest training counts: " + "; ".join(mismatched))

    jobs = []
    for c in plan.classes:
        if c.extra == 0:
            continue
        members = sorted(
            (e for e in manifest.in_split(Split.TRAIN, originals_only=True) if _class_of(e, level) == c.name),
            key=lambda e: e.image_id,
        )
        for rank, e in enumerate(members):
            for k in range(1, c.copies_for(rank) + 1):
                jobs.append((e, k))
    return jobs


def materialize(
    plan: RebalancePlan,
    manifest: DatasetManifest,
    policy: IntensivePolicy = INTENSIVE,
    out_dir: str | os.PathLike = "augmented",
    jobs: int = 1,
    image_loader=imageops.load_image,
) -> DatasetManifest:
    """Write intensive copies as PNGs under ``out_dir`` and return the manifest
    with matching Augmented entries appended (split Train).

    Output bytes do not depend on ``jobs``: each copy's randomness comes only
    from ``derive_seed(plan.seed, image_id, copy_index)``.
    """
    work = _jobs(plan, manifest)
    out_dir = Path(out_dir)

    def run(item: tuple[ManifestEntry, int]) -> ManifestEntry:
        entry, k = item
        name = augmented_name(entry.image_id, k)
        img = image_loader(entry.path)
        out = augment.intensive_copy(img, plan.seed, entry.image_id, k, policy)
        dest = out_dir / name
        imageops.save_png(out, dest)
        return ManifestEntry(
            image_id=name,
            path=str(dest),
            label=ClassLabel(entry.label.coarse, entry.label.subclass),
            magnification=entry.magnification,
            split=Split.TRAIN,
            parent_id=entry.image_id,
            copy_index=k,
        )

    log.info("materializing %d augmented copies into %s (jobs=%d)", len(work), out_dir, jobs)
    if jobs <= 1:
        new_entries = [run(w) for w in work]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            new_entries = list(pool.map(run, work))

    result = with_entries(manifest, new_entries)
    final = _train_totals(result, plan.level)
    for c in plan.classes:
        if final.get(c.name, 0) != c.target:
            raise PlanError(f"class {c.name}: materialized {final[c.name]} images, plan target {c.target}")
    return result


def _train_totals(manifest: DatasetManifest, level: str) -> dict[str, int]:
    totals: dict[str, int] = {}
    for e in manifest.in_split(Split.TRAIN):
        name = _class_of(e, level)
        totals[name] = totals.get(name, 0) + 1
    return totals
