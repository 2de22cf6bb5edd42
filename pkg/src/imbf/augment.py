"""Augmentation policies, parameter sampling and the transform pipeline.

Standard policies (levels 1-3) are sampled fresh every epoch for every
training image. The intensive policy is used once, to materialize extra copies
of under-represented classes; each copy draws from its own stream,
``derive_seed(global_seed, image_id, copy_index)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import imageops
from .imageops import HORIZONTAL, VERTICAL, AffineParams
from .seeding import check_seed, hash_seed, make_rng


@dataclass(frozen=True)
class StandardPolicy:
    level: str
    shear_range: float
    zoom_range: float
    rotation_range_deg: float
    width_shift: float
    height_shift: float
    horizontal_flip: bool = True
    brightness_range: tuple[float, float] | None = None


LEVEL_1 = StandardPolicy("L1", 0.1, 0.1, 20.0, 0.1, 0.1, True, None)
LEVEL_2 = StandardPolicy("L2", 0.2, 0.2, 30.0, 0.2, 0.2, True, (0.9, 1.1))
LEVEL_3 = StandardPolicy("L3", 0.4, 0.4, 40.0, 0.4, 0.4, True, (0.9, 1.1))
STANDARD_LEVELS = {"l1": LEVEL_1, "l2": LEVEL_2, "l3": LEVEL_3}
DEFAULT_STANDARD = LEVEL_2


def standard_policy(level: str) -> StandardPolicy:
    try:
        return STANDARD_LEVELS[level.lower()]
    except KeyError:
        raise ValueError(f"unknown augmentation level {level!r}; expected one of l1, l2, l3") from None


@dataclass(frozen=True)
class IntensivePolicy:
    p_hflip: float = 0.5
    p_vflip: float = 0.2
    rotation_deg: tuple[float, float] = (-45.0, 45.0)
    brightness: tuple[float, float] = (0.8, 1.2)
    blur_sigma: tuple[float, float] = (0.0, 3.0)
    # 0.01..0.05 of full range (the 8-bit figures are 0.01*255 .. 0.05*255)
    noise_scale: tuple[float, float] = (0.01, 0.05)


INTENSIVE = IntensivePolicy()


@dataclass(frozen=True)
class TransformParams:
    flips: frozenset[str] = field(default_factory=frozenset)
    affine: AffineParams = AffineParams()
    brightness: float = 1.0
    blur_sigma: float = 0.0
    noise_scale: float = 0.0
    noise_seed: int = 0

    @property
    def is_identity(self) -> bool:
        return (
            not self.flips
            and self.affine.is_identity
            and self.brightness == 1.0
            and self.blur_sigma == 0.0
            and self.noise_scale == 0.0
        )


def derive_seed(global_seed: int, image_id: str, copy_index: int) -> int:
    """BLAKE2b-64 of (global_seed, image_id, copy_index)."""
    if copy_index < 1:
        raise ValueError(f"copy_index must be >= 1, got {copy_index}")
    return hash_seed(check_seed(global_seed), image_id, int(copy_index))


def _symmetric(rng: np.random.Generator, r: float) -> float:
    return float(rng.uniform(-r, r))


def sample_standard(policy: StandardPolicy, rng: np.random.Generator) -> TransformParams:
    # draw order is part of the reproducibility contract; do not reorder
    rotation = _symmetric(rng, policy.rotation_range_deg)
    shear = _symmetric(rng, policy.shear_range)
    zoom = float(rng.uniform(1.0 - policy.zoom_range, 1.0 + policy.zoom_range))
    shift_x = _symmetric(rng, policy.width_shift)
    shift_y = _symmetric(rng, policy.height_shift)
    flips = frozenset()
    if policy.horizontal_flip and rng.random() < 0.5:
        flips = frozenset({HORIZONTAL})
    brightness = 1.0
    if policy.brightness_range is not None:
        brightness = float(rng.uniform(*policy.brightness_range))
    return TransformParams(
        flips=flips,
        affine=AffineParams(rotation, shear, zoom, shift_x, shift_y),
        brightness=brightness,
    )


def sample_intensive(policy: IntensivePolicy, rng: np.random.Generator) -> TransformParams:
    flips = set()
    if rng.random() < policy.p_hflip:
        flips.add(HORIZONTAL)
    if rng.random() < policy.p_vflip:
        flips.add(VERTICAL)
    rotation = float(rng.uniform(*policy.rotation_deg))
    brightness = float(rng.uniform(*policy.brightness))
    sigma = float(rng.uniform(*policy.blur_sigma))
    noise = float(rng.uniform(*policy.noise_scale))
    noise_seed = int(rng.integers(0, 2**64, dtype=np.uint64))
    return TransformParams(
        flips=frozenset(flips),
        affine=AffineParams(rotation_deg=rotation),
        brightness=brightness,
        blur_sigma=sigma,
        noise_scale=noise,
        noise_seed=noise_seed,
    )


def in_standard_range(params: TransformParams, policy: StandardPolicy) -> bool:
    a = params.affine
    lo, hi = policy.brightness_range or (1.0, 1.0)
    return (
        abs(a.rotation_deg) <= policy.rotation_range_deg
        and abs(a.shear) <= policy.shear_range
        and 1.0 - policy.zoom_range <= a.zoom <= 1.0 + policy.zoom_range
        and abs(a.shift_x) <= policy.width_shift
        and abs(a.shift_y) <= policy.height_shift
        and lo <= params.brightness <= hi
        and params.flips <= ({HORIZONTAL} if policy.horizontal_flip else set())
        and params.blur_sigma == 0.0
        and params.noise_scale == 0.0
    )


def in_intensive_range(params: TransformParams, policy: IntensivePolicy) -> bool:
    a = params.affine
    return (
        policy.rotation_deg[0] <= a.rotation_deg <= policy.rotation_deg[1]
        and a.shear == 0.0
        and a.zoom == 1.0
        and a.shift_x == 0.0
        and a.shift_y == 0.0
        and policy.brightness[0] <= params.brightness <= policy.brightness[1]
        and policy.blur_sigma[0] <= params.blur_sigma <= policy.blur_sigma[1]
        and policy.noise_scale[0] <= params.noise_scale <= policy.noise_scale[1]
        and params.flips <= {HORIZONTAL, VERTICAL}
    )


def apply_pipeline(img: np.ndarray, params: TransformParams) -> np.ndarray:
    """flips -> affine -> brightness -> blur -> noise."""
    imageops.check_image(img)
    out = img
    for axis in (HORIZONTAL, VERTICAL):
        if axis in params.flips:
            out = imageops.flip(out, axis)
    out = imageops.affine(out, params.affine)
    out = imageops.adjust_brightness(out, params.brightness)
    out = imageops.gaussian_blur(out, params.blur_sigma)
    out = imageops.add_gaussian_noise(out, params.noise_scale, make_rng(params.noise_seed))
    return out


def intensive_copy(img: np.ndarray, global_seed: int, image_id: str, copy_index: int,
                   policy: IntensivePolicy = INTENSIVE) -> np.ndarray:
    """The ``copy_index``-th intensive copy of an image; a pure function of its arguments."""
    rng = make_rng(derive_seed(global_seed, image_id, copy_index))
    return apply_pipeline(img, sample_intensive(policy, rng))
