"""Stochastic augmentation: paired flips, color jitter, HSV shift, two-view pairs.

Geometric transforms (flips) are applied identically to image and mask;
photometric transforms touch the image only.  Every operation draws from
its own seeded stream and a fixed number of draws is consumed regardless
of which probability gates fire, so outputs are bit-deterministic per
(inputs, policy, seed).

A policy with all probabilities and strengths at zero is a bit-exact
no-op: each photometric stage is skipped outright when its drawn
parameter is exactly neutral, so no float roundtrip error leaks in.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .imagery import check_image, check_mask
from .rng import derive_seed, stream


@dataclass(frozen=True)
class AugmentPolicy:
    """Flip/jitter/HSV-shift probabilities and strengths.

    ``brightness``/``contrast``/``saturation`` are maximum absolute
    multiplicative deviations (scale drawn from U[1-d, 1+d]);
    ``max_dh`` is in degrees, ``max_ds``/``max_dv`` additive in [0, 1]
    units.
    """

    p_flip_h: float = 0.5
    p_flip_v: float = 0.5
    p_jitter: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    max_dh: float = 18.0
    max_ds: float = 0.1
    max_dv: float = 0.1

    def validate(self) -> "AugmentPolicy":
        for fname in ("p_flip_h", "p_flip_v", "p_jitter"):
            v = getattr(self, fname)
            if not (0.0 <= v <= 1.0):
                raise ValidationError(f"{fname}: probability must lie in [0, 1], got {v}")
        for fname in ("brightness", "contrast", "saturation", "max_ds", "max_dv"):
            if getattr(self, fname) < 0:
                raise ValidationError(f"{fname}: strength must be >= 0")
        if not (0.0 <= self.max_dh <= 180.0):
            raise ValidationError(f"max_dh: must lie in [0, 180], got {self.max_dh}")
        return self

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class ViewPair:
    """Two augmented views of one source tile (a contrastive positive pair)."""

    view_a: np.ndarray
    view_b: np.ndarray
    source_id: str = ""


# ---------------------------------------------------------------------------
# geometric
# ---------------------------------------------------------------------------


def flip_h(image: np.ndarray, mask: np.ndarray | None = None):
    """Mirror about the vertical axis (left-right)."""
    out = np.ascontiguousarray(image[:, ::-1])
    if mask is None:
        return out, None
    return out, np.ascontiguousarray(mask[:, ::-1])


def flip_v(image: np.ndarray, mask: np.ndarray | None = None):
    """Mirror about the horizontal axis (top-bottom)."""
    out = np.ascontiguousarray(image[::-1, :])
    if mask is None:
        return out, None
    return out, np.ascontiguousarray(mask[::-1, :])


# ---------------------------------------------------------------------------
# RGB <-> HSV (hexcone model; h in degrees [0, 360), achromatic h = 0)
# ---------------------------------------------------------------------------


def rgb_to_hsv(r, g, b):
    """Standard hexcone conversion; accepts scalars or same-shape arrays."""
    r = np.asarray(r, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    delta = maxc - minc
    v = maxc
    s = np.where(maxc > 0, np.divide(delta, np.where(maxc > 0, maxc, 1.0)), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(
        delta == 0,
        0.0,
        np.where(
            maxc == r,
            np.mod((g - b) / safe, 6.0),
            np.where(maxc == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0),
        ),
    )
    h = np.mod(h * 60.0, 360.0)
    return h, s, v


def hsv_to_rgb(h, s, v):
    """Inverse hexcone conversion; h in degrees."""
    h = np.mod(np.asarray(h, dtype=np.float64), 360.0)
    s = np.asarray(s, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    c = v * s
    hp = h / 60.0
    x = c * (1.0 - np.abs(np.mod(hp, 2.0) - 1.0))
    m = v - c
    sector = np.floor(hp).astype(np.int64) % 6
    zeros = np.zeros_like(c)
    r1 = np.choose(sector, [c, x, zeros, zeros, x, c])
    g1 = np.choose(sector, [x, c, c, x, zeros, zeros])
    b1 = np.choose(sector, [zeros, zeros, x, c, c, x])
    return r1 + m, g1 + m, b1 + m


def _image_to_hsv(image: np.ndarray):
    return rgb_to_hsv(image[..., 0], image[..., 1], image[..., 2])


def _hsv_to_image(h, s, v, dtype) -> np.ndarray:
    r, g, b = hsv_to_rgb(h, s, v)
    return np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0).astype(dtype)


# ---------------------------------------------------------------------------
# photometric
# ---------------------------------------------------------------------------

_LUMA = np.array([0.299, 0.587, 0.114])  # Rec. 601 weights


def color_jitter(image: np.ndarray, policy: AugmentPolicy, seed: int) -> np.ndarray:
    """Brightness -> contrast (about mean luminance) -> saturation, gated at p_jitter.

    One gate draw plus three scale draws are consumed per call.  A stage
    whose drawn scale is exactly 1 is skipped, which makes the
    zero-strength policy bit-exact.
    """
    policy.validate()
    rng = stream("augment.jitter", seed)
    gate = rng.uniform()
    b = rng.uniform(1.0 - policy.brightness, 1.0 + policy.brightness)
    c = rng.uniform(1.0 - policy.contrast, 1.0 + policy.contrast)
    s = rng.uniform(1.0 - policy.saturation, 1.0 + policy.saturation)
    if gate >= policy.p_jitter:
        return image.copy()
    out = image
    if b != 1.0:
        out = np.clip(out * np.asarray(b, dtype=out.dtype), 0.0, 1.0)
    if c != 1.0:
        lum = float((out * _LUMA).sum(axis=-1).mean())
        out = np.clip(lum + (out - lum) * np.asarray(c, dtype=out.dtype), 0.0, 1.0).astype(image.dtype)
    if s != 1.0:
        h, sat, v = _image_to_hsv(out)
        sat = np.clip(sat * s, 0.0, 1.0)
        out = _hsv_to_image(h, sat, v, image.dtype)
    return out.copy() if out is image else out


def hsv_shift(image: np.ndarray, policy: AugmentPolicy, seed: int) -> np.ndarray:
    """Additive hue/saturation/value shift drawn once per image.

    Hue wraps modulo 360; saturation and value clamp to [0, 1].  All-zero
    maxima short-circuit to a bit-exact copy.
    """
    policy.validate()
    rng = stream("augment.hsv", seed)
    dh = rng.uniform(-policy.max_dh, policy.max_dh)
    ds = rng.uniform(-policy.max_ds, policy.max_ds)
    dv = rng.uniform(-policy.max_dv, policy.max_dv)
    if dh == 0.0 and ds == 0.0 and dv == 0.0:
        return image.copy()
    h, s, v = _image_to_hsv(image)
    h = np.mod(h + dh, 360.0)
    s = np.clip(s + ds, 0.0, 1.0)
    v = np.clip(v + dv, 0.0, 1.0)
    return _hsv_to_image(h, s, v, image.dtype)


# ---------------------------------------------------------------------------
# composed chains
# ---------------------------------------------------------------------------


def _apply_chain(image, mask, policy: AugmentPolicy, seed: int):
    """Flip gates + photometric ops, shared by labeled and view-pair paths."""
    rng = stream("augment.chain", seed)
    u_h = rng.uniform()
    u_v = rng.uniform()
    img, msk = image, mask
    if u_h < policy.p_flip_h:
        img, msk = flip_h(img, msk)
    if u_v < policy.p_flip_v:
        img, msk = flip_v(img, msk)
    img = color_jitter(img, policy, derive_seed("augment.chain.jitter", seed))
    img = hsv_shift(img, policy, derive_seed("augment.chain.hsv", seed))
    return img, msk


def augment_labeled(
    image: np.ndarray, mask: np.ndarray, policy: AugmentPolicy, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Augment a labeled pair: flips move image and mask together, color ops image only."""
    check_image(image)
    check_mask(mask, image)
    policy.validate()
    img, msk = _apply_chain(image, mask, policy, seed)
    if msk is mask:
        msk = mask.copy()
    return img, msk


def make_view_pair(
    image: np.ndarray, policy: AugmentPolicy, seed: int, source_id: str = ""
) -> ViewPair:
    """Two independently augmented views of one tile (contrastive positives).

    The two views draw from independent derived streams, so changing how
    view B is produced never perturbs view A.
    """
    check_image(image)
    policy.validate()
    view_a, _ = _apply_chain(image, None, policy, derive_seed("augment.view_a", seed))
    view_b, _ = _apply_chain(image, None, policy, derive_seed("augment.view_b", seed))
    return ViewPair(view_a=view_a, view_b=view_b, source_id=source_id)
