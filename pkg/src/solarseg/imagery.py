"""Dataset model: synthetic scenes, label corruption, disk IO, tiling, subsetting.

Images are ``float32`` arrays of shape (H, W, 3) with channel values in
[0, 1]; masks are ``uint8`` arrays of shape (H, W) with values in {0, 1}
(1 = solar panel).  The synthetic generator renders a grid of dark
rectangular panels on one of two textured backgrounds ("rooftop" and
"field"), which differ in color statistics and panel aspect ratio so
that cross-domain transfer has an actual gap to bridge.

All operations are pure functions of (inputs, seed); see :mod:`.rng`.
"""

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import (
    DatasetLayoutError,
    DimensionMismatchError,
    NonBinaryMaskError,
    UnreadableImageError,
    ValidationError,
)
from .rng import stream

FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.uint8)

# panel aspect (width/height) ranges per background domain
_ASPECT = {"rooftop": (1.1, 1.8), "field": (2.4, 3.6)}


def check_image(image: np.ndarray, name: str = "image") -> np.ndarray:
    """Validate an (H, W, 3) image with channels in [0, 1]."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(f"{name}: expected (H, W, 3) array, got shape {arr.shape}")
    if arr.shape[0] < 8 or arr.shape[1] < 8:
        raise ValidationError(f"{name}: height and width must be >= 8, got {arr.shape[:2]}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValidationError(f"{name}: channel values must lie in [0, 1]")
    return arr


def check_mask(mask: np.ndarray, image: np.ndarray | None = None, name: str = "mask") -> np.ndarray:
    """Validate an (H, W) binary mask, optionally against a paired image."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValidationError(f"{name}: expected (H, W) array, got shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise NonBinaryMaskError(f"{name}: values must be exactly 0 or 1")
    if image is not None and arr.shape != np.asarray(image).shape[:2]:
        raise DimensionMismatchError(
            f"{name}: shape {arr.shape} does not match image {np.asarray(image).shape[:2]}"
        )
    return arr


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of one synthetic solar-farm tile."""

    tile_size: int = 32
    panel_rows: tuple[int, int] = (2, 4)
    panel_cols: tuple[int, int] = (2, 4)
    panel_fill: tuple[float, float] = (0.15, 0.35)
    background: str = "rooftop"
    noise_level: float = 0.02

    def validate(self) -> "SceneSpec":
        if self.tile_size < 16:
            raise ValidationError(f"tile_size: must be >= 16, got {self.tile_size}")
        for fname in ("panel_rows", "panel_cols"):
            lo, hi = getattr(self, fname)
            if not (1 <= lo <= hi):
                raise ValidationError(f"{fname}: need 1 <= lo <= hi, got ({lo}, {hi})")
        lo, hi = self.panel_fill
        if not (0.0 < lo < hi < 1.0):
            raise ValidationError(f"panel_fill: need 0 < lo < hi < 1, got ({lo}, {hi})")
        if self.background not in _ASPECT:
            raise ValidationError(
                f"background: unknown domain {self.background!r}, expected one of {sorted(_ASPECT)}"
            )
        if self.noise_level < 0:
            raise ValidationError(f"noise_level: must be >= 0, got {self.noise_level}")
        return self


@dataclass(frozen=True)
class CorruptionSpec:
    """How to degrade a ground-truth mask before it is used as a label."""

    drop_rate: float = 0.0
    erode_px: int = 0

    def validate(self) -> "CorruptionSpec":
        if not (0.0 <= self.drop_rate <= 1.0):
            raise ValidationError(f"drop_rate: must lie in [0, 1], got {self.drop_rate}")
        if self.erode_px < 0 or int(self.erode_px) != self.erode_px:
            raise ValidationError(f"erode_px: must be a non-negative integer, got {self.erode_px}")
        return self


@dataclass(frozen=True)
class ManifestItem:
    id: str
    image_path: Path
    mask_path: Path | None = None


@dataclass
class DatasetManifest:
    """Split-aware index of image/mask pairs on disk."""

    name: str
    tile_size: int
    items: dict[str, ManifestItem] = field(default_factory=dict)
    splits: dict[str, list[str]] = field(default_factory=lambda: {"train": [], "val": [], "test": []})

    def validate(self) -> "DatasetManifest":
        seen: dict[str, str] = {}
        for split, ids in self.splits.items():
            if split not in ("train", "val", "test"):
                raise ValidationError(f"manifest {self.name}: unknown split {split!r}")
            for i in ids:
                if i not in self.items:
                    raise ValidationError(f"manifest {self.name}: split {split} references unknown id {i!r}")
                if i in seen and seen[i] != split:
                    raise ValidationError(f"manifest {self.name}: id {i!r} appears in both {seen[i]} and {split}")
                seen[i] = split
                if self.items[i].mask_path is None and split != "train":
                    raise ValidationError(
                        f"manifest {self.name}: unlabeled item {i!r} may only appear in train, found in {split}"
                    )
        return self

    def labeled_ids(self, split: str) -> list[str]:
        return [i for i in self.splits[split] if self.items[i].mask_path is not None]


# ---------------------------------------------------------------------------
# synthetic scene generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PanelRect:
    """One rendered panel: half-open pixel rectangle [y0, y1) x [x0, x1)."""

    y0: int
    x0: int
    y1: int
    x1: int


def _grid_feasible(rows: int, cols: int, t: int, lo: float, hi: float) -> bool:
    cell_h, cell_w = t // rows, t // cols
    if cell_h < 2 or cell_w < 2:
        return False
    # panels keep a >= 1 px gap to the cell border so components never touch
    max_frac = rows * cols * (cell_h - 1) * (cell_w - 1) / (t * t)
    min_frac = rows * cols * 1 / (t * t)
    return min_frac <= hi and max_frac >= lo


def _choose_grid(spec: SceneSpec, rng: np.random.Generator) -> tuple[int, int]:
    r = int(rng.integers(spec.panel_rows[0], spec.panel_rows[1] + 1))
    c = int(rng.integers(spec.panel_cols[0], spec.panel_cols[1] + 1))
    lo, hi = spec.panel_fill
    if _grid_feasible(r, c, spec.tile_size, lo, hi):
        return r, c
    # deterministic fallback: nearest feasible grid in the allowed ranges
    candidates = [
        (abs(rr - r) + abs(cc - c), rr, cc)
        for rr in range(spec.panel_rows[0], spec.panel_rows[1] + 1)
        for cc in range(spec.panel_cols[0], spec.panel_cols[1] + 1)
        if _grid_feasible(rr, cc, spec.tile_size, lo, hi)
    ]
    if not candidates:
        raise ValidationError(
            f"panel_fill: range {spec.panel_fill} unachievable for any grid in "
            f"rows {spec.panel_rows} x cols {spec.panel_cols} at tile_size {spec.tile_size}"
        )
    candidates.sort()
    return candidates[0][1], candidates[0][2]


def _panel_dims(
    spec: SceneSpec, rows: int, cols: int, fill: float, aspect: float
) -> tuple[int, int]:
    """Integer panel height/width hitting the fill band, or raise."""
    t = spec.tile_size
    lo, hi = spec.panel_fill
    cell_h, cell_w = t // rows, t // cols
    area = fill * t * t / (rows * cols)
    h = int(np.clip(round(math.sqrt(area / aspect)), 1, cell_h - 1))
    w = int(np.clip(round(area / h), 1, cell_w - 1))

    def frac(hh: int, ww: int) -> float:
        return rows * cols * hh * ww / (t * t)

    for _ in range(256):
        f = frac(h, w)
        if f > hi:
            if w > 1 and (w >= h or h == 1):
                w -= 1
            elif h > 1:
                h -= 1
            else:
                break
        elif f < lo:
            grew = False
            for dh, dw in ((0, 1), (1, 0)):
                nh, nw = h + dh, w + dw
                if nh <= cell_h - 1 and nw <= cell_w - 1 and frac(nh, nw) <= hi:
                    h, w = nh, nw
                    grew = True
                    break
            if not grew:
                break
        else:
            return h, w
    raise ValidationError(
        f"panel_fill: could not realize a fill fraction inside {spec.panel_fill} "
        f"with a {rows}x{cols} grid at tile_size {t}"
    )


def scene_layout(spec: SceneSpec, seed: int) -> list[PanelRect]:
    """Panel rectangles for (spec, seed), identical to what generate_scene renders.

    Exposed so the rendered mask can be checked against re-rasterized
    geometry without re-running the full generator.
    """
    spec.validate()
    rng = stream("scene.layout", spec.background, seed)
    rows, cols = _choose_grid(spec, rng)
    lo, hi = spec.panel_fill
    t = spec.tile_size
    cell_h, cell_w = t // rows, t // cols
    min_f = max(lo, rows * cols / (t * t))
    max_f = min(hi, rows * cols * (cell_h - 1) * (cell_w - 1) / (t * t))
    fill = float(rng.uniform(min_f, max_f))
    aspect = float(rng.uniform(*_ASPECT[spec.background]))
    h, w = _panel_dims(spec, rows, cols, fill, aspect)

    # jitter keeps each panel strictly inside its own cell (>= 1 px border gap)
    dy = rng.integers(0, cell_h - h, size=rows * cols)
    dx = rng.integers(0, cell_w - w, size=rows * cols)
    rects = []
    k = 0
    for i in range(rows):
        for j in range(cols):
            y0 = i * cell_h + int(dy[k])
            x0 = j * cell_w + int(dx[k])
            rects.append(PanelRect(y0, x0, y0 + h, x0 + w))
            k += 1
    return rects


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    t = spec.tile_size
    if spec.background == "rooftop":
        base = rng.uniform(0.55, 0.72)
        img = np.full((t, t, 3), base)
        img[..., 0] += 0.03  # warm tint
        img[..., 2] -= 0.03
        # coarse roof-section structure, block-upsampled
        coarse = rng.uniform(-0.06, 0.06, size=(4, 4))
        block = -(-t // 4)
        sections = np.kron(coarse, np.ones((block, block)))[:t, :t]
        img += sections[..., None]
    else:  # field
        base_rgb = np.array([0.33, 0.46, 0.24]) + rng.uniform(-0.04, 0.04, size=3)
        img = np.broadcast_to(base_rgb, (t, t, 3)).copy()
        coarse = rng.uniform(-0.08, 0.08, size=(8, 8))
        block = -(-t // 8)
        blobs = np.kron(coarse, np.ones((block, block)))[:t, :t]
        blobs = ndimage.uniform_filter(blobs, size=3, mode="reflect")
        img += blobs[..., None]
        # crop-row stripes
        phase = rng.uniform(0, 2 * np.pi)
        rows_wave = 0.025 * np.sin(2 * np.pi * np.arange(t) / 6.0 + phase)
        img += rows_wave[:, None, None]
    return img


def generate_scene(spec: SceneSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Render one synthetic tile and its exact panel mask.

    Returns ``(image, mask)`` with the mask foreground fraction inside
    ``spec.panel_fill``.  Identical (spec, seed) pairs produce
    bit-identical arrays.
    """
    rects = scene_layout(spec, seed)
    rng = stream("scene.render", spec.background, seed)
    t = spec.tile_size

    img = _background(spec, rng)
    mask = np.zeros((t, t), dtype=np.uint8)

    panel_rgb = np.array([0.07, 0.09, 0.16])
    shades = rng.uniform(-0.02, 0.02, size=len(rects))
    for rect, shade in zip(rects, shades):
        img[rect.y0 : rect.y1, rect.x0 : rect.x1] = panel_rgb + shade
        # 1 px lighter frame, kept inside the rect so the mask stays exact
        if rect.y1 - rect.y0 >= 3 and rect.x1 - rect.x0 >= 3:
            img[rect.y0, rect.x0 : rect.x1] += 0.05
            img[rect.y1 - 1, rect.x0 : rect.x1] += 0.05
            img[rect.y0 : rect.y1, rect.x0] += 0.05
            img[rect.y0 : rect.y1, rect.x1 - 1] += 0.05
        mask[rect.y0 : rect.y1, rect.x0 : rect.x1] = 1

    if spec.noise_level > 0:
        img += rng.normal(0.0, spec.noise_level, size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)

    frac = float(mask.mean())
    if not (spec.panel_fill[0] <= frac <= spec.panel_fill[1]):
        raise ValidationError(
            f"panel_fill: rendered fraction {frac:.4f} fell outside {spec.panel_fill}"
        )
    return img, mask


def corrupt_mask(mask: np.ndarray, c: CorruptionSpec, seed: int) -> np.ndarray:
    """Delete a seeded fraction of panel components and erode the survivors.

    Components use 4-connectivity and are numbered in row-major scan
    order of their first pixel.  ``floor(drop_rate * n + 0.5)`` of them,
    chosen by a seeded shuffle, are removed; the rest are eroded with a
    square structuring element of radius ``erode_px``.  Never adds
    foreground.
    """
    check_mask(mask)
    c.validate()
    if c.drop_rate == 0.0 and c.erode_px == 0:
        return mask.copy()

    labels, n = ndimage.label(mask, structure=FOUR_CONNECTED)
    if n == 0:
        return mask.copy()
    k = int(math.floor(c.drop_rate * n + 0.5))
    perm = stream("corrupt", seed).permutation(n)
    kept = perm[k:] + 1  # component labels are 1-based
    out = np.isin(labels, kept)
    if c.erode_px > 0 and out.any():
        size = 2 * int(c.erode_px) + 1
        out = ndimage.binary_erosion(out, structure=np.ones((size, size), dtype=bool))
    return out.astype(np.uint8)


# ---------------------------------------------------------------------------
# disk IO
# ---------------------------------------------------------------------------


def load_image(path: Path | str) -> np.ndarray:
    """Read an 8-bit RGB PNG into a float32 (H, W, 3) array, values v/255."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode != "RGB":
                raise UnreadableImageError(f"{path}: expected 8-bit RGB, got mode {im.mode!r}")
            arr = np.asarray(im, dtype=np.uint8)
    except FileNotFoundError:
        raise DatasetLayoutError(f"{path}: file not found") from None
    except UnreadableImageError:
        raise
    except Exception as exc:  # PIL raises various decode errors
        raise UnreadableImageError(f"{path}: {exc}") from exc
    return (arr.astype(np.float32) / 255.0).clip(0.0, 1.0)


def load_mask(path: Path | str) -> np.ndarray:
    """Read an 8-bit grayscale PNG mask; 0 -> 0, 255 -> 1, anything else rejects."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode != "L":
                raise UnreadableImageError(f"{path}: expected 8-bit grayscale, got mode {im.mode!r}")
            arr = np.asarray(im, dtype=np.uint8)
    except FileNotFoundError:
        raise DatasetLayoutError(f"{path}: file not found") from None
    except UnreadableImageError:
        raise
    except Exception as exc:
        raise UnreadableImageError(f"{path}: {exc}") from exc
    bad = np.setdiff1d(np.unique(arr), [0, 255])
    if bad.size:
        raise NonBinaryMaskError(f"{path}: mask contains values {bad.tolist()}, expected only 0 and 255")
    return (arr == 255).astype(np.uint8)


def save_image(image: np.ndarray, path: Path | str) -> None:
    arr = np.round(np.asarray(image) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def save_mask(mask: np.ndarray, path: Path | str) -> None:
    arr = (np.asarray(mask, dtype=np.uint8) * 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def load_dataset(root: Path | str, masks_dirname: str = "masks") -> DatasetManifest:
    """Index and validate the on-disk dataset layout rooted at ``root``.

    Expects ``root/images/<id>.png``, optional ``root/<masks_dirname>/<id>.png``
    and ``root/manifest.json``.  Every image is opened once to validate
    format and dimensions against its mask.
    """
    root = Path(root)
    images_dir = root / "images"
    masks_dir = root / masks_dirname
    manifest_path = root / "manifest.json"
    if not root.is_dir():
        raise DatasetLayoutError(f"{root}: dataset root does not exist")
    if not images_dir.is_dir():
        raise DatasetLayoutError(f"{images_dir}: images directory missing")
    if not manifest_path.is_file():
        raise DatasetLayoutError(f"{manifest_path}: manifest.json missing")

    try:
        meta = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{manifest_path}: invalid JSON ({exc})") from exc
    for key in ("name", "tile_size", "splits"):
        if key not in meta:
            raise ValidationError(f"{manifest_path}: missing key {key!r}")

    items: dict[str, ManifestItem] = {}
    for img_path in sorted(images_dir.glob("*.png")):
        item_id = img_path.stem
        image = load_image(img_path)
        mask_path = masks_dir / f"{item_id}.png"
        if mask_path.is_file():
            mask = load_mask(mask_path)
            if mask.shape != image.shape[:2]:
                raise DimensionMismatchError(
                    f"{mask_path}: mask shape {mask.shape} does not match image {image.shape[:2]}"
                )
            items[item_id] = ManifestItem(item_id, img_path, mask_path)
        else:
            items[item_id] = ManifestItem(item_id, img_path, None)

    splits = {s: list(meta["splits"].get(s, [])) for s in ("train", "val", "test")}
    manifest = DatasetManifest(
        name=str(meta["name"]), tile_size=int(meta["tile_size"]), items=items, splits=splits
    )
    return manifest.validate()


# ---------------------------------------------------------------------------
# tiling and subsetting
# ---------------------------------------------------------------------------


def _anchors(extent: int, tile: int, stride: int) -> list[int]:
    xs = list(range(0, extent - tile + 1, stride))
    if xs[-1] != extent - tile:
        xs.append(extent - tile)  # last window anchored at the border
    return xs


def tile_image(
    image: np.ndarray,
    mask: np.ndarray | None,
    tile: int,
    stride: int,
) -> list[tuple[np.ndarray, np.ndarray | None]]:
    """Cut an image (and paired mask) into tile x tile windows.

    Windows are enumerated row-major from the top-left; a window that
    would overrun an edge is anchored so it ends exactly at the border.
    """
    image = check_image(image)
    h, w = image.shape[:2]
    if mask is not None:
        mask = check_mask(mask, image)
    if tile > min(h, w):
        raise ValidationError(f"tile: {tile} exceeds image extent {min(h, w)}")
    if stride < 1:
        raise ValidationError(f"stride: must be >= 1, got {stride}")
    out = []
    for y in _anchors(h, tile, stride):
        for x in _anchors(w, tile, stride):
            sub_img = image[y : y + tile, x : x + tile].copy()
            sub_mask = mask[y : y + tile, x : x + tile].copy() if mask is not None else None
            out.append((sub_img, sub_mask))
    return out


def subset(manifest: DatasetManifest, fraction: float, seed: int) -> DatasetManifest:
    """Seeded prefix subsample of the train split; val/test untouched.

    One seeded permutation is drawn and a ``ceil(fraction * n)`` prefix
    taken, so subsets nest: the 60% subset is contained in the 80%
    subset for the same seed.
    """
    if not (0.0 < fraction <= 1.0):
        raise ValidationError(f"fraction: must lie in (0, 1], got {fraction}")
    train = manifest.splits["train"]
    if not train:
        raise ValidationError(f"manifest {manifest.name}: train split is empty")
    n = len(train)
    # the 1e-9 slack keeps ceil() from absorbing float error in fraction * n
    k = int(math.ceil(fraction * n - 1e-9))
    perm = stream("subset", seed).permutation(n)
    chosen = [train[int(i)] for i in perm[:k]]
    return replace(
        manifest,
        splits={"train": chosen, "val": list(manifest.splits["val"]), "test": list(manifest.splits["test"])},
    )
