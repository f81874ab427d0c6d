"""Small encoder-decoder segmentation network with a detachable projection head.

The network is sized for CPU training and exact finite-difference
verification: per level two 3x3 convolutions with rectifier units and a
2x2 average-pool downsample; the decoder mirrors with nearest-neighbor
upsampling followed by a 3x3 convolution, a skip concatenation, and a
3x3 merge convolution; a 1x1 head emits one logit map.  A two-layer
projection head (global average pool -> linear -> rectifier -> linear ->
row L2 normalization) hangs off the bottleneck for contrastive
pretraining.

All forward/backward passes are plain numpy and dtype-agnostic: training
runs in float32, gradient checks rerun the same code in float64.
Convolution backward reuses the forward kernel (gradient of a stride-1
same-padded correlation is a correlation with the spatially flipped,
channel-transposed kernel), so there is a single conv code path to trust.

Parameter tensors live in an insertion-ordered dict with a stable naming
scheme (``enc{i}.conv{j}``, ``bottleneck.conv{j}``, ``dec{i}.up``,
``dec{i}.merge``, ``head``, ``proj.fc{j}``; suffixes ``.w``/``.b``),
which doubles as the checkpoint layout.
"""

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    BadMagicError,
    CheckpointError,
    DimensionMismatchError,
    ShapeMismatchError,
    TruncatedPayloadError,
    ValidationError,
)
from .rng import stream

#: probabilities are clamped to [EPS_PROB, 1 - EPS_PROB] before any log
EPS_PROB = 1e-7

CHECKPOINT_MAGIC = b"SSEG1"

ENCODER_PREFIXES = ("enc", "bottleneck")
PROJECTION_PREFIX = "proj"


@dataclass(frozen=True)
class ArchConfig:
    """Network sizing; defaults give ~170k parameters on 32x32 tiles."""

    in_channels: int = 3
    base_width: int = 8
    depth: int = 3
    embed_dim: int = 32
    tile: int = 32

    def validate(self) -> "ArchConfig":
        if self.base_width < 2:
            raise ValidationError(f"base_width: must be >= 2, got {self.base_width}")
        if self.embed_dim < 2:
            raise ValidationError(f"embed_dim: must be >= 2, got {self.embed_dim}")
        if self.depth < 1:
            raise ValidationError(f"depth: must be >= 1, got {self.depth}")
        if self.in_channels < 1:
            raise ValidationError(f"in_channels: must be >= 1, got {self.in_channels}")
        if self.tile % (2**self.depth) != 0:
            raise ValidationError(
                f"tile: {self.tile} not divisible by 2^depth = {2**self.depth}"
            )
        return self

    def width(self, level: int) -> int:
        return self.base_width * (2**level)

    @property
    def bottleneck_width(self) -> int:
        return self.base_width * (2**self.depth)

    @property
    def embed_hidden(self) -> int:
        return 2 * self.embed_dim


def param_shapes(arch: ArchConfig) -> dict[str, tuple[int, ...]]:
    """Tensor name -> shape, in the pinned checkpoint order."""
    arch.validate()
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = arch.in_channels
    for i in range(arch.depth):
        w = arch.width(i)
        shapes[f"enc{i}.conv1.w"] = (w, c_in, 3, 3)
        shapes[f"enc{i}.conv1.b"] = (w,)
        shapes[f"enc{i}.conv2.w"] = (w, w, 3, 3)
        shapes[f"enc{i}.conv2.b"] = (w,)
        c_in = w
    bw = arch.bottleneck_width
    shapes["bottleneck.conv1.w"] = (bw, c_in, 3, 3)
    shapes["bottleneck.conv1.b"] = (bw,)
    shapes["bottleneck.conv2.w"] = (bw, bw, 3, 3)
    shapes["bottleneck.conv2.b"] = (bw,)
    c_above = bw
    for i in reversed(range(arch.depth)):
        w = arch.width(i)
        shapes[f"dec{i}.up.w"] = (w, c_above, 3, 3)
        shapes[f"dec{i}.up.b"] = (w,)
        shapes[f"dec{i}.merge.w"] = (w, 2 * w, 3, 3)
        shapes[f"dec{i}.merge.b"] = (w,)
        c_above = w
    shapes["head.w"] = (1, arch.base_width, 1, 1)
    shapes["head.b"] = (1,)
    shapes["proj.fc1.w"] = (arch.embed_hidden, bw)
    shapes["proj.fc1.b"] = (arch.embed_hidden,)
    shapes["proj.fc2.w"] = (arch.embed_dim, arch.embed_hidden)
    shapes["proj.fc2.b"] = (arch.embed_dim,)
    return shapes


@dataclass
class ModelParams:
    """All learnable tensors, keyed by the stable naming scheme."""

    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def depth(self) -> int:
        return sum(1 for n in self.tensors if n.endswith(".conv1.w") and n.startswith("enc"))

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({k: v.astype(dtype) for k, v in self.tensors.items()})

    def index(self) -> list[tuple[str, tuple[int, ...], int]]:
        """(name, shape, float offset) triples in checkpoint order."""
        out, offset = [], 0
        for name, t in self.tensors.items():
            out.append((name, t.shape, offset))
            offset += t.size
        return out


def init_params(arch: ArchConfig, seed: int) -> ModelParams:
    """Fan-in-scaled uniform weights, zero biases; deterministic in (arch, seed).

    A weight tensor with fan-in f is drawn from U[-sqrt(3/f), sqrt(3/f)]
    (variance 1/f); for a 3x3 convolution f = 9 * c_in.
    """
    tensors = {}
    for name, shape in param_shapes(arch).items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
            continue
        fan_in = int(np.prod(shape[1:]))
        bound = np.sqrt(3.0 / fan_in)
        draw = stream("model.init", seed, name).uniform(-bound, bound, size=shape)
        tensors[name] = draw.astype(np.float32)
    return ModelParams(tensors)


# ---------------------------------------------------------------------------
# layer primitives (dtype-agnostic, stride 1, SAME padding)
# ---------------------------------------------------------------------------


def _conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Correlation with SAME padding; returns (y, im2col matrix for backward)."""
    bsz, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (B,C,H,W,kh,kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz, h * wd, c * kh * kw)
    y = cols @ w.reshape(o, -1).T + b
    return np.ascontiguousarray(y.transpose(0, 2, 1)).reshape(bsz, o, h, wd), cols


def _conv2d_backward(dy: np.ndarray, cols: np.ndarray, w: np.ndarray, in_shape):
    bsz, c, h, wd = in_shape
    o, _, kh, kw = w.shape
    dy2 = np.ascontiguousarray(dy.reshape(bsz, o, h * wd).transpose(0, 2, 1)).reshape(-1, o)
    dw = (dy2.T @ cols.reshape(-1, c * kh * kw)).reshape(w.shape)
    db = dy.sum(axis=(0, 2, 3))
    # input gradient: correlate dy with the flipped, channel-transposed kernel
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dx, _ = _conv2d(dy, wt, np.zeros(c, dtype=dy.dtype))
    return dx, dw, db


def _relu(x):
    return np.maximum(x, 0)


def _avgpool2(x):
    b, c, h, w = x.shape
    return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _avgpool2_backward(dy):
    up = np.repeat(np.repeat(dy, 2, axis=2), 2, axis=3)
    return up * np.asarray(0.25, dtype=dy.dtype)


def _upsample2(x):
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def _upsample2_backward(dy):
    b, c, h, w = dy.shape
    return dy.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def _sigmoid(x):
    with np.errstate(over="ignore"):
        return np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))


# ---------------------------------------------------------------------------
# forward / backward passes
# ---------------------------------------------------------------------------


def _check_batch(params: ModelParams, batch: np.ndarray, paired: bool = False) -> None:
    if batch.ndim != 4:
        raise DimensionMismatchError(f"batch: expected 4-d (B, C, H, W), got shape {batch.shape}")
    c_in = params["enc0.conv1.w"].shape[1]
    if batch.shape[1] != c_in:
        raise DimensionMismatchError(f"batch: expected {c_in} channels, got {batch.shape[1]}")
    step = 2 ** params.depth
    if batch.shape[2] % step or batch.shape[3] % step:
        raise DimensionMismatchError(
            f"batch: spatial dims {batch.shape[2:]} not divisible by 2^depth = {step}"
        )
    if paired and batch.shape[0] % 2:
        raise DimensionMismatchError(f"batch: view pairs need an even batch, got {batch.shape[0]}")


def _encoder_forward(p: ModelParams, x: np.ndarray, cache: dict):
    depth = p.depth
    h = x
    skips = []
    for i in range(depth):
        for j in (1, 2):
            pre, cols = _conv2d(h, p[f"enc{i}.conv{j}.w"], p[f"enc{i}.conv{j}.b"])
            cache[f"enc{i}.conv{j}"] = (cols, pre, h.shape)
            h = _relu(pre)
        skips.append(h)
        h = _avgpool2(h)
    for j in (1, 2):
        pre, cols = _conv2d(h, p[f"bottleneck.conv{j}.w"], p[f"bottleneck.conv{j}.b"])
        cache[f"bottleneck.conv{j}"] = (cols, pre, h.shape)
        h = _relu(pre)
    return h, skips


def _encoder_backward(p: ModelParams, cache: dict, d_bott, d_skips, grads: dict):
    depth = p.depth
    dh = d_bott
    for j in (2, 1):
        cols, pre, in_shape = cache[f"bottleneck.conv{j}"]
        dpre = dh * (pre > 0)
        dh, dw, db = _conv2d_backward(dpre, cols, p[f"bottleneck.conv{j}.w"], in_shape)
        grads[f"bottleneck.conv{j}.w"] = dw
        grads[f"bottleneck.conv{j}.b"] = db
    for i in reversed(range(depth)):
        dh = _avgpool2_backward(dh)
        if d_skips is not None and d_skips[i] is not None:
            dh = dh + d_skips[i]
        for j in (2, 1):
            cols, pre, in_shape = cache[f"enc{i}.conv{j}"]
            dpre = dh * (pre > 0)
            dh, dw, db = _conv2d_backward(dpre, cols, p[f"enc{i}.conv{j}.w"], in_shape)
            grads[f"enc{i}.conv{j}.w"] = dw
            grads[f"enc{i}.conv{j}.b"] = db
    return dh


def forward_segment(params: ModelParams, batch: np.ndarray, cache: dict | None = None) -> np.ndarray:
    """Per-pixel panel probabilities, shape (B, 1, H, W), clamped inside (0, 1).

    Pass a dict as ``cache`` to retain intermediates for
    :func:`backward_segment`.
    """
    _check_batch(params, batch)
    c = cache if cache is not None else {}
    h, skips = _encoder_forward(params, batch, c)
    depth = params.depth
    for i in reversed(range(depth)):
        h = _upsample2(h)
        pre, cols = _conv2d(h, params[f"dec{i}.up.w"], params[f"dec{i}.up.b"])
        c[f"dec{i}.up"] = (cols, pre, h.shape)
        h = _relu(pre)
        h = np.concatenate([h, skips[i]], axis=1)
        pre, cols = _conv2d(h, params[f"dec{i}.merge.w"], params[f"dec{i}.merge.b"])
        c[f"dec{i}.merge"] = (cols, pre, h.shape)
        h = _relu(pre)
    logits, cols = _conv2d(h, params["head.w"], params["head.b"])
    c["head"] = (cols, logits, h.shape)
    y_raw = _sigmoid(logits)
    c["y_raw"] = y_raw
    return np.clip(y_raw, EPS_PROB, 1.0 - EPS_PROB)


def backward_segment(params: ModelParams, cache: dict, d_probs: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients of every touched tensor given d loss / d probabilities."""
    y_raw = cache["y_raw"]
    inside = (y_raw > EPS_PROB) & (y_raw < 1.0 - EPS_PROB)
    dlogits = d_probs * np.where(inside, y_raw * (1.0 - y_raw), 0.0).astype(y_raw.dtype)
    cols, _, in_shape = cache["head"]
    dh, dw, db = _conv2d_backward(dlogits, cols, params["head.w"], in_shape)
    grads = {"head.w": dw, "head.b": db}
    depth = params.depth
    d_skips: list = [None] * depth
    for i in range(depth):
        cols, pre, in_shape = cache[f"dec{i}.merge"]
        dpre = dh * (pre > 0)
        dcat, dw, db = _conv2d_backward(dpre, cols, params[f"dec{i}.merge.w"], in_shape)
        grads[f"dec{i}.merge.w"] = dw
        grads[f"dec{i}.merge.b"] = db
        k = params[f"dec{i}.up.w"].shape[0]
        d_skips[i] = dcat[:, k:]
        cols, pre, in_shape = cache[f"dec{i}.up"]
        dpre = dcat[:, :k] * (pre > 0)
        dup, dw, db = _conv2d_backward(dpre, cols, params[f"dec{i}.up.w"], in_shape)
        grads[f"dec{i}.up.w"] = dw
        grads[f"dec{i}.up.b"] = db
        dh = _upsample2_backward(dup)
    _encoder_backward(params, cache, dh, d_skips, grads)
    return grads


def forward_embed(params: ModelParams, batch: np.ndarray, cache: dict | None = None) -> np.ndarray:
    """Row-normalized projection-head embeddings, shape (2N, embed_dim).

    Rows keep input order, so rows (2k, 2k+1) stay the two views of
    source item k.
    """
    _check_batch(params, batch, paired=True)
    c = cache if cache is not None else {}
    bott, _ = _encoder_forward(params, batch, c)
    c["gap.in_shape"] = bott.shape
    g = bott.mean(axis=(2, 3))
    c["fc1.in"] = g
    pre1 = g @ params["proj.fc1.w"].T + params["proj.fc1.b"]
    c["fc1.pre"] = pre1
    h1 = _relu(pre1)
    c["fc2.in"] = h1
    u = h1 @ params["proj.fc2.w"].T + params["proj.fc2.b"]
    norms = np.sqrt((u * u).sum(axis=1, keepdims=True))
    norms = np.maximum(norms, np.asarray(1e-12, dtype=u.dtype))
    z = u / norms
    c["embed.norms"] = norms
    c["embed.z"] = z
    return z


def backward_embed(params: ModelParams, cache: dict, dz: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of encoder + projection tensors given d loss / d embeddings."""
    z, norms = cache["embed.z"], cache["embed.norms"]
    du = (dz - z * (z * dz).sum(axis=1, keepdims=True)) / norms
    h1 = cache["fc2.in"]
    grads = {
        "proj.fc2.w": du.T @ h1,
        "proj.fc2.b": du.sum(axis=0),
    }
    dh1 = du @ params["proj.fc2.w"]
    dpre1 = dh1 * (cache["fc1.pre"] > 0)
    grads["proj.fc1.w"] = dpre1.T @ cache["fc1.in"]
    grads["proj.fc1.b"] = dpre1.sum(axis=0)
    dg = dpre1 @ params["proj.fc1.w"]
    b, ch, h, w = cache["gap.in_shape"]
    dbott = np.broadcast_to((dg / (h * w))[:, :, None, None], (b, ch, h, w)).copy()
    _encoder_backward(params, cache, dbott, None, grads)
    return grads


# ---------------------------------------------------------------------------
# checkpoint IO
# ---------------------------------------------------------------------------


def save_checkpoint(params: ModelParams, arch: ArchConfig, path: Path | str) -> None:
    """Write magic + length-prefixed JSON header + little-endian float32 payload."""
    expected = param_shapes(arch)
    meta = []
    offset = 0
    for name, shape in expected.items():
        t = params.tensors[name]
        if tuple(t.shape) != shape:
            raise ShapeMismatchError(f"{name}: tensor shape {t.shape} does not match arch {shape}")
        meta.append({"name": name, "shape": list(shape), "offset": offset})
        offset += t.size
    header = json.dumps({"arch": asdict(arch), "tensors": meta}).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(params.tensors[name]).astype("<f4", copy=False).tobytes()
        for name in expected
    )
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)


def load_checkpoint(path: Path | str) -> tuple[ModelParams, ArchConfig]:
    """Inverse of :func:`save_checkpoint`; bit-identical roundtrip."""
    data = Path(path).read_bytes()
    if len(data) < len(CHECKPOINT_MAGIC):
        raise TruncatedPayloadError(f"{path}: file shorter than the magic prefix")
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:5]!r}, expected {CHECKPOINT_MAGIC!r}")
    pos = len(CHECKPOINT_MAGIC)
    if len(data) < pos + 4:
        raise TruncatedPayloadError(f"{path}: missing header length")
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if len(data) < pos + hlen:
        raise TruncatedPayloadError(f"{path}: header truncated")
    try:
        header = json.loads(data[pos : pos + hlen].decode("utf-8"))
        arch = ArchConfig(**header["arch"]).validate()
        declared = [(t["name"], tuple(t["shape"]), int(t["offset"])) for t in header["tensors"]]
    except (KeyError, TypeError, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: invalid header ({exc})") from exc
    pos += hlen

    expected = param_shapes(arch)
    if len(declared) != len(expected):
        raise ShapeMismatchError(
            f"{path}: header declares {len(declared)} tensors, arch needs {len(expected)}"
        )
    offset = 0
    for (name, shape, off), (exp_name, exp_shape) in zip(declared, expected.items()):
        if name != exp_name or shape != exp_shape or off != offset:
            raise ShapeMismatchError(
                f"{path}: header entry ({name}, {shape}, {off}) does not match "
                f"expected ({exp_name}, {exp_shape}, {offset})"
            )
        offset += int(np.prod(shape))
    payload = data[pos:]
    if len(payload) != offset * 4:
        raise TruncatedPayloadError(
            f"{path}: payload holds {len(payload) // 4} floats, header declares {offset}"
        )
    flat = np.frombuffer(payload, dtype="<f4")
    tensors = {}
    for name, shape, off in declared:
        size = int(np.prod(shape))
        tensors[name] = flat[off : off + size].reshape(shape).astype(np.float32, copy=True)
    return ModelParams(tensors), arch
