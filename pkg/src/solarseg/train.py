"""Training loops: contrastive pretraining, supervised fine-tuning, evaluation.

Both loops are deterministic functions of (dataset, arch, config): epoch
shuffles and per-item augmentation seeds come from named RNG streams, so
re-running a config reproduces every batch bit-for-bit.  Optimization is
Adam with bias correction, applied only to tensors that received a
gradient, which leaves decoder weights untouched during pretraining.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentPolicy, augment_labeled, make_view_pair
from .errors import NumericError, ShapeMismatchError, ValidationError
from .imagery import DatasetManifest, load_image, load_mask
from .losses import LossConfig, focal_loss, ntxent_loss
from .metrics import MetricsReport, binarize, confusion_counts, iou
from .model import (
    ENCODER_PREFIXES,
    PROJECTION_PREFIX,
    ArchConfig,
    ModelParams,
    backward_embed,
    backward_segment,
    forward_embed,
    forward_segment,
    init_params,
)
from .rng import derive_seed, stream


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters shared by both training stages."""

    batch_size: int = 8
    lr: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    epochs: int = 1
    seed: int = 0
    threshold: float = 0.5
    loss: LossConfig = LossConfig()
    policy: AugmentPolicy = AugmentPolicy()

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ValidationError(f"batch_size: must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ValidationError(f"lr: must be > 0, got {self.lr}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                raise ValidationError(f"{name}: must lie in [0, 1), got {b}")
        if self.adam_eps < 0:
            raise ValidationError(f"adam_eps: must be >= 0, got {self.adam_eps}")
        if self.epochs < 0:
            raise ValidationError(f"epochs: must be >= 0, got {self.epochs}")
        if not 0.0 < self.threshold < 1.0:
            raise ValidationError(f"threshold: must lie in (0, 1), got {self.threshold}")
        self.loss.validate()
        self.policy.validate()
        return self


@dataclass
class AdamState:
    """First/second moment accumulators, keyed like the parameter dict."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def init_adam(params: ModelParams) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(t) for k, t in params.tensors.items()},
        v={k: np.zeros_like(t) for k, t in params.tensors.items()},
    )


def adam_step(
    params: ModelParams, grads: dict[str, np.ndarray], state: AdamState, config: TrainConfig
) -> None:
    """One bias-corrected Adam update, in place; only tensors in ``grads`` move."""
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"{name}: non-finite gradient")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        update = (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
        params.tensors[name] -= config.lr * update


@dataclass
class RunHistory:
    """Per-epoch scalars from one training run.

    ``wall_ms`` is the only non-deterministic field; determinism checks
    should compare :meth:`core` instead of the whole record.
    """

    kind: str
    epochs: list[dict] = field(default_factory=list)
    best_val_iou: float | None = None
    best_epoch: int | None = None
    wall_ms: float = 0.0

    def core(self) -> dict:
        return {
            "kind": self.kind,
            "epochs": self.epochs,
            "best_val_iou": self.best_val_iou,
            "best_epoch": self.best_epoch,
        }


def _load_images(manifest: DatasetManifest, ids: list[str]) -> dict[str, np.ndarray]:
    return {i: load_image(manifest.items[i].image_path) for i in ids}


def _load_masks(manifest: DatasetManifest, ids: list[str]) -> dict[str, np.ndarray]:
    return {i: load_mask(manifest.items[i].mask_path) for i in ids}


def _to_batch(images: list[np.ndarray]) -> np.ndarray:
    return np.stack([np.ascontiguousarray(im.transpose(2, 0, 1)) for im in images])


def pretrain(
    dataset: DatasetManifest, arch: ArchConfig, config: TrainConfig
) -> tuple[ModelParams, RunHistory]:
    """Contrastive pretraining over the train split (labels ignored).

    Each epoch shuffles the split with a seeded stream, cuts it into
    full batches (a trailing partial batch is dropped), builds two
    augmented views per item, and minimizes the paired contrastive loss
    over the projection-head embeddings.
    """
    config.validate()
    arch.validate()
    t0 = time.perf_counter()
    ids = list(dataset.splits["train"])
    if len(ids) < config.batch_size:
        raise ValidationError(
            f"pretrain: train split has {len(ids)} items, need at least batch_size={config.batch_size}"
        )
    images = _load_images(dataset, ids)
    params = init_params(arch, config.seed)
    adam = init_adam(params)
    history = RunHistory(kind="pretrain")

    for epoch in range(config.epochs):
        order = stream("pretrain.shuffle", config.seed, epoch).permutation(len(ids))
        losses = []
        n_batches = len(ids) // config.batch_size
        for b in range(n_batches):
            chunk = [ids[int(k)] for k in order[b * config.batch_size : (b + 1) * config.batch_size]]
            views = []
            for item_id in chunk:
                pair = make_view_pair(
                    images[item_id],
                    config.policy,
                    derive_seed("pretrain.view", config.seed, epoch, item_id),
                    source_id=item_id,
                )
                views.extend((pair.view_a, pair.view_b))
            batch = _to_batch(views)
            cache: dict = {}
            try:
                z = forward_embed(params, batch, cache)
                loss, dz = ntxent_loss(z, config.loss.tau)
                grads = backward_embed(params, cache, dz)
                adam_step(params, grads, adam, config)
            except NumericError as exc:
                raise NumericError(f"pretrain epoch {epoch}, batch {b}: {exc}") from exc
            losses.append(loss)
        history.epochs.append(
            {"epoch": epoch, "loss": float(np.mean(losses)), "batches": n_batches}
        )

    history.wall_ms = (time.perf_counter() - t0) * 1000.0
    return params, history


def transfer_params(arch: ArchConfig, pretrained: ModelParams, seed: int) -> ModelParams:
    """Fresh init with encoder, bottleneck, and projection tensors copied over."""
    params = init_params(arch, seed)
    carried = ENCODER_PREFIXES + (PROJECTION_PREFIX,)
    for name, tensor in pretrained.tensors.items():
        if not name.startswith(carried):
            continue
        if name not in params.tensors:
            raise ShapeMismatchError(f"{name}: pretrained tensor has no slot in the target arch")
        if params.tensors[name].shape != tensor.shape:
            raise ShapeMismatchError(
                f"{name}: pretrained shape {tensor.shape} != target {params.tensors[name].shape}"
            )
        params.tensors[name] = tensor.astype(np.float32).copy()
    return params


def _score_split(
    params: ModelParams,
    ids: list[str],
    images: dict[str, np.ndarray],
    masks: dict[str, np.ndarray],
    threshold: float,
    batch_size: int,
) -> MetricsReport:
    total = None
    per_item = []
    for b in range(0, len(ids), batch_size):
        chunk = ids[b : b + batch_size]
        batch = _to_batch([images[i] for i in chunk])
        probs = forward_segment(params, batch)
        preds = binarize(probs, threshold)
        for k, item_id in enumerate(chunk):
            counts = confusion_counts(preds[k, 0], masks[item_id])
            per_item.append((item_id, iou(counts)))
            total = counts if total is None else total.add(counts)
    return MetricsReport(iou=iou(total), threshold=threshold, counts=total, per_item=per_item)


def finetune(
    dataset: DatasetManifest,
    arch: ArchConfig,
    config: TrainConfig,
    init: ModelParams | None = None,
) -> tuple[ModelParams, RunHistory]:
    """Supervised fine-tuning on labeled train items with focal loss.

    ``init`` carries pretrained weights; its encoder, bottleneck, and
    projection tensors are transferred while decoder and head start
    fresh.  After every epoch the model is scored on the val split and
    the best-scoring parameters (strictly greater IoU) are returned.
    A trailing partial batch is kept.
    """
    config.validate()
    arch.validate()
    t0 = time.perf_counter()
    ids = dataset.labeled_ids("train")
    if not ids:
        raise ValidationError("finetune: no labeled items in the train split")
    images = _load_images(dataset, ids)
    masks = _load_masks(dataset, ids)
    if init is None:
        params = init_params(arch, config.seed)
    else:
        params = transfer_params(arch, init, config.seed)
    adam = init_adam(params)
    history = RunHistory(kind="finetune")
    val_ids = dataset.labeled_ids("val")
    val_images = _load_images(dataset, val_ids)
    val_masks = _load_masks(dataset, val_ids)
    best: ModelParams | None = None

    for epoch in range(config.epochs):
        order = stream("finetune.shuffle", config.seed, epoch).permutation(len(ids))
        losses = []
        for b in range(0, len(ids), config.batch_size):
            chunk = [ids[int(k)] for k in order[b : b + config.batch_size]]
            ims, msks = [], []
            for item_id in chunk:
                im, mk = augment_labeled(
                    images[item_id],
                    masks[item_id],
                    config.policy,
                    derive_seed("finetune.aug", config.seed, epoch, item_id),
                )
                ims.append(im)
                msks.append(mk)
            batch = _to_batch(ims)
            targets = np.stack(msks)[:, None, :, :]
            cache: dict = {}
            try:
                probs = forward_segment(params, batch, cache)
                loss, dprobs = focal_loss(probs, targets, config.loss.alpha, config.loss.gamma)
                grads = backward_segment(params, cache, dprobs)
                adam_step(params, grads, adam, config)
            except NumericError as exc:
                raise NumericError(
                    f"finetune epoch {epoch}, batch {b // config.batch_size}: {exc}"
                ) from exc
            losses.append(loss)
        record = {"epoch": epoch, "train_loss": float(np.mean(losses)), "batches": len(losses)}
        if val_ids:
            report = _score_split(
                params, val_ids, val_images, val_masks, config.threshold, config.batch_size
            )
            record["val_iou"] = report.iou
            if history.best_val_iou is None or report.iou > history.best_val_iou:
                history.best_val_iou = report.iou
                history.best_epoch = epoch
                best = params.copy()
        history.epochs.append(record)

    history.wall_ms = (time.perf_counter() - t0) * 1000.0
    return (best if best is not None else params), history


def evaluate(
    params: ModelParams,
    dataset: DatasetManifest,
    split: str,
    threshold: float = 0.5,
    batch_size: int = 8,
) -> MetricsReport:
    """Micro-averaged IoU over a fully labeled split, in manifest order."""
    if split not in dataset.splits:
        raise ValidationError(f"evaluate: unknown split {split!r}")
    ids = list(dataset.splits[split])
    if not ids:
        raise ValidationError(f"evaluate: split {split!r} is empty")
    unlabeled = [i for i in ids if dataset.items[i].mask_path is None]
    if unlabeled:
        raise ValidationError(f"evaluate: split {split!r} has unlabeled items, e.g. {unlabeled[0]!r}")
    images = _load_images(dataset, ids)
    masks = _load_masks(dataset, ids)
    return _score_split(params, ids, images, masks, threshold, batch_size)
