"""Experiment harness: dataset materialization, protocol grids, reports, overlays.

Three protocols are supported, all built from the same cell primitive
(optionally-pretrained fine-tune, then test-split evaluation):

- ``subset_sweep``: init x label-fraction grid on one domain.
- ``cross_domain``: pretrain on domain X, fine-tune/evaluate on domain Y,
  over the full 2x2 matrix.
- ``corruption_ablation``: fine-tune on corrupted labels, score against
  clean test truth.

Pretraining is cached per (domain, config) in memory and on disk, and
replicate seeds vary only the fine-tune stage, so a 2x2 cross-domain
matrix costs exactly two pretrain runs regardless of replicates.  Cells
are deterministic, so caching never changes a row.
"""

import csv
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import SolarSegError, ValidationError
from .imagery import (
    CorruptionSpec,
    DatasetManifest,
    SceneSpec,
    check_image,
    check_mask,
    corrupt_mask,
    generate_scene,
    load_dataset,
    save_image,
    save_mask,
    subset,
)
from .losses import LossConfig
from .augment import AugmentPolicy
from .metrics import confusion_counts
from .model import ArchConfig, ModelParams, load_checkpoint, save_checkpoint
from .rng import derive_seed
from .train import RunHistory, TrainConfig, evaluate, finetune, pretrain

INIT_SCRATCH = "scratch"
INIT_SSL = "ssl_pretrained"

#: overlay tint colors (unit RGB); tinted pixels are 0.45 base + 0.55 tint
OVERLAY_COLORS = {"tp": (0.0, 1.0, 0.0), "fp": (1.0, 0.0, 0.0), "fn": (0.0, 0.0, 1.0)}
_OVERLAY_BASE_WEIGHT = 0.45

CSV_HEADER = "init,pretrain_domain,finetune_domain,fraction,corruption,seed,test_iou,max_val_iou"


@dataclass(frozen=True)
class DomainSpec:
    """One synthetic domain: a scene recipe plus split sizes."""

    name: str
    scene: SceneSpec = SceneSpec()
    n_train: int = 300
    n_val: int = 50
    n_test: int = 100

    def validate(self) -> "DomainSpec":
        if not self.name or any(ch in self.name for ch in "/\\ ,"):
            raise ValidationError(f"domain name: {self.name!r} must be non-empty, no separators")
        self.scene.validate()
        for fname in ("n_train", "n_val", "n_test"):
            if getattr(self, fname) < 1:
                raise ValidationError(f"{fname}: must be >= 1, got {getattr(self, fname)}")
        return self


def corruption_tag(c: CorruptionSpec | None) -> str:
    """Stable short label used in report rows and dataset directory names."""
    if c is None:
        return "none"
    parts = []
    if c.drop_rate > 0:
        parts.append(f"drop{c.drop_rate:g}")
    if c.erode_px > 0:
        parts.append(f"erode{c.erode_px:g}")
    return "+".join(parts) if parts else "none"


def materialize_dataset(
    domain: DomainSpec,
    out_dir: Path | str,
    seed: int,
    corruption: CorruptionSpec | None = None,
) -> DatasetManifest:
    """Render a domain to disk and return its validated manifest.

    Layout: ``images/<id>.png``, ``masks/<id>.png``, ``manifest.json``;
    with corruption active also ``masks_clean/<id>.png`` holding the
    uncorrupted truth.  Corruption degrades train and val labels (the
    labels a practitioner would actually have); test masks stay clean so
    evaluation measures against truth.
    """
    domain.validate()
    if corruption is not None:
        corruption.validate()
        if corruption.drop_rate == 0.0 and corruption.erode_px == 0:
            corruption = None
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(exist_ok=True)
    if corruption is not None:
        (out_dir / "masks_clean").mkdir(exist_ok=True)

    splits: dict[str, list[str]] = {}
    counts = {"train": domain.n_train, "val": domain.n_val, "test": domain.n_test}
    for split, n in counts.items():
        ids = []
        for i in range(n):
            item_id = f"{split}_{i:04d}"
            image, mask = generate_scene(
                domain.scene, derive_seed("data", domain.name, seed, split, i)
            )
            save_image(image, out_dir / "images" / f"{item_id}.png")
            label = mask
            if corruption is not None and split in ("train", "val"):
                label = corrupt_mask(
                    mask, corruption, derive_seed("data.corrupt", domain.name, seed, split, i)
                )
            save_mask(label, out_dir / "masks" / f"{item_id}.png")
            if corruption is not None:
                save_mask(mask, out_dir / "masks_clean" / f"{item_id}.png")
            ids.append(item_id)
        splits[split] = ids

    manifest = {"name": domain.name, "tile_size": domain.scene.tile_size, "splits": splits}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return load_dataset(out_dir)


KIND_SUBSET = "subset_sweep"
KIND_CROSS = "cross_domain"
KIND_CORRUPTION = "corruption_ablation"
_KINDS = (KIND_SUBSET, KIND_CROSS, KIND_CORRUPTION)


@dataclass(frozen=True)
class ExperimentSpec:
    """Full description of one protocol run.

    ``train.seed`` seeds pretraining and is fixed across cells;
    replicate k fine-tunes with seed k (k = 1..replicates), which also
    picks the label subset.  ``train.epochs`` is ignored in favor of the
    explicit per-stage epoch counts.
    """

    kind: str
    domains: tuple[DomainSpec, ...]
    fractions: tuple[float, ...] = (0.6, 0.7, 0.8, 1.0)
    inits: tuple[str, ...] = (INIT_SCRATCH, INIT_SSL)
    corruption: tuple[CorruptionSpec, ...] = ()
    replicates: int = 5
    data_seed: int = 0
    pretrain_epochs: int = 30
    finetune_epochs: int = 50
    arch: ArchConfig = ArchConfig()
    train: TrainConfig = TrainConfig()
    name: str = "experiment"

    def validate(self) -> "ExperimentSpec":
        if self.kind not in _KINDS:
            raise ValidationError(f"kind: {self.kind!r} not one of {_KINDS}")
        want = 2 if self.kind == KIND_CROSS else 1
        if len(self.domains) != want:
            raise ValidationError(
                f"domains: kind {self.kind} needs exactly {want}, got {len(self.domains)}"
            )
        for d in self.domains:
            d.validate()
        names = [d.name for d in self.domains]
        if len(set(names)) != len(names):
            raise ValidationError(f"domains: names must be distinct, got {names}")
        if not self.fractions:
            raise ValidationError("fractions: must be non-empty")
        for f in self.fractions:
            if not 0.0 < f <= 1.0:
                raise ValidationError(f"fractions: {f} outside (0, 1]")
        if not self.inits:
            raise ValidationError("inits: must be non-empty")
        for i in self.inits:
            if i not in (INIT_SCRATCH, INIT_SSL):
                raise ValidationError(f"inits: {i!r} not one of ({INIT_SCRATCH}, {INIT_SSL})")
        if self.kind == KIND_CORRUPTION and not self.corruption:
            raise ValidationError("corruption: grid required for corruption_ablation")
        for c in self.corruption:
            c.validate()
        if self.replicates < 1:
            raise ValidationError(f"replicates: must be >= 1, got {self.replicates}")
        if self.pretrain_epochs < 1 or self.finetune_epochs < 1:
            raise ValidationError("pretrain_epochs and finetune_epochs must be >= 1")
        self.arch.validate()
        self.train.validate()
        return self

    @property
    def seeds(self) -> list[int]:
        return list(range(1, self.replicates + 1))


def _construct(label: str, cls, doc: dict, **extra):
    if not isinstance(doc, dict):
        raise ValidationError(f"{label}: expected a JSON object, got {type(doc).__name__}")
    try:
        return cls(**doc, **extra)
    except TypeError as exc:
        raise ValidationError(f"{label}: {exc}") from exc


def _tupled(doc: dict, *keys: str) -> dict:
    out = dict(doc)
    for k in keys:
        if k in out and isinstance(out[k], list):
            out[k] = tuple(out[k])
    return out


def train_config_from_doc(doc: dict) -> TrainConfig:
    """Build a TrainConfig from the ``train``/``loss``/``policy`` sections."""
    loss = _construct("loss", LossConfig, doc.get("loss", {})).validate()
    policy = _construct("policy", AugmentPolicy, doc.get("policy", {})).validate()
    return _construct(
        "train", TrainConfig, doc.get("train", {}), loss=loss, policy=policy
    ).validate()


def domain_from_doc(doc: dict) -> DomainSpec:
    if not isinstance(doc, dict) or "name" not in doc:
        raise ValidationError("domain: expected an object with a 'name' key")
    doc = dict(doc)
    head = {k: doc.pop(k) for k in ("name", "n_train", "n_val", "n_test") if k in doc}
    scene = _construct("scene", SceneSpec, _tupled(doc, "panel_rows", "panel_cols", "panel_fill"))
    return DomainSpec(scene=scene, **head).validate()


def experiment_from_config(doc: dict) -> ExperimentSpec:
    """Parse the single-document config: arch/train/loss/policy/experiment."""
    if not isinstance(doc, dict) or "experiment" not in doc:
        raise ValidationError("config: missing 'experiment' section")
    exp = dict(doc["experiment"])
    if "kind" not in exp:
        raise ValidationError("experiment: missing 'kind'")
    arch = _construct("arch", ArchConfig, doc.get("arch", {})).validate()
    train = train_config_from_doc(doc)
    domains = tuple(domain_from_doc(d) for d in exp.pop("domains", []))
    corruption = tuple(
        _construct("corruption", CorruptionSpec, c).validate() for c in exp.pop("corruption", [])
    )
    if "fractions" not in exp and exp["kind"] == KIND_CORRUPTION:
        exp["fractions"] = [1.0]
    exp = _tupled(exp, "fractions", "inits")
    spec = _construct(
        "experiment", ExperimentSpec, exp, domains=domains, corruption=corruption,
        arch=arch, train=train,
    )
    return spec.validate()


@dataclass(frozen=True)
class Row:
    """One (cell, seed) result."""

    init: str
    pretrain_domain: str
    finetune_domain: str
    fraction: float
    corruption: str
    seed: int
    test_iou: float
    max_val_iou: float

    @property
    def cell(self) -> tuple:
        return (self.init, self.pretrain_domain, self.finetune_domain, self.fraction, self.corruption)

    def sort_key(self) -> tuple:
        return (*self.cell, self.seed)


@dataclass
class TableReport:
    """Rows plus per-cell aggregates; rows stay sorted by cell then seed."""

    rows: list[Row] = field(default_factory=list)

    def sorted_rows(self) -> list[Row]:
        return sorted(self.rows, key=Row.sort_key)

    def aggregates(self) -> list[dict]:
        cells: dict[tuple, list[Row]] = {}
        for r in self.sorted_rows():
            cells.setdefault(r.cell, []).append(r)
        out = []
        for cell, rows in cells.items():
            test = np.array([r.test_iou for r in rows], dtype=np.float64)
            val = np.array([r.max_val_iou for r in rows], dtype=np.float64)
            for stat, fn in (("mean", np.mean), ("min", np.min), ("max", np.max)):
                out.append(
                    {
                        "init": cell[0],
                        "pretrain_domain": cell[1],
                        "finetune_domain": cell[2],
                        "fraction": cell[3],
                        "corruption": cell[4],
                        "stat": stat,
                        "test_iou": float(fn(test)),
                        "max_val_iou": float(fn(val)),
                    }
                )
        return out

    def cell_mean(self, **match) -> float:
        """Mean test_iou over rows matching the given Row fields."""
        vals = [
            r.test_iou
            for r in self.rows
            if all(getattr(r, k) == v for k, v in match.items())
        ]
        if not vals:
            raise ValidationError(f"no rows match {match}")
        return float(np.mean(vals))


def emit_report(report: TableReport, path_csv: Path | str, path_json: Path | str) -> None:
    """Write the CSV (6-decimal floats, aggregate block) and full-precision JSON."""
    rows = report.sorted_rows()
    aggs = report.aggregates()
    with open(path_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER.split(","))
        for r in rows:
            writer.writerow(
                [
                    r.init,
                    r.pretrain_domain,
                    r.finetune_domain,
                    f"{r.fraction:.6f}",
                    r.corruption,
                    r.seed,
                    f"{r.test_iou:.6f}",
                    f"{r.max_val_iou:.6f}",
                ]
            )
        for a in aggs:
            writer.writerow(
                [
                    a["init"],
                    a["pretrain_domain"],
                    a["finetune_domain"],
                    f"{a['fraction']:.6f}",
                    a["corruption"],
                    a["stat"],
                    f"{a['test_iou']:.6f}",
                    f"{a['max_val_iou']:.6f}",
                ]
            )
    doc = {"rows": [asdict(r) for r in rows], "aggregates": aggs}
    Path(path_json).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_report_json(path: Path | str) -> TableReport:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return TableReport(rows=[Row(**r) for r in doc["rows"]])


class ExperimentRunner:
    """Executes one ExperimentSpec under an output directory.

    Datasets and pretrained checkpoints are materialized under
    ``out_dir`` and reused on re-runs; ``pretrain_runs`` counts actual
    pretraining executions (cache hits do not count).
    """

    def __init__(self, spec: ExperimentSpec, out_dir: Path | str, jobs: int = 1):
        self.spec = spec.validate()
        self.out_dir = Path(out_dir)
        self.jobs = max(1, int(jobs))
        self.pretrain_runs = 0
        self._datasets: dict[str, DatasetManifest] = {}
        self._pretrained: dict[str, ModelParams] = {}
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / "pretrain").mkdir(exist_ok=True)
        (self.out_dir / "runs").mkdir(exist_ok=True)

    # -- materialization ----------------------------------------------------

    def dataset(self, domain: DomainSpec, corruption: CorruptionSpec | None = None) -> DatasetManifest:
        tag = corruption_tag(corruption)
        key = domain.name if tag == "none" else f"{domain.name}+{tag}"
        if key not in self._datasets:
            root = self.out_dir / "data" / key
            if (root / "manifest.json").is_file():
                self._datasets[key] = load_dataset(root)
            else:
                self._datasets[key] = materialize_dataset(
                    domain, root, self.spec.data_seed, None if tag == "none" else corruption
                )
        return self._datasets[key]

    def _pretrain_key(self, domain: DomainSpec) -> str:
        s = self.spec
        relevant = {
            "domain": domain.name,
            "data_seed": s.data_seed,
            "scene": asdict(domain.scene),
            "n_train": domain.n_train,
            "arch": asdict(s.arch),
            "train": asdict(s.train),
            "epochs": s.pretrain_epochs,
        }
        digest = hashlib.sha256(json.dumps(relevant, sort_keys=True).encode()).hexdigest()[:12]
        return f"{domain.name}-{digest}"

    def pretrained(self, domain: DomainSpec) -> ModelParams:
        """Pretrained weights for a domain; one actual run per (domain, config)."""
        key = self._pretrain_key(domain)
        if key in self._pretrained:
            return self._pretrained[key]
        ckpt = self.out_dir / "pretrain" / f"{key}.ckpt"
        if ckpt.is_file():
            params, _ = load_checkpoint(ckpt)
        else:
            dataset = self.dataset(domain)
            config = replace(self.spec.train, epochs=self.spec.pretrain_epochs)
            params, history = pretrain(dataset, self.spec.arch, config)
            self.pretrain_runs += 1
            save_checkpoint(params, self.spec.arch, ckpt)
            _write_history(history, self.out_dir / "pretrain" / f"{key}.history.jsonl")
        self._pretrained[key] = params
        return params

    # -- cells --------------------------------------------------------------

    def run_cell(
        self,
        init: str,
        pretrain_domain: DomainSpec | None,
        finetune_domain: DomainSpec,
        fraction: float,
        corruption: CorruptionSpec | None,
        seed: int,
    ) -> Row:
        """Fine-tune one configuration and evaluate on the clean test split."""
        tag = corruption_tag(corruption)
        try:
            base = self.dataset(finetune_domain, corruption)
            sub = subset(base, fraction, seed)
            init_params = self.pretrained(pretrain_domain) if init == INIT_SSL else None
            config = replace(self.spec.train, epochs=self.spec.finetune_epochs, seed=seed)
            best, history = finetune(sub, self.spec.arch, config, init=init_params)
            if history.best_val_iou is None:
                raise ValidationError("cell produced no validation score (empty val split?)")
            report = evaluate(
                best, base, "test", self.spec.train.threshold, self.spec.train.batch_size
            )
        except SolarSegError as exc:
            cell = (init, pretrain_domain.name if pretrain_domain else "none",
                    finetune_domain.name, fraction, tag, seed)
            raise type(exc)(f"cell {cell}: {exc}") from exc
        row = Row(
            init=init,
            pretrain_domain=pretrain_domain.name if init == INIT_SSL else "none",
            finetune_domain=finetune_domain.name,
            fraction=fraction,
            corruption=tag,
            seed=seed,
            test_iou=report.iou,
            max_val_iou=history.best_val_iou,
        )
        stem = "-".join(
            str(p) for p in (row.init, row.pretrain_domain, row.finetune_domain,
                             f"f{fraction:g}", tag, f"s{seed}")
        )
        _write_history(history, self.out_dir / "runs" / f"{stem}.history.jsonl")
        return row

    def _run_cells(self, cells: list[tuple]) -> TableReport:
        # prime shared state sequentially so worker threads only read it
        for cell in cells:
            if cell[0] == INIT_SSL:
                self.pretrained(cell[1])
            self.dataset(cell[2], cell[4])
        if self.jobs == 1:
            rows = [self.run_cell(*c) for c in cells]
        else:
            with ThreadPoolExecutor(max_workers=self.jobs) as pool:
                rows = list(pool.map(lambda c: self.run_cell(*c), cells))
        return TableReport(rows=sorted(rows, key=Row.sort_key))

    def run_subset_sweep(self) -> TableReport:
        s = self.spec
        domain = s.domains[0]
        cells = [
            (init, domain if init == INIT_SSL else None, domain, fraction, None, seed)
            for init in s.inits
            for fraction in s.fractions
            for seed in s.seeds
        ]
        return self._run_cells(cells)

    def run_cross_domain(self) -> TableReport:
        s = self.spec
        cells = [
            (INIT_SSL, pre, ft, 1.0, None, seed)
            for pre in s.domains
            for ft in s.domains
            for seed in s.seeds
        ]
        return self._run_cells(cells)

    def run_corruption_ablation(self) -> TableReport:
        s = self.spec
        domain = s.domains[0]
        cells = [
            (init, domain if init == INIT_SSL else None, domain, fraction, corr, seed)
            for corr in s.corruption
            for init in s.inits
            for fraction in s.fractions
            for seed in s.seeds
        ]
        return self._run_cells(cells)

    def run(self) -> TableReport:
        report = {
            KIND_SUBSET: self.run_subset_sweep,
            KIND_CROSS: self.run_cross_domain,
            KIND_CORRUPTION: self.run_corruption_ablation,
        }[self.spec.kind]()
        emit_report(
            report,
            self.out_dir / f"{self.spec.name}.csv",
            self.out_dir / f"{self.spec.name}.json",
        )
        return report


def _write_history(history: RunHistory, path: Path) -> None:
    lines = [json.dumps(e) for e in history.epochs]
    summary = {
        "kind": history.kind,
        "best_val_iou": history.best_val_iou,
        "best_epoch": history.best_epoch,
        "wall_ms": history.wall_ms,
    }
    lines.append(json.dumps(summary))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def export_overlay(
    image: np.ndarray, pred: np.ndarray, truth: np.ndarray, path: Path | str
) -> dict[str, int]:
    """Write a diagnostic PNG and return the tint tallies.

    Agreement (tp) tints green, prediction-only (fp) red, truth-only
    (fn) blue; tinted pixels are 0.45 image + 0.55 tint, so the tint
    channel always dominates and untinted pixels pass through
    unchanged.
    """
    image = check_image(image)
    pred = check_mask(pred, image, name="pred")
    truth = check_mask(truth, image, name="truth")
    p = pred.astype(bool)
    t = truth.astype(bool)
    regions = {"tp": p & t, "fp": p & ~t, "fn": ~p & t}
    out = image.astype(np.float64).copy()
    for kind, region in regions.items():
        tint = np.asarray(OVERLAY_COLORS[kind], dtype=np.float64)
        out[region] = _OVERLAY_BASE_WEIGHT * out[region] + (1.0 - _OVERLAY_BASE_WEIGHT) * tint
    save_image(out, path)
    counts = confusion_counts(pred, truth)
    return {"tp": counts.tp, "fp": counts.fp, "fn": counts.fn}
