"""Self-supervised solar-panel segmentation at desk scale.

Contrastive pretraining (paired-view NT-Xent) followed by focal-loss
fine-tuning of a small encoder-decoder network, entirely in numpy, with
an experiment harness for label-subset, cross-domain, and
label-corruption protocols on synthetic aerial tiles.
"""

from .augment import AugmentPolicy, ViewPair, augment_labeled, color_jitter, flip_h, flip_v, hsv_shift, make_view_pair
from .errors import (
    BadMagicError,
    CheckpointError,
    DatasetLayoutError,
    DimensionMismatchError,
    NonBinaryMaskError,
    NumericError,
    ShapeMismatchError,
    SolarSegError,
    TruncatedPayloadError,
    UnreadableImageError,
    ValidationError,
)
from .harness import (
    CSV_HEADER,
    DomainSpec,
    ExperimentRunner,
    ExperimentSpec,
    OVERLAY_COLORS,
    Row,
    TableReport,
    corruption_tag,
    emit_report,
    experiment_from_config,
    export_overlay,
    load_report_json,
    materialize_dataset,
    train_config_from_doc,
)
from .imagery import (
    CorruptionSpec,
    DatasetManifest,
    ManifestItem,
    SceneSpec,
    corrupt_mask,
    generate_scene,
    load_dataset,
    load_image,
    load_mask,
    save_image,
    save_mask,
    scene_layout,
    subset,
    tile_image,
)
from .losses import LossConfig, cosine_sim, focal_loss, ntxent_loss
from .metrics import ConfusionCounts, MetricsReport, binarize, confusion_counts, iou
from .model import (
    ArchConfig,
    ModelParams,
    backward_embed,
    backward_segment,
    forward_embed,
    forward_segment,
    init_params,
    load_checkpoint,
    param_shapes,
    save_checkpoint,
)
from .rng import derive_seed, stream
from .train import (
    AdamState,
    RunHistory,
    TrainConfig,
    adam_step,
    evaluate,
    finetune,
    init_adam,
    pretrain,
    transfer_params,
)

__version__ = "0.1.0"
