"""Universal adversarial patches that make object detections vanish.

The package bundles a small differentiable detector trained on synthetic
shape scenes, placement strategies for universal patch training, optional
expectation-over-transformations augmentation, and an attack-success-rate
metric baselined against a plain white patch.
"""

from .attack import (
    AdamState,
    AttackConfig,
    InitMethod,
    Patch,
    TrainingLog,
    batch_objectness_loss,
    init_patch,
    load_patch,
    objectness_loss,
    patch_to_png,
    pgd_step,
    save_patch,
    train_patch,
)
from .boxes import box_iou, cxcywh_to_corners, corners_to_cxcywh, nms, pairwise_iou
from .detector import (
    DetectionSet,
    DetectorConfig,
    DifferentiableDetector,
    FinalDetection,
    LayerSpec,
    RawDetections,
    TinyDetector,
    count_objects,
    count_objects_batch,
    load_detector,
    postprocess,
    save_detector,
)
from .detector_training import DetectorTrainConfig, train_toy_detector, validate_detector
from .errors import (
    ConfigError,
    DatasetError,
    DivergenceError,
    EvaluationError,
    PlacementError,
    VanishPatchError,
)
from .evaluation import (
    ASRReport,
    EvalPolicy,
    VarianceStats,
    evaluate_asr,
    per_image_term,
    seed_variance,
)
from .placement import (
    MidpointHeatmap,
    Placement,
    PlacementStrategy,
    WindowSchedule,
    apply_patch,
    center_placement,
    coverage,
    sample_placement,
    window_extent,
)
from .scenes import (
    CLASS_NAMES,
    SceneDataset,
    SceneSpec,
    generate_scene,
    load_dataset,
    make_dataset,
    split_dataset,
    write_dataset,
)
from .transforms import EoTConfig, EoTParams, apply_eot, sample_eot

__version__ = "0.1.0"
