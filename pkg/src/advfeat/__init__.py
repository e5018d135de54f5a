"""Feature-space adversarial attacks on ViT backbones, with task evaluation."""

from .attack import (
    AttackConfig,
    AttackResult,
    calibrate_to_psnr,
    project_linf,
    step_update,
    taa_attack,
    tsa_classification,
    tsa_segmentation,
)
from .backbone import (
    AggregationSpec,
    BackboneHandle,
    TokenSet,
    build_reference_backbone,
    forward_features,
    input_gradient,
    list_adapters,
    register_adapter,
    resolve_model,
)
from .features import (
    CenteredFeature,
    MeanVector,
    center,
    cosine_loss,
    estimate_mean,
    load_mean,
    save_mean,
)
from .campaign import run_ablation, run_campaign
from .heads import HeadHyperparams, TaskHead, fit_head
from .image import ImageTensor, from_array, load_png, quantize, quantize_and_roundtrip, save_png
from .metrics import (
    MetricRecord,
    evaluate_classification,
    evaluate_retrieval,
    evaluate_segmentation,
    psnr,
    relative_efficiency,
)
from .manifest import RunManifest, load_manifest, parse_manifest
from .report import MatrixCell, TransferMatrix, emit_report
from .transforms import TransformSpec, apply_transform, default_transform_suite

__version__ = "0.1.0"
