"""idveil: generative full-body and face anonymization.

Pipeline: a detector ensemble finds people and faces, a box tracker keeps
per-person latents stable over video, style-modulated inpainting generators
synthesize replacements, and a recursive stitcher composes them back in
ascending order of pixel coverage. Evaluation covers Fréchet feature
distances and re-identification retrieval; an HTTP service exposes the loop
to interactive clients.
"""

from .detection import (
    Category,
    FusedDetection,
    RawDetection,
    Source,
    StubAdapter,
    detect_all,
    fuse,
)
from .generator import (
    Generator,
    GeneratorConfig,
    body_config,
    body_dense_config,
    compose,
    face_config,
    load_checkpoint,
    save_checkpoint,
)
from .anonymizer import (
    AnonymizationPlan,
    anonymize_image,
    anonymize_traditional,
    mask_out,
    pixelate,
    plan,
)
from .evaluation import (
    FeatureStatistics,
    compute_statistics,
    evaluate_reid,
    frechet_distance,
)
from .tracking import Tracker, TrackerConfig

__version__ = "0.1.0"

__all__ = [
    "AnonymizationPlan",
    "Category",
    "FeatureStatistics",
    "FusedDetection",
    "Generator",
    "GeneratorConfig",
    "RawDetection",
    "Source",
    "StubAdapter",
    "Tracker",
    "TrackerConfig",
    "anonymize_image",
    "anonymize_traditional",
    "body_config",
    "body_dense_config",
    "compose",
    "compute_statistics",
    "detect_all",
    "evaluate_reid",
    "face_config",
    "frechet_distance",
    "fuse",
    "load_checkpoint",
    "mask_out",
    "pixelate",
    "plan",
    "save_checkpoint",
]
