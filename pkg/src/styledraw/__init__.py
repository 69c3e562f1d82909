"""Stroke-based drawing synthesis guided by a text prompt and a style image."""

from .augment import AugmentationConfig, augment_batch
from .encoders import (
    Encoders,
    EncoderUnavailableError,
    FeatureStack,
    StubFeatureExtractor,
    StubImageTextEncoder,
    load_encoders,
    stub_encoders,
)
from .io_cli import (
    Checkpoint,
    CheckpointSchemaError,
    CheckpointVersionError,
    cli_main,
    export_png,
    export_svg,
    import_svg,
    load_checkpoint,
    load_style_image,
    save_checkpoint,
)
from .objective import (
    LossReport,
    content_loss,
    cosine_distance,
    moment_matching_loss,
    palette_loss,
    relaxed_emd,
    style_loss,
    total_loss,
)
from .optimize import (
    NonFiniteError,
    RunResult,
    decoupled_baseline,
    resume,
    synthesize,
    synthesize_content_only,
)
from .raster import RasterImage, gradient_check, render
from .stroke_model import (
    Drawing,
    InvariantError,
    OptimizationConfig,
    StrokePath,
    clamp_parameters,
    random_drawing,
)

__version__ = "0.1.0"
