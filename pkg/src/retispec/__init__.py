"""Physics-guided face illumination decomposition and forgery analysis.

The pipeline separates a face image into Retinex texture, order-2
spherical-harmonic shading (ambient + directional), and a residual specular
layer, flattens everything into UV space over rasterized geometry, and feeds
the maps to either a physics-residual anomaly scorer or a small two-stage
cross-attention detector.  A synthetic benchmark generates matched real/fake
corpora for ROC evaluation.
"""

__version__ = "0.1.0"

from .raster import (
    GaussianSpec,
    Raster,
    RasterIOError,
    gaussian_blur,
    load_raster,
    save_raster,
)
from .retinex import (
    DEFAULT_SIGMAS,
    RetinexConfig,
    TextureMap,
    multi_scale_retinex,
    normalize_texture,
    single_scale_retinex,
)
from .geometry import (
    Camera,
    GeometryBuffers,
    GeometryError,
    Mesh,
    load_obj,
    make_ellipsoid,
    make_icosphere,
    make_sphere,
    make_synthetic_face,
    rasterize,
    save_obj,
    uv_flatten,
)
from .shading import (
    PhongParams,
    reflect,
    render_buffers,
    render_scene,
    sample_uv_texture,
    shade,
    shade_pixel,
)
from .illumination import (
    FitError,
    SHCoefficients,
    fit_pca_texture_baseline,
    fit_sh_coefficients,
    make_pca_texture_basis,
    sh_basis,
    split_ambient_direct,
)
from .pipeline import (
    Decomposition,
    DecompositionError,
    decompose,
    export_decomposition,
    extract_specular,
    load_exported_maps,
    reconstruction_error,
)
from .nn import (
    ModelConfig,
    Tensor,
    TrainConfig,
    TrainingError,
    check_model_gradients,
    cross_attention,
    gradient_check,
    init_model_params,
    load_checkpoint,
    model_forward,
    save_checkpoint,
    train,
)
from .bench import (
    EvalReport,
    GenerationSettings,
    apply_perturbation,
    compute_auc,
    evaluate,
    generate_dataset,
    jpeg_like,
    physics_residual_score,
    roc_points,
    run_speed_benchmark,
)
from .config import ConfigError, PipelineConfig
from .estimators import (
    IlluminationDecomposer,
    PhysicsResidualScorer,
    RetinexTextureExtractor,
    SpecularInconsistencyClassifier,
)

__all__ = [
    "__version__",
    # raster
    "GaussianSpec", "Raster", "RasterIOError", "gaussian_blur",
    "load_raster", "save_raster",
    # retinex
    "DEFAULT_SIGMAS", "RetinexConfig", "TextureMap", "multi_scale_retinex",
    "normalize_texture", "single_scale_retinex",
    # geometry
    "Camera", "GeometryBuffers", "GeometryError", "Mesh", "load_obj",
    "make_ellipsoid", "make_icosphere", "make_sphere",
    "make_synthetic_face", "rasterize", "save_obj", "uv_flatten",
    # shading
    "PhongParams", "reflect", "render_buffers", "render_scene",
    "sample_uv_texture", "shade", "shade_pixel",
    # illumination
    "FitError", "SHCoefficients", "fit_pca_texture_baseline",
    "fit_sh_coefficients", "make_pca_texture_basis", "sh_basis",
    "split_ambient_direct",
    # pipeline
    "Decomposition", "DecompositionError", "decompose",
    "export_decomposition", "extract_specular", "load_exported_maps",
    "reconstruction_error",
    # nn
    "ModelConfig", "Tensor", "TrainConfig", "TrainingError",
    "check_model_gradients", "cross_attention", "gradient_check",
    "init_model_params", "load_checkpoint", "model_forward",
    "save_checkpoint", "train",
    # bench
    "EvalReport", "GenerationSettings", "apply_perturbation", "compute_auc",
    "evaluate", "generate_dataset", "jpeg_like", "physics_residual_score",
    "roc_points", "run_speed_benchmark",
    # config
    "ConfigError", "PipelineConfig",
    # estimators
    "IlluminationDecomposer", "PhysicsResidualScorer",
    "RetinexTextureExtractor", "SpecularInconsistencyClassifier",
]
