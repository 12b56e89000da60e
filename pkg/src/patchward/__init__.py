"""patchward: adversarial patch defense via diffusion-based localization
and mask-conditioned inpainting, with a trainable desk-scale toy backend."""

from .core import (
    BoundsError,
    DataError,
    DefenseConfig,
    DivergenceError,
    LayerError,
    NoiseSchedule,
    NumericalError,
    ParamError,
    PatchwardError,
    RangeError,
    RngStream,
    ShapeError,
    config_hash,
    load_image_png,
    make_schedule,
    ratio_to_step,
    save_image_png,
    validate_image,
)
from .diffusion import (
    Conditioning,
    DenoiserModel,
    diffpure_baseline,
    forward_noise,
    inpaint,
    predict_x0_one_step,
)
from .localization import aap_difference, binarize, estimate_soft_mask
from .mask_refine import dilate, gaussian_smooth, refine, remove_small_components
from .restoration import restore, zero_fill
from .prompt_tuning import (
    FewShotSet,
    PromptEmbedding,
    Shot,
    TuningHandles,
    binarize_ste,
    init_prompt,
    loss_ce,
    loss_l1,
    loss_perceptual,
    loss_total,
    tune_prompts,
)
from .attacks import PatchSpec, apply_patch, bpda_adaptive_attack, patch_attack
from .classifier import ClassifierModel, train_toy_classifier
from .toy_model import ToyDenoiser, train_toy_denoiser
from .pipeline import DefensePipeline, IdentityDefense
from .data import make_toy_dataset
from .evaluation import (
    EvalRecord,
    ResultTable,
    emit_outputs,
    evaluate,
    run_ablation,
    select_eval_subset,
    sweep_tstar,
)

__version__ = "0.1.0"
