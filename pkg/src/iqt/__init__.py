"""Image quality transfer for low-field MRI.

Forward model: a stochastic simulator that degrades high-field volumes
into synthetic low-field ones with randomly sampled tissue contrast.
Inverse model: an anisotropic U-Net trained on simulated patch pairs that
restores slice-direction resolution and contrast, with optional ensemble
uncertainty maps. Includes histogram normalisation, patch extraction and
blending, evaluation metrics, and a CLI (`iqt`).
"""

from .volume import (
    Geometry,
    Volume3D,
    TissueMasks,
    PhantomConfig,
    Lesion,
    read_nifti,
    write_nifti,
    generate_phantom,
    background_mask,
    foreground_mask,
)
from .simulator import (
    SNRDistribution,
    ContrastSample,
    Multipliers,
    SigmaPolicy,
    DEFAULT_DISTRIBUTIONS,
    blur_downsample_z,
    downsample_masks,
    tissue_mean,
    estimate_background_sigma,
    sample_contrast,
    compute_multipliers,
    simulate,
    load_distribution,
)
from .normalizer import (
    LandmarkTable,
    compute_landmarks,
    fit_normalizer,
    apply_normalization,
    slice_intensity_correct,
)
from .patching import (
    PatchGrid,
    PatchSet,
    extract_pairs,
    blend_clip,
    cubic_upsample_z,
    save_patchset,
    load_patchset,
)
from .autodiff import Tensor, Graph, op_apply, backward, gradient_check
from .network import (
    ModelSpec,
    MasksemblesSpec,
    ModelWeights,
    build_aniso_unet,
    run_model,
    forward,
    predict_with_uncertainty,
    enhance_volume,
    save_checkpoint,
    load_checkpoint,
)
from .training import TrainConfig, AdamState, glorot_init, adam_step, train, evaluate_mse
from .metrics import LabelVolume, psnr, ssim, rve

__version__ = "0.1.0"
