"""FaceSnap: identity-preserving portrait generation at desk scale."""

__version__ = "0.1.0"

from .diffusion import (
    DenoisingUNet,
    LossBreakdown,
    NoiseSchedule,
    add_noise,
    cfg_dropout,
    guided_sample,
    id_loss,
    lightning_generate,
    masked_diffusion_loss,
    total_loss,
)
from .encoders import EncoderSpec, FaceCrop, clip_grid, detect_and_crop, face_embed, face_sim
from .ffrnet import FFRNet
from .landmarks import (
    FaceParams,
    LandmarkSet72,
    MorphableBasis,
    Pose,
    default_basis,
    mix_params,
    predict_landmarks,
    project_landmarks,
    rasterize_control,
    synthesize_mesh,
)
from .mixer import AttributeMixer

__all__ = [
    "AttributeMixer",
    "DenoisingUNet",
    "EncoderSpec",
    "FaceCrop",
    "FaceParams",
    "FFRNet",
    "LandmarkSet72",
    "LossBreakdown",
    "MorphableBasis",
    "NoiseSchedule",
    "Pose",
    "add_noise",
    "cfg_dropout",
    "clip_grid",
    "default_basis",
    "detect_and_crop",
    "face_embed",
    "face_sim",
    "guided_sample",
    "id_loss",
    "lightning_generate",
    "masked_diffusion_loss",
    "mix_params",
    "predict_landmarks",
    "project_landmarks",
    "rasterize_control",
    "synthesize_mesh",
    "total_loss",
]
