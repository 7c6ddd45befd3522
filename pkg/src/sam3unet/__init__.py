"""SAM3-UNet: adapter fine-tuning of a frozen ViT with a lightweight U-Net decoder."""

from sam3unet.config import RunConfig, load_run_config
from sam3unet.decoder import DecoderOutput, LightweightBlock, LightweightDecoder
from sam3unet.encoder import LARGE_ENCODER, TOY_ENCODER, AdaptedEncoder, EncoderConfig, build_encoder
from sam3unet.losses import LossConfig, structure_loss, total_loss
from sam3unet.metrics import MetricsConfig, MetricsReport, evaluate_folder
from sam3unet.model import SAM3UNet, build_model, parameter_census
from sam3unet.pyramid import FeaturePyramid, PyramidNeck

__all__ = [
    "LARGE_ENCODER",
    "TOY_ENCODER",
    "AdaptedEncoder",
    "DecoderOutput",
    "EncoderConfig",
    "FeaturePyramid",
    "LightweightBlock",
    "LightweightDecoder",
    "LossConfig",
    "MetricsConfig",
    "MetricsReport",
    "PyramidNeck",
    "RunConfig",
    "SAM3UNet",
    "build_encoder",
    "build_model",
    "evaluate_folder",
    "load_run_config",
    "parameter_census",
    "structure_loss",
    "total_loss",
]
