"""Low-complexity overfitted neural image codec.

Each image is coded as a pyramid of integer latents plus the weights of a
tiny decoder (auto-regressive probability model, upsampler, synthesis)
fitted to that image. A feed-forward analysis transform with a shared
decoder provides the non-overfitted alternative.
"""

__version__ = "0.1.0"

from .decoder import ARCHS, DecoderParams, decode_image, get_arch, mac_per_pixel
from .encoder import PRESETS, EncoderConfig, encode_image, kappa_enc
from .metrics import bd_rate, psnr

__all__ = ["ARCHS", "DecoderParams", "decode_image", "get_arch", "mac_per_pixel", "PRESETS",
           "EncoderConfig", "encode_image", "kappa_enc", "bd_rate", "psnr", "__version__"]
