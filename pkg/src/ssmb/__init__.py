"""Switch style modulation blocks for modality-agnostic cross-modal recognition."""
from .backbone import BackboneConfig, ModelState, build_backbone, forward_embed, replicate_channels
from .block import SSMBBlock, SSMBConfig, ssmb_forward
from .tensor import Tensor

__version__ = "0.1.0"
