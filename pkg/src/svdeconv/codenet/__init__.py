"""Coordinate-conditioned network: encoding, gated blocks, the two-stage model and its loss."""
from .encoding import PEConfig, positional_encoding, raw_encoding
from .layers import (
    CoDeBlock,
    GatedConv,
    MaskMLP,
    Module,
    code_block,
    coordgate_conv,
    eval_mask,
    simple_gate,
)
from .loss import composite_loss, stage_loss
from .nets import (
    NUM_VIEWS,
    CoDeNet,
    DemixNet,
    MaskSource,
    ModelConfig,
    ReconNet,
    UNet,
    ViewAttention,
    demix_forward,
    recon_forward,
)
