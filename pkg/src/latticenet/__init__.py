"""Multistream CNN engine with lattice cross-fusion, built on plain numpy."""

__version__ = "0.1.0"

from .arch import (  # noqa: F401
    ArchSpec,
    DESK_ARCH_STRING,
    FULL_ARCH_STRING,
    Network,
    desk_spec,
    full_spec,
    load_checkpoint,
    parse_arch,
    render_arch,
    save_checkpoint,
)
from .fusion import FusionOp, fuse_backward, fuse_forward  # noqa: F401
from .training import TrainConfig, evaluate, train  # noqa: F401
