"""Model shape configuration shared by every network module."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ContractError

# (row_start, row_stop, col_start, col_stop) slice bounds on a 7x7 map
DEFAULT_SLICES = ((0, 3, 2, 5), (2, 5, 0, 3), (2, 5, 2, 5), (2, 5, 4, 7), (4, 7, 2, 5))
EXPERT_NAMES = ("global", "intermediate", "slice1", "slice2", "slice3", "slice4", "slice5")


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    channels: int = 32
    inter_channels: int = 32
    word_dim: int = 300
    conv_width: int = 3
    rank: int = 4
    slices: tuple = DEFAULT_SLICES
    share_diff_fc: bool = True

    def __post_init__(self):
        if self.conv_width % 2 != 1:
            raise ContractError("conv1d width must be odd")
        if min(self.dim, self.channels, self.inter_channels, self.word_dim, self.rank) < 1:
            raise ContractError("all model widths must be positive")

    @property
    def n_experts(self) -> int:
        return 2 + len(self.slices)
