"""Adaptive spatial pyramid pooling and the global max-pool branch."""
from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .errors import ResolutionError


@dataclass(frozen=True)
class SPPConfig:
    n: int = 3
    channels: int = 64

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"grid side must be >= 1, got {self.n}")

    @property
    def output_length(self) -> int:
        return self.channels * self.n * self.n


def cell_bounds(size: int, n: int) -> list[tuple[int, int]]:
    """Floor partition of ``range(size)`` into ``n`` contiguous cells."""
    return [(i * size // n, (i + 1) * size // n) for i in range(n)]


def adaptive_spp(fmap, cfg: SPPConfig, eps: float = 1e-12):
    """Max-pool an n x n grid scaled to the map, stack, and l2-normalize.

    ``fmap`` is [C,H,W] or [N,C,H,W]; the result is [C*n*n] or [N, C*n*n],
    cell-major (row-major over cells) with channels contiguous inside each
    cell.
    """
    C, H, W = fmap.shape[-3:]
    n = cfg.n
    if H < n or W < n:
        raise ResolutionError(f"feature map {H}x{W} is smaller than the {n}x{n} pooling grid")
    cells = [
        ad.max_pool_region(fmap, r0, r1, c0, c1)
        for r0, r1 in cell_bounds(H, n)
        for c0, c1 in cell_bounds(W, n)
    ]
    axis = fmap.ndim - 3  # stack cells before the channel axis
    pooled = ad.stack(cells, axis=axis)
    flat = ad.reshape(pooled, fmap.shape[:-3] + (n * n * C,))
    return ad.l2_normalize(flat, eps)


def global_max_branch(fmap, eps: float = 1e-12):
    """Per-channel global max followed by l2 normalization."""
    H, W = fmap.shape[-2:]
    return ad.l2_normalize(ad.max_pool_region(fmap, 0, H, 0, W), eps)
