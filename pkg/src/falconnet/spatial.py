"""Multi-branch depthwise spatial operator (RepSO) and kernel-magnitude analysis.

The training-time operator runs several depthwise branches side by side,
each followed by its own normalization, and sums the results: N parallel
3x3 kernels plus optional 1x3, 3x1, 1x1 and identity branches. Per-branch
padding keeps every branch aligned with the 3x3 output grid, so the sum is
well defined and the whole stack can later collapse into one padded 3x3
kernel (see falconnet.fuse.merge_repso).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ops import BnParams, ConvSpec, ShapeError, Tensor, add, as_f32, batch_norm_infer, conv2d

__all__ = [
    "RepSOConfig",
    "RepSOBranch",
    "RepSOWeights",
    "repso_forward",
    "kernel_magnitude_matrix",
    "branch_kernel_shape",
    "random_repso_weights",
]

# Branch kind -> (kernel extent, padding that aligns it with the 3x3 grid).
_KERNEL_HW = {"3x3": (3, 3), "1x3": (1, 3), "3x1": (3, 1), "1x1": (1, 1)}
_BRANCH_PAD = {"3x3": (1, 1), "1x3": (0, 1), "3x1": (1, 0), "1x1": (0, 0)}


@dataclass(frozen=True)
class RepSOConfig:
    """Branch layout of the spatial operator; the default is the 7-branch form."""

    channels: int
    n_parallel_3x3: int = 3
    include_1x3: bool = True
    include_3x1: bool = True
    include_1x1: bool = True
    include_identity: bool = True

    def __post_init__(self):
        if self.channels <= 0:
            raise ShapeError(f"RepSOConfig.channels must be positive, got {self.channels}")
        if self.n_parallel_3x3 <= 0:
            raise ShapeError(f"RepSOConfig.n_parallel_3x3 must be positive, got {self.n_parallel_3x3}")

    def branch_kinds(self) -> tuple[str, ...]:
        kinds = ["3x3"] * self.n_parallel_3x3
        if self.include_1x3:
            kinds.append("1x3")
        if self.include_3x1:
            kinds.append("3x1")
        if self.include_1x1:
            kinds.append("1x1")
        if self.include_identity:
            kinds.append("identity")
        return tuple(kinds)

    @property
    def branch_count(self) -> int:
        return len(self.branch_kinds())


def branch_kernel_shape(kind: str, channels: int):
    """Depthwise kernel shape for a branch kind; identity carries no kernel."""
    if kind == "identity":
        return None
    if kind not in _KERNEL_HW:
        raise ShapeError(f"unknown branch kind '{kind}'")
    kh, kw = _KERNEL_HW[kind]
    return (channels, 1, kh, kw)


@dataclass(frozen=True)
class RepSOBranch:
    kind: str
    kernel: Tensor | None
    bn: BnParams


@dataclass(frozen=True)
class RepSOWeights:
    branches: tuple[RepSOBranch, ...]


def check_repso_weights(w: RepSOWeights, cfg: RepSOConfig) -> None:
    kinds = cfg.branch_kinds()
    got = tuple(br.kind for br in w.branches)
    if got != kinds:
        raise ShapeError(f"branch kinds {got} do not match configuration {kinds}")
    for i, br in enumerate(w.branches):
        expect = branch_kernel_shape(br.kind, cfg.channels)
        if expect is None:
            if br.kernel is not None:
                raise ShapeError(f"branch {i} (identity) must not carry a kernel")
        else:
            if br.kernel is None or tuple(br.kernel.shape) != expect:
                shape = None if br.kernel is None else tuple(br.kernel.shape)
                raise ShapeError(f"branch {i} ({br.kind}) kernel shape {shape}, expected {expect}")
        if br.bn.channels != cfg.channels:
            raise ShapeError(
                f"branch {i} normalization has {br.bn.channels} channels, expected {cfg.channels}")


def repso_forward(x: Tensor, w: RepSOWeights, cfg: RepSOConfig) -> Tensor:
    """Sum of per-branch BN(depthwise conv(x)); the identity branch adds BN(x).

    Stride is 1 and each branch is padded onto the 3x3 output grid, so the
    output shape equals the input shape.
    """
    x = as_f32(x)
    if x.ndim != 4 or x.shape[1] != cfg.channels:
        raise ShapeError(
            f"repso_forward input has {x.shape[1] if x.ndim == 4 else '?'} channels, "
            f"expected {cfg.channels}")
    check_repso_weights(w, cfg)
    c = cfg.channels
    out = None
    for br in w.branches:
        if br.kind == "identity":
            y = batch_norm_infer(x, br.bn)
        else:
            kh, kw = _KERNEL_HW[br.kind]
            ph, pw = _BRANCH_PAD[br.kind]
            spec = ConvSpec(c, c, kh, kw, 1, 1, ph, pw, groups=c)
            y = batch_norm_infer(conv2d(x, br.kernel, None, spec), br.bn)
        if out is not None and y.shape != out.shape:
            raise ShapeError(f"misaligned branch output {y.shape} vs {out.shape}")
        out = y if out is None else add(out, y)
    return out


def random_repso_weights(cfg: RepSOConfig, rng: np.random.Generator, *,
                         kernel_scale: float = 0.3,
                         gamma_range=(0.5, 1.5), beta_range=(-0.3, 0.3),
                         mean_range=(-0.3, 0.3), var_range=(0.5, 2.0),
                         eps: float = 1e-5) -> RepSOWeights:
    """Draw branch kernels and normalization statistics from a generator."""
    branches = []
    for kind in cfg.branch_kinds():
        shape = branch_kernel_shape(kind, cfg.channels)
        kernel = None
        if shape is not None:
            kernel = (rng.standard_normal(shape) * kernel_scale).astype(np.float32)
        bn = BnParams.random(cfg.channels, rng, gamma_range=gamma_range,
                             beta_range=beta_range, mean_range=mean_range,
                             var_range=var_range, eps=eps)
        branches.append(RepSOBranch(kind, kernel, bn))
    return RepSOWeights(tuple(branches))


def kernel_magnitude_matrix(kernels, kh: int, kw: int) -> np.ndarray:
    """Positionwise mean of absolute weights, normalized by the matrix maximum.

    Averages jointly across every kernel and every channel; leading axes of
    each kernel array are flattened. An all-zero input yields the all-zero
    matrix rather than dividing by zero.
    """
    kernels = list(kernels)
    if not kernels:
        raise ShapeError("kernel_magnitude_matrix requires at least one kernel")
    flats = []
    for k in kernels:
        a = as_f32(k)
        if a.ndim < 2 or a.shape[-2:] != (kh, kw):
            got = a.shape[-2:] if a.ndim >= 2 else tuple(a.shape)
            raise ShapeError(f"kernel spatial extent {got} does not match {kh}x{kw}")
        flats.append(np.abs(a).reshape(-1, kh, kw))
    mean = np.concatenate(flats, axis=0).mean(axis=0, dtype=np.float64)
    peak = float(mean.max())
    if peak == 0.0:
        return np.zeros((kh, kw), dtype=np.float32)
    return (mean / peak).astype(np.float32)
