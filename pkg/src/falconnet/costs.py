"""Parameter and Flops accounting.

Flops follow the convention Flops = output_H * output_W * layer weight
count, with a multiply-add counted as one. Elementwise layers, pooling and
standalone normalizations therefore cost zero. Parameters are integer
exact; normalization layers contribute their scale and shift only (running
statistics are buffers, not parameters).

Counting in "inference" mode prices the fused forms: the multi-branch
spatial operator as one biased 3x3 depthwise kernel, the multi-branch
channel operator as one biased SF-Conv, and every foldable normalization
absorbed into its convolution. Categories follow the channel/spatial
split: 1x1 channel-mixing layers are "channel", convolutions with a
spatial extent are "spatial", normalizations are "other", and the final
classifier is reported separately and excluded from category totals.
"""

from __future__ import annotations

from dataclasses import dataclass

from .channel import sfconv_param_count
from .model import (BlockNode, BnNode, ConvNode, LayerGraph, LinearNode, Node,
                    PoolNode, RefCONode, RepSONode, SFConvNode, fused_structure)
from .ops import ShapeError
from .spatial import branch_kernel_shape

__all__ = ["LayerCost", "CostReport", "count_params", "count_flops", "cost_report"]

CATEGORIES = ("spatial", "channel", "other", "head")


@dataclass(frozen=True)
class LayerCost:
    name: str
    kind: str
    category: str
    params: int
    flops: int
    out_h: int
    out_w: int


@dataclass(frozen=True)
class CostReport:
    """Per-layer rows plus category totals.

    ``backbone_params``/``backbone_flops`` exclude the classifier head;
    the grand totals include it.
    """

    mode: str
    layers: tuple
    params_by_category: dict
    flops_by_category: dict

    @property
    def backbone_params(self) -> int:
        return sum(self.params_by_category[c] for c in ("spatial", "channel", "other"))

    @property
    def backbone_flops(self) -> int:
        return sum(self.flops_by_category[c] for c in ("spatial", "channel", "other"))

    @property
    def total_params(self) -> int:
        return self.backbone_params + self.params_by_category["head"]

    @property
    def total_flops(self) -> int:
        return self.backbone_flops + self.flops_by_category["head"]

    def param_shares(self) -> dict:
        """Category percentages of the backbone parameter total."""
        total = self.backbone_params
        if total == 0:
            return {c: 0.0 for c in ("spatial", "channel", "other")}
        return {c: 100.0 * self.params_by_category[c] / total
                for c in ("spatial", "channel", "other")}


def _size(shape) -> int:
    n = 1
    for d in shape:
        n *= d
    return n


def _node_cost(node: Node):
    """(kind, category, mac-bearing weight params, normalization params)."""
    if isinstance(node, ConvNode):
        s = node.spec
        weights = _size(s.weight_shape()) + (s.out_channels if s.has_bias else 0)
        category = "spatial" if s.kernel_h * s.kernel_w > 1 else "channel"
        return f"conv{s.kernel_h}x{s.kernel_w}", category, weights, 0
    if isinstance(node, BnNode):
        return "bn", "other", 0, 2 * node.channels
    if isinstance(node, LinearNode):
        return "linear", "head", node.out_features * (node.in_features + 1), 0
    if isinstance(node, RepSONode):
        c = node.cfg.channels
        weights = 0
        for kind in node.cfg.branch_kinds():
            shape = branch_kernel_shape(kind, c)
            if shape is not None:
                weights += _size(shape)
        return "repso", "spatial", weights, 2 * c * node.cfg.branch_count
    if isinstance(node, RefCONode):
        s = node.spec
        w1 = s.hidden_channels * s.windows * s.kernel
        w2 = s.c_out * s.windows
        weights = s.windows * w1 + s.kernel * w2
        norm = s.windows * 2 * s.hidden_channels + s.kernel * 2 * s.c_out
        return "refco", "channel", weights, norm
    if isinstance(node, SFConvNode):
        s = node.spec
        weights = sfconv_param_count(s)
        if node.has_bias1:
            weights += s.hidden_channels * s.windows
        if node.has_bias2:
            weights += s.c_out
        return "sfconv", "channel", weights, 0
    return None


def _walk(nodes, h: int, w: int, rows: list):
    for node in nodes:
        if isinstance(node, BlockNode):
            h, w = _walk(node.body, h, w, rows)
            continue
        if isinstance(node, ConvNode):
            oh, ow = node.spec.out_hw(h, w)
        elif isinstance(node, PoolNode):
            oh = ow = 1
        else:
            oh, ow = h, w
        cost = _node_cost(node)
        if cost is not None:
            kind, category, weights, norm = cost
            rows.append(LayerCost(node.name, kind, category,
                                  weights + norm, oh * ow * weights, oh, ow))
        h, w = oh, ow
    return h, w


def cost_report(graph: LayerGraph, mode: str = "train",
                resolution: int | None = None) -> CostReport:
    if mode not in ("train", "inference"):
        raise ValueError(f"mode must be 'train' or 'inference', got '{mode}'")
    g = fused_structure(graph) if mode == "inference" else graph
    res = graph.config.input_resolution if resolution is None else int(resolution)
    if res < 1:
        raise ShapeError(f"resolution must be positive, got {res}")
    rows: list = []
    _walk(g.nodes, res, res, rows)
    params = {c: 0 for c in CATEGORIES}
    flops = {c: 0 for c in CATEGORIES}
    for row in rows:
        params[row.category] += row.params
        flops[row.category] += row.flops
    return CostReport(mode, tuple(rows), params, flops)


def count_params(graph: LayerGraph, mode: str = "train") -> CostReport:
    """Per-layer parameter table with category totals (head kept separate)."""
    return cost_report(graph, mode)


def count_flops(graph: LayerGraph, input_resolution: int | None = None,
                mode: str = "train") -> CostReport:
    """Per-layer Flops table at the given input resolution."""
    return cost_report(graph, mode, input_resolution)
