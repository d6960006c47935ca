"""Lattice cross-fusion operators: elementwise combination of all streams'
post-ReLU feature maps, with exact gradients."""

from __future__ import annotations

import enum

import numpy as np

from .tensor import ShapeMismatchError


class FusionOp(enum.Enum):
    AVERAGE = "average"
    ADD = "add"
    SUB = "sub"
    ABSDIFF = "absdiff"

    @classmethod
    def parse(cls, name: str) -> "FusionOp":
        try:
            return cls(name.lower())
        except ValueError:
            valid = ", ".join(op.value for op in cls)
            raise ValueError(f"unknown fusion op {name!r} (valid: {valid})") from None


BINARY_ONLY = {FusionOp.SUB, FusionOp.ABSDIFF}


def _check_bundle(op: FusionOp, streams) -> None:
    if len(streams) < 1:
        raise ValueError("fusion needs at least one stream")
    ref = streams[0].shape
    for m in streams[1:]:
        if m.shape != ref:
            raise ShapeMismatchError(ref, m.shape)
    if op in BINARY_ONLY and len(streams) != 2:
        raise ValueError(f"{op.value} fusion requires exactly 2 streams, got {len(streams)}")


def fuse_forward(op: FusionOp, streams) -> np.ndarray:
    _check_bundle(op, streams)
    n = len(streams)
    if op is FusionOp.AVERAGE:
        if n == 1:
            return streams[0]
        if n == 2:
            # (a+b)*0.5 keeps average-of-identical-streams exact
            return (streams[0] + streams[1]) * 0.5
        total = streams[0].copy()
        for m in streams[1:]:
            total += m
        return total * (1.0 / n)
    if op is FusionOp.ADD:
        if n == 1:
            return streams[0]
        total = streams[0].copy()
        for m in streams[1:]:
            total += m
        return total
    if op is FusionOp.SUB:
        return streams[0] - streams[1]
    # ABSDIFF
    return np.abs(streams[0] - streams[1])


def fuse_backward(op: FusionOp, streams, grad_y: np.ndarray):
    _check_bundle(op, streams)
    if grad_y.shape != streams[0].shape:
        raise ShapeMismatchError(grad_y.shape, streams[0].shape)
    n = len(streams)
    if op is FusionOp.AVERAGE:
        g = grad_y if n == 1 else grad_y * (1.0 / n)
        return [g if k == 0 else g.copy() for k in range(n)]
    if op is FusionOp.ADD:
        return [grad_y if k == 0 else grad_y.copy() for k in range(n)]
    if op is FusionOp.SUB:
        return [grad_y, -grad_y]
    # ABSDIFF: subgradient at 0 is 0
    s = np.sign(streams[0] - streams[1])
    ga = s * grad_y
    return [ga, -ga]
