"""Projector MLP followed by L2 normalization onto the unit sphere."""

from __future__ import annotations

import numpy as np

from . import ndtensor as nd
from .ndtensor import Tensor


class ProjectorParams:
    """Two affine maps ``d -> d // 2 -> d_p`` with a ReLU in between."""

    def __init__(self, d: int, d_p: int | None, rng: np.random.Generator):
        hidden = d // 2
        if hidden < 1:
            raise ValueError(f"projector input width {d} too small")
        self.d, self.hidden = d, hidden
        self.d_p = d // 2 if d_p is None else d_p
        b1, b2 = 1.0 / np.sqrt(d), 1.0 / np.sqrt(hidden)
        self.w1 = nd.parameter(rng.uniform(-b1, b1, (d, hidden)), "proj.w1")
        self.b1 = nd.parameter(rng.uniform(-b1, b1, (1, hidden)), "proj.b1")
        self.w2 = nd.parameter(rng.uniform(-b2, b2, (hidden, self.d_p)), "proj.w2")
        self.b2 = nd.parameter(rng.uniform(-b2, b2, (1, self.d_p)), "proj.b2")

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return [(t.name, t) for t in (self.w1, self.b1, self.w2, self.b2)]


def project_raw(params: ProjectorParams, z: Tensor) -> Tensor:
    hidden = nd.relu(nd.add_row(nd.matmul(z, params.w1), params.b1))
    return nd.add_row(nd.matmul(hidden, params.w2), params.b2)


def project(params: ProjectorParams, z: Tensor) -> Tensor:
    """Rows of ``z`` [B x d] mapped to unit vectors [B x d_p]."""
    return nd.l2_normalize_rows(project_raw(params, z))
