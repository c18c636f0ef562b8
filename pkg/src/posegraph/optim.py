"""Adam on registry parameters, with optional box constraints."""

from __future__ import annotations

from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from .tensor import Tensor


class Adam:
    """Standard Adam with bias correction.

    Parameters update in sorted-name order so a run is reproducible
    regardless of how the model enumerated them. `box` maps parameter
    names to (lo, hi) intervals; those entries are projected back into
    the box after each step (used for the graph gates, which live in
    [0, 1]).
    """

    def __init__(self, params: Iterable[Tuple[str, Tensor]], lr: float,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 box: Optional[Dict[str, Tuple[float, float]]] = None):
        self.params = sorted(params, key=lambda kv: kv[0])
        self.lr = float(lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.box = box or {}
        self.t = 0
        self._m = {name: np.zeros_like(p.data) for name, p in self.params}
        self._v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * np.square(g)
            update = (self.lr / b1t) * m / (np.sqrt(v / b2t) + self.eps)
            p.data = p.data - update.astype(p.data.dtype)
            if name in self.box:
                lo, hi = self.box[name]
                np.clip(p.data, lo, hi, out=p.data)
