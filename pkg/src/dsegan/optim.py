from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Adam:
    """Adam over named parameters; buffers are exposed for checkpointing."""

    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.0, 0.99), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float(np.sum(np.square(p.grad.data, dtype=np.float64)))
        return float(np.sqrt(total))

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.data
            self.m[k] = (b1 * self.m[k] + (1.0 - b1) * g).astype(p.data.dtype)
            self.v[k] = (b2 * self.v[k] + (1.0 - b2) * g * g).astype(p.data.dtype)
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            # rebind rather than mutate so no view of the old weights changes underneath a graph
            p.data = (p.data - update).astype(p.data.dtype)

    def state_tensors(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.t": Tensor(np.array([self.t], dtype=np.float32))}
        for k in self.params:
            out[f"{prefix}.m.{k}"] = Tensor._wrap(self.m[k].astype(np.float32))
            out[f"{prefix}.v.{k}"] = Tensor._wrap(self.v[k].astype(np.float32))
        return out

    def load_state_tensors(self, prefix: str, state: dict[str, Tensor]):
        self.t = int(state[f"{prefix}.t"].data[0])
        for k in self.params:
            self.m[k] = np.array(state[f"{prefix}.m.{k}"].data, dtype=self.params[k].data.dtype)
            self.v[k] = np.array(state[f"{prefix}.v.{k}"].data, dtype=self.params[k].data.dtype)
