"""Adam optimiser over :class:`~cathseg.autograd.Tensor` parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import ContractError, Tensor


@dataclass
class OptimizerState:
    """First/second moment estimates, one pair per parameter, and the step count."""

    lr: float
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: OptimizerState, lr: float | None = None,
              betas=(0.9, 0.999), eps: float = 1e-8) -> OptimizerState:
    """Apply one Adam update in place to the arrays in ``params``.

    ``params`` and ``grads`` are parallel sequences of numpy arrays.  Missing
    moment arrays are created as zeros on the first call.
    """
    lr = state.lr if lr is None else lr
    if len(params) != len(grads):
        raise ContractError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            raise ContractError(f"parameter {i} has no gradient")
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ContractError(f"parameter {i}: shape {p.shape}, grad {g.shape}, moment {state.m[i].shape}")
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return state


class Adam:
    """Adam with beta=(0.9, 0.999), eps=1e-8 over a fixed list of named tensors."""

    def __init__(self, named_params, lr: float = 1e-3):
        self.named = list(named_params)
        self.state = OptimizerState(lr=lr)

    @property
    def params(self) -> list[Tensor]:
        return [p for _, p in self.named]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        missing = [name for name, p in self.named if p.grad is None]
        if missing:
            raise ContractError(f"no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Moment arrays keyed ``m/<name>`` and ``v/<name>`` for checkpointing."""
        out = {}
        if self.state.m:
            for (name, _), m, v in zip(self.named, self.state.m, self.state.v):
                out[f"m/{name}"] = m
                out[f"v/{name}"] = v
        return out

    def load_state_arrays(self, arrays: dict, step: int) -> None:
        self.state.step = step
        if step == 0:
            self.state.m, self.state.v = [], []
            return
        self.state.m = [np.array(arrays[f"m/{n}"]) for n, _ in self.named]
        self.state.v = [np.array(arrays[f"v/{n}"]) for n, _ in self.named]
