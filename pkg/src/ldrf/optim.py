"""Adam/RAdam with explicit, serializable state, plus the lr schedule.

Written against named parameter dicts rather than torch optimizers so the
whole training state (moments included) round-trips bitwise through the
checkpoint format.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LrSchedule:
    """Log-linear decay from lr_start to lr_end over horizon steps, then flat."""

    lr_start: float = 1e-2
    lr_end: float = 1e-4
    horizon: int = 50_000

    def __post_init__(self):
        if self.lr_start <= 0 or self.lr_end <= 0:
            raise ValueError("learning rates must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")

    def lr_at(self, step: int) -> float:
        if step >= self.horizon:
            return self.lr_end
        frac = step / self.horizon
        return float(self.lr_start * (self.lr_end / self.lr_start) ** frac)


class Adam:
    """Adam over a {name: Parameter} dict; optional RAdam variance rectification.

    A non-finite gradient anywhere skips the whole parameter update for that
    call, but the step counter still advances and the event is logged.
    """

    def __init__(
        self,
        params: dict[str, torch.nn.Parameter],
        schedule: LrSchedule,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-15,
        radam: bool = False,
    ):
        self.params = dict(params)
        self.schedule = schedule
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.radam = radam
        self.step_count = 0
        self.skipped_steps = 0
        self.m = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _grads_finite(self) -> bool:
        for p in self.params.values():
            if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
                return False
        return True

    @torch.no_grad()
    def step(self) -> bool:
        """Apply one update. Returns False when skipped on non-finite gradients."""
        lr = self.schedule.lr_at(self.step_count)
        self.step_count += 1
        if not self._grads_finite():
            self.skipped_steps += 1
            log.warning(
                "skipping optimizer step %d: non-finite gradient", self.step_count
            )
            return False
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        if self.radam:
            rho_inf = 2.0 / (1.0 - b2) - 1.0
            rho_t = rho_inf - 2.0 * t * b2 ** t / bc2
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            m_hat = m / bc1
            if self.radam:
                if rho_t > 5.0:
                    r = math.sqrt(
                        (rho_t - 4.0)
                        * (rho_t - 2.0)
                        * rho_inf
                        / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)
                    )
                    p.sub_(lr * r * m_hat / (torch.sqrt(v / bc2) + self.eps))
                else:
                    p.sub_(lr * m_hat)
            else:
                p.sub_(lr * m_hat / (torch.sqrt(v / bc2) + self.eps))
        return True

    def state_blocks(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"opt.m.{name}"] = self.m[name].detach().cpu().numpy()
            out[f"opt.v.{name}"] = self.v[name].detach().cpu().numpy()
        return out

    def load_state_blocks(self, blocks: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            for store, key in ((self.m, f"opt.m.{name}"), (self.v, f"opt.v.{name}")):
                arr = blocks[key]
                if tuple(arr.shape) != tuple(p.shape):
                    raise ValueError(f"optimizer block {key} has shape {arr.shape}")
                store[name] = torch.as_tensor(arr, dtype=p.dtype).clone()
