"""AdamW with decoupled weight decay and cosine annealing with warm restarts."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import NonFiniteError, Parameter


class CosineWarmRestarts:
    """Warm-restart cosine schedule.

    Within a cycle of length ``T_i``::

        lr(t) = lr_min + 0.5 * (lr_base - lr_min) * (1 + cos(pi * t_cur / T_i))

    At every restart boundary the rate jumps back to ``lr_base`` and the
    cycle length is multiplied by ``period_mult``.
    """

    def __init__(self, lr_base, period, period_mult=2, lr_min=1e-6):
        if period < 1:
            raise ValueError(f"schedule period must be >= 1, got {period}")
        if period_mult < 1:
            raise ValueError(f"period_mult must be >= 1, got {period_mult}")
        if not 0.0 <= lr_min <= lr_base:
            raise ValueError(f"need 0 <= lr_min <= lr_base, got {lr_min} vs {lr_base}")
        self.lr_base = float(lr_base)
        self.period = int(period)
        self.period_mult = int(period_mult)
        self.lr_min = float(lr_min)

    def cycle_position(self, step):
        """Return (t_cur, T_i) for an absolute step count."""
        if step < 0:
            raise ValueError(f"step must be >= 0, got {step}")
        t, t_i = int(step), self.period
        while t >= t_i:
            t -= t_i
            t_i *= self.period_mult
        return t, t_i

    def lr_at(self, step):
        t_cur, t_i = self.cycle_position(step)
        lr = self.lr_min + 0.5 * (self.lr_base - self.lr_min) * (
            1.0 + math.cos(math.pi * t_cur / t_i)
        )
        # guard lr into [lr_min, lr_base] against rounding at cycle edges
        return min(max(lr, self.lr_min), self.lr_base)


class AdamW:
    """Adam with bias correction and weight decay applied multiplicatively
    to the parameters rather than folded into the gradients.

    Tracks only trainable parameters; frozen leaves are never touched.
    A parameter whose ``.grad`` is None at step() is treated as having a
    zero gradient.
    """

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=1e-5, schedule=None):
        if isinstance(params, dict):
            params = list(params.values())
        self.params = [p for p in params if isinstance(p, Parameter) and p.trainable]
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names passed to AdamW")
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.schedule = schedule
        self.step_count = 0
        self._m = {p.name: np.zeros_like(p.data) for p in self.params}
        self._v = {p.name: np.zeros_like(p.data) for p in self.params}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def current_lr(self):
        if self.schedule is None:
            return self.lr
        return self.schedule.lr_at(self.step_count)

    def step(self):
        """Apply one update; returns the learning rate that was used."""
        lr_t = self.current_lr()
        t = self.step_count + 1
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p in self.params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {p.name!r}")
            m = self._m[p.name]
            v = self._v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.weight_decay:
                p.data *= 1.0 - lr_t * self.weight_decay
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= lr_t * update
        self.step_count = t
        return lr_t
