"""AdamW with decoupled weight decay and per-group learning-rate multipliers."""

from __future__ import annotations

import numpy as np


class NumericError(RuntimeError):
    """A non-finite value was met where the training contract forbids one."""


class AdamW:
    """Per-parameter moment state; groups only differ by an lr multiplier.

    `groups` is a list of (name, tensor, lr_mult) triples. Bias-corrected
    first/second moments; decay is applied to the parameter directly (not
    through the gradient).
    """

    def __init__(self, groups, lr, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0):
        self.entries = [
            {"name": name, "param": p, "mult": float(mult),
             "m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
            for name, p, mult in groups
        ]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0

    @classmethod
    def for_module(cls, module, lr, betas=(0.9, 0.999), weight_decay=0.0,
                   mult_prefixes=(), mult=1.0):
        """Build groups from a module; names starting with any of
        `mult_prefixes` receive the lr multiplier `mult`."""
        groups = []
        for name, p in module.named_parameters():
            m = mult if any(name.startswith(pre) for pre in mult_prefixes) else 1.0
            groups.append((name, p, m))
        return cls(groups, lr, betas=betas, weight_decay=weight_decay)

    def zero_grad(self):
        for e in self.entries:
            e["param"].grad = None

    def step(self):
        """One update; parameters with grad None are untouched."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for e in self.entries:
            p = e["param"]
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {e['name']}")
            lr = self.lr * e["mult"]
            e["m"] = self.beta1 * e["m"] + (1.0 - self.beta1) * g
            e["v"] = self.beta2 * e["v"] + (1.0 - self.beta2) * (g * g)
            m_hat = e["m"] / bc1
            v_hat = e["v"] / bc2
            if self.weight_decay:
                p.data -= (lr * self.weight_decay) * p.data
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
