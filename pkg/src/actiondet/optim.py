"""SGD with momentum/weight-decay and the learning-rate schedules.

The half-cosine schedule is 0.5 * lr0 * [cos(pi * iter / iter_max) + 1] with
an optional linear warm-up that meets the cosine value exactly at the
junction. The step schedule multiplies lr0 by a decay factor at each passed
milestone.
"""

from __future__ import annotations

import math

import torch

from .config import OptimConfig, ScheduleConfig


def half_cosine_lr(iteration: int, cfg: ScheduleConfig) -> float:
    """Cosine-annealed learning rate; clamps beyond iter_max."""
    it = min(max(iteration, 0), cfg.iter_max)
    cosine = 0.5 * cfg.lr0 * (math.cos(math.pi * it / cfg.iter_max) + 1.0)
    if cfg.warmup_iters > 0 and it < cfg.warmup_iters:
        start = cfg.lr0 / cfg.warmup_iters
        end = 0.5 * cfg.lr0 * (math.cos(math.pi * cfg.warmup_iters / cfg.iter_max)
                               + 1.0)
        return start + (end - start) * (it / cfg.warmup_iters)
    return cosine


def step_lr(iteration: int, cfg: ScheduleConfig) -> float:
    """lr0 * factor^(number of milestones passed)."""
    passed = sum(1 for m in cfg.step_milestones if iteration >= m)
    return cfg.lr0 * cfg.step_factor ** passed


def schedule_lr(iteration: int, cfg: ScheduleConfig) -> float:
    if cfg.kind == "half_cosine":
        return half_cosine_lr(iteration, cfg)
    if cfg.kind == "step":
        return step_lr(iteration, cfg)
    raise ValueError(f"unknown schedule kind {cfg.kind!r}")


def sgd_step(param, grad, momentum_buf, lr, momentum=0.9, weight_decay=0.0):
    """One functional update: v <- mu*v + g + wd*p; p <- p - lr*v."""
    v = momentum * momentum_buf + grad + weight_decay * param
    return param - lr * v, v


class SGD:
    """Deterministic synchronous SGD over named parameters.

    Weight decay skips normalization scales/biases. Non-finite gradients
    abort with the parameter name. Momentum buffers are exposed for
    checkpointing so interrupted runs resume bitwise.
    """

    def __init__(self, named_params, cfg: OptimConfig, no_decay=()):
        self.params = dict(named_params)
        self.momentum = cfg.momentum
        self.weight_decay = cfg.weight_decay
        self.no_decay = set(no_decay)
        self.buffers = {name: torch.zeros_like(p)
                        for name, p in self.params.items()}

    @torch.no_grad()
    def step(self, lr: float):
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not torch.isfinite(g).all():
                raise RuntimeError(f"non-finite gradient in parameter {name!r}")
            wd = 0.0 if name in self.no_decay else self.weight_decay
            v = self.buffers[name]
            v.mul_(self.momentum).add_(g)
            if wd:
                v.add_(p, alpha=wd)
            p.add_(v, alpha=-lr)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_arrays(self):
        """Momentum buffers as numpy arrays keyed by parameter name."""
        return {name: v.detach().cpu().numpy().copy()
                for name, v in self.buffers.items()}

    def load_state_arrays(self, arrays):
        for name, arr in arrays.items():
            if name not in self.buffers:
                raise KeyError(f"unknown momentum buffer {name!r}")
            self.buffers[name] = torch.as_tensor(
                arr, dtype=self.params[name].dtype).clone()


def norm_param_names(module: torch.nn.Module) -> set[str]:
    """Names of normalization scale/bias parameters (excluded from decay)."""
    out = set()
    for mod_name, mod in module.named_modules():
        if isinstance(mod, (torch.nn.BatchNorm1d, torch.nn.BatchNorm2d,
                            torch.nn.BatchNorm3d, torch.nn.LayerNorm,
                            torch.nn.GroupNorm)):
            for pname, _ in mod.named_parameters(recurse=False):
                out.add(f"{mod_name}.{pname}" if mod_name else pname)
    return out
