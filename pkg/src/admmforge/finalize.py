"""Masked mapping and retraining: turns regularized weights into an
exactly feasible model and restores accuracy with frozen-weight SGD.

Pruning: hard-project, freeze the zeros, retrain the survivors.
Quantization: freeze weights already within epsilon of a level at that
level, retrain the rest, then map the rest onto the grid as well.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FeasibilityError, InputError
from .models import Network, TrainTrace, evaluate, run_epochs, step_decay
from .projections import (Cardinality, ColumnGroup, ConstraintSpec, LevelGrid,
                          Levels, cardinality_support, column_support,
                          make_levels, project_levels, satisfies_constraint)


def apply_mask(grads: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero gradient entries where mask is True (frozen positions)."""
    if grads.shape != mask.shape:
        raise InputError(f"grad shape {grads.shape} != mask shape {mask.shape}")
    return np.where(mask, 0, grads)


@dataclass
class PruneMask:
    """Per layer: True where the weight is frozen at exactly zero."""
    masks: dict[str, np.ndarray] = field(default_factory=dict)

    def kept(self, name: str) -> int:
        return int((~self.masks[name]).sum())

    def grad_masks(self) -> dict[str, np.ndarray]:
        return {f"{name}.weight": m for name, m in self.masks.items()}

    def merged_with(self, other: "PruneMask | None") -> "PruneMask":
        if other is None:
            return self
        out = {n: m.copy() for n, m in other.masks.items()}
        for n, m in self.masks.items():
            out[n] = (out[n] | m) if n in out else m
        return PruneMask(out)


@dataclass
class QuantFreeze:
    """Per layer: frozen-on-grid flags, the grid itself, and epsilon."""
    frozen: dict[str, np.ndarray] = field(default_factory=dict)
    levels: dict[str, Levels] = field(default_factory=dict)
    epsilon: dict[str, float] = field(default_factory=dict)


def _support_mask(spec: ConstraintSpec, w: np.ndarray) -> np.ndarray:
    if isinstance(spec, Cardinality):
        return cardinality_support(w, spec.alpha)
    if isinstance(spec, ColumnGroup):
        w2 = w.reshape(w.shape[0], -1)
        cols = column_support(w2, spec.kept_columns)
        return np.broadcast_to(cols[None, :], w2.shape).reshape(w.shape).copy()
    raise InputError(f"{type(spec).__name__} is not a pruning constraint")


def _retrain_lr(lr: float, epochs: int):
    # retraining reuses the step-decay shape at a tenth of the peak rate
    return step_decay(lr * 0.1, epochs)


def _merge_masks(base: dict[str, np.ndarray],
                 extra: dict[str, np.ndarray] | None) -> dict[str, np.ndarray]:
    out = dict(base)
    for key, m in (extra or {}).items():
        out[key] = (out[key] | m) if key in out else m
    return out


def finalize_prune(net: Network, constraints: dict[str, ConstraintSpec],
                   dataset, retrain_epochs: int = 30, *, lr: float = 0.01,
                   momentum: float = 0.9, batch_size: int = 100, seed: int = 0,
                   eval_dataset=None,
                   prior_mask: PruneMask | None = None,
                   extra_grad_masks: dict[str, np.ndarray] | None = None
                   ) -> tuple[Network, PruneMask, TrainTrace]:
    """Project onto the pruning sets, then retrain only surviving weights.

    Masked weights are exactly 0.0 before, during, and after retraining.
    """
    masks = {}
    for name, spec in constraints.items():
        w = net.weight(name)
        support = _support_mask(spec, w.data)
        w.data = np.where(support, w.data, 0).astype(w.data.dtype)
        masks[name] = ~support
    mask = PruneMask(masks).merged_with(prior_mask)
    for name in mask.masks:
        w = net.weight(name)
        w.data[mask.masks[name]] = 0.0
    trace = TrainTrace()
    if retrain_epochs > 0:
        rng = np.random.Generator(np.random.PCG64(seed))
        trace = run_epochs(net, dataset, retrain_epochs,
                           lr_at=_retrain_lr(lr, retrain_epochs),
                           momentum=momentum, batch_size=batch_size, rng=rng,
                           grad_masks=_merge_masks(mask.grad_masks(),
                                                   extra_grad_masks),
                           eval_dataset=eval_dataset)
    for name, spec in constraints.items():
        w = net.weight(name).data
        if np.abs(w[mask.masks[name]]).sum() != 0.0:
            raise FeasibilityError(f"layer {name!r}: masked weights drifted")
        if not satisfies_constraint(spec, w):
            raise FeasibilityError(f"layer {name!r}: pruning constraint violated "
                                   "after retraining")
    return net, mask, trace


def finalize_quant(net: Network, constraints: dict[str, ConstraintSpec],
                   dataset, retrain_epochs: int = 30,
                   epsilon: float | None = None, *, lr: float = 0.01,
                   momentum: float = 0.9, batch_size: int = 100, seed: int = 0,
                   eval_dataset=None, zero_mask: PruneMask | None = None,
                   fixed_levels: dict[str, Levels] | None = None,
                   extra_grad_masks: dict[str, np.ndarray] | None = None
                   ) -> tuple[Network, QuantFreeze, TrainTrace]:
    """Three phases: freeze near-grid weights on the grid, retrain the
    rest, then map the rest onto the grid too.

    ``epsilon`` defaults to 0.2x the level spacing, per layer. Positions
    in ``zero_mask`` stay exactly zero and are never quantized (grids are
    fitted on the surviving weights only).
    """
    freeze = QuantFreeze()
    zmasks = zero_mask.masks if zero_mask else {}
    for name, spec in constraints.items():
        w = net.weight(name)
        zm = zmasks.get(name)
        if fixed_levels and name in fixed_levels:
            levels = fixed_levels[name]
        elif isinstance(spec, Levels):
            levels = spec
        elif isinstance(spec, LevelGrid):
            fit_on = w.data[~zm] if zm is not None else w.data
            levels = make_levels(fit_on, spec.bit_width, spec.include_zero)
        else:
            raise InputError(f"{type(spec).__name__} is not a quantization constraint")
        eps = 0.2 * levels.spacing if epsilon is None else epsilon
        nearest = project_levels(w.data, levels)
        close = np.abs(w.data.astype(np.float64) - nearest) <= eps
        if zm is not None:
            close = close & ~zm
        w.data = np.where(close, nearest, w.data).astype(w.data.dtype)
        freeze.frozen[name] = close
        freeze.levels[name] = levels
        freeze.epsilon[name] = float(eps)

    grad_masks = {}
    for name in constraints:
        m = freeze.frozen[name].copy()
        if name in zmasks:
            m |= zmasks[name]
        grad_masks[f"{name}.weight"] = m
    if zero_mask is not None:
        grad_masks = _merge_masks(grad_masks, zero_mask.grad_masks())
    grad_masks = _merge_masks(grad_masks, extra_grad_masks)
    trace = TrainTrace()
    any_trainable = any((~m).any() for m in grad_masks.values())
    if retrain_epochs > 0 and any_trainable:
        rng = np.random.Generator(np.random.PCG64(seed))
        trace = run_epochs(net, dataset, retrain_epochs,
                           lr_at=_retrain_lr(lr, retrain_epochs),
                           momentum=momentum, batch_size=batch_size, rng=rng,
                           grad_masks=grad_masks, eval_dataset=eval_dataset)

    for name, spec in constraints.items():
        w = net.weight(name)
        zm = zmasks.get(name)
        remaining = ~freeze.frozen[name]
        if zm is not None:
            remaining &= ~zm
        mapped = project_levels(w.data, freeze.levels[name])
        w.data = np.where(remaining, mapped, w.data).astype(w.data.dtype)
        if not satisfies_constraint(spec, w.data, zero_mask=zm,
                                    levels=freeze.levels[name]):
            raise FeasibilityError(f"layer {name!r}: quantization constraint "
                                   "violated after mapping")
    return net, freeze, trace
