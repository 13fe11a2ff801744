"""The ADMM regularization loop.

Alternates between (1) SGD on the task loss plus per-layer quadratic
penalties pulling weights toward their projected copies, and (2) exact
Euclidean projection of W+U onto the constraint sets, with a dual update
coupling the two. The penalty weight rho grows geometrically across
iterations, capped so late iterations stay numerically tame.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError, StateError
from .models import Network, TrainTrace, evaluate, run_epochs
from .projections import (ConstraintSpec, Levels, constraint_label,
                          project_constraint, satisfies_constraint)
from .tensor import Tensor, sqsum_diff


@dataclass
class RhoSchedule:
    """rho_k = min(rho0 * growth^k, rho_max), nondecreasing."""
    rho0: float = 1.5e-3
    growth: float = 1.5
    iterations: int = 12
    rho_max: float = 0.05

    def __post_init__(self):
        if self.rho0 <= 0 or self.growth < 1.0 or self.iterations < 0:
            raise ConfigError(f"invalid rho schedule: {self}")

    def rho_at(self, k: int) -> float:
        return min(self.rho0 * self.growth ** k, self.rho_max)


@dataclass
class LayerState:
    constraint: ConstraintSpec
    Z: np.ndarray
    U: np.ndarray
    rho: float
    levels: Levels | None = None   # fitted grid from the latest projection


class AdmmState:
    """Per-layer (Z, U, rho, constraint) triplets plus the iteration count.

    Z is always post-projection (feasible); U accumulates the running
    consensus gap W - Z.
    """

    def __init__(self, layers: dict[str, LayerState], k: int = 0,
                 zero_masks: dict[str, np.ndarray] | None = None):
        self.layers = layers
        self.k = k
        self.zero_masks = zero_masks or {}

    @classmethod
    def initialize(cls, net: Network, constraints: dict[str, ConstraintSpec],
                   schedule: RhoSchedule,
                   zero_masks: dict[str, np.ndarray] | None = None) -> "AdmmState":
        missing = [n for n in constraints if n not in net.compressible_layers()]
        if missing:
            raise ConfigError(f"constraints name non-compressible layers: {missing}")
        layers = {}
        zero_masks = zero_masks or {}
        for name, spec in constraints.items():
            w = net.weight(name).data.astype(np.float64)
            z, levels = project_constraint(spec, w, zero_masks.get(name))
            layers[name] = LayerState(constraint=spec, Z=z,
                                      U=np.zeros_like(w), rho=schedule.rho_at(0),
                                      levels=levels)
        return cls(layers, k=0, zero_masks=zero_masks)

    def check_shapes(self, net: Network):
        for name, st in self.layers.items():
            w = net.weight(name).data
            if st.Z.shape != w.shape or st.U.shape != w.shape:
                raise StateError(f"layer {name!r}: state shapes {st.Z.shape} "
                                 f"do not match weights {w.shape}")

    def relative_gaps(self, net: Network) -> dict[str, float]:
        """r_i = ||W_i - Z_i||_F / ||W_i||_F per constrained layer."""
        out = {}
        for name, st in self.layers.items():
            w = net.weight(name).data.astype(np.float64)
            denom = np.linalg.norm(w)
            out[name] = float(np.linalg.norm(w - st.Z) / (denom if denom else 1.0))
        return out


def penalty_terms(net: Network, state: AdmmState) -> Tensor | None:
    """Sum of (rho_i/2)||W_i - Z_i + U_i||_F^2 as a differentiable scalar."""
    total = None
    for name, st in state.layers.items():
        w = net.weight(name)
        term = sqsum_diff(w, (st.Z - st.U).astype(w.data.dtype)) * (st.rho / 2.0)
        total = term if total is None else total + term
    return total


def augmented_loss(net: Network, batch, state: AdmmState) -> Tensor:
    """Task loss on the batch plus the quadratic consensus penalty.

    ``batch`` may be None to evaluate the penalty alone.
    """
    from .tensor import softmax_cross_entropy

    state.check_shapes(net)
    penalty = penalty_terms(net, state)
    if batch is None:
        if penalty is None:
            raise InputError("no batch and no constrained layers")
        return penalty
    x, y = batch
    task = softmax_cross_entropy(net.forward(x), y)
    return task if penalty is None else task + penalty


def solve_subproblem1(net: Network, dataset, state: AdmmState, epochs_per_iter: int,
                      *, lr: float, momentum: float = 0.9, batch_size: int = 100,
                      rng: np.random.Generator,
                      grad_masks: dict[str, np.ndarray] | None = None,
                      lr_at=None, epoch_offset: int = 0) -> TrainTrace:
    """SGD on the augmented loss; updates W in place, never touches Z or U.

    With ``dataset=None`` the task loss is identically zero and each
    "epoch" is a fixed number of plain gradient steps on the penalty.
    """
    if epochs_per_iter < 1:
        raise InputError("epochs_per_iter must be >= 1")
    state.check_shapes(net)
    if lr_at is None:
        lr_at = lambda e: lr
    if dataset is None:
        from .optim import SGD
        params = net.parameters()
        opt = SGD(lr=lr_at(epoch_offset), momentum=momentum)
        trace = TrainTrace()
        for _ in range(epochs_per_iter * 25):
            loss = penalty_terms(net, state)
            opt.zero_grad(params)
            loss.backward()
            opt.step(params, grad_masks=grad_masks)
            trace.train_loss.append(loss.item())
        return trace
    return run_epochs(net, dataset, epochs_per_iter, lr_at=lr_at,
                      momentum=momentum, batch_size=batch_size, rng=rng,
                      penalty_fn=lambda n: penalty_terms(n, state),
                      grad_masks=grad_masks, epoch_offset=epoch_offset)


def solve_subproblem2(net: Network, state: AdmmState):
    """Z_i <- projection of W_i + U_i onto S_i (grids re-fit each call)."""
    for name, st in state.layers.items():
        w = net.weight(name).data
        v = w.astype(np.float64) + st.U
        st.Z, levels = project_constraint(st.constraint, v,
                                          state.zero_masks.get(name))
        if levels is not None:
            st.levels = levels


def dual_update(net: Network, state: AdmmState):
    """U_i <- U_i + W_i - Z_i."""
    for name, st in state.layers.items():
        st.U = st.U + net.weight(name).data.astype(np.float64) - st.Z


@dataclass
class IterationRecord:
    iteration: int
    rho: float
    gaps: dict[str, float]
    train_loss: float
    accuracy_raw: float | None       # evaluated on the live weights W
    accuracy_projected: float | None  # evaluated on project(W)

    @property
    def max_gap(self) -> float:
        return max(self.gaps.values()) if self.gaps else 0.0


@dataclass
class ConvergenceTrace:
    initial_gaps: dict[str, float] = field(default_factory=dict)
    records: list[IterationRecord] = field(default_factory=list)
    converged: bool = False
    warning: str | None = None

    @property
    def iterations(self) -> int:
        return len(self.records)

    def max_gap_at(self, iteration: int) -> float:
        return self.records[iteration].max_gap

    def save_csv(self, path):
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["iteration", "layer", "r", "rho", "loss",
                         "accuracy_raw", "accuracy_projected"])
            for name, r0 in self.initial_gaps.items():
                wr.writerow([0, name, f"{r0:.8f}", "", "", "", ""])
            for rec in self.records:
                for name, r in rec.gaps.items():
                    wr.writerow([rec.iteration, name, f"{r:.8f}",
                                 f"{rec.rho:.6g}", f"{rec.train_loss:.6f}",
                                 "" if rec.accuracy_raw is None else f"{rec.accuracy_raw:.6f}",
                                 "" if rec.accuracy_projected is None else f"{rec.accuracy_projected:.6f}"])


def _projected_accuracy(net: Network, state: AdmmState, eval_dataset) -> float:
    saved = {name: net.weight(name).data.copy() for name in state.layers}
    try:
        for name, st in state.layers.items():
            w = net.weight(name)
            proj, _ = project_constraint(st.constraint, w.data,
                                         state.zero_masks.get(name))
            w.data = proj
        return evaluate(net, eval_dataset)
    finally:
        for name, arr in saved.items():
            net.weight(name).data = arr


def run_admm(net: Network, dataset, constraints: dict[str, ConstraintSpec],
             schedule: RhoSchedule, *, epochs_per_iter: int = 10,
             lr: float = 0.01, momentum: float = 0.9, batch_size: int = 100,
             tol: float = 1e-2, seed: int = 0, eval_dataset=None,
             zero_masks: dict[str, np.ndarray] | None = None,
             grad_masks: dict[str, np.ndarray] | None = None,
             eval_each_iter: bool = True) -> ConvergenceTrace:
    """Run the full regularization loop in place on ``net``.

    The returned weights are NOT feasible yet; finalization does the exact
    mapping. Non-convergence after the iteration budget is a warning on
    the trace, not an error.
    """
    trace = ConvergenceTrace()
    if schedule.iterations == 0 or not constraints:
        trace.converged = not constraints
        return trace
    state = AdmmState.initialize(net, constraints, schedule, zero_masks)
    trace.initial_gaps = state.relative_gaps(net)
    rng = np.random.Generator(np.random.PCG64(seed))
    masks = dict(grad_masks or {})
    for name, zm in (zero_masks or {}).items():
        key = f"{name}.weight"
        masks[key] = (masks[key] | zm) if key in masks else zm
    # one late lr cut: keep full drive while the dual builds up, then low
    # noise at the end so the consensus gap can settle under the tolerance
    total_epochs = schedule.iterations * epochs_per_iter

    def lr_at(epoch: int) -> float:
        return lr * (0.1 if total_epochs >= 4 and epoch >= (3 * total_epochs) // 4
                     else 1.0)
    for k in range(1, schedule.iterations + 1):
        rho = schedule.rho_at(k - 1)
        for st in state.layers.values():
            st.rho = rho
        sub_trace = solve_subproblem1(net, dataset, state, epochs_per_iter,
                                      lr=lr, momentum=momentum,
                                      batch_size=batch_size, rng=rng,
                                      grad_masks=masks or None, lr_at=lr_at,
                                      epoch_offset=(k - 1) * epochs_per_iter)
        solve_subproblem2(net, state)
        dual_update(net, state)
        state.k = k
        gaps = state.relative_gaps(net)
        acc_raw = acc_proj = None
        if eval_dataset is not None and eval_each_iter:
            acc_raw = evaluate(net, eval_dataset)
            acc_proj = _projected_accuracy(net, state, eval_dataset)
        trace.records.append(IterationRecord(
            iteration=k, rho=rho, gaps=gaps,
            train_loss=sub_trace.train_loss[-1],
            accuracy_raw=acc_raw, accuracy_projected=acc_proj))
        if max(gaps.values()) < tol:
            trace.converged = True
            break
    if not trace.converged:
        labels = {n: constraint_label(s) for n, s in constraints.items()}
        trace.warning = (f"consensus gap still >= {tol} after "
                         f"{schedule.iterations} iterations ({labels})")
    return trace
