"""Multi-step compression plans and their execution.

Each step is one full regularization + finalization pass; the feasible
result of a step seeds and constrains the next. Pruning plans tighten
per-layer budgets monotonically; quantization plans split the layer set
(middle layers first, then first+last with the rest frozen).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .admm import ConvergenceTrace, RhoSchedule, run_admm
from .errors import ConfigError
from .finalize import PruneMask, QuantFreeze, finalize_prune, finalize_quant
from .models import Network, evaluate
from .projections import Cardinality, ConstraintSpec, LevelGrid, Levels
from .report import CompressionReport, StepRecord

# Per-layer pruning-rate profile used when the caller supplies only an
# overall target: FC layers carry most of the parameters and tolerate far
# harder pruning than the convolutions.
LENET5_LAYER_RATE_PROFILE = {"conv1": 1.5, "conv2": 8.3, "fc1": 12.5, "fc2": 5.3}


@dataclass
class PlanStep:
    mode: str                                  # "prune" | "quantize"
    constraints: dict[str, ConstraintSpec]
    schedule: RhoSchedule = field(default_factory=RhoSchedule)
    epochs_per_iter: int = 10
    retrain_epochs: int = 30
    frozen_layers: tuple = ()

    def __post_init__(self):
        if self.mode not in ("prune", "quantize"):
            raise ConfigError(f"unknown step mode {self.mode!r}")


@dataclass
class CompressionPlan:
    steps: list[PlanStep]

    def validate(self, net: Network):
        sizes = {n: net.weight(n).data.size for n in net.compressible_layers()}
        prev_alpha: dict[str, int] = {}
        for i, step in enumerate(self.steps):
            for name, spec in step.constraints.items():
                if name not in sizes:
                    raise ConfigError(f"step {i}: layer {name!r} is not a "
                                      "compressible layer of this network")
                if isinstance(spec, Cardinality):
                    if spec.alpha > sizes[name]:
                        raise ConfigError(f"step {i}: alpha {spec.alpha} exceeds "
                                          f"{sizes[name]} weights of {name!r}")
                    if name in prev_alpha and spec.alpha > prev_alpha[name]:
                        raise ConfigError(f"step {i}: alpha for {name!r} grew "
                                          f"({prev_alpha[name]} -> {spec.alpha})")
                    prev_alpha[name] = spec.alpha
        return self


def _layer_sizes(net: Network) -> dict[str, int]:
    return {n: net.weight(n).data.size for n in net.compressible_layers()}


def per_layer_alphas(net: Network, overall_rate: float,
                     per_layer_prior: dict[str, float]) -> dict[str, int]:
    """Scale the prior per-layer rates by one common factor so the overall
    rate hits the target; clamp any layer kept below 1% of its weights and
    take the deficit out of the dense layers."""
    sizes = _layer_sizes(net)
    missing = [n for n in sizes if n not in per_layer_prior]
    if missing:
        raise ConfigError(f"per-layer prior rates missing for {missing}")
    total = sum(sizes.values())
    prior_kept = {n: sizes[n] / per_layer_prior[n] for n in sizes}
    prior_overall = total / sum(prior_kept.values())
    s = overall_rate / prior_overall
    kept = {n: sizes[n] / (per_layer_prior[n] * s) for n in sizes}

    floor = {n: max(1.0, 0.01 * sizes[n]) for n in sizes}
    clamped = {n for n in sizes if kept[n] < floor[n]}
    deficit = sum(floor[n] - kept[n] for n in clamped)
    for n in clamped:
        kept[n] = floor[n]
    if deficit > 0:
        dense = [n for n, spec in zip([s.name for s in net.specs], net.specs)
                 if spec.kind == "dense" and spec.name in kept
                 and spec.name not in clamped]
        dense_total = sum(kept[n] for n in dense)
        if dense_total > deficit:
            for n in dense:
                kept[n] -= deficit * kept[n] / dense_total
    alphas = {}
    for n in sizes:
        alphas[n] = int(min(sizes[n], max(1, round(kept[n]))))
    return alphas


def overall_rate_of(net: Network, alphas: dict[str, int]) -> float:
    sizes = _layer_sizes(net)
    return sum(sizes.values()) / sum(alphas[n] for n in sizes)


def make_prune_plan(net: Network, r_prior: float,
                    per_layer_prior: dict[str, float] | None = None, *,
                    steps: int = 2, schedule: RhoSchedule | None = None,
                    epochs_per_iter: int = 10, retrain_epochs: int = 30
                    ) -> CompressionPlan:
    """Two pruning steps: first targets ~1.5x the prior-art overall rate,
    the second doubles that. Per-layer budgets scale proportionally from
    the prior per-layer rates."""
    if r_prior < 1:
        raise ConfigError(f"prior rate must be >= 1, got {r_prior}")
    if per_layer_prior is None:
        sizes = _layer_sizes(net)
        if set(sizes) == set(LENET5_LAYER_RATE_PROFILE):
            per_layer_prior = LENET5_LAYER_RATE_PROFILE
        else:
            per_layer_prior = {n: 1.0 for n in sizes}   # uniform
    schedule = schedule or RhoSchedule()
    targets = [1.5 * r_prior * (2.0 ** i) for i in range(steps)]
    plan_steps = []
    prev: dict[str, int] = {}
    for target in targets:
        alphas = per_layer_alphas(net, target, per_layer_prior)
        if prev:
            alphas = {n: min(a, prev[n]) for n, a in alphas.items()}
        prev = alphas
        plan_steps.append(PlanStep(
            mode="prune",
            constraints={n: Cardinality(a) for n, a in alphas.items()},
            schedule=replace(schedule), epochs_per_iter=epochs_per_iter,
            retrain_epochs=retrain_epochs))
    return CompressionPlan(plan_steps).validate(net)


def make_quant_plan(net: Network, bit_width: int, *, include_zero: bool = True,
                    schedule: RhoSchedule | None = None,
                    epochs_per_iter: int = 10, retrain_epochs: int = 30
                    ) -> CompressionPlan:
    """Quantize middle layers first; first and last layers in a second
    step with the middle layers frozen. Networks with fewer than three
    compressible layers collapse to a single step."""
    schedule = schedule or RhoSchedule()
    names = [n for n in net.compressible_layers()]
    grid = LevelGrid(bit_width=bit_width, include_zero=include_zero)
    common = dict(schedule=replace(schedule), epochs_per_iter=epochs_per_iter,
                  retrain_epochs=retrain_epochs)
    if len(names) < 3:
        return CompressionPlan([
            PlanStep(mode="quantize",
                     constraints={n: grid for n in names}, **common)
        ]).validate(net)
    middle = names[1:-1]
    ends = [names[0], names[-1]]
    return CompressionPlan([
        PlanStep(mode="quantize", constraints={n: grid for n in middle},
                 **common),
        PlanStep(mode="quantize", constraints={n: grid for n in ends},
                 frozen_layers=tuple(middle), **common),
    ]).validate(net)


@dataclass
class PlanResult:
    report: CompressionReport
    mask: PruneMask | None = None
    freezes: dict[str, Levels] | None = None
    frozen_flags: dict[str, np.ndarray] | None = None
    traces: list[ConvergenceTrace] = field(default_factory=list)


def _rates_from_mask(net: Network, mask: PruneMask) -> tuple[float, dict[str, float]]:
    sizes = _layer_sizes(net)
    per_layer = {}
    kept_total = 0
    for n, size in sizes.items():
        kept = int((~mask.masks[n]).sum()) if n in mask.masks else size
        per_layer[n] = size / max(kept, 1)
        kept_total += kept
    return sum(sizes.values()) / max(kept_total, 1), per_layer


def run_plan(net: Network, plan: CompressionPlan, dataset, *,
             eval_dataset=None, seed: int = 0, lr: float = 0.01,
             batch_size: int = 100, tol: float = 1e-2,
             baseline_accuracy: float | None = None,
             out_dir: str | None = None, method: str = "progressive",
             prior_mask: PruneMask | None = None, model_name: str = "net",
             save_step_checkpoints: bool = True) -> tuple[Network, PlanResult]:
    """Execute the steps in order, carrying masks and frozen grids forward.

    Step checkpoints (when ``out_dir`` is set) are written as each step
    completes, so an interrupted run keeps its last finished step.
    """
    plan.validate(net)
    if baseline_accuracy is None and eval_dataset is not None:
        baseline_accuracy = evaluate(net, eval_dataset)
    report = CompressionReport(model=model_name, seed=seed,
                               baseline_accuracy=baseline_accuracy)
    result = PlanResult(report=report, mask=prior_mask)
    quant_levels: dict[str, Levels] = {}
    quant_frozen: dict[str, np.ndarray] = {}
    frozen_layers: set[str] = set()
    for idx, step in enumerate(plan.steps, start=1):
        frozen_layers.update(step.frozen_layers)
        frozen_layers.update(quant_frozen)   # never retrain finished grids
        grad_masks: dict[str, np.ndarray] = {}
        for layer in sorted(frozen_layers):
            grad_masks[f"{layer}.weight"] = np.ones_like(
                net.weight(layer).data, dtype=bool)
            grad_masks[f"{layer}.bias"] = np.ones(
                net.weight(layer).data.shape[0], dtype=bool)
        zero_masks = result.mask.masks if result.mask else None
        trace = run_admm(net, dataset, step.constraints, step.schedule,
                         epochs_per_iter=step.epochs_per_iter, lr=lr,
                         batch_size=batch_size, tol=tol, seed=seed + idx,
                         eval_dataset=eval_dataset, zero_masks=zero_masks,
                         grad_masks=grad_masks or None)
        result.traces.append(trace)
        if step.mode == "prune":
            net, mask, _ = finalize_prune(
                net, step.constraints, dataset,
                retrain_epochs=step.retrain_epochs, lr=lr,
                batch_size=batch_size, seed=seed + 100 + idx,
                eval_dataset=eval_dataset, prior_mask=result.mask,
                extra_grad_masks=grad_masks or None)
            result.mask = mask
        else:
            net, freeze, _ = finalize_quant(
                net, step.constraints, dataset,
                retrain_epochs=step.retrain_epochs, lr=lr,
                batch_size=batch_size, seed=seed + 100 + idx,
                eval_dataset=eval_dataset, zero_mask=result.mask,
                extra_grad_masks=grad_masks or None)
            quant_levels.update(freeze.levels)
            for name, flags in freeze.frozen.items():
                quant_frozen[name] = np.ones_like(flags)   # fully on-grid now
        acc = evaluate(net, eval_dataset) if eval_dataset is not None else float("nan")
        overall, per_layer = (None, {})
        if result.mask:
            overall, per_layer = _rates_from_mask(net, result.mask)
        bits = {n: lv and int(math.ceil(math.log2(len(lv.values))))
                for n, lv in quant_levels.items()}
        trace_path = ckpt_path = None
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            trace_path = os.path.join(out_dir, f"step{idx}_trace.csv")
            trace.save_csv(trace_path)
            if save_step_checkpoints:
                from .checkpoint import save_checkpoint
                ckpt_path = os.path.join(out_dir, f"step{idx}.ckpt")
                save_checkpoint(ckpt_path, net, mask=result.mask,
                                levels=quant_levels or None,
                                constraints=step.constraints,
                                meta={"method": method, "step": idx,
                                      "seed": seed})
        report.add(StepRecord(
            method=method, mode=step.mode, step=idx, accuracy=acc,
            overall_rate=overall, per_layer_rates=per_layer,
            bit_widths={n: b for n, b in bits.items() if b},
            converged=trace.converged, trace_path=trace_path,
            checkpoint_path=ckpt_path))
    result.freezes = quant_levels or None
    result.frozen_flags = quant_frozen or None
    return net, result


def run_prune_then_quantize(net: Network, prune_plan: CompressionPlan | None,
                            bit_width: int, dataset, *, include_zero: bool = True,
                            eval_dataset=None, seed: int = 0, lr: float = 0.01,
                            batch_size: int = 100,
                            quant_schedule: RhoSchedule | None = None,
                            epochs_per_iter: int = 10, retrain_epochs: int = 30,
                            baseline_accuracy: float | None = None,
                            out_dir: str | None = None
                            ) -> tuple[Network, PlanResult]:
    """Prune first, then fit quantization grids on the surviving weights.

    Pruned positions stay masked at zero; the final model is zero-or-on-grid.
    With no pruning plan this is exactly the plain quantization plan.
    """
    mask = None
    combined_report = None
    quant_seed = seed   # unpruned path must equal a plain quantization run
    if prune_plan is not None and prune_plan.steps:
        net, pres = run_plan(net, prune_plan, dataset,
                             eval_dataset=eval_dataset, seed=seed, lr=lr,
                             batch_size=batch_size,
                             baseline_accuracy=baseline_accuracy,
                             out_dir=out_dir, method="prune-quant")
        mask = pres.mask
        combined_report = pres.report
        baseline_accuracy = pres.report.baseline_accuracy
        quant_seed = seed + 1000
    quant_plan = make_quant_plan(net, bit_width, include_zero=include_zero,
                                 schedule=quant_schedule,
                                 epochs_per_iter=epochs_per_iter,
                                 retrain_epochs=retrain_epochs)
    net, qres = run_plan(net, quant_plan, dataset, eval_dataset=eval_dataset,
                         seed=quant_seed, lr=lr, batch_size=batch_size,
                         baseline_accuracy=baseline_accuracy,
                         out_dir=out_dir, method="prune-quant",
                         prior_mask=mask)
    if combined_report is not None:
        for rec in qres.report.records:
            rec.step += len(combined_report.records)
            combined_report.add(rec)
        qres.report = combined_report
    return net, qres
