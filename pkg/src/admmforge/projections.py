"""Compression constraint sets and exact Euclidean projections onto them.

Three families: cardinality (at most alpha nonzero entries), column
groups (at most k nonzero columns of the 2-D weight view), and
equal-spaced quantization level grids. Projections are pure functions;
ties are broken deterministically (documented per function).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError


@dataclass(frozen=True)
class Cardinality:
    """At most ``alpha`` nonzero entries in the layer's weights."""
    alpha: int

    def __post_init__(self):
        if self.alpha < 1:
            raise InputError(f"alpha must be >= 1, got {self.alpha}")


@dataclass(frozen=True)
class ColumnGroup:
    """At most ``kept_columns`` nonzero columns of the (F, C*kh*kw) view."""
    kept_columns: int

    def __post_init__(self):
        if self.kept_columns < 1:
            raise InputError(f"kept_columns must be >= 1, got {self.kept_columns}")


@dataclass(frozen=True)
class Levels:
    """A fixed, strictly increasing, equal-spaced set of admissible values."""
    values: tuple
    scale: float | None = None
    degenerate: bool = False

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.size == 0:
            raise InputError("levels must be nonempty")
        if vals.size > 1:
            gaps = np.diff(vals)
            if (gaps <= 0).any():
                raise InputError("levels must be strictly increasing")
            if not np.allclose(gaps, gaps[0], rtol=1e-9, atol=0):
                raise InputError("levels must be equal-spaced")
        object.__setattr__(self, "values", tuple(float(v) for v in vals))

    @property
    def spacing(self) -> float:
        vals = self.values
        return vals[1] - vals[0] if len(vals) > 1 else abs(vals[0]) or 1.0

    def as_array(self, dtype=np.float64) -> np.ndarray:
        return np.asarray(self.values, dtype=dtype)


@dataclass(frozen=True)
class LevelGrid:
    """Symmetric equal-spaced grid generator; the scale is re-fit on the
    weights each time the projection is taken."""
    bit_width: int
    include_zero: bool = True

    def __post_init__(self):
        if self.bit_width < 1:
            raise InputError(f"bit_width must be >= 1, got {self.bit_width}")

    def level_count(self) -> int:
        if self.bit_width == 1:
            return 2
        if self.include_zero:
            return 2 ** self.bit_width - 1
        return 2 ** self.bit_width


ConstraintSpec = Cardinality | ColumnGroup | Levels | LevelGrid


def cardinality_support(v: np.ndarray, alpha: int) -> np.ndarray:
    """Boolean mask of the alpha largest-magnitude entries.

    Ties at the threshold magnitude keep the lower flat index.
    """
    flat = np.abs(v).ravel()
    if not 1 <= alpha <= flat.size:
        raise InputError(f"alpha={alpha} outside [1, {flat.size}]")
    order = np.argsort(-flat, kind="stable")
    mask = np.zeros(flat.size, dtype=bool)
    mask[order[:alpha]] = True
    return mask.reshape(v.shape)


def project_cardinality(v: np.ndarray, alpha: int) -> np.ndarray:
    """Euclidean projection onto {card(supp) <= alpha}: keep the alpha
    largest-magnitude entries, zero the rest."""
    keep = cardinality_support(v, alpha)
    return np.where(keep, v, 0).astype(v.dtype, copy=False)


def column_support(w: np.ndarray, kept: int) -> np.ndarray:
    """Boolean mask over columns: the ``kept`` columns of largest L2 norm.

    Ties keep the lower column index.
    """
    if w.ndim != 2:
        raise InputError(f"column projection expects a 2-D view, got ndim={w.ndim}")
    if not 1 <= kept <= w.shape[1]:
        raise InputError(f"kept={kept} outside [1, {w.shape[1]}]")
    norms = (w.astype(np.float64) ** 2).sum(axis=0)
    order = np.argsort(-norms, kind="stable")
    mask = np.zeros(w.shape[1], dtype=bool)
    mask[order[:kept]] = True
    return mask


def project_columns(w: np.ndarray, kept: int) -> np.ndarray:
    """Euclidean projection onto {at most ``kept`` nonzero columns}."""
    mask = column_support(w, kept)
    return np.where(mask[None, :], w, 0).astype(w.dtype, copy=False)


def project_levels(v: np.ndarray, levels) -> np.ndarray:
    """Map every entry to its nearest level; midpoint ties round toward
    the level of smaller magnitude (then toward the lower level)."""
    lv = levels.as_array() if isinstance(levels, Levels) else np.asarray(levels, np.float64)
    if lv.size == 0:
        raise InputError("levels must be nonempty")
    x = np.asarray(v, dtype=np.float64)
    idx = np.searchsorted(lv, x.ravel())
    lo = np.clip(idx - 1, 0, lv.size - 1)
    hi = np.clip(idx, 0, lv.size - 1)
    dlo = x.ravel() - lv[lo]
    dhi = lv[hi] - x.ravel()
    pick_hi = (dhi < dlo) | ((dhi == dlo) & (np.abs(lv[hi]) < np.abs(lv[lo])))
    out = np.where(pick_hi, lv[hi], lv[lo]).reshape(x.shape)
    return out.astype(np.asarray(v).dtype, copy=False)


def grid_values(bit_width: int, include_zero: bool, scale: float) -> np.ndarray:
    """Equal-spaced symmetric grid. 1 bit: {-s, +s}. Otherwise integer
    multiples of s (zero included) or half-offset multiples (zero excluded,
    keeping the spacing equal)."""
    if bit_width == 1:
        ks = np.array([-1.0, 1.0])
    elif include_zero:
        kmax = 2 ** (bit_width - 1) - 1
        ks = np.arange(-kmax, kmax + 1, dtype=np.float64)
    else:
        kmax = 2 ** (bit_width - 1)
        ks = np.arange(-kmax, kmax, dtype=np.float64) + 0.5
    return ks * scale


def make_levels(weights: np.ndarray, bit_width: int,
                include_zero: bool = True) -> Levels:
    """Fit the grid scale to ``weights`` by minimizing the Frobenius
    distance to the projected weights (golden-section search, 64 iters,
    over [eps, max|W|]). All-zero weights yield a degenerate unit grid."""
    if bit_width < 1:
        raise InputError(f"bit_width must be >= 1, got {bit_width}")
    w = np.asarray(weights, dtype=np.float64).ravel()
    hi = float(np.abs(w).max()) if w.size else 0.0
    if hi == 0.0:
        return Levels(values=tuple(grid_values(bit_width, include_zero, 1.0)),
                      scale=1.0, degenerate=True)

    def objective(scale: float) -> float:
        lv = grid_values(bit_width, include_zero, scale)
        return float(((project_levels(w, lv) - w) ** 2).sum())

    lo = 1e-6
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = objective(c), objective(d)
    for _ in range(64):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = objective(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = objective(d)
    scale = c if fc < fd else d
    return Levels(values=tuple(grid_values(bit_width, include_zero, scale)),
                  scale=float(scale), degenerate=False)


def _masked_view(v: np.ndarray, zero_mask: np.ndarray | None) -> np.ndarray:
    if zero_mask is None:
        return v
    return np.where(zero_mask, 0, v)


def project_constraint(spec: ConstraintSpec, v: np.ndarray,
                       zero_mask: np.ndarray | None = None
                       ) -> tuple[np.ndarray, Levels | None]:
    """Project ``v`` onto the constraint set, honoring positions already
    frozen at zero. Returns the projection and, for grids, the fitted levels."""
    x = _masked_view(v, zero_mask)
    if isinstance(spec, Cardinality):
        out, levels = project_cardinality(x, spec.alpha), None
    elif isinstance(spec, ColumnGroup):
        w2 = x.reshape(x.shape[0], -1)
        out, levels = project_columns(w2, spec.kept_columns).reshape(x.shape), None
    elif isinstance(spec, Levels):
        out, levels = project_levels(x, spec), spec
    elif isinstance(spec, LevelGrid):
        fit_on = x[~zero_mask] if zero_mask is not None else x
        levels = make_levels(fit_on, spec.bit_width, spec.include_zero)
        out = project_levels(x, levels)
    else:
        raise InputError(f"unknown constraint spec {type(spec).__name__}")
    if zero_mask is not None:
        out = np.where(zero_mask, 0, out)
    return out.astype(v.dtype, copy=False), levels


def satisfies_constraint(spec: ConstraintSpec, v: np.ndarray,
                         zero_mask: np.ndarray | None = None,
                         levels: Levels | None = None) -> bool:
    """Exact feasibility check (zero tolerance)."""
    x = _masked_view(v, zero_mask)
    if isinstance(spec, Cardinality):
        return int(np.count_nonzero(x)) <= spec.alpha
    if isinstance(spec, ColumnGroup):
        w2 = x.reshape(x.shape[0], -1)
        return int(np.count_nonzero(np.abs(w2).sum(axis=0))) <= spec.kept_columns
    if isinstance(spec, (Levels, LevelGrid)):
        if isinstance(spec, LevelGrid):
            if levels is None:
                raise InputError("LevelGrid feasibility needs the fitted levels")
        else:
            levels = spec
        lv = np.asarray(levels.values, dtype=x.dtype)
        vals = x[~zero_mask] if zero_mask is not None else x
        return bool(np.isin(vals, lv).all())
    raise InputError(f"unknown constraint spec {type(spec).__name__}")


def constraint_label(spec: ConstraintSpec) -> str:
    if isinstance(spec, Cardinality):
        return f"card<={spec.alpha}"
    if isinstance(spec, ColumnGroup):
        return f"cols<={spec.kept_columns}"
    if isinstance(spec, Levels):
        return f"levels[{len(spec.values)}]"
    if isinstance(spec, LevelGrid):
        return f"{spec.bit_width}-bit{'' if spec.include_zero else ' (no zero)'}"
    return type(spec).__name__
