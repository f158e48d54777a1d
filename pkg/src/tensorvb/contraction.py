"""Sparse reconstruction and delta kernels, plus their dense reference versions.

Both sparse kernels walk the observed coordinates only. For every observed
entry they enumerate the latent index configurations (the indices of the
observation's factors that are not visible) in lexicographic order, gather
the matching factor cells and multiply. Work is O(nnz * latent * factors).

When a factor is laid out as ``(visible..., latent...)`` with the latent part
equal to the observation's full latent set (the CP case, and Tucker cores),
its cells for one entry form a contiguous row, which is gathered directly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import FactorNotConnected, NonFiniteResult, ShapeMismatch, TooLargeToMaterialize, ValidationError
from .model import ModelSpec, latent_indices
from .tensor import MAX_DENSE_CELLS, VIEWS, Factor, SparseTensor


@dataclass(frozen=True)
class FactorAccess:
    shape: tuple
    rows: np.ndarray | None  # contiguous-row gather, (nnz,)
    flat: np.ndarray         # broadcastable flat index into the factor
    scatter: np.ndarray      # flat target cell per (entry, latent config), C order


@dataclass(frozen=True)
class ObservationPlan:
    """Precomputed index arithmetic for one observation and one support."""

    obs: str
    visible: tuple
    latent: tuple
    shape: tuple
    nnz: int
    n_latent: int
    factors: tuple
    access: dict

    def check_support(self, t: SparseTensor):
        if t.indices != self.visible or t.shape != self.shape:
            raise ShapeMismatch(
                f"{self.obs}: tensor over {t.indices}{t.shape}, expected {self.visible}{self.shape}"
            )


def compile_plan(spec: ModelSpec, obs: str, support: SparseTensor) -> ObservationPlan:
    o = spec.observation(obs)
    visible = o.indices
    shape = spec.observation_shape(obs)
    if support.indices != visible or support.shape != shape:
        raise ShapeMismatch(
            f"{obs}: tensor over {support.indices}{support.shape}, expected {visible}{shape}"
        )
    latent = latent_indices(spec, obs)
    lshape = spec.space.shape(latent)
    n_latent = int(np.prod(lshape, dtype=np.int64))
    nnz = support.nnz
    grid = np.indices(lshape).reshape(len(latent), -1) if latent else np.zeros((0, 1), dtype=np.int64)
    coords = support.coords
    access = {}
    for name in o.factors:
        idx = spec.factor(name).indices
        fshape = spec.space.shape(idx)
        strides = np.cumprod((1,) + fshape[:0:-1])[::-1] if idx else ()
        flat = np.zeros((1, 1), dtype=np.int64)
        for n, stride in zip(idx, strides):
            if n in visible:
                flat = flat + coords[:, visible.index(n)][:, None] * int(stride)
            else:
                flat = flat + grid[latent.index(n)][None, :].astype(np.int64) * int(stride)
        n_vis = len(idx) - len([n for n in idx if n in latent])
        rows = None
        if tuple(idx[n_vis:]) == latent and all(n in visible for n in idx[:n_vis]):
            if n_vis:
                rows = np.ravel_multi_index(
                    tuple(coords[:, visible.index(n)] for n in idx[:n_vis]), fshape[:n_vis]
                ).astype(np.int64) if nnz else np.zeros(0, dtype=np.int64)
            else:
                rows = np.zeros(nnz, dtype=np.int64)
        scatter = np.broadcast_to(flat, (nnz, n_latent)).ravel()
        access[name] = FactorAccess(fshape, rows, flat, np.ascontiguousarray(scatter))
    return ObservationPlan(obs, visible, latent, shape, nnz, n_latent, tuple(o.factors), access)


def _field(factors: Mapping[str, Factor], name, view, shape):
    if view not in VIEWS:
        raise ValidationError(f"unknown view {view!r}")
    try:
        f = factors[name]
    except KeyError:
        raise ShapeMismatch(f"factor {name!r} missing") from None
    a = f.field(view)
    if a.shape != shape:
        raise ShapeMismatch(f"factor {name}: shape {a.shape}, expected {shape}")
    return a


def gather(plan: ObservationPlan, factors: Mapping[str, Factor], view: str) -> dict:
    """Per-factor cells for every (entry, latent configuration), broadcastable to (nnz, n_latent)."""
    out = {}
    for name in plan.factors:
        acc = plan.access[name]
        Z = _field(factors, name, view, acc.shape)
        if acc.rows is not None:
            out[name] = Z.reshape(-1, plan.n_latent)[acc.rows]
        else:
            out[name] = Z.ravel()[acc.flat]
    return out


def product(plan: ObservationPlan, cells: dict, exclude=None) -> np.ndarray:
    """Product over connected factors (declaration order), shape (nnz, n_latent)."""
    acc = None
    for name in plan.factors:
        if name == exclude:
            continue
        acc = cells[name] if acc is None else acc * cells[name]
    if acc is None:
        acc = np.ones((1, 1))
    return np.broadcast_to(acc, (plan.nnz, plan.n_latent))


def row_sums(terms: np.ndarray) -> np.ndarray:
    return terms.sum(axis=1) if terms.shape[1] != 1 else terms[:, 0].copy()


def scatter(plan: ObservationPlan, alpha: str, weights: np.ndarray) -> np.ndarray:
    """Accumulate (nnz, n_latent) weights into a dense array shaped like factor ``alpha``."""
    acc = plan.access[alpha]
    size = int(np.prod(acc.shape, dtype=np.int64))
    w = np.broadcast_to(weights, (plan.nnz, plan.n_latent)).ravel()
    return np.bincount(acc.scatter, weights=w, minlength=size).reshape(acc.shape)


def reconstruct_observed(spec: ModelSpec, factors, view: str, obs: str,
                         support: SparseTensor, plan: ObservationPlan | None = None) -> SparseTensor:
    """Model output for ``obs`` evaluated at the coordinates of ``support`` only."""
    plan = plan or compile_plan(spec, obs, support)
    plan.check_support(support)
    values = row_sums(product(plan, gather(plan, factors, view)))
    if not np.all(np.isfinite(values)):
        raise NonFiniteResult(f"non-finite reconstruction for {obs}")
    return support.with_values(values)


def delta(spec: ModelSpec, factors, view: str, obs: str, alpha: str, Q: SparseTensor,
          plan: ObservationPlan | None = None) -> np.ndarray:
    """Contract ``Q`` against every connected factor except ``alpha``.

    Each entry of ``Q`` times the product of the other factors is added into
    the cell of ``alpha`` selected by that entry and latent configuration.
    """
    if alpha not in spec.observation(obs).factors:
        raise FactorNotConnected(f"factor {alpha!r} is not connected to {obs!r}")
    plan = plan or compile_plan(spec, obs, Q)
    plan.check_support(Q)
    cells = gather(plan, factors, view)
    w = product(plan, cells, exclude=alpha) * Q.values[:, None]
    return scatter(plan, alpha, w)


# dense reference path ------------------------------------------------------

def _joint(spec: ModelSpec, obs: str) -> tuple:
    joint = spec.model_indices(obs)
    cells = int(np.prod(spec.space.shape(joint), dtype=object))
    if cells > MAX_DENSE_CELLS:
        raise TooLargeToMaterialize(f"{cells} joint cells for {obs}")
    return joint


def _expand(array, indices, joint):
    """View ``array`` (axes named by ``indices``) as broadcastable over ``joint``."""
    order = sorted(range(len(indices)), key=lambda a: joint.index(indices[a]))
    a = np.transpose(array, order)
    shape = [1] * len(joint)
    for ax in order:
        shape[joint.index(indices[ax])] = array.shape[ax]
    return a.reshape(shape)


def dense_oracle_reconstruct(spec: ModelSpec, factors, view: str, obs: str) -> np.ndarray:
    """Full (unmasked) reconstruction over every index configuration."""
    o = spec.observation(obs)
    joint = _joint(spec, obs)
    full = np.ones([1] * len(joint))
    for name in o.factors:
        f = spec.factor(name)
        full = full * _expand(_field(factors, name, view, spec.factor_shape(name)), f.indices, joint)
    full = np.broadcast_to(full, spec.space.shape(joint))
    latent = tuple(joint.index(n) for n in joint if n not in o.indices)
    out = full.sum(axis=latent) if latent else np.array(full)
    kept = [n for n in joint if n in o.indices]
    return np.transpose(out, [kept.index(n) for n in o.indices])


def dense_oracle_delta(spec: ModelSpec, factors, view: str, obs: str, alpha: str, Q_dense) -> np.ndarray:
    """Reference delta: materialize every index configuration, multiply, sum out."""
    o = spec.observation(obs)
    if alpha not in o.factors:
        raise FactorNotConnected(f"factor {alpha!r} is not connected to {obs!r}")
    Q_dense = np.asarray(Q_dense, dtype=np.float64)
    if Q_dense.shape != spec.observation_shape(obs):
        raise ShapeMismatch(f"Q has shape {Q_dense.shape}, expected {spec.observation_shape(obs)}")
    joint = _joint(spec, obs)
    full = _expand(Q_dense, o.indices, joint)
    for name in o.factors:
        if name == alpha:
            continue
        f = spec.factor(name)
        full = full * _expand(_field(factors, name, view, spec.factor_shape(name)), f.indices, joint)
    full = np.broadcast_to(full, spec.space.shape(joint))
    a_idx = spec.factor(alpha).indices
    drop = tuple(joint.index(n) for n in joint if n not in a_idx)
    out = full.sum(axis=drop) if drop else np.array(full)
    kept = [n for n in joint if n in a_idx]
    return np.transpose(out, [kept.index(n) for n in a_idx])
