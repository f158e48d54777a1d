"""Fixed-point inference for single and coupled nonnegative tensor models.

Three algorithms share one sweep structure (factors updated one at a time in
declaration order, model outputs refreshed before every factor update):

``em``
    Multiplicative KL update
    ``Z <- Z * sum_v D_a(M_v * X_v / Xhat_v) / sum_v D_a(M_v)``.
``map-em``
    Same data sums with the gamma prior mode terms,
    ``Z <- ((A - 1) + Z * num) / (A/B + den)``.
``vb``
    Gamma mean-field posterior with shape ``C = A + L * sum_v D_a(M_v X_v / XhatL_v)``
    (data terms evaluated with the log-expectations ``L``) and scale
    ``D = 1 / (A/B + sum_v D_a(M_v))`` (evaluated with the means ``E``).

Here ``D_a`` is the delta contraction of :mod:`tensorvb.contraction`.
"""

from __future__ import annotations

import enum
import time
import warnings
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
from scipy.special import gammaln

from .contraction import ObservationPlan, compile_plan, gather, product, row_sums, scatter
from .errors import InvalidConfig, InvalidPrior, NonFiniteResult, NonFiniteUpdate, ShapeMismatch
from .model import ModelSpec, PriorSpec
from .special import digamma
from .tensor import Factor, SparseTensor, init_factor, validate_tensor

ALGORITHMS = ("em", "map-em", "vb")


class Termination(str, enum.Enum):
    CONVERGED = "Converged"
    MAX_ITERS = "MaxIters"


@dataclass(frozen=True)
class SolverConfig:
    algorithm: str = "em"
    max_iters: int = 200
    rel_tol: float = 1e-6
    seed: int = 0
    epsilon_guard: float = 1e-12
    trace_objective: bool = True
    balance_init: bool = True

    def __post_init__(self):
        algo = self.algorithm.lower()
        if algo not in ALGORITHMS:
            raise InvalidConfig(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        object.__setattr__(self, "algorithm", algo)
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise InvalidConfig(f"max_iters must be a positive integer, got {self.max_iters}")
        if not self.rel_tol > 0:
            raise InvalidConfig(f"rel_tol must be > 0, got {self.rel_tol}")
        if not self.epsilon_guard > 0:
            raise InvalidConfig(f"epsilon_guard must be > 0, got {self.epsilon_guard}")


@dataclass
class FitResult:
    factors: dict
    objective_trace: list
    iterations_run: int
    termination: Termination
    wall_time: list
    algorithm: str
    initial_objective: float | None = None
    config: SolverConfig | None = None

    @property
    def view(self) -> str:
        return "E" if self.algorithm == "vb" else "values"


# shared plumbing -----------------------------------------------------------

def _priors(spec: ModelSpec, priors=None) -> dict:
    priors = dict(priors or {})
    out = {}
    for f in spec.factors:
        p = priors.get(f.name, f.prior)
        if not isinstance(p, PriorSpec):
            p = PriorSpec(*p)
        out[f.name] = p.arrays(spec.factor_shape(f.name))
    return out


def _check_observations(spec: ModelSpec, observations: Mapping[str, SparseTensor]):
    for o in spec.observations:
        if o.name not in observations:
            raise ShapeMismatch(f"no data for observation {o.name!r}")
        t = observations[o.name]
        if t.indices != o.indices or t.shape != spec.observation_shape(o.name):
            raise ShapeMismatch(
                f"{o.name}: data over {t.indices}{t.shape}, model expects "
                f"{o.indices}{spec.observation_shape(o.name)}"
            )
        validate_tensor(t, spec.space)


class _Context:
    """Compiled plans plus a per-sweep cache of gathered factor cells."""

    def __init__(self, spec, observations, priors=None, eps=1e-12, plans=None):
        self.spec = spec
        self.observations = observations
        self.eps = eps
        self.priors = _priors(spec, priors)
        self.plans = plans or {
            o.name: compile_plan(spec, o.name, observations[o.name]) for o in spec.observations
        }
        self._cache = {}

    def cells(self, factors, obs, view):
        plan = self.plans[obs]
        out = {}
        missing = []
        for name in plan.factors:
            hit = self._cache.get((obs, name, view))
            if hit is None:
                missing.append(name)
            else:
                out[name] = hit
        if missing:
            fresh = gather(_Subset(plan, missing), factors, view)
            for name in missing:
                self._cache[(obs, name, view)] = fresh[name]
                out[name] = fresh[name]
        return out

    def invalidate(self, name):
        for key in [k for k in self._cache if k[1] == name]:
            del self._cache[key]

    def data_sums(self, factors, alpha, num_view, den_view):
        """Summed numerator and denominator deltas over every observation sharing ``alpha``."""
        num = den = None
        for obs in self.spec.observations_of(alpha):
            plan = self.plans[obs]
            X = self.observations[obs].values
            cells = self.cells(factors, obs, num_view)
            xhat = row_sums(product(plan, cells))
            ratio = X / np.maximum(xhat, self.eps)
            others = product(plan, cells, exclude=alpha)
            num_v = scatter(plan, alpha, others * ratio[:, None])
            if den_view != num_view:
                others = product(plan, self.cells(factors, obs, den_view), exclude=alpha)
            den_v = scatter(plan, alpha, others)
            num = num_v if num is None else num + num_v
            den = den_v if den is None else den + den_v
        return num, den


class _Subset:
    """Plan restricted to some factors, for partial gathers."""

    def __init__(self, plan: ObservationPlan, names):
        self.factors = tuple(names)
        self.access = plan.access
        self.n_latent = plan.n_latent


def _finite(name, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteUpdate(f"non-finite update for factor {name}")


# update rules --------------------------------------------------------------

def _em_update(ctx: _Context, factors, alpha):
    Z = factors[alpha].values
    num, den = ctx.data_sums(factors, alpha, "values", "values")
    with np.errstate(divide="ignore", invalid="ignore"):
        new = np.where(den > ctx.eps, Z * num / den, Z)
    _finite(alpha, new)
    return factors[alpha].replace(values=new)


def _map_em_update(ctx: _Context, factors, alpha):
    A, B = ctx.priors[alpha]
    Z = factors[alpha].values
    num, den = ctx.data_sums(factors, alpha, "values", "values")
    rate = A / B + den
    with np.errstate(divide="ignore", invalid="ignore"):
        new = np.where(rate > ctx.eps, ((A - 1) + Z * num) / rate, Z)
    if np.any(new < 0):
        warnings.warn(
            f"MAP-EM with A < 1 produced negative cells in {alpha}; clamped at 0",
            RuntimeWarning, stacklevel=3,
        )
        new = np.maximum(new, 0.0)
    _finite(alpha, new)
    return factors[alpha].replace(values=new)


def _vb_update(ctx: _Context, factors, alpha):
    A, B = ctx.priors[alpha]
    if not np.all(np.isfinite(B)):
        raise InvalidPrior(f"variational updates need a finite prior mean B for {alpha}")
    f = factors[alpha]
    if f.L is None or f.E is None:
        raise InvalidPrior(f"factor {alpha} has no variational fields; use init_vb_factor")
    num, den = ctx.data_sums(factors, alpha, "L", "E")
    C = A + f.L * num
    D = 1.0 / (A / B + den)
    E = C * D
    L = np.exp(digamma(C)) * D
    _finite(alpha, C, D, E, L)
    return f.replace(values=E, C=C, D=D, E=E, L=L)


_UPDATES = {"em": _em_update, "map-em": _map_em_update, "vb": _vb_update}


def em_step(spec, factors, observations, alpha, eps=1e-12, plans=None) -> Factor:
    """One multiplicative KL update of factor ``alpha`` over all coupled observations.

    Denominator cells at or below ``eps`` (fibres nobody observed) leave the
    factor cell unchanged; model outputs are floored at ``eps`` in the ratio.
    """
    return _em_update(_Context(spec, observations, eps=eps, plans=plans), factors, alpha)


def map_em_step(spec, factors, observations, priors, alpha, eps=1e-12, plans=None) -> Factor:
    """Gamma-prior MAP update of ``alpha``. A flat prior (A=1, B=inf) gives :func:`em_step`."""
    return _map_em_update(_Context(spec, observations, priors, eps, plans), factors, alpha)


def vb_step(spec, factors, observations, priors, alpha, eps=1e-12, plans=None) -> Factor:
    """Variational update of the gamma posterior of ``alpha`` (fields C, D, E, L)."""
    return _vb_update(_Context(spec, observations, priors, eps, plans), factors, alpha)


def pltf_em_step(spec, factors, X: SparseTensor, alpha, eps=1e-12) -> Factor:
    """Single-tensor form of :func:`em_step` for a one-observation model."""
    if len(spec.observations) != 1:
        raise ShapeMismatch("the single-tensor update needs exactly one observation")
    obs = spec.observations[0].name
    plan = compile_plan(spec, obs, X)
    cells = gather(plan, factors, "values")
    xhat = row_sums(product(plan, cells))
    others = product(plan, cells, exclude=alpha)
    num = scatter(plan, alpha, others * (X.values / np.maximum(xhat, eps))[:, None])
    den = scatter(plan, alpha, others)
    Z = factors[alpha].values
    with np.errstate(divide="ignore", invalid="ignore"):
        new = np.where(den > eps, Z * num / den, Z)
    _finite(alpha, new)
    return factors[alpha].replace(values=new)


def pltf_vb_step(spec, factors, X: SparseTensor, prior, alpha, eps=1e-12) -> Factor:
    """Single-tensor form of :func:`vb_step`."""
    if len(spec.observations) != 1:
        raise ShapeMismatch("the single-tensor update needs exactly one observation")
    obs = spec.observations[0].name
    plan = compile_plan(spec, obs, X)
    f = factors[alpha]
    A, B = (prior if isinstance(prior, PriorSpec) else PriorSpec(*prior)).arrays(f.shape)
    cells_L = gather(plan, factors, "L")
    xhat_L = row_sums(product(plan, cells_L))
    num = scatter(plan, alpha, product(plan, cells_L, exclude=alpha) * (X.values / np.maximum(xhat_L, eps))[:, None])
    den = scatter(plan, alpha, product(plan, gather(plan, factors, "E"), exclude=alpha))
    C = A + f.L * num
    D = 1.0 / (A / B + den)
    E = C * D
    L = np.exp(digamma(C)) * D
    _finite(alpha, C, D, E, L)
    return f.replace(values=E, C=C, D=D, E=E, L=L)


def sweep(spec, factors, observations, algorithm="em", priors=None, eps=1e-12, plans=None, ctx=None) -> dict:
    """Update every factor once, in declaration order; returns a new factor dict."""
    ctx = ctx or _Context(spec, observations, priors, eps, plans)
    update = _UPDATES[algorithm]
    factors = dict(factors)
    ctx._cache.clear()
    for name in spec.factor_names:
        factors[name] = update(ctx, factors, name)
        ctx.invalidate(name)
    return factors


# objectives ----------------------------------------------------------------

def _reconstructions(ctx: _Context, factors, view):
    out = {}
    for o in ctx.spec.observations:
        plan = ctx.plans[o.name]
        out[o.name] = row_sums(product(plan, gather(plan, factors, view)))
    return out


def kl_objective(spec, factors, observations, view="values", plans=None) -> float:
    """Masked generalized KL divergence summed over observations (0 log 0 = 0)."""
    ctx = _Context(spec, observations, plans=plans)
    total = 0.0
    for obs, xhat in _reconstructions(ctx, factors, view).items():
        X = observations[obs].values
        pos = X > 0
        if np.any(pos & (xhat <= 0)):
            raise NonFiniteResult(f"{obs}: positive observation with zero model output")
        with np.errstate(divide="ignore"):
            logs = np.where(pos, X * (np.log(np.where(pos, X, 1.0)) - np.log(np.where(pos, xhat, 1.0))), 0.0)
        # each cell is >= 0 exactly; clip the rounding residue at an exact fit
        total += float(np.sum(np.maximum(logs - X + xhat, 0.0)))
    if not np.isfinite(total):
        raise NonFiniteResult("non-finite KL objective")
    return total


def gamma_kl(C, D, A, theta):
    """KL(Gamma(C, scale D) || Gamma(A, scale theta)), elementwise."""
    C, D, A, theta = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (C, D, A, theta)))
    return ((C - A) * digamma(C) - gammaln(C) + gammaln(A)
            + A * (np.log(theta) - np.log(D)) + C * (D / theta - 1.0))


def elbo(spec, factors, observations, priors=None, plans=None) -> float:
    """Variational lower bound on the log evidence.

    Data term ``sum(-XhatE + X log XhatL - log X!)`` over observed cells, minus the
    KL of every factor posterior from its prior (shape A, scale B/A).
    """
    ctx = _Context(spec, observations, priors, plans=plans)
    xe = _reconstructions(ctx, factors, "E")
    xl = _reconstructions(ctx, factors, "L")
    total = 0.0
    for o in spec.observations:
        X = observations[o.name].values
        pos = X > 0
        if np.any(pos & (xl[o.name] <= 0)):
            raise NonFiniteResult(f"{o.name}: positive observation with zero model output")
        with np.errstate(divide="ignore"):
            xlog = np.where(pos, X * np.log(np.where(pos, xl[o.name], 1.0)), 0.0)
        total += float(np.sum(-xe[o.name] + xlog - gammaln(X + 1.0)))
    for name in spec.factor_names:
        A, B = ctx.priors[name]
        f = factors[name]
        total -= float(np.sum(gamma_kl(f.C, f.D, A, B / A)))
    if not np.isfinite(total):
        raise NonFiniteResult("non-finite ELBO")
    return total


def plugin_loglik(spec, factors, observations, view="E") -> float:
    """Poisson log-likelihood of the observed cells with factors fixed at ``view``."""
    ctx = _Context(spec, observations)
    total = 0.0
    for obs, xhat in _reconstructions(ctx, factors, view).items():
        X = observations[obs].values
        with np.errstate(divide="ignore"):
            xlog = np.where(X > 0, X * np.log(np.where(X > 0, xhat, 1.0)), 0.0)
        total += float(np.sum(xlog - xhat - gammaln(X + 1.0)))
    return total


# initialization and driver -------------------------------------------------

def init_vb_factor(factor: Factor, prior) -> Factor:
    """Variational fields whose mean equals the factor's current values.

    The shape starts at the prior shape ``A``; the scale is set so ``E = values``.
    """
    p = prior if isinstance(prior, PriorSpec) else PriorSpec(*prior)
    A, _ = p.arrays(factor.shape)
    C = np.array(A, dtype=np.float64)
    D = factor.values / C
    if np.any(D <= 0):
        raise InvalidPrior(f"factor {factor.name} needs strictly positive initial values")
    E = C * D
    return factor.replace(values=E, C=C, D=D, E=E, L=np.exp(digamma(C)) * D)


def init_factors(spec: ModelSpec, seed, priors=None) -> dict:
    """Gamma(A, mean B) draws for every factor, one named random stream each."""
    out = {}
    for f in spec.factors:
        prior = (priors or {}).get(f.name, f.prior)
        out[f.name] = init_factor(f.indices, spec.space, seed, prior, name=f.name)
    return out


def balance_init(spec: ModelSpec, factors, observations) -> dict:
    """Rescale factors so initial model outputs match the data in total mass.

    Each observation asks for a common multiplier ``(sum X / sum Xhat) ** (1/K)``
    over its K factors; a factor shared by several observations takes the
    geometric mean of their requests. Spreading the scale evenly keeps every
    factor's contraction large next to the prior rate ``A/B``.
    """
    want = {}
    for o in spec.observations:
        plan = compile_plan(spec, o.name, observations[o.name])
        xhat = float(np.sum(product(plan, gather(plan, factors, "values"))))
        total = float(np.sum(observations[o.name].values))
        if xhat > 0 and total > 0:
            want[o.name] = np.log(total / xhat) / len(o.factors)
    out = {}
    for f in spec.factors:
        logs = [want[o] for o in spec.observations_of(f.name) if o in want]
        out[f.name] = factors[f.name]
        if logs:
            out[f.name] = factors[f.name].replace(values=factors[f.name].values * np.exp(np.mean(logs)))
    return out


def _objective(ctx, factors, algorithm, observations, priors):
    if algorithm == "vb":
        return elbo(ctx.spec, factors, observations, priors, plans=ctx.plans)
    return kl_objective(ctx.spec, factors, observations, plans=ctx.plans)


def fit(spec: ModelSpec, observations: Mapping[str, SparseTensor], config: SolverConfig = SolverConfig(),
        priors=None, init: Mapping[str, Factor] | None = None,
        callback: Callable[[int, dict], None] | None = None) -> FitResult:
    """Run ``config.algorithm`` to convergence or ``config.max_iters`` sweeps.

    Convergence: ``|f_t - f_{t-1}| / (|f_{t-1}| + 1) < rel_tol`` on the KL objective
    (EM variants) or the ELBO (VB). With ``trace_objective=False`` no objective is
    evaluated and exactly ``max_iters`` sweeps run. Without ``init``, factors are
    drawn from their priors and, if ``config.balance_init``, rescaled with
    :func:`balance_init`. ``callback(iteration, factors)``
    runs after each sweep and is excluded from the recorded wall time.
    """
    _check_observations(spec, observations)
    priors = dict(priors or {})
    ctx = _Context(spec, observations, priors, config.epsilon_guard)
    prior_specs = {f.name: priors.get(f.name, f.prior) for f in spec.factors}
    if init is not None:
        factors = dict(init)
    else:
        factors = init_factors(spec, config.seed, prior_specs)
        if config.balance_init:
            factors = balance_init(spec, factors, observations)
    if config.algorithm == "vb":
        factors = {
            n: f if f.has_vb else init_vb_factor(f, prior_specs[n]) for n, f in factors.items()
        }
    trace, times = [], []
    prev = _objective(ctx, factors, config.algorithm, observations, priors) if config.trace_objective else None
    initial = prev
    termination = Termination.MAX_ITERS
    it = 0
    for it in range(1, config.max_iters + 1):
        t0 = time.perf_counter()
        factors = sweep(spec, factors, observations, config.algorithm, ctx=ctx)
        cur = None
        if config.trace_objective:
            cur = _objective(ctx, factors, config.algorithm, observations, priors)
            trace.append(cur)
        times.append(time.perf_counter() - t0)
        if callback is not None:
            callback(it, factors)
        if cur is not None and abs(cur - prev) / (abs(prev) + 1.0) < config.rel_tol:
            termination = Termination.CONVERGED
            break
        prev = cur
    return FitResult(factors, trace, it, termination, times, config.algorithm, initial, config)


def predict(spec: ModelSpec, result_or_factors, obs: str, support: SparseTensor, view=None) -> SparseTensor:
    """Model output at the coordinates of ``support`` (posterior means for VB fits)."""
    from .contraction import reconstruct_observed

    if isinstance(result_or_factors, FitResult):
        view = view or result_or_factors.view
        factors = result_or_factors.factors
    else:
        factors = result_or_factors
        view = view or "values"
    return reconstruct_observed(spec, factors, view, obs, support)
