"""Planted low-rank data for completion and link-prediction benchmarks."""

from __future__ import annotations

import string
from dataclasses import dataclass

import numpy as np

from .errors import InvalidSpec
from .model import ModelSpec, PriorSpec, uclaf_model
from .tensor import IndexSpace, SparseTensor, rng_for


@dataclass(frozen=True)
class SynthSpec:
    """Planted CP tensor.

    ``noise_std_fraction`` scales Gaussian noise relative to the standard
    deviation of the noiseless observed values; noisy values are clamped at 0.
    With ``binarize`` the values become ``value >= threshold``; when
    ``positive_fraction`` is given the threshold is instead the quantile that
    leaves that fraction of observed cells positive.
    """

    dims: tuple
    rank: int
    observed_fraction: float = 1.0
    noise_std_fraction: float = 0.0
    seed: int = 0
    binarize: bool = False
    threshold: float = 1.0
    positive_fraction: float | None = None
    indices: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if not self.dims or any(d < 1 for d in self.dims):
            raise InvalidSpec(f"dims must be positive, got {self.dims}")
        if self.rank < 1:
            raise InvalidSpec(f"rank must be >= 1, got {self.rank}")
        if not 0 < self.observed_fraction <= 1:
            raise InvalidSpec(f"observed_fraction must lie in (0, 1], got {self.observed_fraction}")
        if self.noise_std_fraction < 0:
            raise InvalidSpec("noise_std_fraction must be >= 0")
        if self.positive_fraction is not None and not 0 < self.positive_fraction < 1:
            raise InvalidSpec("positive_fraction must lie in (0, 1)")
        if self.indices is None:
            object.__setattr__(self, "indices", tuple(string.ascii_lowercase[8:8 + len(self.dims)]))
        if len(self.indices) != len(self.dims):
            raise InvalidSpec("one index name per dimension is required")
        if self.total_cells * self.observed_fraction < 100:
            raise InvalidSpec("fewer than 100 expected observed cells")

    @property
    def total_cells(self) -> int:
        return int(np.prod(self.dims, dtype=object))

    @property
    def n_observed(self) -> int:
        return int(round(self.observed_fraction * self.total_cells))


@dataclass(frozen=True, eq=False)
class GroundTruth:
    factors: tuple
    noise_std: float
    threshold: float | None

    def values_at(self, coords) -> np.ndarray:
        coords = np.asarray(coords, dtype=np.int64)
        prod = np.ones((len(coords), self.factors[0].shape[1]))
        for m, F in enumerate(self.factors):
            prod *= F[coords[:, m]]
        return prod.sum(axis=1)


def _sample_cells(rng, dims, n, exclude_flat=None):
    total = int(np.prod(dims, dtype=object))
    if exclude_flat is None or len(exclude_flat) == 0:
        return np.sort(rng.choice(total, size=n, replace=False))
    if n > total - len(exclude_flat):
        raise InvalidSpec("not enough unobserved cells left to sample")
    picked = np.zeros(0, dtype=np.int64)
    while len(picked) < n:
        cand = rng.choice(total, size=2 * (n - len(picked)) + 16, replace=True)
        cand = cand[~np.isin(cand, exclude_flat)]
        picked = np.unique(np.concatenate([picked, cand]))
    return np.sort(rng.permutation(picked)[:n])


def _add_noise(values, rng, noise_std):
    if noise_std > 0:
        values = values + rng.normal(0.0, noise_std, size=values.shape)
    return np.maximum(values, 0.0)


def generate_cp_data(spec: SynthSpec):
    """Draw Exp(1) factors, sample the observed cells, add noise, optionally binarize.

    Returns ``(observations, truth)``; the same spec always gives the same data.
    """
    rng_truth = rng_for(spec.seed, "truth")
    factors = tuple(rng_truth.gamma(1.0, 1.0, size=(d, spec.rank)) for d in spec.dims)
    flat = _sample_cells(rng_for(spec.seed, "mask"), spec.dims, spec.n_observed)
    coords = np.stack(np.unravel_index(flat, spec.dims), axis=1).astype(np.int64)
    truth = GroundTruth(factors, 0.0, None)
    clean = truth.values_at(coords)
    noise_std = spec.noise_std_fraction * float(np.std(clean))
    values = _add_noise(clean, rng_for(spec.seed, "noise"), noise_std)
    threshold = None
    if spec.binarize:
        threshold = spec.threshold
        if spec.positive_fraction is not None:
            threshold = float(np.quantile(values, 1 - spec.positive_fraction))
        values = (values >= threshold).astype(np.float64)
    truth = GroundTruth(factors, noise_std, threshold)
    return SparseTensor(spec.indices, spec.dims, coords, values), truth


def sample_heldout(spec: SynthSpec, truth: GroundTruth, count: int, exclude: SparseTensor | None = None,
                   stream="heldout") -> SparseTensor:
    """Noisy values at ``count`` fresh cells outside ``exclude``, from the same generator."""
    rng = rng_for(spec.seed, stream)
    flat = _sample_cells(rng, spec.dims, count, None if exclude is None else exclude.flat_index())
    coords = np.stack(np.unravel_index(flat, spec.dims), axis=1).astype(np.int64)
    clean = truth.values_at(coords)
    values = _add_noise(clean, rng, truth.noise_std)
    if truth.threshold is not None:
        values = (values >= truth.threshold).astype(np.float64)
    return SparseTensor(spec.indices, spec.dims, coords, values)


def generate_coupled_data(dims=(30, 30, 8), side=(20, 10), rank=2, positive_fraction=0.2,
                          noise_std_fraction=0.2, seed=0, model_rank=None, prior=PriorSpec()):
    """Coupled layout with a binary user-location-activity tensor and two count side matrices.

    ``X1(i,j,k)`` is a binarized planted CP tensor over every cell (observed
    zeros included); ``X2(i,m)`` and ``X3(j,n)`` share the ``i`` and ``j``
    factors and are fully observed with noise. Returns ``(spec, observations, truth)``
    where ``spec`` is the matching coupled model at ``model_rank`` components.
    """
    I, J, K = dims
    M, N = side
    rng = rng_for(seed, "truth")
    A, B, C = (rng.gamma(1.0, 1.0, size=(d, rank)) for d in (I, J, K))
    D, E = (rng.gamma(1.0, 1.0, size=(d, rank)) for d in (M, N))
    noise = rng_for(seed, "noise")

    x1 = np.einsum("ir,jr,kr->ijk", A, B, C)
    x1 = x1 + noise.normal(0, noise_std_fraction * x1.std(), x1.shape)
    x1 = (x1 >= np.quantile(x1, 1 - positive_fraction)).astype(np.float64)
    sides = []
    for P, Q in ((A, D), (B, E)):
        x = P @ Q.T
        sides.append(np.maximum(x + noise.normal(0, noise_std_fraction * x.std(), x.shape), 0.0))
    spec = uclaf_model(I, J, K, M, N, rank=model_rank or rank, prior=prior)
    obs = {
        "X1": SparseTensor.from_dense(x1, ("i", "j", "k"), drop_zeros=False),
        "X2": SparseTensor.from_dense(sides[0], ("i", "m"), drop_zeros=False),
        "X3": SparseTensor.from_dense(sides[1], ("j", "n"), drop_zeros=False),
    }
    return spec, obs, {"A": A, "B": B, "C": C, "D": D, "E": E}


def single_tensor_part(spec: ModelSpec, target="X1") -> ModelSpec:
    """The sub-model made of one observation and the factors it uses."""
    o = spec.observation(target)
    used = set(o.factors)
    idx = {n for f in spec.factors if f.name in used for n in f.indices}
    space = IndexSpace.from_dict({n: c for n, c in spec.space.as_dict().items() if n in idx})
    return ModelSpec(space, tuple(f for f in spec.factors if f.name in used), (o,))
