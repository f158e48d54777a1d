"""Random small model instances shared by several test modules."""

import numpy as np

from tensorvb import IndexSpace, ModelSpec, PriorSpec, SparseTensor
from tensorvb.model import FactorSpec, ObservationSpec
from tensorvb.solvers import init_factors, init_vb_factor


def coupled_spec(I, J, K, Mdim, R, prior=PriorSpec(0.5, 10.0)):
    """X1(i,j,k) = A B C and X2(i,m) = A D, sharing A."""
    space = IndexSpace.from_dict(dict(i=I, j=J, k=K, m=Mdim, r=R))
    factors = tuple(FactorSpec(n, (x, "r"), prior) for n, x in zip("ABCD", "ijkm"))
    obs = (ObservationSpec("X1", ("i", "j", "k"), ("A", "B", "C")),
           ObservationSpec("X2", ("i", "m"), ("A", "D")))
    return ModelSpec(space, factors, obs)


SIZES = {
    "small": ((2, 7), (2, 6), (2, 5), (2, 6)),
    "medium": ((6, 11), (5, 10), (4, 7), (4, 9)),
}


def random_coupled_instance(seed, scale=5.0, size="small"):
    """Coupled model with Poisson data from a planted model, 20-80% of cells missing.

    ``small`` instances stay within 6x5x4; ``medium`` ones are large enough
    that a rank-3 model cannot interpolate the noisy counts.

    Returns ``(spec, observations, dense, masks)`` where ``dense`` and
    ``masks`` hold the full arrays for the reference implementations.
    """
    rng = np.random.default_rng(seed)
    I, J, K, Mdim = (rng.integers(lo, hi) for lo, hi in SIZES[size])
    R = rng.integers(1, 4)
    spec = coupled_spec(I, J, K, Mdim, R)
    truth = {n: rng.gamma(1.0, 1.0, spec.factor_shape(n)) for n in spec.factor_names}
    full = {"X1": np.einsum("ir,jr,kr->ijk", truth["A"], truth["B"], truth["C"]),
            "X2": truth["A"] @ truth["D"].T}
    obs, dense, masks = {}, {}, {}
    for name, mean in full.items():
        X = rng.poisson(scale * mean).astype(float)
        missing = rng.uniform(0.2, 0.8)
        M = rng.random(X.shape) >= missing
        if not M.any():
            M.flat[0] = True
        dense[name], masks[name] = X * M, M
        coords = np.argwhere(M)
        idx = spec.observation(name).indices
        obs[name] = SparseTensor(idx, X.shape, coords, X[M])
    return spec, obs, dense, masks


def vb_init(spec, seed):
    return {n: init_vb_factor(f, spec.factor(n).prior) for n, f in init_factors(spec, seed).items()}


def prior_arrays(spec):
    return {f.name: f.prior.arrays(spec.factor_shape(f.name)) for f in spec.factors}
