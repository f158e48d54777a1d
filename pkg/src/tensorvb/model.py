"""Declarative factorization models and the model file format.

A model names an index space, a set of factors (each over a subset of the
indices) and one or more observed tensors, each listing the factors whose
product reconstructs it. Indices of an observation that are not visible are
summed over. The 0/1 coupling matrix is derived from the observation lists.

Model file syntax, one declaration per line, ``#`` starts a comment::

    index i 146
    index r 5
    factor A i,r A=0.5 B=10
    observe X1 i,j,k = A,B,C
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    InvalidPrior,
    ModelSyntaxError,
    OrphanFactor,
    UncoveredVisibleIndex,
    UnknownIndex,
    ValidationError,
)
from .tensor import IndexSpace

DEFAULT_A = 0.5
DEFAULT_B = 10.0


@dataclass(frozen=True, eq=False)
class PriorSpec:
    """Gamma prior with shape ``A`` and mean ``B`` (scale ``B/A``).

    Either field may be a scalar (broadcast over the factor) or a full array.
    ``B = inf`` is accepted and means a flat prior rate ``A/B = 0``.
    """

    A: object = DEFAULT_A
    B: object = DEFAULT_B

    def __post_init__(self):
        for k in ("A", "B"):
            v = getattr(self, k)
            if np.ndim(v) == 0:
                v = float(v)
            else:
                v = np.array(v, dtype=np.float64)
                v.setflags(write=False)
            object.__setattr__(self, k, v)
        A = np.asarray(self.A)
        B = np.asarray(self.B)
        if np.any(~(A > 0)) or np.any(~np.isfinite(A)) or np.any(~(B > 0)):
            raise InvalidPrior(f"gamma prior needs A > 0 (finite) and B > 0, got A={self.A}, B={self.B}")

    @property
    def is_scalar(self) -> bool:
        return np.ndim(self.A) == 0 and np.ndim(self.B) == 0

    def arrays(self, shape):
        return (np.broadcast_to(np.asarray(self.A, dtype=np.float64), shape),
                np.broadcast_to(np.asarray(self.B, dtype=np.float64), shape))

    def __eq__(self, other):
        if not isinstance(other, PriorSpec):
            return NotImplemented
        return bool(np.array_equal(self.A, other.A) and np.array_equal(self.B, other.B))

    __hash__ = None


@dataclass(frozen=True)
class FactorSpec:
    name: str
    indices: tuple
    prior: PriorSpec = PriorSpec()


@dataclass(frozen=True)
class ObservationSpec:
    name: str
    indices: tuple
    factors: tuple


@dataclass(frozen=True, eq=False)
class ModelSpec:
    space: IndexSpace
    factors: tuple
    observations: tuple

    def __post_init__(self):
        factors = tuple(
            f if isinstance(f, FactorSpec) else FactorSpec(*f) for f in self.factors
        )
        factors = tuple(
            FactorSpec(f.name, tuple(f.indices), f.prior) for f in factors
        )
        observations = tuple(
            o if isinstance(o, ObservationSpec) else ObservationSpec(*o) for o in self.observations
        )
        observations = tuple(
            ObservationSpec(o.name, tuple(o.indices), tuple(o.factors)) for o in observations
        )
        object.__setattr__(self, "factors", factors)
        object.__setattr__(self, "observations", observations)
        self._validate()

    def _validate(self):
        space = self.space
        names = [f.name for f in self.factors] + [o.name for o in self.observations]
        if len(set(names)) != len(names):
            raise ValidationError(f"factor and observation names must be unique: {names}")
        if not self.factors:
            raise ValidationError("a model needs at least one factor")
        if not self.observations:
            raise ValidationError("a model needs at least one observation")
        for f in self.factors:
            if len(set(f.indices)) != len(f.indices):
                raise ValidationError(f"factor {f.name} repeats an index")
            for n in f.indices:
                if n not in space:
                    raise UnknownIndex(f"factor {f.name} uses undeclared index {n!r}")
            if not f.prior.is_scalar:
                shape = space.shape(f.indices)
                for k in ("A", "B"):
                    a = getattr(f.prior, k)
                    if np.ndim(a) and np.shape(a) != shape:
                        raise InvalidPrior(
                            f"factor {f.name}: prior {k} has shape {np.shape(a)}, expected {shape}"
                        )
        by_name = {f.name: f for f in self.factors}
        used = set()
        for o in self.observations:
            if len(set(o.indices)) != len(o.indices):
                raise ValidationError(f"observation {o.name} repeats an index")
            for n in o.indices:
                if n not in space:
                    raise UnknownIndex(f"observation {o.name} uses undeclared index {n!r}")
            if not o.factors:
                raise ValidationError(f"observation {o.name} lists no factors")
            if len(set(o.factors)) != len(o.factors):
                raise ValidationError(
                    f"observation {o.name} lists a factor twice; coupling exponents must be 0 or 1"
                )
            covered = set()
            for fname in o.factors:
                if fname not in by_name:
                    raise ValidationError(f"observation {o.name} uses undeclared factor {fname!r}")
                covered.update(by_name[fname].indices)
                used.add(fname)
            missing = [n for n in o.indices if n not in covered]
            if missing:
                raise UncoveredVisibleIndex(
                    f"observation {o.name}: visible indices {missing} are carried by no factor"
                )
        orphans = [f.name for f in self.factors if f.name not in used]
        if orphans:
            raise OrphanFactor(f"factors {orphans} appear in no observation")

    @property
    def factor_names(self) -> tuple:
        return tuple(f.name for f in self.factors)

    @property
    def observation_names(self) -> tuple:
        return tuple(o.name for o in self.observations)

    def factor(self, name) -> FactorSpec:
        for f in self.factors:
            if f.name == name:
                return f
        raise ValidationError(f"unknown factor {name!r}")

    def observation(self, name) -> ObservationSpec:
        for o in self.observations:
            if o.name == name:
                return o
        raise ValidationError(f"unknown observation {name!r}")

    def coupling_matrix(self) -> np.ndarray:
        R = np.zeros((len(self.observations), len(self.factors)), dtype=np.int64)
        fidx = {f.name: k for k, f in enumerate(self.factors)}
        for n, o in enumerate(self.observations):
            for fname in o.factors:
                R[n, fidx[fname]] = 1
        return R

    def connected(self, obs, factor) -> bool:
        return factor in self.observation(obs).factors

    def observations_of(self, factor) -> tuple:
        """Observations that share ``factor``, in declaration order."""
        return tuple(o.name for o in self.observations if factor in o.factors)

    def model_indices(self, obs) -> tuple:
        """All indices touched by the factors of ``obs``, in index-space order."""
        o = self.observation(obs)
        used = set()
        for fname in o.factors:
            used.update(self.factor(fname).indices)
        return tuple(n for n in self.space.names if n in used)

    def factor_shape(self, name) -> tuple:
        return self.space.shape(self.factor(name).indices)

    def observation_shape(self, name) -> tuple:
        return self.space.shape(self.observation(name).indices)

    def with_priors(self, priors) -> "ModelSpec":
        """Copy with factor priors replaced; ``priors`` maps factor name to PriorSpec."""
        factors = tuple(
            FactorSpec(f.name, f.indices, priors.get(f.name, f.prior)) for f in self.factors
        )
        return ModelSpec(self.space, factors, self.observations)

    def with_cardinality(self, index, size) -> "ModelSpec":
        sizes = self.space.as_dict()
        if index not in sizes:
            raise UnknownIndex(f"unknown index {index!r}")
        sizes[index] = size
        return ModelSpec(IndexSpace.from_dict(sizes), self.factors, self.observations)

    def __eq__(self, other):
        if not isinstance(other, ModelSpec):
            return NotImplemented
        return (self.space == other.space and self.factors == other.factors
                and self.observations == other.observations)

    __hash__ = None


def latent_indices(spec: ModelSpec, obs) -> tuple:
    """Indices summed over when reconstructing ``obs``, in index-space order."""
    visible = set(spec.observation(obs).indices)
    return tuple(n for n in spec.model_indices(obs) if n not in visible)


_TIGHTEN = re.compile(r"\s*([,=])\s*")
_NAME = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


def _names(token, line, what):
    names = tuple(token.split(","))
    for n in names:
        if not _NAME.match(n):
            raise ModelSyntaxError(f"bad {what} name {n!r}", line)
    return names


def _number(text, line):
    try:
        v = float(text)
    except ValueError:
        raise ModelSyntaxError(f"expected a number, got {text!r}", line) from None
    if math.isnan(v):
        raise ModelSyntaxError("NaN is not a valid number", line)
    return v


def parse_model_spec(text: str, path=None) -> ModelSpec:
    """Parse model file contents into a validated :class:`ModelSpec`."""
    sizes = {}
    factors = []
    observations = []
    seen = set()
    declared_at = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = _TIGHTEN.sub(r"\1", line).split()
        kind = tokens[0]
        try:
            if kind == "index":
                if len(tokens) != 3:
                    raise ModelSyntaxError("expected: index <name> <cardinality>", lineno)
                (name,) = _names(tokens[1], lineno, "index")
                if name in sizes:
                    raise ModelSyntaxError(f"index {name!r} declared twice", lineno)
                try:
                    card = int(tokens[2])
                except ValueError:
                    raise ModelSyntaxError(f"cardinality must be an integer, got {tokens[2]!r}", lineno) from None
                if card < 1:
                    raise ModelSyntaxError(f"cardinality of {name!r} must be >= 1", lineno)
                sizes[name] = card
            elif kind == "factor":
                if len(tokens) < 3:
                    raise ModelSyntaxError("expected: factor <name> <idx,...> [A=<v>] [B=<v>]", lineno)
                (name,) = _names(tokens[1], lineno, "factor")
                idx = _names(tokens[2], lineno, "index")
                opts = {}
                for tok in tokens[3:]:
                    key, eq, val = tok.partition("=")
                    if not eq or key not in ("A", "B") or key in opts:
                        raise ModelSyntaxError(f"unexpected token {tok!r}", lineno)
                    opts[key] = _number(val, lineno)
                prior = PriorSpec(opts.get("A", DEFAULT_A), opts.get("B", DEFAULT_B))
                if name in seen:
                    raise ModelSyntaxError(f"name {name!r} declared twice", lineno)
                seen.add(name)
                declared_at[name] = lineno
                factors.append(FactorSpec(name, idx, prior))
            elif kind == "observe":
                if len(tokens) != 3 or tokens[2].count("=") != 1:
                    raise ModelSyntaxError("expected: observe <name> <idx,...> = <factor,...>", lineno)
                (name,) = _names(tokens[1], lineno, "observation")
                lhs, rhs = tokens[2].split("=")
                idx = _names(lhs, lineno, "index")
                fac = _names(rhs, lineno, "factor")
                if name in seen:
                    raise ModelSyntaxError(f"name {name!r} declared twice", lineno)
                seen.add(name)
                declared_at[name] = lineno
                observations.append(ObservationSpec(name, idx, fac))
            else:
                raise ModelSyntaxError(f"unknown declaration {kind!r}", lineno)
        except ModelSyntaxError as e:
            if path is not None and e.path is None:
                raise ModelSyntaxError(e.message, e.line, path) from None
            raise
        except InvalidPrior as e:
            raise InvalidPrior(f"{path + ':' if path else ''}{lineno}: {e}") from None
    prefix = f"{path}:" if path else ""
    for decl in (*factors, *observations):
        for n in decl.indices:
            if n not in sizes:
                raise UnknownIndex(f"{prefix}{declared_at[decl.name]}: undeclared index {n!r} in {decl.name}")
    try:
        return ModelSpec(IndexSpace.from_dict(sizes), tuple(factors), tuple(observations))
    except ValidationError as e:
        if not prefix:
            raise
        raise type(e)(f"{prefix} {e}") from None


def _fmt(v: float) -> str:
    return repr(float(v))


def serialize_model_spec(spec: ModelSpec) -> str:
    """Model file text for ``spec``; array-valued priors cannot be written."""
    lines = [f"index {n} {c}" for n, c in zip(spec.space.names, spec.space.cardinalities)]
    for f in spec.factors:
        if not f.prior.is_scalar:
            raise ValidationError(f"factor {f.name} has an array prior; not representable in a model file")
        lines.append(f"factor {f.name} {','.join(f.indices)} A={_fmt(f.prior.A)} B={_fmt(f.prior.B)}")
    for o in spec.observations:
        lines.append(f"observe {o.name} {','.join(o.indices)} = {','.join(o.factors)}")
    return "\n".join(lines) + "\n"


def load_model_spec(path) -> ModelSpec:
    path = str(path)
    return parse_model_spec(Path(path).read_text(), path=path)


def cp_model(sizes: dict, rank: int, prior: PriorSpec = PriorSpec(),
             factor_names=None, observation="X", rank_index="r") -> ModelSpec:
    """Single-tensor CP model with one factor per visible index."""
    names = list(sizes)
    factor_names = factor_names or [f"Z{k + 1}" for k in range(len(names))]
    space = IndexSpace.from_dict({**sizes, rank_index: rank})
    factors = tuple(FactorSpec(fn, (n, rank_index), prior) for fn, n in zip(factor_names, names))
    return ModelSpec(space, factors, (ObservationSpec(observation, tuple(names), tuple(factor_names)),))


def tucker_model(sizes: dict, ranks: dict, prior: PriorSpec = PriorSpec(),
                 observation="X", core="G") -> ModelSpec:
    """Single-tensor Tucker model; ``ranks`` maps each visible index to its latent index and size."""
    names = list(sizes)
    latent = {n: ranks[n] for n in names}
    space = IndexSpace.from_dict({**sizes, **{l: s for l, s in latent.values()}})
    factors = [FactorSpec(f"Z{k + 1}", (n, latent[n][0]), prior) for k, n in enumerate(names)]
    factors.append(FactorSpec(core, tuple(latent[n][0] for n in names), prior))
    return ModelSpec(space, tuple(factors),
                     (ObservationSpec(observation, tuple(names), tuple(f.name for f in factors)),))


def uclaf_model(I=146, J=168, K=5, M=146, N=14, rank=5, prior: PriorSpec = PriorSpec()) -> ModelSpec:
    """Coupled CP layout with a user-location-activity tensor and two side matrices.

    X1(i,j,k) = sum_r A(i,r) B(j,r) C(k,r), X2(i,m) = sum_r A(i,r) D(m,r),
    X3(j,n) = sum_r B(j,r) E(n,r).
    """
    space = IndexSpace.from_dict(dict(i=I, j=J, k=K, m=M, n=N, r=rank))
    factors = tuple(FactorSpec(a, (x, "r"), prior)
                    for a, x in zip("ABCDE", ("i", "j", "k", "m", "n")))
    observations = (
        ObservationSpec("X1", ("i", "j", "k"), ("A", "B", "C")),
        ObservationSpec("X2", ("i", "m"), ("A", "D")),
        ObservationSpec("X3", ("j", "n"), ("B", "E")),
    )
    return ModelSpec(space, factors, observations)
