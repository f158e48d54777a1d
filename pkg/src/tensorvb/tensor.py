"""Index spaces, sparse coordinate tensors and dense factor arrays."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DuplicateCoordinate,
    InvalidPrior,
    NegativeValue,
    OutOfRangeCoordinate,
    ShapeMismatch,
    TooLargeToMaterialize,
    UnknownIndex,
    ValidationError,
)

MAX_DENSE_CELLS = 10**8

VIEWS = ("values", "E", "L")


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def rng_for(seed, stream: str) -> np.random.Generator:
    """Independent generator for a named stream ("init", "mask", "noise", ...).

    The same ``(seed, stream)`` pair always yields the same sequence, and
    distinct stream names give statistically independent sequences.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng([int(seed), zlib.crc32(stream.encode())])


@dataclass(frozen=True)
class IndexSpace:
    names: tuple
    cardinalities: tuple

    def __post_init__(self):
        names = tuple(self.names)
        cards = tuple(int(c) for c in self.cardinalities)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "cardinalities", cards)
        if len(names) != len(cards):
            raise ValidationError("one cardinality per index name is required")
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate index names in {names}")
        for n, c in zip(names, cards):
            if c < 1:
                raise ValidationError(f"index {n!r} has cardinality {c} < 1")

    @classmethod
    def from_dict(cls, sizes: Mapping[str, int]) -> "IndexSpace":
        return cls(tuple(sizes), tuple(sizes.values()))

    def __contains__(self, name) -> bool:
        return name in self.names

    def __getitem__(self, name) -> int:
        try:
            return self.cardinalities[self.names.index(name)]
        except ValueError:
            raise UnknownIndex(f"unknown index {name!r}") from None

    def shape(self, indices: Iterable[str]) -> tuple:
        return tuple(self[n] for n in indices)

    def as_dict(self) -> dict:
        return dict(zip(self.names, self.cardinalities))


@dataclass(frozen=True, eq=False)
class SparseTensor:
    """Nonnegative coordinate-list tensor.

    The stored coordinates double as the observation mask: a coordinate is
    observed iff it is present, so an explicit ``0.0`` entry is an observed
    zero, not a missing cell. Coordinates are kept in lexicographic order.
    """

    indices: tuple
    shape: tuple
    coords: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        indices = tuple(self.indices)
        shape = tuple(int(s) for s in self.shape)
        if len(indices) != len(shape):
            raise ShapeMismatch("indices and shape differ in length")
        if len(set(indices)) != len(indices):
            raise ValidationError(f"duplicate indices {indices}")
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, len(indices))
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if len(coords) != len(values):
            raise ShapeMismatch(f"{len(coords)} coordinates but {len(values)} values")
        if len(coords):
            order = np.lexsort(coords.T[::-1])
            coords = coords[order]
            values = values[order]
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "coords", _frozen(coords, np.int64))
        object.__setattr__(self, "values", _frozen(values))
        _check_entries(self, shape)

    @classmethod
    def from_entries(cls, indices, shape, entries) -> "SparseTensor":
        """Build from ``{coordinate: value}`` or an iterable of ``(coordinate, value)`` pairs."""
        entries = list(entries.items() if isinstance(entries, Mapping) else entries)
        coords = [c for c, _ in entries]
        values = [v for _, v in entries]
        return cls(indices, shape, np.array(coords, dtype=np.int64).reshape(-1, len(indices)), values)

    @classmethod
    def from_dense(cls, array, indices, drop_zeros=True) -> "SparseTensor":
        array = np.asarray(array, dtype=np.float64)
        if drop_zeros:
            coords = np.argwhere(array != 0)
        else:
            coords = np.argwhere(np.ones(array.shape, dtype=bool))
        return cls(indices, array.shape, coords, array[tuple(coords.T)])

    @property
    def nnz(self) -> int:
        return len(self.values)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    def entries(self):
        for c, v in zip(self.coords, self.values):
            yield tuple(int(x) for x in c), float(v)

    def flat_index(self) -> np.ndarray:
        if self.nnz == 0:
            return np.zeros(0, dtype=np.int64)
        return np.ravel_multi_index(tuple(self.coords.T), self.shape)

    def mask(self) -> "SparseTensor":
        """All-ones tensor on the same support."""
        return self.with_values(np.ones(self.nnz))

    def with_values(self, values) -> "SparseTensor":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.nnz,):
            raise ShapeMismatch(f"expected {self.nnz} values, got shape {values.shape}")
        out = object.__new__(SparseTensor)
        object.__setattr__(out, "indices", self.indices)
        object.__setattr__(out, "shape", self.shape)
        object.__setattr__(out, "coords", self.coords)
        object.__setattr__(out, "values", _frozen(values))
        if np.any(values < 0) or np.any(np.isnan(values)):
            raise NegativeValue("values must be nonnegative")
        return out

    def select(self, keep) -> "SparseTensor":
        """Sub-tensor holding the entries where ``keep`` (bool array or index array) is set."""
        keep = np.asarray(keep)
        return SparseTensor(self.indices, self.shape, self.coords[keep], self.values[keep])

    def same_support(self, other: "SparseTensor") -> bool:
        return (
            self.indices == other.indices
            and self.shape == other.shape
            and self.coords.shape == other.coords.shape
            and bool(np.array_equal(self.coords, other.coords))
        )

    def scaled(self, factor: float) -> "SparseTensor":
        return self.with_values(self.values * factor)

    def __eq__(self, other):
        if not isinstance(other, SparseTensor):
            return NotImplemented
        return self.same_support(other) and bool(np.array_equal(self.values, other.values))

    __hash__ = None

    def __repr__(self):
        dims = " ".join(f"{n}={s}" for n, s in zip(self.indices, self.shape))
        return f"SparseTensor({dims}, nnz={self.nnz})"


def _check_entries(t: SparseTensor, shape: Sequence[int]):
    if t.nnz == 0:
        return
    c = t.coords
    bad = (c < 0) | (c >= np.asarray(shape, dtype=np.int64))
    if bad.any():
        row = int(np.argmax(bad.any(axis=1)))
        raise OutOfRangeCoordinate(
            f"coordinate {tuple(int(x) for x in c[row])} out of range for shape {tuple(shape)}"
        )
    dup = np.all(c[1:] == c[:-1], axis=1)
    if dup.any():
        row = int(np.argmax(dup))
        raise DuplicateCoordinate(f"duplicate coordinate {tuple(int(x) for x in c[row])}")
    if np.any(np.isnan(t.values)) or np.any(t.values < 0):
        raise NegativeValue("tensor values must be nonnegative")


def validate_tensor(t: SparseTensor, space: IndexSpace) -> None:
    """Raise if ``t`` violates any tensor invariant against ``space``."""
    for name in t.indices:
        if name not in space:
            raise UnknownIndex(f"index {name!r} not declared in the index space")
    _check_entries(t, space.shape(t.indices))
    if t.nnz and not np.all(np.isfinite(t.values)):
        raise NegativeValue("tensor values must be finite")


def _check_materializable(shape):
    cells = int(np.prod([int(s) for s in shape], dtype=object)) if len(shape) else 1
    if cells > MAX_DENSE_CELLS:
        raise TooLargeToMaterialize(f"{cells} cells exceeds the {MAX_DENSE_CELLS} cell limit")
    return cells


def to_dense(t: SparseTensor) -> np.ndarray:
    _check_materializable(t.shape)
    out = np.zeros(t.shape)
    if t.nnz:
        out[tuple(t.coords.T)] = t.values
    return out


def from_dense(array, indices, drop_zeros=True) -> SparseTensor:
    return SparseTensor.from_dense(array, indices, drop_zeros=drop_zeros)


@dataclass(frozen=True, eq=False)
class Factor:
    """Dense nonnegative factor over an ordered index set.

    In variational mode the four parallel fields are the gamma posterior
    shape ``C``, scale ``D``, mean ``E = C*D`` and geometric mean
    ``L = exp(digamma(C))*D``; ``values`` then mirrors ``E``.
    """

    name: str
    indices: tuple
    values: np.ndarray
    C: np.ndarray | None = None
    D: np.ndarray | None = None
    E: np.ndarray | None = None
    L: np.ndarray | None = None
    _vb: tuple = field(default=("C", "D", "E", "L"), init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(self.indices))
        values = _frozen(self.values)
        if values.ndim != len(self.indices):
            raise ShapeMismatch(
                f"factor {self.name}: {values.ndim}-d values for indices {self.indices}"
            )
        object.__setattr__(self, "values", values)
        for k in self._vb:
            a = getattr(self, k)
            if a is not None:
                a = _frozen(a)
                if a.shape != values.shape:
                    raise ShapeMismatch(f"factor {self.name}: field {k} has shape {a.shape}")
                object.__setattr__(self, k, a)

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def has_vb(self) -> bool:
        return self.C is not None

    def field(self, view: str) -> np.ndarray:
        if view == "values":
            return self.values
        if view not in VIEWS:
            raise ValidationError(f"unknown view {view!r}; expected one of {VIEWS}")
        a = getattr(self, view)
        if a is None:
            raise ValidationError(f"factor {self.name} has no {view} field")
        return a

    def replace(self, **changes) -> "Factor":
        kw = dict(name=self.name, indices=self.indices, values=self.values,
                  C=self.C, D=self.D, E=self.E, L=self.L)
        kw.update(changes)
        return Factor(**kw)

    def check(self, rtol=1e-12) -> None:
        """Raise if any factor invariant is broken."""
        from .special import digamma

        if np.any(~np.isfinite(self.values)) or np.any(self.values < 0):
            raise NegativeValue(f"factor {self.name} has negative or non-finite values")
        if self.D is not None and np.any(self.D <= 0):
            raise NegativeValue(f"factor {self.name} has non-positive scale D")
        if self.C is not None and self.D is not None:
            if self.E is not None and not np.allclose(self.E, self.C * self.D, rtol=rtol, atol=0):
                raise ValidationError(f"factor {self.name}: E != C*D")
            if self.L is not None and not np.allclose(
                self.L, np.exp(digamma(self.C)) * self.D, rtol=rtol, atol=0
            ):
                raise ValidationError(f"factor {self.name}: L != exp(digamma(C))*D")


def _prior_arrays(prior, shape):
    if hasattr(prior, "A"):
        A, B = prior.A, prior.B
    else:
        A, B = prior
    A = np.broadcast_to(np.asarray(A, dtype=np.float64), shape)
    B = np.broadcast_to(np.asarray(B, dtype=np.float64), shape)
    if np.any(~(A > 0)) or np.any(~(B > 0)):
        raise InvalidPrior("gamma prior requires A > 0 and B > 0")
    return A, B


def init_factor(indices, space: IndexSpace, seed, prior, name="Z") -> Factor:
    """Draw a factor from Gamma(shape A, mean B), i.e. scale B/A.

    Exact zeros (possible in floating point for small A) are redrawn so the
    result is strictly positive.
    """
    shape = space.shape(indices)
    A, B = _prior_arrays(prior, shape)
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise InvalidPrior("initialization needs finite A and B")
    rng = rng_for(seed, f"init:{name}")
    values = rng.gamma(A, B / A, size=shape)
    zero = values <= 0
    while zero.any():
        values[zero] = rng.gamma(A[zero], (B / A)[zero])
        zero = values <= 0
    return Factor(name, tuple(indices), values)
