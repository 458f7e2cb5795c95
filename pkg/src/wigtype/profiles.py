"""Variance profiles of general Wigner-type matrices.

A profile stores the symmetric variance matrix S of an N x N random matrix
with independent centered entries, E[W_ij^2] = S_ij, together with the third
and fourth cumulants of sqrt(N) W_ij per entry class.  All stored values are
in "NS units": the dimensionless numbers N * S_ij, which the admissibility
bounds constrain to a fixed positive band.

Block-constant profiles carry a structure descriptor (block sizes, a k x k
matrix of NS values and an optional per-block diagonal excess) so that the
solvers can work in the k-dimensional reduced system instead of N dimensions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import AssumptionViolated, DegenerateInput

__all__ = ["BlockStructure", "Cumulants", "VarianceProfile"]


@dataclass(frozen=True)
class BlockStructure:
    """Block-constant descriptor: S_ij = values[a(i), a(j)]/N + diag[a(i)]/N on i==j."""

    sizes: tuple[int, ...]
    values: np.ndarray          # (k, k), NS units, symmetric
    diag: np.ndarray            # (k,), NS units added on the diagonal

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        object.__setattr__(self, "diag", np.asarray(self.diag, dtype=float))
        k = len(self.sizes)
        if self.values.shape != (k, k):
            raise DegenerateInput(f"block values must be {k}x{k}, got {self.values.shape}")
        if self.diag.shape != (k,):
            raise DegenerateInput(f"block diag must have length {k}")
        if not np.allclose(self.values, self.values.T, atol=0.0):
            raise DegenerateInput("block values must be symmetric")
        if any(s <= 0 for s in self.sizes):
            raise DegenerateInput("block sizes must be positive")

    @property
    def k(self) -> int:
        return len(self.sizes)

    def labels(self) -> np.ndarray:
        return np.repeat(np.arange(self.k), self.sizes)

    def weights(self) -> np.ndarray:
        n = sum(self.sizes)
        return np.asarray(self.sizes, dtype=float) / n

    def expand(self) -> np.ndarray:
        """Dense NS matrix this descriptor stands for."""
        lab = self.labels()
        ns = self.values[np.ix_(lab, lab)].copy()
        ns[np.diag_indices_from(ns)] += self.diag[lab]
        return ns


@dataclass(frozen=True)
class Cumulants:
    """Third/fourth cumulants of sqrt(N) W_ij per entry class.

    Arrays are (k, k) for structured profiles, (n, n) or scalars for dense
    ones; scalars broadcast over all entries.
    """

    s3: np.ndarray = field(default_factory=lambda: np.float64(0.0))
    s4: np.ndarray = field(default_factory=lambda: np.float64(0.0))

    def __post_init__(self):
        object.__setattr__(self, "s3", np.asarray(self.s3, dtype=float))
        object.__setattr__(self, "s4", np.asarray(self.s4, dtype=float))

    def as_matrix(self, which: str, shape: tuple[int, int]) -> np.ndarray:
        arr = getattr(self, which)
        if arr.ndim == 0:
            return np.full(shape, float(arr))
        if arr.shape != shape:
            raise DegenerateInput(f"cumulant {which} has shape {arr.shape}, expected {shape}")
        return arr


class VarianceProfile:
    """Variance matrix S (NS units) with optional block structure and cumulants."""

    def __init__(self, n, ns=None, structure=None, cumulants=None, name=""):
        if int(n) != n or n <= 1:
            raise DegenerateInput(f"matrix dimension must be an integer >= 2, got {n!r}")
        self.n = int(n)
        self.structure = structure
        self.cumulants = cumulants if cumulants is not None else Cumulants()
        self.name = name
        self._ns = None
        if structure is not None:
            if sum(structure.sizes) != self.n:
                raise DegenerateInput("block sizes must sum to n")
            if ns is not None:
                raise DegenerateInput("pass either a dense matrix or a structure, not both")
        else:
            if ns is None:
                raise DegenerateInput("dense profile needs the NS matrix")
            ns = np.asarray(ns, dtype=float)
            if ns.shape != (self.n, self.n):
                raise DegenerateInput(f"NS matrix must be {self.n}x{self.n}")
            if not np.allclose(ns, ns.T, atol=0.0, rtol=0.0):
                raise DegenerateInput("NS matrix must be exactly symmetric")
            self._ns = ns
        self.validate()

    # -- constructors ------------------------------------------------------

    @classmethod
    def constant(cls, n, value=1.0, diag_extra=0.0, cumulants=None, name="constant"):
        """Flat profile NS_ij = value, optionally with extra variance on the diagonal."""
        structure = BlockStructure((n,), np.array([[float(value)]]), np.array([float(diag_extra)]))
        return cls(n, structure=structure, cumulants=cumulants, name=name)

    @classmethod
    def goe(cls, n, cumulants=None, name="goe"):
        """GOE normalization: off-diagonal variance 1/N, diagonal 2/N."""
        return cls.constant(n, value=1.0, diag_extra=1.0, cumulants=cumulants, name=name)

    @classmethod
    def blocks(cls, sizes, values, diag=None, cumulants=None, name="block"):
        sizes = tuple(int(s) for s in sizes)
        diag = np.zeros(len(sizes)) if diag is None else np.asarray(diag, dtype=float)
        structure = BlockStructure(sizes, np.asarray(values, dtype=float), diag)
        return cls(sum(sizes), structure=structure, cumulants=cumulants, name=name)

    @classmethod
    def dense(cls, ns, cumulants=None, name="dense"):
        ns = np.asarray(ns, dtype=float)
        return cls(ns.shape[0], ns=ns, cumulants=cumulants, name=name)

    # -- invariants --------------------------------------------------------

    def validate(self):
        ns = self.ns
        lo, hi = float(ns.min()), float(ns.max())
        if lo <= 0.0:
            raise AssumptionViolated(f"uniform primitivity fails: min NS = {lo:g} <= 0")
        if not np.isfinite(hi):
            raise AssumptionViolated("NS matrix contains non-finite entries")
        self.ns_bounds = (lo, hi)

    # -- views -------------------------------------------------------------

    @property
    def ns(self) -> np.ndarray:
        """Dense NS matrix (built on demand for structured profiles)."""
        if self._ns is None:
            self._ns = self.structure.expand()
        return self._ns

    @property
    def s(self) -> np.ndarray:
        """Dense variance matrix S = NS / N."""
        return self.ns / self.n

    @property
    def is_structured(self) -> bool:
        return self.structure is not None

    @property
    def k(self) -> int:
        """Reduced dimension: number of blocks, or n for dense profiles."""
        return self.structure.k if self.is_structured else self.n

    def weights(self) -> np.ndarray:
        if self.is_structured:
            return self.structure.weights()
        return np.full(self.n, 1.0 / self.n)

    def labels(self) -> np.ndarray:
        if self.is_structured:
            return self.structure.labels()
        return np.arange(self.n)

    def expand_vector(self, v: np.ndarray) -> np.ndarray:
        """Lift a reduced (per-block) vector to all n indices."""
        if not self.is_structured:
            return v
        return np.asarray(v)[..., self.labels()]

    def reduced_system(self):
        """(values B, diag d, weights w) of the k-dimensional reduced system.

        The reduced self-consistent equation reads
        -1/mu_a = z + sum_b B_ab w_b mu_b + d_a mu_a / n.
        """
        if self.is_structured:
            st = self.structure
            return st.values, st.diag, st.weights()
        return self.ns, np.zeros(self.n), self.weights()

    def cumulant_matrix(self, which: str, reduced: bool = True) -> np.ndarray:
        shape = (self.k, self.k) if reduced else (self.n, self.n)
        if reduced and not self.is_structured and getattr(self.cumulants, which).ndim == 0:
            shape = (self.n, self.n)
        return self.cumulants.as_matrix(which, shape)

    # -- transforms --------------------------------------------------------

    def with_flat_shift(self, t, diag_extra=0.0, name=None):
        """Profile of S + t*J/N (+ diag_extra/N on the diagonal): the free-convolution augmentation."""
        name = name if name is not None else f"{self.name}+t{t:g}"
        if self.is_structured:
            st = self.structure
            return VarianceProfile(
                self.n,
                structure=BlockStructure(st.sizes, st.values + t, st.diag + diag_extra),
                cumulants=self.cumulants,
                name=name,
            )
        ns = self.ns + t
        ns[np.diag_indices_from(ns)] += diag_extra
        return VarianceProfile(self.n, ns=ns, cumulants=self.cumulants, name=name)

    def permuted(self, perm) -> "VarianceProfile":
        ns = self.ns[np.ix_(perm, perm)]
        return VarianceProfile(self.n, ns=ns, cumulants=self.cumulants, name=f"{self.name}-perm")

    def as_dense(self) -> "VarianceProfile":
        return VarianceProfile(self.n, ns=self.ns.copy(), cumulants=self.cumulants, name=self.name)

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        cum = {"s3": self.cumulants.s3.tolist(), "s4": self.cumulants.s4.tolist()}
        if self.is_structured:
            st = self.structure
            kind = "constant" if st.k == 1 else "block"
            return {
                "n": self.n,
                "kind": kind,
                "blocks": list(st.sizes),
                "values": st.values.tolist(),
                "diag": st.diag.tolist(),
                "cumulants": cum,
                "name": self.name,
            }
        return {
            "n": self.n,
            "kind": "dense",
            "values": self.ns.tolist(),
            "cumulants": cum,
            "name": self.name,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "VarianceProfile":
        try:
            n = doc["n"]
            kind = doc["kind"]
        except (KeyError, TypeError) as exc:
            raise DegenerateInput(f"profile spec missing field: {exc}") from exc
        cum_doc = doc.get("cumulants", {}) or {}
        cumulants = Cumulants(
            s3=np.asarray(cum_doc.get("s3", 0.0), dtype=float),
            s4=np.asarray(cum_doc.get("s4", 0.0), dtype=float),
        )
        name = doc.get("name", kind)
        if kind == "constant":
            values = np.asarray(doc.get("values", 1.0), dtype=float).reshape(-1)
            diag = np.asarray(doc.get("diag", 0.0), dtype=float).reshape(-1)
            return cls.constant(n, float(values[0]), float(diag[0]), cumulants, name)
        if kind == "block":
            sizes = doc.get("blocks")
            if sizes is None:
                raise DegenerateInput("block profile needs 'blocks' sizes")
            diag = doc.get("diag", np.zeros(len(sizes)))
            return cls.blocks(sizes, doc["values"], diag, cumulants, name)
        if kind == "dense":
            return cls.dense(np.asarray(doc["values"], dtype=float), cumulants, name)
        raise DegenerateInput(f"unknown profile kind {kind!r}")

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def from_json(cls, path) -> "VarianceProfile":
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise DegenerateInput(f"malformed profile JSON: {exc}") from exc
        return cls.from_dict(doc)

    def __repr__(self):
        kind = "block" if self.is_structured else "dense"
        return f"VarianceProfile(n={self.n}, kind={kind}, k={self.k}, name={self.name!r})"
