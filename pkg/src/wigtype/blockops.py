"""Reduced algebra for block-pattern matrices.

Matrices built from a block-constant variance profile and diagonal matrices
of block-constant vectors all have the form

    M_ij = dg[a(i)] * delta_ij + sm[a(i), a(j)] / n,

where a(i) is the block label of index i.  This class closes that family
under products, inverses and traces, so all stability/kernel formulas can be
evaluated in k dimensions instead of n.  Leading array dimensions broadcast,
which lets the kernel integrators evaluate whole (z, w) grids in one call.
"""

from __future__ import annotations

import numpy as np

__all__ = ["BlockMat", "profile_smat"]


class BlockMat:
    """M = diag(dg expanded) + pattern(sm)/n on a fixed block structure."""

    __slots__ = ("dg", "sm", "w", "n")

    def __init__(self, dg, sm, w, n):
        self.dg = np.asarray(dg)        # (..., k)
        self.sm = np.asarray(sm)        # (..., k, k)
        self.w = np.asarray(w)          # (k,) block weights, sum 1
        self.n = n

    @classmethod
    def diag(cls, vec, w, n):
        """Diagonal matrix with block-constant diagonal `vec` (..., k)."""
        vec = np.asarray(vec)
        k = w.shape[0]
        sm = np.zeros(vec.shape + (k,), dtype=vec.dtype)
        return cls(vec, sm, w, n)

    @classmethod
    def identity(cls, w, n, dtype=complex):
        k = w.shape[0]
        return cls(np.ones(k, dtype=dtype), np.zeros((k, k), dtype=dtype), w, n)

    def _like(self, dg, sm):
        return BlockMat(dg, sm, self.w, self.n)

    # -- ring operations ---------------------------------------------------

    def __add__(self, other):
        return self._like(self.dg + other.dg, self.sm + other.sm)

    def __sub__(self, other):
        return self._like(self.dg - other.dg, self.sm - other.sm)

    def __rmul__(self, c):
        return self._like(c * self.dg, c * self.sm)

    def __neg__(self):
        return self._like(-self.dg, -self.sm)

    def __matmul__(self, other):
        """(dg1, sm1) @ (dg2, sm2); weights contract the inner pattern product."""
        dg = self.dg * other.dg
        sm = (
            self.dg[..., :, None] * other.sm
            + self.sm * other.dg[..., None, :]
            + np.einsum("...ab,b,...bc->...ac", self.sm, self.w, other.sm)
        )
        return self._like(dg, sm)

    def inv(self):
        """Inverse: (D, sm)^{-1} = (D^{-1}, -(D + sm W)^{-1} sm D^{-1})."""
        k = self.w.shape[0]
        inv_dg = 1.0 / self.dg
        d_plus = self.sm * self.w  # columns scaled by w_b
        d_plus = d_plus.astype(np.result_type(d_plus, self.dg), copy=True)
        idx = np.arange(k)
        d_plus[..., idx, idx] += self.dg
        rhs = self.sm * inv_dg[..., None, :]
        sol = np.linalg.solve(d_plus, rhs)
        return self._like(inv_dg, -sol)

    # -- reductions --------------------------------------------------------

    def trace(self):
        """Full n-dimensional trace."""
        diag_part = self.n * np.sum(self.w * self.dg, axis=-1)
        sm_diag = np.einsum("...aa->...a", self.sm)
        return diag_part + np.sum(self.w * sm_diag, axis=-1)

    def diag_entries(self):
        """Block-constant vector of diagonal entries M_ii, shape (..., k)."""
        return self.dg + np.einsum("...aa->...a", self.sm) / self.n

    def entry(self, a, b, same_index=False):
        """Matrix element for i in block a, j in block b (i != j unless same_index)."""
        val = self.sm[..., a, b] / self.n
        if same_index:
            val = val + self.dg[..., a]
        return val

    def apply_blockvec(self, u):
        """Action on a block-constant vector u (..., k)."""
        return self.dg * u + np.einsum("...ab,b,...b->...a", self.sm, self.w, u)

    def dense(self, labels):
        """Expand to a dense n x n matrix (no leading broadcast dims)."""
        if self.dg.ndim != 1:
            raise ValueError("dense() only supports unbatched matrices")
        m = self.sm[np.ix_(labels, labels)] / self.n
        m[np.diag_indices_from(m)] += self.dg[labels]
        return m


def profile_smat(profile, dtype=complex) -> BlockMat:
    """The variance matrix S of a structured profile as a BlockMat."""
    values, diag, w = profile.reduced_system()
    return BlockMat(
        (diag / profile.n).astype(dtype),
        values.astype(dtype),
        w,
        profile.n,
    )
