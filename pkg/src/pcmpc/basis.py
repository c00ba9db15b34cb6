"""Orthogonal polynomial bases and truncated polynomial chaos expansions.

Supports Gaussian uncertainties (probabilists' Hermite polynomials) and
uniform uncertainties (Legendre polynomials on [-1, 1]).  Physical
parameters enter through per-dimension affine maps applied to the standard
variables, so all sampling and quadrature happens in standard coordinates.
"""

from dataclasses import dataclass
from math import comb, factorial

import numpy as np
from numpy.polynomial import hermite_e as herm
from numpy.polynomial import legendre as leg

GAUSSIAN = "gaussian"
UNIFORM = "uniform"

# index arithmetic downstream uses int32; refuse index sets beyond that
MAX_TERMS = 2**31 - 1

_SAMPLE_BLOCK = 1 << 16


class IndexSetSizeError(ValueError):
    """Raised when the truncated index set would overflow the count range."""


class CollocationRankError(np.linalg.LinAlgError):
    """Raised when the collocation regression matrix is rank deficient."""


@dataclass(frozen=True)
class MultiIndexSet:
    """Graded-lexicographically ordered multi-indices with total degree <= order."""

    n_xi: int
    order: int
    indices: np.ndarray  # (n_terms, n_xi) non-negative ints

    @property
    def n_terms(self):
        return self.indices.shape[0]

    def degrees(self):
        """Total degree of every multi-index."""
        return self.indices.sum(axis=1)


def build_index_set(n_xi, order):
    """Build the truncated multi-index set for `n_xi` variables up to `order`.

    Ordering is graded lexicographic: ascending total degree, and within a
    degree the leading components descend, e.g. for two variables and order
    two: (0,0), (1,0), (0,1), (2,0), (1,1), (0,2).
    """
    if n_xi < 1:
        raise ValueError(f"n_xi must be >= 1, got {n_xi}")
    if order < 0:
        raise ValueError(f"order must be >= 0, got {order}")
    n_terms = comb(n_xi + order, order)
    if n_terms > MAX_TERMS:
        raise IndexSetSizeError(
            f"index set with n_xi={n_xi}, order={order} has {n_terms} terms, "
            f"exceeding the supported maximum of {MAX_TERMS}"
        )
    rows = []
    idx = np.zeros(n_xi, dtype=np.int64)

    def _emit(pos, remaining):
        if pos == n_xi - 1:
            idx[pos] = remaining
            rows.append(idx.copy())
            return
        for v in range(remaining, -1, -1):
            idx[pos] = v
            _emit(pos + 1, remaining - v)
        idx[pos] = 0

    for total in range(order + 1):
        _emit(0, total)
    indices = np.vstack(rows)
    indices.setflags(write=False)
    return MultiIndexSet(n_xi=n_xi, order=order, indices=indices)


def _univariate_norm(family, degree):
    if family == GAUSSIAN:
        return float(factorial(degree))
    return 1.0 / (2 * degree + 1)


def _vander(family, x, order):
    x = np.asarray(x, dtype=float)
    if family == GAUSSIAN:
        return herm.hermevander(x, order)
    return leg.legvander(x, order)


class OrthoBasis:
    """Multivariate orthogonal basis over independent standard variables.

    Parameters
    ----------
    dims : sequence of tuples
        One entry per random variable: ``("gaussian", mean, std)`` or
        ``("uniform", lower, upper)``.  The affine map takes the standard
        variable (N(0,1) resp. U(-1,1)) to the physical range.
    order : int
        Truncation order of the expansion.
    """

    def __init__(self, dims, order):
        families = []
        shifts = []
        scales = []
        for d in dims:
            kind = d[0]
            if kind == GAUSSIAN:
                mean, std = float(d[1]), float(d[2])
                if std < 0:
                    raise ValueError("standard deviation must be non-negative")
                families.append(GAUSSIAN)
                shifts.append(mean)
                scales.append(std)
            elif kind == UNIFORM:
                lo, hi = float(d[1]), float(d[2])
                if hi < lo:
                    raise ValueError("uniform range must have lower <= upper")
                families.append(UNIFORM)
                shifts.append(0.5 * (lo + hi))
                scales.append(0.5 * (hi - lo))
            else:
                raise ValueError(f"unknown distribution family {kind!r}")
        self.families = tuple(families)
        self.shifts = np.array(shifts)
        self.scales = np.array(scales)
        self.index_set = build_index_set(len(families), order)
        degs = self.index_set.indices
        norms = np.ones(self.n_terms)
        for j, fam in enumerate(self.families):
            uni = np.array([_univariate_norm(fam, m) for m in range(order + 1)])
            norms *= uni[degs[:, j]]
        norms.setflags(write=False)
        self.norms = norms
        self.shifts.setflags(write=False)
        self.scales.setflags(write=False)

    @property
    def n_xi(self):
        return self.index_set.n_xi

    @property
    def order(self):
        return self.index_set.order

    @property
    def n_terms(self):
        return self.index_set.n_terms

    def to_physical(self, xi):
        """Map standard-variable points to physical coordinates."""
        xi = np.asarray(xi, dtype=float)
        return self.shifts + self.scales * xi

    def support(self, j):
        """Support of standard variable j: (-inf, inf) or (-1, 1)."""
        if self.families[j] == GAUSSIAN:
            return (-np.inf, np.inf)
        return (-1.0, 1.0)

    def standard_pdf(self, j, x):
        """Density of standard variable j evaluated at x."""
        x = np.asarray(x, dtype=float)
        if self.families[j] == GAUSSIAN:
            return np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return np.where((x >= -1.0) & (x <= 1.0), 0.5, 0.0)

    def standard_cdf(self, j, x):
        """CDF of standard variable j evaluated at x (vectorized, handles +-inf)."""
        from scipy.special import ndtr

        x = np.asarray(x, dtype=float)
        if self.families[j] == GAUSSIAN:
            return ndtr(x)
        return np.clip(0.5 * (x + 1.0), 0.0, 1.0)

    def to_json_dict(self):
        dims = []
        for fam, sh, sc in zip(self.families, self.shifts, self.scales):
            if fam == GAUSSIAN:
                dims.append({"family": fam, "mean": sh, "std": sc})
            else:
                dims.append({"family": fam, "lower": sh - sc, "upper": sh + sc})
        return {"dims": dims, "order": self.order}

    @classmethod
    def from_json_dict(cls, d):
        dims = []
        for e in d["dims"]:
            if e["family"] == GAUSSIAN:
                dims.append((GAUSSIAN, e["mean"], e["std"]))
            else:
                dims.append((UNIFORM, e["lower"], e["upper"]))
        return cls(dims, d["order"])

    def same_structure(self, other):
        return (
            self.families == other.families
            and self.order == other.order
            and np.array_equal(self.shifts, other.shifts)
            and np.array_equal(self.scales, other.scales)
        )


def gaussian_basis(means, stds, order):
    """Convenience constructor for all-Gaussian uncertainty vectors."""
    return OrthoBasis([(GAUSSIAN, m, s) for m, s in zip(means, stds)], order)


def eval_basis(basis, xi):
    """Evaluate all multivariate basis polynomials at standard points `xi`.

    `xi` may be a single point (n_xi,) or a matrix (n, n_xi); the result has
    one basis value per multi-index in the trailing axis.
    """
    xi = np.asarray(xi, dtype=float)
    single = xi.ndim == 1
    pts = xi[None, :] if single else xi
    if pts.shape[1] != basis.n_xi:
        raise ValueError(
            f"points have {pts.shape[1]} coordinates, basis expects {basis.n_xi}"
        )
    if not np.all(np.isfinite(pts)):
        raise ValueError("basis evaluation requires finite points")
    idx = basis.index_set.indices
    out = np.ones((pts.shape[0], basis.n_terms))
    for j, fam in enumerate(basis.families):
        vand = _vander(fam, pts[:, j], basis.order)
        out *= vand[:, idx[:, j]]
    return out[0] if single else out


@dataclass(frozen=True)
class SampleMatrix:
    """I.i.d. standard-variable draws with a reproducible seed.

    Rows are generated in fixed-size blocks, each seeded from
    ``(seed, block_index)``, so generating a partition of rows in parallel
    yields bit-identical results to serial generation.
    """

    samples: np.ndarray  # (n_samples, n_xi)
    seed: int

    @property
    def n_samples(self):
        return self.samples.shape[0]

    @property
    def n_xi(self):
        return self.samples.shape[1]

    @classmethod
    def generate(cls, basis, n_samples, seed, row_start=0, row_stop=None):
        if row_stop is None:
            row_stop = n_samples
        out = np.empty((row_stop - row_start, basis.n_xi))
        b0 = row_start // _SAMPLE_BLOCK
        b1 = (row_stop - 1) // _SAMPLE_BLOCK if row_stop > row_start else b0 - 1
        for b in range(b0, b1 + 1):
            lo = b * _SAMPLE_BLOCK
            hi = min(lo + _SAMPLE_BLOCK, n_samples)
            rng = np.random.default_rng(np.random.SeedSequence((seed, b)))
            block = np.empty((hi - lo, basis.n_xi))
            for j, fam in enumerate(basis.families):
                if fam == GAUSSIAN:
                    block[:, j] = rng.standard_normal(hi - lo)
                else:
                    block[:, j] = rng.uniform(-1.0, 1.0, hi - lo)
            s = max(row_start, lo) - lo
            e = min(row_stop, hi) - lo
            out[max(row_start, lo) - row_start : min(row_stop, hi) - row_start] = block[s:e]
        out.setflags(write=False)
        return cls(samples=out, seed=seed)

    def to_csv(self, path):
        np.savetxt(path, self.samples, delimiter=",")


@dataclass(frozen=True)
class PCExpansion:
    """Truncated polynomial chaos expansion: coefficients over an OrthoBasis."""

    basis: OrthoBasis
    coeffs: np.ndarray  # (n_terms,)

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.shape != (self.basis.n_terms,):
            raise ValueError(
                f"coefficient vector has shape {c.shape}, "
                f"basis requires ({self.basis.n_terms},)"
            )
        if not np.all(np.isfinite(c)):
            raise ValueError("expansion coefficients must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    def __call__(self, xi):
        return eval_basis(self.basis, xi) @ self.coeffs

    def to_json_dict(self):
        return {
            "basis": self.basis.to_json_dict(),
            "order": self.basis.order,
            "coeffs": self.coeffs.tolist(),
        }

    @classmethod
    def from_json_dict(cls, d):
        return cls(OrthoBasis.from_json_dict(d["basis"]), np.array(d["coeffs"]))


def sample_evaluate(expansion, samples):
    """Evaluate an expansion at every row of a SampleMatrix."""
    if samples.n_xi != expansion.basis.n_xi:
        raise ValueError(
            f"samples have {samples.n_xi} variables, "
            f"expansion basis has {expansion.basis.n_xi}"
        )
    return eval_basis(expansion.basis, samples.samples) @ expansion.coeffs


def mean(expansion):
    """Exact mean: the zeroth expansion coefficient."""
    return float(expansion.coeffs[0])


def variance(expansion):
    """Exact variance from the coefficients and basis norms."""
    c = expansion.coeffs[1:]
    return float(np.sum(c * c * expansion.basis.norms[1:]))


def central_moment(expansion, m, samples=None):
    """Central moment of order m.

    Orders one and two come directly from the coefficients; higher orders
    are estimated by sampling and require a SampleMatrix.
    """
    if m < 1:
        raise ValueError(f"moment order must be >= 1, got {m}")
    if m == 1:
        return 0.0
    if m == 2:
        return variance(expansion)
    if samples is None:
        raise ValueError("moments of order >= 3 require a SampleMatrix")
    vals = sample_evaluate(expansion, samples)
    return float(np.mean((vals - expansion.coeffs[0]) ** m))


def fit_collocation(xi_samples, values, basis):
    """Least-squares fit of expansion coefficients to sampled evaluations.

    Minimizes the residual between the expansion and the supplied values
    over the sample points, solved through orthogonal factorization.
    """
    xi = np.asarray(xi_samples, dtype=float)
    v = np.asarray(values, dtype=float)
    if xi.ndim == 1:
        xi = xi[:, None]
    if xi.shape[0] != v.shape[0]:
        raise ValueError("number of sample points and values differ")
    if xi.shape[0] < basis.n_terms:
        raise ValueError(
            f"need at least {basis.n_terms} evaluations to fit, got {xi.shape[0]}"
        )
    psi = eval_basis(basis, xi)
    coeffs, _, rank, _ = np.linalg.lstsq(psi, v, rcond=None)
    if rank < basis.n_terms:
        from scipy.linalg import qr

        _, _, piv = qr(psi, mode="economic", pivoting=True)
        deficient = sorted(piv[rank:].tolist())
        bad = [tuple(basis.index_set.indices[k]) for k in deficient]
        raise CollocationRankError(
            f"collocation matrix rank {rank} < {basis.n_terms}; "
            f"deficient basis columns {deficient} (multi-indices {bad})"
        )
    return PCExpansion(basis=basis, coeffs=coeffs)


def fit_function(fn, basis, n_samples=None, seed=0):
    """Fit a scalar function of the standard variables by collocation.

    Uses the default oversampling of twice the basis size with a fixed seed
    unless told otherwise.  `fn` receives an (n, n_xi) matrix of standard
    points and must return n values.
    """
    if n_samples is None:
        n_samples = 2 * basis.n_terms
    sm = SampleMatrix.generate(basis, n_samples, seed)
    return fit_collocation(sm.samples, fn(sm.samples), basis)
