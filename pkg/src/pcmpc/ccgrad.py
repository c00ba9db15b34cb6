"""Analytic sample-based gradients of the satisfaction probability.

Finite differences of a sample-average probability are useless: perturbing
the coefficients flips a discrete number of samples, so the estimate moves
in jumps.  Instead, for each sample of the non-distinguished variables the
constraint boundary is located exactly by solving the univariate polynomial
restriction along one distinguished variable; piecewise integration of that
variable's density between the sorted roots gives a smooth probability
estimate, and the implicit-function theorem turns the root locations into
exact derivatives with respect to the expansion coefficients.  Samples with
repeated or coincident roots are discarded (and counted).
"""

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import polynomial as npoly

from .basis import _vander, eval_basis

_TRIM_TOL = 1e-13
_IMAG_TOL = 1e-8


@dataclass(frozen=True)
class CcgradConfig:
    slice_var: int = 0
    root_tol: float = 1e-10
    dedup_tol: float = 1e-8


@dataclass(frozen=True)
class RootVector:
    """Sorted integration limits for one sample, bounds included."""

    limits: np.ndarray  # (n_r + 2,)
    owners: np.ndarray  # (n_r,) constraint index per interior root


@dataclass(frozen=True)
class Discard:
    reason: str


@dataclass
class GradResult:
    dp_dblocks: dict  # block index -> (n_terms,) gradient
    dp_dpi: np.ndarray
    n_discarded: int
    n_samples: int
    p_smooth: float


class AllSamplesDiscarded(RuntimeError):
    pass


def _partial_basis(basis, xi, skip):
    """Basis products over all dimensions except `skip` (n, n_terms)."""
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    idx = basis.index_set.indices
    out = np.ones((xi.shape[0], basis.n_terms))
    for j, fam in enumerate(basis.families):
        if j == skip:
            continue
        vand = _vander(fam, xi[:, j], basis.order)
        out *= vand[:, idx[:, j]]
    return out


def _slice_degree(basis, coeff, slice_var):
    m = basis.index_set.indices[:, slice_var]
    nz = np.abs(coeff) > 0.0
    return int(m[nz].max()) if nz.any() else 0


def _cheb_interp_matrix(deg):
    t = np.cos(np.pi * (2 * np.arange(deg + 1) + 1) / (2 * (deg + 1)))
    v = np.vander(t, deg + 1, increasing=True)
    return t, np.linalg.inv(v)


def slice_coefficients(cs, blocks, samples, cfg=None):
    """Monomial coefficients of every constraint restricted to the slice variable.

    For each sample of the remaining variables the constraint is a univariate
    polynomial; its coefficients are recovered by evaluation at Chebyshev
    points and interpolation.  Returns (n_g, n_samples, deg + 1), ascending.
    """
    cfg = cfg or CcgradConfig()
    basis = cs.basis
    coeffs = cs.coeff_matrix(blocks)
    deg = max(_slice_degree(basis, c, cfg.slice_var) for c in coeffs)
    if deg > 64:
        raise ValueError(f"slice polynomial degree {deg} is unreasonably high")
    xi = samples.samples if hasattr(samples, "samples") else np.atleast_2d(samples)
    psibar = _partial_basis(basis, xi, cfg.slice_var)
    t, vinv = _cheb_interp_matrix(deg)
    fam = basis.families[cfg.slice_var]
    phi = _vander(fam, t, basis.order)  # (deg+1, order+1)
    m = basis.index_set.indices[:, cfg.slice_var]
    out = np.empty((cs.n_g, xi.shape[0], deg + 1))
    for i, c in enumerate(coeffs):
        vals = np.empty((xi.shape[0], deg + 1))
        for q in range(deg + 1):
            vals[:, q] = psibar @ (c * phi[q, m])
        out[i] = vals @ vinv.T
    return out


def univariate_slice(constraint, blocks, xi_bar_sample, basis, cfg=None):
    """Restriction of one constraint to the distinguished variable (ascending)."""
    from .chance import ConstraintSet

    cs = ConstraintSet(basis=basis, constraints=(constraint,))
    sl = slice_coefficients(cs, blocks, np.atleast_2d(xi_bar_sample), cfg)
    return sl[0, 0]


def _real_roots_batched(coeff_rows, root_tol):
    """Real roots per row of ascending-coefficient polynomials.

    Rows are grouped by effective degree; quadratics use the stable closed
    form and higher degrees balanced companion-matrix eigenvalues.  Returns
    a list of root arrays and a list of failure reasons (None when fine).
    """
    n = coeff_rows.shape[0]
    scale = np.max(np.abs(coeff_rows), axis=1)
    roots = [None] * n
    reasons = [None] * n
    eff_deg = np.zeros(n, dtype=int)
    for r in range(n):
        if scale[r] == 0.0:
            reasons[r] = "identically zero slice"
            continue
        c = coeff_rows[r]
        d = coeff_rows.shape[1] - 1
        while d > 0 and abs(c[d]) <= _TRIM_TOL * scale[r]:
            d -= 1
        eff_deg[r] = d
    for d in range(1, coeff_rows.shape[1]):
        rows = np.flatnonzero((eff_deg == d) & (scale > 0.0))
        if rows.size == 0:
            continue
        c = coeff_rows[rows, : d + 1]
        if d == 1:
            rr = (-c[:, 0] / c[:, 1])[:, None].astype(complex)
        elif d == 2:
            a, b2, cc = c[:, 2], c[:, 1], c[:, 0]
            disc = b2 * b2 - 4 * a * cc
            sq = np.sqrt(disc.astype(complex))
            q = -0.5 * (b2 + np.where(b2 >= 0, 1.0, -1.0) * sq)
            with np.errstate(divide="ignore", invalid="ignore"):
                r1 = q / a
                r2 = np.where(q != 0, cc / q, (-b2 - r1 * a) / a)
            rr = np.column_stack([r1, r2])
        else:
            comp = np.zeros((rows.size, d, d), dtype=complex)
            comp[:, np.arange(1, d), np.arange(d - 1)] = 1.0
            comp[:, :, -1] = -c[:, :d] / c[:, d : d + 1]
            try:
                rr = np.linalg.eigvals(comp)
            except np.linalg.LinAlgError:
                for r in rows:
                    reasons[r] = "eigenvalue iteration failed"
                continue
        for pos, r in enumerate(rows):
            cand = rr[pos]
            real = cand[np.abs(cand.imag) <= _IMAG_TOL * (1.0 + np.abs(cand.real))].real
            if real.size:
                resid = np.abs(npoly.polyval(real, coeff_rows[r]))
                real = real[resid <= root_tol * max(scale[r], 1.0)]
            roots[r] = np.sort(real)
    for r in range(n):
        if roots[r] is None and reasons[r] is None:
            roots[r] = np.empty(0)
    return roots, reasons


def find_integration_limits(poly_coeffs, support, cfg=None):
    """Sorted integration limits of one slice polynomial on the support.

    Returns a RootVector, or a Discard when the polynomial vanishes, the
    eigenvalue iteration fails, roots repeat, or roots collide with the
    support bounds (degenerate tangencies the gradient formula cannot use).
    """
    cfg = cfg or CcgradConfig()
    coeffs = np.atleast_2d(np.asarray(poly_coeffs, dtype=float))
    roots, reasons = _real_roots_batched(coeffs, cfg.root_tol)
    if reasons[0] is not None:
        return Discard(reason=reasons[0])
    return _assemble_limits([(0, roots[0])], support, cfg.dedup_tol)


def _assemble_limits(owner_roots, support, dedup_tol):
    """Merge per-constraint roots into one sorted limit vector."""
    lo, hi = support
    vals, owners = [], []
    for owner, rr in owner_roots:
        for v in rr:
            if lo < v < hi:
                vals.append(v)
                owners.append(owner)
    vals = np.array(vals)
    owners = np.array(owners, dtype=int)
    order = np.argsort(vals, kind="stable")
    vals, owners = vals[order], owners[order]
    limits = np.concatenate([[lo], vals, [hi]])
    fin = limits[np.isfinite(limits)]
    if fin.size >= 2 and np.min(np.diff(fin)) < dedup_tol:
        return Discard(reason="repeated or coinciding roots")
    return RootVector(limits=limits, owners=owners)


def _midpoints(limits):
    with np.errstate(invalid="ignore"):
        mids = 0.5 * (limits[:-1] + limits[1:])
    if np.isinf(limits[0]):
        mids[0] = limits[1] - 1.0 if np.isfinite(limits[1]) else 0.0
    if np.isinf(limits[-1]):
        mids[-1] = limits[-2] + 1.0 if np.isfinite(limits[-2]) else 0.0
    return mids


def _prepare(cs, blocks, samples, cfg):
    """Slice, root-find and assemble limit vectors for every sample."""
    slices = slice_coefficients(cs, blocks, samples, cfg)
    n_g, n_s, _ = slices.shape
    support = cs.basis.support(cfg.slice_var)
    all_roots = []
    all_reasons = []
    for i in range(n_g):
        rr, reasons = _real_roots_batched(slices[i], cfg.root_tol)
        all_roots.append(rr)
        all_reasons.append(reasons)
    per_sample = []
    for j in range(n_s):
        reason = next((all_reasons[i][j] for i in range(n_g) if all_reasons[i][j]), None)
        if reason is not None:
            per_sample.append(Discard(reason=reason))
            continue
        rv = _assemble_limits(
            [(i, all_roots[i][j]) for i in range(n_g)], support, cfg.dedup_tol
        )
        per_sample.append(rv)
    return slices, per_sample


def _interval_masks(slices, per_sample, j):
    """Joint indicator of every interval of sample j, from the slice polys."""
    rv = per_sample[j]
    mids = _midpoints(rv.limits)
    vals = np.stack([npoly.polyval(mids, slices[i][j]) for i in range(slices.shape[0])])
    return np.all(vals <= 0.0, axis=0), mids


def smooth_probability(cs, blocks, samples, cfg=None, return_diagnostics=False):
    """Piecewise-CDF probability estimate (smooth in the coefficients).

    Averages, over samples of the remaining variables, the distinguished
    variable's probability mass of the intervals where all constraints hold.
    """
    cfg = cfg or CcgradConfig()
    slices, per_sample = _prepare(cs, blocks, samples, cfg)
    basis = cs.basis
    total, kept = 0.0, 0
    for j, rv in enumerate(per_sample):
        if isinstance(rv, Discard):
            continue
        kept += 1
        ok, _ = _interval_masks(slices, per_sample, j)
        cdf = basis.standard_cdf(cfg.slice_var, rv.limits)
        total += float(np.sum((cdf[1:] - cdf[:-1])[ok]))
    n_disc = len(per_sample) - kept
    if kept == 0:
        raise AllSamplesDiscarded("every sample had degenerate roots")
    p = total / kept
    if return_diagnostics:
        return p, {"n_discarded": n_disc, "n_samples": len(per_sample)}
    return p


def gradient(cs, blocks, samples, sens=None, cfg=None):
    """Probability gradient with respect to the coefficient blocks (and pi).

    Implements the interval-boundary derivative: each interior root moves
    with the coefficients at rate -(dg/dX)/(dg/dxi) of the constraint owning
    it, weighted by the density there and by the indicator difference of the
    two adjacent intervals.  `sens` maps block index to its (n_terms, n_pi)
    sensitivity to chain the result onto the input parametrization.
    """
    cfg = cfg or CcgradConfig()
    basis = cs.basis
    slices, per_sample = _prepare(cs, blocks, samples, cfg)
    xi = samples.samples if hasattr(samples, "samples") else np.atleast_2d(samples)
    psibar = _partial_basis(basis, xi, cfg.slice_var)
    m = basis.index_set.indices[:, cfg.slice_var]
    fam = basis.families[cfg.slice_var]

    by_owner = {i: ([], [], []) for i in range(cs.n_g)}
    total, kept = 0.0, 0
    for j, rv in enumerate(per_sample):
        if isinstance(rv, Discard):
            continue
        kept += 1
        ok, _ = _interval_masks(slices, per_sample, j)
        cdf = basis.standard_cdf(cfg.slice_var, rv.limits)
        total += float(np.sum((cdf[1:] - cdf[:-1])[ok]))
        if rv.owners.size == 0:
            continue
        pdf = basis.standard_pdf(cfg.slice_var, rv.limits[1:-1])
        for q, (r, owner) in enumerate(zip(rv.limits[1:-1], rv.owners)):
            w = pdf[q] * (float(ok[q]) - float(ok[q + 1]))
            if w == 0.0:
                continue
            dg_dxi = npoly.polyval(r, npoly.polyder(slices[owner][j]))
            vals, weights, rows = by_owner[owner]
            vals.append(r)
            weights.append(-w / dg_dxi)
            rows.append(j)
    if kept == 0:
        raise AllSamplesDiscarded("every sample had degenerate roots")

    dp_dblocks = {}
    for i, con in enumerate(cs.constraints):
        vals, weights, rows = by_owner[i]
        if not vals:
            continue
        vals = np.array(vals)
        weights = np.array(weights) / kept
        rows = np.array(rows, dtype=int)
        phi = _vander(fam, vals, basis.order)  # (n_roots, order+1)
        psi_rows = phi[:, m] * psibar[rows]  # dg/dcoeff per root
        contrib = weights @ psi_rows
        for b, scale in con.terms:
            if b in dp_dblocks:
                dp_dblocks[b] = dp_dblocks[b] + scale * contrib
            else:
                dp_dblocks[b] = scale * contrib
    for b in dp_dblocks:
        if not np.all(np.isfinite(dp_dblocks[b])):
            raise FloatingPointError("probability gradient is not finite")

    dp_dpi = None
    if sens is not None:
        n_pi = next(iter(sens.values())).shape[1]
        dp_dpi = np.zeros(n_pi)
        for b, g in dp_dblocks.items():
            if b in sens:
                dp_dpi += g @ sens[b]
    n_disc = len(per_sample) - kept
    return GradResult(
        dp_dblocks=dp_dblocks,
        dp_dpi=dp_dpi,
        n_discarded=n_disc,
        n_samples=len(per_sample),
        p_smooth=total / kept,
    )
