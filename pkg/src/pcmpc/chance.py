"""Sample-average chance-constraint estimation and guaranteed tightening.

The satisfaction probability of a joint constraint set is estimated by the
fraction of uncertainty samples satisfying every constraint.  To compensate
the finite-sample estimation error, the required probability level beta is
tightened to the smallest grid value beta_cor = k / n_samples whose exact
Clopper-Pearson lower confidence bound (an inverse cumulative Beta
distribution evaluation) still reaches beta; a solution satisfying the
tightened sampled constraint is then feasible for the exact problem with
confidence 1 - alpha.
"""

from dataclasses import dataclass
from math import ceil, exp, lgamma, log

import numpy as np

from .basis import SampleMatrix, eval_basis

_CF_MAX_ITER = 400
_CF_EPS = 1e-16
_TINY = 1e-300
_INV_MAX_ITER = 200
_INV_RESIDUAL = 1e-13


class BetaInversionError(RuntimeError):
    """Inverse Beta CDF iteration failed to converge."""


class TighteningInfeasibleError(ValueError):
    """No grid level up to one satisfies the confidence requirement."""


def _betacf(a, b, x):
    """Continued fraction for the incomplete beta (modified Lentz)."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise BetaInversionError(
        f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})"
    )


def reg_inc_beta(x, a, b):
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("shape parameters must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        lgamma(a + b) - lgamma(a) - lgamma(b) + a * log(x) + b * np.log1p(-x)
    )
    front = exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def _log_beta_pdf(x, a, b):
    return (
        (a - 1.0) * log(x)
        + (b - 1.0) * np.log1p(-x)
        + lgamma(a + b)
        - lgamma(a)
        - lgamma(b)
    )


def _beta_inv_left(p, a, b):
    """Solve I_x(a, b) = p for a root located in (0, 1/2]."""
    lo, hi = 0.0, 0.5
    x = min(max(a / (a + b), 1e-14), 0.5)
    for _ in range(_INV_MAX_ITER):
        f = reg_inc_beta(x, a, b) - p
        if f > 0.0:
            hi = x
        else:
            lo = x
        if abs(f) <= _INV_RESIDUAL:
            return x
        if np.nextafter(lo, 1.0) >= hi:
            return lo if abs(reg_inc_beta(lo, a, b) - p) < abs(f) else x
        try:
            pdf = exp(_log_beta_pdf(x, a, b))
        except ValueError:
            pdf = 0.0
        x_new = x - f / pdf if pdf > 0.0 and np.isfinite(pdf) else 0.5 * (lo + hi)
        if not (lo < x_new < hi):
            x_new = 0.5 * (lo + hi)
        x = x_new
    raise BetaInversionError(
        f"beta quantile iteration did not converge (p={p}, a={a}, b={b})"
    )


def beta_inv_cdf(p, a, b):
    """Quantile of the Beta(a, b) distribution: x with I_x(a, b) = p.

    Safeguarded Newton iteration on the incomplete beta, bracketing the
    root; roots beyond one half are solved in the complement parametrization
    where double precision keeps full resolution.
    """
    if not 0.0 < p < 1.0:
        raise ValueError("probability must lie strictly between 0 and 1")
    if a <= 0 or b <= 0:
        raise ValueError("shape parameters must be positive")
    if reg_inc_beta(0.5, a, b) >= p:
        return _beta_inv_left(p, a, b)
    return 1.0 - _beta_inv_left(1.0 - p, b, a)


@dataclass(frozen=True)
class PceConstraint:
    """Scalar constraint: sum of scaled coefficient blocks dotted with the basis.

    ``g(Xt, xi) = (sum_b scale_b Xt[block_b]) . Psi(xi) + offset <= 0``.
    The offset folds into the constant coefficient since Psi_0 == 1.
    """

    terms: tuple
    offset: float = 0.0
    name: str = ""

    def coeff_vector(self, blocks):
        c = None
        for b, scale in self.terms:
            c = scale * blocks[b] if c is None else c + scale * blocks[b]
        c = np.array(c, dtype=float)
        c[0] += self.offset
        return c


@dataclass(frozen=True)
class ConstraintSet:
    """Joint constraint set over PCE coefficient blocks, with constraint times."""

    basis: object
    constraints: tuple
    times: tuple = ()

    @property
    def n_g(self):
        return len(self.constraints)

    def coeff_matrix(self, blocks):
        """(n_g, n_terms) coefficient vectors at the given block values."""
        return np.vstack([g.coeff_vector(blocks) for g in self.constraints])

    def values(self, blocks, xi):
        """Constraint values at standard points; (n, n_g) for matrix input."""
        psi = eval_basis(self.basis, xi)
        return psi @ self.coeff_matrix(blocks).T


@dataclass(frozen=True)
class SatisfactionEstimate:
    p_hat: float
    n_samples: int
    n_satisfied: int


@dataclass(frozen=True)
class TighteningResult:
    beta: float
    alpha: float
    n_samples: int
    beta_cor: float
    lower_bound_at_beta_cor: float

    @property
    def k(self):
        return int(round(self.beta_cor * self.n_samples))


def indicator(cs, blocks, xi):
    """1 when every constraint holds at the standard point xi, else 0."""
    vals = cs.values(blocks, np.asarray(xi, dtype=float))
    return int(np.all(vals <= 0.0))


def satisfaction_mask(cs, blocks, samples):
    vals = cs.values(blocks, samples.samples)
    return np.all(vals <= 0.0, axis=1)


def estimate_probability(cs, blocks, samples):
    """Sample-average estimate of the joint satisfaction probability."""
    mask = satisfaction_mask(cs, blocks, samples)
    n_sat = int(mask.sum())
    return SatisfactionEstimate(
        p_hat=n_sat / samples.n_samples,
        n_samples=samples.n_samples,
        n_satisfied=n_sat,
    )


def lower_confidence_bound(alpha, n_samples, k):
    """Exact lower confidence bound on a Bernoulli success probability.

    Evaluates 1 - betainv(1 - alpha/2, n + 1 - k, k) for k observed
    successes out of n trials.
    """
    if k <= 0:
        return 0.0
    if k >= n_samples:
        return 1.0 - beta_inv_cdf(1.0 - alpha / 2.0, 1.0, float(n_samples))
    return 1.0 - beta_inv_cdf(
        1.0 - alpha / 2.0, float(n_samples + 1 - k), float(k)
    )


def tighten(beta, alpha, n_samples):
    """Least conservative grid tightening meeting the confidence requirement.

    Scans k / n_samples upward from the first grid point above beta and
    returns the smallest level whose lower confidence bound reaches beta.
    """
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie strictly between 0 and 1")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie strictly between 0 and 1")
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    for k in range(max(int(ceil(beta * n_samples)), 1), n_samples + 1):
        lb = lower_confidence_bound(alpha, n_samples, k)
        if lb >= beta:
            return TighteningResult(
                beta=beta,
                alpha=alpha,
                n_samples=n_samples,
                beta_cor=k / n_samples,
                lower_bound_at_beta_cor=lb,
            )
    raise TighteningInfeasibleError(
        f"no satisfied count up to {n_samples} certifies beta={beta} "
        f"at confidence {1 - alpha}; increase the sample size"
    )


def tightening_curve(beta, alpha, n_range):
    """Minimal tightened level for every sample size in n_range.

    The curve is not monotone in the sample size: the integer success-count
    grid shifts as n grows.
    """
    out = []
    for n in n_range:
        t = tighten(beta, alpha, int(n))
        out.append((int(n), t.beta_cor))
    return out


@dataclass(frozen=True)
class FeasibilityReport:
    """Confidence statement for a solution of the sampled, tightened problem."""

    p_hat: float
    beta: float
    alpha: float
    beta_cor: float
    n_samples: int
    tightened_satisfied: bool
    claim: str
    revalidation_seeds: tuple
    revalidation_p_hats: tuple
    fraction_revalidations_above_beta: float

    def to_json_dict(self):
        return {
            "p_hat": self.p_hat,
            "beta": self.beta,
            "alpha": self.alpha,
            "beta_cor": self.beta_cor,
            "n_samples": self.n_samples,
            "tightened_satisfied": self.tightened_satisfied,
            "claim": self.claim,
            "revalidation_seeds": list(self.revalidation_seeds),
            "revalidation_p_hats": list(self.revalidation_p_hats),
            "fraction_revalidations_above_beta": self.fraction_revalidations_above_beta,
        }


def feasibility_report(cs, blocks, tight, samples, n_revalidations=10,
                       revalidation_seed=9173):
    """Check the tightened sampled constraint and revalidate on fresh seeds.

    A solution whose sampled satisfaction probability reaches beta_cor is
    feasible for the exact chance constraint with probability at least
    1 - alpha; fresh independent sample sets give empirical evidence beyond
    the bare statement.
    """
    est = estimate_probability(cs, blocks, samples)
    ok = est.p_hat >= tight.beta_cor
    claim = (
        f"feasible with confidence >= {1 - tight.alpha}"
        if ok
        else "tightened constraint violated"
    )
    seeds, phats = [], []
    for i in range(n_revalidations):
        seed = revalidation_seed + i
        fresh = SampleMatrix.generate(cs.basis, samples.n_samples, seed)
        seeds.append(seed)
        phats.append(estimate_probability(cs, blocks, fresh).p_hat)
    frac = float(np.mean([p >= tight.beta for p in phats])) if phats else 0.0
    return FeasibilityReport(
        p_hat=est.p_hat,
        beta=tight.beta,
        alpha=tight.alpha,
        beta_cor=tight.beta_cor,
        n_samples=samples.n_samples,
        tightened_satisfied=bool(ok),
        claim=claim,
        revalidation_seeds=tuple(seeds),
        revalidation_p_hats=tuple(phats),
        fraction_revalidations_above_beta=frac,
    )
