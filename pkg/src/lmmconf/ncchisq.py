"""Non-central chi-squared CDF and quantile machinery.

The non-central chi-squared CDF is evaluated as a Poisson mixture of
central chi-squared CDFs, summed outward from the modal Poisson index
until the neglected mixture mass is below 1e-14. Central CDFs reduce to
the regularized lower incomplete gamma function, implemented here
directly (series expansion for small arguments, continued fraction for
large ones) so the module carries no external special-function
dependency.
"""

import math

_EPS = 1e-15
_TINY = 1e-300
_MAX_ITER = 10_000

# Neglected Poisson mixture mass allowed when truncating the series.
_MIX_TAIL = 1e-14


def gammainc_lower(a, x):
    """Regularized lower incomplete gamma function P(a, x).

    Series representation for x < a + 1, continued fraction for the
    complement otherwise (Numerical Recipes style).
    """
    if a <= 0.0:
        raise ValueError(f"shape parameter must be positive, got {a}")
    if x < 0.0:
        raise ValueError(f"argument must be nonnegative, got {x}")
    if x == 0.0:
        return 0.0
    if x < a + 1.0:
        return _gamma_series(a, x)
    return 1.0 - _gamma_cont_frac(a, x)


def _gamma_series(a, x):
    ap = a
    term = 1.0 / a
    total = term
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            return total * math.exp(-x + a * math.log(x) - math.lgamma(a))
    raise ArithmeticError("incomplete gamma series did not converge")


def _gamma_cont_frac(a, x):
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER + 1):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h
    raise ArithmeticError("incomplete gamma continued fraction did not converge")


def chisq_cdf(x, dof):
    """Central chi-squared CDF with dof degrees of freedom."""
    if x <= 0.0:
        return 0.0
    return gammainc_lower(0.5 * dof, 0.5 * x)


def ncchisq_cdf(x, p, xi):
    """CDF of the non-central chi-squared distribution.

    Args:
        x: Evaluation point, x >= 0.
        p: Degrees of freedom (positive integer).
        xi: Noncentrality parameter, xi >= 0.

    Returns:
        Pr(X <= x) for X ~ chi^2_p(xi).
    """
    if x < 0.0:
        raise ValueError(f"x must be nonnegative, got {x}")
    if xi < 0.0:
        raise ValueError(f"noncentrality must be nonnegative, got {xi}")
    if p < 1 or int(p) != p:
        raise ValueError(f"degrees of freedom must be a positive integer, got {p}")
    p = int(p)
    if x == 0.0:
        return 0.0
    if xi == 0.0:
        return chisq_cdf(x, p)

    half_xi = 0.5 * xi
    half_x = 0.5 * x
    k0 = int(half_xi)

    # Modal Poisson weight and central CDF, then walk outward in k.
    # P(a+1, y) = P(a, y) - t(a, y) with t(a, y) = y^a e^-y / Gamma(a+1)
    # steps the central CDF between adjacent mixture terms.
    log_w0 = k0 * math.log(half_xi) - half_xi - math.lgamma(k0 + 1.0)
    w0 = math.exp(log_w0)
    a0 = 0.5 * p + k0
    f0 = gammainc_lower(a0, half_x)
    t0 = math.exp(a0 * math.log(half_x) - half_x - math.lgamma(a0 + 1.0))

    total = w0 * f0
    mass = w0

    # Upward pass: k = k0+1, k0+2, ...
    w, f, t = w0, f0, t0
    k, a = k0, a0
    while mass < 1.0 - _MIX_TAIL:
        f -= t
        if f <= 0.0:
            f = 0.0
        k += 1
        a += 1.0
        w *= half_xi / k
        t *= half_x / a
        total += w * f
        mass += w
        if w < _TINY and k > k0 + 2:
            break

    # Downward pass: k = k0-1, ..., 0.
    w, f, t = w0, f0, t0
    a = a0
    for k in range(k0 - 1, -1, -1):
        if mass >= 1.0 - _MIX_TAIL:
            break
        w *= (k + 1) / half_xi
        t *= a / half_x
        a -= 1.0
        f += t
        if f > 1.0:
            f = 1.0
        total += w * f
        mass += w

    return min(max(total, 0.0), 1.0)


def ncchisq_quantile(prob, p, xi):
    """Quantile of the non-central chi-squared distribution.

    Inverts ncchisq_cdf by bracketing and bisection until the CDF at the
    returned point is within 1e-9 of prob.
    """
    if not 0.0 < prob < 1.0:
        raise ValueError(f"prob must lie in (0, 1), got {prob}")
    if xi < 0.0:
        raise ValueError(f"noncentrality must be nonnegative, got {xi}")

    lo = 0.0
    hi = p + xi + 20.0 * math.sqrt(2.0 * p + 4.0 * xi) + 40.0
    while ncchisq_cdf(hi, p, xi) < prob:
        hi *= 2.0

    mid = 0.5 * (lo + hi)
    for _ in range(300):
        mid = 0.5 * (lo + hi)
        c = ncchisq_cdf(mid, p, xi)
        if abs(c - prob) < 1e-9:
            return mid
        if c < prob:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-13 * (1.0 + hi):
            break
    return mid


def chisq_quantile(prob, dof):
    """Central chi-squared quantile (noncentrality zero)."""
    return ncchisq_quantile(prob, dof, 0.0)
