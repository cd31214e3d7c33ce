"""Pure-numpy mapping kernels (fallback backend).

Row-batched primitives shared with the compiled backend; both expose the same
signatures and return the index of the first guard-violating row (or -1).
Outputs for a violating row are unspecified; callers either raise (verify
mode) or rescale inputs before calling (train mode).

All reductions are per-row, so a kernel applied to a single-row batch is
bit-identical to the corresponding row of a larger batch.
"""
import numpy as np

# pole guard band for the projection denominators
GUARD = 1e-6


def _first(mask):
    idx = int(np.argmax(mask))
    return idx if bool(mask[idx]) else -1


def rownorm2(x):
    """Per-row squared euclidean norm of a 2-d array."""
    return np.einsum("ij,ij->i", x, x, optimize=False)


def inv_stereo(x, kappa):
    """Inverse stereographic projection, kappa != 0 branch.

    Returns (xi, s, t, bad): time-like coordinate, space-like rows, cached
    squared row norms, first row with |1 + kappa*t| < GUARD (or -1).
    """
    t = rownorm2(x)
    den = 1.0 + kappa * t
    bad = _first(np.abs(den) < GUARD)
    sk = np.sqrt(abs(kappa))
    with np.errstate(divide="ignore", invalid="ignore"):
        xi = (1.0 - kappa * t) / (sk * den)
        s = (2.0 / den)[:, None] * x
    return xi, s, t, bad


def lift_xi(s, sgn_neg, phi):
    """Time-like lift coordinate xi = sqrt(q*sgn_neg + phi), q = ||s||^2.

    Returns (xi, q, bad); bad is the first row with a negative radicand.
    """
    q = rownorm2(s)
    rad = sgn_neg * q + phi
    bad = _first(rad < 0.0)
    with np.errstate(invalid="ignore"):
        xi = np.sqrt(rad)
    return xi, q, bad


def stereo(xi, s, sqrt_abs_kappa):
    """Stereographic projection s / (1 + sqrt|kappa| * xi).

    Returns (out, bad); bad is the first row with |denominator| < GUARD.
    """
    den = 1.0 + sqrt_abs_kappa * xi
    bad = _first(np.abs(den) < GUARD)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (1.0 / den)[:, None] * s
    return out, bad


def inv_stereo_space_scaled(x, kappa, gamma):
    """Fused space-like part of inv_stereo at the scaled input gamma*x.

    s = 2*gamma*x / (1 + kappa*gamma^2*||x||^2); the time-like coordinate is
    not materialized. Returns (s, bad).
    """
    t = rownorm2(x)
    den = 1.0 + (kappa * gamma * gamma) * t
    bad = _first(np.abs(den) < GUARD)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = ((2.0 * gamma) / den)[:, None] * x
    return s, bad


def lift_stereo(d, sgn_neg, phi, sqrt_abs_kappa, inv_gamma):
    """Fused lift + projection + unscale.

    out = inv_gamma * d / (1 + sqrt|kappa| * sqrt(||d||^2*sgn_neg + phi)).
    Returns (out, bad); bad is the first row with a negative radicand or a
    denominator inside the guard band.
    """
    q = rownorm2(d)
    rad = sgn_neg * q + phi
    bad = _first(rad < 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        den = 1.0 + sqrt_abs_kappa * np.sqrt(rad)
        if bad < 0:
            bad = _first(np.abs(den) < GUARD)
        out = (inv_gamma / den)[:, None] * d
    return out, bad


def vjp_scale_pair(u, v, cu, cv):
    """Fused backward step out = cu*u - (<u, v>*cv)*v, all row-wise.

    Both projection VJPs reduce to this shape: a per-row dot product that
    decides how much of the second array to subtract from a scaled copy of
    the first. cu and cv are per-row coefficient vectors.
    """
    r = np.einsum("ij,ij->i", u, v, optimize=False)
    return cu[:, None] * u - (r * cv)[:, None] * v
