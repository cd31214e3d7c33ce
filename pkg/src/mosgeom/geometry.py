"""Constant-curvature geometry kernels.

Pure functions over the three geometries: hyperbolic (kappa < 0, upper
hyperboloid sheet with the Lorentzian inner product), spherical (kappa > 0),
and the flat kappa = 0 extension. Provides the time-like lift, bidirectional
stereographic projections, hyperbolic exp/log maps, the scaled projection
pipeline, and the closed-form gradient norm of the lift coordinate.

Conventions
-----------
- sgn(kappa) = -1 for kappa < 0 and +1 otherwise; the lift uses sgn(-kappa),
  so the kappa = 0 branch takes the +1 sign.
- phi(kappa) = 1/|kappa| when |kappa| >= epsilon_zero, else 0; curvatures
  inside the dead-band behave exactly like kappa = 0.
- mode="verify": domain violations raise. mode="train": offending rows are
  rescaled onto the domain margin instead.

All functions accept a single vector or a (batch, n) array and are
deterministic: identical inputs give bit-identical outputs within a backend.
"""
from dataclasses import dataclass

import numpy as np

from . import backend

# fraction of the spherical radius 1/sqrt(kappa) admitted by the lift domain
SPHERE_MARGIN = 0.95
# pole guard band for projection denominators (mirrors the kernel guard)
GUARD = 1e-6
# series switch-over for sinh(z)/z and z/sinh(z)
SERIES_EPS = 1e-6


class GeometryError(Exception):
    """Base class for geometry-core failures."""


class DimensionMismatch(GeometryError):
    pass


class DomainError(GeometryError):
    """Input outside the guarded domain of a map.

    Carries the first offending batch row in ``row`` (or None).
    """

    def __init__(self, message, row=None):
        super().__init__(message if row is None else f"{message} (row {row})")
        self.row = row


@dataclass(frozen=True)
class Curvature:
    """Signed curvature of one geometric expert.

    kappa : curvature value (dimensionless)
    learnable : whether training may update it
    epsilon_zero : dead-band half-width; |kappa| below it is treated as 0.
        Fixed for a run. Exact-identity checks may set it to 0.
    """

    kappa: float
    learnable: bool = False
    epsilon_zero: float = 1e-6

    def __post_init__(self):
        if self.epsilon_zero < 0:
            raise ValueError("epsilon_zero must be >= 0")

    @property
    def is_flat(self):
        return abs(self.kappa) < self.epsilon_zero or self.kappa == 0.0

    @property
    def eff_kappa(self):
        """Curvature after the dead-band: 0 inside it, kappa outside."""
        return 0.0 if self.is_flat else self.kappa

    @property
    def sgn(self):
        # piecewise sign with sgn(0) = +1
        return -1.0 if self.kappa < 0 else 1.0

    @property
    def sgn_neg(self):
        """sgn(-kappa); the +1 branch applies at kappa = 0."""
        return -1.0 if self.eff_kappa > 0 else 1.0

    @property
    def phi(self):
        k = self.eff_kappa
        return 0.0 if k == 0.0 else 1.0 / abs(k)

    @property
    def sqrt_abs(self):
        return np.sqrt(abs(self.eff_kappa))


@dataclass(frozen=True)
class ScalingConfig:
    """Projection input scaling gamma (> 0, not learnable)."""

    gamma: float = 0.001

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")


@dataclass
class AmbientPoint:
    """An (n+1)-vector split into time-like xi and space-like s.

    Scalar xi with a 1-d s, or a (B,) xi with a (B, n) s for batches.
    """

    xi: object
    s: np.ndarray

    @property
    def batched(self):
        return np.ndim(self.s) == 2

    @property
    def dim(self):
        return np.shape(self.s)[-1]

    def as_vector(self):
        xi = np.asarray(self.xi, dtype=np.float64)
        s = np.asarray(self.s, dtype=np.float64)
        return np.concatenate([xi[..., None], s], axis=-1)


@dataclass
class TangentVector:
    """Ambient (n+1)-vector Lorentz-orthogonal to its base point."""

    components: np.ndarray
    base_point: AmbientPoint

    @property
    def time(self):
        return np.asarray(self.components)[..., 0]

    @property
    def space(self):
        return np.asarray(self.components)[..., 1:]


def _as2d(a):
    a = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    if a.ndim == 1:
        return a[None, :], False
    if a.ndim != 2:
        raise DimensionMismatch(f"expected vector or batch, got ndim={a.ndim}")
    return a, True


def _one(v, batched):
    return v if batched else v[0]


def _point2d(p):
    s, batched = _as2d(p.s)
    xi = np.atleast_1d(np.asarray(p.xi, dtype=np.float64))
    if xi.shape[0] != s.shape[0]:
        raise DimensionMismatch("xi/s batch mismatch")
    return xi, s, batched


def _check_mode(mode):
    if mode not in ("verify", "train"):
        raise ValueError(f"mode must be 'verify' or 'train', got {mode!r}")


def lorentz_inner(x, y):
    """Lorentzian inner product -x_t y_t + x_s . y_s."""
    xt, xs, bx = _point2d(x)
    yt, ys, by = _point2d(y)
    if xs.shape[-1] != ys.shape[-1]:
        raise DimensionMismatch(f"dims {xs.shape[-1]} vs {ys.shape[-1]}")
    val = -xt * yt + np.einsum("ij,ij->i", xs, ys, optimize=False)
    return _one(val, bx or by)


def euclid_inner(x, y):
    """Euclidean inner product x_t y_t + x_s . y_s."""
    xt, xs, bx = _point2d(x)
    yt, ys, by = _point2d(y)
    if xs.shape[-1] != ys.shape[-1]:
        raise DimensionMismatch(f"dims {xs.shape[-1]} vs {ys.shape[-1]}")
    val = xt * yt + np.einsum("ij,ij->i", xs, ys, optimize=False)
    return _one(val, bx or by)


def mos_lift(s, kappa, mode="verify"):
    """Lift a space-like vector onto the curvature-kappa manifold.

    xi = sqrt(||s||^2 * sgn(-kappa) + phi(kappa)); s passes through. For
    kappa > 0 the input must satisfy ||s|| <= 0.95/sqrt(kappa); verify mode
    raises DomainError, train mode rescales offending rows onto the margin.
    """
    _check_mode(mode)
    s2, batched = _as2d(s)
    k = kappa.eff_kappa
    K = backend.kernels
    xi, q, bad = K.lift_xi(s2, kappa.sgn_neg, kappa.phi)
    if k > 0:
        cap = (SPHERE_MARGIN * SPHERE_MARGIN) * kappa.phi
        viol = q > cap
        if viol.any():
            if mode == "verify":
                raise DomainError(
                    f"lift input outside spherical domain at kappa={k}",
                    row=int(np.argmax(viol)))
            s2 = s2.copy()
            fac = np.sqrt(cap / q[viol])
            s2[viol] *= fac[:, None]
            xi, q, bad = K.lift_xi(s2, kappa.sgn_neg, kappa.phi)
    if bad >= 0:
        raise DomainError("negative lift radicand", row=bad)
    return AmbientPoint(_one(xi, batched), _one(s2, batched))


def inv_stereo(x, kappa, mode="verify"):
    """Inverse stereographic projection of x onto the kappa-manifold.

    Non-flat: xi = (1/sqrt|kappa|)(1 - kappa||x||^2)/(1 + kappa||x||^2),
    s = 2x/(1 + kappa||x||^2). Flat branch returns (||x||; x).
    """
    _check_mode(mode)
    x2, batched = _as2d(x)
    k = kappa.eff_kappa
    K = backend.kernels
    if k == 0.0:
        xi, _q, _bad = K.lift_xi(x2, 1.0, 0.0)
        return AmbientPoint(_one(xi, batched), _one(x2, batched))
    xi, s, t, bad = K.inv_stereo(x2, k)
    if bad >= 0 and mode == "train" and k < 0:
        # pull rows in the pole's guard band back inside the ball
        x2 = x2.copy()
        den = 1.0 + k * t
        rows = np.abs(den) < K.GUARD
        cap = (SPHERE_MARGIN * SPHERE_MARGIN) / abs(k)
        fac = np.sqrt(cap / t[rows])
        x2[rows] *= fac[:, None]
        xi, s, t, bad = K.inv_stereo(x2, k)
    if bad >= 0:
        raise DomainError(f"projection pole at kappa={k}", row=bad)
    return AmbientPoint(_one(xi, batched), _one(s, batched))


def stereo(p, kappa):
    """Stereographic projection s / (1 + sqrt|kappa| * xi); flat: s."""
    xi, s, batched = _point2d(p)
    if kappa.eff_kappa == 0.0:
        return _one(s, batched)
    out, bad = backend.kernels.stereo(xi, s, kappa.sqrt_abs)
    if bad >= 0:
        raise DomainError("projection pole in stereo", row=bad)
    return _one(out, batched)


def _sinh_over_z(z):
    # sinh(z)/z with a series below the switch-over (removable singularity)
    small = z < SERIES_EPS
    safe = np.where(small, 1.0, z)
    out = np.sinh(safe) / safe
    z2 = z * z
    return np.where(small, 1.0 + z2 / 6.0 + z2 * z2 / 120.0, out)


def _z_over_sinh(z):
    small = z < SERIES_EPS
    safe = np.where(small, 1.0, z)
    out = safe / np.sinh(safe)
    z2 = z * z
    return np.where(small, 1.0 - z2 / 6.0 + 7.0 * z2 * z2 / 360.0, out)


def exp_map(x, u, kappa):
    """Hyperbolic exponential map at x (kappa < 0 only).

    cosh(theta) x + (sinh(theta)/theta) u with theta = sqrt|kappa| ||u||_L.
    """
    k = kappa.eff_kappa
    if not k < 0:
        raise DomainError("exp_map defined for kappa < 0 only")
    xt, xs, bx = _point2d(x)
    u2, bu = _as2d(u.components)
    if u2.shape[-1] != xs.shape[-1] + 1:
        raise DimensionMismatch("tangent vector must be ambient (n+1)")
    xamb = np.concatenate([xt[:, None], xs], axis=1)
    xu = -xamb[:, 0] * u2[:, 0] + np.einsum(
        "ij,ij->i", xamb[:, 1:], u2[:, 1:], optimize=False)
    scale = 1.0 + np.sqrt(np.sum(xamb * xamb, axis=1) * np.sum(u2 * u2, axis=1))
    if np.max(np.abs(xu) / scale) > 1e-6:
        raise DomainError("u is not tangent at x",
                          row=int(np.argmax(np.abs(xu) / scale)))
    uu = -u2[:, 0] ** 2 + np.einsum("ij,ij->i", u2[:, 1:], u2[:, 1:],
                                    optimize=False)
    theta = np.sqrt(abs(k) * np.maximum(uu, 0.0))
    y = np.cosh(theta)[:, None] * xamb + _sinh_over_z(theta)[:, None] * u2
    return AmbientPoint(_one(y[:, 0], bx or bu), _one(y[:, 1:], bx or bu))


def log_map(x, y, kappa):
    """Hyperbolic logarithm map: the tangent vector at x pointing to y."""
    k = kappa.eff_kappa
    if not k < 0:
        raise DomainError("log_map defined for kappa < 0 only")
    xt, xs, bx = _point2d(x)
    yt, ys, by = _point2d(y)
    if xs.shape[-1] != ys.shape[-1]:
        raise DimensionMismatch(f"dims {xs.shape[-1]} vs {ys.shape[-1]}")
    xamb = np.concatenate([xt[:, None], xs], axis=1)
    yamb = np.concatenate([yt[:, None], ys], axis=1)
    beta = k * (-xt * yt + np.einsum("ij,ij->i", xs, ys, optimize=False))
    if np.min(beta) < 1.0 - 1e-9:
        raise DomainError("acosh argument below 1",
                          row=int(np.argmin(beta)))
    dist = np.arccosh(np.maximum(beta, 1.0))
    v = _z_over_sinh(dist)[:, None] * (yamb - beta[:, None] * xamb)
    comp = _one(v, bx or by)
    return TangentVector(comp, x)


def scaled_pipeline(x, w, kappa, scaling, mode="verify"):
    """Project gamma*x, apply w to the space-like part, lift, project back.

    Returns (1/gamma) F_kappa(gamma x) where F is
    stereo . lift . (w on the space-like part) . inv_stereo; by the scale
    identity this equals F at curvature kappa*gamma^2 applied to x.
    """
    x2, batched = _as2d(x)
    g = scaling.gamma
    u = g * x2
    if kappa.eff_kappa == 0.0:
        s = u
    else:
        s = np.atleast_2d(inv_stereo(u, kappa, mode).s)
    delta = np.einsum("od,bd->bo", np.asarray(w, dtype=np.float64), s,
                      optimize=False)
    lifted = mos_lift(delta, kappa, mode)
    out = np.atleast_2d(stereo(lifted, kappa)) / g
    return _one(out, batched)


def lift_gradient_norm(u, kappa):
    """Closed-form gradient norm ||u|| / sqrt(sgn(-kappa)||u||^2 + phi).

    Globally <= 1 for kappa <= 0; for kappa > 0 requires ||u||^2 < 1/kappa.
    """
    u2, batched = _as2d(u)
    q = backend.kernels.rownorm2(u2)
    k = kappa.eff_kappa
    if k > 0:
        viol = q >= kappa.phi
        if viol.any():
            raise DomainError(
                f"gradient norm undefined outside ||u||^2 < 1/kappa at kappa={k}",
                row=int(np.argmax(viol)))
    rad = kappa.sgn_neg * q + kappa.phi
    with np.errstate(invalid="ignore", divide="ignore"):
        g = np.sqrt(q) / np.sqrt(rad)
    g = np.where(q == 0.0, 0.0, g)
    return _one(g, batched)


def constraint_residual(p, kappa):
    """Signed residual of the curvature constraint for p.

    kappa < 0: <p,p>_L - 1/kappa; kappa > 0: <p,p>_E - 1/kappa;
    flat: xi - ||s||.
    """
    xi, s, batched = _point2d(p)
    k = kappa.eff_kappa
    q = np.einsum("ij,ij->i", s, s, optimize=False)
    if k == 0.0:
        r = xi - np.sqrt(q)
    elif k < 0:
        r = (-xi * xi + q) - 1.0 / k
    else:
        r = (xi * xi + q) - 1.0 / k
    return _one(r, batched)
