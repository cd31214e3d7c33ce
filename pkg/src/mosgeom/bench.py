"""Timing and memory comparison: unified projection chain vs exp/log chain.

Both pipelines apply `depth` low-rank linear layers to a batch, each layer
transporting the map through hyperbolic space (kappa < 0):

  unified   x -> scaled inverse projection -> s -> B A s -> lift ->
            projection -> x'          (fused kernels, coordinates stay n-dim)
  exp/log   p -> log at the origin -> tangent vector (ambient, zero time
            row) -> B A v -> exp at the origin -> p'   (the standard
            prior-work composition; carries (n+1)-dim ambient vectors and
            pays acosh/cosh/sinh per layer)

Backward passes are hand-written vector-Jacobian chains consuming caches
recorded by an untimed forward, so the timed region contains exactly the
gradient arithmetic. Memory is analytic: bytes of the array blocks each
layer writes, from shapes and itemsize. Before any timing,
both pipelines are run with identity factors in double precision and must
reproduce their input to 1e-8.
"""
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import backend

PHASES = ("forward", "backward")
METHODS = ("mos", "explog")
BASELINE_NOTE = ("exp/log baseline: general-base-point log-map evaluated at "
                 "the manifold origin (full Lorentz inner products over "
                 "ambient vectors, broadcast against the base point, "
                 "clamped acosh/sinh/cosh), linear map on the tangent "
                 "vector carried as an ambient array with a zero time row, "
                 "general exp-map back at the origin, repeated per layer")


class BenchError(Exception):
    pass


@dataclass
class BenchConfig:
    dims: tuple
    depths: tuple
    batch: int = 64
    repeats: int = 7
    warmup_iters: int = 2
    precision: str = "single"
    rank: int = 8
    kappa: float = -1.0
    gamma: float = 0.001
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.depths = tuple(int(d) for d in self.depths)
        if not self.dims or not self.depths:
            raise BenchError("dims and depths must be non-empty")
        if self.repeats < 5:
            raise BenchError("repeats must be >= 5")
        if self.warmup_iters < 1:
            raise BenchError("warmup_iters must be >= 1")
        if self.precision not in ("single", "double"):
            raise BenchError("precision must be single or double")
        if self.kappa >= 0:
            raise BenchError("the exp/log baseline needs kappa < 0")

    @property
    def dtype(self):
        return np.float32 if self.precision == "single" else np.float64


@dataclass
class BenchRow:
    method: str
    phase: str
    dim: int
    depth: int
    median_us: float
    min_us: float
    bytes: int


@dataclass
class BenchReport:
    rows: list
    totals: dict            # method -> total median us across the sweep
    speedups: dict          # "dimxdepth" -> explog/mos total-time ratio
    identity_error: float
    repeats_used: int
    auto_increased: bool
    backend: str
    precision: str
    batch: int
    note: str = BASELINE_NOTE

    def to_json(self):
        doc = {"note": self.note, "backend": self.backend,
               "precision": self.precision, "batch": self.batch,
               "identity_error": self.identity_error,
               "repeats_used": self.repeats_used,
               "auto_increased": self.auto_increased,
               "rows": [vars(r) for r in self.rows],
               "totals": self.totals, "speedups": self.speedups}
        return json.dumps(doc, indent=2)


# ------------------------------------------------------------ mos pipeline

def _mos_consts(kappa, gamma):
    sgn_neg = -1.0 if kappa > 0 else 1.0
    phi = 1.0 / abs(kappa)
    # plain Python float so float32 chains are not promoted to float64
    return sgn_neg, phi, float(np.sqrt(abs(kappa))), 1.0 / gamma


def mos_forward_chain(x, weights, kappa, gamma, with_cache=False):
    """depth layers of the fused projection pipeline; returns (out, caches)."""
    kern = backend.kernels
    sgn_neg, phi, sqrt_k, inv_g = _mos_consts(kappa, gamma)
    caches = []
    h = x
    for a_f, b_f in weights:
        s, _ = kern.inv_stereo_space_scaled(h, kappa, gamma)
        a = s @ a_f.T
        d = a @ b_f.T
        out, _ = kern.lift_stereo(d, sgn_neg, phi, sqrt_k, inv_g)
        if with_cache:
            u2 = np.einsum("ij,ij->i", h, h, optimize=False) * (gamma *
                                                                gamma)
            den = 1.0 + kappa * u2
            q = np.einsum("ij,ij->i", d, d, optimize=False)
            xi = np.sqrt(sgn_neg * q + phi)
            m = 1.0 + sqrt_k * xi
            caches.append((h, d, den, xi, m))
        h = out
    return h, caches


def mos_backward_chain(grad, weights, caches, kappa, gamma):
    """Hand VJP of the forward chain; returns the input gradient.

    Both projection VJPs are the fused row-dot/rescale kernel: through the
    lift d_bar = g/(gamma*m) - (<g, d> sgn sk/(gamma m^2 xi)) d, and through
    the scaled inverse projection
    g' = (2 gamma/den) s_bar - (4 kappa gamma^3 <s_bar, h>/den^2) h.
    """
    kern = backend.kernels
    sgn_neg, phi, sqrt_k, inv_g = _mos_consts(kappa, gamma)
    g = grad
    for (a_f, b_f), (h, d, den, xi, m) in zip(reversed(weights),
                                              reversed(caches)):
        d_bar = kern.vjp_scale_pair(
            g, d, inv_g / m, sgn_neg * sqrt_k * inv_g / (m * m * xi))
        a_bar = d_bar @ b_f
        s_bar = a_bar @ a_f
        g = kern.vjp_scale_pair(
            s_bar, h, (2.0 * gamma) / den,
            (4.0 * kappa * gamma ** 3) / (den * den))
    return g


def _mos_bytes(phase, b, n, r, itemsize):
    # forward per layer: s, d, out (b*n each), a (b*r), row temps in the
    # kernels: t, den | q, xi, den (~5b); cacheless timing path
    if phase == "forward":
        per_layer = 3 * b * n + b * r + 5 * b
    else:
        # backward per layer: d_bar, s_bar, next grad (b*n each, the two
        # VJPs are fused kernels), a_bar (b*r), coefficient rows (~4b)
        per_layer = 3 * b * n + b * r + 4 * b
    return per_layer * itemsize


# --------------------------------------------------------- explog pipeline

def _origin(n, kappa, dtype):
    o = np.zeros(n + 1, dtype=dtype)
    o[0] = 1.0 / np.sqrt(abs(kappa))
    flip = np.ones(n + 1, dtype=dtype)
    flip[0] = -1.0
    return o, flip


def explog_forward_chain(p, weights, kappa, with_cache=False):
    """depth layers of log-at-origin -> linear -> exp-at-origin.

    p is ambient (b, n+1) with the time coordinate first, on the
    kappa-hyperboloid. The maps are the general base-point formulas
    specialized only by passing the origin as the base point, the way a
    generic manifold library evaluates them: full Lorentzian inner products
    over the ambient vectors, broadcast combinations against the base
    point, an explicit ambient tangent vector with zero time row, and
    clamped acosh / sinh / cosh.
    """
    # keep the scalar in the array dtype so float32 runs stay float32
    sk = p.dtype.type(np.sqrt(abs(kappa)))
    n = p.shape[1] - 1
    o, flip = _origin(n, kappa, p.dtype)
    caches = []
    for a_f, b_f in weights:
        # log_o(p): beta = kappa <o, p>_L, dist = acosh(beta),
        # v = (dist / sinh dist)(p - beta o)
        inn = np.einsum("bj,j->b", p, o * flip, optimize=False)
        beta = kappa * inn
        beta_c = np.maximum(beta, 1.0 + 1e-9)
        dist = np.arccosh(beta_c)
        shl = np.sinh(dist)
        coef = np.where(dist > 1e-15, dist / np.where(shl == 0.0, 1.0, shl),
                        1.0)
        diff = p - beta[:, None] * o[None, :]
        v = coef[:, None] * diff
        a = v[:, 1:] @ a_f.T
        d = a @ b_f.T
        u = np.concatenate([np.zeros((p.shape[0], 1), dtype=p.dtype), d],
                           axis=1)
        # exp_o(u): theta = sqrt|kappa| * ||u||_L,
        # out = cosh(theta) o + (sinh theta / theta) u
        uu = np.einsum("bj,bj,j->b", u, u, flip, optimize=False)
        theta = sk * np.sqrt(np.maximum(uu, 0.0))
        che = np.cosh(theta)
        soe = np.where(theta > 1e-15,
                       np.sinh(theta) / np.where(theta == 0.0, 1.0, theta),
                       1.0)
        out = che[:, None] * o[None, :] + soe[:, None] * u
        if with_cache:
            caches.append((p, beta, beta_c, dist, coef, diff, u, theta,
                           che, soe))
        p = out
    return p, caches


def explog_backward_chain(grad, weights, caches, kappa):
    """Hand VJP of the exp/log chain; returns the ambient input gradient."""
    sk = grad.dtype.type(np.sqrt(abs(kappa)))
    g = grad
    n = grad.shape[1] - 1
    o, flip = _origin(n, kappa, grad.dtype)
    for (a_f, b_f), (p, beta, beta_c, dist, coef, diff, u, theta, che,
                     soe) in zip(reversed(weights), reversed(caches)):
        # exp part: out = che o + soe u with theta = sk sqrt(<u,u>_L)
        r1 = np.einsum("bj,j->b", g, o, optimize=False)
        r2 = np.einsum("bj,bj->b", g, u, optimize=False)
        she = soe * theta  # sinh(theta)
        dsoe = np.where(theta > 1e-12,
                        (che * theta - she) / np.maximum(theta * theta,
                                                         1e-30), 0.0)
        theta_bar = she * r1 + dsoe * r2
        tcoef = np.where(theta > 1e-12,
                         theta_bar * sk * sk / np.maximum(theta, 1e-30),
                         sk * sk * r1)  # she/theta -> 1 as theta -> 0
        u_bar = soe[:, None] * g + tcoef[:, None] * (u * flip[None, :])
        d_bar = u_bar[:, 1:]
        a_bar = d_bar @ b_f
        vs_bar = a_bar @ a_f
        v_bar = np.concatenate(
            [np.zeros((g.shape[0], 1), dtype=g.dtype), vs_bar], axis=1)
        # log part: v = coef (p - beta o), beta = kappa <o, p>_L
        r3 = np.einsum("bj,bj->b", v_bar, diff, optimize=False)
        diff_bar = coef[:, None] * v_bar
        chl = np.cosh(dist)
        shl = np.sinh(dist)
        dcoef = np.where(dist > 1e-12,
                         (shl - dist * chl) / np.maximum(shl * shl, 1e-30),
                         0.0)
        ddist = np.where(beta > 1.0 + 1e-9,
                         1.0 / np.sqrt(np.maximum(beta_c * beta_c - 1.0,
                                                  1e-18)), 0.0)
        r4 = np.einsum("bj,j->b", diff_bar, o, optimize=False)
        beta_bar = r3 * dcoef * ddist - r4
        p_bar = diff_bar + (kappa * beta_bar)[:, None] * \
            (o * flip)[None, :]
        g = p_bar
    return g


def _explog_bytes(phase, b, n, r, itemsize):
    m = n + 1  # ambient width
    if phase == "forward":
        # per layer: diff, v, u, out ambient (b*m each), a (b*r), d (b*n),
        # row temps inn, beta, dist, shl, coef, uu, theta, che, soe (~9b)
        per_layer = 4 * b * m + b * r + b * n + 9 * b
    else:
        # per layer: u_bar, v_bar, diff_bar, p_bar ambient, a_bar (b*r),
        # vs_bar (b*n), row temps r1..r4, she, dsoe, theta_bar, tcoef,
        # chl, shl, dcoef, ddist (~12b)
        per_layer = 4 * b * m + b * r + b * n + 12 * b
    return per_layer * itemsize


# ------------------------------------------------------------------ driver

def _make_weights(rng, depth, n, r, dtype, identity=False):
    if identity:
        eye = np.eye(n, dtype=dtype)
        return [(eye.copy(), eye.copy()) for _ in range(depth)]
    # orthonormal factors sharing one r-dim subspace: each composite map is
    # an exact isometry on that subspace, so chains of any depth neither
    # blow up the hyperbolic functions nor decay into float32 denormals
    # (gaussian factors do one or the other and poison deep-cell timings)
    u, _ = np.linalg.qr(rng.normal(size=(n, r)))
    ws = []
    for _ in range(depth):
        q, _ = np.linalg.qr(rng.normal(size=(r, r)))
        p, _ = np.linalg.qr(rng.normal(size=(r, r)))
        ws.append(((q @ u.T).astype(dtype), (u @ p).astype(dtype)))
    return ws


def _ambient_from_space(xs, kappa):
    t = np.sqrt(1.0 / abs(kappa) + np.einsum("ij,ij->i", xs, xs,
                                             optimize=False))
    return np.concatenate([t[:, None], xs], axis=1)


def identity_check(dim, batch, kappa, gamma, rng):
    """Both pipelines with identity factors must reproduce their input."""
    xs = (rng.normal(size=(batch, dim)) * 0.5).astype(np.float64)
    weights = _make_weights(rng, 1, dim, dim, np.float64, identity=True)
    mos_out, _ = mos_forward_chain(xs, weights, kappa, gamma)
    err = float(np.max(np.abs(mos_out - xs)))
    p0 = _ambient_from_space(xs, kappa)
    ex_out, _ = explog_forward_chain(p0, weights, kappa)
    err = max(err, float(np.max(np.abs(ex_out - p0))))
    return err


def _timer_resolution_ns():
    info = time.get_clock_info("perf_counter")
    return max(info.resolution * 1e9, 1.0)


def _time_fn(fn, repeats, warmup):
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    return float(np.median(samples)), float(np.min(samples))


def bench_mapping(config):
    """Sweep the configured grid and report medians, minima, and bytes."""
    rng = np.random.default_rng(config.seed)
    id_err = max(identity_check(min(config.dims), min(config.batch, 16),
                                config.kappa, config.gamma, rng), 0.0)
    if id_err > 1e-8:
        raise BenchError(f"identity precheck failed: {id_err:.3e}")
    dtype = config.dtype
    itemsize = np.dtype(dtype).itemsize
    res_ns = _timer_resolution_ns()
    rows = []
    repeats_used = config.repeats
    auto_increased = False
    for dim in config.dims:
        for depth in config.depths:
            weights = _make_weights(rng, depth, dim, config.rank, dtype)
            xs = (rng.normal(size=(config.batch, dim)) * 0.5).astype(dtype)
            p0 = _ambient_from_space(xs.astype(np.float64),
                                     config.kappa).astype(dtype)

            def _measure(method, phase, fn):
                nonlocal repeats_used, auto_increased
                reps = repeats_used
                med, mn = _time_fn(fn, reps, config.warmup_iters)
                while med < 50.0 * res_ns and reps < 4096:
                    reps *= 2
                    auto_increased = True
                    med, mn = _time_fn(fn, reps, config.warmup_iters)
                repeats_used = max(repeats_used, reps)
                nbytes = depth * (_mos_bytes(phase, config.batch, dim,
                                             config.rank, itemsize)
                                  if method == "mos" else
                                  _explog_bytes(phase, config.batch, dim,
                                                config.rank, itemsize))
                rows.append(BenchRow(method, phase, dim, depth,
                                     med / 1e3, mn / 1e3, nbytes))

            # each method is timed with only its own layer caches resident,
            # so neither pays for the other's working set at large depth
            _, mos_cache = mos_forward_chain(xs, weights, config.kappa,
                                             config.gamma, with_cache=True)
            g_mos = np.ones_like(xs)
            _measure("mos", "forward", lambda: mos_forward_chain(
                xs, weights, config.kappa, config.gamma))
            _measure("mos", "backward", lambda: mos_backward_chain(
                g_mos, weights, mos_cache, config.kappa, config.gamma))
            del mos_cache
            _, ex_cache = explog_forward_chain(p0, weights, config.kappa,
                                               with_cache=True)
            g_ex = np.ones_like(p0)
            _measure("explog", "forward", lambda: explog_forward_chain(
                p0, weights, config.kappa))
            _measure("explog", "backward", lambda: explog_backward_chain(
                g_ex, weights, ex_cache, config.kappa))
            del ex_cache
    totals = {m: sum(r.median_us for r in rows if r.method == m)
              for m in METHODS}
    speedups = {}
    for dim in config.dims:
        for depth in config.depths:
            t = {m: sum(r.median_us for r in rows
                        if r.method == m and r.dim == dim and
                        r.depth == depth) for m in METHODS}
            speedups[f"{dim}x{depth}"] = t["explog"] / t["mos"]
    return BenchReport(rows=rows, totals=totals, speedups=speedups,
                       identity_error=id_err, repeats_used=repeats_used,
                       auto_increased=auto_increased,
                       backend=backend.backend_name(),
                       precision=config.precision, batch=config.batch)
