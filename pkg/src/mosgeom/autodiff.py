"""Tape-based reverse-mode differentiation over a fixed primitive set.

The set covers exactly what the expert layer needs: dense arithmetic, the
row linear map, softmax / cross-entropy, and the geometry kernels with
closed-form local derivatives (including d/dkappa). One tape records one
forward pass; backward replays it once in reverse with additive gradient
accumulation at fan-out, aborting on any NaN with the offending node id.

An independent central finite-difference oracle (finite_diff_check) validates
every analytic gradient; perturbations that leave a geometry domain are
skipped and reported, never clamped.
"""
from dataclasses import dataclass, field

import numpy as np

from . import backend
from .geometry import DomainError

__all__ = [
    "Tape", "Var", "backward", "finite_diff_check", "GradCheckReport",
    "ADError", "NaNGradientError", "TapeReuseError",
    "add", "mul", "div", "scale", "cmul", "linmap", "sum_all", "sum_axis1",
    "sum_axis0", "mean_axis0", "sqrt", "tanh", "softmax", "cross_entropy",
    "gather_cols", "invstereo_s", "lift_xi", "stereo_from",
]


class ADError(Exception):
    pass


class TapeReuseError(ADError):
    """A tape supports exactly one backward pass."""


class NaNGradientError(ADError):
    def __init__(self, nid, op):
        super().__init__(f"NaN gradient produced at node {nid} ({op})")
        self.nid = nid
        self.op = op


class Var:
    """One tape node: cached forward value plus the local backward rule."""

    __slots__ = ("data", "grad", "tape", "nid", "op", "name", "kind",
                 "requires_grad", "_parents", "_vjp")

    def __init__(self, data, tape, nid, op, name=None, kind="capacity",
                 requires_grad=True, parents=(), vjp=None):
        self.data = data
        self.grad = None
        self.tape = tape
        self.nid = nid
        self.op = op
        self.name = name
        self.kind = kind
        self.requires_grad = requires_grad
        self._parents = parents
        self._vjp = vjp

    def __repr__(self):
        return f"Var(#{self.nid} {self.op} {self.data.shape})"


class Tape:
    """Ordered record of primitive applications; inputs precede users."""

    def __init__(self):
        self.nodes = []
        self._consumed = False

    def var(self, data, name=None, kind="capacity", requires_grad=True):
        data = np.asarray(data, dtype=np.float64)
        nid = len(self.nodes)
        v = Var(data, self, nid, "leaf", name=name or f"p{nid}", kind=kind,
                requires_grad=requires_grad)
        self.nodes.append(v)
        return v

    def const(self, data):
        return self.var(data, requires_grad=False)


def _record(op, parents, data, vjp):
    tape = parents[0].tape
    for p in parents[1:]:
        if p.tape is not tape:
            raise ADError("operands recorded on different tapes")
    rg = any(p.requires_grad for p in parents)
    v = Var(np.asarray(data), tape, len(tape.nodes), op,
            requires_grad=rg, parents=tuple(parents), vjp=vjp if rg else None)
    tape.nodes.append(v)
    return v


def backward(tape, output=None, seed=None):
    """Reverse sweep; returns {leaf name: gradient} for trainable leaves."""
    if tape._consumed:
        raise TapeReuseError("one backward pass per forward pass")
    tape._consumed = True
    if output is None:
        if not tape.nodes:
            raise ADError("empty tape")
        output = tape.nodes[-1]
    if output.tape is not tape:
        raise ADError("output does not belong to this tape")
    if seed is None:
        seed = np.ones_like(output.data)
    else:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != output.data.shape:
            raise ADError(
                f"seed shape {seed.shape} != output shape {output.data.shape}")
    pending = {output.nid: seed}
    for node in reversed(tape.nodes):
        g = pending.pop(node.nid, None)
        if g is None:
            continue
        node.grad = g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if np.isnan(pg).any():
                raise NaNGradientError(node.nid, node.op)
            acc = pending.get(parent.nid)
            pending[parent.nid] = pg if acc is None else acc + pg
    return {n.name: n.grad for n in tape.nodes
            if n.op == "leaf" and n.requires_grad and n.grad is not None}


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- arithmetic

def add(a, b):
    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)
    return _record("add", (a, b), a.data + b.data, vjp)


def mul(a, b):
    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))
    return _record("mul", (a, b), a.data * b.data, vjp)


def div(a, b):
    def vjp(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
    return _record("div", (a, b), a.data / b.data, vjp)


def scale(a, c):
    c = float(c)
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def cmul(a, c):
    """Elementwise multiply by a constant array."""
    c = np.asarray(c, dtype=np.float64)
    return _record("cmul", (a,), a.data * c,
                   lambda g: (_unbroadcast(g * c, a.data.shape),))


def linmap(m, x):
    """Row-wise linear map: (o,d) applied to (B,d) -> (B,o).

    einsum with optimize=False keeps single-row and batched applications
    bit-identical (the BLAS path does not).
    """
    data = np.einsum("od,bd->bo", m.data, x.data, optimize=False)

    def vjp(g):
        gm = np.einsum("bo,bd->od", g, x.data, optimize=False)
        gx = np.einsum("bo,od->bd", g, m.data, optimize=False)
        return gm, gx
    return _record("linmap", (m, x), data, vjp)


def sum_all(a):
    def vjp(g):
        return (np.full(a.data.shape, float(g)),)
    return _record("sum_all", (a,), np.asarray(np.sum(a.data)), vjp)


def sum_axis1(a):
    """Row sums with keepdims: (B,n) -> (B,1)."""
    def vjp(g):
        return (np.broadcast_to(g, a.data.shape).copy(),)
    return _record("sum_axis1", (a,), np.sum(a.data, axis=1, keepdims=True), vjp)


def sum_axis0(a):
    def vjp(g):
        return (np.broadcast_to(g, a.data.shape).copy(),)
    return _record("sum_axis0", (a,), np.sum(a.data, axis=0), vjp)


def mean_axis0(a):
    inv = 1.0 / a.data.shape[0]

    def vjp(g):
        return (np.broadcast_to(g * inv, a.data.shape).copy(),)
    return _record("mean_axis0", (a,), np.mean(a.data, axis=0), vjp)


def sqrt(a):
    out = np.sqrt(a.data)

    def vjp(g):
        return (g * 0.5 / out,)
    return _record("sqrt", (a,), out, vjp)


def tanh(a):
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)
    return _record("tanh", (a,), out, vjp)


def softmax(a):
    """Row softmax, numerically shifted; rows are independent."""
    z = a.data - np.max(a.data, axis=1, keepdims=True)
    e = np.exp(z)
    p = e / np.sum(e, axis=1, keepdims=True)

    def vjp(g):
        dot = np.einsum("ij,ij->i", g, p, optimize=False)[:, None]
        return (p * (g - dot),)
    return _record("softmax", (a,), p, vjp)


def cross_entropy(logits, labels):
    """Mean cross-entropy of row logits against integer labels."""
    labels = np.asarray(labels)
    z = logits.data
    m = np.max(z, axis=1, keepdims=True)
    e = np.exp(z - m)
    se = np.sum(e, axis=1, keepdims=True)
    lse = np.log(se)[:, 0] + m[:, 0]
    rows = np.arange(z.shape[0])
    loss = np.asarray(np.mean(lse - z[rows, labels]))
    p = e / se

    def vjp(g):
        gz = p.copy()
        gz[rows, labels] -= 1.0
        gz *= float(g) / z.shape[0]
        return (gz,)
    return _record("cross_entropy", (logits,), loss, vjp)


def gather_cols(a, cols):
    cols = tuple(int(c) for c in cols)
    data = a.data[:, cols]

    def vjp(g):
        out = np.zeros_like(a.data)
        out[:, cols] = g
        return (out,)
    return _record("gather_cols", (a,), data, vjp)


# ---------------------------------------------------------- geometry kernels

def _train_fix_rows(mat, row_mask, cap_sq, q):
    fixed = mat.copy()
    fac = np.sqrt(cap_sq / q[row_mask])
    fixed[row_mask] *= fac[:, None]
    factors = np.ones(mat.shape[0])
    factors[row_mask] = fac
    return fixed, factors


def invstereo_s(x, kappa, mode="verify"):
    """Space-like part of the inverse projection, differentiable in x and
    kappa (kappa a 0-d Var, nonzero).

    s = 2x / (1 + kappa ||x||^2). In train mode rows in the pole guard band
    are pulled back to the domain margin; the fix factor is treated as a
    constant in the backward pass.
    """
    k = float(kappa.data)
    if k == 0.0:
        raise ADError("invstereo_s requires a nonzero curvature branch")
    K = backend.kernels
    xv = x.data
    factors = None
    _xi, s, t, bad = K.inv_stereo(xv, k)
    if bad >= 0:
        if mode != "train" or k > 0:
            raise DomainError("projection pole in invstereo_s", row=bad)
        den = 1.0 + k * t
        rows = np.abs(den) < K.GUARD
        xv, factors = _train_fix_rows(xv, rows, 0.9025 / abs(k), t)
        _xi, s, t, bad = K.inv_stereo(xv, k)
        if bad >= 0:
            raise DomainError("projection pole in invstereo_s", row=bad)
    den = 1.0 + k * t

    def vjp(g):
        r = np.einsum("ij,ij->i", g, xv, optimize=False)
        gx = (2.0 / den)[:, None] * g - ((4.0 * k * r) / (den * den))[:, None] * xv
        if factors is not None:
            gx *= factors[:, None]
        gk = np.sum(r * (-2.0 * t / (den * den)))
        return gx, np.asarray(gk)
    return _record("invstereo_s", (x, kappa), s, vjp)


def lift_xi(s, kappa, mode="verify"):
    """Time-like lift coordinate, differentiable in s and kappa (nonzero).

    xi = sqrt(||s||^2 sgn(-kappa) + 1/|kappa|); the s-gradient is the
    closed form sgn(-kappa) s / xi.
    """
    k = float(kappa.data)
    if k == 0.0:
        raise ADError("lift_xi requires a nonzero curvature branch")
    sgn_neg = -1.0 if k > 0 else 1.0
    phi = 1.0 / abs(k)
    K = backend.kernels
    sv = s.data
    factors = None
    xi, q, bad = K.lift_xi(sv, sgn_neg, phi)
    if k > 0:
        cap = 0.9025 * phi
        viol = q > cap
        if viol.any():
            if mode != "train":
                raise DomainError("lift input outside spherical domain",
                                  row=int(np.argmax(viol)))
            sv, factors = _train_fix_rows(sv, viol, cap, q)
            xi, q, bad = K.lift_xi(sv, sgn_neg, phi)
    if bad >= 0:
        raise DomainError("negative lift radicand", row=bad)
    dphi = -np.sign(k) / (k * k)

    def vjp(g):
        gs = (g * sgn_neg / xi)[:, None] * sv
        if factors is not None:
            gs *= factors[:, None]
        gk = np.sum(g * dphi / (2.0 * xi))
        return gs, np.asarray(gk)
    return _record("lift_xi", (s, kappa), xi, vjp)


def stereo_from(xi, s, kappa):
    """Projection s / (1 + sqrt|kappa| xi), differentiable in all three."""
    k = float(kappa.data)
    if k == 0.0:
        raise ADError("stereo_from requires a nonzero curvature branch")
    sk = np.sqrt(abs(k))
    out, bad = backend.kernels.stereo(xi.data, s.data, sk)
    if bad >= 0:
        raise DomainError("projection pole in stereo_from", row=bad)
    den = 1.0 + sk * xi.data
    dsk = np.sign(k) / (2.0 * sk)

    def vjp(g):
        r = np.einsum("ij,ij->i", g, s.data, optimize=False)
        gxi = -sk * r / (den * den)
        gs = (1.0 / den)[:, None] * g
        gk = np.sum(r * (-xi.data * dsk / (den * den)))
        return gxi, gs, np.asarray(gk)
    return _record("stereo_from", (xi, s, kappa), out, vjp)


# ------------------------------------------------------------ the fd oracle

@dataclass
class GradCheckReport:
    """Outcome of a finite-difference sweep against tape gradients."""

    max_relative_error: float
    failing_coordinates: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    n_checked: int = 0
    tol: float = 1e-4

    @property
    def ok(self):
        return not self.failing_coordinates


def finite_diff_check(f, params, h=1e-5, analytic=None, sample=None,
                      rng=None, tol=1e-4):
    """Central finite differences (f(p+h) - f(p-h)) / 2h per coordinate.

    f: pure function {name: ndarray} -> float, re-evaluated at perturbed
    parameter sets. analytic: tape gradients to compare against. sample:
    optional cap on checked coordinates per parameter (rng required).
    Relative error is |fd - a| / max(|fd|, |a|, 1). Perturbations raising
    DomainError are skipped and reported.
    """
    if analytic is None:
        raise ValueError("analytic gradients required")
    if h <= 0:
        raise ValueError("h must be positive")
    failing, skipped = [], []
    max_rel = 0.0
    n_checked = 0
    for name, value in params.items():
        base = np.asarray(value, dtype=np.float64)
        grad = np.asarray(analytic[name], dtype=np.float64)
        idxs = range(base.size)
        if sample is not None and base.size > sample:
            idxs = sorted(int(i) for i in
                          rng.choice(base.size, size=sample, replace=False))
        for idx in idxs:
            plus = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
            minus = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
            plus[name].flat[idx] += h
            minus[name].flat[idx] -= h
            try:
                fd = (f(plus) - f(minus)) / (2.0 * h)
            except DomainError:
                skipped.append((name, int(idx)))
                continue
            a = float(grad.flat[idx])
            rel = abs(fd - a) / max(abs(fd), abs(a), 1.0)
            n_checked += 1
            max_rel = max(max_rel, rel)
            if rel > tol:
                failing.append((name, int(idx)))
    return GradCheckReport(max_relative_error=max_rel,
                           failing_coordinates=failing, skipped=skipped,
                           n_checked=n_checked, tol=tol)
