"""Self-check suites for the geometry, layer, optimizer, and loss code.

Each suite re-derives its expected values independently of the library
internals and reports one pass/fail line per check. Suites are deliberately
lighter than the test suite (seconds, not minutes); they exist so a build
can be interrogated from the command line. All checks go through module
attribute lookups, so an injected fault in one function is visible to every
suite that depends on it.
"""
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from . import layer as lay
from . import optim as opt
from .geometry import Curvature, DomainError, ScalingConfig

__all__ = ["Check", "SuiteResult", "SUITES", "run_suites", "format_report",
           "main"]


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class SuiteResult:
    suite: str
    checks: list = field(default_factory=list)
    elapsed_s: float = 0.0

    @property
    def n_passed(self):
        return sum(1 for c in self.checks if c.passed)

    @property
    def n_failed(self):
        return len(self.checks) - self.n_passed

    @property
    def ok(self):
        return self.n_failed == 0 and len(self.checks) > 0


class _Collector:
    def __init__(self):
        self.checks = []

    def expect(self, name, cond, detail=""):
        self.checks.append(Check(name, bool(cond), detail))


def _rand_ball(rng, n, kappa, batch, frac=0.9):
    x = rng.normal(size=(batch, n))
    r = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    lim = frac / np.sqrt(abs(kappa)) if kappa != 0 else 3.0
    return x * (lim * rng.uniform(0.05, 1.0, size=r.shape) / r)


KAPPA_GRID = (-2.0, -1.0, -0.1, 0.1, 1.0, 2.0)


# ----------------------------------------------------------------- suites

def suite_lemma1(rng):
    """Scale identity F_k(x) = (1/g) F_{k/g^2}(g x) over a gamma/kappa grid."""
    c = _Collector()
    for gamma in (0.1, 1.0, 10.0, 1000.0):
        for kappa in KAPPA_GRID:
            x = _rand_ball(rng, 8, kappa, batch=100, frac=0.5)
            w = rng.normal(size=(8, 8)) * 0.3
            if kappa > 0:
                cap = 0.45 / (np.sqrt(kappa) * np.linalg.norm(w, 2))
                nx = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
                x = x * np.minimum(1.0, cap / nx)
            base = geo.scaled_pipeline(
                x, w, Curvature(kappa, epsilon_zero=0.0), ScalingConfig(1.0))
            scaled = geo.scaled_pipeline(
                x, w, Curvature(kappa / gamma ** 2, epsilon_zero=0.0),
                ScalingConfig(gamma))
            num = np.sqrt(np.sum((base - scaled) ** 2, axis=-1))
            den = np.maximum(np.sqrt(np.sum(base ** 2, axis=-1)), 1e-30)
            rel = float(np.max(num / den))
            c.expect(f"gamma={gamma} kappa={kappa}", rel < 1e-6,
                     f"max rel {rel:.3e}")
    return c.checks


def suite_roundtrip(rng):
    """stereo . inv_stereo identity and projection of lifted points."""
    c = _Collector()
    for kappa in KAPPA_GRID:
        cur = Curvature(kappa)
        for n in (4, 32):
            x = _rand_ball(rng, n, kappa, batch=500)
            p = geo.inv_stereo(x, cur)
            back = geo.stereo(p, cur)
            err = float(np.max(np.abs(back - x)))
            c.expect(f"stereo.inv_stereo kappa={kappa} n={n}", err < 1e-11,
                     f"max abs {err:.3e}")
        s = _rand_ball(rng, 16, kappa, batch=500,
                       frac=0.9 if kappa <= 0 else 0.5)
        lifted = geo.mos_lift(s, cur)
        again = geo.inv_stereo(geo.stereo(lifted, cur), cur)
        err = float(max(np.max(np.abs(again.s - lifted.s)),
                        np.max(np.abs(again.xi - lifted.xi))))
        c.expect(f"inv_stereo.stereo on manifold kappa={kappa}", err < 1e-11,
                 f"max abs {err:.3e}")
    return c.checks


def suite_constraints(rng):
    """Lifted and projected points satisfy their manifold constraint."""
    c = _Collector()
    for kappa in KAPPA_GRID:
        cur = Curvature(kappa)
        s = _rand_ball(rng, 12, kappa, batch=400,
                       frac=0.9 if kappa <= 0 else 0.5)
        r1 = float(np.max(np.abs(geo.constraint_residual(
            geo.mos_lift(s, cur), cur))))
        c.expect(f"lift constraint kappa={kappa}", r1 < 1e-10,
                 f"max |res| {r1:.3e}")
        x = _rand_ball(rng, 12, kappa, batch=400)
        r2 = float(np.max(np.abs(geo.constraint_residual(
            geo.inv_stereo(x, cur), cur))))
        c.expect(f"inv_stereo constraint kappa={kappa}", r2 < 1e-10,
                 f"max |res| {r2:.3e}")
    flat = Curvature(0.0)
    s = rng.normal(size=(200, 6))
    r3 = float(np.max(np.abs(geo.constraint_residual(
        geo.mos_lift(s, flat), flat))))
    c.expect("flat lift xi = ||s||", r3 < 1e-12, f"max |res| {r3:.3e}")
    return c.checks


def suite_explog(rng):
    """Lorentz exp/log maps: tangency, round trips, distance recovery."""
    c = _Collector()
    for kappa in (-2.0, -1.0, -0.1):
        cur = Curvature(kappa)
        x = geo.inv_stereo(_rand_ball(rng, 10, kappa, batch=300), cur)
        y = geo.inv_stereo(_rand_ball(rng, 10, kappa, batch=300), cur)
        v = geo.log_map(x, y, cur)
        tan = -np.asarray(x.xi) * v.time + np.einsum(
            "ij,ij->i", np.atleast_2d(x.s), np.atleast_2d(v.space),
            optimize=False)
        t = float(np.max(np.abs(tan)))
        c.expect(f"log tangency kappa={kappa}", t < 1e-8, f"max {t:.3e}")
        back = geo.exp_map(x, v, cur)
        err = float(max(np.max(np.abs(back.xi - y.xi)),
                        np.max(np.abs(back.s - y.s))))
        c.expect(f"exp.log roundtrip kappa={kappa}", err < 1e-8,
                 f"max abs {err:.3e}")
        # ||log_x(y)||_L must equal the geodesic distance
        vv = -v.time ** 2 + np.sum(np.atleast_2d(v.space) ** 2, axis=-1)
        xamb = np.concatenate([np.atleast_1d(x.xi)[:, None],
                               np.atleast_2d(x.s)], axis=1)
        yamb = np.concatenate([np.atleast_1d(y.xi)[:, None],
                               np.atleast_2d(y.s)], axis=1)
        inner = -xamb[:, 0] * yamb[:, 0] + np.einsum(
            "ij,ij->i", xamb[:, 1:], yamb[:, 1:], optimize=False)
        dist = np.arccosh(np.maximum(kappa * inner, 1.0)) / np.sqrt(-kappa)
        derr = float(np.max(np.abs(np.sqrt(np.maximum(vv, 0.0)) - dist)))
        c.expect(f"log norm = distance kappa={kappa}", derr < 1e-8,
                 f"max abs {derr:.3e}")
    return c.checks


def suite_gradbounds(rng):
    """Closed-form lift gradient norms against their analytic bounds."""
    c = _Collector()
    for kappa in (-2.0, -1.0, -0.1):
        u = rng.normal(size=(10_000, 6)) * rng.uniform(
            0.01, 20.0, size=(10_000, 1))
        g = geo.lift_gradient_norm(u, Curvature(kappa))
        m = float(np.max(g))
        c.expect(f"lift grad <= 1 kappa={kappa}", m <= 1.0, f"max {m:.12f}")
    for kappa in (0.1, 1.0, 2.0):
        r_cap = 0.95 / np.sqrt(kappa)
        u = rng.normal(size=(10_000, 6))
        u *= (r_cap * rng.uniform(0.0, 1.0, size=(10_000, 1)) /
              np.sqrt(np.sum(u * u, axis=1, keepdims=True)))
        g = geo.lift_gradient_norm(u, Curvature(kappa))
        bound = r_cap / np.sqrt(1.0 / kappa - r_cap ** 2) + 1e-12
        m = float(np.max(g))
        c.expect(f"lift grad bounded kappa={kappa}", m <= bound,
                 f"max {m:.12f} bound {bound:.12f}")
    # cross-check the closed form against the tape on a few rows
    u = rng.normal(size=(5, 4)) * 0.3
    for kappa in (-1.0, 1.0):
        tape = ad.Tape()
        uv = tape.var(u, name="u")
        xi = ad.lift_xi(uv, tape.const(np.asarray(kappa)), "verify")
        grads = ad.backward(tape, ad.sum_all(xi))
        rows = np.sqrt(np.sum(grads["u"] ** 2, axis=1))
        ref = geo.lift_gradient_norm(u, Curvature(kappa))
        err = float(np.max(np.abs(rows - ref)))
        c.expect(f"closed form = tape kappa={kappa}", err < 1e-10,
                 f"max abs {err:.3e}")
    return c.checks


def suite_gradcheck(rng):
    """Finite-difference validation of primitives and the layer loss."""
    c = _Collector()
    kv = np.asarray(-0.7)

    def prim(name, build, shape, scale=0.3, n_seeds=4):
        worst = 0.0
        for _ in range(n_seeds):
            x = rng.normal(size=shape) * scale
            tape = ad.Tape()
            xvar = tape.var(x, name="x")
            kvar = tape.var(kv.copy(), name="kappa")
            out = build(tape, xvar, kvar)
            grads = ad.backward(tape, out)
            params = {"x": x, "kappa": kv.copy()}

            def f(p):
                t2 = ad.Tape()
                x2 = t2.var(p["x"], name="x")
                k2 = t2.var(p["kappa"], name="kappa")
                return float(build(t2, x2, k2).data)

            rep = ad.finite_diff_check(
                f, params, analytic={k: grads.get(k, np.zeros_like(v))
                                     for k, v in params.items()},
                rng=rng)
            worst = max(worst, rep.max_relative_error)
        c.expect(f"fd {name}", worst < 1e-4, f"max rel {worst:.3e}")

    prim("invstereo_s",
         lambda t, x, k: ad.sum_all(ad.invstereo_s(x, k, "verify")), (3, 5))
    prim("lift_xi",
         lambda t, x, k: ad.sum_all(ad.lift_xi(x, k, "verify")), (3, 5))
    prim("stereo chain", lambda t, x, k: ad.sum_all(
        ad.stereo_from(ad.lift_xi(x, k, "verify"), x, k)), (3, 5))
    prim("softmax+xent", lambda t, x, k: ad.cross_entropy(
        ad.mul(x, x), np.arange(3) % 2), (3, 4), scale=1.0)
    prim("tanh", lambda t, x, k: ad.sum_all(ad.tanh(x)), (2, 6), scale=1.0)

    cfg = lay.LayerConfig(d_in=6, d_out=5, n_experts=4, top_k=2,
                          group_sizes=(2, 1, 1), rank=2)
    experts, router = lay.init_experts(cfg, rng)
    for e in experts:
        e.B = rng.normal(size=e.B.shape) * 0.2
    frozen = rng.normal(size=(cfg.d_out, cfg.d_in)) * 0.3
    tokens = rng.normal(size=(5, cfg.d_in)) * 0.5
    template = lay.layer_param_template(experts, router)
    params = {k: np.array(v) for k, (v, _kind) in template.items()}

    def run(p):
        tape = ad.Tape()
        lvars = {k: tape.var(v, name=k) for k, v in p.items()}
        exps = [lay.ExpertParams(
            A=p[f"A{i}"], B=p[f"B{i}"],
            curvature=Curvature(
                float(p[f"kappa{i}"]) if f"kappa{i}" in p
                else e.curvature.kappa,
                learnable=e.curvature.learnable,
                epsilon_zero=e.curvature.epsilon_zero),
            group_tag=e.group_tag) for i, e in enumerate(experts)]
        out, aux, _dec = lay.layer_graph(tape, lvars, tokens, frozen, exps,
                                         cfg, mode="verify")
        total = ad.add(ad.sum_all(ad.tanh(out)), ad.scale(aux, 0.01))
        return tape, total

    tape, total = run(params)
    grads = ad.backward(tape, total)
    rep = ad.finite_diff_check(
        lambda p: float(run(p)[1].data), params,
        analytic={k: grads.get(k, np.zeros_like(v))
                  for k, v in params.items()},
        sample=20, rng=rng)
    c.expect("fd full layer loss", rep.max_relative_error < 1e-4,
             f"max rel {rep.max_relative_error:.3e} "
             f"({rep.n_checked} coords)")
    return c.checks


def _decision_from_stats(stats):
    idx = np.zeros((1, 1), dtype=np.intp)
    return lay.RoutingDecision(indices=idx, gates=np.ones((1, 1)),
                               group_stats=stats, probs=None)


def suite_auxloss(rng):
    """Balance-loss values at its analytic extremes and invariances."""
    c = _Collector()
    cfg = lay.LayerConfig(d_in=5, d_out=3)
    val = lay.grouped_aux_loss(
        lay.route(np.ones((6, 5)), np.zeros((8, 5)), cfg), cfg)
    c.expect("uniform router = 1", val == 1.0, f"value {val!r}")

    def stat(ids, f, p):
        return lay.GroupStat(ids, np.asarray(f, dtype=float),
                             np.asarray(p, dtype=float), 1, False)

    conc = lay.grouped_aux_loss(_decision_from_stats(
        {"hyperbolic": stat((0, 1, 2), [1, 0, 0], [1, 0, 0]),
         "spherical": stat((3, 4, 5), [1, 0, 0], [1, 0, 0]),
         "euclidean": stat((6, 7), [1, 0], [1, 0])}), cfg)
    want = (3.0 + 3.0 + 2.0) / 3.0
    c.expect("full concentration = mean N_g", conc == want,
             f"value {conc!r} want {want!r}")

    # moving probability between groups with the dispatch and the
    # within-group shapes held fixed leaves the loss unchanged
    b = 16
    within = [rng.dirichlet(np.ones(n), size=b) for n in (3, 3, 2)]
    indices = np.tile([0, 3, 6, 1], (b, 1))
    drift, ref = 0.0, None
    for _ in range(3):
        masses = rng.dirichlet(np.ones(3), size=b)
        p = np.concatenate([m[:, None] * w
                            for m, w in zip(masses.T, within)], axis=1)
        v = lay.grouped_aux_loss(_decision_from_stats(
            lay.compute_group_stats(p, indices, cfg)), cfg)
        if ref is None:
            ref = v
        drift = max(drift, abs(v - ref))
    c.expect("cross-group mass invariance", drift < 1e-10,
             f"max drift {drift:.3e}")

    small = lay.LayerConfig(d_in=4, d_out=4, n_experts=4, top_k=1,
                            group_sizes=(2, 1, 1), rank=2)
    p = np.zeros((8, 4))
    p[:, 0] = 0.97
    p[:, 1:] = 0.01
    ix = np.zeros((8, 1), dtype=np.intp)
    d3 = lay.RoutingDecision(
        indices=ix, gates=np.ones((8, 1)),
        group_stats=lay.compute_group_stats(p, ix, small), probs=p)
    stats = d3.group_stats
    c.expect("starved groups flagged",
             stats["spherical"].empty and stats["euclidean"].empty
             and not stats["hyperbolic"].empty, "")
    return c.checks


def suite_layer(rng):
    """Layer-level identities: transparency, flat reduction, bit equality."""
    c = _Collector()
    cfg = lay.LayerConfig(d_in=10, d_out=8)
    experts, router = lay.init_experts(cfg, rng)
    frozen = rng.normal(size=(cfg.d_out, cfg.d_in))
    tokens = rng.normal(size=(12, cfg.d_in))
    res = lay.layer_forward(tokens, frozen, experts, cfg, router)
    plain = np.einsum("od,bd->bo", frozen, tokens, optimize=False)
    c.expect("zero-init transparency", np.array_equal(res.output, plain), "")

    flat = lay.ExpertParams(
        A=rng.normal(size=(3, 10)), B=rng.normal(size=(8, 3)),
        curvature=Curvature(0.0), group_tag="euclidean")
    outs = []
    for gamma in (1e-3, 1.0):
        sc = lay.LayerConfig(d_in=10, d_out=8, gamma=gamma).scaling
        outs.append(lay.expert_forward(tokens, flat, sc))
    want = tokens @ flat.A.T @ flat.B.T
    err = max(float(np.max(np.abs(o - want))) for o in outs)
    c.expect("flat expert = plain low-rank", err < 1e-10,
             f"max abs {err:.3e}")

    for e in experts:
        e.B = rng.normal(size=e.B.shape) * 0.1
    batched = lay.layer_forward(tokens, frozen, experts, cfg, router)
    rows = np.vstack([
        lay.layer_forward(tokens[i:i + 1], frozen, experts, cfg,
                          router).output for i in range(tokens.shape[0])])
    c.expect("batched = per-token bitwise",
             batched.output.tobytes() == rows.tobytes(), "")

    tape = ad.Tape()
    template = lay.layer_param_template(experts, router)
    lvars = {k: tape.var(np.array(v), name=k)
             for k, (v, _kind) in template.items()}
    gout, gaux, _dec = lay.layer_graph(tape, lvars, tokens, frozen, experts,
                                       cfg)
    c.expect("graph forward = direct bitwise",
             np.array_equal(gout.data, batched.output), "")
    c.expect("graph aux = direct",
             abs(float(gaux.data) - batched.aux_loss) < 1e-12,
             f"diff {abs(float(gaux.data) - batched.aux_loss):.3e}")
    return c.checks


def suite_eq9(rng):
    """Split-update decomposition and unified-optimizer equivalence."""
    c = _Collector()
    init = {"kappa0": np.asarray(0.5), "kappa1": np.asarray(-1.2),
            "w": rng.normal(size=(3, 4))}
    g_seq = [{k: rng.normal(size=np.shape(v)) for k, v in init.items()}
             for _ in range(5)]
    tags = {"kappa0": "curvature", "kappa1": "curvature", "w": "capacity"}

    def fresh():
        return {k: np.array(v) for k, v in init.items()}

    def run(cur_lr, cap_lr, steps=5):
        params = fresh()
        groups = opt.partition(
            tags.items(),
            opt.GroupSettings(opt.Schedule(cap_lr, warmup_ratio=0.0,
                                           total_steps=1000), kind="sgd"),
            opt.GroupSettings(opt.Schedule(cur_lr, warmup_ratio=0.0,
                                           total_steps=1000), kind="sgd"))
        for i in range(steps):
            opt.step(groups, params, g_seq[i], i)
        return params

    both = run(1e-2, 1e-3)
    only_cur = run(1e-2, 0.0)
    only_cap = run(0.0, 1e-3)
    ok = all(both[k].tobytes() ==
             (only_cur if tags[k] == "curvature" else only_cap)[k].tobytes()
             for k in init)
    c.expect("indicator decomposition bitwise", ok, "")

    equal = run(1e-3, 1e-3)
    params = fresh()
    onesched = opt.Schedule(1e-3, warmup_ratio=0.0, total_steps=1000)
    unified = opt.ParamGroups(
        curvature_group=opt.OptGroup(names=(), schedule=onesched,
                                     kind="sgd", weight_decay=0.0),
        capacity_group=opt.OptGroup(
            names=tuple(sorted(init)), schedule=onesched, kind="sgd",
            weight_decay=0.0))
    for i in range(5):
        opt.step(unified, params, g_seq[i], i)
    ok = all(params[k].tobytes() == equal[k].tobytes() for k in init)
    c.expect("equal rates = unified bitwise", ok, "")

    params = fresh()
    groups = opt.default_groups(tags.items())
    before = {k: v.copy() for k, v in params.items()}
    bad = {k: np.full(np.shape(v), np.nan) for k, v in params.items()}
    try:
        opt.step(groups, params, bad, 10)
        c.expect("non-finite grads rejected", False, "no exception")
    except opt.NonFiniteGradient:
        ok = all(params[k].tobytes() == before[k].tobytes() for k in params)
        c.expect("non-finite grads rejected", ok, "")
    return c.checks


def suite_continuity(rng):
    """Dead-band behaviour around kappa = 0 and schedule edges."""
    c = _Collector()
    eps = 1e-6
    x = rng.normal(size=(50, 6))
    w = rng.normal(size=(6, 6)) * 0.3
    sc = ScalingConfig(0.001)
    flat = geo.scaled_pipeline(x, w, Curvature(0.0, epsilon_zero=eps), sc)
    inside = geo.scaled_pipeline(
        x, w, Curvature(eps / 2, epsilon_zero=eps), sc)
    c.expect("inside dead-band = flat bitwise",
             np.array_equal(inside, flat), "")
    worst = 0.0
    for kappa in (eps * 1.01, -eps * 1.01):
        edge = geo.scaled_pipeline(
            x, w, Curvature(kappa, epsilon_zero=eps), sc)
        worst = max(worst, float(np.max(np.abs(edge - flat))))
    rel = worst / float(np.max(np.abs(flat)))
    c.expect("dead-band exit is continuous", rel < 1e-9,
             f"rel jump {rel:.3e}")

    sch = opt.Schedule(3e-4, warmup_ratio=0.1, total_steps=1000)
    c.expect("warmup starts at 0", sch.lr(0) == 0.0, f"{sch.lr(0)!r}")
    jump = abs(sch.lr(100) - sch.lr(99))
    c.expect("schedule peak is continuous", jump < 3e-4 * 0.02,
             f"jump {jump:.3e}")
    c.expect("schedule ends at 0", sch.lr(1000) == 0.0, f"{sch.lr(1000)!r}")
    return c.checks


SUITES = {
    "lemma1": suite_lemma1,
    "roundtrip": suite_roundtrip,
    "constraints": suite_constraints,
    "explog": suite_explog,
    "gradbounds": suite_gradbounds,
    "gradcheck": suite_gradcheck,
    "auxloss": suite_auxloss,
    "layer": suite_layer,
    "eq9": suite_eq9,
    "continuity": suite_continuity,
}


def run_suites(names=None, seed=0):
    """Run the selected suites (all by default); returns SuiteResult list.

    A suite that raises is reported as a single failed check rather than
    aborting the run; an injected fault may surface as an exception.
    """
    if names is None:
        names = list(SUITES)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown suite(s): {', '.join(unknown)}")
    results = []
    for i, name in enumerate(names):
        rng = np.random.default_rng([seed, i, len(name)])
        t0 = time.perf_counter()
        try:
            checks = SUITES[name](rng)
        except Exception as exc:  # noqa: BLE001 - reported, not swallowed
            checks = [Check(f"{name} completed", False,
                            f"{type(exc).__name__}: {exc}")]
        results.append(SuiteResult(suite=name, checks=checks,
                                   elapsed_s=time.perf_counter() - t0))
    return results


def format_report(results, verbose=False):
    lines = []
    width = max(len(r.suite) for r in results)
    for r in results:
        status = "ok" if r.ok else "FAIL"
        lines.append(f"suite {r.suite:<{width}}  {r.n_passed:3d}/"
                     f"{len(r.checks):<3d} {status:<4} "
                     f"({r.elapsed_s:.2f}s)")
        shown = r.checks if verbose else [c for c in r.checks if not c.passed]
        for chk in shown:
            mark = "pass" if chk.passed else "FAIL"
            detail = f"  [{chk.detail}]" if chk.detail else ""
            lines.append(f"  {mark}  {chk.name}{detail}")
    total = sum(len(r.checks) for r in results)
    failed = sum(r.n_failed for r in results)
    lines.append(f"total: {total} checks, {total - failed} passed, "
                 f"{failed} failed")
    return "\n".join(lines)


def main(argv=None):
    import argparse

    parser = argparse.ArgumentParser(
        prog="mosgeom-verify", description="run the library self-checks")
    parser.add_argument("--suite", action="append", default=None,
                        help="suite name; repeatable (default: all)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--verbose", action="store_true",
                        help="print passing checks too")
    args = parser.parse_args(argv)
    try:
        results = run_suites(args.suite, seed=args.seed)
    except KeyError as exc:
        print(exc.args[0], file=sys.stderr)
        return 2
    print(format_report(results, verbose=args.verbose))
    return 0 if all(r.ok for r in results) else 1


if __name__ == "__main__":
    sys.exit(main())
