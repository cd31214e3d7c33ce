"""Self-check runner: fresh-build pass, suite filtering, fault injection."""
import numpy as np
import pytest

import mosgeom.geometry as geo
import mosgeom.verify as ver


def test_fresh_build_passes_every_suite(kernel_backend):
    results = ver.run_suites(seed=0)
    assert [r.suite for r in results] == list(ver.SUITES)
    for r in results:
        failing = [c.name for c in r.checks if not c.passed]
        assert r.ok, (r.suite, failing)


def test_suite_filter_runs_only_requested():
    results = ver.run_suites(["lemma1"], seed=0)
    assert [r.suite for r in results] == ["lemma1"]
    assert results[0].ok
    assert len(results[0].checks) == 4 * 6  # gamma grid x kappa grid


def test_unknown_suite_rejected():
    with pytest.raises(KeyError):
        ver.run_suites(["lemma1", "nope"])


def test_checks_deterministic_for_seed():
    a = ver.run_suites(["roundtrip", "auxloss"], seed=3)
    b = ver.run_suites(["roundtrip", "auxloss"], seed=3)
    flat_a = [(c.name, c.passed, c.detail) for r in a for c in r.checks]
    flat_b = [(c.name, c.passed, c.detail) for r in b for c in r.checks]
    assert flat_a == flat_b


def test_flipped_lift_sign_breaks_lemma1_and_constraints(monkeypatch):
    orig = geo.mos_lift

    class _FlippedSign:
        def __init__(self, cur):
            self._cur = cur

        def __getattr__(self, attr):
            if attr == "sgn_neg":
                return -self._cur.sgn_neg
            return getattr(self._cur, attr)

    monkeypatch.setattr(geo, "mos_lift",
                        lambda s, kappa, mode="verify":
                        orig(s, _FlippedSign(kappa), mode))
    results = {r.suite: r for r in
               ver.run_suites(["lemma1", "constraints"], seed=0)}
    assert not results["lemma1"].ok
    assert not results["constraints"].ok


def test_report_formatting_lists_failures():
    results = [ver.SuiteResult("demo", [
        ver.Check("good", True, ""),
        ver.Check("bad", False, "off by 1")])]
    text = ver.format_report(results)
    assert "suite demo" in text
    assert "FAIL  bad  [off by 1]" in text
    assert "good" not in text.replace("1/2", "")  # passing checks hidden
    assert "total: 2 checks, 1 passed, 1 failed" in text
    verbose = ver.format_report(results, verbose=True)
    assert "pass  good" in verbose


def test_main_exit_codes(capsys, monkeypatch):
    assert ver.main(["--suite", "auxloss", "--suite", "eq9"]) == 0
    out = capsys.readouterr().out
    assert "suite auxloss" in out and "suite eq9" in out and "total:" in out

    assert ver.main(["--suite", "nope"]) == 2

    def explode(rng):
        raise RuntimeError("boom")

    monkeypatch.setitem(ver.SUITES, "auxloss", explode)
    assert ver.main(["--suite", "auxloss"]) == 1
    assert "RuntimeError: boom" in capsys.readouterr().out


def test_suite_exception_becomes_failed_check(monkeypatch):
    def explode(rng):
        raise ValueError("injected")

    monkeypatch.setitem(ver.SUITES, "layer", explode)
    results = ver.run_suites(["layer", "eq9"], seed=0)
    assert not results[0].ok
    assert "injected" in results[0].checks[0].detail
    assert results[1].ok  # later suites still run
