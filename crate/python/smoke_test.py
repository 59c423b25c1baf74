"""Smoke test for the Python bindings.

Build and install first:

    pip install --no-build-isolation -e crates/py
    python python/smoke_test.py
"""

import math
import pathlib
import tempfile

import tunnelshock as ts

SCENARIOS = pathlib.Path(__file__).resolve().parent.parent / "scenarios"


def check_expressions():
    assert ts.evaluate("1+2*3", 0.0) == 7.0
    assert ts.evaluate("tanh(x)", 0.0) == 0.0
    try:
        ts.evaluate("x+", 0.0)
    except ValueError as e:
        assert "offset 2" in str(e), e
    else:
        raise AssertionError("malformed expression accepted")


def check_rarefaction():
    sc = ts.Scenario.from_file(str(SCENARIOS / "rarefaction.ini"))
    xs = [-1.0, 0.0, 1.0]
    assert all(abs(r - 0.5) < 1e-6 for r in sc.density(1.0, xs))
    s, u = sc.essential(1.0, xs)
    # S = x^2 / (2 (1 + t)), u = x / (1 + t)
    assert all(abs(a - x * x / 4) < 1e-6 for a, x in zip(s, xs))
    assert all(abs(v - x / 2) < 1e-6 for v, x in zip(u, xs))
    assert sc.singularities() == []


def check_tanh():
    sc = ts.Scenario.from_file(str(SCENARIOS / "tanh.ini"))
    t, x, _ = sc.singularities()[0]
    assert abs(t - 1.0) < 1e-3 and abs(x) < 1e-3
    shock = sc.shocks()[0]
    assert shock["parents"] is None and shock["merged_into"] is None
    assert all(abs(c) < 1e-6 for c in shock["c"])
    m0 = sum(sc.mass(0.0))
    m3 = sum(sc.mass(3.0))
    assert abs(m3 - m0) <= 1e-5 * m0
    tables = sc.run("singularity")
    assert list(tables) == ["singularity.csv"]


def check_cli():
    with tempfile.TemporaryDirectory() as out:
        code = ts.main(["--scenario", str(SCENARIOS / "merge.ini"), "--out", out, "shock"])
        assert code == 0
        merges = (pathlib.Path(out) / "merges.csv").read_text().splitlines()
        assert len(merges) == 2
    assert ts.main(["--scenario", "/nonexistent.ini", "evolve"]) == 66
    bad = ts.Scenario.parse
    try:
        bad("[symbol]\nA = 0.5\n[initial]\nS0 = x^2/*2\n")
    except ValueError as e:
        assert "S0" in str(e)
    else:
        raise AssertionError("malformed scenario accepted")


if __name__ == "__main__":
    for check in (check_expressions, check_rarefaction, check_tanh, check_cli):
        check()
        print(f"ok {check.__name__}")
    assert not math.isnan(ts.evaluate("exp(x)-1", 0.0))
    print("smoke test passed")
