"""Smoke test for the freebrw extension module.

Build and install first:  pip install --no-build-isolation -e crates/py
Then run:  python python/smoke_test.py
"""

import math
import os
import tempfile

import freebrw


def main():
    g = freebrw.FreeProduct([2, 3])
    assert g.rank == 2
    # a = 1:1, b = 2:1; (a b^2 a b)(b^2 a) = a b^2
    assert g.multiply("1:1-2:2-1:1-2:1", "2:2-1:1") == "1:1-2:2"
    assert g.length("1:1-2:2") == 2
    assert g.multiply("1:1", g.inverse("1:1")) == "e"
    assert len(g.ball(2)) == 4  # |x| < 2: e, a, b, b^2

    tree = freebrw.FreeProduct([2, 2, 2])
    law = freebrw.StepLaw.simple(tree)
    assert law.k == 1
    d = freebrw.exact_distribution(tree, law, 2)
    assert abs(sum(d.values()) - 1.0) < 1e-12
    assert abs(d["e"] - 1.0 / 3.0) < 1e-12

    spec = freebrw.spectral_radius(tree, law, 20)
    r = 2.0 * math.sqrt(2.0) / 3.0
    assert abs(spec["point"] - r) / r < 0.02, spec["point"]

    t = [i * 0.01 - 30.0 for i in range(6001)]
    lam = [math.log((1.0 + math.exp(s)) / 2.0) for s in t]
    xs = [0.01 + 0.98 * i / 100 for i in range(101)]
    vals, tags = freebrw.legendre_transform(t, lam, xs, 1.0)
    exact = [x * math.log(x) + (1 - x) * math.log(1 - x) + math.log(2) for x in xs]
    assert max(abs(a - b) for a, b in zip(vals, exact)) < 1e-6
    assert all(tag == "finite" for tag in tags)

    nu, vec, reducible = freebrw.perron_eigenvalue([[0.5, 0.7], [0.6, 0.5]])
    assert abs(nu - (0.5 + math.sqrt(0.42))) < 1e-9 and not reducible
    assert abs(sum(vec) - 1.0) < 1e-12

    gens = freebrw.simulate_brw(tree, law, [0.0, 0.8, 0.2], 10, seed=3)
    assert len(gens) == 11 and gens[0] == (0, 1, 0, 0)
    assert all(m <= n for n, _, m, _ in gens)

    config = """
experiment = "validate"
master_seed = 1
[group]
factors = [{ preset = "cyclic:2" }, { preset = "cyclic:2" }, { preset = "cyclic:2" }]
[offspring]
pmf = [0.0, 0.8, 0.2]
"""
    eff = freebrw.validate_config(config)
    assert eff["step"]["alphas"] == [1 / 3, 1 / 3, 1 / 3]
    try:
        freebrw.validate_config(config.replace("[0.0, 0.8, 0.2]", "[0.1, 0.7, 0.2]"))
    except ValueError as e:
        assert "A2" in str(e)
    else:
        raise AssertionError("pi(0) > 0 accepted")

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "c.toml")
        with open(path, "w") as f:
            f.write(config)
        out = os.path.join(tmp, "out")
        assert freebrw.run_experiment(path, out) == 0
        assert "Run report: validate" in freebrw.report(out)

    print("freebrw smoke test passed")


if __name__ == "__main__":
    main()
