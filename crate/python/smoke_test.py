"""Smoke test for the compiled `multical` extension.

Build it first:
    cargo build --release -p multical-py --features extension-module
    cp target/release/libmultical.so python/multical.so
"""

import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import multical


def weighted_total(w, p):
    return sum(a * b for a, b in zip(w, p))


def main():
    assert multical.isotonic_fit([1, 2, 3], [3, 1, 2], [1, 1, 1]) == [2.0, 2.0, 2.0]

    sim = multical.simulate(20000, seed=3, levels=4, beta_s=0.5)
    pf, base = sim["portfolio"], sim["premium"]
    n_total = sum(pf.claims)

    bc, bc_model = multical.balance_correct(pf, base)
    assert abs(weighted_total(pf.exposure, bc) - n_total) < 1e-9 * n_total
    assert bc_model.apply(pf, base) == bc

    mbc, mbc_model = multical.multibalance_correct(pf, base)
    assert abs(weighted_total(pf.exposure, mbc) - n_total) < 1e-9 * n_total

    it, it_model = multical.iterate_categorical(pf, base)
    print("iterative:", it_model, "iterations:", len(it_model.trace))
    replay = multical.Model.from_json(it_model.to_json()).apply(pf, base)
    assert replay == it, "JSON round trip must replay bit-exactly"

    before = multical.evaluate(pf, base)
    after = multical.evaluate(pf, it)
    print("max cell bias before/after: %.4g / %.4g" % (before["max_abs_bias"], after["max_abs_bias"]))
    assert after["max_abs_bias"] < before["max_abs_bias"]
    assert after["deviance"] < before["deviance"]

    d0 = multical.poisson_deviance(pf.claims, pf.exposure, base)
    assert math.isclose(d0, before["deviance"], rel_tol=1e-12)
    assert -1.0 < multical.gini(base, pf.claims, pf.exposure) < 1.0

    cont = multical.simulate(3000, seed=4, levels=0, beta_s=0.5)
    cpf = cont["portfolio"]
    assert cpf.is_continuous
    lm, lm_model = multical.local_multibalance_correct(cpf, cont["premium"])
    assert lm_model.mode == "local-mbc"
    assert lm_model.apply(cpf, cont["premium"]) == lm

    try:
        multical.balance_correct(pf, [0.1])
    except ValueError as e:
        print("length mismatch rejected:", e)
    else:
        raise AssertionError("expected ValueError")

    print("smoke test passed")


if __name__ == "__main__":
    main()
