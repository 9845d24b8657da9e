import numpy as np

from mdmt import autodiff as ad
from mdmt import gradcheck


def test_every_family_passes():
    results = gradcheck.run_all()
    bad = [(r.family, r.worst) for r in results if not r.passed]
    assert not bad
    prims = [r.family for r in results if not r.family.startswith("model:")]
    assert sorted(prims) == sorted(ad.PRIMITIVES)
    assert len(prims) == len(set(prims))
    model = {r.family for r in results if r.family.startswith("model:")}
    for fam in ("fusion.alpha_d", "fusion.alpha_t", "fusion.beta_d", "fusion.beta_t", "embedding", "gates", "towers"):
        assert f"model:{fam}" in model


def corrupted_sigmoid(a):
    from scipy.special import expit

    s = expit(a.data)

    def bw(g):
        return (g * s * (1 - s) * 1.1,)

    return ad._emit("sigmoid", (a,), s, bw)


def test_corrupted_sigmoid_is_caught(monkeypatch):
    monkeypatch.setattr(ad, "sigmoid", corrupted_sigmoid)
    assert gradcheck.check_primitive("sigmoid") > 1e-2
    assert gradcheck.check_primitive("relu") < gradcheck.PRIMITIVE_TOL
    # apply_primitive resolves the patched function too
    x = ad.Tensor(np.array([0.3]))
    tape = ad.Tape()
    with tape:
        tape.watch(x)
        g = tape.backward(ad.apply_primitive("sigmoid", x)).of(x)
    s = 1 / (1 + np.exp(-0.3))
    assert abs(g[0] - 1.1 * s * (1 - s)) < 1e-12


def test_rel_error():
    assert gradcheck.rel_error([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert gradcheck.rel_error([0.0], [0.0]) == 0.0
    assert abs(gradcheck.rel_error([1.0], [1.1]) - 0.1 / 1.1) < 1e-12
