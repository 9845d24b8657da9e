"""Finite-difference verification of every primitive and of the full model.

Analytic gradients come from the tape; numeric ones from central differences
on float64 copies of the inputs. The relative error of one input is
``|a - n| / max(|a|, |n|, 1e-10)`` over the checked elements (vector norms).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

PRIMITIVE_TOL = 1e-4
MODEL_TOL = 1e-3
PRIMITIVE_STEP = 1e-4
MODEL_STEP = 1e-6


@dataclass
class FamilyResult:
    family: str
    worst: float
    tolerance: float
    cases: int

    @property
    def passed(self):
        return self.worst < self.tolerance


def rel_error(a, n):
    a = np.asarray(a, dtype=np.float64).ravel()
    n = np.asarray(n, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-10)
    return float(np.linalg.norm(a - n) / denom)


def _shape(rng, ndim=2):
    return tuple(int(s) for s in rng.integers(1, 6, size=ndim))


def _vals(rng, shape, away_from_zero=False):
    x = rng.uniform(-2.0, 2.0, size=shape)
    if away_from_zero:
        x = np.where(np.abs(x) < 0.05, np.sign(x + 1e-12) * 0.05 + x, x)
    return x


def _case(kind, rng):
    """Random inputs for one primitive: ``(arrays, fn(tensors) -> Tensor)``."""
    if kind == "matmul":
        n, k, m = (int(v) for v in rng.integers(1, 6, size=3))
        return [_vals(rng, (n, k)), _vals(rng, (k, m))], lambda a, b: ad.matmul(a, b)
    if kind in ("add", "elementwise_mul"):
        shape = _shape(rng)
        other = [shape, (shape[-1],), (shape[0], 1), (1,)][int(rng.integers(4))]
        fn = ad.add if kind == "add" else ad.elementwise_mul
        return [_vals(rng, shape), _vals(rng, other)], lambda a, b: fn(a, b)
    if kind == "relu":
        return [_vals(rng, _shape(rng), away_from_zero=True)], ad.relu
    if kind == "sigmoid":
        return [_vals(rng, _shape(rng))], ad.sigmoid
    if kind == "softmax_lastdim":
        return [_vals(rng, _shape(rng))], ad.softmax_lastdim
    if kind == "layernorm_lastdim":
        n, k = int(rng.integers(1, 6)), int(rng.integers(2, 7))
        return [_vals(rng, (n, k))], ad.layernorm_lastdim
    if kind == "scalar_scale":
        c = float(rng.uniform(-2, 2))
        return [_vals(rng, _shape(rng))], lambda a: ad.scalar_scale(a, c)
    if kind == "sum":
        return [_vals(rng, _shape(rng))], ad.sum_all
    if kind == "concat_lastdim":
        n = int(rng.integers(1, 5))
        parts = [_vals(rng, (n, int(rng.integers(1, 4)))) for _ in range(int(rng.integers(1, 4)))]
        return parts, lambda *ts: ad.concat_lastdim(ts)
    if kind == "take_lastdim":
        shape = _shape(rng)
        idx = int(rng.integers(shape[-1]))
        return [_vals(rng, shape)], lambda a: ad.take_lastdim(a, idx)
    if kind == "embedding_lookup":
        rows, dim = int(rng.integers(2, 7)), int(rng.integers(1, 5))
        ids = rng.integers(0, rows, size=int(rng.integers(1, 8)))
        return [_vals(rng, (rows, dim))], lambda t: ad.embedding_lookup(t, ids)
    if kind == "bce":
        shape = _shape(rng)
        y = rng.integers(0, 2, size=shape)
        return [rng.uniform(0.05, 0.95, size=shape)], lambda p: ad.bce(p, y)
    raise ValueError(f"no gradient case for primitive {kind!r}")


def _scalarize(out, weights):
    return ad.sum_all(ad.elementwise_mul(out, ad.Tensor(weights)))


def _max_elements(arr, rng, limit):
    n = arr.size
    return np.arange(n) if n <= limit else rng.choice(n, size=limit, replace=False)


def check_primitive(kind, shapes=10, seed=0, step=PRIMITIVE_STEP, max_elements=40):
    """Worst relative error of ``kind`` over ``shapes`` random cases."""
    rng = np.random.default_rng([seed, ad.PRIMITIVES.index(kind)])
    worst = 0.0
    for _ in range(shapes):
        arrays, fn = _case(kind, rng)
        probe = fn(*[ad.Tensor(a.copy()) for a in arrays])
        weights = rng.uniform(0.5, 1.5, size=probe.shape)

        def value(arrs):
            return float(_scalarize(fn(*[ad.Tensor(a) for a in arrs]), weights).data[0])

        tensors = [ad.Tensor(a.copy()) for a in arrays]
        tape = ad.Tape()
        with tape:
            tape.watch(*tensors)
            loss = _scalarize(fn(*tensors), weights)
            grads = tape.backward(loss)
        for i, t in enumerate(tensors):
            analytic = grads.of(t).ravel()
            idx = _max_elements(arrays[i], rng, max_elements)
            numeric = np.empty(len(idx))
            for j, flat in enumerate(idx):
                plus = [a.copy() for a in arrays]
                minus = [a.copy() for a in arrays]
                plus[i].flat[flat] += step
                minus[i].flat[flat] -= step
                numeric[j] = (value(plus) - value(minus)) / (2 * step)
            worst = max(worst, rel_error(analytic[idx], numeric))
        tape.clear()
    return worst


def _tiny_model(seed):
    from .data import Batch, FeatureSpace, Field
    from .model import HyperParams, MDMTModel

    space = FeatureSpace((Field("user", 5), Field("item", 4)), domain_count=2, task_count=2)
    hp = HyperParams(embedding_dim=4, hidden_dim=4, expert_dim=4, tower_hidden=4, n_shared=2)
    model = MDMTModel(space, hp, seed=seed).astype(np.float64)
    rng = np.random.default_rng([seed, 99])
    for name in model.fusion_names:
        model.params[name].data[...] = rng.uniform(-1.0, 1.0, size=model.params[name].shape)
    model.params["dr.W_sh"].data[...] = rng.uniform(0.5, 1.5, size=model.params["dr.W_sh"].shape)
    batches = []
    for d in range(2):
        feats = np.stack([rng.integers(0, 5, 3), rng.integers(0, 4, 3)], axis=1)
        labels = rng.integers(0, 2, size=(3, 2))
        batches.append(Batch(d, feats, labels, np.arange(3)))
    return model, batches


def _model_loss(model, batches):
    total = None
    for b in batches:
        loss = ad.bce(model.forward(b), b.labels)
        total = loss if total is None else ad.add(total, loss)
    return total


def check_model(seed=0, n_params=20, step=MODEL_STEP):
    """End-to-end check on a D=2, T=2, N=2 model with all dims 4 and batch 3.

    Returns ``{family: worst relative error}``; each of the four fusion logit
    vectors is its own family.
    """
    model, batches = _tiny_model(seed)
    rng = np.random.default_rng([seed, 7])
    families = {}
    for group, names in model.groups.items():
        if group == "fusion_logits":
            for n in names:
                families[n] = [n]
        else:
            families[group] = list(names)

    picks = []
    for fam, names in families.items():
        picks.append((fam, names[int(rng.integers(len(names)))]))
    all_names = [(fam, n) for fam, names in families.items() for n in names]
    while len(picks) < n_params:
        picks.append(all_names[int(rng.integers(len(all_names)))])

    tape = ad.Tape()
    with tape:
        tape.watch(*model.params.values())
        grads = tape.backward(_model_loss(model, batches))
    analytic = {n: grads.of(t).copy() for n, t in model.params.items()}
    tape.clear()

    worst = {fam: 0.0 for fam in families}
    for fam, name in picks:
        p = model.params[name].data
        g = analytic[name]
        # favour elements with a live gradient so the check is informative
        live = np.flatnonzero(np.abs(g) > 1e-12)
        flat = int(rng.choice(live)) if len(live) else int(rng.integers(p.size))
        orig = p.flat[flat]
        p.flat[flat] = orig + step
        up = float(_model_loss(model, batches).data[0])
        p.flat[flat] = orig - step
        down = float(_model_loss(model, batches).data[0])
        p.flat[flat] = orig
        numeric = (up - down) / (2 * step)
        worst[fam] = max(worst[fam], rel_error([g.flat[flat]], [numeric]))
    return worst


def run_all(seed=0, shapes=10):
    """Every primitive family and every model parameter family."""
    results = [FamilyResult(k, check_primitive(k, shapes, seed), PRIMITIVE_TOL, shapes) for k in ad.PRIMITIVES]
    for fam, err in check_model(seed).items():
        results.append(FamilyResult(f"model:{fam}", err, MODEL_TOL, 1))
    return results
