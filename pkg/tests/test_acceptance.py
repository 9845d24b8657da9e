"""Acceptance criteria, one test each, with a PASS/FAIL line per criterion
printed in the terminal summary (and immediately, with ``-s``)."""

import os
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from mdmt import autodiff as ad
from mdmt import gradcheck
from mdmt.config import DataConfig, TrainConfig
from mdmt.data import Batch, SyntheticSpec, generate_synthetic, load_interactions, split_dataset
from mdmt.metrics import auc, evaluate, logloss, overall_mean, rela_impr
from mdmt.model import (
    FusionWeights,
    HyperParams,
    MDMTModel,
    affine,
    biased_mix,
    mixing_coefficients,
    realize_fusion_weights,
)
from mdmt.trainer import fit, load_checkpoint, save_checkpoint

RESULTS = {}


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    RESULTS[str(n)] = line
    print(line)
    assert ok, line


# 1 ---------------------------------------------------------------------------


def test_criterion_1_gradient_correctness():
    t0 = time.perf_counter()
    results = gradcheck.run_all(seed=0, shapes=10)
    elapsed = time.perf_counter() - t0
    prims = [r for r in results if not r.family.startswith("model:")]
    fams = [r for r in results if r.family.startswith("model:")]
    covered = {r.family for r in prims} == set(ad.PRIMITIVES)
    fusion = {f"model:fusion.{k}" for k in ("alpha_d", "alpha_t", "beta_d", "beta_t")} <= {r.family for r in fams}
    worst_p = max(r.worst for r in prims)
    worst_m = max(r.worst for r in fams)
    ok = covered and fusion and worst_p < 1e-4 and worst_m < 1e-3 and elapsed < 30
    record(1, ok, f"primitives worst {worst_p:.2e} (<1e-4), model worst {worst_m:.2e} (<1e-3), {elapsed:.1f}s (<30s)")


# 2 ---------------------------------------------------------------------------


def pairwise_auc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    diff = pos[:, None] - neg[None, :]
    wins = (diff > 0).sum() + 0.5 * (diff == 0).sum()
    return wins / (len(pos) * len(neg))


def scalar_logloss(s, y):
    import math

    tot = 0.0
    for p, label in zip(s.tolist(), y.tolist()):
        p = min(max(p, 1e-7), 1 - 1e-7)
        tot -= label * math.log(p) + (1 - label) * math.log(1 - p)
    return tot / len(s)


def test_criterion_2_metric_oracles():
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    mismatches, worst_ll, cases = 0, 0.0, 0
    while cases < 1000:
        n = int(rng.integers(2, 120))
        levels = int(rng.integers(2, 20))
        s = rng.integers(0, levels, n) / levels  # coarse grid forces ties
        y = rng.integers(0, 2, n)
        if y.min() == y.max():
            continue
        cases += 1
        if auc(s, y) != pairwise_auc(s, y):
            mismatches += 1
        p = rng.uniform(0, 1, n)
        worst_ll = max(worst_ll, abs(logloss(p, y) - scalar_logloss(p, y)))
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and worst_ll <= 1e-9 and elapsed < 10
    record(2, ok, f"AUC exact on {cases - mismatches}/{cases} tied cases, LogLoss max diff {worst_ll:.1e}, {elapsed:.2f}s")


# 3 ---------------------------------------------------------------------------

# reference per-pair AUC x100 on MovieLens (single MLP, full model)
ROW_MLP = [75.02, 76.40, 76.27, 78.66, 73.21, 74.15]
ROW_OURS = [76.61, 78.13, 77.51, 79.33, 74.47, 76.09]


def test_criterion_3_paper_pinned_arithmetic():
    t0 = time.perf_counter()
    checks = {
        2.07: rela_impr(0.7661, 0.7607),
        2.54: rela_impr(0.7702, 0.7635),
        5.48: rela_impr(0.6637, 0.6552),
        11.12: rela_impr(0.6589, 0.6430),
    }
    ri_ok = all(abs(v - k) <= 0.01 for k, v in checks.items())
    mlp = round(overall_mean(ROW_MLP), 2)
    ours = round(overall_mean(ROW_OURS), 2)
    elapsed = time.perf_counter() - t0
    ok = ri_ok and mlp == 75.62 and ours == 77.02 and elapsed < 1
    got = ", ".join(f"{v:.3f}" for v in checks.values())
    record(3, ok, f"RelaImpr {got}; overall {mlp} and {ours}")


# 4 ---------------------------------------------------------------------------


def test_criterion_4_fusion_invariants():
    from mdmt.data import FeatureSpace, Field

    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    worst_gate, coef_ok, weight_ok, worst_perm = 0.0, True, True, 0.0
    for _ in range(100):
        D, T, N = (int(v) for v in rng.integers(2, 5, 3))
        space = FeatureSpace((Field("a", int(rng.integers(2, 20))), Field("b", int(rng.integers(2, 20)))), D, T)
        hp = HyperParams(embedding_dim=4, hidden_dim=int(rng.integers(2, 9)), expert_dim=4, tower_hidden=3, n_shared=N)
        m = MDMTModel(space, hp, seed=int(rng.integers(1 << 30)))
        d = int(rng.integers(D))
        b = int(rng.integers(1, 9))
        feats = np.stack([rng.integers(0, f.vocab_size, b) for f in space.fields], axis=1)
        h = m.stages(Batch(d, feats, np.zeros((b, T)), np.arange(b)))["h"]
        for t in range(T):
            g = ad.softmax_lastdim(affine(h, *m.gates[(d, t)])).data
            assert (g >= 0).all()
            worst_gate = max(worst_gate, float(np.abs(g.sum(-1) - 1).max()))
        for K in (D, T):
            beta = Fraction(int(rng.integers(1, 10**6)), 10**6)
            c = mixing_coefficients(K, int(rng.integers(K)), beta)
            coef_ok &= sum(c) == 1
        logits = FusionWeights(*(rng.uniform(-30, 30, n) for n in (D, T, D, T)))
        w = realize_fusion_weights(logits)
        for v in (w.alpha_d, w.alpha_t, w.beta_d, w.beta_t):
            weight_ok &= bool(np.all((v > 0) & (v < 1)))
        K = max(D, 3)
        outs = [ad.Tensor(rng.standard_normal((b, 4))) for _ in range(K)]
        focal = int(rng.integers(K))
        others = [k for k in range(K) if k != focal]
        perm = list(rng.permutation(others))
        reordered = list(outs)
        for src, dst in zip(others, perm):
            reordered[dst] = outs[src]
        beta = float(rng.uniform(0.01, 0.99))
        diff = np.abs(biased_mix(outs, focal, beta).data - biased_mix(reordered, focal, beta).data).max()
        worst_perm = max(worst_perm, float(diff))
    elapsed = time.perf_counter() - t0
    ok = worst_gate <= 1e-6 and coef_ok and weight_ok and worst_perm <= 1e-12 and elapsed < 10
    record(
        4,
        ok,
        f"gate |sum-1| {worst_gate:.1e}, coefficient sums exact: {coef_ok}, weights in (0,1): {weight_ok}, "
        f"permutation diff {worst_perm:.1e}, {elapsed:.2f}s",
    )


# 5 ---------------------------------------------------------------------------


def test_criterion_5_ablation_equivalence():
    spec = SyntheticSpec(domain_counts=(1400, 400, 200), vocab_sizes=(300, 200), seed=5)
    t0 = time.perf_counter()
    base = dict(epochs=3, patience=10, seed=11, data=DataConfig(synth=spec))
    data = split_dataset(generate_synthetic(spec))
    full = fit(TrainConfig(fusion_lr=0.0, **base), data[:2])[1]
    frozen = fit(TrainConfig(variant="no_automl", **base), data[:2])[1]
    elapsed = time.perf_counter() - t0
    same = full.losses() == frozen.losses() and len(full.losses()) == 3
    same_valid = [r.valid_overall_auc for r in full.records] == [r.valid_overall_auc for r in frozen.records]
    ok = same and same_valid and elapsed < 60
    record(5, ok, f"3-epoch loss trajectories bit-identical: {same}, {elapsed:.1f}s")


# 6 ---------------------------------------------------------------------------

PLANTED = SyntheticSpec(domain_counts=(21000, 6000, 3000), task_count=2, rho_dom=0.8, rho_task=0.8, noise=0.1, seed=0)


@pytest.fixture(scope="module")
def planted_runs():
    t0 = time.perf_counter()
    data = split_dataset(generate_synthetic(PLANTED))
    aucs = {}
    for variant in ("full", "mlp_single", "shared_only"):
        for seed in (0, 1, 2):
            cfg = TrainConfig(variant=variant, seed=seed, data=DataConfig(synth=PLANTED))
            model, _h, _b = fit(cfg, data[:2])
            aucs.setdefault(variant, []).append(evaluate(model, data[2]).overall_auc)
    return aucs, time.perf_counter() - t0


def _planted_gap(planted_runs, baseline):
    aucs, elapsed = planted_runs
    gap = 100 * (np.mean(aucs["full"]) - np.mean(aucs[baseline]))
    seeds = "; ".join(f"{v} " + "/".join(f"{100 * a:.2f}" for a in aucs[v]) for v in ("full", baseline))
    return gap, seeds, elapsed


@pytest.mark.slow
def test_criterion_6a_planted_signal_vs_single_mlp(planted_runs):
    gap, seeds, elapsed = _planted_gap(planted_runs, "mlp_single")
    record("6a", gap >= 2.0 and elapsed < 600, f"full - MlpSingle = {gap:+.2f} pts (>=2.0); {seeds}")


@pytest.mark.slow
def test_criterion_6b_planted_signal_vs_shared_only(planted_runs):
    gap, seeds, elapsed = _planted_gap(planted_runs, "shared_only")
    record("6b", gap >= 0.5 and elapsed < 600, f"full - SharedOnly = {gap:+.2f} pts (>=0.5); {seeds}")


# 7 ---------------------------------------------------------------------------


def test_criterion_7_determinism_and_persistence(tmp_path):
    spec = SyntheticSpec(domain_counts=(1500, 600, 400), vocab_sizes=(200, 100), seed=7)
    cfg = TrainConfig(epochs=4, patience=10, seed=3, data=DataConfig(synth=spec))
    t0 = time.perf_counter()
    data = split_dataset(generate_synthetic(spec))
    saved = {}
    _m, h1, best = fit(cfg, data[:2], on_epoch=lambda e, c: saved.setdefault(e, c))
    _m, h2, _b = fit(cfg, data[:2])
    identical = h1.to_jsonl() == h2.to_jsonl()

    p = tmp_path / "mid.ckpt"
    save_checkpoint(saved[2], p)
    _m, h3, _b = fit(cfg, data[:2], resume=load_checkpoint(p))
    resumed = [r.to_json() for r in h3.records] == [r.to_json() for r in h1.records[2:]]

    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(best, a)
    save_checkpoint(load_checkpoint(a), b)
    roundtrip = a.read_bytes() == b.read_bytes()
    elapsed = time.perf_counter() - t0
    ok = identical and resumed and roundtrip and elapsed < 120
    record(7, ok, f"histories identical: {identical}, resume matches: {resumed}, checkpoint bytes round-trip: {roundtrip}, {elapsed:.1f}s")


# 8 ---------------------------------------------------------------------------

ML_DIR = os.environ.get("MDMT_MOVIELENS_DIR", "")
if not (ML_DIR and (Path(ML_DIR) / "ratings.dat").exists()):
    RESULTS["8"] = "criterion 8: SKIPPED - MovieLens-1M not available (set MDMT_MOVIELENS_DIR)"


@pytest.mark.slow
@pytest.mark.skipif(
    not (ML_DIR and (Path(ML_DIR) / "ratings.dat").exists()),
    reason="MovieLens-1M not available; set MDMT_MOVIELENS_DIR to the extracted ml-1m directory",
)
def test_criterion_8_movielens_soft_reproduction(tmp_path):
    from mdmt.data import MOVIELENS_SCHEMA, movielens_to_csv

    t0 = time.perf_counter()
    csv_path = tmp_path / "ml.csv"
    counts = movielens_to_csv(ML_DIR, csv_path)
    ds = load_interactions(csv_path, MOVIELENS_SCHEMA)
    data = split_dataset(ds)
    dc = DataConfig(source="csv", path=str(csv_path), label_cols=("click", "like"), feature_cols=MOVIELENS_SCHEMA.features)
    aucs = {}
    for variant in ("full", "mlp_single"):
        for seed in range(5):
            model, _h, _b = fit(TrainConfig(variant=variant, seed=seed, lr=1e-2, data=dc), data[:2])
            aucs.setdefault(variant, []).append(evaluate(model, data[1]).overall_auc)
    elapsed = time.perf_counter() - t0
    full = 100 * np.mean(aucs["full"])
    mlp = 100 * np.mean(aucs["mlp_single"])
    in_band = abs(full - 77.02) <= 2.0
    detail = (
        f"domain counts {counts}; full {full:.2f} vs MlpSingle {mlp:.2f}; "
        f"absolute band 77.02+-2.0 {'met' if in_band else 'missed (non-blocking)'}; {elapsed:.0f}s"
    )
    record(8, full > mlp and elapsed < 1800, detail)
