"""Ranking and calibration metrics per (domain, task) and their aggregation."""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import kernels

LOGLOSS_CLAMP = 1e-7


class UndefinedAUCError(ValueError):
    """AUC needs at least one positive and one negative label."""


def auc(scores, labels):
    """Probability that a random positive outranks a random negative (ties count
    one half), via the tie-averaged rank-sum statistic."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(np.int8)
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.shape} vs {y.shape}")
    npos = int(y.sum())
    nneg = len(y) - npos
    if npos == 0 or nneg == 0:
        raise UndefinedAUCError(f"AUC undefined with {npos} positives and {nneg} negatives")
    order = np.argsort(s, kind="mergesort")
    rank_sum = kernels.ranksum_positive(s[order], y[order])
    u = rank_sum - npos * (npos + 1) / 2.0
    return u / (npos * nneg)


def logloss(scores, labels):
    """Mean binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7]."""
    p = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.size == 0:
        raise ValueError("logloss of an empty input")
    if p.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {p.shape} vs {y.shape}")
    p = np.clip(p, LOGLOSS_CLAMP, 1 - LOGLOSS_CLAMP)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def rela_impr(auc_model, auc_base):
    """Relative AUC improvement in percent, measured from the 0.5 chance level."""
    if not auc_base > 0.5:
        raise ValueError(f"RelaImpr undefined for baseline AUC {auc_base} <= 0.5")
    return ((auc_model - 0.5) / (auc_base - 0.5) - 1.0) * 100.0


def overall_mean(values):
    """Unweighted mean over the present (non-None) per-pair values."""
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class PairMetrics:
    auc: float | None
    logloss: float | None
    n_samples: int


@dataclass
class EvalReport:
    split: str
    pairs: dict = field(default_factory=dict)  # (d, t) -> PairMetrics
    baseline_name: str | None = None
    rela_impr: float | None = None

    @property
    def overall_auc(self):
        return overall_mean(m.auc for m in self.pairs.values())

    @property
    def overall_logloss(self):
        return overall_mean(m.logloss for m in self.pairs.values())

    @property
    def n_samples(self):
        return sum(m.n_samples for m in self.pairs.values())

    def compare_to(self, base, name):
        self.baseline_name = name
        a, b = self.overall_auc, base.overall_auc
        self.rela_impr = rela_impr(a, b) if a is not None and b is not None and b > 0.5 else None
        return self

    def records(self):
        out = []
        for (d, t), m in sorted(self.pairs.items()):
            out.append(
                {
                    "split": self.split,
                    "domain": d,
                    "task": t,
                    "auc": m.auc,
                    "logloss": m.logloss,
                    "n_samples": m.n_samples,
                }
            )
        overall = {
            "split": self.split,
            "domain": "all",
            "task": "all",
            "auc": self.overall_auc,
            "logloss": self.overall_logloss,
            "n_samples": self.n_samples,
        }
        if self.baseline_name is not None:
            overall["baseline"] = self.baseline_name
            overall["rela_impr"] = self.rela_impr
        out.append(overall)
        return out

    def to_jsonl(self):
        return "".join(json.dumps(r) + "\n" for r in self.records())

    @classmethod
    def from_jsonl(cls, text):
        rep = None
        for line in text.splitlines():
            if not line.strip():
                continue
            r = json.loads(line)
            if rep is None:
                rep = cls(r["split"])
            if r["domain"] == "all":
                rep.baseline_name = r.get("baseline")
                rep.rela_impr = r.get("rela_impr")
                continue
            rep.pairs[(r["domain"], r["task"])] = PairMetrics(r["auc"], r["logloss"], r["n_samples"])
        return rep


def pair_metrics(scores, labels):
    n = len(labels)
    if n == 0:
        return PairMetrics(None, None, 0)
    try:
        a = auc(scores, labels)
    except UndefinedAUCError:
        a = None
    return PairMetrics(a, logloss(scores, labels), n)


def predict_dataset(model, ds, batch_size=1024):
    """Model predictions ``(n, T)`` in dataset order, computed without a tape."""
    from .data import domain_batches

    out = np.zeros((len(ds), ds.space.task_count), dtype=np.float64)
    if len(ds) == 0:
        return out
    for batch in domain_batches(ds, batch_size, seed=0, shuffle=False):
        out[batch.index] = model.forward(batch).data
    return out


def eval_threads():
    """Worker cap for per-pair evaluation, from ``MDMT_THREADS`` (default 1)."""
    raw = os.environ.get("MDMT_THREADS", "").strip()
    if not raw:
        return 1
    n = int(raw)
    if n < 1:
        raise ValueError(f"MDMT_THREADS must be >= 1, got {raw!r}")
    return n


def report_from_predictions(preds, ds, split=None, threads=None):
    rep = EvalReport(split or ds.split)
    keys = [(d, t) for d in range(ds.space.domain_count) for t in range(ds.space.task_count)]
    masks = [ds.domains == d for d in range(ds.space.domain_count)]

    def one(key):
        d, t = key
        return pair_metrics(preds[masks[d], t], ds.labels[masks[d], t])

    threads = eval_threads() if threads is None else threads
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, keys))
    else:
        results = [one(k) for k in keys]
    # merge in pair order regardless of completion order
    for key, m in zip(keys, results):
        rep.pairs[key] = m
    return rep


def evaluate(model, ds, split=None, batch_size=1024):
    """Per-(domain, task) AUC and LogLoss; overall values are unweighted means."""
    return report_from_predictions(predict_dataset(model, ds, batch_size), ds, split)


# --------------------------------------------------------------------------
# significance across seeds


@dataclass
class WelchResult:
    statistic: float | None
    df: float | None
    p_value: float | None


def welch_t_test(a, b):
    """Two-sided unequal-variance t-test. Undefined cases give ``None`` fields."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("Welch t-test needs at least two values per group")
    ma, mb = a.mean(), b.mean()
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    se2 = va + vb
    if se2 == 0.0:
        if ma == mb:
            return WelchResult(None, None, None)
        return WelchResult(math.copysign(math.inf, ma - mb), None, 0.0)
    t = (ma - mb) / math.sqrt(se2)
    df = se2**2 / (va**2 / (len(a) - 1) + vb**2 / (len(b) - 1))
    p = 2.0 * stats.t.sf(abs(t), df)
    return WelchResult(float(t), float(df), float(p))


@dataclass
class SeedSweepResult:
    seeds: list
    reports: list
    means: dict
    stds: dict
    p_values: dict | None = None
    failures: list = field(default_factory=list)

    def metric_values(self, metric):
        return [getattr(r, metric) for r in self.reports]


def _summarize(values):
    vals = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if len(vals) == 0:
        return None, None
    return float(vals.mean()), (float(vals.std(ddof=1)) if len(vals) > 1 else None)


def seed_sweep(config, seeds, compare=None, data=None, split="test"):
    """Fit and evaluate once per seed; optional Welch tests against another sweep."""
    from dataclasses import replace

    from .trainer import fit, prepare_data

    seeds = list(seeds)
    if len(seeds) < 2:
        raise ValueError("a seed sweep needs at least two seeds")
    if data is None:
        data = prepare_data(config)
    train, valid, test = data
    target = {"train": train, "valid": valid, "test": test}[split]
    reports, ok_seeds, failures = [], [], []
    for s in seeds:
        try:
            model, _hist, _ckpt = fit(replace(config, seed=s), (train, valid))
            reports.append(evaluate(model, target, split))
            ok_seeds.append(s)
        except Exception as e:  # noqa: BLE001 - partial results are reported
            failures.append((s, f"{type(e).__name__}: {e}"))
    means, stds = {}, {}
    for metric in ("overall_auc", "overall_logloss"):
        means[metric], stds[metric] = _summarize(getattr(r, metric) for r in reports)
    result = SeedSweepResult(ok_seeds, reports, means, stds, failures=failures)
    if compare is not None:
        result.p_values = compare_sweeps(result, compare)
    return result


def compare_sweeps(a, b):
    out = {}
    for metric in ("overall_auc", "overall_logloss"):
        va = [v for v in a.metric_values(metric) if v is not None]
        vb = [v for v in b.metric_values(metric) if v is not None]
        out[metric] = welch_t_test(va, vb).p_value if len(va) >= 2 and len(vb) >= 2 else None
    return out
