"""Multi-domain multi-task mixture-of-experts forward computation.

The pieces are plain functions over :class:`~mdmt.autodiff.Tensor` so each
can be tested on its own; :class:`MDMTModel` owns the parameters and wires
them together for one domain-homogeneous batch:

    x  = embeddings of the batch
    h  = domain representation of x for the batch's domain d
    S  = gate-weighted mix of the shared experts (gate specific to (d, t))
    Dm = focal-biased mix of the domain experts (weight beta_d)
    Tm = focal-biased mix of the task experts (weight beta_t)
    h' = S + alpha_d * Dm + alpha_t * Tm
    y  = sigmoid(tower_{d,t}(h'))

All four fusion weights are sigmoids of free logit vectors (one entry per
domain or task), initialised at zero so every weight starts at 0.5.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .embedding import EmbeddingTables, embed_batch


@dataclass(frozen=True)
class HyperParams:
    embedding_dim: int = 16
    hidden_dim: int = 32
    expert_dim: int = 16
    tower_hidden: int = 16
    n_shared: int = 1

    def __post_init__(self):
        for k, v in asdict(self).items():
            if int(v) < 1:
                raise ValueError(f"hyperparameter {k} must be >= 1, got {v}")


# ----------------------------------------------------------------------------
# building blocks


def affine(x, W, b):
    return ad.add(ad.matmul(x, W), b)


def expert(h, W, b):
    """ReLU(LayerNorm(h W + b))."""
    return ad.relu(ad.layernorm_lastdim(affine(h, W, b)))


@dataclass
class DomainReprParams:
    W_d: list
    b_d: list
    W_sh: ad.Tensor
    b_sh: ad.Tensor
    W_c: ad.Tensor
    b_c: ad.Tensor
    da_W1: ad.Tensor
    da_b1: ad.Tensor
    da_W2: ad.Tensor
    da_b2: ad.Tensor


def domain_repr(x, d, p):
    """h = W_c (x (W_d * W_sh) + b_d + b_sh) + b_c + f_DA(x)."""
    D = len(p.W_d)
    if not 0 <= d < D:
        raise IndexError(f"domain id {d} out of range [0, {D})")
    if x.shape[-1] != p.W_sh.shape[0]:
        raise ad.ShapeError(f"domain_repr: input width {x.shape[-1]}, expected {p.W_sh.shape[0]}")
    W_hat = ad.elementwise_mul(p.W_d[d], p.W_sh)
    z = ad.add(ad.add(ad.matmul(x, W_hat), p.b_d[d]), p.b_sh)
    agnostic = affine(ad.relu(affine(x, p.da_W1, p.da_b1)), p.da_W2, p.da_b2)
    return ad.add(affine(z, p.W_c, p.b_c), agnostic)


def gate_mix(weights, outputs):
    """Per-sample convex combination: sum_e weights[:, e] * outputs[e]."""
    acc = None
    for e, out in enumerate(outputs):
        term = ad.elementwise_mul(out, ad.take_lastdim(weights, e))
        acc = term if acc is None else ad.add(acc, term)
    return acc


def shared_module(h, d, t, experts, gates, expert_outputs=None):
    """Gate-weighted sum of the shared experts for objective (d, t).

    ``experts`` is a list of ``(W, b)``; ``gates`` maps ``(d, t)`` to ``(W, b)``.
    Precomputed expert outputs may be passed to avoid recomputation across tasks.
    """
    if not experts:
        raise ValueError("shared module needs at least one expert")
    if (d, t) not in gates:
        raise IndexError(f"no gate for objective (d={d}, t={t})")
    outs = expert_outputs if expert_outputs is not None else [expert(h, W, b) for W, b in experts]
    Wg, bg = gates[(d, t)]
    g = ad.softmax_lastdim(affine(h, Wg, bg))
    return gate_mix(g, outs)


def _as_weight(w, like):
    return w if isinstance(w, ad.Tensor) else ad.Tensor(np.asarray([w], dtype=like.dtype))


def biased_mix(outputs, focal, beta):
    """beta * outputs[focal] + (1 - beta)/(K - 1) * sum of the others.

    With a single output the mixture is that output unchanged.
    """
    K = len(outputs)
    if not 0 <= focal < K:
        raise IndexError(f"focal index {focal} out of range [0, {K})")
    if K == 1:
        return outputs[0]
    beta = _as_weight(beta, outputs[0])
    one = ad.Tensor(np.ones(1, dtype=beta.dtype))
    other_w = ad.scalar_scale(ad.add(one, ad.scalar_scale(beta, -1.0)), 1.0 / (K - 1))
    rest = None
    for k, out in enumerate(outputs):
        if k != focal:
            rest = out if rest is None else ad.add(rest, out)
    return ad.add(ad.elementwise_mul(outputs[focal], beta), ad.elementwise_mul(rest, other_w))


def mixing_coefficients(K, focal, beta):
    """Coefficients used by :func:`biased_mix`, as plain floats."""
    if K == 1:
        return [1.0]
    return [beta if k == focal else (1 - beta) / (K - 1) for k in range(K)]


def domain_module(h, d, experts, beta_d, expert_outputs=None):
    outs = expert_outputs if expert_outputs is not None else [expert(h, W, b) for W, b in experts]
    if not 0 <= d < len(outs):
        raise IndexError(f"domain id {d} out of range [0, {len(outs)})")
    return biased_mix(outs, d, beta_d)


def task_module(h, t, experts, beta_t, expert_outputs=None):
    outs = expert_outputs if expert_outputs is not None else [expert(h, W, b) for W, b in experts]
    if not 0 <= t < len(outs):
        raise IndexError(f"task id {t} out of range [0, {len(outs)})")
    return biased_mix(outs, t, beta_t)


def fuse_views(S, Dout, Tout, alpha_d, alpha_t):
    """S + alpha_d * Dout + alpha_t * Tout; either view may be ``None`` (absent)."""
    out = S
    for view, w in ((Dout, alpha_d), (Tout, alpha_t)):
        if view is None:
            continue
        if view.shape != S.shape:
            raise ad.ShapeError(f"fuse_views: shapes {list(S.shape)} and {list(view.shape)}")
        out = ad.add(out, ad.elementwise_mul(view, _as_weight(w, S)))
    return out


def predict(hbar, d, t, towers):
    """sigmoid(W2 ReLU(W1 h + b1) + b2) with the (d, t) tower."""
    if (d, t) not in towers:
        raise IndexError(f"no tower for objective (d={d}, t={t})")
    W1, b1, W2, b2 = towers[(d, t)]
    return ad.sigmoid(affine(ad.relu(affine(hbar, W1, b1)), W2, b2))


@dataclass
class FusionWeights:
    alpha_d: np.ndarray
    alpha_t: np.ndarray
    beta_d: np.ndarray
    beta_t: np.ndarray


def realize_fusion_weights(logits):
    """Elementwise sigmoid of each logit vector, computed in float64."""
    return FusionWeights(
        *(expit(np.asarray(getattr(logits, k), dtype=np.float64)) for k in ("alpha_d", "alpha_t", "beta_d", "beta_t"))
    )


# ----------------------------------------------------------------------------
# the model


FUSION_LOGITS = ("alpha_d", "alpha_t", "beta_d", "beta_t")


class MDMTModel:
    """Parameters plus forward pass for the full model and its ablations.

    ``use_domain``/``use_task`` switch the domain and task expert modules;
    ``fusion`` chooses the second-level fusion: ``"weighted"`` (alpha weights),
    ``"concat"`` (concatenate then project) or ``"gated"`` (softmax gate over
    the three module outputs); ``learn_fusion`` controls whether the fusion
    logits are trainable.
    """

    def __init__(
        self,
        space,
        hp=None,
        seed=0,
        use_domain=True,
        use_task=True,
        fusion="weighted",
        learn_fusion=True,
        variant="full",
    ):
        if fusion not in ("weighted", "concat", "gated"):
            raise ValueError(f"unknown fusion {fusion!r}")
        self.space = space
        self.hp = hp or HyperParams()
        self.seed = seed
        self.use_domain = use_domain
        self.use_task = use_task
        self.fusion = fusion
        self.learn_fusion = learn_fusion
        self.variant = variant
        self.D, self.T = space.domain_count, space.task_count
        self.params = {}
        self.groups = {}
        self._init(np.random.default_rng(seed))

    # -- parameters ----------------------------------------------------

    def _add(self, group, name, array):
        t = ad.Tensor(np.asarray(array, dtype=np.float32))
        self.params[name] = t
        self.groups.setdefault(group, []).append(name)
        return t

    def _affine_init(self, rng, group, prefix, fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        W = self._add(group, f"{prefix}.W", rng.uniform(-bound, bound, (fan_in, fan_out)))
        b = self._add(group, f"{prefix}.b", rng.uniform(-bound, bound, fan_out))
        return W, b

    def _init(self, rng):
        hp, D, T = self.hp, self.D, self.T
        self.embeddings = EmbeddingTables(self.space, hp.embedding_dim, rng)
        for name in self.embeddings.names:
            self.params[name] = self.embeddings.tables[name]
            self.groups.setdefault("embedding", []).append(name)
        n_in, H, K = self.embeddings.width, hp.hidden_dim, hp.expert_dim

        bound = 1.0 / np.sqrt(n_in)
        W_d, b_d = [], []
        for d in range(D):
            W_d.append(self._add("domain_repr", f"dr.W_d.{d}", rng.uniform(-bound, bound, (n_in, H))))
            b_d.append(self._add("domain_repr", f"dr.b_d.{d}", rng.uniform(-bound, bound, H)))
        W_sh = self._add("domain_repr", "dr.W_sh", np.ones((n_in, H)))
        b_sh = self._add("domain_repr", "dr.b_sh", rng.uniform(-bound, bound, H))
        W_c, b_c = self._affine_init(rng, "domain_repr", "dr.c", H, H)
        da_W1, da_b1 = self._affine_init(rng, "domain_repr", "dr.da1", n_in, H)
        da_W2, da_b2 = self._affine_init(rng, "domain_repr", "dr.da2", H, H)
        self.dr = DomainReprParams(W_d, b_d, W_sh, b_sh, W_c, b_c, da_W1, da_b1, da_W2, da_b2)

        self.shared = [self._affine_init(rng, "shared_experts", f"shared.{e}", H, K) for e in range(hp.n_shared)]
        self.domain_experts = (
            [self._affine_init(rng, "domain_experts", f"domain.{d}", H, K) for d in range(D)] if self.use_domain else []
        )
        self.task_experts = (
            [self._affine_init(rng, "task_experts", f"task.{t}", H, K) for t in range(T)] if self.use_task else []
        )
        self.gates = {
            (d, t): self._affine_init(rng, "gates", f"gate.{d}.{t}", H, hp.n_shared) for d in range(D) for t in range(T)
        }
        self.towers = {}
        for d in range(D):
            for t in range(T):
                W1, b1 = self._affine_init(rng, "towers", f"tower.{d}.{t}.l1", K, hp.tower_hidden)
                W2, b2 = self._affine_init(rng, "towers", f"tower.{d}.{t}.l2", hp.tower_hidden, 1)
                self.towers[(d, t)] = (W1, b1, W2, b2)

        self.mix = None
        self.module_gates = None
        if self.fusion == "concat":
            self.mix = self._affine_init(rng, "fusion_mix", "mix", 3 * K, K)
        elif self.fusion == "gated":
            self.module_gates = {
                (d, t): self._affine_init(rng, "fusion_mix", f"mgate.{d}.{t}", H, 3) for d in range(D) for t in range(T)
            }

        self.logits = {}
        wanted = []
        if self.use_domain:
            wanted.append("beta_d")
        if self.use_task:
            wanted.append("beta_t")
        if self.fusion == "weighted":
            if self.use_domain:
                wanted.append("alpha_d")
            if self.use_task:
                wanted.append("alpha_t")
        for key in FUSION_LOGITS:
            if key in wanted:
                size = D if key.endswith("_d") else T
                self.logits[key] = self._add("fusion_logits", f"fusion.{key}", np.zeros(size))

    @property
    def fusion_names(self):
        return [f"fusion.{k}" for k in FUSION_LOGITS if k in self.logits]

    @property
    def model_names(self):
        fusion = set(self.fusion_names)
        return [n for n in self.params if n not in fusion]

    def trainable(self, phase):
        """Parameters updated in the given phase (``"model"`` or ``"fusion"``)."""
        if phase == "model":
            return {n: self.params[n] for n in self.model_names}
        if phase == "fusion":
            return {n: self.params[n] for n in self.fusion_names} if self.learn_fusion else {}
        raise ValueError(f"unknown phase {phase!r}")

    def fusion_weights(self):
        z = {k: (self.logits[k].data if k in self.logits else np.zeros(0)) for k in FUSION_LOGITS}
        return realize_fusion_weights(FusionWeights(**z))

    def astype(self, dtype):
        for t in self.params.values():
            t.data = t.data.astype(dtype)
        return self

    # -- forward -------------------------------------------------------

    def stages(self, batch):
        """Forward pass keeping every intermediate; returns a dict of tensors."""
        d = int(batch.domain)
        if not 0 <= d < self.D:
            raise IndexError(f"domain id {d} out of range [0, {self.D})")
        x = embed_batch(batch, self.embeddings)
        h = domain_repr(x, d, self.dr)
        shared_outs = [expert(h, W, b) for W, b in self.shared]
        w = {k: ad.sigmoid(v) for k, v in self.logits.items()}

        Dout = None
        if self.use_domain:
            dom_outs = [expert(h, W, b) for W, b in self.domain_experts]
            Dout = domain_module(h, d, None, ad.take_lastdim(w["beta_d"], d), dom_outs)
        task_outs = [expert(h, W, b) for W, b in self.task_experts] if self.use_task else None

        out = {"h": h, "domain_module": Dout, "shared": [], "task_module": [], "fused": [], "pred": []}
        for t in range(self.T):
            S = shared_module(h, d, t, self.shared, self.gates, shared_outs)
            Tout = task_module(h, t, None, ad.take_lastdim(w["beta_t"], t), task_outs) if self.use_task else None
            if self.fusion == "weighted":
                a_d = ad.take_lastdim(w["alpha_d"], d) if self.use_domain else None
                a_t = ad.take_lastdim(w["alpha_t"], t) if self.use_task else None
                hbar = fuse_views(S, Dout, Tout, a_d, a_t)
            elif self.fusion == "concat":
                hbar = concat_fuse(S, Dout, Tout, *self.mix)
            else:
                hbar = gated_fuse(h, S, Dout, Tout, *self.module_gates[(d, t)])
            out["shared"].append(S)
            out["task_module"].append(Tout)
            out["fused"].append(hbar)
            out["pred"].append(predict(hbar, d, t, self.towers))
        return out

    def forward(self, batch):
        """Predictions of shape ``(batch, T)`` for the batch's domain."""
        preds = self.stages(batch)["pred"]
        return preds[0] if len(preds) == 1 else ad.concat_lastdim(preds)

    def hyperparameters(self):
        out = {"model.kind": "mdmt", "model.variant": self.variant}
        out.update({f"model.{k}": str(v) for k, v in asdict(self.hp).items()})
        out["model.seed"] = str(self.seed)
        return out


def concat_fuse(S, Dout, Tout, W, b):
    return affine(ad.concat_lastdim([S, Dout, Tout]), W, b)


def gated_fuse(h, S, Dout, Tout, W, b):
    g = ad.softmax_lastdim(affine(h, W, b))
    return gate_mix(g, [S, Dout, Tout])


# ----------------------------------------------------------------------------
# embedding export

EXPORT_STAGES = ("domain_module", "task_module", "fused")


def export_embeddings(model, dataset, stage, path, task=0, batch_size=1024):
    """Write per-sample stage outputs plus ``domain, task, label_*`` as TSV.

    Rows follow the dataset's sample order. Returns the number of rows written.
    """
    if stage not in EXPORT_STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {EXPORT_STAGES}")
    if len(dataset) == 0:
        raise ValueError("cannot export embeddings for an empty dataset slice")
    from .data import domain_batches

    rows = {}
    for batch in domain_batches(dataset, batch_size, seed=0, shuffle=False):
        st = model.stages(batch)
        if stage == "domain_module":
            emb = st["domain_module"]
        else:
            emb = st[stage][task]
        if emb is None:
            raise ValueError(f"model variant {model.variant!r} has no {stage} output")
        for i, idx in enumerate(batch.index):
            rows[int(idx)] = emb.data[i]
    K = next(iter(rows.values())).shape[0]
    T = dataset.space.task_count
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow([f"dim{k}" for k in range(K)] + ["domain", "task"] + [f"label_{t}" for t in range(T)])
        for i in range(len(dataset)):
            w.writerow(
                [repr(float(v)) for v in rows[i]]
                + [int(dataset.domains[i]), task]
                + [int(v) for v in dataset.labels[i]]
            )
    return len(dataset)
