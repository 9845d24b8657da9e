"""Baseline and ablation variants sharing the model forward/loss interface."""

from __future__ import annotations

import enum
from dataclasses import asdict

import numpy as np

from . import autodiff as ad
from .embedding import EmbeddingTables, embed_batch
from .model import HyperParams, MDMTModel, affine


class VariantKind(str, enum.Enum):
    FULL = "full"
    MLP_SINGLE = "mlp_single"
    SHARED_ONLY = "shared_only"
    NO_DOMAIN_MODULE = "no_domain"
    NO_TASK_MODULE = "no_task"
    NO_AUTOML = "no_automl"
    CONCAT_MODULES = "concat"
    FULLY_GATED = "fully_gated"


_MDMT_FLAGS = {
    VariantKind.FULL: {},
    VariantKind.SHARED_ONLY: {"use_domain": False, "use_task": False},
    VariantKind.NO_DOMAIN_MODULE: {"use_domain": False},
    VariantKind.NO_TASK_MODULE: {"use_task": False},
    VariantKind.NO_AUTOML: {"learn_fusion": False},
    VariantKind.CONCAT_MODULES: {"fusion": "concat"},
    VariantKind.FULLY_GATED: {"fusion": "gated"},
}


class MlpSingle:
    """One embedding -> affine+ReLU+LayerNorm -> two-layer tower network for a
    single (domain, task) pair. ``forward`` returns ``(batch, 1)``."""

    def __init__(self, space, hp, rng, prefix):
        self.embeddings = EmbeddingTables(space, hp.embedding_dim, rng, prefix=f"{prefix}.emb")
        self.params = dict(self.embeddings.tables)
        self.groups = {"embedding": list(self.embeddings.names)}

        def lin(group, name, fan_in, fan_out):
            bound = 1.0 / np.sqrt(fan_in)
            W = ad.Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(np.float32))
            b = ad.Tensor(rng.uniform(-bound, bound, fan_out).astype(np.float32))
            self.params[f"{prefix}.{name}.W"] = W
            self.params[f"{prefix}.{name}.b"] = b
            self.groups.setdefault(group, []).extend([f"{prefix}.{name}.W", f"{prefix}.{name}.b"])
            return W, b

        self.hidden = lin("hidden", "hidden", self.embeddings.width, hp.hidden_dim)
        self.l1 = lin("towers", "l1", hp.hidden_dim, hp.tower_hidden)
        self.l2 = lin("towers", "l2", hp.tower_hidden, 1)

    def forward(self, batch):
        x = embed_batch(batch, self.embeddings)
        h = ad.layernorm_lastdim(ad.relu(affine(x, *self.hidden)))
        return ad.sigmoid(affine(ad.relu(affine(h, *self.l1)), *self.l2))


class MlpPerPair:
    """D x T independent :class:`MlpSingle` networks behind the (batch, T) interface.

    Each pair network only ever sees its own domain's samples and receives
    gradient only from its own task's loss term, so joint training equals
    training every pair separately.
    """

    variant = VariantKind.MLP_SINGLE.value
    learn_fusion = False

    def __init__(self, space, hp=None, seed=0):
        self.space = space
        self.hp = hp or HyperParams()
        self.seed = seed
        self.D, self.T = space.domain_count, space.task_count
        rng = np.random.default_rng(seed)
        self.pairs = {}
        self.params = {}
        self.groups = {}
        for d in range(self.D):
            for t in range(self.T):
                net = MlpSingle(space, self.hp, rng, prefix=f"pair.{d}.{t}")
                self.pairs[(d, t)] = net
                self.params.update(net.params)
                for g, names in net.groups.items():
                    self.groups.setdefault(g, []).extend(names)

    fusion_names = []

    @property
    def model_names(self):
        return list(self.params)

    def trainable(self, phase):
        if phase == "model":
            return dict(self.params)
        if phase == "fusion":
            return {}
        raise ValueError(f"unknown phase {phase!r}")

    def fusion_weights(self):
        return None

    def astype(self, dtype):
        for t in self.params.values():
            t.data = t.data.astype(dtype)
        return self

    def forward(self, batch):
        d = int(batch.domain)
        if not 0 <= d < self.D:
            raise IndexError(f"domain id {d} out of range [0, {self.D})")
        preds = [self.pairs[(d, t)].forward(batch) for t in range(self.T)]
        return preds[0] if len(preds) == 1 else ad.concat_lastdim(preds)

    def hyperparameters(self):
        out = {"model.kind": "mlp_single", "model.variant": self.variant}
        out.update({f"model.{k}": str(v) for k, v in asdict(self.hp).items()})
        out["model.seed"] = str(self.seed)
        return out


def build_variant(kind, space, hp=None, seed=0):
    """Construct the model for a variant; every variant exposes ``forward``,
    ``params``, ``trainable(phase)`` and ``hyperparameters()``."""
    kind = VariantKind(kind)
    hp = hp or HyperParams()
    if kind is VariantKind.MLP_SINGLE:
        return MlpPerPair(space, hp, seed)
    return MDMTModel(space, hp, seed, variant=kind.value, **_MDMT_FLAGS[kind])


def param_census(model):
    """Element count per parameter group, plus ``"total"``."""
    out = {}
    for group, names in model.groups.items():
        out[group] = int(sum(model.params[n].data.size for n in names))
    out["total"] = int(sum(out.values()))
    return out
