"""Learnable per-field embedding tables."""

import numpy as np

from . import autodiff as ad


class EmbeddingTables:
    """One ``(vocab_size, dim)`` table per feature field, all of width ``dim``."""

    def __init__(self, space, dim=16, rng=None, prefix="emb"):
        if rng is None:
            rng = np.random.default_rng(0)
        self.dim = dim
        self.names = []
        self.tables = {}
        bound = 1.0 / np.sqrt(dim)
        for f in space.fields:
            name = f"{prefix}.{f.name}"
            w = rng.uniform(-bound, bound, size=(f.vocab_size, dim)).astype(np.float32)
            self.names.append(name)
            self.tables[name] = ad.Tensor(w)

    def __iter__(self):
        return iter(self.tables[n] for n in self.names)

    @property
    def width(self):
        return self.dim * len(self.names)


def embed_batch(batch, tables):
    """Concatenate each sample's looked-up rows in field order -> ``(b, F*dim)``.

    ``batch`` may be a ``Batch``, a 2-D id array, or a list of ``Sample``.
    """
    if hasattr(batch, "features"):
        ids = np.asarray(batch.features)
    elif isinstance(batch, np.ndarray):
        ids = batch
    else:
        ids = np.array([s.features for s in batch], dtype=np.int64)
    ids = ids.reshape(len(ids), -1)
    if ids.shape[1] != len(tables.names):
        raise ad.ShapeError(f"embed_batch: {ids.shape[1]} feature columns for {len(tables.names)} tables")
    parts = []
    for j, table in enumerate(tables):
        try:
            parts.append(ad.embedding_lookup(table, ids[:, j]))
        except IndexError as e:
            raise IndexError(f"field {tables.names[j]!r}: {e}") from None
    return parts[0] if len(parts) == 1 else ad.concat_lastdim(parts)
