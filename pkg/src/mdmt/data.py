"""Multi-domain multi-task interaction datasets.

A dataset is stored column-wise: ``domains`` (n,), ``features`` (n, F) and
``labels`` (n, T). Feature id 0 is reserved in every field for values never
seen when the vocabulary was built.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CACHE_MAGIC = b"MDMTDS1"
UNKNOWN_ID = 0


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Field:
    name: str
    vocab_size: int


@dataclass(frozen=True)
class FeatureSpace:
    fields: tuple[Field, ...]
    domain_count: int
    task_count: int

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(self.fields))
        if not self.fields:
            raise DatasetError("feature space needs at least one field")
        for f in self.fields:
            if f.vocab_size < 1:
                raise DatasetError(f"field {f.name!r}: vocab size must be >= 1, got {f.vocab_size}")
        if self.domain_count < 1 or self.task_count < 1:
            raise DatasetError(f"need D >= 1 and T >= 1, got D={self.domain_count} T={self.task_count}")

    @property
    def vocab_sizes(self):
        return tuple(f.vocab_size for f in self.fields)

    @property
    def field_names(self):
        return tuple(f.name for f in self.fields)


@dataclass(frozen=True)
class Sample:
    domain: int
    features: tuple[int, ...]
    labels: tuple[int, ...]


@dataclass(frozen=True)
class Schema:
    """Column roles for a CSV file."""

    domain: str
    labels: tuple[str, ...]
    features: tuple[str, ...]


class Dataset:
    """Immutable, validated collection of samples over one feature space."""

    def __init__(self, space, domains, features, labels, split="all", vocab=None, domain_values=None):
        self.space = space
        self.domains = np.asarray(domains, dtype=np.int64)
        self.features = np.asarray(features, dtype=np.int64).reshape(len(self.domains), len(space.fields))
        self.labels = np.asarray(labels, dtype=np.int8).reshape(len(self.domains), space.task_count)
        self.split = split
        # raw value -> id per field, kept only for datasets built from text
        self.vocab = vocab
        self.domain_values = domain_values
        for arr in (self.domains, self.features, self.labels):
            arr.setflags(write=False)
        self._validate()

    def _validate(self):
        D = self.space.domain_count
        if len(self.domains) and (self.domains.min() < 0 or self.domains.max() >= D):
            raise DatasetError(f"domain id out of range [0, {D})")
        for j, f in enumerate(self.space.fields):
            col = self.features[:, j]
            if len(col) and (col.min() < 0 or col.max() >= f.vocab_size):
                raise DatasetError(f"field {f.name!r}: feature id out of range [0, {f.vocab_size})")
        if len(self.labels) and not np.isin(self.labels, (0, 1)).all():
            raise DatasetError("labels must be 0 or 1")

    def __len__(self):
        return len(self.domains)

    def __getitem__(self, i):
        return Sample(
            int(self.domains[i]),
            tuple(int(v) for v in self.features[i]),
            tuple(int(v) for v in self.labels[i]),
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def subset(self, index, split=None):
        index = np.asarray(index, dtype=np.int64)
        return Dataset(
            self.space,
            self.domains[index],
            self.features[index],
            self.labels[index],
            split=self.split if split is None else split,
            vocab=self.vocab,
            domain_values=self.domain_values,
        )

    def domain_counts(self):
        return np.bincount(self.domains, minlength=self.space.domain_count)

    def same_samples(self, other):
        return (
            self.space == other.space
            and np.array_equal(self.domains, other.domains)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )


# --------------------------------------------------------------------------
# CSV loading


def _domain_sort_key(v):
    try:
        return (0, float(v), v)
    except ValueError:
        return (1, 0.0, v)


def load_interactions(path, schema, vocab=None, domain_values=None, split="all"):
    """Read a headered CSV into a :class:`Dataset`.

    Feature values are reindexed densely in order of first appearance starting
    at 1. Pass ``vocab``/``domain_values`` from a training dataset to encode a
    held-out file with the same ids; unseen feature values then map to 0.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: no such file")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        cols = {name: i for i, name in enumerate(header)}
        for name in (schema.domain, *schema.labels, *schema.features):
            if name not in cols:
                raise DatasetError(f"{path}: missing column {name!r}")
        d_col = cols[schema.domain]
        l_cols = [cols[c] for c in schema.labels]
        f_cols = [cols[c] for c in schema.features]

        grow = vocab is None
        vocab = [dict() for _ in schema.features] if grow else [dict(v) for v in vocab]
        raw_domains, feats, labels = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            raw_domains.append(row[d_col])
            ids = []
            for j, c in enumerate(f_cols):
                v = row[c]
                table = vocab[j]
                if v not in table:
                    if not grow:
                        ids.append(UNKNOWN_ID)
                        continue
                    table[v] = len(table) + 1
                ids.append(table[v])
            feats.append(ids)
            ys = []
            for name, c in zip(schema.labels, l_cols):
                v = row[c].strip()
                if v not in ("0", "1"):
                    raise DatasetError(f"{path}:{lineno}: column {name!r}: label {v!r} is not 0 or 1")
                ys.append(int(v))
            labels.append(ys)

    if domain_values is None:
        domain_values = sorted(set(raw_domains), key=_domain_sort_key)
    dmap = {v: i for i, v in enumerate(domain_values)}
    try:
        domains = [dmap[v] for v in raw_domains]
    except KeyError as e:
        raise DatasetError(f"{path}: unknown domain value {e.args[0]!r}") from None

    if grow:
        sizes = [len(t) + 1 for t in vocab]
    else:
        sizes = [max(t.values(), default=0) + 1 for t in vocab]
    space = FeatureSpace(
        tuple(Field(n, s) for n, s in zip(schema.features, sizes)),
        domain_count=len(domain_values),
        task_count=len(schema.labels),
    )
    n = len(domains)
    return Dataset(
        space,
        np.array(domains, dtype=np.int64),
        np.array(feats, dtype=np.int64).reshape(n, len(f_cols)),
        np.array(labels, dtype=np.int8).reshape(n, len(l_cols)),
        split=split,
        vocab=vocab,
        domain_values=list(domain_values),
    )


def write_csv(ds, path, schema=None):
    """Write a dataset as CSV with integer ids (inverse of ``load_interactions``
    up to id renumbering, which is the identity for ids assigned in row order)."""
    names = ds.space.field_names
    schema = schema or Schema("domain", tuple(f"label_{t}" for t in range(ds.space.task_count)), names)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([schema.domain, *schema.labels, *schema.features])
        for d, f, y in zip(ds.domains, ds.features, ds.labels):
            w.writerow([int(d), *(int(v) for v in y), *(int(v) for v in f)])


# --------------------------------------------------------------------------
# binary cache


def _record_dtype(F, T):
    return np.dtype([("d", "<u2"), ("f", "<u4", (F,)), ("y", "u1", (T,))])


def save_cache(ds, path):
    space = ds.space
    parts = [CACHE_MAGIC, struct.pack("<I", len(space.fields))]
    for f in space.fields:
        name = f.name.encode("utf-8")
        parts.append(struct.pack("<I", len(name)) + name + struct.pack("<I", f.vocab_size))
    parts.append(struct.pack("<II", space.domain_count, space.task_count))
    parts.append(struct.pack("<Q", len(ds)))
    rec = np.empty(len(ds), dtype=_record_dtype(len(space.fields), space.task_count))
    rec["d"] = ds.domains
    rec["f"] = ds.features
    rec["y"] = ds.labels
    parts.append(rec.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_cache(path, split="all"):
    buf = Path(path).read_bytes()
    if buf[:7] != CACHE_MAGIC:
        raise DatasetError(f"{path}: not a dataset cache (bad magic)")
    try:
        off = 7
        (nf,) = struct.unpack_from("<I", buf, off)
        off += 4
        fields = []
        for _ in range(nf):
            (ln,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + ln].decode("utf-8")
            off += ln
            (vs,) = struct.unpack_from("<I", buf, off)
            off += 4
            fields.append(Field(name, vs))
        D, T = struct.unpack_from("<II", buf, off)
        off += 8
        (n,) = struct.unpack_from("<Q", buf, off)
        off += 8
        dt = _record_dtype(nf, T)
        if len(buf) - off != n * dt.itemsize:
            raise DatasetError(f"{path}: truncated or oversized sample block")
        rec = np.frombuffer(buf, dtype=dt, count=n, offset=off)
    except struct.error as e:
        raise DatasetError(f"{path}: corrupt cache header ({e})") from None
    space = FeatureSpace(tuple(fields), D, T)
    return Dataset(
        space,
        rec["d"].astype(np.int64),
        rec["f"].astype(np.int64).reshape(n, nf),
        rec["y"].astype(np.int8).reshape(n, T),
        split=split,
    )


# --------------------------------------------------------------------------
# splitting


def _gray_rank(labels):
    """Rank label vectors in reflected-binary (Gray code) order.

    Sorting by this rank keeps the positives of every task in few contiguous
    runs, so systematic allocation below spreads them evenly over splits.
    """
    T = labels.shape[1]
    g = np.zeros(len(labels), dtype=np.int64)
    for t in range(T):
        g = (g << 1) | labels[:, t].astype(np.int64)
    b = g.copy()
    shift = g >> 1
    while shift.any():
        b ^= shift
        shift >>= 1
    return b


def _allocate(n, ratios):
    """Assign n ordered slots to splits keeping every prefix close to the ratios."""
    counts = np.zeros(len(ratios))
    out = np.empty(n, dtype=np.int64)
    r = np.asarray(ratios)
    for m in range(n):
        s = int(np.argmax(r * (m + 1) - counts))
        out[m] = s
        counts[s] += 1
    return out


def split_dataset(ds, ratios=(0.8, 0.1, 0.1), seed=0):
    """Per-domain stratified train/valid/test split, deterministic in ``seed``."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    for d in range(ds.space.domain_count):
        idx = np.flatnonzero(ds.domains == d)
        if len(idx) == 0:
            continue
        if len(idx) < 3:
            raise DatasetError(f"domain {d} has {len(idx)} samples; need at least 3 to split")
        idx = rng.permutation(idx)
        idx = idx[np.argsort(_gray_rank(ds.labels[idx]), kind="stable")]
        which = _allocate(len(idx), ratios)
        for s in range(3):
            parts[s].append(idx[which == s])
    names = ("train", "valid", "test")
    return tuple(
        ds.subset(np.sort(np.concatenate(p)) if p else np.empty(0, np.int64), split=name)
        for p, name in zip(parts, names)
    )


# --------------------------------------------------------------------------
# batching


@dataclass(frozen=True)
class Batch:
    domain: int
    features: np.ndarray
    labels: np.ndarray
    index: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.index)


def domain_batches(ds, batch_size, seed, shuffle=True):
    """Yield single-domain batches covering every sample once.

    Each domain's samples are shuffled and chunked; the resulting batch lists
    are interleaved so domains appear in proportion to their batch counts.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if len(ds) == 0:
        raise DatasetError("cannot batch an empty dataset")
    rng = np.random.default_rng(seed)
    chunks = []
    for d in range(ds.space.domain_count):
        idx = np.flatnonzero(ds.domains == d)
        if len(idx) == 0:
            continue
        if shuffle:
            idx = rng.permutation(idx)
        pieces = [idx[i : i + batch_size] for i in range(0, len(idx), batch_size)]
        k = len(pieces)
        for j, p in enumerate(pieces):
            chunks.append(((j + 0.5) / k, d, p))
    chunks.sort(key=lambda c: (c[0], c[1]))
    for _, d, p in chunks:
        yield Batch(d, ds.features[p], ds.labels[p], p)


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    domain_counts: tuple[int, ...] = (700, 8900, 400)
    task_count: int = 2
    vocab_sizes: tuple[int, ...] = (1000, 500)
    field_names: tuple[str, ...] | None = None
    latent_dim: int = 8
    rho_dom: float = 0.8
    rho_task: float = 0.8
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "domain_counts", tuple(int(c) for c in self.domain_counts))
        object.__setattr__(self, "vocab_sizes", tuple(int(v) for v in self.vocab_sizes))
        if self.field_names is not None:
            object.__setattr__(self, "field_names", tuple(self.field_names))
        self.validate()

    def validate(self):
        if not self.domain_counts or min(self.domain_counts) < 1:
            raise DatasetError(f"per-domain counts must be >= 1, got {self.domain_counts}")
        if self.task_count < 1:
            raise DatasetError(f"task_count must be >= 1, got {self.task_count}")
        if not self.vocab_sizes or min(self.vocab_sizes) < 2:
            raise DatasetError(f"vocab sizes must be >= 2 (id 0 is reserved), got {self.vocab_sizes}")
        if self.field_names is not None and len(self.field_names) != len(self.vocab_sizes):
            raise DatasetError("field_names and vocab_sizes differ in length")
        if self.latent_dim < 1:
            raise DatasetError(f"latent_dim must be >= 1, got {self.latent_dim}")
        for name in ("rho_dom", "rho_task"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DatasetError(f"{name} must lie in [0, 1], got {v}")
        if not 0.0 <= self.noise < 0.5:
            raise DatasetError(f"noise must lie in [0, 0.5), got {self.noise}")

    @property
    def names(self):
        if self.field_names is not None:
            return self.field_names
        default = ("user", "item")
        return tuple(default[i] if i < 2 else f"f{i}" for i in range(len(self.vocab_sizes)))


def generate_synthetic(spec):
    """Draw a dataset from a planted latent-factor model.

    For every field value there is a shared latent vector and one private
    vector per domain; the domain's factor is ``rho_dom * shared + (1 -
    rho_dom) * private``. Each task scores with a head mixed the same way from
    a shared and a task-private head (weight ``rho_task``). The score is an
    additive term over all fields plus a pairwise term between the first two
    fields. Labels are ``sigmoid(score) > 0.5``, then flipped with probability
    ``noise``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    D, T, L = len(spec.domain_counts), spec.task_count, spec.latent_dim
    F = len(spec.vocab_sizes)

    factors = []
    for V in spec.vocab_sizes:
        shared = rng.standard_normal((V, L))
        private = rng.standard_normal((D, V, L))
        factors.append(spec.rho_dom * shared[None] + (1 - spec.rho_dom) * private)

    def heads():
        shared = rng.standard_normal(L)
        private = rng.standard_normal((T, L))
        return spec.rho_task * shared[None] + (1 - spec.rho_task) * private

    add_heads = heads()
    pair_heads = heads()

    n = sum(spec.domain_counts)
    domains = np.repeat(np.arange(D), spec.domain_counts)
    feats = np.stack([rng.integers(1, V, size=n) for V in spec.vocab_sizes], axis=1)

    z = [factors[j][domains, feats[:, j]] for j in range(F)]  # each (n, L)
    additive = np.sum(z, axis=0) / np.sqrt(F * L)
    scores = additive @ add_heads.T  # (n, T)
    if F >= 2:
        scores = scores + (z[0] * z[1]) @ pair_heads.T / np.sqrt(L)
    prob = 1.0 / (1.0 + np.exp(-scores))
    labels = (prob > 0.5).astype(np.int8)
    flips = rng.random((n, T)) < spec.noise
    labels = np.where(flips, 1 - labels, labels).astype(np.int8)

    space = FeatureSpace(
        tuple(Field(name, V) for name, V in zip(spec.names, spec.vocab_sizes)), D, T
    )
    return Dataset(space, domains, feats, labels, split="all")


# --------------------------------------------------------------------------
# MovieLens-1M preprocessing

# ML-1M age codes: 1 (<18), 18, 25, 35, 45, 50, 56
MOVIELENS_AGE_DOMAINS = {"1": 0, "18": 0, "25": 1, "35": 2, "45": 2, "50": 2, "56": 2}
MOVIELENS_SCHEMA = Schema(
    domain="domain",
    labels=("click", "like"),
    features=("user_id", "movie_id", "gender", "age", "occupation", "zip3", "genre"),
)


def movielens_to_csv(ml_dir, out_path, click_min_rating=3, like_min_rating=4):
    """Convert a MovieLens-1M directory (``ratings.dat``, ``users.dat``,
    ``movies.dat``) into the CSV layout of ``MOVIELENS_SCHEMA``.

    Every rating is one instance; domains are the age buckets {<25, 25, >=35};
    ``click`` is rating >= ``click_min_rating`` and ``like`` is rating >=
    ``like_min_rating``. Returns per-domain instance counts.
    """
    ml_dir = Path(ml_dir)

    def rows(name):
        with (ml_dir / name).open(encoding="latin-1") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if line:
                    yield line.split("::")

    users = {r[0]: r[1:] for r in rows("users.dat")}
    genres = {r[0]: r[2].split("|")[0] for r in rows("movies.dat")}
    counts = [0, 0, 0]
    with Path(out_path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([MOVIELENS_SCHEMA.domain, *MOVIELENS_SCHEMA.labels, *MOVIELENS_SCHEMA.features])
        for uid, mid, rating, _ts in rows("ratings.dat"):
            gender, age, occ, zipcode = users[uid]
            d = MOVIELENS_AGE_DOMAINS[age]
            counts[d] += 1
            r = int(rating)
            w.writerow(
                [
                    d,
                    int(r >= click_min_rating),
                    int(r >= like_min_rating),
                    uid,
                    mid,
                    gender,
                    age,
                    occ,
                    zipcode[:3],
                    genres.get(mid, ""),
                ]
            )
    return counts
