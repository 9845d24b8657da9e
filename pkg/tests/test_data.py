import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdmt.data import (
    Dataset,
    DatasetError,
    FeatureSpace,
    Field,
    Schema,
    SyntheticSpec,
    domain_batches,
    generate_synthetic,
    load_cache,
    load_interactions,
    movielens_to_csv,
    save_cache,
    split_dataset,
    write_csv,
)

SCHEMA = Schema("domain", ("click", "like"), ("user", "item"))


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_load_three_rows(tmp_path):
    p = write(tmp_path, "user,item,domain,click,like\nu1,i1,a,1,0\nu2,i1,b,0,0\nu1,i2,a,1,1\n")
    ds = load_interactions(p, SCHEMA)
    assert len(ds) == 3
    assert ds.space.task_count == 2
    assert ds.space.domain_count == 2
    assert ds[0].features == (1, 1)
    assert ds[2].features == (1, 2)
    assert ds[2].labels == (1, 1)


def test_vocabulary_is_dense(tmp_path):
    p = write(tmp_path, "user,item,domain,click,like\nu1,i1,a,1,0\nu2,i3,b,0,0\nu9,i1,a,1,1\n")
    ds = load_interactions(p, SCHEMA)
    for j, f in enumerate(ds.space.fields):
        assert ds.features[:, j].max() + 1 == f.vocab_size


def test_label_two_names_row_and_column(tmp_path):
    p = write(tmp_path, "user,item,domain,click,like\nu1,i1,a,1,0\nu2,i1,b,0,2\n")
    with pytest.raises(DatasetError, match=r":3: column .like."):
        load_interactions(p, SCHEMA)


def test_missing_column(tmp_path):
    p = write(tmp_path, "user,item,domain,click\nu1,i1,a,1\n")
    with pytest.raises(DatasetError, match="like"):
        load_interactions(p, SCHEMA)


def test_short_row_reports_line(tmp_path):
    p = write(tmp_path, "user,item,domain,click,like\nu1,i1,a,1,0\nu2,i1\n")
    with pytest.raises(DatasetError, match=":3: "):
        load_interactions(p, SCHEMA)


def test_unknown_values_map_to_zero(tmp_path):
    train = load_interactions(write(tmp_path, "user,item,domain,click,like\nu1,i1,a,1,0\nu2,i2,b,0,1\n"), SCHEMA)
    ev = load_interactions(
        write(tmp_path, "user,item,domain,click,like\nu7,i2,b,1,0\n", "e.csv"),
        SCHEMA,
        vocab=train.vocab,
        domain_values=train.domain_values,
    )
    assert ev[0].features == (0, 2)
    assert ev.space == train.space


def test_csv_round_trip(tmp_path, tiny_synth):
    p = tmp_path / "x.csv"
    write_csv(tiny_synth, p)
    back = load_interactions(p, Schema("domain", ("label_0", "label_1"), tiny_synth.space.field_names))
    assert len(back) == len(tiny_synth)
    np.testing.assert_array_equal(back.labels, tiny_synth.labels)
    p2 = tmp_path / "y.csv"
    write_csv(back, p2)
    again = load_interactions(p2, Schema("domain", ("label_0", "label_1"), tiny_synth.space.field_names))
    assert again.same_samples(back)


def test_cache_round_trip(tmp_path, tiny_synth):
    p = tmp_path / "c.mdmtds"
    save_cache(tiny_synth, p)
    back = load_cache(p)
    assert back.same_samples(tiny_synth)
    assert p.read_bytes()[:7] == b"MDMTDS1"
    p2 = tmp_path / "c2.mdmtds"
    save_cache(back, p2)
    assert p.read_bytes() == p2.read_bytes()


def test_cache_bad_magic(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"NOTADS1" + b"\0" * 20)
    with pytest.raises(DatasetError):
        load_cache(p)


def test_dataset_arrays_are_read_only(tiny_synth):
    with pytest.raises(ValueError):
        tiny_synth.labels[0, 0] = 1


def test_dataset_rejects_out_of_vocab():
    space = FeatureSpace((Field("a", 3),), 1, 1)
    with pytest.raises(DatasetError, match="'a'"):
        Dataset(space, [0], [[3]], [[0]])


# splitting


def single_domain(n, seed=0):
    rng = np.random.default_rng(seed)
    space = FeatureSpace((Field("a", 10),), 1, 2)
    return Dataset(space, np.zeros(n), rng.integers(0, 10, (n, 1)), rng.integers(0, 2, (n, 2)))


def test_split_sizes_exact():
    tr, va, te = split_dataset(single_domain(100), (0.8, 0.1, 0.1), seed=0)
    assert (len(tr), len(va), len(te)) == (80, 10, 10)


def _rows(ds):
    return sorted(map(tuple, np.column_stack([ds.domains, ds.features, ds.labels]).tolist()))


def test_split_is_partition(tiny_synth):
    parts = split_dataset(tiny_synth, seed=4)
    assert _rows(tiny_synth) == sorted(sum((_rows(p) for p in parts), []))
    assert [p.split for p in parts] == ["train", "valid", "test"]


def test_split_deterministic(tiny_synth):
    a = split_dataset(tiny_synth, seed=9)
    b = split_dataset(tiny_synth, seed=9)
    assert all(x.same_samples(y) for x, y in zip(a, b))


def test_split_needs_three_per_domain():
    space = FeatureSpace((Field("a", 3),), 2, 1)
    ds = Dataset(space, [0, 0, 0, 1, 1], [[1]] * 5, [[0]] * 5)
    with pytest.raises(DatasetError, match="domain 1"):
        split_dataset(ds)


def test_split_ratio_validation(tiny_synth):
    with pytest.raises(DatasetError):
        split_dataset(tiny_synth, (0.5, 0.3, 0.3))


@settings(max_examples=25, deadline=None)
@given(st.integers(200, 600), st.integers(0, 10_000))
def test_split_preserves_label_means(n, seed):
    ds = single_domain(n, seed)
    full = ds.labels.mean(axis=0)
    for part in split_dataset(ds, seed=seed):
        assert np.all(np.abs(part.labels.mean(axis=0) - full) <= 0.05)


# batching


def test_batches_cover_and_single_domain(tiny_synth):
    small = tiny_synth.subset(np.arange(0, len(tiny_synth), 50))
    assert len(small) == 10
    batches = list(domain_batches(small, 4, seed=0))
    assert sum(len(b) for b in batches) == 10
    assert sorted(np.concatenate([b.index for b in batches]).tolist()) == list(range(10))
    for b in batches:
        assert set(small.domains[b.index].tolist()) == {b.domain}
        assert len(b) <= 4


def test_batches_proportional():
    space = FeatureSpace((Field("a", 3),), 2, 1)
    ds = Dataset(space, [0] * 900 + [1] * 100, [[1]] * 1000, [[0]] * 1000)
    doms = [b.domain for b in domain_batches(ds, 10, seed=1)]
    assert doms.count(0) == 90 and doms.count(1) == 10
    # interleaved: every run of ten consecutive batches contains the small domain once
    for i in range(0, 100, 10):
        assert doms[i : i + 10].count(1) == 1


def test_batches_deterministic(tiny_synth):
    a = [b.index.tolist() for b in domain_batches(tiny_synth, 32, seed=5)]
    b = [b.index.tolist() for b in domain_batches(tiny_synth, 32, seed=5)]
    c = [b.index.tolist() for b in domain_batches(tiny_synth, 32, seed=6)]
    assert a == b and a != c


def test_batches_errors(tiny_synth):
    with pytest.raises(ValueError):
        list(domain_batches(tiny_synth, 0, seed=0))
    with pytest.raises(DatasetError):
        list(domain_batches(tiny_synth.subset([]), 4, seed=0))


# synthetic generator


def test_synthetic_counts_match_skew():
    ds = generate_synthetic(SyntheticSpec(domain_counts=(700, 8900, 400), vocab_sizes=(50, 20)))
    counts = ds.domain_counts()
    assert counts.tolist() == [700, 8900, 400]
    np.testing.assert_allclose(counts / counts.sum(), [0.07, 0.89, 0.04])


def test_synthetic_bit_reproducible():
    spec = SyntheticSpec(domain_counts=(50, 60), vocab_sizes=(30, 20), seed=11)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert a.same_samples(b)


def _agreement_across_domains(rho_dom):
    spec = SyntheticSpec(
        domain_counts=(3000, 3000), task_count=1, vocab_sizes=(5, 5), rho_dom=rho_dom, rho_task=1.0, noise=0.0, seed=2
    )
    ds = generate_synthetic(spec)
    key = ds.features[:, 0] * 10 + ds.features[:, 1]
    agree = []
    for k in np.unique(key):
        l0 = ds.labels[(key == k) & (ds.domains == 0), 0]
        l1 = ds.labels[(key == k) & (ds.domains == 1), 0]
        if len(l0) and len(l1):
            # noise 0 means one label per (domain, ids)
            assert len(set(l0.tolist())) == 1 and len(set(l1.tolist())) == 1
            agree.append(l0[0] == l1[0])
    return np.mean(agree)


def test_full_correlation_transfers_perfectly():
    assert _agreement_across_domains(1.0) == 1.0


def test_zero_correlation_carries_no_cross_domain_signal():
    # 16 id pairs; agreement sits near chance instead of 1
    assert _agreement_across_domains(0.0) < 0.85


def test_rho_task_one_gives_identical_tasks():
    spec = SyntheticSpec(domain_counts=(200,), task_count=3, vocab_sizes=(20, 10), rho_task=1.0, noise=0.0)
    ds = generate_synthetic(spec)
    assert (ds.labels == ds.labels[:, :1]).all()


def test_noise_rate_flips_labels():
    base = dict(domain_counts=(20000,), task_count=1, vocab_sizes=(50, 40), seed=8)
    clean = generate_synthetic(SyntheticSpec(noise=0.0, **base))
    noisy = generate_synthetic(SyntheticSpec(noise=0.2, **base))
    assert np.mean(clean.labels != noisy.labels) == pytest.approx(0.2, abs=0.01)


@pytest.mark.parametrize(
    "kw",
    [
        {"rho_dom": 1.5},
        {"rho_task": -0.1},
        {"noise": 0.5},
        {"domain_counts": (10, 0)},
        {"vocab_sizes": (1,)},
        {"latent_dim": 0},
    ],
)
def test_spec_validation(kw):
    with pytest.raises(DatasetError):
        SyntheticSpec(**kw)


def test_movielens_conversion(tmp_path):
    ml = tmp_path / "ml"
    ml.mkdir()
    (ml / "users.dat").write_text("1::F::1::10::48067\n2::M::25::16::70072\n3::M::45::7::55117\n", encoding="latin-1")
    (ml / "movies.dat").write_text("10::Toy Story (1995)::Animation|Comedy\n20::Heat (1995)::Action\n", encoding="latin-1")
    (ml / "ratings.dat").write_text(
        "1::10::5::978300760\n2::10::3::978302109\n3::20::2::978301968\n3::10::4::978300275\n", encoding="latin-1"
    )
    out = tmp_path / "ml.csv"
    counts = movielens_to_csv(ml, out)
    assert counts == [1, 1, 2]
    from mdmt.data import MOVIELENS_SCHEMA

    ds = load_interactions(out, MOVIELENS_SCHEMA)
    assert ds.space.domain_count == 3
    assert ds.labels.tolist() == [[1, 1], [1, 0], [0, 0], [1, 1]]
