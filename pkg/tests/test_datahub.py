import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedwarm import datahub
from fedwarm.datahub import DataError, LabeledDataset, SessionSchedule
from fedwarm.numkit import derive_stream


def labelled(counts, dim=2, seed=0):
    """Dataset with ``counts[c]`` samples of class ``c``."""
    y = np.repeat(np.arange(len(counts)), counts)
    X = derive_stream(seed, ("labelled",)).normal(size=(y.size, dim))
    return LabeledDataset(X, y, len(counts))


def assert_true_partition(clients, pool):
    seen = np.concatenate([c.indices for c in clients])
    assert seen.size == np.unique(seen).size, "client index sets overlap"
    assert np.array_equal(np.sort(seen), np.sort(pool))


# ----------------------------------------------------------------- generation


def test_mixture_size_and_balance():
    d = datahub.gen_gaussian_mixture(3, 100, 2, 0.5, derive_stream(0, ()))
    assert len(d) == 300
    assert np.array_equal(np.bincount(d.labels), [100, 100, 100])


def test_mixture_without_spread_collapses_to_centers():
    d = datahub.gen_gaussian_mixture(4, 50, 3, 0.0, derive_stream(0, ()))
    for c in range(4):
        assert d.features[d.labels == c].var(axis=0).max() < 1e-6


def test_mixture_deterministic():
    a = datahub.gen_gaussian_mixture(5, 20, 4, 1.0, derive_stream(9, ()))
    b = datahub.gen_gaussian_mixture(5, 20, 4, 1.0, derive_stream(9, ()))
    assert a == b


def test_one_dimensional_mixture_separates_classes():
    d = datahub.gen_gaussian_mixture(3, 10, 1, 0.0, derive_stream(0, ()))
    assert len(np.unique(d.features[:, 0])) == 3


def test_mixture_rejects_bad_counts():
    with pytest.raises(DataError):
        datahub.gen_gaussian_mixture(0, 10, 2, 1.0, derive_stream(0, ()))
    with pytest.raises(DataError):
        datahub.gen_gaussian_mixture(2, 10, 2, -1.0, derive_stream(0, ()))


def test_standardize():
    d = datahub.standardize(datahub.gen_gaussian_mixture(3, 30, 3, 2.0, derive_stream(1, ())))
    assert np.allclose(d.features.mean(axis=0), 0, atol=1e-12)
    assert np.allclose(d.features.std(axis=0), 1, atol=1e-12)


def test_dataset_validation():
    with pytest.raises(DataError):
        LabeledDataset(np.zeros((3, 2)), [0, 1], 2)
    with pytest.raises(DataError):
        LabeledDataset(np.zeros((2, 2)), [0, 2], 2)
    with pytest.raises(DataError):
        LabeledDataset(np.zeros(3), [0, 1, 0], 2)


# ------------------------------------------------------------------- CSV


def test_csv_minimal(tmp_path):
    p = tmp_path / "two.csv"
    p.write_text("label,f0\n0,1.5\n1,-2.0\n")
    d = datahub.load_csv(p)
    assert len(d) == 2 and d.num_classes == 2
    assert np.array_equal(d.features[:, 0], [1.5, -2.0])


def test_csv_bad_label_names_line(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("label,f0\nx,1.0\n")
    with pytest.raises(DataError, match="line 2"):
        datahub.load_csv(p)


@pytest.mark.parametrize(
    "body,match",
    [
        ("", "empty"),
        ("label,f0\n", "no data"),
        ("name,f0\n0,1\n", "header"),
        ("label,f0\n0,1\n1,2,3\n", "line 3"),
        ("label,f0\n0,abc\n", "line 2"),
        ("label,f0\n-1,0.5\n", "negative"),
        ("label,f0\n0,nan\n", "non-finite"),
    ],
)
def test_csv_errors(tmp_path, body, match):
    p = tmp_path / "x.csv"
    p.write_text(body)
    with pytest.raises(DataError, match=match):
        datahub.load_csv(p)


def test_csv_round_trip(tmp_path):
    src = datahub.gen_gaussian_mixture(3, 7, 2, 1.3, derive_stream(4, ()))
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    datahub.write_csv(src, a)
    first = datahub.load_csv(a)
    assert first == src
    datahub.write_csv(first, b)
    assert datahub.load_csv(b) == first
    assert b.read_bytes() == a.read_bytes()
    assert b"\r" not in a.read_bytes()


# --------------------------------------------------------------- schedules


def schedule(**kw):
    args = dict(num_labels=10, S=2, P=1, T=3, overlap=0.0, labels_per_session=5, recurrence=None)
    args.update(kw)
    rng = derive_stream(kw.pop("seed", 0), ("schedule",))
    args.pop("seed", None)
    return datahub.build_session_schedule(
        args.pop("num_labels"), args.pop("S"), args.pop("P"), args.pop("T"), args.pop("overlap"),
        args.pop("labels_per_session"), args.pop("recurrence"), rng, **args,
    )


def test_zero_overlap_gives_disjoint_halves():
    s = schedule()
    a, b = set(s.sessions[0].labels), set(s.sessions[1].labels)
    assert len(a) == len(b) == 5 and not a & b


def test_overlap_fraction_shares_rounded_count():
    s = schedule(num_labels=20, S=5, overlap=0.2)
    for x, y in zip(s.sessions, s.sessions[1:]):
        assert len(set(x.labels) & set(y.labels)) == 1


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.floats(0, 0.95), st.integers(0, 1000), st.integers(1, 6))
def test_overlap_property(lps, overlap, seed, S):
    shared = int(round(overlap * lps))
    need = lps + (lps - shared)
    s = schedule(num_labels=need + 1, S=S, overlap=overlap, labels_per_session=lps, seed=seed)
    for x, y in zip(s.sessions, s.sessions[1:]):
        assert len(set(x.labels) & set(y.labels)) == shared
        assert len(x.labels) == lps


def test_recurrence_reuses_label_set_and_data_source():
    s = schedule(num_labels=6, S=3, labels_per_session=3, recurrence={2: 0})
    assert s.sessions[2].labels == s.sessions[0].labels
    assert s.sessions[2].data_source == 0
    assert s.sessions[2].client_ids == s.sessions[0].client_ids


def test_infeasible_overlap_rejected():
    with pytest.raises(DataError, match="needs at least"):
        schedule(num_labels=6, labels_per_session=5)


@pytest.mark.parametrize(
    "kw",
    [dict(overlap=1.0), dict(overlap=-0.1), dict(labels_per_session=11), dict(S=3, recurrence={1: 2})],
)
def test_schedule_argument_errors(kw):
    with pytest.raises(DataError):
        schedule(**kw)


def test_schedule_requires_S_at_least_P():
    with pytest.raises(DataError):
        schedule(S=1, P=2)


def test_schedule_deterministic_and_json_round_trip():
    a = schedule(num_labels=12, S=4, overlap=0.4, num_clients=3)
    b = schedule(num_labels=12, S=4, overlap=0.4, num_clients=3)
    assert a.to_json() == b.to_json()
    again = SessionSchedule.from_dict(a.to_dict())
    assert again.to_json() == a.to_json()
    assert a.sessions[1].client_ids == (3, 4, 5)


def test_unseen_labels_only_in_final_session():
    s = schedule(num_labels=10, S=4, labels_per_session=3, unseen_final=2, recurrence={2: 0})
    earlier = set().union(*(set(p.labels) for p in s.sessions[:-1]))
    novel = set(s.sessions[-1].labels) - earlier
    assert len(novel) >= 2


def test_pilot_round_override():
    s = schedule(pilot_rounds=7)
    assert s.rounds_in(0) == 7 and s.rounds_in(1) == 3


# -------------------------------------------------------------- partitions


def test_dirichlet_near_uniform_for_huge_alpha():
    d = labelled([1000])
    for seed in range(5):
        clients = datahub.partition_dirichlet(d, [0], 1e9, 10, derive_stream(seed, ()))
        assert all(90 <= len(c) <= 110 for c in clients)


def test_dirichlet_is_a_partition_with_per_label_totals():
    d = labelled([30, 50, 20, 40])
    clients = datahub.partition_dirichlet(d, [0, 1, 3], 0.3, 6, derive_stream(2, ()))
    assert_true_partition(clients, d.indices_of([0, 1, 3]))
    hist = datahub.label_histograms(clients, 4)
    assert np.array_equal(hist.sum(axis=0), [30, 50, 0, 40])
    assert all(len(c) >= 1 for c in clients)


def test_dirichlet_repair_fills_empty_clients():
    d = labelled([12])
    for seed in range(20):
        clients = datahub.partition_dirichlet(d, [0], 0.01, 12, derive_stream(seed, ()))
        assert all(len(c) == 1 for c in clients)


def test_dirichlet_small_alpha_is_more_heterogeneous():
    d = labelled([200] * 5)

    def mean_tv(alpha):
        tv = []
        for seed in range(5):
            h = datahub.label_histograms(datahub.partition_dirichlet(d, range(5), alpha, 8, derive_stream(seed, ())), 5)
            p = h / h.sum(axis=1, keepdims=True)
            glob = h.sum(axis=0) / h.sum()
            tv.append(0.5 * np.abs(p - glob).sum(axis=1).mean())
        return np.mean(tv)

    assert mean_tv(0.3) > mean_tv(1e9)


def test_dirichlet_errors():
    d = labelled([5])
    with pytest.raises(DataError):
        datahub.partition_dirichlet(d, [0], 0.5, 6, derive_stream(0, ()))
    with pytest.raises(DataError):
        datahub.partition_dirichlet(d, [0], 0.0, 2, derive_stream(0, ()))
    with pytest.raises(DataError):
        datahub.partition_dirichlet(d, [], 1.0, 2, derive_stream(0, ()))


def test_distinct_gives_each_client_its_own_label():
    d = labelled([10] * 10)
    clients = datahub.partition_named(d, "distinct", 10, derive_stream(0, ()))
    for k, c in enumerate(clients):
        assert set(c.labels.tolist()) == {k}
    assert_true_partition(clients, np.arange(len(d)))


def test_half_splits_labels_between_client_halves():
    d = labelled([41] * 10)
    clients = datahub.partition_named(d, "half", 20, derive_stream(0, ()))
    for k, c in enumerate(clients):
        assert set(c.labels.tolist()) == (set(range(5)) if k < 10 else set(range(5, 10)))
    hist = datahub.label_histograms(clients, 10)
    for lab in range(10):
        owners = hist[:10, lab] if lab < 5 else hist[10:, lab]
        assert owners.max() - owners.min() <= 1
    assert_true_partition(clients, np.arange(len(d)))


def test_two_shard_ten_labels_ten_clients():
    d = labelled([30] * 10)
    clients = datahub.partition_named(d, "two_shard", 10, derive_stream(3, ()))
    for c in clients:
        assert len(np.unique(c.labels)) == 2
        assert len(c) == 30  # two half-label shards
    assert_true_partition(clients, np.arange(len(d)))


def test_two_shard_more_clients_than_labels():
    d = labelled([40] * 5)
    clients = datahub.partition_named(d, "two_shard", 12, derive_stream(3, ()))
    assert all(len(np.unique(c.labels)) >= 2 for c in clients)
    assert_true_partition(clients, np.arange(len(d)))


def test_partial_overlap_layout():
    d = labelled([20] * 10)
    clients = datahub.partition_named(d, "partial_overlap", 4, derive_stream(0, ()))
    first = set().union(*(set(c.labels.tolist()) for c in clients[:2]))
    second = set().union(*(set(c.labels.tolist()) for c in clients[2:]))
    assert len(first) == len(second) == 6
    assert len(first & second) == 2
    assert_true_partition(clients, d.indices_of(first | second))
    hist = datahub.label_histograms(clients, 10)
    for lab in first & second:
        assert hist[:2, lab].sum() == hist[2:, lab].sum() == 10


@pytest.mark.parametrize(
    "scheme,K,match",
    [("distinct", 3, "num_labels % K"), ("half", 3, "even"), ("two_shard", 1, "2 clients"),
     ("nonsense", 2, "unknown")],
)
def test_named_infeasible(scheme, K, match):
    with pytest.raises(DataError, match=match):
        datahub.partition_named(labelled([5] * 10), scheme, K, derive_stream(0, ()))


def test_partition_session_dispatch_and_client_ids():
    d = labelled([20] * 4)
    a = datahub.partition_session(d, [0, 1], {"kind": "dirichlet", "alpha": 0.5}, 3, derive_stream(0, ()),
                                  session=2, client_ids=[6, 7, 8])
    assert [c.client_id for c in a] == [6, 7, 8] and all(c.session == 2 for c in a)
    b = datahub.partition_session(d, [0, 1, 2, 3], {"kind": "distinct"}, 4, derive_stream(0, ()))
    assert [set(c.labels.tolist()) for c in b] == [{0}, {1}, {2}, {3}]


def test_split_holdout():
    train, test = datahub.split_holdout(np.arange(50), 0.2, derive_stream(0, ()))
    assert test.size == 10 and train.size == 40
    assert not set(train) & set(test)
    assert datahub.split_holdout(np.arange(50), 0.0, derive_stream(0, ()))[1].size == 0


def test_client_dataset_rejects_duplicates():
    d = labelled([4])
    with pytest.raises(DataError):
        datahub.ClientDataset(0, [1, 1], 0, d)
