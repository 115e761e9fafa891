import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from era_kd.data import (
    Dataset,
    SyntheticSpec,
    batches,
    generate,
    load_csv,
    nearest_centroid_accuracy,
    random_means,
    save_csv,
)
from era_kd.errors import DataIOError, InputError, SpecError


def spec3(**kw):
    return SyntheticSpec(3, 4, 100, random_means(3, 4, 3.0, 0), **kw)


def test_split_counts():
    train, test = generate(spec3())
    assert (len(train), len(test)) == (240, 60)
    assert np.bincount(train.labels).tolist() == [80, 80, 80]
    assert np.bincount(test.labels).tolist() == [20, 20, 20]
    assert train.split == "train" and test.split == "test"


def test_generation_deterministic():
    a, b = generate(spec3(seed=5)), generate(spec3(seed=5))
    for x, y in zip(a, b):
        assert x.features.tobytes() == y.features.tobytes()
        assert x.labels.tobytes() == y.labels.tobytes()
    c = generate(spec3(seed=6))
    assert c[0].features.tobytes() != a[0].features.tobytes()


def test_well_separated_nearest_centroid():
    means = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]])
    train, test = generate(SyntheticSpec(4, 2, 200, means, cluster_scale=1.0, seed=3))
    assert nearest_centroid_accuracy(train, test) >= 0.99


def test_label_noise_redraws_fraction():
    # far-apart clusters: the nearest mean recovers the generating cluster
    means = np.eye(3, 4) * 50.0
    train, test = generate(SyntheticSpec(3, 4, 400, means, label_noise=0.5, seed=1))
    x = np.concatenate([train.features, test.features])
    y = np.concatenate([train.labels, test.labels])
    source = np.argmin(((x[:, None, :] - means[None]) ** 2).sum(axis=2), axis=1)
    # a redrawn label keeps its class with probability 1/M
    assert abs((source != y).mean() - 0.5 * 2 / 3) < 0.04


def test_spec_errors():
    with pytest.raises(SpecError):
        SyntheticSpec(2, 2, 10, np.array([[1.0, 1.0], [1.0, 1.0]]))
    with pytest.raises(SpecError):
        spec3(cluster_scale=0.0)
    with pytest.raises(SpecError):
        spec3(label_noise=1.0)


def test_csv_round_trip(tmp_path):
    train, _ = generate(spec3())
    for header in (True, False):
        path = tmp_path / f"d{header}.csv"
        save_csv(train, path, header=header)
        back = load_csv(path, 4, 3)
        assert back.features.tobytes() == train.features.tobytes()
        assert back.labels.tolist() == train.labels.tolist()


def test_csv_bad_field_reports_line_7(tmp_path):
    rows = ["# f1,f2,label"] + [f"{i}.0,1.0,0" for i in range(5)] + ["1.0,abc,1", "2.0,2.0,1"]
    path = tmp_path / "bad.csv"
    path.write_text("\n".join(rows) + "\n")
    with pytest.raises(DataIOError, match=r":7:") as exc:
        load_csv(path)
    assert exc.value.line == 7


def test_csv_width_and_label_checks(tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("1,2,0\n1,2,3,0\n")
    with pytest.raises(DataIOError, match=":2:"):
        load_csv(path)
    path.write_text("1,2,5\n")
    with pytest.raises(DataIOError):
        load_csv(path, num_classes=3)


def test_csv_empty_file(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    with pytest.raises(InputError):
        load_csv(path)


def test_csv_missing_file(tmp_path):
    with pytest.raises(DataIOError):
        load_csv(tmp_path / "nope.csv")


def test_batch_sizes():
    ds = Dataset(np.arange(10.0)[:, None], np.zeros(10, dtype=int))
    assert [len(x) for x, _ in batches(ds, 4, 0, 0)] == [4, 4, 2]


def test_batch_size_checked():
    ds = Dataset(np.zeros((3, 1)), np.zeros(3, dtype=int))
    with pytest.raises(InputError):
        batches(ds, 0, 0, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.integers(1, 17), st.integers(0, 1000), st.integers(0, 50))
def test_batches_partition_and_determinism(n, bs, seed, epoch):
    ds = Dataset(np.arange(float(n))[:, None], np.zeros(n, dtype=int))
    a = batches(ds, bs, seed, epoch)
    b = batches(ds, bs, seed, epoch)
    seen = np.concatenate([x[:, 0] for x, _ in a])
    assert sorted(seen.tolist()) == list(range(n))
    assert all(np.array_equal(x, y) for (x, _), (y, _) in zip(a, b))
