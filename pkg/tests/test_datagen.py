import math

import numpy as np
import pytest

from fedclaims.datagen import (
    PartitionSpec,
    TabularDataset,
    TweedieParams,
    fit_standardization,
    generate_tweedie,
    horizontal_split,
    load_csv,
    save_csv,
    split_sizes,
    standardize,
    vertical_split,
)
from fedclaims.errors import ConfigError, IngestionError


def tweedie(lam, p=3, k=2.0, theta=100.0, seed=0, beta=None):
    beta = [0.0] * p if beta is None else beta
    return TweedieParams(lam, beta, k, theta, seed)


def small_ds(n=10, p=5, seed=0):
    return generate_tweedie(n, p, tweedie(0.5, p=p, seed=seed))


# -- generator ---------------------------------------------------------------


def test_generate_deterministic():
    a = generate_tweedie(500, 4, tweedie(0.3, p=4, seed=9))
    b = generate_tweedie(500, 4, tweedie(0.3, p=4, seed=9))
    assert a.equals(b)
    assert not a.equals(generate_tweedie(500, 4, tweedie(0.3, p=4, seed=10)))


def test_generate_empty():
    ds = generate_tweedie(0, 3, tweedie(1.0))
    assert ds.n == 0 and ds.features.shape == (0, 3) and ds.labels.shape == (0,)


def test_generate_vanishing_frequency():
    # P(any claim) <= n * lambda = 1e-9
    ds = generate_tweedie(1000, 3, tweedie(1e-12))
    assert np.count_nonzero(ds.labels == 0) >= 999


def test_generate_mean_matches_compound_expectation():
    ds = generate_tweedie(200_000, 2, tweedie(2.0, p=2, k=2.0, theta=100.0, seed=1))
    mean = ds.labels.mean()
    se = ds.labels.std(ddof=1) / math.sqrt(ds.n)
    assert abs(mean - 400.0) < 3 * se


def test_generate_claim_rate_ten_percent():
    ds = generate_tweedie(100_000, 2, tweedie(0.105, p=2, seed=2))
    rate = np.count_nonzero(ds.labels > 0) / ds.n
    assert abs(rate - 0.10) <= 0.01


@pytest.mark.parametrize("seed", range(3))
def test_zero_fraction_grows_as_frequency_falls(seed):
    lo = generate_tweedie(50_000, 2, tweedie(0.05, p=2, seed=seed))
    hi = generate_tweedie(50_000, 2, tweedie(0.5, p=2, seed=seed))
    assert np.mean(lo.labels == 0) > np.mean(hi.labels == 0)


def test_generate_labels_nonnegative_and_features_standard_normal():
    ds = generate_tweedie(20_000, 3, tweedie(0.4, p=3, beta=[0.5, -0.5, 0.2], seed=4))
    assert np.all(ds.labels >= 0)
    assert np.allclose(ds.features.mean(axis=0), 0, atol=0.03)
    assert np.allclose(ds.features.std(axis=0), 1, atol=0.03)


def test_log_link_signal():
    ds = generate_tweedie(50_000, 1, tweedie(0.3, p=1, beta=[1.0], seed=5))
    x = ds.features[:, 0]
    assert ds.labels[x > 1].mean() > 3 * ds.labels[x < -1].mean()


def test_frequency_is_capped():
    ds = generate_tweedie(5, 1, TweedieParams(1.0, [200.0], 1.0, 1.0, seed=3))
    assert np.all(np.isfinite(ds.labels))


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(base_frequency=0.0),
        dict(base_frequency=-1.0),
        dict(severity_shape=0.0),
        dict(severity_scale=-2.0),
        dict(base_frequency=float("nan")),
    ],
)
def test_invalid_tweedie_params(kwargs):
    base = dict(base_frequency=1.0, frequency_coefficients=[0.0], severity_shape=1.0, severity_scale=1.0)
    base.update(kwargs)
    with pytest.raises(ConfigError):
        TweedieParams(**base)


def test_coefficient_count_mismatch():
    with pytest.raises(ConfigError):
        generate_tweedie(10, 3, tweedie(1.0, p=2))


# -- horizontal --------------------------------------------------------------


def test_horizontal_whole_set_is_permutation():
    ds = small_ds()
    (only,) = horizontal_split(ds, PartitionSpec("horizontal", [1.0]), seed=3)
    assert sorted(only.entity_ids.tolist()) == sorted(ds.entity_ids.tolist())
    order = {int(e): i for i, e in enumerate(ds.entity_ids)}
    rows = [order[int(e)] for e in only.entity_ids]
    assert only.equals(ds.take(rows))


def test_horizontal_halves():
    ds = small_ds()
    a, b = horizontal_split(ds, PartitionSpec("horizontal", [0.5, 0.5]), seed=1)
    assert (a.n, b.n) == (5, 5)
    assert not set(a.entity_ids.tolist()) & set(b.entity_ids.tolist())
    assert a.has_labels and b.has_labels and a.p == b.p == ds.p


def test_horizontal_deterministic():
    ds = small_ds(n=100)
    spec = PartitionSpec("horizontal", [0.3, 0.7])
    a = horizontal_split(ds, spec, seed=8)
    b = horizontal_split(ds, spec, seed=8)
    assert all(x.equals(y) for x, y in zip(a, b))


def test_split_sizes_exact():
    assert split_sizes(10_000, [0.65, 0.35]) == [6500, 3500]
    assert split_sizes(10, [0.8, 0.2]) == [8, 2]
    assert sum(split_sizes(7, [1 / 3] * 3)) == 7


@pytest.mark.parametrize("fractions", [[0.5, 0.6], [0.0, 1.0], [], [1.2, -0.2]])
def test_horizontal_bad_fractions(fractions):
    with pytest.raises(ConfigError):
        PartitionSpec("horizontal", fractions)


# -- vertical ----------------------------------------------------------------


def test_vertical_degenerate():
    ds = small_ds()
    (only,) = vertical_split(ds, PartitionSpec("vertical", feature_sets=[ds.feature_names]))
    assert only.equals(ds)


def test_vertical_two_way():
    ds = small_ds()
    spec = PartitionSpec("vertical", feature_sets=[["x1", "x2"], ["x3", "x4", "x5"]], label_holder=0)
    a, b = vertical_split(ds, spec)
    assert (a.p, b.p) == (2, 3)
    assert np.array_equal(a.entity_ids, b.entity_ids)
    assert a.has_labels and not b.has_labels
    assert np.array_equal(np.hstack([a.features, b.features]), ds.features)


def test_vertical_overlap_rejected():
    with pytest.raises(ConfigError, match="x2"):
        PartitionSpec("vertical", feature_sets=[["x1", "x2"], ["x2", "x3"]])


def test_vertical_missing_feature():
    ds = small_ds()
    with pytest.raises(ConfigError, match="x5"):
        vertical_split(ds, PartitionSpec("vertical", feature_sets=[["x1", "x2"], ["x3", "x4"]]))


# -- standardize -------------------------------------------------------------


def ds_from(cols, names=None):
    x = np.array(cols, float).T
    names = names or [f"f{i}" for i in range(x.shape[1])]
    return TabularDataset(np.arange(x.shape[0]), x, names, np.zeros(x.shape[0]))


def test_standardize_constant_column():
    train = ds_from([[3.0, 3.0, 3.0]])
    std, _, stats = standardize(train)
    assert std.features[:, 0].tolist() == [0.0, 0.0, 0.0]
    assert stats.scale.tolist() == [1.0]


def test_standardize_two_values():
    std, (other,), stats = standardize(ds_from([[0.0, 2.0]]), [ds_from([[4.0]])])
    assert stats.mean.tolist() == [1.0] and stats.scale.tolist() == [1.0]
    assert std.features[:, 0].tolist() == [-1.0, 1.0]
    assert other.features[:, 0].tolist() == [3.0]


def test_standardize_stats_reapply():
    train = small_ds(n=50)
    std, _, stats = standardize(train)
    assert stats.apply(train).features.tobytes() == std.features.tobytes()
    assert fit_standardization(train).mean.tobytes() == stats.mean.tobytes()


def test_standardize_name_mismatch():
    with pytest.raises(ConfigError):
        standardize(ds_from([[1.0, 2.0]], ["a"]), [ds_from([[1.0]], ["b"])])


# -- CSV ---------------------------------------------------------------------


def test_csv_round_trip(tmp_path):
    ds = generate_tweedie(200, 4, tweedie(0.7, p=4, beta=[0.3, 0.1, -0.2, 0.0], seed=6))
    save_csv(ds, tmp_path / "d.csv")
    back = load_csv(tmp_path / "d.csv")
    assert back.equals(ds)


def test_csv_without_labels(tmp_path):
    ds = small_ds().without_labels()
    save_csv(ds, tmp_path / "d.csv")
    back = load_csv(tmp_path / "d.csv")
    assert not back.has_labels and back.equals(ds)


def test_csv_header_layout(tmp_path):
    save_csv(small_ds(n=2, p=2), tmp_path / "d.csv")
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "entity_id,x1,x2,loss"


def test_csv_duplicate_id(tmp_path):
    f = tmp_path / "d.csv"
    f.write_text("entity_id,a,loss\n7,1.0,0\n8,2.0,0\n7,3.0,1\n")
    with pytest.raises(IngestionError, match="duplicate entity_id 7"):
        load_csv(f)


@pytest.mark.parametrize(
    "body, needle",
    [
        ("entity_id,a,loss\n1,abc,0\n", "'a'"),
        ("entity_id,a,loss\n1,1.0\n", ":2:"),
        ("entity_id,a,loss\nx,1.0,0\n", "entity_id"),
        ("entity_id,a,loss\n1,1.0,-3\n", "negative"),
        ("id,a\n1,2\n", "first column"),
        ("", "empty"),
    ],
)
def test_csv_ingestion_errors(tmp_path, body, needle):
    f = tmp_path / "d.csv"
    f.write_text(body)
    with pytest.raises(IngestionError, match=needle):
        load_csv(f)
