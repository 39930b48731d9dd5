import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modmoe.analytics import BUCKETS, activation_stats, bucket_of, entropy, rmse, tabulate
from modmoe.errors import ContractError
from modmoe.routing import RoutingTrace


def test_rmse_examples():
    assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert rmse([0.0, 0.0], [1.0, -1.0]) == 1.0
    assert rmse([3.0, 0.0], [1.0, 3.0]) == pytest.approx(math.sqrt(6.5), abs=1e-15)


def test_rmse_rejects_bad_input():
    with pytest.raises(ContractError):
        rmse([], [])
    with pytest.raises(ContractError):
        rmse([1.0], [1.0, 2.0])


@pytest.mark.parametrize(
    "value,bucket", [(-0.5, "<0"), (0.0, "=0"), (0.5, "(0,1]"), (1.0, "(0,1]"), (1.5, ">1"), (1e-9, "(0,1]")]
)
def test_bucket_boundaries(value, bucket):
    assert bucket_of(value) == bucket


def test_tabulate_single_combination():
    rep = tabulate([3, 3], [0.0, 2.0], [1.0, 2.0])
    assert list(rep.by_combination) == [3]
    assert rep.by_combination[3].mean == pytest.approx(math.sqrt(0.5))
    assert rep.by_bucket["=0"].mean == 1.0
    assert rep.by_bucket[">1"].mean == 0.0
    assert rep.overall.std == 0.0


def _brute(avail, y, preds, bits=None, bucket=None):
    per_seed = []
    for p in preds:
        res = [pi - yi for a, yi, pi in zip(avail, y, p)
               if (bits is None or a == bits) and (bucket is None or bucket_of(yi) == bucket)]
        per_seed.append(math.sqrt(sum(r * r for r in res) / len(res)))
    mean = sum(per_seed) / len(per_seed)
    std = math.sqrt(sum((v - mean) ** 2 for v in per_seed) / len(per_seed))
    return mean, std


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 3), st.integers(1, 80))
def test_tabulate_matches_brute_force(seed, seeds, n):
    rng = np.random.default_rng(seed)
    avail = rng.integers(1, 16, size=n).tolist()
    y = (np.round(rng.normal(0, 1.5, size=n) * 2) / 2).tolist()
    preds = [rng.normal(size=n).tolist() for _ in range(seeds)]
    rep = tabulate(avail, y, preds)
    cells = [(None, None, rep.overall)]
    cells += [(b, None, c) for b, c in rep.by_combination.items()]
    cells += [(None, k, c) for k, c in rep.by_bucket.items()]
    cells += [(b, k, c) for (b, k), c in rep.by_combination_bucket.items()]
    for bits, bucket, cell in cells:
        mean, std = _brute(avail, y, preds, bits, bucket)
        assert abs(cell.mean - mean) <= 1e-12
        assert abs(cell.std - std) <= 1e-12
    assert sum(c.n for c in rep.by_combination.values()) == n
    assert set(rep.by_bucket) <= set(BUCKETS)


def test_overall_recombines_from_cells(rng):
    avail = rng.integers(1, 16, size=200)
    y = rng.normal(size=200)
    p = rng.normal(size=200)
    rep = tabulate(avail, y, p)
    pooled = sum(c.n * c.mean**2 for c in rep.by_combination.values()) / 200
    assert abs(math.sqrt(pooled) - rep.overall.mean) <= 1e-12


def test_metrics_files(tmp_path):
    rep = tabulate([1, 2, 3], [0.0, 1.0, -1.0], [[0.5, 1.0, -1.0], [0.0, 1.0, 0.0]])
    rep.write(tmp_path / "m.json", tmp_path / "m.csv")
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert rows[0]["section"] == "overall"
    assert len(rows[0]["per_seed_rmse"].split(";")) == 2


# ---------------------------------------------------------------- activation


def _trace(selected, availability, experts, strategy="per-modality"):
    selected = np.asarray(selected)
    probs = np.full(selected.shape[:2] + (experts,), 1.0 / experts)
    weights = np.zeros_like(probs)
    np.put_along_axis(weights, selected, 1.0 / experts, axis=-1)
    return RoutingTrace(probs, selected, weights, np.asarray(availability), strategy)


def test_entropy_examples():
    assert entropy([1.0, 0.0]) == 0.0
    assert entropy([0.25] * 4) == pytest.approx(math.log(4))


def test_activation_point_mass_has_zero_entropy():
    sel = np.zeros((10, 4, 1), dtype=int)
    rep = activation_stats(_trace(sel, [1] * 10, 16))
    assert rep.aggregate_entropy == 0.0
    assert rep.router_entropy == [0.0] * 4
    assert rep.frequency[0] == 1.0 and rep.frequency[1:].sum() == 0.0


def test_uniform_random_activation_entropy_near_max(rng):
    e = 16
    sel = np.stack([rng.permutation(e)[:2] for _ in range(4000 * 4)]).reshape(4000, 4, 2)
    rep = activation_stats(_trace(sel, rng.integers(1, 16, size=4000), e))
    assert rep.aggregate_entropy == pytest.approx(math.log(e), abs=0.01)
    assert rep.frequency.sum() == pytest.approx(2.0)


def test_activation_adjusted_shares_reweight_prevalence():
    # combination 1 is nine times more common but both route only to expert 0
    sel = np.zeros((10, 4, 1), dtype=int)
    rep = activation_stats(_trace(sel, [1] * 9 + [2], 16))
    assert rep.adjusted[0, 0] == pytest.approx(0.5)
    assert rep.adjusted[0, 1] == pytest.approx(0.5)
    assert rep.adjusted[1:].sum() == 0.0


def test_activation_is_duplication_invariant(rng):
    sel = rng.integers(0, 16, size=(30, 4, 1))
    avail = rng.integers(1, 16, size=30)
    once = activation_stats(_trace(sel, avail, 16))
    twice = activation_stats(_trace(np.concatenate([sel, sel]), np.concatenate([avail, avail]), 16))
    np.testing.assert_allclose(once.frequency, twice.frequency, atol=1e-15)
    np.testing.assert_allclose(once.adjusted, twice.adjusted, atol=1e-15)
    assert once.aggregate_entropy == pytest.approx(twice.aggregate_entropy, abs=1e-15)


def test_argmax_only_counts_first_choice():
    sel = np.tile(np.array([3, 5]), (6, 4, 1))
    rep = activation_stats(_trace(sel, [15] * 6, 16), argmax_only=True)
    assert rep.frequency[3] == 1.0 and rep.frequency[5] == 0.0


def test_activation_csv(tmp_path, rng):
    rep = activation_stats(_trace(rng.integers(0, 16, size=(5, 4, 1)), [1, 2, 3, 4, 5], 16))
    rep.write_csv(tmp_path / "a.csv")
    rows = list(csv.reader(open(tmp_path / "a.csv")))
    assert rows[0][:3] == ["expert_index", "activation_frequency", "combo_1"]
    assert len(rows) == 17 and len(rows[0]) == 17
