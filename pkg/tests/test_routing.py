import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from modmoe import autodiff as ad
from modmoe.autodiff import Tensor
from modmoe.config import RoutingConfig
from modmoe.errors import ConfigurationError, ContractError
from modmoe.model import FusionModel
from modmoe.routing import (
    RoutingTrace,
    SparseMoE,
    balancing_loss,
    specialization_loss,
    specialization_targets,
    top_k_mask,
    write_trace_csv,
)
from conftest import random_batch, small_model_cfg, small_routing_cfg
from oracles import softmax_mp, top_k_by_sort


def test_top_k_mask_examples():
    np.testing.assert_array_equal(top_k_mask([0.5, 0.3, 0.2], 1), [0.5, 0, 0])
    np.testing.assert_array_equal(top_k_mask([0.25] * 4, 2), [0.25, 0.25, 0, 0])


def test_top_k_mask_rejects_bad_k():
    with pytest.raises(ContractError):
        top_k_mask([0.5, 0.5], 0)
    with pytest.raises(ContractError):
        top_k_mask([0.5, 0.5], 3)


@settings(max_examples=300, deadline=None)
@given(st.data())
def test_top_k_mask_matches_sort_oracle(data):
    e = data.draw(st.integers(1, 20))
    k = data.draw(st.integers(1, e))
    # a small value alphabet forces plenty of ties
    v = data.draw(hnp.arrays(np.float64, e, elements=st.sampled_from([0.0, 0.1, 0.25, 0.3, 0.5, 0.9])))
    out = top_k_mask(v, k)
    assert set(np.flatnonzero(out != 0) if np.all(v > 0) else []) <= top_k_by_sort(list(v), k)
    kept = {j for j in range(e) if out[j] == v[j] and j in top_k_by_sort(list(v), k)}
    assert kept == top_k_by_sort(list(v), k)
    assert all(out[j] == 0 for j in range(e) if j not in top_k_by_sort(list(v), k))


def _moe(rng, **kw):
    return SparseMoE(small_routing_cfg(**kw), 4, 8, rng, rng)


def test_route_k_equals_e_is_full_mixture(rng):
    moe = _moe(rng, experts=4, top_k=4, specialization=False)
    h = rng.normal(size=(3, 4, 8))
    out, probs, trace = moe(Tensor(h))
    np.testing.assert_allclose(trace.weights.sum(axis=-1), 1.0, atol=1e-12)
    flat = h.reshape(-1, 8)
    expected = sum(
        trace.weights.reshape(-1, 4)[:, j : j + 1] * ex(Tensor(flat)).data for j, ex in enumerate(moe.experts)
    )
    np.testing.assert_allclose(out.data.reshape(-1, 8), expected, atol=1e-12)


def test_route_selects_top_two_without_renormalising(rng):
    moe = _moe(rng, strategy="shared")
    w, b = moe.routers[0]
    w.data[:] = 0.0
    b.data[:] = 0.0
    b.data[0], b.data[1] = 2.0, 1.0
    _, _, trace = moe(Tensor(rng.normal(size=(1, 4, 8))))
    ref = softmax_mp([2, 1] + [0] * 14)
    for i in range(4):
        assert sorted(trace.selected[0, i].tolist()) == [0, 1]
        np.testing.assert_allclose(trace.weights[0, i, :2], ref[:2], atol=1e-12)
        assert np.all(trace.weights[0, i, 2:] == 0.0)


def test_renormalize_flag(rng):
    moe = _moe(rng, renormalize=True)
    _, _, trace = moe(Tensor(rng.normal(size=(5, 4, 8))))
    np.testing.assert_allclose(trace.weights.sum(axis=-1), 1.0, atol=1e-12)


def test_router_counts(rng):
    assert len(_moe(rng, strategy="shared").routers) == 1
    assert len(_moe(rng, strategy="per-modality").routers) == 4


def _tie_routers(per_mod, shared):
    for w, b in per_mod.moe.routers:
        w.data = shared.moe.routers[0][0].data.copy()
        b.data = shared.moe.routers[0][1].data.copy()


def test_tied_per_modality_routers_reproduce_shared(rng):
    shared = FusionModel(small_model_cfg(), small_routing_cfg(strategy="shared"), seed=3)
    per_mod = FusionModel(small_model_cfg(), small_routing_cfg(strategy="per-modality"), seed=3)
    _tie_routers(per_mod, shared)
    batch = random_batch(rng, 30, np.tile(np.arange(1, 16), 2))
    a, _, ta = shared.forward(batch)
    b, _, tb = per_mod.forward(batch)
    assert np.abs(a.data - b.data).max() <= 1e-12
    np.testing.assert_array_equal(ta.selected, tb.selected)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-30, 30))
def test_logit_shift_leaves_selection_and_weights(seed, c):
    rng = np.random.default_rng(seed)
    moe = _moe(rng)
    h = Tensor(rng.normal(size=(2, 4, 8)))
    _, _, before = moe(h)
    for _, b in moe.routers:
        b.data = b.data + c
    _, _, after = moe(h)
    np.testing.assert_array_equal(before.selected, after.selected)
    np.testing.assert_allclose(before.weights, after.weights, atol=1e-12)


def test_balancing_loss_examples():
    uniform = Tensor(np.full((5, 4, 16), 1 / 16))
    assert balancing_loss(uniform, "shared").item() == pytest.approx(0.0, abs=1e-15)
    assert balancing_loss(uniform, "per-modality").item() == pytest.approx(0.0, abs=1e-15)
    one = Tensor(np.array([[[1.0, 0.0]]]))
    assert balancing_loss(one, "shared").item() == pytest.approx(1.0, abs=1e-12)


def test_balancing_loss_forms(rng):
    probs = ad.softmax(Tensor(rng.normal(size=(6, 4, 16)))).data

    def cv2(v):
        return v.std() ** 2 / v.mean() ** 2

    shared = cv2(probs.reshape(-1, 16).sum(axis=0))
    per_mod = sum(cv2(probs[:, i].sum(axis=0)) for i in range(4))
    assert balancing_loss(Tensor(probs), "shared").item() == pytest.approx(shared, rel=1e-12)
    assert balancing_loss(Tensor(probs), "per-modality").item() == pytest.approx(per_mod, rel=1e-12)
    perm = rng.permutation(6)
    assert balancing_loss(Tensor(probs[perm]), "per-modality").item() == pytest.approx(per_mod, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, (3, 2, 5), elements=st.floats(-8, 8)))
def test_balancing_loss_nonnegative(logits):
    probs = ad.softmax(Tensor(logits))
    assert balancing_loss(probs, "shared").item() >= 0
    assert balancing_loss(probs, "per-modality").item() >= 0


def test_specialization_targets_skip_buffer():
    assert specialization_targets([15]).tolist() == [14]
    assert specialization_targets(list(range(1, 16))).max() == 14


def test_specialization_loss_examples():
    avail = np.array([3, 15])
    probs = np.zeros((2, 4, 16))
    probs[0, :, 2] = 1.0
    probs[1, :, 14] = 1.0
    assert specialization_loss(Tensor(probs), avail).item() < 1e-9
    uniform = Tensor(np.full((2, 4, 16), 1 / 16))
    assert specialization_loss(uniform, avail).item() == pytest.approx(math.log(16), abs=1e-9)


def test_specialization_loss_observed_only():
    probs = np.full((1, 4, 16), 1 / 16)
    probs[0, 0] = 0.0
    probs[0, 0, 0] = 1.0  # observed slot M on its target
    loss = specialization_loss(Tensor(probs), [1], include_imputed=False).item()
    assert loss < 1e-9


def test_specialization_needs_enough_experts():
    with pytest.raises(ConfigurationError):
        specialization_loss(Tensor(np.full((1, 4, 8), 1 / 8)), [1])
    with pytest.raises(ConfigurationError):
        RoutingConfig(experts=8).validate(4)
    RoutingConfig(experts=8, specialization=False).validate(4)


def test_predict_is_deterministic(rng):
    model = FusionModel(small_model_cfg(), small_routing_cfg(), seed=0)
    batch = random_batch(rng, 4)
    np.testing.assert_array_equal(model.predict(batch), model.predict(batch))


def test_prediction_depends_on_baseline(rng):
    model = FusionModel(small_model_cfg(), small_routing_cfg(), seed=0)
    batch = random_batch(rng, 1)
    pred, _, _ = model.forward(batch)
    # the baseline enters as a constant; probe through the head's first-layer weights instead
    ad.sum(pred).backward()
    baseline_row = model.head.w1.grad[-1]
    assert np.any(baseline_row != 0)
    bumped = random_batch(np.random.default_rng(0), 1)
    bumped.features, bumped.availability = batch.features, batch.availability
    bumped.baseline = batch.baseline + 3.0
    assert model.predict(bumped)[0] != model.predict(batch)[0]


@pytest.mark.parametrize("strategy", ["shared", "per-modality"])
def test_forward_all_fifteen_patterns_finite(rng, strategy):
    model = FusionModel(small_model_cfg(), small_routing_cfg(strategy=strategy), seed=1)
    preds = model.predict(random_batch(rng, 15, np.arange(1, 16)))
    assert preds.shape == (15,)
    assert np.all(np.isfinite(preds))


def test_trace_csv(rng, tmp_path):
    model = FusionModel(small_model_cfg(), small_routing_cfg(), seed=0)
    batch = random_batch(rng, 3, [1, 6, 15])
    _, trace = model.predict(batch, return_trace=True)
    path = tmp_path / "trace.csv"
    write_trace_csv(trace, ["a", "b", "c"], "MFAT", path)
    lines = path.read_text().splitlines()
    assert lines[0] == "sample_id,modality_label,availability_bitmask,expert_index,gate_weight,selected"
    assert len(lines) == 1 + 3 * 4 * 2
    assert lines[1].startswith("a,M,1,")
    assert isinstance(trace, RoutingTrace)
