import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ttsprune.params import ParamStore, prunable_vector
from ttsprune.pruner import (
    PruneMask,
    apply_mask,
    load_mask,
    mask_overlap,
    num_to_prune,
    save_mask,
    sparsity,
    sparsity_report,
    ump,
)

GRID = [round(0.1 * i, 1) for i in range(10)] + [0.95, 0.99]


def random_store(rng, n_tensors=3):
    entries = {f"t{i}": rng.standard_normal(tuple(rng.integers(1, 7, size=rng.integers(1, 3)))) for i in range(n_tensors)}
    entries["bias"] = rng.standard_normal(4)
    return ParamStore(entries, {f"t{i}" for i in range(n_tensors)})


def test_forced_example():
    store = ParamStore({"a": [0.1, -2.0, 0.3], "b": [1.5, -0.2, 0.05, 4.0]}, {"a", "b"})
    m = ump(store, 3 / 7)
    np.testing.assert_array_equal(m["a"], [False, True, True])
    np.testing.assert_array_equal(m["b"], [True, False, False, True])


def test_zero_sparsity_is_all_ones():
    store = random_store(np.random.default_rng(0))
    assert ump(store, 0.0).equals(PruneMask.ones_like(store))


def test_threshold_against_full_sort():
    rng = np.random.default_rng(1)
    w = rng.standard_normal(1000).astype(np.float32)
    store = ParamStore({"w": w}, {"w"})
    m = ump(store, 0.9)
    assert m.zero_count == 900
    pruned, kept = np.abs(w[~m["w"]]), np.abs(w[m["w"]])
    assert pruned.max() <= kept.min()
    # same zero set as an independent full sort
    assert set(np.argsort(np.abs(w))[:900]) == set(np.flatnonzero(~m["w"]))


def test_ties_follow_flatten_order():
    store = ParamStore({"a": [1.0, 1.0], "b": [1.0, 1.0]}, {"a", "b"})
    m = ump(store, 0.5)
    np.testing.assert_array_equal(m.vector(), [False, False, True, True])


@pytest.mark.parametrize("s,d,k", [(0.5, 3, 2), (0.5, 5, 3), (0.25, 2, 1), (0.1, 10, 1), (0.99, 100, 99), (0.0, 7, 0)])
def test_num_to_prune_half_up(s, d, k):
    assert num_to_prune(s, d) == k


def test_num_to_prune_reads_floats_as_decimals():
    # binary 0.15 and 0.3 sit just below the decimals; the half-up tie must still round up
    assert num_to_prune(0.15, 10) == 2
    assert num_to_prune(0.3, 1185) == 356
    assert num_to_prune(np.float64(0.7), 1185) == 830


def test_sparsity_exact_on_grid():
    rng = np.random.default_rng(2)
    for _ in range(5):
        store = random_store(rng)
        d = store.num_prunable
        for s in GRID:
            assert sparsity(ump(store, s)) == num_to_prune(s, d) / d


@pytest.mark.parametrize("s", [1.0, -0.1, 1.5])
def test_out_of_range(s):
    with pytest.raises(ValueError):
        ump(ParamStore({"a": [1.0]}, {"a"}), s)


def test_no_prunable_tensors():
    with pytest.raises(ValueError):
        ump(ParamStore({"a": [1.0]}), 0.5)


def test_biases_untouched():
    store = random_store(np.random.default_rng(3))
    out = apply_mask(store, ump(store, 0.9))
    np.testing.assert_array_equal(out["bias"], store["bias"])


def test_apply_mask_example():
    store = ParamStore({"a": [5.0, -3.0]}, {"a"})
    out = apply_mask(store, PruneMask({"a": [0, 1]}))
    np.testing.assert_array_equal(out["a"], [0.0, -3.0])


def test_apply_all_ones_is_identity():
    store = random_store(np.random.default_rng(4))
    assert apply_mask(store, PruneMask.ones_like(store)).equals(store)


def test_apply_mask_missing_tensor():
    store = ParamStore({"a": [1.0], "b": [2.0]}, {"a", "b"})
    with pytest.raises(ValueError):
        apply_mask(store, PruneMask({"a": [1]}))


def test_mask_values_checked():
    with pytest.raises(ValueError):
        PruneMask({"a": [0, 2]})


def test_sparsity_examples():
    assert sparsity(PruneMask({"a": [0, 1, 1, 0]})) == 0.5
    assert sparsity(PruneMask({"a": [1, 1]})) == 0.0


def test_overlap_examples():
    m = PruneMask({"a": [0, 1, 0, 1]})
    assert mask_overlap(m, m) == 1.0
    assert mask_overlap(PruneMask({"a": [0, 0, 1, 1]}), PruneMask({"a": [1, 1, 0, 0]})) == 0.0
    z123 = PruneMask({"a": [1, 0, 0, 0, 1]})
    z234 = PruneMask({"a": [1, 1, 0, 0, 0]})
    assert mask_overlap(z123, z234) == 0.5
    ones = PruneMask({"a": [1, 1]})
    assert mask_overlap(ones, ones) == 1.0


def test_fixed_mask_respected():
    rng = np.random.default_rng(5)
    store = random_store(rng)
    m1 = ump(store, 0.3)
    shuffled = store.replace({n: rng.standard_normal(store[n].shape) for n in store.prunable_names()})
    m2 = ump(shuffled, 0.6, fixed=m1)
    assert not (m2.vector() & ~m1.vector()).any()
    assert m2.zero_count == num_to_prune(0.6, store.num_prunable)


def test_fixed_mask_over_budget():
    store = random_store(np.random.default_rng(6))
    with pytest.raises(ValueError):
        ump(store, 0.2, fixed=ump(store, 0.5))


def test_report_and_file_round_trip(tmp_path):
    store = random_store(np.random.default_rng(7))
    m = ump(store, 0.5)
    rep = sparsity_report(m)
    assert rep.zero_count == m.zero_count and rep.total == store.num_prunable
    assert set(rep.per_tensor) == set(store.prunable_names())
    save_mask(m, tmp_path / "m.prnt")
    assert load_mask(tmp_path / "m.prnt").equals(m)


weights = hnp.arrays(np.float32, st.integers(2, 60), elements=st.floats(-10, 10, width=32))


@settings(max_examples=100, deadline=None)
@given(weights, st.floats(0, 0.99), st.floats(0, 0.99))
def test_nestedness(w, s1, s2):
    s1, s2 = sorted((s1, s2))
    store = ParamStore({"w": w}, {"w"})
    z1, z2 = ~ump(store, s1).vector(), ~ump(store, s2).vector()
    assert not (z1 & ~z2).any()


@settings(max_examples=100, deadline=None)
@given(weights, st.floats(0, 0.99))
def test_idempotence(w, s):
    store = ParamStore({"w": w}, {"w"})
    m = ump(store, s)
    pruned = apply_mask(store, m)
    if np.all(prunable_vector(pruned)[m.vector()] != 0):
        assert ump(pruned, s).equals(m)


@settings(max_examples=100, deadline=None)
@given(weights, st.floats(0, 0.99))
def test_threshold_property(w, s):
    m = ump(ParamStore({"w": w}, {"w"}), s)
    pruned, kept = np.abs(w[~m["w"]]), np.abs(w[m["w"]])
    if pruned.size and kept.size:
        assert pruned.max() <= kept.min()
