from __future__ import annotations

import json

import numpy as np
import pytest

from divprem.tree import (
    AdaptedProcess,
    Node,
    TreeError,
    binomial_tree,
    build_tree,
    condexp,
    conditional_process,
    dump_tree,
    is_martingale,
    load_tree,
    martingale_differences,
    random_tree,
    up_moves,
)


def _nodes(*rows):
    return [{"id": i, "time": t, "parent": p, "prob": q} for i, t, p, q in rows]


def test_two_point_space(coin):
    assert coin.horizon == 1
    assert coin.leaves == ("a", "b")
    np.testing.assert_array_equal(coin.path_probs_at(1), [0.5, 0.5])


def test_binomial_node_count():
    tree = binomial_tree(3)
    assert len(tree) == 15
    assert [tree.size(t) for t in range(4)] == [1, 2, 4, 8]


def test_slices_are_sorted_by_id():
    tree = build_tree(_nodes(("r", 0, None, 1.0), ("z", 1, "r", 0.3), ("b", 1, "r", 0.7)))
    assert tree.ids_at(1) == ("b", "z")
    np.testing.assert_allclose(tree.probs_at(1), [0.7, 0.3])


@pytest.mark.parametrize(
    "rows, fragment, node",
    [
        ((("r", 0, None, 1.0), ("a", 1, "r", 0.6), ("b", 1, "r", 0.5)), "probability sum 1.1 ≠ 1", "r"),
        ((("r", 0, None, 1.0), ("a", 1, "q", 1.0)), "dangling parent", "a"),
        ((("r", 0, None, 1.0), ("a", 2, "r", 1.0)), "time gap", "a"),
        ((("r", 0, None, 1.0), ("a", 1, "r", 0.0), ("b", 1, "r", 1.0)), "outside (0, 1]", "a"),
        ((("r", 0, None, 1.0), ("a", 1, "r", -0.2), ("b", 1, "r", 1.2)), "outside (0, 1]", "a"),
    ],
)
def test_invalid_trees_name_the_node(rows, fragment, node):
    with pytest.raises(TreeError) as err:
        build_tree(_nodes(*rows))
    assert fragment in str(err.value)
    assert err.value.node_id == node


def test_structural_errors():
    with pytest.raises(TreeError, match="one root"):
        build_tree(_nodes(("r", 0, None, 1.0), ("s", 0, None, 1.0)))
    with pytest.raises(TreeError, match="duplicate"):
        build_tree(_nodes(("r", 0, None, 1.0), ("r", 1, "r", 1.0)))
    with pytest.raises(TreeError, match="before horizon"):
        build_tree(_nodes(("r", 0, None, 1.0), ("a", 1, "r", 0.5), ("b", 1, "r", 0.5), ("c", 2, "a", 1.0)))


def test_condexp_examples(coin):
    assert condexp(coin, np.array([1.0, 0.0]), 0)[0] == 0.5
    tree = binomial_tree(2)
    np.testing.assert_allclose(condexp(tree, up_moves(tree), 1), [0.5, 1.5])
    tree = random_tree(np.random.default_rng(1), 3)
    np.testing.assert_allclose(condexp(tree, np.full(tree.size(3), 2.5), 1), 2.5, rtol=0, atol=1e-15)


def test_condexp_rejects_future_time(coin):
    with pytest.raises(ValueError):
        condexp(coin, np.array([1.0, 0.0]), 1, 0)


def test_condexp_interior_slice():
    tree = binomial_tree(3, 0.25)
    x1 = np.array([4.0, 8.0])
    assert condexp(tree, x1, 0, 1)[0] == pytest.approx(0.75 * 4 + 0.25 * 8)


def test_is_martingale_examples(coin):
    const = AdaptedProcess(coin, 0, [np.array([3.0]), np.array([3.0, 3.0])])
    assert is_martingale(coin, const) == (True, 0.0)
    bad = AdaptedProcess(coin, 0, [np.array([0.9]), np.array([2.0, 0.0])])
    ok, res = is_martingale(coin, bad)
    assert not ok
    assert res == pytest.approx(0.1)
    tree = random_tree(np.random.default_rng(4), 4)
    z = np.random.default_rng(5).normal(size=tree.size(4))
    ok, res = is_martingale(tree, conditional_process(tree, z), tol=1e-14)
    assert ok and res <= 1e-14


def test_martingale_differences_examples(coin):
    d = martingale_differences(coin, np.array([1.0, 0.0]))
    np.testing.assert_array_equal(d.at(1), [0.5, -0.5])
    d = martingale_differences(coin, np.array([2.0, 2.0]))
    np.testing.assert_array_equal(d.at(1), [0.0, 0.0])
    tree = binomial_tree(2)
    z = 2 * up_moves(tree) - 2  # sum of two +-1 steps
    d = martingale_differences(tree, z)
    for t in (1, 2):
        np.testing.assert_allclose(np.abs(d.at(t)), 1.0)


def test_differences_telescope():
    tree = random_tree(np.random.default_rng(7), 4)
    z = np.random.default_rng(8).normal(size=tree.size(4))
    d = martingale_differences(tree, z)
    np.testing.assert_allclose(d.path_sum() + tree.expectation(z), z, atol=1e-13)


def test_json_round_trip(tmp_path):
    tree = random_tree(np.random.default_rng(2), 3)
    z = np.arange(tree.size(3), dtype=float)
    path = tmp_path / "tree.json"
    dump_tree(path, tree, {"Z": z})
    again, rvs = load_tree(path)
    assert again.ids == tree.ids
    np.testing.assert_array_equal(again.prob, tree.prob)
    np.testing.assert_array_equal(rvs["Z"], z)
    assert json.loads(path.read_text())["horizon"] == 3


def test_rv_requires_every_leaf(coin):
    with pytest.raises((KeyError, ValueError)):
        coin.rv({"a": 1.0})


def test_adapted_process_shape_checked(coin):
    with pytest.raises(ValueError):
        AdaptedProcess(coin, 0, [np.zeros(1)])
    with pytest.raises(ValueError):
        AdaptedProcess(coin, 0, [np.zeros(1), np.zeros(3)])


def test_single_child_chain():
    tree = build_tree([Node("k", 0, None, 1.0), Node("k.", 1, "k", 1.0), Node("k..", 2, "k.", 1.0)], 2)
    assert tree.leaves == ("k..",)
    assert condexp(tree, np.array([7.0]), 0)[0] == 7.0
