import math

import numpy as np
import pytest

from gladmole.errors import InvalidInputError, ShapeError
from gladmole.routing import (RouterParams, combine, combine_backward, fuse, fusion_weights,
                              global_route, init_router, local_route, static_fuse)
from gladmole.tensor import central_diff, make_rng


def router(d=4, n=3, seed=0, d_global=None):
    return init_router(make_rng(seed), d, n, d_global=d if d_global is None else d_global)


def test_zero_features_give_uniform_distributions():
    r = router()
    x = np.zeros((5, 4))
    np.testing.assert_allclose(global_route(x, r), 1 / 3)
    np.testing.assert_allclose(local_route(x, r), 1 / 3)
    np.testing.assert_allclose(fusion_weights(x, r), 0.5)


def test_full_size_router_shape():
    r = init_router(make_rng(1), 256, 3, d_global=256)
    x = make_rng(2).standard_normal((7, 256))
    assert global_route(x, r).shape == (7, 3)


def test_global_route_closed_form():
    r = RouterParams(w_local=np.zeros((1, 3)), w_fusion=np.zeros((1, 2)),
                     w_global=np.array([[math.log(6), math.log(3), 0.0]]))
    np.testing.assert_allclose(global_route(np.ones((1, 1)), r), [[0.6, 0.3, 0.1]], atol=1e-15)


def test_local_equals_global_when_weights_and_inputs_match():
    r0 = router(seed=3)
    r = RouterParams(w_local=r0.w_global, w_fusion=r0.w_fusion, w_global=r0.w_global)
    x = make_rng(4).standard_normal((6, 4))
    assert np.array_equal(local_route(x, r), global_route(x, r))


def test_local_route_one_hot_selects_row():
    r = router(seed=5)
    x = np.zeros((1, 4))
    x[0, 2] = 1.0
    row = r.w_local[2]
    expected = np.exp(row) / np.exp(row).sum()
    np.testing.assert_allclose(local_route(x, r)[0], expected, atol=1e-15)


@pytest.mark.parametrize("logits, expected", [
    ([0.0, math.log(3)], [0.25, 0.75]),
    ([50.0, -50.0], [1.0, 0.0]),
])
def test_fusion_weights_closed_form(logits, expected):
    r = RouterParams(w_local=np.zeros((1, 2)), w_fusion=np.array([logits]))
    np.testing.assert_allclose(fusion_weights(np.ones((1, 1)), r), [expected], rtol=0, atol=1e-12)


def test_fuse_examples():
    pg = np.array([[1.0, 0, 0]])
    pl = np.array([[0.0, 1, 0]])
    np.testing.assert_allclose(fuse(pg, pl, np.array([[0.25, 0.75]])), [[0.25, 0.75, 0.0]])
    p = make_rng(6).dirichlet(np.ones(3), size=4)
    alpha = make_rng(7).dirichlet(np.ones(2), size=4)
    np.testing.assert_allclose(fuse(p, p, alpha), p, atol=1e-15)
    assert np.array_equal(fuse(pg, pl, np.array([[1.0, 0.0]])), pg)


def test_static_fuse_rows_sum_to_two():
    assert static_fuse(np.full((1, 2), 0.5), np.full((1, 2), 0.5)).tolist() == [[1.0, 1.0]]
    assert static_fuse(np.array([[1.0, 0, 0]]), np.array([[0.0, 1, 0]])).tolist() == [[1, 1, 0]]
    rng = make_rng(8)
    for _ in range(200):
        a, b = rng.dirichlet(np.ones(5), size=3), rng.dirichlet(np.ones(5), size=3)
        np.testing.assert_allclose(static_fuse(a, b).sum(axis=1), 2.0, atol=1e-9)


def test_shape_errors():
    r = router()
    with pytest.raises(ShapeError):
        global_route(np.zeros((2, 5)), r)
    with pytest.raises(ShapeError):
        fuse(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        fuse(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((3, 2)))
    with pytest.raises(ShapeError):
        static_fuse(np.zeros((2, 3)), np.zeros((1, 3)))
    with pytest.raises(ShapeError):
        RouterParams(w_local=np.zeros((4, 3)), w_fusion=np.zeros((4, 3)))


def test_global_route_needs_global_weights():
    r = init_router(make_rng(0), 4, 3)
    with pytest.raises(InvalidInputError):
        global_route(np.zeros((1, 4)), r)


def test_global_route_ignores_layer_input():
    r = router(seed=9)
    x_s = make_rng(10).standard_normal((5, 4))
    pg = global_route(x_s, r)
    for seed in range(3):
        x_in = make_rng(seed).standard_normal((5, 4))
        p, cache = combine(x_in, pg, r, "dynamic")
        assert cache["p_global"] is pg
        assert np.array_equal(global_route(x_s, r), pg)


@pytest.mark.parametrize("mode", ["dynamic", "static_sum", "local_only"])
def test_combine_backward_matches_finite_differences(mode):
    rng = make_rng(11)
    r = router(d=5, n=3, seed=12)
    x = rng.standard_normal((4, 5))
    pg = rng.dirichlet(np.ones(3), size=4)
    w = rng.standard_normal((4, 3))

    def loss(x_, pg_, wl, wf):
        rr = RouterParams(w_local=wl, w_fusion=wf)
        return float(np.sum(w * combine(x_, pg_, rr, mode)[0]))

    _, cache = combine(x, pg, r, mode)
    d_x, d_pg, grads = combine_backward(cache, r, w)
    np.testing.assert_allclose(d_x, central_diff(lambda t: loss(t, pg, r.w_local, r.w_fusion), x),
                               atol=1e-9)
    np.testing.assert_allclose(grads["w_local"],
                               central_diff(lambda t: loss(x, pg, t, r.w_fusion), r.w_local), atol=1e-9)
    np.testing.assert_allclose(grads["w_fusion"],
                               central_diff(lambda t: loss(x, pg, r.w_local, t), r.w_fusion), atol=1e-9)
    if mode == "local_only":
        assert d_pg is None
    else:
        np.testing.assert_allclose(d_pg, central_diff(lambda t: loss(x, t, r.w_local, r.w_fusion), pg),
                                   atol=1e-9)
