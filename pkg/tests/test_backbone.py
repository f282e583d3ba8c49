"""Ten-unit TGN backbone: construction, shapes, invariances and gradients."""

import numpy as np
import pytest

from frhead import autodiff as ad
from frhead.backbone import Backbone, BackboneConfig, build_backbone, expected_parameter_count, normalized_adjacency
from frhead.gradcheck import relu_margin
from frhead.skeleton import SkeletonTopology

PUBLISHED_BASELINE_PARAMS = 1.46e6


def tiny(seed=0, **kw):
    cfg = BackboneConfig(num_joints=5, num_classes=3, base_channels=4, precision="float64", **kw)
    return build_backbone(cfg, SkeletonTopology.generic(5), seed=seed)


def count_by_hand(v, k_cls, c, kernel, c_in=3):
    # unit-by-unit table: (in, out, projected)
    plan = [(c_in, c, True), (c, c, False), (c, c, False), (c, c, False),
            (c, 2 * c, True), (2 * c, 2 * c, False), (2 * c, 2 * c, False),
            (2 * c, 4 * c, True), (4 * c, 4 * c, False), (4 * c, 4 * c, False)]
    total = 0
    for cin, cout, proj in plan:
        adjacency = v * v
        spatial = cin * cout + 2 * cout  # 1x1 weight + BN affine
        temporal = cout * cout * kernel + 2 * cout
        residual = (cin * cout + 2 * cout) if proj else 0
        total += adjacency + spatial + temporal + residual
    return total + 4 * c * k_cls + k_cls


def test_delta_adjacency_starts_at_zero():
    model = tiny()
    for unit in model.units:
        np.testing.assert_array_equal(unit.delta_adj.data, 0.0)
        np.testing.assert_allclose(unit.adjacency().data, normalized_adjacency(model.topology))


def test_normalized_adjacency_definition():
    topo = SkeletonTopology(np.array([0, 0, 1]))
    a = np.array([[1, 1, 0], [1, 1, 1], [0, 1, 1]], dtype=float)
    d = np.diag(1 / np.sqrt(a.sum(axis=1)))
    np.testing.assert_allclose(normalized_adjacency(topo), d @ a @ d, rtol=1e-15)


def test_same_seed_same_parameter_bytes():
    a, b = tiny(seed=3), tiny(seed=3)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()
    c = tiny(seed=4)
    assert any(p.data.tobytes() != q.data.tobytes() for p, q in zip(a.parameters(), c.parameters()))


@pytest.mark.parametrize("c,kernel,v,k_cls", [(64, 9, 25, 120), (4, 9, 5, 3), (8, 5, 15, 10), (16, 3, 25, 60)])
def test_parameter_count_matches_hand_table(c, kernel, v, k_cls):
    cfg = BackboneConfig(num_joints=v, num_classes=k_cls, base_channels=c, temporal_kernel=kernel)
    model = Backbone(cfg, SkeletonTopology.generic(v))
    assert model.parameter_count() == count_by_hand(v, k_cls, c, kernel)
    assert expected_parameter_count(cfg) == count_by_hand(v, k_cls, c, kernel)


def test_default_parameter_count_value():
    assert expected_parameter_count(BackboneConfig()) == 2_661_346


@pytest.mark.xfail(strict=True, reason="kernel 9 with residuals on every unit gives 2.66M parameters; see notes")
def test_default_parameter_count_near_published_baseline():
    n = expected_parameter_count(BackboneConfig())
    assert abs(n - PUBLISHED_BASELINE_PARAMS) <= 0.10 * PUBLISHED_BASELINE_PARAMS


@pytest.mark.parametrize(
    "kw",
    [dict(strides=(1,) * 10), dict(channel_multipliers=(1,) * 9), dict(taps=(1, 4, 8, 10)),
     dict(temporal_kernel=4), dict(precision="float16")],
)
def test_invalid_plans_rejected(kw):
    with pytest.raises(ValueError):
        BackboneConfig(**kw).validate()


def test_topology_joint_mismatch():
    with pytest.raises(ValueError):
        Backbone(BackboneConfig(num_joints=6, num_classes=3, base_channels=4), SkeletonTopology.generic(5))


def test_default_stage_shapes_and_embedding():
    model = Backbone(BackboneConfig(), SkeletonTopology.ntu25(), seed=0)
    x = np.random.default_rng(0).normal(size=(1, 3, 64, 25))
    with ad.no_grad():
        logits, stages, emb = model.forward_with_embedding(ad.Tensor(x), training=False)
    assert [s.shape[1:] for s in stages] == [(64, 64, 25), (128, 32, 25), (256, 16, 25), (256, 16, 25)]
    assert logits.shape == (1, 120) and emb.shape == (1, 256)
    assert np.all(np.isfinite(logits.data))


@pytest.mark.parametrize("t", [4, 8, 12, 20])
def test_stage_shapes_follow_stride_plan(t):
    model = tiny()
    _, stages = model.forward(ad.Tensor(np.random.default_rng(t).normal(size=(2, 3, t, 5))), training=True)
    assert [s.shape for s in stages] == [(2, 4, t, 5), (2, 8, t // 2, 5), (2, 16, t // 4, 5), (2, 16, t // 4, 5)]


def test_bad_input_shapes():
    model = tiny()
    for shape in [(2, 3, 6, 5), (2, 2, 8, 5), (2, 3, 8, 4), (3, 8, 5)]:
        with pytest.raises(ValueError):
            model.forward(ad.Tensor(np.zeros(shape)), training=False)


def test_zero_input_gives_fc_bias():
    model = tiny()
    model.fc_b.data[:] = [0.3, -1.2, 2.5]
    for training in (True, False):
        logits, _, emb = model.forward_with_embedding(ad.Tensor(np.zeros((2, 3, 8, 5))), training=training)
        np.testing.assert_array_equal(emb.data, 0.0)
        np.testing.assert_array_equal(logits.data, np.tile(model.fc_b.data, (2, 1)))


def test_eval_forward_is_pure():
    model = tiny(seed=2)
    x = ad.Tensor(np.random.default_rng(5).normal(size=(3, 3, 8, 5)))
    model.forward(x, training=True)  # populate running stats
    a = model.forward(x, training=False)[0].data
    b = model.forward(x, training=False)[0].data
    assert a.tobytes() == b.tobytes()
    np.testing.assert_array_equal(model.pooled_embedding(x).data, model.pooled_embedding(x).data)


def test_joint_permutation_equivariance():
    rng = np.random.default_rng(7)
    model = tiny(seed=1)
    for unit in model.units:
        unit.delta_adj.data[:] = rng.normal(scale=0.1, size=(5, 5))
    x = rng.normal(size=(3, 3, 8, 5))
    ref = model.forward(ad.Tensor(x), training=True)[0].data
    perm = np.array([3, 0, 4, 1, 2])
    for unit in model.units:
        unit.base_adj.data[:] = unit.base_adj.data[np.ix_(perm, perm)]
        unit.delta_adj.data[:] = unit.delta_adj.data[np.ix_(perm, perm)]
    out = model.forward(ad.Tensor(x[..., perm]), training=True)[0].data
    np.testing.assert_allclose(out, ref, atol=1e-9, rtol=0)


def test_cross_entropy_gradient_through_backbone():
    model = tiny(seed=0)
    x = np.random.default_rng(1).normal(size=(2, 3, 8, 5))
    labels = np.array([2, 0])

    def f(_):
        return ad.softmax_cross_entropy(model.forward(ad.Tensor(x), training=True)[0], labels)

    assert relu_margin(lambda: f(None)) > 1e-4  # no kink inside the difference stencil
    err = ad.finite_difference_check(f, model.parameters(), eps=1e-5, max_coords=6)
    assert err < 1e-4


def test_state_dict_round_trip():
    a, b = tiny(seed=0), tiny(seed=1)
    a.forward(ad.Tensor(np.random.default_rng(0).normal(size=(2, 3, 8, 5))), training=True)
    b.load_state_dict(a.state_dict())
    x = ad.Tensor(np.random.default_rng(1).normal(size=(2, 3, 8, 5)))
    assert a.forward(x)[0].data.tobytes() == b.forward(x)[0].data.tobytes()
