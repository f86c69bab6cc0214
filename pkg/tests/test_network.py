import numpy as np
import pytest

from actdet.assign import AssignmentConfig, assign_targets
from actdet.data import Segment
from actdet.errors import FormatError, ShapeError
from actdet.losses import total_loss
from actdet.network import (
    ModelConfig,
    ModelParams,
    Network,
    avgpool2_backward,
    avgpool2_forward,
    load_checkpoint,
    pyramid_geometry,
    save_checkpoint,
)

TINY = dict(input_dim=4, backbone_width=8, head_width=8, n_pyramid_levels=3)


def tiny_net(**kw):
    return Network(ModelConfig(**{**TINY, **kw}))


def test_geometry_reference_case():
    lengths, valids, strides = pyramid_geometry(100, 7)
    assert lengths == [128, 64, 32, 16, 8, 4, 2]
    assert valids == [100, 50, 25, 13, 7, 4, 2]
    assert strides == [1, 2, 4, 8, 16, 32, 64]


def test_geometry_recursion_all_sizes():
    for n_levels in range(1, 9):
        for t in range(1, 513):
            lengths, valids, _ = pyramid_geometry(t, n_levels)
            assert lengths[0] % 2 ** (n_levels - 1) == 0
            assert lengths[0] - t < 2 ** (n_levels - 1)
            for l in range(1, n_levels):
                assert lengths[l] * 2 == lengths[l - 1]
                assert valids[l] == -(-valids[l - 1] // 2)


def test_constant_input_fuses_to_double_max():
    # constant input: max equals avg wherever the pooled window is constant,
    # i.e. away from the conv boundary halo (2 cells per side per level)
    net = tiny_net()
    params = net.init_params(0)
    t = 64
    feats = np.full((t, 4), 0.7)
    state, _, _ = net.forward(params, feats)
    for l, (zm, za, z) in enumerate(zip(state.max_branch, state.avg_branch,
                                        state.fused)):
        lo, hi = 2, state.valid_lengths[l] - 2
        if hi <= lo:
            continue
        assert np.allclose(zm[:, lo:hi], za[:, lo:hi])
        assert np.allclose(z[:, lo:hi], 2.0 * zm[:, lo:hi])


def test_max_branch_dominates_avg():
    net = tiny_net()
    params = net.init_params(3)
    feats = np.random.default_rng(5).standard_normal((100, 4))
    state, _, _ = net.forward(params, feats)
    for l in range(1, len(state.max_branch)):
        zm = state.max_branch[l]
        za = state.avg_branch[l]
        valid = state.valid_lengths[l]
        assert np.all(zm[:, :valid] >= za[:, :valid] - 1e-12)


def test_padding_invariance_bit_exact():
    net = tiny_net()
    params = net.init_params(1)
    rng = np.random.default_rng(2)
    for t in (1, 3, 4, 5, 17, 100):
        feats = rng.standard_normal((t, 4))
        _, out_a, _ = net.forward(params, feats)
        m = 2 ** (net.config.n_pyramid_levels - 1)
        padded = -(-t // m) * m
        _, out_b, _ = net.forward(params, feats, pad_to=padded + 2 * m)
        for a, b in zip(out_a.logits + out_a.offsets, out_b.logits + out_b.offsets):
            assert np.array_equal(a, b)


def test_shape_mismatch_rejected():
    net = tiny_net()
    params = net.init_params(0)
    with pytest.raises(ShapeError):
        net.forward(params, np.zeros((10, 5)))


def test_init_determinism_and_values():
    net = tiny_net()
    a = net.init_params(42)
    b = net.init_params(42)
    for k in a.tensors:
        assert np.array_equal(a.tensors[k], b.tensors[k])
    assert np.allclose(a.tensors["head.cls.proj.b"], -np.log(99.0))
    assert 1.0 / (1.0 + 99.0) == pytest.approx(0.01)
    assert np.all(a.tensors["backbone.0.ln.g"] == 1.0)
    assert np.all(a.tensors["backbone.0.ln.b"] == 0.0)


def test_zero_upstream_gives_zero_grads():
    net = tiny_net()
    params = net.init_params(0)
    _, out, cache = net.forward(params, np.random.default_rng(0).standard_normal((16, 4)))
    params.zero_grads()
    net.backward(params, cache,
                 [np.zeros_like(z) for z in out.logits],
                 [np.zeros_like(o) for o in out.offsets])
    for g in params.grads.values():
        assert np.all(g == 0.0)


def test_avgpool_grad_split_by_valid_count():
    x = np.array([[1.0, 2.0, 3.0, 4.0]])
    mask = np.array([True, True, True, False])  # second cell has one valid child
    out, cache = avgpool2_forward(x, mask)
    assert np.allclose(out, [[1.5, 3.0]])
    gx = avgpool2_backward(cache, np.array([[1.0, 1.0]]))
    assert np.allclose(gx, [[0.5, 0.5, 1.0, 0.0]])


def _loss_on(net, params, feats, targets, sigma):
    _, out, cache = net.forward(params, feats)
    loss, _, dlg, doff = total_loss(out, targets, sigma_iou=sigma)
    return loss, dlg, doff, cache


def finite_diff_check(net, params, feats, targets, rel_tol, per_tensor_samples=None,
                      h=1e-5):
    """Relative error of analytic vs central-difference gradients.

    Checks every parameter when per_tensor_samples is None, else a seeded
    sample per tensor. Returns the worst relative error observed.
    """
    _, out, cache = net.forward(params, feats)
    loss0, comp, dlg, doff = total_loss(out, targets)
    sigma = comp["sigma_iou"]  # freeze the IoU weights: no gradient flows through them
    _, dlg, doff, cache = _loss_on(net, params, feats, targets, sigma)
    params.zero_grads()
    net.backward(params, cache, dlg, doff)
    rng = np.random.default_rng(99)
    worst = 0.0
    for name, tensor in params.tensors.items():
        flat = tensor.ravel()
        grad = params.grads[name].ravel()
        if per_tensor_samples is None:
            idxs = range(flat.size)
        else:
            idxs = rng.choice(flat.size, size=min(per_tensor_samples, flat.size),
                              replace=False)
        for i in idxs:
            old = flat[i]
            flat[i] = old + h
            lp = _loss_on(net, params, feats, targets, sigma)[0]
            flat[i] = old - h
            lm = _loss_on(net, params, feats, targets, sigma)[0]
            flat[i] = old
            fd = (lp - lm) / (2 * h)
            rel = abs(grad[i] - fd) / (abs(grad[i]) + 1e-8)
            worst = max(worst, rel)
            assert rel < rel_tol, f"{name}[{i}]: analytic {grad[i]}, fd {fd}"
    return worst


def grad_check_problem(seed=27):
    rng = np.random.default_rng(seed)
    net = tiny_net()
    params = net.init_params(seed)
    for v in params.tensors.values():
        v += 0.05 * rng.standard_normal(v.shape)
    feats = rng.standard_normal((16, 4))
    _, valids, strides = pyramid_geometry(16, 3)
    segments = [Segment("time_out", 2.0, 9.0), Segment("stop", 10.0, 14.0)]
    targets = assign_targets(segments, valids, strides, 1.0,
                             AssignmentConfig(n_levels=3))
    return net, params, feats, targets


def test_gradients_match_finite_differences_sampled():
    net, params, feats, targets = grad_check_problem()
    finite_diff_check(net, params, feats, targets, rel_tol=1e-4,
                      per_tensor_samples=8)


def test_zero_analytic_gradient_means_dead_path():
    # exact-zero analytic gradients must come from relu-dead paths, where the
    # finite difference is exactly zero too (checked inside finite_diff_check)
    net, params, feats, targets = grad_check_problem()
    _, out, cache = net.forward(params, feats)
    from actdet.losses import total_loss
    _, _, dlg, doff = total_loss(out, targets)
    params.zero_grads()
    net.backward(params, cache, dlg, doff)
    n_zero = sum(int((g == 0).sum()) for g in params.grads.values())
    n_all = sum(g.size for g in params.grads.values())
    assert n_zero < n_all  # not everything is dead


@pytest.mark.parametrize("mode", ["max_only", "avg_only"])
def test_gradients_other_pyramid_modes(mode):
    _, params, feats, targets = grad_check_problem(78)
    net = tiny_net(pyramid_mode=mode)
    finite_diff_check(net, params, feats, targets, rel_tol=1e-4,
                      per_tensor_samples=4)


def test_translation_equivariance_interior():
    net = tiny_net()
    params = net.init_params(8)
    n_levels = net.config.n_pyramid_levels
    shift = 2 ** (n_levels - 1)
    rng = np.random.default_rng(3)
    t = 64
    feats = rng.standard_normal((t, 4))
    shifted = np.concatenate([np.zeros((shift, 4)), feats], axis=0)
    _, out_a, _ = net.forward(params, feats)
    _, out_b, _ = net.forward(params, shifted)
    for l in range(n_levels):
        d = shift // (2**l)  # shift in level-l cells
        margin = 5
        a = out_a.logits[l][:, margin:out_a.logits[l].shape[1] - margin]
        b = out_b.logits[l][:, margin + d:margin + d + a.shape[1]]
        if a.shape[1] > 0:
            assert np.array_equal(a, b)


def test_checkpoint_round_trip(tmp_path):
    net = tiny_net()
    params = net.init_params(10)
    meta = {"model": net.config.to_dict(), "feature_mode": "full"}
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    save_checkpoint(params, meta, p1)
    loaded, meta2 = load_checkpoint(p1)
    assert meta2 == meta
    save_checkpoint(loaded, meta2, p2)
    assert p1.read_bytes() == p2.read_bytes()
    for k in params.tensors:
        assert np.array_equal(loaded.tensors[k],
                              params.tensors[k].astype(np.float32).astype(np.float64))


def test_checkpoint_corruption_detected(tmp_path):
    net = tiny_net()
    params = net.init_params(0)
    path = tmp_path / "c.ckpt"
    save_checkpoint(params, {"model": net.config.to_dict()}, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-3])
    with pytest.raises(FormatError):
        load_checkpoint(path)
    path.write_bytes(b"JUNK" + blob[4:])
    with pytest.raises(FormatError):
        load_checkpoint(path)
