import numpy as np
import pytest
import torch

from boxguide.attn_control import (
    AttentionMap,
    ControlError,
    ControlPlan,
    apply_cross_mask,
    apply_self_mask,
    build_plan,
    register_hooks,
)
from boxguide.prompt_parser import EntitySpan
from boxguide.toy_diffusion.unet import ToyUNet
from boxguide.unique_mask import UniqueMaskSet


def plan_from_masks(masks, token_sets, renorm=False, transpose_self=False):
    masks = np.asarray(masks, dtype=bool)
    hw = masks.shape[1:]
    ms = UniqueMaskSet(masks, masks, np.ones(hw, int), np.zeros(masks.shape), hw)
    return ControlPlan([tuple(t) for t in token_sets], {hw: ms}, renorm, transpose_self)


def softmax_rows(rng, L, K):
    x = rng.random((L, K))
    return x / x.sum(1, keepdims=True)


def test_cross_identity_and_annihilator():
    rng = np.random.default_rng(0)
    C = AttentionMap(softmax_rows(rng, 4, 5), (2, 2))
    out = apply_cross_mask(C, plan_from_masks(np.ones((1, 2, 2)), [[1, 2]]))
    assert np.array_equal(out.data, C.data)
    out = apply_cross_mask(C, plan_from_masks(np.zeros((1, 2, 2)), [[1, 2]]))
    assert (out.data[:, [1, 2]] == 0).all()
    assert np.array_equal(out.data[:, [0, 3, 4]], C.data[:, [0, 3, 4]])


def test_cross_mask_columns():
    rng = np.random.default_rng(1)
    C = AttentionMap(softmax_rows(rng, 4, 6), (2, 2))
    masks = [[[1, 0], [0, 0]], [[0, 1], [1, 0]]]
    out = apply_cross_mask(C, plan_from_masks(masks, [[1], [3, 4]])).data
    flat = np.array(masks).reshape(2, 4)
    assert np.array_equal(out[:, 1], C.data[:, 1] * flat[0])
    assert np.array_equal(out[:, 3], C.data[:, 3] * flat[1])
    assert np.array_equal(out[:, 4], C.data[:, 4] * flat[1])
    for k in (0, 2, 5):
        assert np.array_equal(out[:, k], C.data[:, k])


def test_cross_token_out_of_range():
    C = AttentionMap(np.full((4, 3), 1 / 3), (2, 2))
    with pytest.raises(ControlError):
        apply_cross_mask(C, plan_from_masks(np.ones((1, 2, 2)), [[3]]))


def test_self_mask_two_by_two():
    rng = np.random.default_rng(2)
    S = AttentionMap(softmax_rows(rng, 4, 4), (2, 2))
    out = apply_self_mask(S, plan_from_masks([[[1, 1], [0, 0]]], [[0]])).data
    expected = S.data.copy()
    expected[2:, :2] = 0
    assert np.array_equal(out, expected)


def test_self_mask_identity_cases():
    rng = np.random.default_rng(3)
    S = AttentionMap(softmax_rows(rng, 4, 4), (2, 2))
    empty = ControlPlan([], {})
    assert np.array_equal(apply_self_mask(S, empty).data, S.data)
    assert np.array_equal(apply_self_mask(S, plan_from_masks(np.ones((1, 2, 2)), [[0]])).data, S.data)


def test_self_mask_requires_square():
    with pytest.raises(ControlError):
        apply_self_mask(AttentionMap(np.ones((4, 3)), (2, 2)), plan_from_masks(np.ones((1, 2, 2)), [[0]]))


def test_attention_map_validates_rows():
    with pytest.raises(ControlError):
        AttentionMap(np.ones((5, 3)), (2, 2))


def test_idempotent_and_exact():
    rng = np.random.default_rng(4)
    masks = rng.random((2, 4, 4)) > 0.5
    masks[1] &= ~masks[0]
    plan = plan_from_masks(masks, [[0, 1], [2]])
    C = AttentionMap(softmax_rows(rng, 16, 5), (4, 4))
    once = apply_cross_mask(C, plan)
    assert np.array_equal(apply_cross_mask(once, plan).data, once.data)
    S = AttentionMap(softmax_rows(rng, 16, 16), (4, 4))
    s_once = apply_self_mask(S, plan)
    assert np.array_equal(apply_self_mask(s_once, plan).data, s_once.data)
    changed = s_once.data != S.data
    assert (s_once.data[changed] == 0).all()


def test_renorm_rows_sum_to_one():
    rng = np.random.default_rng(5)
    masks = np.zeros((1, 2, 2), bool)
    masks[0, 0, 0] = True
    C = AttentionMap(softmax_rows(rng, 4, 3), (2, 2))
    out = apply_cross_mask(C, plan_from_masks(masks, [[1]], renorm=True)).data
    assert np.allclose(out.sum(1), 1.0)


def test_build_plan_resolutions_and_override():
    spans = [EntitySpan("a cat", "cat", None, (0, 5), (0, 1)), EntitySpan("a dog", "dog", None, (10, 15), (3, 4))]
    boxes = [(0.3, 0.5, 0.4, 0.4), (0.7, 0.5, 0.4, 0.4)]
    plan = build_plan(spans, boxes, [(16, 16), (8, 8)])
    assert set(plan.masks_by_resolution) == {(16, 16), (8, 8)}
    assert plan.token_sets == [(0, 1), (3, 4)]
    ones = build_plan(spans, boxes, [(8, 8)], override="ones")
    assert ones.masks((8, 8)).masks.all()
    with pytest.raises(ControlError):
        plan.masks((4, 4))
    with pytest.raises(ControlError):
        build_plan(spans, boxes[:1], [(8, 8)])


def small_unet():
    torch.manual_seed(0)
    net = ToyUNet(latent_channels=4, width=16, context_dim=8, heads=2, latent_hw=8)
    net.eval()
    return net


def test_hooks_scope_and_removal():
    net = small_unet()
    z, t, ctx = torch.randn(1, 4, 8, 8), torch.tensor([10]), torch.randn(1, 5, 8)
    pre, post = {}, {}

    def grab(store):
        def fn(probs, layer):
            store[(layer.name, layer.kind)] = probs.clone()
            return probs
        return fn

    spans = [EntitySpan("x", "x", None, (0, 1), (1,))]
    plan = build_plan(spans, [(0.3, 0.3, 0.4, 0.4)], net.attention_resolutions())
    with torch.no_grad():
        # hooks run in registration order: pre-capture, control, post-capture
        handles = net.add_attention_hook(grab(pre))
        handle = register_hooks(net, plan, scope="cross")
        handles += net.add_attention_hook(grab(post))
        net(z, t, ctx)
        for h in handles:
            h.remove()
        handle.remove()
    assert not handle.active
    assert net.hook_count() == 0
    assert {r.kind for r in handle.records} == {"cross"}
    for key, probs in post.items():
        if key[1] == "self":
            assert torch.equal(probs, pre[key])
        else:
            assert not torch.equal(probs, pre[key])
            assert (probs[..., 1][probs[..., 1] != pre[key][..., 1]] == 0).all()


def test_register_rejects_missing_resolution():
    net = small_unet()
    spans = [EntitySpan("x", "x", None, (0, 1), (1,))]
    plan = build_plan(spans, [(0.3, 0.3, 0.4, 0.4)], [(8, 8)])
    with pytest.raises(ControlError):
        register_hooks(net, plan, scope="both")
    assert net.hook_count() == 0


def test_all_ones_control_is_bit_identical():
    net = small_unet()
    z, t, ctx = torch.randn(2, 4, 8, 8), torch.tensor([7, 7]), torch.randn(2, 5, 8)
    spans = [EntitySpan("x", "x", None, (0, 1), (1, 2))]
    plan = build_plan(spans, [(0.4, 0.4, 0.3, 0.5)], net.attention_resolutions(), override="ones")
    with torch.no_grad():
        ref = net(z, t, ctx)
        with register_hooks(net, [plan, plan], scope="both"):
            out = net(z, t, ctx)
    assert torch.equal(ref, out)


def test_hook_rejects_batch_mismatch():
    net = small_unet()
    spans = [EntitySpan("x", "x", None, (0, 1), (1,))]
    plan = build_plan(spans, [(0.4, 0.4, 0.3, 0.5)], net.attention_resolutions())
    with torch.no_grad(), register_hooks(net, [plan, plan, plan]):
        with pytest.raises(ControlError):
            net(torch.randn(2, 4, 8, 8), torch.tensor([3, 3]), torch.randn(2, 5, 8))
