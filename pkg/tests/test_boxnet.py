import numpy as np
import pytest
import torch

from boxguide.boxnet import BoxNet, BoxNetCheckpoint, BoxNetConfig, ConfigMismatchError
from boxguide.prompt_parser import parse_entities
from boxguide.toy_diffusion.text import TextEncoder, build_vocab

CFG = BoxNetConfig(feature_channels=(4, 6, 6, 4), feature_hw=(16, 16), text_dim=16, d_model=32, nhead=4,
                   enc_layers=1, dec_layers=1, dim_ff=64, M=8)


def make():
    torch.manual_seed(0)
    net = BoxNet(CFG)
    net.eval()
    enc = TextEncoder(build_vocab(), dim=16)
    return net, enc


def activations(B=1, value=None):
    shapes = [(4, 16, 16), (6, 8, 8), (6, 8, 8), (4, 16, 16)]
    if value is not None:
        return [torch.full((B, *s), value) for s in shapes]
    g = torch.Generator().manual_seed(1)
    return [torch.randn((B, *s), generator=g) for s in shapes]


def test_feature_shape():
    net, _ = make()
    f = net.extract_features(activations(2), 10)
    assert f.data.shape == (2, CFG.d_model, 16, 16)
    assert f.source_resolutions == [(16, 16), (8, 8), (8, 8), (16, 16)]


def test_constant_activations_give_constant_features():
    net, _ = make()
    with torch.no_grad():
        f = net.extract_features(activations(1, 0.7)).data
    assert torch.allclose(f, f[..., :1, :1].expand_as(f), atol=1e-6)
    # direct computation: 1x1 conv of a constant vector
    w = net.feature_proj.weight[:, :, 0, 0]
    expected = w.sum(1) * 0.7 + net.feature_proj.bias
    assert torch.allclose(f[0, :, 0, 0], expected, atol=1e-5)


def test_single_activation_at_target_is_not_resampled():
    cfg = BoxNetConfig(feature_channels=(4,), feature_hw=(8, 8), text_dim=16, d_model=16, nhead=2,
                       enc_layers=1, dec_layers=1, dim_ff=32, M=4)
    net = BoxNet(cfg)
    a = torch.randn(1, 4, 8, 8)
    with torch.no_grad():
        assert torch.equal(net.extract_features([a]).data, net.feature_proj(a))


def test_feature_errors():
    net, _ = make()
    with pytest.raises(ValueError):
        net.extract_features([])
    bad = activations()
    bad[0] = bad[0].clone()
    bad[0][0, 0, 0, 0] = float("nan")
    with pytest.raises(ValueError):
        net.extract_features(bad)
    with pytest.raises(ConfigMismatchError):
        net.extract_features(activations()[:3])


def test_query_padding():
    net, enc = make()
    spans = parse_entities("a red square and a blue circle").spans
    q = net.encode_entities(spans, enc)
    assert q.embeddings.shape == (8, 16) and q.n_entities == 2
    for k in range(2, 8):
        assert torch.equal(q.embeddings[k], net.placeholder)
    assert torch.allclose(q.embeddings[0], enc.encode_phrase("a red square"))
    empty = net.encode_entities([], enc)
    assert all(torch.equal(r, net.placeholder) for r in empty.embeddings)
    twice = parse_entities("a red square and a red square").spans
    q2 = net.encode_entities(twice, enc)
    assert torch.equal(q2.embeddings[0], q2.embeddings[1])


def test_full_capacity_padding():
    cfg = BoxNetConfig.full(feature_channels=(4,), feature_hw=(4, 4), text_dim=16, d_model=32, nhead=4,
                            enc_layers=1, dec_layers=1, dim_ff=32)
    assert cfg.M == 30
    net = BoxNet(cfg)
    _, enc = make()
    q = net.encode_entities(parse_entities("a cat and a dog").spans, enc)
    assert q.embeddings.shape[0] == 30
    assert all(torch.equal(r, net.placeholder) for r in q.embeddings[2:])


def test_too_many_entities():
    net, enc = make()
    spans = parse_entities(" and ".join(["a cat"] * 9)).spans
    with pytest.raises(ValueError):
        net.encode_entities(spans, enc)


@pytest.mark.parametrize("prompt,n", [("a cat", 1), ("a red square , a blue circle and a green triangle", 3)])
def test_predict_boxes_range(prompt, n):
    net, enc = make()
    q = net.encode_entities(parse_entities(prompt).spans, enc)
    boxes = net.predict_boxes(net.extract_features(activations()), q)
    assert len(boxes) == n
    for b in boxes:
        assert all(0 < v < 1 for v in b.as_tuple())


def test_batched_prediction_matches_single():
    net, enc = make()
    acts = activations(2)
    qa = net.encode_entities(parse_entities("a cat").spans, enc)
    qb = net.encode_entities(parse_entities("a dog and a cat").spans, enc)
    both = net.predict_boxes(net.extract_features(acts), [qa, qb])
    single = net.predict_boxes(net.extract_features([a[1:] for a in acts]), qb)
    assert len(both[0]) == 1 and len(both[1]) == 2
    for x, y in zip(both[1], single):
        assert np.allclose(x.as_array(), y.as_array(), atol=1e-5)


def test_forward_checks_shapes():
    net, _ = make()
    with pytest.raises(ConfigMismatchError):
        net(torch.zeros(1, CFG.d_model, 8, 8), torch.zeros(1, 8, 16))
    with pytest.raises(ConfigMismatchError):
        net(torch.zeros(1, CFG.d_model, 16, 16), torch.zeros(1, 7, 16))


def test_checkpoint_roundtrip(tmp_path):
    net, enc = make()
    ckpt = BoxNetCheckpoint.from_model(net, {"steps": 3})
    path = tmp_path / "b.ckpt"
    ckpt.save(path, extra={"note": 1})
    assert path.read_bytes().startswith(b"BOXGUIDE-CKPT-v1\n")
    loaded, extra = BoxNetCheckpoint.load(path, with_extra=True)
    assert loaded.config == CFG and loaded.training_meta == {"steps": 3} and extra == {"note": 1}
    rebuilt = loaded.build()
    f = net.extract_features(activations())
    q = net.encode_entities(parse_entities("a cat").spans, enc)
    assert net.predict_boxes(f, q) == rebuilt.predict_boxes(rebuilt.extract_features(activations()),
                                                            rebuilt.encode_entities(parse_entities("a cat").spans, enc))


def test_checkpoint_bad_magic_and_capacity(tmp_path):
    with pytest.raises(ValueError):
        BoxNetCheckpoint.from_bytes(b"NOPE\n1\n{}")
    net, _ = make()
    ckpt = BoxNetCheckpoint.from_model(net)
    ckpt.config = BoxNetConfig(**{**CFG.to_dict(), "feature_channels": CFG.feature_channels,
                                  "feature_hw": CFG.feature_hw, "M": 9})
    with pytest.raises(ConfigMismatchError):
        BoxNetCheckpoint.from_bytes(ckpt.to_bytes())


def test_config_dict_roundtrip():
    assert BoxNetConfig.from_dict(CFG.to_dict()) == CFG
