import numpy as np
import pytest
import torch
from torch import nn

from casskit.backbones import (
    BackboneSpec, DualBackbone, HeadAdapter, build_backbone, default_spec, load_pretrained,
    pair_backbones, register_backbone,
)
from casskit.errors import PairingError, RegistryError, SpecError


def conv_spec(width=32, **kw):
    return default_spec("conv", width, **kw)


def vit_spec(width=32, **kw):
    return default_spec("attention", width, **kw)


# -- independent forward pass for tiny-conv4 (numpy, float64) -----------------


def np_conv3x3_s2(x, w):
    # x (C, H, W), w (O, C, 3, 3); padding 1, stride 2, no bias
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    H = (x.shape[1] + 2 - 3) // 2 + 1
    W = (x.shape[2] + 2 - 3) // 2 + 1
    out = np.zeros((w.shape[0], H, W))
    for kh in range(3):
        for kw in range(3):
            patch = xp[:, kh:kh + 2 * H:2, kw:kw + 2 * W:2]
            out += np.einsum("oc,chw->ohw", w[:, :, kh, kw], patch)
    return out


def np_tiny_conv_forward(state, x, n_blocks=4, eps=1e-5):
    p = {k: v.detach().double().numpy() for k, v in state.items()}
    h = x.astype(np.float64)
    for i in range(n_blocks):
        h = np_conv3x3_s2(h, p[f"blocks.{i}.conv.weight"])
        mean, var = p[f"blocks.{i}.bn.running_mean"], p[f"blocks.{i}.bn.running_var"]
        g, b = p[f"blocks.{i}.bn.weight"], p[f"blocks.{i}.bn.bias"]
        h = (h - mean[:, None, None]) / np.sqrt(var[:, None, None] + eps) * g[:, None, None] + b[:, None, None]
        h = np.maximum(h, 0)
    feat = h.mean(axis=(1, 2))
    return p["head.weight"] @ feat + p["head.bias"]


@pytest.mark.parametrize("image", ["zero", "random"])
def test_tiny_conv4_matches_independent_forward(image):
    net = build_backbone(conv_spec(), seed=3).eval()
    # move batchnorm stats off their defaults so the oracle exercises them
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, nn.BatchNorm2d):
                m.running_mean.normal_(0, 0.1, generator=g)
                m.running_var.uniform_(0.5, 1.5, generator=g)
                m.weight.uniform_(0.5, 1.5, generator=g)
                m.bias.normal_(0, 0.1, generator=g)
    x = np.zeros((3, 64, 64)) if image == "zero" else np.random.default_rng(1).normal(size=(3, 64, 64))
    with torch.no_grad():
        got = net(torch.tensor(x, dtype=torch.float32)[None])[0].double().numpy()
    want = np_tiny_conv_forward(net.state_dict(), x)
    np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-5)


def test_vit_forward_shape():
    net = build_backbone(vit_spec(), seed=0)
    assert net(torch.randn(4, 3, 64, 64)).shape == (4, 32)


@pytest.mark.parametrize("spec", [conv_spec(), vit_spec(), conv_spec(8, variant="tiny-conv2"),
                                  vit_spec(5, input_size=32, patch_size=8, variant="tiny-vit1")])
@pytest.mark.parametrize("batch", [1, 2, 16])
def test_shape_contract(spec, batch):
    net = build_backbone(spec, 0).eval()
    x = torch.randn(batch, 3, spec.input_size, spec.input_size)
    assert net(x).shape == (batch, spec.logit_width)


@pytest.mark.parametrize("spec", [conv_spec(), vit_spec()])
def test_build_is_deterministic_per_seed(spec):
    a, b, c = build_backbone(spec, 7), build_backbone(spec, 7), build_backbone(spec, 8)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert not all(torch.equal(sa[k], sc[k]) for k in sa)
    x = torch.randn(2, 3, 64, 64)
    a.eval(), b.eval()
    assert torch.equal(a(x), b(x))


def test_build_does_not_disturb_global_rng():
    torch.manual_seed(0)
    expected = torch.rand(3)
    torch.manual_seed(0)
    build_backbone(vit_spec(), 5)
    assert torch.equal(torch.rand(3), expected)


def test_spec_errors():
    with pytest.raises(RegistryError):
        build_backbone(BackboneSpec("conv", "resnet-9000"))
    with pytest.raises(SpecError):
        build_backbone(BackboneSpec("attention", "tiny-vit2", 64, 12, 32))
    with pytest.raises(SpecError):
        BackboneSpec("conv", "tiny-conv4", logit_width=1).validate()
    with pytest.raises(SpecError):
        BackboneSpec("attention", "tiny-conv4", 64, 16).validate()
    with pytest.raises(SpecError):
        BackboneSpec("conv", "tiny-conv4", init_mode="pretrained").validate()


@pytest.mark.parametrize("fa,fb", [("conv", "attention"), ("conv", "conv"), ("attention", "attention"),
                                   ("attention", "conv")])
def test_pairs_are_disjoint_for_every_family_combination(fa, fb):
    pair = pair_backbones(default_spec(fa), default_spec(fb), seed=0)
    ids_a = {id(p) for p in pair.branch_a.parameters()}
    ids_b = {id(p) for p in pair.branch_b.parameters()}
    assert ids_a and ids_b and not ids_a & ids_b


def test_same_variant_pair_starts_from_different_weights():
    pair = pair_backbones(conv_spec(), conv_spec(), seed=0)
    w_a = pair.branch_a.head.weight
    w_b = pair.branch_b.head.weight
    assert not torch.equal(w_a, w_b)


def test_width_mismatch_is_a_pairing_error():
    with pytest.raises(PairingError):
        pair_backbones(conv_spec(32), vit_spec(64))
    with pytest.raises(PairingError):
        pair_backbones(conv_spec(32, input_size=32), vit_spec(32))


def test_spec_dict_round_trip_and_digest():
    s = vit_spec()
    assert BackboneSpec.from_dict(s.to_dict()) == s
    assert s.digest() == vit_spec().digest()
    assert s.digest() != vit_spec(16).digest()


def test_pretrained_init_from_npz(tmp_path):
    src = build_backbone(conv_spec(10), 11)
    path = tmp_path / "weights.npz"
    np.savez(path, **{k: v.numpy() for k, v in src.state_dict().items()})
    spec = conv_spec(32, init_mode="pretrained", pretrained_path=str(path))
    net = build_backbone(spec, 0)
    for k, v in src.state_dict().items():
        if not k.startswith("head."):
            assert torch.equal(net.state_dict()[k], v)
    # the 10-wide head does not fit a 32-wide spec, so a fresh head stays
    assert net.head.out_features == 32


def test_pretrained_from_torch_state_dict(tmp_path):
    src = build_backbone(vit_spec(), 4)
    path = tmp_path / "weights.pt"
    torch.save(src.state_dict(), path)
    net = build_backbone(vit_spec(init_mode="pretrained", pretrained_path=str(path)), 0)
    assert all(torch.equal(net.state_dict()[k], v) for k, v in src.state_dict().items())


def test_pretrained_missing_file_or_params():
    with pytest.raises(SpecError):
        build_backbone(conv_spec(init_mode="pretrained", pretrained_path="/nonexistent/w.npz"))
    net = build_backbone(conv_spec(), 0)
    with pytest.raises(SpecError):
        load_pretrained(net, {"head.weight": np.zeros((32, 64), np.float32)})


def test_external_backbone_via_adapter():
    def factory(spec):
        body = nn.Sequential(nn.Conv2d(3, 8, 3, padding=1), nn.ReLU(), nn.AdaptiveAvgPool2d(1))
        return HeadAdapter(body, 8, spec.logit_width, "conv")

    register_backbone("test-external", "conv", factory)
    pair = pair_backbones(BackboneSpec("conv", "test-external", 32, None, 16),
                          vit_spec(16, input_size=32, patch_size=8), seed=1)
    assert isinstance(pair, DualBackbone)
    assert pair.branch_a(torch.randn(2, 3, 32, 32)).shape == (2, 16)
