import json

import numpy as np
import pytest
import torch
from PIL import Image

from casskit.backbones import build_backbone, default_spec
from casskit.errors import CassValidationError, LayerRangeError, UnsupportedArchitectureError
from casskit.introspect import (
    average_attention_maps, cls_attention, emit_artifact, extract_attention_map, extract_feature_maps,
    map_statistics, minmax_normalize, resize_maps,
)
from oracles import first_block_cls_attention


@pytest.fixture(scope="module")
def vit():
    return build_backbone(default_spec("attention"), 5).eval()


@pytest.fixture(scope="module")
def conv():
    return build_backbone(default_spec("conv"), 5).eval()


def images(n, seed=0, size=64):
    return torch.rand(n, 3, size, size, generator=torch.Generator().manual_seed(seed))


def test_cls_attention_matches_numpy_forward(vit):
    x = images(3, 1)
    grids, row_err = cls_attention(vit, x, block=1)
    assert grids.shape == (3, 4, 4) and row_err <= 1e-5
    for i in range(3):
        want = first_block_cls_attention(vit.state_dict(), x[i].double().numpy(), 16, 4)
        np.testing.assert_allclose(grids[i].numpy(), want, atol=1e-5)


def test_grid_is_resized_to_input_with_mass_preserved(vit):
    amap = extract_attention_map(vit, images(1, 2)[0], block=2, sample_id="x")
    assert amap.map.shape == (64, 64) and amap.raw.shape == (64, 64)
    assert amap.stats["grid"] == [4, 4] and amap.stats["row_sum_max_error"] <= 1e-5
    assert amap.map.min() == 0.0 and amap.map.max() == 1.0
    grids, _ = cls_attention(vit, images(4, 3), 1)
    resized = resize_maps(grids, 64)
    for g, r in zip(grids, resized):
        assert abs(float(r.mean()) / float(g.mean()) - 1) <= 0.02


def test_thirty_sample_average_matches_accumulation(vit):
    x = images(30, 4)
    avg = average_attention_maps(vit, x, block=1, sample_ids=[f"s{i}" for i in range(30)], batch_size=7)
    total = np.zeros((64, 64))
    for i in range(30):
        total += extract_attention_map(vit, x[i], block=1).raw.astype(np.float64)
    np.testing.assert_allclose(avg.raw, total / 30, atol=1e-7)
    np.testing.assert_allclose(avg.map, minmax_normalize(total / 30), atol=1e-5)
    assert avg.stats["n_samples"] == 30 and len(avg.sample_ids) == 30
    with pytest.raises(CassValidationError):
        average_attention_maps(vit, torch.zeros(0, 3, 64, 64))


def test_single_head_selection(vit):
    x = images(2, 5)
    per_head = torch.stack([cls_attention(vit, x, 1, head=h)[0] for h in range(4)])
    torch.testing.assert_close(per_head.mean(0), cls_attention(vit, x, 1)[0], rtol=0, atol=1e-6)


def test_feature_maps_layer_one_and_top_k(conv):
    maps = extract_feature_maps(conv, images(1, 6)[0], layers=(1, 2), top_k=3, sample_id="img")
    assert [m.index for m in maps] == [1, 1, 1, 2, 2, 2]
    assert maps[0].map.shape == (32, 32) and maps[3].map.shape == (16, 16)
    scores = [np.abs(m.map).mean() for m in maps[:3]]
    assert scores == sorted(scores, reverse=True)
    assert maps[0].sidecar()["layer"] == 1 and maps[0].sidecar()["sample_ids"] == ["img"]


def test_layer_and_architecture_errors(conv, vit):
    with pytest.raises(LayerRangeError):
        extract_feature_maps(conv, images(1)[0], layers=(5,))
    with pytest.raises(LayerRangeError):
        extract_feature_maps(conv, images(1)[0], layers=(0,))
    with pytest.raises(LayerRangeError):
        cls_attention(vit, images(1), block=3)
    with pytest.raises(UnsupportedArchitectureError):
        extract_attention_map(conv, images(1)[0])


def test_statistics():
    m = np.array([[0.0, 1.0], [1.0, 2.0]])
    s = map_statistics(m)
    p = np.array([0.25, 0.25, 0.5])
    assert s["entropy"] == pytest.approx(float(-(p * np.log(p)).sum()))
    assert s["max"] == 2.0 and s["argmax"] == [1, 1]
    np.testing.assert_array_equal(minmax_normalize(np.full((3, 3), 4.0)), 0.5)


@pytest.mark.parametrize("mode", ["raw", "heatmap", "overlay"])
def test_png_and_sidecar(tmp_path, vit, mode):
    x = images(1, 7)[0]
    amap = extract_attention_map(vit, x, block=1, sample_id="s7")
    png, side = emit_artifact(amap, tmp_path, f"attn-{mode}", image=x.numpy(), mode=mode)
    with Image.open(png) as im:
        assert im.size == (64, 64)
        assert im.mode == ("L" if mode == "raw" else "RGB")
    meta = json.loads(side.read_text())
    assert meta["block"] == 1 and meta["sample_ids"] == ["s7"] and meta["render_mode"] == mode
    assert {"entropy", "max", "argmax"} <= set(meta["statistics"])


def test_render_errors(tmp_path, vit):
    amap = extract_attention_map(vit, images(1)[0])
    with pytest.raises(CassValidationError):
        emit_artifact(amap, tmp_path, "x", mode="overlay")
    with pytest.raises(CassValidationError):
        emit_artifact(amap, tmp_path, "x", mode="sparkle")
