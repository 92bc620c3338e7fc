import json

import numpy as np
import pytest
import torch

from kpforge.dataset import KeypointSchema
from kpforge.model import (CheckpointError, MissingPretrainedWeightsError, ModelConfig,
                           ModelConfigError, UpsampleBlock, build_model, count_trainable, forward,
                           load_checkpoint, load_resnet50, nearest_upsample, parameter_checksum,
                           preprocess, save_checkpoint, upsample_block)
from kpforge.training import multiscale_loss


def make(variant="ihm56", channels=2, size=224, **kw):
    torch.manual_seed(0)
    return build_model(ModelConfig.for_variant(variant, channels, size, **kw), None, True)


@pytest.mark.parametrize("variant,sizes", [
    ("ihm224", [14, 28, 56, 112, 224]),
    ("ihm56", [14, 28, 56]),
    ("hm", [224]),
])
def test_output_shapes_per_variant(variant, sizes):
    model = make(variant, channels=3)
    outs = forward(model, torch.zeros(1, 3, 224, 224))
    assert [tuple(o.shape) for o in outs] == [(1, 3, s, s) for s in sizes]


@pytest.mark.parametrize("levels", [1, 2, 3, 4, 5])
def test_levels_and_filters(levels):
    cfg = ModelConfig(num_upsample_levels=levels, num_channels=1)
    assert cfg.level_sizes == [14 * 2 ** k for k in range(levels)]
    assert cfg.filters == [256 // 2 ** k for k in range(levels)]
    model = build_model(cfg, None, True)
    outs = forward(model, torch.zeros(1, 3, 224, 224))
    assert [o.shape[-1] for o in outs] == cfg.level_sizes


def test_filter_schedule_five_levels():
    assert ModelConfig().filters == [256, 128, 64, 32, 16]


@pytest.mark.parametrize("kwargs", [dict(num_upsample_levels=0), dict(num_upsample_levels=6),
                                    dict(input_size=100), dict(base_filters=24),
                                    dict(base_filters=16, num_upsample_levels=5),
                                    dict(num_channels=0), dict(dropout_rate=1.0)])
def test_invalid_configs(kwargs):
    with pytest.raises(ModelConfigError):
        ModelConfig(**kwargs)


def test_unknown_variant():
    with pytest.raises(ModelConfigError):
        ModelConfig.for_variant("unet", 1)


def test_upsample_block_with_skip():
    out = upsample_block(torch.zeros(2, 2048, 7, 7), torch.zeros(2, 1024, 14, 14), 256)
    assert tuple(out.shape) == (2, 256, 14, 14)


def test_upsample_block_without_skip():
    out = upsample_block(torch.zeros(1, 32, 112, 112), None, 16)
    assert tuple(out.shape) == (1, 16, 224, 224)


def test_upsample_block_skip_mismatch():
    block = UpsampleBlock(64, 32, 16, 0.2)
    with pytest.raises(ValueError, match="skip"):
        block(torch.zeros(1, 64, 7, 7), torch.zeros(1, 32, 15, 15))


def test_nearest_upsample_example():
    x = torch.tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
    expected = torch.tensor([[[[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]]], dtype=torch.float32)
    assert torch.equal(nearest_upsample(x), expected)


def test_eval_forward_deterministic_and_bounded():
    model = make("ihm56", size=128)
    x = torch.randn(2, 3, 128, 128)
    a, b = forward(model, x), forward(model, x)
    assert all(torch.equal(p, q) for p, q in zip(a, b))
    zeros = forward(model, torch.zeros(1, 3, 128, 128))
    for o in zeros:
        assert torch.isfinite(o).all() and (o > 0).all() and (o < 1).all()


def test_wrong_input_size_rejected():
    model = make("hm", size=128)
    with pytest.raises(ValueError):
        model(torch.zeros(1, 3, 96, 96))


def test_frozen_backbone_unchanged_but_heads_learn():
    model = make("ihm56", size=64)
    backbone_before = parameter_checksum(model.backbone)
    head_before = model.heads[-1].weight.detach().clone()
    opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=1e-3)
    x = torch.randn(4, 3, 64, 64)
    targets = [torch.rand(4, 2, s, s) for s in model.config.head_sizes]
    for _ in range(3):
        model.train()
        opt.zero_grad()
        multiscale_loss(model(x), targets).backward()
        opt.step()
    assert parameter_checksum(model.backbone) == backbone_before
    assert not torch.equal(model.heads[-1].weight, head_before)
    assert not model.backbone.training  # frozen trunk stays in inference mode


def test_single_head_has_fewer_trainable_params():
    ihm = ModelConfig.for_variant("ihm224", 2)
    hm = ModelConfig.for_variant("hm", 2)
    n_ihm = count_trainable(build_model(ihm, None, True))
    n_hm = count_trainable(build_model(hm, None, True))
    # four missing 1x1 heads: (256 + 128 + 64 + 32) * 2 weights + 4 * 2 biases
    assert n_ihm - n_hm == 480 * 2 + 8


def test_missing_pretrained_weights(tmp_path, monkeypatch):
    monkeypatch.delenv("KPFORGE_BACKBONE_WEIGHTS", raising=False)
    with pytest.raises(MissingPretrainedWeightsError):
        load_resnet50(None)
    with pytest.raises(MissingPretrainedWeightsError):
        load_resnet50(tmp_path / "nope.pt")
    monkeypatch.setenv("KPFORGE_BACKBONE_WEIGHTS", str(tmp_path / "nope.pt"))
    with pytest.raises(MissingPretrainedWeightsError):
        load_resnet50("imagenet")


def test_backbone_weights_from_file(tmp_path):
    torch.manual_seed(3)
    source = load_resnet50(None, allow_random_backbone=True)
    torch.save(source.state_dict(), tmp_path / "r50.pt")
    loaded = load_resnet50(tmp_path / "r50.pt")
    assert parameter_checksum(loaded) == parameter_checksum(source)


def test_preprocess_layout():
    img = np.zeros((50, 80, 3), np.uint8)
    img[..., 2] = 255  # red in BGR
    x = preprocess(img, 64)
    assert tuple(x.shape) == (1, 3, 64, 64) and x.dtype == torch.float32
    assert torch.allclose(x[0, 0], torch.full((64, 64), (1 - 0.485) / 0.229))


def test_checkpoint_round_trip(tmp_path):
    schema = KeypointSchema("pliers", ("a", "b"))
    model = make("ihm56", channels=2, size=64)
    x = torch.randn(1, 3, 64, 64)
    expected = forward(model, x)
    save_checkpoint(model, schema, tmp_path)
    loaded, loaded_schema = load_checkpoint(tmp_path)
    assert loaded_schema == schema and loaded.config == model.config
    for a, b in zip(expected, forward(loaded, x)):
        assert torch.max(torch.abs(a - b)) < 1e-6


def test_checkpoint_mismatch(tmp_path):
    model = make("ihm56", channels=2, size=64)
    save_checkpoint(model, KeypointSchema("pliers", ("a", "b")), tmp_path)
    cfg = json.loads((tmp_path / "config.json").read_text())
    cfg["num_upsample_levels"] = 4
    (tmp_path / "config.json").write_text(json.dumps(cfg))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)
    (tmp_path / "weights.pt").unlink()
    with pytest.raises(CheckpointError, match="weights.pt"):
        load_checkpoint(tmp_path)


def test_checkpoint_schema_channel_mismatch(tmp_path):
    model = make("hm", channels=2, size=64)
    save_checkpoint(model, KeypointSchema("pliers", ("a", "b", "c")), tmp_path)
    with pytest.raises(CheckpointError, match="channels"):
        load_checkpoint(tmp_path)
