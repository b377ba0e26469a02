"""Model factory tests: configuration, the architecture matrix, forward
shapes, seeded determinism, and the deformable conversion policy."""

import numpy as np
import pytest

from traitreg.autograd import Tensor
from traitreg.data import TRAIT_NAMES
from traitreg.deform import DeformableConv2d
from traitreg.errors import ConfigError, ShapeError
from traitreg.layers import Conv2d
from traitreg.models import (
    ENCODER_PRESETS,
    ModelConfig,
    build_model,
    convert_model_to_deformable,
    enumerate_ablation,
    parameter_count,
)

rng = np.random.default_rng(1234)


def tiny_config(**overrides):
    base = dict(encoder="tiny", head_hidden=8, seed=7)
    base.update(overrides)
    return ModelConfig(**base)


def random_inputs(config, n=2, hw=32):
    rgb = Tensor(rng.normal(size=(n, 3, hw, hw)))
    depth = Tensor(rng.normal(size=(n, 1, hw, hw)))
    kwargs = {}
    if "rgb" in config.inputs:
        kwargs["rgb"] = rgb
    if "depth" in config.inputs:
        kwargs["depth"] = depth
    return kwargs


class TestModelConfig:
    def test_defaults_are_mimo(self):
        cfg = ModelConfig()
        assert cfg.family == "MIMO"
        assert cfg.inputs == ("rgb", "depth")
        assert cfg.outputs == TRAIT_NAMES

    def test_family_matrix(self):
        assert ModelConfig(inputs=("rgb",), outputs=("height",)).family == "SISO"
        assert ModelConfig(inputs=("rgb", "depth"), outputs=("height",)).family == "MISO"
        assert ModelConfig(inputs=("depth",)).family == "SIMO"
        assert ModelConfig().family == "MIMO"

    def test_inputs_and_outputs_are_canonically_ordered(self):
        cfg = ModelConfig(
            inputs=("depth", "rgb"), outputs=("leaf_area", "fresh_weight")
        )
        assert cfg.inputs == ("rgb", "depth")
        assert cfg.outputs == ("fresh_weight", "leaf_area")

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(inputs=()),
            dict(inputs=("thermal",)),
            dict(inputs=("rgb", "rgb")),
            dict(outputs=()),
            dict(outputs=("mass",)),
            dict(outputs=("height", "height")),
            dict(conv_kind="dilated"),
            dict(fusion="late"),
            dict(fusion="early", inputs=("rgb",)),
            dict(encoder="huge"),
            dict(head_hidden=0),
        ],
    )
    def test_invalid_configs_rejected(self, kwargs):
        with pytest.raises(ConfigError):
            ModelConfig(**kwargs)

    def test_width_follows_encoder_preset(self):
        for name, width in ENCODER_PRESETS.items():
            assert ModelConfig(encoder=name).width == width

    def test_dict_round_trip(self):
        cfg = ModelConfig(
            inputs=("depth",),
            outputs=("dry_weight", "height"),
            conv_kind="deformable",
            encoder="tiny",
            head_hidden=32,
            seed=9,
        )
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ConfigError, match="unknown model config keys"):
            ModelConfig.from_dict({"encoder": "tiny", "dropout": 0.5})

    def test_config_hash_separates_configs(self):
        a = ModelConfig(encoder="tiny")
        b = ModelConfig(encoder="small")
        assert a.config_hash() == ModelConfig(encoder="tiny").config_hash()
        assert a.config_hash() != b.config_hash()


class TestForwardShapes:
    @pytest.mark.parametrize(
        "inputs, outputs",
        [
            (("rgb", "depth"), TRAIT_NAMES),
            (("rgb", "depth"), ("fresh_weight",)),
            (("rgb",), TRAIT_NAMES),
            (("depth",), TRAIT_NAMES),
            (("rgb",), ("height",)),
            (("depth",), ("leaf_area",)),
        ],
    )
    def test_output_shape_matches_trait_count(self, inputs, outputs):
        cfg = tiny_config(inputs=inputs, outputs=outputs)
        model = build_model(cfg)
        out = model(**random_inputs(cfg))
        assert out.data.shape == (2, len(outputs))
        assert np.all(np.isfinite(out.data))

    def test_early_fusion_forward(self):
        cfg = tiny_config(fusion="early")
        model = build_model(cfg)
        out = model(**random_inputs(cfg))
        assert out.data.shape == (2, 5)

    def test_missing_configured_input_rejected(self):
        cfg = tiny_config()
        model = build_model(cfg)
        rgb = Tensor(rng.normal(size=(2, 3, 32, 32)))
        with pytest.raises(ConfigError, match="depth"):
            model(rgb=rgb)

    def test_wrong_channel_count_rejected(self):
        cfg = tiny_config(inputs=("rgb",), outputs=("height",))
        model = build_model(cfg)
        with pytest.raises(ShapeError):
            model(rgb=Tensor(rng.normal(size=(2, 1, 32, 32))))

    def test_unused_input_is_ignored(self):
        cfg = tiny_config(inputs=("rgb",), outputs=("height",))
        model = build_model(cfg)
        rgb = Tensor(rng.normal(size=(2, 3, 32, 32)))
        depth = Tensor(rng.normal(size=(2, 1, 32, 32)))
        only = model(rgb=rgb)
        both = model(rgb=rgb, depth=depth)
        np.testing.assert_array_equal(only.data, both.data)


class TestBuildDeterminism:
    def test_same_seed_same_parameters(self):
        a = build_model(tiny_config(seed=5))
        b = build_model(tiny_config(seed=5))
        for (name, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(pa.data, pb.data, err_msg=name)

    def test_different_seed_different_parameters(self):
        a = build_model(tiny_config(seed=5))
        b = build_model(tiny_config(seed=6))
        diffs = [
            np.abs(pa.data - pb.data).max()
            for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters())
            if pa.data.size
        ]
        assert max(diffs) > 0


class TestDeformableConversion:
    def test_every_conv_becomes_deformable(self):
        model = build_model(tiny_config(conv_kind="deformable"))
        plain = [
            name
            for name, mod in model.named_modules()
            if isinstance(mod, Conv2d) and "offset_conv" not in name
        ]
        assert plain == []
        deform = [m for _, m in model.named_modules() if isinstance(m, DeformableConv2d)]
        assert len(deform) > 0

    def test_offset_branches_start_at_zero(self):
        model = build_model(tiny_config(conv_kind="deformable"))
        for name, mod in model.named_modules():
            if isinstance(mod, DeformableConv2d):
                assert np.all(mod.offset_conv.weight.data == 0.0), name
                assert np.all(mod.offset_conv.bias.data == 0.0), name

    def test_offset_group_policy(self):
        # Input-consuming layers ask for 3 groups, everything downstream
        # for 8; both fall back to the largest divisor of the layer's
        # input channels. tiny preset width is 4.
        model = build_model(tiny_config(conv_kind="deformable"))
        groups = {
            name: mod.offset_groups
            for name, mod in model.named_modules()
            if isinstance(mod, DeformableConv2d)
        }
        assert groups["rgb_encoder.stem"] == 3
        assert groups["depth_adapter"] == 1
        assert groups["depth_encoder.stem"] == 3  # wants 8, 3 input channels
        assert groups["rgb_encoder.layer1.0.conv1"] == 4  # wants 8, 4 channels
        assert groups["rgb_encoder.layer4.0.conv1"] == 8  # 16 channels, 8 divides

    def test_early_fusion_stem_group_fallback(self):
        # The 4-channel early-fusion stem asks for 3 groups and gets 2.
        model = build_model(tiny_config(conv_kind="deformable", fusion="early"))
        stem = dict(model.named_modules())["encoder.stem"]
        assert isinstance(stem, DeformableConv2d)
        assert stem.offset_groups == 2

    def test_conversion_preserves_function(self):
        cfg = tiny_config(inputs=("rgb",), outputs=("height", "diameter"))
        standard = build_model(cfg)
        rgb = Tensor(rng.normal(size=(2, 3, 32, 32)))
        before = standard(rgb=rgb).data.copy()
        convert_model_to_deformable(standard)
        after = standard(rgb=rgb).data
        np.testing.assert_array_equal(before, after)

    def test_deformable_build_matches_standard_twin(self):
        cfg = tiny_config()
        std = build_model(cfg)
        dfm = build_model(tiny_config(conv_kind="deformable"))
        kwargs = random_inputs(cfg)
        np.testing.assert_array_equal(std(**kwargs).data, dfm(**kwargs).data)

    def test_deformable_has_more_parameters(self):
        std = parameter_count(build_model(tiny_config()))
        dfm = parameter_count(build_model(tiny_config(conv_kind="deformable")))
        assert dfm > std


class TestEnumerateAblation:
    def test_grid_has_eighteen_configs(self):
        for kind in ("standard", "deformable"):
            configs = enumerate_ablation(kind)
            assert len(configs) == 18
            assert all(c.conv_kind == kind for c in configs)

    def test_family_counts(self):
        configs = enumerate_ablation("standard")
        counts = {}
        for c in configs:
            counts[c.family] = counts.get(c.family, 0) + 1
        assert counts == {"MIMO": 1, "MISO": 5, "SIMO": 2, "SISO": 10}

    def test_configs_are_distinct(self):
        configs = enumerate_ablation("deformable")
        assert len({c.config_hash() for c in configs}) == 18

    def test_base_settings_propagate(self):
        base = ModelConfig(encoder="tiny", head_hidden=16, seed=3)
        configs = enumerate_ablation("standard", base=base)
        assert all(c.encoder == "tiny" for c in configs)
        assert all(c.head_hidden == 16 for c in configs)
        assert all(c.seed == 3 for c in configs)

    def test_unknown_conv_kind_rejected(self):
        with pytest.raises(ConfigError):
            enumerate_ablation("separable")
