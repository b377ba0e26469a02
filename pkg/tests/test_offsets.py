"""Offset inspection tests: field extraction, strong-offset filtering,
grid-to-pixel mapping, and the overlay renderer."""

import json

import numpy as np
import pytest

from traitreg.autograd import Tensor
from traitreg.data import Sample, TraitVector
from traitreg.errors import ConfigError, DataError, ShapeError
from traitreg.models import ModelConfig, build_model
from traitreg.offsets import (
    DEFAULT_THRESHOLD_PX,
    OffsetField,
    StrongOffset,
    StrongOffsetSet,
    default_kernel_points,
    displaced_positions,
    extract_offsets,
    filter_strong,
    first_deformable_layer,
    kernel_point_rc,
    render_overlay,
)

rng = np.random.default_rng(606)


def make_sample(h=32, w=32):
    gen = np.random.default_rng(3)
    return Sample(
        rgb=gen.uniform(0, 255, (3, h, w)),
        depth=gen.uniform(0, 30, (1, h, w)),
        traits=TraitVector(1.0, 0.1, 12.0, 20.0, 300.0),
        source_id="probe",
        variety="aurora",
    )


def deformable_model():
    cfg = ModelConfig(conv_kind="deformable", encoder="tiny", head_hidden=8, seed=4)
    return build_model(cfg)


def hand_field(kernel_size=3, groups=1, grid=(4, 4), entries=(), stride=1,
               padding=1, input_hw=(4, 4)):
    """Build an OffsetField with chosen (g, k, i, j) -> (dy, dx) values."""
    k2 = kernel_size * kernel_size
    data = np.zeros((1, 2 * k2 * groups) + tuple(grid))
    for (g, k, i, j), (dy, dx) in entries:
        data[0, g * 2 * k2 + 2 * k, i, j] = dy
        data[0, g * 2 * k2 + 2 * k + 1, i, j] = dx
    return OffsetField(
        data=data,
        kernel_size=kernel_size,
        stride=stride,
        padding=padding,
        offset_groups=groups,
        input_hw=input_hw,
        layer_path="probe.layer",
    )


class TestExtraction:
    def test_field_geometry_matches_first_layer(self):
        model = deformable_model()
        field = extract_offsets(model, make_sample())
        assert field.layer_path == "rgb_encoder.stem"
        assert field.kernel_size == 7
        assert field.stride == 2
        assert field.padding == 3
        assert field.offset_groups == 3
        assert field.input_hw == (32, 32)
        # 32 px, 7x7 kernel, stride 2, padding 3 -> 16x16 grid
        assert field.data.shape == (1, 2 * 49 * 3, 16, 16)
        assert field.kernel_points == 49
        assert field.grid_hw == (16, 16)

    def test_fresh_conversion_gives_zero_field(self):
        field = extract_offsets(deformable_model(), make_sample())
        assert np.all(field.data == 0.0)

    def test_biased_offset_branch_shows_up(self):
        model = deformable_model()
        _, layer = first_deformable_layer(model)
        layer.offset_conv.bias.data[:] = 0.5
        field = extract_offsets(model, make_sample())
        np.testing.assert_allclose(field.data, 0.5)

    def test_model_left_intact(self):
        model = deformable_model()
        model.train()
        sample = make_sample()
        extract_offsets(model, sample)
        assert model.training
        # the forward trap is gone, a normal pass works again
        out = model(
            rgb=Tensor(sample.rgb[None]), depth=Tensor(sample.depth[None])
        )
        assert out.data.shape == (1, 5)
        extract_offsets(model, sample)  # second probe also works

    def test_standard_model_rejected(self):
        model = build_model(ModelConfig(encoder="tiny", head_hidden=8))
        with pytest.raises(ConfigError, match="no deformable convolution"):
            extract_offsets(model, make_sample())

    def test_split_shapes(self):
        field = extract_offsets(deformable_model(), make_sample())
        dy, dx = field.split()
        assert dy.shape == (3, 49, 16, 16)
        assert dx.shape == (3, 49, 16, 16)


class TestFilterStrong:
    def test_zero_field_gives_empty_set(self):
        strong = filter_strong(hand_field(), threshold=3.0)
        assert len(strong) == 0
        assert strong.entries == ()

    def test_inclusive_threshold_on_1_3_5(self):
        # magnitudes 1, exactly 3, and 5: the threshold keeps 3 and 5
        field = hand_field(
            entries=[
                (((0, 0, 0, 0)), (1.0, 0.0)),
                (((0, 4, 1, 2)), (3.0, 0.0)),
                (((0, 8, 3, 3)), (3.0, 4.0)),
            ]
        )
        strong = filter_strong(field, threshold=3.0)
        mags = sorted(e.magnitude for e in strong.entries)
        assert mags == [3.0, 5.0]
        exact = next(e for e in strong.entries if e.magnitude == 3.0)
        assert (exact.kernel_point, exact.y, exact.x) == (4, 1, 2)

    def test_matches_full_scan_oracle(self):
        gen = np.random.default_rng(12)
        k, g, gh, gw = 3, 2, 5, 6
        data = gen.normal(scale=2.0, size=(1, 2 * k * k * g, gh, gw))
        field = hand_field(kernel_size=k, groups=g, grid=(gh, gw))
        object.__setattr__(field, "data", data)
        strong = filter_strong(field, threshold=2.5)
        dy, dx = field.split()
        expected = set()
        for gg in range(g):
            for kk in range(k * k):
                for i in range(gh):
                    for j in range(gw):
                        m = np.hypot(dy[gg, kk, i, j], dx[gg, kk, i, j])
                        if m >= 2.5:
                            expected.add((kk, gg, i, j))
        got = {(e.kernel_point, e.group, e.y, e.x) for e in strong.entries}
        assert got == expected
        for e in strong.entries:
            assert e.magnitude == pytest.approx(np.hypot(e.dy, e.dx))

    def test_entries_sorted_kernel_point_major(self):
        gen = np.random.default_rng(5)
        data = gen.normal(scale=3.0, size=(1, 2 * 9 * 2, 4, 4))
        field = hand_field(kernel_size=3, groups=2, grid=(4, 4))
        object.__setattr__(field, "data", data)
        keys = [
            (e.kernel_point, e.group, e.y, e.x)
            for e in filter_strong(field, 2.0).entries
        ]
        assert keys == sorted(keys)

    def test_threshold_zero_keeps_every_position(self):
        field = hand_field(kernel_size=3, groups=1, grid=(2, 2))
        strong = filter_strong(field, threshold=0.0)
        assert len(strong) == 9 * 2 * 2

    @pytest.mark.parametrize("bad", [-1.0, float("nan")])
    def test_bad_threshold_rejected(self, bad):
        with pytest.raises(ConfigError, match="threshold"):
            filter_strong(hand_field(), threshold=bad)

    def test_batched_field_rejected(self):
        field = hand_field()
        object.__setattr__(field, "data", np.zeros((2, 18, 4, 4)))
        with pytest.raises(ShapeError, match="batch"):
            filter_strong(field)

    def test_set_rejects_entry_below_threshold(self):
        weak = StrongOffset(0, 0, 0, 0, 1.0, 0.0, 1.0)
        with pytest.raises(DataError, match="below the threshold"):
            StrongOffsetSet(
                threshold=3.0,
                entries=(weak,),
                kernel_size=3,
                stride=1,
                padding=1,
                offset_groups=1,
                input_hw=(4, 4),
                grid_hw=(4, 4),
                layer_path="x",
            )

    def test_by_kernel_point_grouping(self):
        field = hand_field(
            entries=[
                ((0, 2, 0, 0), (4.0, 0.0)),
                ((0, 2, 1, 1), (0.0, 4.0)),
                ((0, 7, 2, 2), (5.0, 0.0)),
            ]
        )
        grouped = filter_strong(field, 3.0).by_kernel_point()
        assert sorted(grouped) == [2, 7]
        assert len(grouped[2]) == 2
        assert len(grouped[7]) == 1

    def test_to_dict_is_json_ready(self):
        field = hand_field(entries=[((0, 1, 0, 0), (3.0, 4.0))])
        doc = filter_strong(field, 3.0).to_dict()
        parsed = json.loads(json.dumps(doc))
        assert parsed["threshold"] == 3.0
        assert parsed["entries"][0]["magnitude"] == 5.0
        assert parsed["layer_path"] == "probe.layer"

    def test_default_threshold_is_three(self):
        assert DEFAULT_THRESHOLD_PX == 3.0


class TestGridMapping:
    def test_kernel_point_rc(self):
        assert kernel_point_rc(3, 0) == (0, 0)
        assert kernel_point_rc(3, 5) == (1, 2)
        assert kernel_point_rc(7, 10) == (1, 3)
        with pytest.raises(ConfigError, match="out of range"):
            kernel_point_rc(3, 9)

    def test_default_kernel_points_are_corners(self):
        assert default_kernel_points(3) == (0, 2, 6, 8)
        assert default_kernel_points(7) == (0, 6, 42, 48)
        assert default_kernel_points(1) == (0,)
        assert default_kernel_points(3, count=2) == (0, 2)

    def test_displaced_positions_hand_computed(self):
        # kernel point 10 of a 7x7 kernel sits at (ky, kx) = (1, 3);
        # output cell (2, 3) with stride 2, padding 3 reads the input at
        # base (2*2-3+1, 3*2-3+3) = (2, 6); a (dy, dx) = (3, 4) offset
        # moves the tap to (5, 10), exactly 5 px from base.
        field = hand_field(
            kernel_size=7, groups=1, grid=(8, 8), stride=2, padding=3,
            input_hw=(16, 16), entries=[((0, 10, 2, 3), (3.0, 4.0))],
        )
        strong = filter_strong(field, 3.0)
        pos = displaced_positions(strong)
        assert pos.shape == (1, 4)
        np.testing.assert_array_equal(pos[0], [2.0, 6.0, 5.0, 10.0])
        dist = np.hypot(pos[0, 2] - pos[0, 0], pos[0, 3] - pos[0, 1])
        assert dist == 5.0

    def test_stride_one_padding_zero_is_identity_shift(self):
        field = hand_field(
            kernel_size=3, groups=1, grid=(4, 4), stride=1, padding=0,
            input_hw=(6, 6), entries=[((0, 0, 1, 2), (3.0, 0.0))],
        )
        pos = displaced_positions(filter_strong(field, 3.0))
        np.testing.assert_array_equal(pos[0], [1.0, 2.0, 4.0, 2.0])


class TestRenderOverlay:
    def grid_image(self, h=16, w=16):
        img = np.zeros((h, w, 3))
        img[::4, :, :] = 1.0
        img[:, ::4, :] = 1.0
        return img

    def strong_set(self):
        field = hand_field(
            kernel_size=3, groups=1, grid=(16, 16), stride=1, padding=1,
            input_hw=(16, 16),
            entries=[
                ((0, 0, 4, 4), (3.0, 4.0)),
                ((0, 8, 8, 8), (0.0, 5.0)),
                ((0, 8, 1, 1), (-40.0, 0.0)),  # clamps to the border
            ],
        )
        return filter_strong(field, 3.0)

    def test_writes_png(self, tmp_path):
        out = render_overlay(self.grid_image(), self.strong_set(), tmp_path / "o.png")
        blob = out.read_bytes()
        assert blob[:8] == b"\x89PNG\r\n\x1a\n"
        assert len(blob) > 1000

    def test_same_input_same_bytes(self, tmp_path):
        a = render_overlay(self.grid_image(), self.strong_set(), tmp_path / "a.png")
        b = render_overlay(self.grid_image(), self.strong_set(), tmp_path / "b.png")
        assert a.read_bytes() == b.read_bytes()

    def test_accepts_sample_and_chw(self, tmp_path):
        strong = self.strong_set()
        sample = make_sample(16, 16)
        render_overlay(sample, strong, tmp_path / "s.png")
        render_overlay(sample.rgb, strong, tmp_path / "c.png")
        gray = sample.depth[0]
        render_overlay(gray, strong, tmp_path / "g.png")

    def test_wrong_image_size_rejected(self, tmp_path):
        with pytest.raises(ShapeError, match="computed on"):
            render_overlay(self.grid_image(8, 8), self.strong_set(), tmp_path / "o.png")

    def test_too_many_kernel_points_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="at most"):
            render_overlay(
                self.grid_image(),
                self.strong_set(),
                tmp_path / "o.png",
                kernel_points=[0, 1, 2, 3, 4],
            )

    def test_out_of_range_kernel_point_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="out of range"):
            render_overlay(
                self.grid_image(), self.strong_set(), tmp_path / "o.png",
                kernel_points=[12],
            )

    def test_raised_cap_allows_more_points(self, tmp_path):
        out = render_overlay(
            self.grid_image(), self.strong_set(), tmp_path / "o.png",
            kernel_points=list(range(6)), max_kernel_points=6,
        )
        assert out.exists()
