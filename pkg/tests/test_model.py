import struct

import numpy as np
import pytest

from pixelcam import model as M
from pixelcam.errors import ConfigurationError, DimensionError, FormatError
from pixelcam.model import ModelConfig, ModelParams, init_params

from conftest import naive_conv2d


@pytest.fixture
def params():
    return init_params(ModelConfig(widths=(4, 6)), seed=3)


def _zeroed(p):
    return ModelParams(p.config, {k: np.zeros_like(v) for k, v in p.tensors.items()})


class TestConfig:
    @pytest.mark.parametrize(
        "change",
        [dict(widths=(4, 1)), dict(num_classes=1), dict(kernel=4), dict(pixel_head="deep"), dict(pool_after=(5,)),
         dict(input_mean=(0.5, 0.5, 0.5)), dict(input_mean=(0.5,), input_std=(1.0,)),
         dict(input_mean=(0.0,) * 3, input_std=(1.0, 0.0, 1.0))],
    )
    def test_invalid(self, change):
        with pytest.raises(ConfigurationError):
            init_params(ModelConfig(**change))

    def test_roundtrip(self):
        cfg = ModelConfig(widths=(3, 5), pixel_head="multi-layer", pool_after=(0,),
                          input_mean=(0.1, 0.2, 0.3), input_std=(1.0, 2.0, 3.0))
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_multi_layer_widths_halve(self):
        shapes = M.param_shapes(ModelConfig(widths=(8, 32), pixel_head="multi-layer"))
        assert [shapes[f"pix.{i}.w"] for i in range(3)] == [(16, 32), (8, 16), (4, 8)]
        assert shapes["pix.out.w"] == (2, 4)

    def test_param_groups(self, params):
        assert set(params.theta1) == {"enc.0.w", "enc.0.b", "enc.1.w", "enc.1.b"}
        assert set(params.theta2) == {"img.w", "img.b"}
        assert set(params.theta3) == {"pix.w", "pix.b"}

    def test_shape_validation(self, params):
        bad = dict(params.tensors)
        bad["img.w"] = np.zeros((3, 6))
        with pytest.raises(DimensionError):
            ModelParams(params.config, bad)

    def test_init_deterministic(self):
        a, b = init_params(ModelConfig(), 5), init_params(ModelConfig(), 5)
        assert M.checkpoint_id(a) == M.checkpoint_id(b)
        assert M.checkpoint_id(a) != M.checkpoint_id(init_params(ModelConfig(), 6))


class TestEncode:
    def test_zero_params_give_zero_features(self, params, rng):
        assert not M.encode(rng.random((5, 5, 3)), _zeroed(params)).any()

    @pytest.mark.parametrize("pool", [(), (0,), (0, 1)])
    def test_output_shape(self, rng, pool):
        p = init_params(ModelConfig(widths=(4, 6), pool_after=pool))
        assert M.encode(rng.random((8, 12, 3)), p).shape == (8, 12, 6)

    def test_matches_layer_oracle(self, params, rng):
        x = rng.random((6, 6, 3))
        h = x
        for i in range(2):
            h = np.maximum(naive_conv2d(h, params[f"enc.{i}.w"], params[f"enc.{i}.b"]), 0.0)
        np.testing.assert_allclose(M.encode(x, params), h, rtol=0, atol=1e-12)

    def test_standardization_matches_manual(self, params, rng):
        mean, std = (0.2, 0.5, 0.7), (0.1, 0.3, 2.0)
        cfg = ModelConfig(widths=(4, 6), input_mean=mean, input_std=std)
        p = ModelParams(cfg, params.tensors)
        x = rng.random((5, 5, 3))
        z = (x - np.array(mean)) / np.array(std)
        np.testing.assert_allclose(M.encode(x, p), M.encode(z, params), rtol=0, atol=1e-13)

    def test_input_statistics(self):
        imgs = np.zeros((2, 2, 2, 3))
        imgs[1] = 1.0
        mean, std = M.input_statistics(imgs)
        assert mean == (0.5, 0.5, 0.5) and std == (0.5, 0.5, 0.5)

    def test_channel_mismatch(self, params):
        with pytest.raises(DimensionError):
            M.encode(np.zeros((4, 4, 2)), params)


class TestHeads:
    def test_zero_image_head_is_uniform(self, params, rng):
        p = _zeroed(params)
        np.testing.assert_array_equal(M.classify_image(rng.random((3, 3, 6)), p), [0.5, 0.5])

    def test_image_head_hand_case(self, params):
        p = params.copy()
        p.tensors["img.w"][:] = 0.0
        p.tensors["img.w"][1, :2] = [1.0, -1.0]
        p.tensors["img.b"][:] = [0.0, 0.5]
        f = np.zeros((1, 1, 6))
        f[0, 0, :2] = [2.0, 0.5]
        z1 = 2.0 - 0.5 + 0.5
        np.testing.assert_allclose(M.classify_image(f, p), [1 / (1 + np.exp(z1)), 1 / (1 + np.exp(-z1))], atol=1e-15)

    def test_zero_pixel_head_is_half(self, params, rng):
        s = M.classify_pixels(rng.random((4, 5, 6)), _zeroed(params))
        np.testing.assert_array_equal(s, np.full((4, 5, 2), 0.5))

    @pytest.mark.parametrize("head", ["linear", "multi-layer"])
    def test_pixel_rows_sum_to_one(self, rng, head):
        p = init_params(ModelConfig(widths=(4, 16), pixel_head=head), 1)
        s = M.classify_pixels(rng.normal(size=(2, 5, 5, 16)) * 10, p)
        np.testing.assert_allclose(s.sum(-1), 1.0, rtol=0, atol=1e-9)

    def test_pixel_head_single_pixel_hand(self, params):
        p = params.copy()
        p.tensors["pix.w"][:] = 0.0
        p.tensors["pix.w"][1, 0] = 2.0
        p.tensors["pix.b"][:] = [0.25, 0.0]
        f = np.zeros((1, 1, 6))
        f[0, 0, 0] = 1.0
        fg = 1 / (1 + np.exp(-(2.0 - 0.25)))
        np.testing.assert_allclose(M.classify_pixels(f, p)[0, 0], [1 - fg, fg], atol=1e-15)

    def test_linear_head_is_location_independent(self, params, rng):
        f = rng.normal(size=(4, 4, 6))
        s = M.classify_pixels(f, params)
        perm = rng.permutation(16)
        s_perm = M.classify_pixels(f.reshape(16, 6)[perm].reshape(4, 4, 6), params)
        np.testing.assert_allclose(s_perm.reshape(16, 2), s.reshape(16, 2)[perm], atol=1e-15)

    def test_infer_encodes_once(self, params, rng, monkeypatch):
        calls = []
        real = M.encode

        def counting(x, p):
            calls.append(1)
            return real(x, p)

        monkeypatch.setattr(M, "encode", counting)
        probs, s = M.infer(rng.random((6, 6, 3)), params)
        assert len(calls) == 1 and probs.shape == (2,) and s.shape == (6, 6, 2)

    def test_infer_equivariant_to_flips(self, params, rng):
        # mirroring the input and every kernel mirrors the maps and keeps the image scores
        x = rng.random((7, 7, 3))
        mirrored = params.copy()
        for i in range(2):
            mirrored.tensors[f"enc.{i}.w"] = np.ascontiguousarray(params[f"enc.{i}.w"][:, ::-1])
        probs, s = M.infer(x, params)
        probs_f, s_f = M.infer(x[:, ::-1], mirrored)
        np.testing.assert_allclose(probs_f, probs, atol=1e-12)
        np.testing.assert_allclose(s_f, s[:, ::-1], atol=1e-12)


class TestCam:
    def test_flat_is_degenerate_zero(self):
        m, degenerate = M.normalize_cam(np.full((3, 3), 2.0))
        assert degenerate and not m.any()

    def test_range(self, rng):
        m, degenerate = M.normalize_cam(rng.normal(size=(5, 5)))
        assert not degenerate and m.min() == 0.0 and m.max() == 1.0

    def test_linear_in_features(self, params, rng):
        f1, f2 = rng.normal(size=(4, 4, 6)), rng.normal(size=(4, 4, 6))
        np.testing.assert_allclose(M.raw_cam(2 * f1 + f2, params, 1),
                                   2 * M.raw_cam(f1, params, 1) + M.raw_cam(f2, params, 1), atol=1e-12)

    def test_class_weights_projection(self, params, rng):
        f = rng.normal(size=(3, 3, 6))
        np.testing.assert_allclose(M.raw_cam(f, params, 0), np.einsum("ijd,d->ij", f, params["img.w"][0]))

    def test_baseline_cam_metadata(self, params, rng):
        cam = M.baseline_cam(rng.normal(size=(3, 3, 6)), params, 1, "abc")
        assert (cam.source_class, cam.checkpoint_id) == (1, "abc")
        assert 0.0 <= cam.map.min() and cam.map.max() <= 1.0

    def test_class_out_of_range(self, params):
        with pytest.raises(IndexError):
            M.baseline_cam(np.zeros((2, 2, 6)), params, 2)


class TestCheckpoint:
    @pytest.mark.parametrize("head", ["linear", "multi-layer"])
    def test_roundtrip_bit_exact(self, tmp_path, head):
        p = init_params(ModelConfig(widths=(4, 8), pixel_head=head, input_mean=(0.1, 0.2, 0.3),
                                    input_std=(0.5, 0.5, 0.5)), 2)
        digest = M.save_checkpoint(p, tmp_path / "a.pxcm")
        q = M.load_checkpoint(tmp_path / "a.pxcm")
        assert q.config == p.config
        for k in p.tensors:
            assert q[k].tobytes() == p[k].tobytes()
        assert M.save_checkpoint(q, tmp_path / "b.pxcm") == digest
        assert (tmp_path / "a.pxcm").read_bytes() == (tmp_path / "b.pxcm").read_bytes()

    def test_header_layout(self, params):
        data = M.serialize_params(params)
        assert data[:4] == b"PXCM"
        assert struct.unpack("<I", data[4:8])[0] == 1

    def test_bad_magic(self, params):
        data = b"XXXX" + M.serialize_params(params)[4:]
        with pytest.raises(FormatError, match="byte offset 0"):
            M.deserialize_params(data)

    def test_truncated(self, params):
        data = M.serialize_params(params)
        with pytest.raises(FormatError, match="truncated"):
            M.deserialize_params(data[:-3])

    def test_wrong_shape(self, params):
        other = init_params(ModelConfig(widths=(4, 7)), 0)
        data = M.serialize_params(params)
        cfg_len = struct.unpack("<I", data[8:12])[0]
        bad = M.serialize_params(other)
        other_cfg_len = struct.unpack("<I", bad[8:12])[0]
        spliced = data[:12 + cfg_len] + bad[12 + other_cfg_len:]
        with pytest.raises(FormatError):
            M.deserialize_params(spliced)
