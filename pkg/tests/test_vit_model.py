"""Tests for the ViT classifier, its parameter layout and checkpoint files."""
import numpy as np
import pytest

import imbalance_losses as il
import tensor_core as tc
import vit_model as vm
from conftest import learnable_batch
from errors import FormatError, ParameterError, ShapeError
from tensor_core import Tensor


@pytest.fixture
def config():
    return vm.PRESETS["vit_test"]


@pytest.fixture
def params(config):
    return vm.init_params(config, seed=3)


def enumerate_param_count(config):
    return sum(int(np.prod(shape)) for _, shape in vm.param_layout(config))


class TestConfig:
    def test_presets(self):
        base, large = vm.PRESETS["vit_base"], vm.PRESETS["vit_large"]
        assert (base.embed_dim, base.depth, base.num_heads) == (768, 12, 12)
        assert (large.embed_dim, large.depth, large.num_heads) == (1024, 24, 16)

    @pytest.mark.parametrize(
        "overrides",
        [{"image_size": 10}, {"embed_dim": 9}, {"depth": 0}, {"dropout": 1.0}, {"ln_eps": -1.0}],
    )
    def test_invalid_configs(self, overrides):
        with pytest.raises(ParameterError):
            vm.preset("vit_test", **overrides)

    def test_unknown_preset(self):
        with pytest.raises(ParameterError):
            vm.preset("vit_huge")

    def test_dict_round_trip(self, config):
        assert vm.ViTConfig.from_dict(config.to_dict()) == config


class TestParams:
    def test_vit_test_count(self, config, params):
        assert vm.count_params(config) == 1227
        assert sum(p.size for p in params.values()) == 1227

    @pytest.mark.parametrize("name", sorted(vm.PRESETS))
    def test_closed_form_matches_layout(self, name):
        config = vm.PRESETS[name]
        assert vm.count_params(config) == enumerate_param_count(config)

    def test_deterministic_per_seed(self, config):
        a, b = vm.init_params(config, 9), vm.init_params(config, 9)
        assert all(a[n].data.tobytes() == b[n].data.tobytes() for n in a)

    def test_truncation_and_zero_init(self, params):
        for name, tensor in params.items():
            assert np.all(np.isfinite(tensor.data))
            if name.endswith(".weight"):
                assert np.abs(tensor.data).max() <= 0.04 + 1e-7
            elif name.endswith(".gamma"):
                assert np.all(tensor.data == 1)
            else:
                assert np.all(tensor.data == 0)


class TestPatchify:
    def test_token_count(self, rng):
        tokens = vm.patchify(rng.standard_normal((2, 8, 8)), 4)
        assert tokens.shape == (4, 32)

    def test_whole_image_is_one_token(self, rng):
        image = rng.standard_normal((2, 8, 8)).astype(np.float32)
        np.testing.assert_array_equal(vm.patchify(image, 8)[0], image.reshape(-1))

    def test_round_trip(self, rng):
        image = rng.standard_normal((2, 8, 12)).astype(np.float32)
        np.testing.assert_array_equal(vm.unpatchify(vm.patchify(image, 4), 4, 2, 8, 12), image)

    def test_block_order_is_row_major(self):
        image = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
        tokens = vm.patchify(image, 2)
        np.testing.assert_array_equal(tokens[1], [2, 3, 6, 7])

    def test_indivisible(self, rng):
        with pytest.raises(ShapeError):
            vm.patchify(rng.standard_normal((2, 8, 7)), 4)


class TestForward:
    def test_output_shape(self, config, params, rng):
        assert vm.forward(params, config, rng.standard_normal((5, 2, 8, 8))).shape == (5, 3)

    def test_deterministic(self, config, params, rng):
        batch = rng.standard_normal((3, 2, 8, 8))
        a = vm.forward(params, config, batch).data
        b = vm.forward(params, config, batch).data
        assert a.tobytes() == b.tobytes()

    @pytest.mark.parametrize("seed", range(3))
    def test_permutation_invariance_without_positions(self, config, seed):
        params = vm.init_params(config, seed)
        params["cls_token"] = Tensor(np.random.default_rng(seed).standard_normal(config.embed_dim), grad_enabled=True)
        tokens = vm.patchify(np.random.default_rng(seed + 10).standard_normal((2, 2, 8, 8)), config.patch_size)
        perm = np.random.default_rng(seed).permutation(config.num_patches)
        a = vm.forward_tokens(params, config, tokens).data
        b = vm.forward_tokens(params, config, tokens[:, perm]).data
        np.testing.assert_allclose(a, b, atol=1e-5)

    @pytest.mark.parametrize(
        "shape, match",
        [((2, 3, 8, 8), "channel"), ((2, 2, 4, 4), "spatial"), ((2, 8, 8), "B x C")],
    )
    def test_shape_errors_name_dimension(self, config, params, shape, match):
        with pytest.raises(ShapeError, match=match):
            vm.forward(params, config, np.zeros(shape))

    def test_predict_classes_batches(self, config, params, rng):
        images = rng.standard_normal((7, 2, 8, 8))
        expected = np.argmax(vm.forward(params, config, images).data, axis=1)
        np.testing.assert_array_equal(vm.predict_classes(params, config, images, batch_size=3), expected)


class TestEndToEndGradient:
    @pytest.mark.parametrize("seed", range(5))
    def test_loss_gradient_matches_finite_differences(self, config, seed):
        rng = np.random.default_rng(seed)
        params = vm.init_params(config, seed)
        # larger weights make the finite-difference signal measurable in float32
        params = {n: Tensor(p.data * 10 if n.endswith(".weight") else p.data, grad_enabled=True) for n, p in params.items()}
        batch = rng.standard_normal((4, 2, 8, 8))
        targets = rng.integers(0, config.num_classes, 4)
        name = "blocks.0.mlp.fc1.weight"

        with tc.Tape() as tape:
            loss = il.cross_entropy(vm.forward(params, config, batch), targets)
        analytic = tc.gradients(tape, loss, params)[name]

        h = 1e-2
        cells = [tuple(rng.integers(0, s) for s in params[name].shape) for _ in range(6)]
        for cell in cells:
            values = []
            for sign in (1, -1):
                shifted = dict(params)
                data = params[name].data.copy()
                data[cell] += sign * h
                shifted[name] = Tensor(data)
                values.append(il.cross_entropy(vm.forward(shifted, config, batch), targets).item())
            numeric = (values[0] - values[1]) / (2 * h)
            # abs: float32 rounding of the loss across the 2e-2 span
            assert analytic[cell] == pytest.approx(numeric, rel=1e-2, abs=1e-4)


class TestOverfit:
    def test_learns_fixed_batch(self, config):
        images, labels = learnable_batch(64, config.num_classes, config.image_size, seed=0)
        params = vm.init_params(config, 0)
        state = tc.AdamState(lr=1e-3)
        accuracy = 0.0
        for _ in range(500):
            with tc.Tape() as tape:
                logits = vm.forward(params, config, images, train_mode=True)
                loss = il.cross_entropy(logits, labels)
            grads = tc.gradients(tape, loss, params)
            params, state = tc.adam_step(params, grads, state)
            accuracy = float(np.mean(vm.predict_classes(params, config, images) == labels))
            if accuracy >= 0.99:
                break
        assert accuracy >= 0.99


class TestCheckpoint:
    def test_round_trip_is_bitwise(self, config, params, tmp_path, rng):
        path = vm.save_checkpoint(params, config, {"seed": 3, "steps": 0, "loss": "ce"}, tmp_path / "m.icevit")
        loaded = vm.load_checkpoint(path)
        assert loaded.config == config
        assert loaded.meta == {"seed": 3, "steps": 0, "loss": "ce"}
        batch = rng.standard_normal((2, 2, 8, 8))
        before = vm.forward(params, config, batch).data
        after = vm.forward(loaded.params, loaded.config, batch).data
        assert before.tobytes() == after.tobytes()

    def test_carries_exact_named_tensor_set(self, config, params, tmp_path):
        loaded = vm.load_checkpoint(vm.save_checkpoint(params, config, {}, tmp_path / "m.icevit"))
        assert list(loaded.params) == [name for name, _ in vm.param_layout(config)]

    def test_identical_bytes_for_identical_inputs(self, config, params, tmp_path):
        a = vm.save_checkpoint(params, config, {"seed": 1}, tmp_path / "a.icevit").read_bytes()
        b = vm.save_checkpoint(params, config, {"seed": 1}, tmp_path / "b.icevit").read_bytes()
        assert a == b

    def test_bad_magic(self, config, params, tmp_path):
        path = vm.save_checkpoint(params, config, {}, tmp_path / "m.icevit")
        raw = bytearray(path.read_bytes())
        raw[0:8] = b"NOTAVIT!"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="magic"):
            vm.load_checkpoint(path)

    def test_truncated(self, config, params, tmp_path):
        path = vm.save_checkpoint(params, config, {}, tmp_path / "m.icevit")
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(FormatError, match="truncated"):
            vm.load_checkpoint(path)

    def test_header_dimension_mismatch(self, config, params, tmp_path):
        path = vm.save_checkpoint(params, config, {}, tmp_path / "m.icevit")
        raw = path.read_bytes()
        # header now declares four classes; the stored head tensors still hold three
        patched = raw.replace(b'"num_classes": 3', b'"num_classes": 4')
        assert patched != raw
        path.write_bytes(patched)
        with pytest.raises(FormatError):
            vm.load_checkpoint(path)

    def test_missing_parameter_rejected_on_save(self, config, params, tmp_path):
        del params["head.bias"]
        with pytest.raises(ShapeError):
            vm.save_checkpoint(params, config, {}, tmp_path / "m.icevit")
