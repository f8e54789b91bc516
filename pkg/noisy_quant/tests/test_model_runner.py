import unittest
import tempfile
from pathlib import Path

import numpy as np

from noisy_quant.calibration import CalibConfig, calibrate
from noisy_quant.model_runner import (
    LayerSpec,
    Model,
    ModelDims,
    ModelRunner,
    ModelSpec,
    argmax_agreement,
    encoder_layers,
    evaluate,
    gen_data,
    gen_model,
    load_batches,
    output_mse,
    save_batches,
)
from noisy_quant.numerics import Tensor2D, gelu64
from noisy_quant.tests.test_assert_functions import assert_tensor_equal
from utils.exceptions import (
    ConfigError,
    DataIOError,
    InvalidArgumentError,
    ModelBundleError,
    NotCalibratedError,
    ShapeMismatchError,
)

DIMS = ModelDims(tokens=8, width=16, mlp=32, heads=2, classes=4)


class TestModelSpec(unittest.TestCase):
    def test_dims_validation(self):
        self.assertRaises(InvalidArgumentError, ModelDims, width=10, heads=4)
        self.assertRaises(InvalidArgumentError, ModelDims, tokens=0)
        self.assertRaises(ConfigError, ModelDims.from_dict, {"depth": 2})

    def test_encoder_layout(self):
        spec = ModelSpec("encoder", DIMS, encoder_layers(DIMS), "encoder")

        self.assertEqual(spec.output_features, DIMS.classes)
        self.assertListEqual(
            [layer.name for layer in spec.linear_specs],
            ["qkv", "proj", "fc1", "fc2", "head"],
        )
        self.assertListEqual(
            [layer.layer_type for layer in spec.linear_specs],
            ["qkv", "proj", "fc1", "fc2", "other"],
        )

    def test_inconsistent_chain(self):
        layers = (
            LayerSpec(kind="linear", name="fc1", layer_type="fc1", in_features=8,
                      out_features=4, weight="w", bias="b"),
        )
        self.assertRaises(ModelBundleError, ModelSpec, "bad", DIMS, layers)

    def test_residual_source_range(self):
        layers = (LayerSpec(kind="residual_add", name="residual", source=3),)
        self.assertRaises(ModelBundleError, ModelSpec, "bad", DIMS, layers)

    def test_duplicate_names(self):
        layers = (LayerSpec(kind="gelu", name="act"), LayerSpec(kind="gelu", name="act"))
        self.assertRaises(ModelBundleError, ModelSpec, "bad", DIMS, layers)

    def test_unknown_kind(self):
        self.assertRaises(ModelBundleError, LayerSpec, kind="conv", name="c")

    def test_dict_round_trip(self):
        spec = ModelSpec("encoder", DIMS, encoder_layers(DIMS), "encoder")
        self.assertEqual(ModelSpec.from_dict(spec.to_dict()), spec)


class TestGenerators(unittest.TestCase):
    def test_gen_model_is_deterministic(self):
        first, second = gen_model(DIMS, seed=3), gen_model(DIMS, seed=3)

        for key, tensor in first.tensors.items():
            assert_tensor_equal(second.tensors[key], tensor)
        self.assertFalse(
            gen_model(DIMS, seed=4).tensors["fc1.weight.t2d"].equals(
                first.tensors["fc1.weight.t2d"]
            )
        )

    def test_weight_scale(self):
        model = gen_model(ModelDims(width=64, mlp=256), seed=0)
        weight = model.tensors["fc2.weight.t2d"].values

        self.assertAlmostEqual(float(weight.std()), 1 / 16, delta=0.005)

    def test_mlp_architecture(self):
        model = gen_model(DIMS, seed=0, architecture="mlp")

        self.assertEqual(model.spec.architecture, "mlp")
        self.assertListEqual(list(model.linear_layers()), ["fc1", "fc2", "head"])
        self.assertRaises(InvalidArgumentError, gen_model, DIMS, 0, "cnn")

    def test_gen_data(self):
        spec = gen_model(DIMS, seed=0).spec
        batches = gen_data(spec, 3, seed=5)

        self.assertEqual(len(batches), 3)
        self.assertEqual(batches[0].shape, (DIMS.width, DIMS.tokens))
        assert_tensor_equal(gen_data(spec, 2, seed=5)[1], batches[1])
        self.assertRaises(InvalidArgumentError, gen_data, spec, 0)


class TestBundles(unittest.TestCase):
    def setUp(self):
        self.directory = tempfile.TemporaryDirectory()
        self.path = Path(self.directory.name)

    def tearDown(self):
        self.directory.cleanup()

    def test_model_save_and_load(self):
        model = gen_model(DIMS, seed=2)
        written = model.save(self.path)
        loaded = Model.load(self.path)

        self.assertEqual(len(written), 11)
        self.assertEqual(loaded.spec, model.spec)
        for key, tensor in model.tensors.items():
            assert_tensor_equal(loaded.tensors[key], tensor)

    def test_missing_model_file(self):
        self.assertRaises(ModelBundleError, Model.load, self.path)

    def test_missing_tensor(self):
        gen_model(DIMS, seed=2).save(self.path)
        (self.path / "fc2.bias.t2d").unlink()

        self.assertRaises(ModelBundleError, Model.load, self.path)

    def test_wrong_tensor_shape(self):
        model = gen_model(DIMS, seed=2)
        tensors = dict(model.tensors)
        tensors["fc1.bias.t2d"] = Tensor2D(np.zeros((3, 1)))

        self.assertRaises(ModelBundleError, Model, model.spec, tensors)

    def test_batches(self):
        batches = gen_data(gen_model(DIMS).spec, 3, seed=1)
        save_batches(self.path, batches)
        loaded = load_batches(self.path)

        self.assertEqual(len(loaded), 3)
        for expected, actual in zip(batches, loaded):
            assert_tensor_equal(actual, expected)

    def test_no_batches(self):
        self.assertRaises(DataIOError, load_batches, self.path)


class TestModelRunner(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.model = gen_model(DIMS, seed=0)
        cls.data = gen_data(cls.model.spec, 2, seed=1)
        cls.calib = calibrate(cls.model, cls.data, CalibConfig())

    def test_fp_forward_shape(self):
        output = ModelRunner(self.model).forward(self.data[0])
        self.assertEqual(output.shape, (DIMS.classes, DIMS.tokens))

    def test_mlp_forward(self):
        model = gen_model(DIMS, seed=1, architecture="mlp")
        x = self.data[0].to_numpy()
        tensors = {key: tensor.to_numpy() for key, tensor in model.tensors.items()}

        hidden = gelu64(tensors["fc1.weight.t2d"] @ x + tensors["fc1.bias.t2d"])
        hidden = tensors["fc2.weight.t2d"] @ hidden + tensors["fc2.bias.t2d"]
        expected = tensors["head.weight.t2d"] @ hidden + tensors["head.bias.t2d"]

        np.testing.assert_allclose(
            ModelRunner(model).forward(self.data[0]).values, expected, atol=1e-4
        )

    def test_quantized_modes_need_calibration(self):
        runner = ModelRunner(self.model)

        self.assertRaises(NotCalibratedError, runner.forward, self.data[0], "quant")
        self.assertRaises(NotCalibratedError, runner.layers, "noisyquant")

    def test_invalid_inputs(self):
        runner = ModelRunner(self.model, self.calib)

        self.assertRaises(InvalidArgumentError, runner.forward, self.data[0], "int4")
        self.assertRaises(ShapeMismatchError, runner.forward, np.ones((3, 8)))

    def test_disabled_layers_run_in_floating_point(self):
        runner = ModelRunner(self.model, self.calib)
        disabled = ["qkv", "attn", "proj", "fc1", "fc2", "head"]

        assert_tensor_equal(
            runner.forward(self.data[0], "quant", disabled),
            runner.forward(self.data[0], "fp"),
        )

    def test_zero_noise_matches_quant(self):
        runner = ModelRunner(self.model, self.calib.with_noise_layers(()))

        for batch in self.data:
            assert_tensor_equal(
                runner.forward(batch, "noisyquant"), runner.forward(batch, "quant")
            )

    def test_integer_tracks_noisyquant(self):
        runner = ModelRunner(self.model, self.calib)
        reference = runner.run(self.data, "fp")
        noisy = runner.run(self.data, "noisyquant")
        integer = runner.run(self.data, "integer")

        self.assertTrue(runner.integer_ready())
        self.assertLess(
            output_mse(integer, noisy), 0.5 * output_mse(noisy, reference) + 1e-9
        )

    def test_trace(self):
        inputs = ModelRunner(self.model).trace(self.data)

        self.assertSetEqual(
            set(inputs),
            {"qkv", "proj", "fc1", "fc2", "head", "attn.q", "attn.k", "attn.v", "attn.probs"},
        )
        self.assertEqual(inputs["fc1"].shape, (DIMS.width, 2 * DIMS.tokens))

    def test_layers_are_cached(self):
        runner = ModelRunner(self.model, self.calib)
        self.assertIs(runner.layers("quant"), runner.layers("quant"))


class TestOutputMetrics(unittest.TestCase):
    def test_output_mse(self):
        outputs = [Tensor2D([[1.0, 2.0]]), Tensor2D([[3.0]])]
        reference = [Tensor2D([[1.0, 0.0]]), Tensor2D([[1.0]])]

        self.assertAlmostEqual(output_mse(outputs, reference), 8 / 3)

    def test_argmax_agreement(self):
        outputs = [Tensor2D([[1.0, 0.0], [0.0, 1.0]])]
        reference = [Tensor2D([[1.0, 1.0], [0.0, 0.0]])]

        self.assertEqual(argmax_agreement(outputs, reference), 0.5)


class TestEvaluate(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.model = gen_model(DIMS, seed=0)
        cls.data = gen_data(cls.model.spec, 2, seed=1)
        cls.calib = calibrate(cls.model, cls.data, CalibConfig())
        cls.metrics = evaluate(cls.model, cls.data, cls.calib, bins=16)

    def test_modes(self):
        self.assertSetEqual(set(self.metrics.output_mse), {"quant", "noisyquant", "integer"})
        self.assertSetEqual(set(self.metrics.agreement), {"quant", "noisyquant", "integer"})
        for value in self.metrics.agreement.values():
            self.assertGreaterEqual(value, 0.0)
            self.assertLessEqual(value, 1.0)

    def test_reports(self):
        frame = self.metrics.report_frame()

        self.assertListEqual(list(frame["layer"]), ["qkv", "proj", "fc1", "fc2", "head"])
        head = frame.set_index("layer").loc["head"]
        self.assertEqual(head["n"], 0.0)
        self.assertEqual(head["output_qe_noisy"], head["output_qe"])

    def test_layer_types(self):
        self.assertListEqual(
            list(self.metrics.layer_types.index), ["qkv", "proj", "fc1", "fc2", "other"]
        )
        self.assertTrue((self.metrics.layer_types["Layers"] == 1).all())

    def test_histograms(self):
        frame = self.metrics.histogram_frame()

        self.assertEqual(frame.columns[0], "layer")
        self.assertEqual(len(frame), 5 * 5 * (16 + 2))

    def test_to_dict(self):
        payload = self.metrics.to_dict()
        self.assertSetEqual(set(payload), {"output_mse", "agreement", "layers", "layer_types"})
        self.assertEqual(len(payload["layer_types"]), 5)

    def test_single_layer_type_changes_only_its_reports(self):
        baseline = evaluate(self.model, self.data, self.calib.with_noise_layers(()), bins=16)
        expected = {report.layer: report.to_dict() for report in baseline.reports}

        for layer_type in ("qkv", "proj", "fc1", "fc2"):
            calib = self.calib.with_noise_layers((layer_type,))
            metrics = evaluate(self.model, self.data, calib, bins=16)

            for report in metrics.reports:
                with self.subTest(layer_type=layer_type, layer=report.layer):
                    layer = calib.layer(report.layer)
                    if layer.layer_type == layer_type and layer.eligible:
                        self.assertEqual(report.n, layer.selected_n)
                        self.assertLess(report.delta, 0.0)
                    else:
                        self.assertDictEqual(report.to_dict(), expected[report.layer])

    def test_two_region_grid_skips_integer_mode(self):
        calib = calibrate(self.model, self.data, CalibConfig(fitter="twin"))

        metrics = evaluate(self.model, self.data, calib)

        self.assertNotIn("integer", metrics.output_mse)
