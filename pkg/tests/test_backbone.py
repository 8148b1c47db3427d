import numpy as np
import pytest

from dpif.backbone import (DEFAULT_TRUNCATION, TRUNCATION_SHAPES, BackboneSpec, build_backbone,
                           forward_features, layer_shapes, seeded_weights, truncation_sweep)
from dpif.tensor import Tensor
from dpif.weights import MissingWeightError, WeightStore

TABLE_ROWS = [(fam, name, shape) for fam in ("vgg16", "resnet50")
              for name, shape in TRUNCATION_SHAPES[fam].items()]


def vgg16_conv_count(upto_block: int) -> int:
    """Conv weights+biases of VGG16 blocks 1..upto_block, enumerated from the layer table."""
    table = [(3, 64), (64, 64), (64, 128), (128, 128), (128, 256), (256, 256), (256, 256),
             (256, 512), (512, 512), (512, 512), (512, 512), (512, 512), (512, 512)]
    per_block = [2, 2, 3, 3, 3]
    n = sum(per_block[:upto_block])
    return sum(9 * ci * co + co for ci, co in table[:n])


def resnet50_count(stage_units: dict[int, int]) -> int:
    """Bottleneck parameter count (conv kernel, bias and 4 batch-norm vectors per conv).

    ``stage_units`` maps stage -> number of units kept. Stages 2-4 put their
    stride (and hence a projection) on the last unit of the full stage.
    """
    full = {2: (64, 256, 3), 3: (128, 512, 4), 4: (256, 1024, 6), 5: (512, 2048, 3)}

    def conv(k, ci, co):
        return k * k * ci * co + co + 4 * co
    total = conv(7, 3, 64)
    c = 64
    for stage, kept in stage_units.items():
        inner, outer, units = full[stage]
        for u in range(kept):
            total += conv(1, c, inner) + conv(3, inner, inner) + conv(1, inner, outer)
            strided = u == units - 1 and stage < 5
            if c != outer or strided:
                total += conv(1, c, outer)
            c = outer
    return total


class TestShapes:
    @pytest.mark.parametrize("family,truncation,shape", TABLE_ROWS)
    def test_static_trace_matches_table(self, family, truncation, shape):
        spec = BackboneSpec.create(family, truncation)
        assert spec.output_shape == shape
        assert layer_shapes(spec)[-1][1] == shape

    @pytest.mark.parametrize("family", ["vgg16", "resnet50"])
    def test_sweep_forward(self, family):
        rows = dict(truncation_sweep(family))
        assert rows == TRUNCATION_SHAPES[family]

    def test_sweep_rejects_tiny(self):
        with pytest.raises(ValueError):
            truncation_sweep("tiny")

    def test_tiny_output(self, rng):
        bb = build_backbone(BackboneSpec.create("tiny"), 0)
        out = forward_features(bb, rng.uniform(size=(2, 32, 32, 3)).astype(np.float32))
        assert out.shape == (2, 4, 4, 64)

    def test_unknown_truncation(self):
        with pytest.raises(ValueError, match="block_9z"):
            BackboneSpec.create("resnet50", "block_9z")

    def test_resnet_defaults(self):
        assert BackboneSpec.create("resnet50").truncation == DEFAULT_TRUNCATION["resnet50"] == "block_4e"


class TestParameterCounts:
    def test_vgg16_block4(self):
        spec = BackboneSpec.create("vgg16", "block4_pool")
        n = sum(int(np.prod(s)) for s in spec.weight_shapes().values())
        assert n == vgg16_conv_count(4) == 7_635_264

    def test_resnet50_block_4e(self):
        spec = BackboneSpec.create("resnet50", "block_4e")
        n = sum(int(np.prod(s)) for s in spec.weight_shapes().values())
        assert n == resnet50_count({2: 3, 3: 4, 4: 5})

    def test_resnet50_block_5c(self):
        spec = BackboneSpec.create("resnet50", "block_5c")
        n = sum(int(np.prod(s)) for s in spec.weight_shapes().values())
        assert n == resnet50_count({2: 3, 3: 4, 4: 6, 5: 3})


class TestBuild:
    def test_frozen_and_read_only(self):
        bb = build_backbone(BackboneSpec.create("tiny"), 3)
        assert all(not p.trainable and not p.requires_grad for p in bb.parameters())
        with pytest.raises(ValueError):
            bb.parameters()[0].data[...] = 0

    def test_no_graph_through_backbone(self, rng):
        bb = build_backbone(BackboneSpec.create("tiny"), 0)
        out = bb.forward_features(rng.uniform(size=(1, 32, 32, 3)).astype(np.float32))
        assert out.node is None and not out.requires_grad

    def test_deterministic_and_batch_independent(self, rng):
        bb = build_backbone(BackboneSpec.create("tiny"), 0)
        img = rng.uniform(size=(32, 32, 3)).astype(np.float32)
        a = bb.forward_features(np.stack([img, img])).data
        np.testing.assert_array_equal(a[0], a[1])
        np.testing.assert_array_equal(a, bb.forward_features(np.stack([img, img])).data)

    def test_grayscale_replicated(self, rng):
        bb = build_backbone(BackboneSpec.create("tiny"), 0)
        gray = rng.uniform(size=(1, 32, 32, 1)).astype(np.float32)
        np.testing.assert_array_equal(bb.forward_features(gray).data,
                                      bb.forward_features(np.repeat(gray, 3, axis=3)).data)

    def test_wrong_input_size(self):
        bb = build_backbone(BackboneSpec.create("tiny"), 0)
        with pytest.raises(ValueError):
            bb.forward_features(np.zeros((1, 30, 30, 3), np.float32))

    def test_missing_kernel_names_layer(self):
        spec = BackboneSpec.create("vgg16", "block2_pool")
        store = seeded_weights(spec, 0)
        del store.entries["block2_conv1.kernel"]
        with pytest.raises(MissingWeightError, match="block2_conv1.kernel"):
            build_backbone(spec, store)

    def test_misshaped_weight(self):
        spec = BackboneSpec.create("tiny")
        store = seeded_weights(spec, 0)
        store["block1_conv1.bias"] = np.zeros(17, np.float32)
        with pytest.raises(MissingWeightError, match="block1_conv1.bias"):
            build_backbone(spec, store)

    def test_export_round_trip(self, rng):
        spec = BackboneSpec.create("tiny")
        a = build_backbone(spec, 5)
        b = build_backbone(spec, a.export_weights())
        x = rng.uniform(size=(1, 32, 32, 3)).astype(np.float32)
        np.testing.assert_array_equal(a.forward_features(x).data, b.forward_features(x).data)

    def test_seed_changes_weights(self):
        spec = BackboneSpec.create("tiny")
        w0, w1 = seeded_weights(spec, 0), seeded_weights(spec, 1)
        assert not np.array_equal(w0["block1_conv1.kernel"], w1["block1_conv1.kernel"])
        assert isinstance(w0, WeightStore)

    def test_batchnorm_identity_stats(self):
        spec = BackboneSpec.create("resnet50", "block_2c")
        store = seeded_weights(spec, 0)
        np.testing.assert_array_equal(store["conv1.bn.var"], 1.0)
        np.testing.assert_array_equal(store["conv1.bn.mean"], 0.0)
