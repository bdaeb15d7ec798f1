import numpy as np
import pytest

from ackd import nn_blocks as nb
from ackd import tensor_core as tc

SMALL = nb.ArchSpec(stage_count=3, blocks_per_stage=2, base_width=16, class_count=10)
BIG = nb.ArchSpec(stage_count=3, blocks_per_stage=4, base_width=32, class_count=10)


def tiny_arch(**kw):
    defaults = dict(stage_count=2, blocks_per_stage=1, base_width=4,
                    class_count=3, in_channels=1, image_size=8)
    defaults.update(kw)
    return nb.ArchSpec(**defaults)


class TestBranchSpec:
    @pytest.mark.parametrize("text,n,m", [("D3B1", 3, 1), ("D2B2", 2, 2), ("D1B3", 1, 3)])
    def test_parse(self, text, n, m):
        s = nb.BranchSpec.parse(text)
        assert (s.attach_stage, s.depth) == (n, m)
        assert str(s) == text

    @pytest.mark.parametrize("bad", ["D0B1", "D1B0", "B1D1", "D1", "x"])
    def test_rejects_malformed(self, bad):
        with pytest.raises(ValueError):
            nb.BranchSpec.parse(bad)


class TestBuildBackbone:
    def test_direct_construction(self):
        m = nb.build_backbone(SMALL, rng=0)
        assert len(m.downsamples) == 3
        assert len(m.stages) == 3
        assert m.head.w.shape[1] == 10
        x = tc.Tensor(np.zeros((2, 1, 16, 16), dtype=np.float32))
        assert m.forward(x).shape == (2, 10)

    def test_teacher_strictly_larger_than_student(self):
        assert nb.build_backbone(BIG, rng=0).param_count() > \
            nb.build_backbone(SMALL, rng=0).param_count()

    def test_param_count_monotone(self):
        base = nb.build_backbone(SMALL, rng=0).param_count()
        deeper = nb.build_backbone(
            nb.ArchSpec(3, 3, 16, 10), rng=0).param_count()
        wider = nb.build_backbone(
            nb.ArchSpec(3, 2, 24, 10), rng=0).param_count()
        assert deeper > base and wider > base

    def test_param_count_matches_hand_summed_layer_shapes(self):
        # independently re-sum the layer shapes of {3, 2, 16, 10}
        w1, w2, w3 = 16, 32, 64
        expected = (
            1 * w1 * 9                      # stem 1->16, 3x3
            + w1 * w1 * 9                   # ds1
            + 2 * (2 * w1 * w1 * 9)         # stage 1: 2 blocks x 2 convs
            + w1 * w2 * 9                   # ds2
            + 2 * (2 * w2 * w2 * 9)         # stage 2
            + w2 * w3 * 9                   # ds3
            + 2 * (2 * w3 * w3 * 9)         # stage 3
            + w3 * 10 + 10                  # head weight + bias
        )
        assert nb.build_backbone(SMALL, rng=0).param_count() == expected

    def test_rejects_descriptor_exhausting_spatial_extent(self):
        with pytest.raises(ValueError):
            nb.ArchSpec(stage_count=5, blocks_per_stage=1, base_width=4,
                        class_count=2, image_size=8)

    def test_unique_parameter_names(self):
        m = nb.build_backbone(SMALL, rng=0)
        assert len(m.params) == len(set(m.params))

    def test_forward_deterministic(self):
        rng = np.random.default_rng(5)
        x = tc.Tensor(rng.standard_normal((2, 1, 16, 16)).astype(np.float32))
        a = nb.build_backbone(SMALL, rng=7).forward(x).data
        b = nb.build_backbone(SMALL, rng=7).forward(x).data
        assert np.array_equal(a, b)


class TestAttach:
    def test_table6_style_pair(self):
        backbone = nb.build_backbone(tiny_arch(stage_count=3, image_size=16), rng=0)
        ens = nb.attach_auxiliary_learners(backbone, ["D3B1", "D2B2"], rng=1)
        assert len(ens.branches) == 2
        assert ens.branches[0].spec == nb.BranchSpec(3, 1)
        assert len(ens.branches[0].blocks) == 1
        assert len(ens.branches[0].transitions) == 0
        assert ens.branches[1].spec == nb.BranchSpec(2, 2)
        assert len(ens.branches[1].blocks) == 2
        assert len(ens.branches[1].transitions) == 1

    def test_identical_specs_independent_parameters(self):
        backbone = nb.build_backbone(tiny_arch(), rng=0)
        ens = nb.attach_auxiliary_learners(backbone, ["D1B3", "D1B3"], rng=1)
        p1 = dict(ens.branches[0].params())
        p2 = dict(ens.branches[1].params())
        assert len(p1) == len(p2)
        k1 = [k for k in p1 if k.endswith("b1.c1.w")][0]
        k2 = [k for k in p2 if k.endswith("b1.c1.w")][0]
        assert p1[k1].shape == p2[k2].shape
        assert not np.array_equal(p1[k1].data, p2[k2].data)

    def test_empty_specs_degenerates_to_backbone(self):
        backbone = nb.build_backbone(tiny_arch(), rng=0)
        ens = nb.attach_auxiliary_learners(backbone, [], rng=1)
        assert ens.branches == []
        assert ens.param_count() == backbone.param_count()

    def test_branch_heads_output_class_count(self):
        backbone = nb.build_backbone(tiny_arch(), rng=0)
        ens = nb.attach_auxiliary_learners(backbone, ["D1B1", "D2B1"], rng=1)
        x = tc.Tensor(np.zeros((4, 1, 8, 8), dtype=np.float32))
        out = ens.forward(x)
        for z in out.branch_logits:
            assert z.shape == (4, 3)
        # all branch features reach the deepest width and extent
        for f in out.branch_features:
            assert f.shape == (4, 8, 2, 2)

    def test_attach_stage_out_of_range(self):
        backbone = nb.build_backbone(tiny_arch(), rng=0)
        with pytest.raises(ValueError):
            nb.attach_auxiliary_learners(backbone, ["D5B1"], rng=1)

    def test_branch_independence(self):
        rng = np.random.default_rng(3)
        backbone = nb.build_backbone(tiny_arch(), rng=0)
        ens = nb.attach_auxiliary_learners(backbone, ["D1B1", "D2B1"], rng=1)
        x = tc.Tensor(rng.standard_normal((2, 1, 8, 8)).astype(np.float32))
        before = ens.forward(x)
        # perturb branch 1's parameters only
        for name, p in ens.branches[0].params():
            p.data = p.data + 0.5
        after = ens.forward(x)
        assert not np.array_equal(before.branch_logits[0].data, after.branch_logits[0].data)
        assert np.array_equal(before.branch_logits[1].data, after.branch_logits[1].data)
        assert np.array_equal(before.target_logits.data, after.target_logits.data)

    def test_shared_gradient_flow_stops_above_attach_point(self):
        rng = np.random.default_rng(3)
        backbone = nb.build_backbone(tiny_arch(), rng=0)
        ens = nb.attach_auxiliary_learners(backbone, ["D1B1"], rng=1)
        x = tc.Tensor(rng.standard_normal((2, 1, 8, 8)).astype(np.float32))
        out = ens.forward(x)
        loss = (out.branch_logits[0] * out.branch_logits[0]).sum()
        grads = tc.grad(loss, list(ens.params.values()))
        by_name = {n: grads[p].data for n, p in ens.params.items()}
        assert np.abs(by_name["stem.w"]).max() > 0
        assert np.abs(by_name["ds1.w"]).max() > 0
        # stage-1 blocks sit after the D1 tap: no gradient from a branch loss
        assert np.abs(by_name["s1b1.c1.w"]).max() == 0
        assert np.abs(by_name["ds2.w"]).max() == 0
        assert np.abs(by_name["head.w"]).max() == 0


class TestStrip:
    def test_parameter_count_equals_bare_backbone(self):
        backbone = nb.build_backbone(tiny_arch(), rng=0)
        bare_count = backbone.param_count()
        ens = nb.attach_auxiliary_learners(backbone, ["D1B2", "D2B1"], rng=1)
        assert ens.param_count() > bare_count
        stripped = nb.strip_auxiliaries(ens)
        assert stripped.param_count() == bare_count

    def test_logits_bit_identical_to_target_path(self):
        rng = np.random.default_rng(9)
        backbone = nb.build_backbone(tiny_arch(), rng=0)
        ens = nb.attach_auxiliary_learners(backbone, ["D1B1", "D2B2"], rng=1)
        stripped = nb.strip_auxiliaries(ens)
        for _ in range(10):
            x = tc.Tensor(rng.standard_normal((3, 1, 8, 8)).astype(np.float32))
            assert np.array_equal(ens.forward(x).target_logits.data,
                                  stripped.forward(x).data)

    def test_strip_of_empty_ensemble_is_identity(self):
        backbone = nb.build_backbone(tiny_arch(), rng=0)
        ens = nb.attach_auxiliary_learners(backbone, [], rng=1)
        assert nb.strip_auxiliaries(ens) is backbone

    def test_strip_parameter_lossless(self):
        backbone = nb.build_backbone(tiny_arch(), rng=0)
        snapshot = {n: p.data.copy() for n, p in backbone.params.items()}
        ens = nb.attach_auxiliary_learners(backbone, ["D1B1"], rng=1)
        stripped = nb.strip_auxiliaries(ens)
        for n, p in stripped.params.items():
            assert np.array_equal(p.data, snapshot[n])


class TestCheckpoint:
    def test_model_roundtrip_bit_exact(self, tmp_path):
        m = nb.build_backbone(tiny_arch(), rng=11)
        path = tmp_path / "model.ckpt"
        nb.save_model(path, m)
        loaded = nb.load_model(path)
        assert loaded.arch == m.arch
        for n, p in m.params.items():
            assert np.array_equal(loaded.params[n].data, p.data)

    def test_ensemble_roundtrip_keeps_branch_specs(self, tmp_path):
        backbone = nb.build_backbone(tiny_arch(), rng=11)
        ens = nb.attach_auxiliary_learners(backbone, ["D1B2", "D2B1"], rng=3)
        path = tmp_path / "ens.ckpt"
        nb.save_ensemble(path, ens)
        loaded = nb.load_ensemble(path)
        assert loaded.specs == ens.specs
        for n, p in ens.params.items():
            assert np.array_equal(loaded.params[n].data, p.data)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            nb.load_checkpoint(path)

    def test_truncated_file_rejected(self, tmp_path):
        m = nb.build_backbone(tiny_arch(), rng=11)
        path = tmp_path / "model.ckpt"
        nb.save_model(path, m)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 8])
        with pytest.raises(ValueError, match="truncated"):
            nb.load_checkpoint(path)
