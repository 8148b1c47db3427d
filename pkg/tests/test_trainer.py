from collections import Counter

import numpy as np
import pytest

from dpif.data import ManifestEntry, SyntheticConfig, load_manifest, synth_generate
from dpif.head import CLASSIFIER
from dpif.trainer import (PairedBatch, PairSampler, Trainer, TrainConfig, build_model,
                          load_checkpoint, pair_sampler, train_phase1, train_phase2)
from dpif.weights import load_weight_store

BASE = TrainConfig(family="tiny", truncation="block3_pool", embedding_size=16, phase1_epochs=3,
                   phase2_epochs=4, batch_size=8, normalize_inputs=True, f_width=12)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    cfg = SyntheticConfig(seed=5, num_subjects=7, test_subjects=2, images_per_cell=3)
    ds = synth_generate(cfg, tmp_path_factory.mktemp("synth"))
    return ds.root, load_manifest(ds.root / "train.csv")


def make_trainer(dataset, config=BASE, **kw):
    root, train = dataset
    classes = sorted({e.subject_id for e in train})
    return Trainer(build_model(config, len(classes)), config, train, root, **kw)


def head_arrays(trainer):
    return {k: v.copy() for k, v in trainer.head.state_arrays().items()}


def fake(sid, spectrum, pose, k):
    yaw = 0.0 if pose == "frontal" else 45.0
    return ManifestEntry(sid, spectrum, pose, yaw, "baseline" if pose == "frontal" else "pose",
                         False, f"{sid}/{spectrum}{k}.png")


class TestPairSampler:
    @pytest.fixture
    def pools(self):
        thermal = [fake("a", "thermal", "off_pose", k) for k in range(3)]
        thermal += [fake("b", "thermal", "off_pose", k) for k in range(4)]
        visible = [fake("a", "visible", "frontal", k) for k in range(2)]
        visible += [fake("b", "visible", "frontal", 0)]
        return thermal, visible

    def test_each_thermal_once_and_paired(self, pools):
        thermal, visible = pools
        s = PairSampler(thermal, visible, ["a", "b"], seed=1, batch_size=3)
        for epoch in range(3):
            batches = list(s.epoch(epoch))
            seen = [t.path for b in batches for t in b.thermal]
            assert sorted(seen) == sorted(t.path for t in thermal)
            for b in batches:
                b.check_paired()
                assert all(v.pose_class == "frontal" for v in b.visible)
                np.testing.assert_array_equal(b.labels.argmax(axis=1),
                                              [["a", "b"].index(t.subject_id) for t in b.thermal])
        assert Counter(t.subject_id for b in s.epoch(0) for t in b.thermal)["a"] == 3

    def test_seeded(self, pools):
        thermal, visible = pools

        def paths(seed, epoch):
            s = PairSampler(thermal, visible, ["a", "b"], seed=seed, batch_size=4)
            return [(t.path, v.path) for b in s.epoch(epoch) for t, v in zip(b.thermal, b.visible)]
        assert paths(2, 0) == paths(2, 0)
        assert paths(2, 0) != paths(3, 0)
        assert paths(2, 0) != paths(2, 1)

    def test_partner_redrawn(self, pools):
        thermal, visible = pools
        s = PairSampler(thermal, visible, ["a", "b"], seed=0, batch_size=8)
        partners = {v.path for e in range(10) for b in s.epoch(e)
                    for t, v in zip(b.thermal, b.visible) if t.subject_id == "a"}
        assert len(partners) == 2

    def test_missing_modality_named(self, pools):
        thermal, visible = pools
        with pytest.raises(ValueError, match="'b'"):
            PairSampler(thermal, visible[:2], ["a", "b"], seed=0)
        with pytest.raises(ValueError, match="'c'"):
            PairSampler(thermal, visible + [fake("c", "visible", "frontal", 0)], ["a", "b", "c"], 0)

    def test_unpaired_batch(self, pools):
        thermal, visible = pools
        batch = PairedBatch([thermal[0]], [visible[-1]], np.eye(2)[:1])
        with pytest.raises(ValueError, match="row 0"):
            batch.check_paired()

    def test_generator_over_manifest(self, pools):
        thermal, visible = pools
        batches = list(pair_sampler(thermal + visible, seed=0, batch_size=5, epochs=2))
        assert sum(len(b.thermal) for b in batches) == 2 * len(thermal)


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.phase1_epochs, c.phase2_epochs, c.lam, c.embedding_size) == (5, 100, 1e-5, 256)
        assert (c.optimizer, c.lr, c.batch_size) == ("adam", 1e-3, 32)

    def test_round_trip(self):
        c = BASE.replace(activations="relu-tanh")
        assert c.activations == ("relu", "tanh")
        assert TrainConfig.from_dict(c.to_dict()) == c

    @pytest.mark.parametrize("kw", [dict(phase1_epochs=0), dict(lam=-1.0), dict(batch_size=0),
                                    dict(optimizer="rmsprop"), dict(truncation="nope"),
                                    dict(dtype="int8")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            BASE.replace(**kw)

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="colour"):
            TrainConfig.from_dict({"colour": 1})


class TestTraining:
    def test_phase1_learns(self, dataset):
        cfg = BASE.replace(phase1_epochs=10)
        t = make_trainer(dataset, cfg)
        t.run(max_epochs=cfg.phase1_epochs)
        assert t.state.phase == 2
        assert not t.head.classifier_trainable
        logits = t.head.classify(t.head.embed_visible_features(t.features(t.frontal))).data
        truth = [t.class_index[e.subject_id] for e in t.frontal]
        assert np.mean(logits.argmax(axis=1) == truth) > 1 / len(t.classes)

    def test_freeze_discipline(self, dataset):
        t = make_trainer(dataset)
        t.run(max_epochs=BASE.phase1_epochs)
        before = head_arrays(t)
        backbone = [p.data.copy() for p in t.model.backbone.parameters()]
        t.run()
        assert t.done
        after = head_arrays(t)
        for name in ("classifier.weight", "classifier.bias"):
            assert after[name].tobytes() == before[name].tobytes()
        for n in ("f1.kernel", "f2.kernel", "f3.kernel", "g1.kernel", "g2.kernel"):
            assert not np.array_equal(after[n], before[n]), n
        assert not np.array_equal(after["compress.kernel"], before["compress.kernel"])
        for b, p in zip(backbone, t.model.backbone.parameters()):
            assert b.tobytes() == p.data.tobytes()

    def test_deterministic(self, dataset):
        a, b = make_trainer(dataset), make_trainer(dataset)
        a.run()
        b.run()
        assert a.state.history == b.state.history
        for k, v in head_arrays(a).items():
            assert v.tobytes() == b.head.params[k].data.tobytes()

    def test_resume_bit_exact(self, dataset, tmp_path):
        straight = make_trainer(dataset)
        straight.run()
        straight.save_checkpoint(tmp_path / "straight.dpif")
        for k in (2, 3, 5):
            part = make_trainer(dataset)
            part.run(max_epochs=k)
            part.save_checkpoint(tmp_path / "part.dpif")
            resumed = make_trainer(dataset)
            resumed.restore(load_weight_store(tmp_path / "part.dpif"))
            resumed.run()
            resumed.save_checkpoint(tmp_path / "resumed.dpif")
            assert ((tmp_path / "resumed.dpif").read_bytes()
                    == (tmp_path / "straight.dpif").read_bytes()), k

    def test_load_checkpoint(self, dataset, tmp_path):
        t = make_trainer(dataset)
        t.run()
        t.save_checkpoint(tmp_path / "c.dpif")
        model, config, store = load_checkpoint(tmp_path / "c.dpif")
        assert config == BASE
        assert store.metadata["phase"] == 3 and store.metadata["classes"] == t.classes
        for k, v in head_arrays(t).items():
            np.testing.assert_array_equal(model.head.params[k].data, v)
        assert not model.head.classifier_trainable

    def test_zero_learning_rate(self, dataset):
        t = make_trainer(dataset, BASE.replace(lr=0.0))
        before = head_arrays(t)
        t.run()
        for k, v in head_arrays(t).items():
            assert v.tobytes() == before[k].tobytes()

    def test_joint_loss_halves(self, dataset):
        cfg = BASE.replace(phase1_epochs=5, phase2_epochs=30, embedding_size=64, f_width=200,
                           batch_size=16)
        t = make_trainer(dataset, cfg)
        t.run()
        p2 = [r for r in t.state.history if r["phase"] == 2]
        assert p2[-1]["loss"] <= 0.5 * p2[0]["loss"]
        assert all(np.isfinite(r["l_p"]) for r in p2)

    def test_log_file(self, dataset, tmp_path):
        t = make_trainer(dataset, log_path=tmp_path / "log.csv")
        t.run()
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == "phase,epoch,l_c,l_p,loss,wall_seconds"
        assert len(lines) == 1 + BASE.phase1_epochs + BASE.phase2_epochs
        assert lines[-1].startswith(f"2,{BASE.phase2_epochs},")

    def test_phase_helpers(self, dataset):
        root, train = dataset
        classes = sorted({e.subject_id for e in train})
        model = build_model(BASE, len(classes))
        train_phase1(model, train, BASE, root)
        frozen = model.head.params["classifier.weight"].data.copy()
        train_phase2(model, train, BASE, root)
        np.testing.assert_array_equal(model.head.params["classifier.weight"].data, frozen)
        assert set(model.head.select(CLASSIFIER)) and not model.head.classifier_trainable


class TestErrors:
    def test_empty(self, dataset):
        root, _ = dataset
        with pytest.raises(ValueError, match="empty"):
            train_phase1(build_model(BASE, 2), [], BASE, root)

    def test_single_identity(self, dataset):
        root, train = dataset
        one = [e for e in train if e.subject_id == train[0].subject_id]
        with pytest.raises(ValueError, match="two identities"):
            Trainer(build_model(BASE, 1), BASE, one, root)

    def test_class_count_mismatch(self, dataset):
        root, train = dataset
        with pytest.raises(ValueError, match="outputs"):
            Trainer(build_model(BASE, 3), BASE, train, root)

    def test_checkpoint_class_mismatch(self, dataset, tmp_path):
        t = make_trainer(dataset)
        store = t.checkpoint_store()
        store.metadata["classes"] = list(reversed(t.classes))
        with pytest.raises(ValueError, match="classes"):
            make_trainer(dataset).restore(store)
