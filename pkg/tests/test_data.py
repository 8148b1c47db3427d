import hashlib
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from dpif.data import (MANIFEST_HEADER, ManifestEntry, ManifestError, ProtocolError,
                       SyntheticConfig, build_protocol, load_image, load_images, load_manifest,
                       standard_protocols, synth_generate, write_manifest)


def entry(sid, spectrum="visible", pose="frontal", yaw=0.0, cond="baseline", glasses=False,
          owner=False, path=None):
    path = path or f"{sid}/{spectrum}_{pose}_{yaw}_{cond}_{int(glasses)}.png"
    return ManifestEntry(sid, spectrum, pose, yaw, cond, glasses, path, owner)


def subject_entries(sid, owner):
    rows = [entry(sid), entry(sid, "thermal"), entry(sid, "thermal", "off_pose", 45.0, "pose"),
            entry(sid, "thermal", "frontal", 0.0, "expression")]
    if owner:
        rows += [entry(sid, glasses=True, owner=True), entry(sid, "thermal", glasses=True, owner=True),
                 entry(sid, "thermal", "off_pose", -30.0, "pose", glasses=True, owner=True)]
        rows = [ManifestEntry(**{**e.__dict__, "glasses_owner": True}) for e in rows]
    return rows


@pytest.fixture
def manifest():
    return subject_entries("a", False) + subject_entries("b", True) + subject_entries("c", False)


@pytest.fixture(scope="module")
def small_synth(tmp_path_factory):
    cfg = SyntheticConfig(seed=3, num_subjects=6, test_subjects=2, images_per_cell=2)
    return cfg, synth_generate(cfg, tmp_path_factory.mktemp("synth"))


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class TestManifest:
    def test_round_trip(self, manifest, tmp_path):
        write_manifest(manifest, tmp_path / "m.csv")
        assert load_manifest(tmp_path / "m.csv") == manifest
        assert (tmp_path / "m.csv").read_text().splitlines()[0] == ",".join(MANIFEST_HEADER)

    @settings(max_examples=40, deadline=None)
    @given(st.one_of(st.none(), st.floats(-90, 90)), st.booleans(), st.booleans())
    def test_round_trip_fields(self, yaw, owner, glasses):
        import tempfile
        e = ManifestEntry("s", "thermal", "off_pose", yaw, "pose", glasses and owner, "x.pgm",
                          owner)
        with tempfile.TemporaryDirectory() as d:
            write_manifest([e], Path(d) / "m.csv")
            assert load_manifest(Path(d) / "m.csv") == [e]

    def test_empty_file(self, tmp_path):
        (tmp_path / "m.csv").write_text("")
        assert load_manifest(tmp_path / "m.csv") == []

    @pytest.mark.parametrize("row,match", [
        ("x.png,s1,thermal,off_pose,95,pose,0,0", "yaw"),
        ("x.png,s1,infrared,off_pose,30,pose,0,0", "spectrum"),
        ("x.png,s1,visible,frontal,40,baseline,0,0", "frontal"),
        ("x.png,s1,visible,frontal,abc,baseline,0,0", "not a number"),
        ("x.png,s1,visible,frontal,0,baseline,1,0", "glasses"),
        ("x.png,s1,visible,frontal,0", "fields"),
    ])
    def test_bad_rows_name_line(self, tmp_path, row, match):
        ok = "ok.png,s1,visible,frontal,0,baseline,0,0"
        (tmp_path / "m.csv").write_text(",".join(MANIFEST_HEADER) + f"\n{ok}\n{row}\n")
        with pytest.raises(ManifestError, match=f":3: .*{match}"):
            load_manifest(tmp_path / "m.csv")

    def test_duplicate_path(self, tmp_path):
        row = "x.png,s1,visible,frontal,0,baseline,0,0"
        (tmp_path / "m.csv").write_text(",".join(MANIFEST_HEADER) + f"\n{row}\n{row}\n")
        with pytest.raises(ManifestError, match="duplicate path"):
            load_manifest(tmp_path / "m.csv")

    def test_bad_header(self, tmp_path):
        (tmp_path / "m.csv").write_text("a,b,c\n")
        with pytest.raises(ManifestError, match="header"):
            load_manifest(tmp_path / "m.csv")


class TestProtocols:
    def test_probe_and_gallery_semantics(self, manifest):
        specs = [s for s in standard_protocols(None, None) if s.role != "train"]
        splits = build_protocol(manifest, specs)
        tp0 = splits["P_TP0"]
        assert tp0 and all(e.spectrum == "thermal" and e.pose_class == "off_pose"
                           and not e.glasses_owner for e in tp0)
        assert {e.subject_id for e in tp0} == {"a", "c"}
        assert {e.subject_id for e in splits["P_TP-"]} == {"b"}
        assert all(not e.glasses for e in splits["P_TP-"])
        assert all(e.glasses for e in splits["P_TB+"])
        for name in ("G_VB0-", "G_VB0+"):
            assert all(e.spectrum == "visible" and e.pose_class == "frontal"
                       and e.condition == "baseline" for e in splits[name])
        assert not any(e.glasses for e in splits["G_VB0-"])
        assert any(e.glasses for e in splits["G_VB0+"])
        assert all(e.condition == "expression" for e in splits["P_TE0"])

    def test_subject_restriction(self, manifest):
        splits = build_protocol(manifest, standard_protocols(["a"], ["b", "c"]))
        assert {e.subject_id for e in splits["train_thermal_offpose"]} == {"a"}
        assert {e.subject_id for e in splits["G_VB0-"]} == {"b", "c"}

    def test_overlap_is_error(self, manifest):
        with pytest.raises(ProtocolError, match="b"):
            build_protocol(manifest, standard_protocols(["a", "b"], ["b", "c"]))

    def test_duplicate_names(self, manifest):
        specs = standard_protocols(["a"], ["b"])
        with pytest.raises(ProtocolError, match="duplicate"):
            build_protocol(manifest, specs + specs[:1])


class TestImages:
    def test_gray_replicated_and_scaled(self, tmp_path):
        arr = np.zeros((224, 224), np.uint8)
        arr[0, 0] = 255
        arr[5, 7] = 51
        Image.fromarray(arr).save(tmp_path / "t.pgm")
        img = load_image(tmp_path / "t.pgm", 224)
        assert img.shape == (224, 224, 3) and img.dtype == np.float32
        assert img[0, 0, 0] == 1.0 and img[5, 7, 2] == pytest.approx(0.2)
        np.testing.assert_array_equal(img[..., 0], img[..., 2])
        np.testing.assert_array_equal(img, load_image(tmp_path / "t.pgm", 224))

    def test_wrong_size(self, tmp_path):
        Image.fromarray(np.zeros((20, 30, 3), np.uint8)).save(tmp_path / "v.ppm")
        with pytest.raises(ValueError, match="30x20"):
            load_image(tmp_path / "v.ppm", 32)
        assert load_image(tmp_path / "v.ppm", 32, resize=True).shape == (32, 32, 3)

    def test_decode_failure(self, tmp_path):
        (tmp_path / "bad.ppm").write_bytes(b"not an image")
        with pytest.raises(ValueError, match="cannot decode"):
            load_image(tmp_path / "bad.ppm")

    def test_standardize(self, rng, tmp_path):
        Image.fromarray(rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)).save(tmp_path / "v.ppm")
        img = load_image(tmp_path / "v.ppm", standardize=True)
        np.testing.assert_allclose(img.mean(axis=(0, 1)), 0, atol=1e-6)
        np.testing.assert_allclose(img.std(axis=(0, 1)), 1, atol=1e-5)


class TestSynthetic:
    def test_default_count(self, tmp_path):
        ds = synth_generate(SyntheticConfig(), tmp_path)
        assert len(ds.manifest) == 20 * 5 * 2 == 200
        assert len(list(tmp_path.rglob("*.p?m"))) == 200
        assert load_manifest(tmp_path / "manifest.csv") == ds.manifest

    def test_byte_identical(self, tmp_path):
        cfg = SyntheticConfig(seed=11, num_subjects=3, test_subjects=1)
        synth_generate(cfg, tmp_path / "a")
        synth_generate(cfg, tmp_path / "b")
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
        synth_generate(SyntheticConfig(seed=12, num_subjects=3, test_subjects=1), tmp_path / "c")
        assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "c")

    def test_split_disjoint_and_paired(self, small_synth):
        _, ds = small_synth
        assert not set(ds.train_subjects) & set(ds.test_subjects)
        assert len(ds.test_subjects) == 2
        train = load_manifest(ds.root / "train.csv")
        vis = {(e.subject_id, e.yaw_degrees) for e in train if e.spectrum == "visible"}
        th = {(e.subject_id, e.yaw_degrees) for e in train if e.spectrum == "thermal"}
        assert vis == th
        assert all((e.pose_class == "frontal") == (e.yaw_degrees == 0) for e in train)

    def test_unwritable(self, tmp_path):
        (tmp_path / "f").write_text("")
        with pytest.raises(OSError):
            synth_generate(SyntheticConfig(num_subjects=2, test_subjects=1), tmp_path / "f" / "x")

    @pytest.mark.parametrize("kw", [dict(num_subjects=1), dict(test_subjects=20),
                                    dict(yaw_grid=(0.0, 95.0)), dict(images_per_cell=0)])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            SyntheticConfig(**kw)

    def test_config_round_trip(self):
        cfg = SyntheticConfig(seed=4, yaw_grid=(-45.0, 0.0, 45.0))
        assert SyntheticConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ValueError, match="bogus"):
            SyntheticConfig.from_dict({"bogus": 1})

    def test_raw_pixel_domain_gap(self, small_synth):
        """Visible renders match their own subject; thermal against visible does worse."""
        _, ds = small_synth
        m = ds.manifest

        def pick(spectrum, k):
            rows = [e for e in m if e.spectrum == spectrum and e.yaw_degrees == 0
                    and e.path.endswith(f"_{k}.{'ppm' if spectrum == 'visible' else 'pgm'}")]
            x = load_images(rows, root=ds.root).reshape(len(rows), -1)
            x = x - x.mean(axis=1, keepdims=True)
            return x / np.linalg.norm(x, axis=1, keepdims=True), [e.subject_id for e in rows]

        gallery, gid = pick("visible", 0)
        accuracy = {}
        for spectrum in ("visible", "thermal"):
            probe, pid = pick(spectrum, 1)
            best = np.argmax(probe @ gallery.T, axis=1)
            accuracy[spectrum] = np.mean([gid[j] == p for j, p in zip(best, pid)])
        chance = 1 / len(gid)
        assert accuracy["visible"] > chance
        assert accuracy["thermal"] < accuracy["visible"]
