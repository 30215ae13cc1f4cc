import numpy as np
import pytest

from rtatl.config import load_config
from rtatl.data.flow import write_flo
from rtatl.data.manifest import (DATA_ROOT_ENV, ManifestDataset, export_samples, parse_labels,
                                 read_manifest, write_manifest)
from rtatl.data.types import DataError


@pytest.fixture
def exported(tmp_path, synth_samples):
    return export_samples(synth_samples, tmp_path / "set"), synth_samples


def test_round_trip_through_disk(exported, synth_cfg):
    spec, hp = synth_cfg
    path, samples = exported
    data = ManifestDataset.from_file(path, spec, hp)
    assert len(data) == len(samples)
    assert data.subjects == ["S000", "S001"]
    for orig, back in zip(samples, data):
        assert back.subject_id == orig.subject_id and back.frame_index == orig.frame_index
        np.testing.assert_array_equal(back.labels, orig.labels)
        # 8-bit storage, then a (near-identity) re-alignment
        assert np.abs(back.image - orig.image).max() < 0.01
        np.testing.assert_allclose(back.landmarks, orig.landmarks, atol=1e-3)
        assert (back.flow_target is None) == (orig.flow_target is None)
        if orig.flow_target is not None:
            np.testing.assert_array_equal(back.flow_target, orig.flow_target)


def test_subset_and_slicing(exported, synth_cfg):
    spec, hp = synth_cfg
    data = ManifestDataset.from_file(exported[0], spec, hp)
    sub = data.subset(["S001"])
    assert len(sub) == 4 and sub.subjects == ["S001"]
    assert [s.frame_index for s in sub[1:3]] == [1, 2]


def test_missing_manifest(tmp_path, synth_cfg):
    with pytest.raises(FileNotFoundError):
        read_manifest(tmp_path / "nope.csv", synth_cfg[0])


def test_missing_column(tmp_path, synth_cfg):
    (tmp_path / "m.csv").write_text("path,subject_id,labels\nx.png,S,\n")
    with pytest.raises(DataError, match="frame_index"):
        read_manifest(tmp_path / "m.csv", synth_cfg[0])


def test_label_parsing(bp4d_cfg):
    spec, _ = bp4d_cfg
    assert parse_labels("", spec) is None
    np.testing.assert_array_equal(parse_labels("1;0;0;0;0;0;0;0;0;0;0;1", spec), [1] + [0] * 10 + [1])
    with pytest.raises(DataError, match="expected 12"):
        parse_labels("1;0", spec)
    with pytest.raises(DataError, match="0 or 1"):
        parse_labels("2;0;0;0;0;0;0;0;0;0;0;1", spec)
    with pytest.raises(DataError, match="integers"):
        parse_labels("a;0;0;0;0;0;0;0;0;0;0;1", spec)


def test_intensities_are_binarized_for_disfa():
    spec, _ = load_config("disfa.cfg")
    np.testing.assert_array_equal(parse_labels("0;1;2;3;4;5;1;0", spec), [0, 0, 1, 1, 1, 1, 0, 0])
    with pytest.raises(DataError):
        parse_labels("0;1;2;3;4;6;1;0", spec)


def test_data_root_prefix(tmp_path, exported, synth_cfg, monkeypatch):
    spec, _ = synth_cfg
    path, samples = exported
    elsewhere = tmp_path / "manifests"
    elsewhere.mkdir()
    (elsewhere / "m.csv").write_text(path.read_text())
    monkeypatch.setenv(DATA_ROOT_ENV, str(path.parent))
    rows = read_manifest(elsewhere / "m.csv", spec)
    assert all(r.path.parent == path.parent and r.path.is_file() for r in rows)
    monkeypatch.delenv(DATA_ROOT_ENV)
    assert read_manifest(elsewhere / "m.csv", spec)[0].path.parent == elsewhere


def test_missing_landmarks(exported, synth_cfg):
    spec, hp = synth_cfg
    path, _ = exported
    (path.parent / "S000_00000.txt").unlink()
    with pytest.raises(DataError, match="landmark"):
        ManifestDataset.from_file(path, spec, hp)[0]


def test_flow_pair_without_file_or_provider(exported, synth_cfg):
    spec, hp = synth_cfg
    path, _ = exported
    (path.parent / "S000_00000.flo").unlink()
    data = ManifestDataset.from_file(path, spec, hp)
    with pytest.raises(DataError, match="S000_00000.png -> S000_00003.png"):
        data[0]
    calls = []

    def provider(a, b):
        calls.append(1)
        return np.zeros(a.shape[:2] + (2,), np.float32)

    data = ManifestDataset.from_file(path, spec, hp, provider=provider)
    assert data[0].flow_target.shape == (hp.aligned_size, hp.aligned_size, 2) and calls
    assert ManifestDataset.from_file(path, spec, hp, with_flow=False)[0].flow_target is None


def test_unlabeled_rows(tmp_path, synth_cfg):
    spec, hp = synth_cfg
    from rtatl.data.synth import synth_dataset
    path = export_samples(synth_dataset(3, 1, 2, spec, size=hp.aligned_size, labeled=False), tmp_path)
    rows = read_manifest(path, spec)
    assert all(r.labels is None for r in rows)
    assert "S000_00000.png,S000,0,\n" in path.read_text().replace("\r\n", "\n")
