import json

import numpy as np
import pytest

from sbvqa.errors import ManifestError
from sbvqa.manifest import DatasetManifest, ManifestEntry, load_manifest


def _write_jsonl(path, records, header=None):
    lines = ([json.dumps(header)] if header else []) + [json.dumps(r) for r in records]
    path.write_text("\n".join(lines) + "\n")


def test_jsonl_with_header(tmp_path):
    p = tmp_path / "m.jsonl"
    _write_jsonl(p, [{"id": "a", "video_path": "a.npy", "mos": 2.0, "split": "test", "clip": 3},
                     {"id": "b", "video_path": "b.npy", "mos": 4.0}], header={"mos_range": [1, 5]})
    m = load_manifest(p)
    assert m.mos_range == (1.0, 5.0)
    assert m.by_id()["a"].extra == {"clip": 3}
    assert m.by_id()["b"].split == "train"
    assert m.resolve(m.entries[0]) == tmp_path / "a.npy"


def test_csv_range_from_labels(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("id,video_path,mos,split\na,a.npy,1.5,train\nb,/abs/b.npy,3.5,test\n")
    m = load_manifest(p)
    assert m.mos_range == (1.5, 3.5)
    assert str(m.resolve(m.by_id()["b"])) == "/abs/b.npy"
    assert [e.id for e in m.split("test")] == ["b"]


def test_explicit_range_wins(tmp_path):
    p = tmp_path / "m.jsonl"
    _write_jsonl(p, [{"id": "a", "video_path": "a", "mos": 2}, {"id": "b", "video_path": "b", "mos": 3}],
                 header={"mos_range": [1, 5]})
    assert load_manifest(p, (0, 10)).mos_range == (0.0, 10.0)


def test_normalize_roundtrip():
    m = DatasetManifest([ManifestEntry("a", "a", 2.0)], (1.0, 5.0))
    x = np.array([1.0, 2.2, 5.0])
    np.testing.assert_allclose(m.denormalize(m.normalize(x)), x, atol=1e-12)
    np.testing.assert_allclose(m.normalize([1.0, 3.0, 5.0]), [0, 0.5, 1])


def test_save_load_roundtrip(tmp_path):
    m = DatasetManifest([ManifestEntry("a", "a.npy", 2.0, "val", {"k": 1}),
                         ManifestEntry("b", "b.npy", 3.0, "test")], (1.0, 5.0))
    m.save(tmp_path / "m.jsonl")
    back = load_manifest(tmp_path / "m.jsonl")
    assert back.mos_range == m.mos_range
    assert [e.to_dict() for e in back.entries] == [e.to_dict() for e in m.entries]


@pytest.mark.parametrize("records", [
    [{"id": "a", "video_path": "a", "mos": 1}, {"id": "a", "video_path": "b", "mos": 2}],
    [{"id": "a", "video_path": "a", "mos": 1, "split": "dev"}],
    [{"id": "a", "video_path": "a"}],
    [{"id": "a", "video_path": "a", "mos": "good"}],
])
def test_invalid_manifests(tmp_path, records):
    p = tmp_path / "m.jsonl"
    _write_jsonl(p, records, header={"mos_range": [0, 5]})
    with pytest.raises(ManifestError):
        load_manifest(p)


def test_out_of_range_and_missing(tmp_path):
    p = tmp_path / "m.jsonl"
    _write_jsonl(p, [{"id": "a", "video_path": "a", "mos": 7}], header={"mos_range": [1, 5]})
    with pytest.raises(ManifestError):
        load_manifest(p)
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "none.jsonl")
    (tmp_path / "bad.csv").write_text("name,mos\nx,1\n")
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "bad.csv")
