import pytest

from pcad.errors import DataError
from pcad.manifest import HEADER, DatasetManifest, ManifestRow


def test_row_invariants():
    with pytest.raises(DataError):
        ManifestRow("a", "c", "val", "normal", "none", "x")
    with pytest.raises(DataError):
        ManifestRow("a", "c", "train", "normal", "scar", "x")
    with pytest.raises(DataError):
        ManifestRow("a", "c", "test", "anomalous", "dent", "x")
    with pytest.raises(DataError, match="duplicate"):
        DatasetManifest([ManifestRow("a", "c", "train", "normal", "none", "x")] * 2)


def test_read_write_and_paths(tmp_path):
    (tmp_path / "c").mkdir()
    (tmp_path / "c" / "n.xyz").write_text("0 0 0\n")
    (tmp_path / "c" / "s.xyz").write_text("0 0 0\n")
    (tmp_path / "c" / "s.labels").write_text("1\n")
    m = DatasetManifest([
        ManifestRow("n", "c", "train", "normal", "none", "c/n.xyz"),
        ManifestRow("s", "c", "test", "anomalous", "scar", "c/s.xyz", "c/s.labels"),
    ], tmp_path)
    m.write(tmp_path / "manifest.tsv")
    text = (tmp_path / "manifest.tsv").read_text()
    assert text.splitlines()[0] == "\t".join(HEADER)
    # empty label_path is written as a trailing empty column
    assert text.splitlines()[1].endswith("c/n.xyz\t")
    back = DatasetManifest.read(tmp_path / "manifest.tsv")
    assert back.rows == m.rows
    back.validate(seen_kinds={"convex"})
    (tmp_path / "c" / "s.labels").unlink()
    with pytest.raises(DataError, match="'s'.*missing label"):
        back.validate()


def test_read_errors(tmp_path):
    p = tmp_path / "m.tsv"
    with pytest.raises(DataError, match="not found"):
        DatasetManifest.read(p)
    p.write_text("id\tcat\n")
    with pytest.raises(DataError, match="header"):
        DatasetManifest.read(p)
    p.write_text("\t".join(HEADER) + "\nx\tc\ttrain\n")
    with pytest.raises(DataError, match=":2:"):
        DatasetManifest.read(p)
