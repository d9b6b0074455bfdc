# tests/test_export.py
import numpy as np
import pytest

from jointdiff.tools.export import export_image, read_pgm, read_tsv, to_gray, write_tsv


def _payload(path, side):
    return path.read_bytes()[-side * side:]


def test_gray_levels():
    assert to_gray(np.array([-1.0, 0.0, 1.0])).tolist() == [0, 128, 255]


@pytest.mark.parametrize("value,byte", [(-1.0, 0), (1.0, 255), (0.0, 128)])
def test_constant_images(value, byte, tmp_path):
    path = tmp_path / "img.pgm"
    export_image(np.full((4, 4), value), path)
    assert path.read_bytes().startswith(b"P5\n4 4\n255\n")
    assert set(_payload(path, 4)) == {byte}


def test_reimport_within_one_level(rng, tmp_path):
    grid = rng.uniform(-1, 1, (16, 16))
    path = tmp_path / "img.pgm"
    export_image(grid, path)
    assert np.max(np.abs(read_pgm(path) - grid)) <= 1 / 255 + 1e-12


def test_export_rejects_bad_grids(tmp_path):
    with pytest.raises(ValueError):
        export_image(np.zeros(4), tmp_path / "a.pgm")
    with pytest.raises(ValueError):
        export_image(np.full((2, 2), np.nan), tmp_path / "b.pgm")


def test_png_export(tmp_path):
    pytest.importorskip("matplotlib")
    written = export_image(np.zeros((4, 4)), tmp_path / "img.pgm", png=True)
    assert [p.suffix for p in written] == [".pgm", ".png"]
    assert (tmp_path / "img.png").exists()


def test_tsv_roundtrip(tmp_path):
    rows = [{"subject": 3, "prediction": 41.5, "samples": [40.0, 43.0]}]
    path = write_tsv(rows, tmp_path / "sub" / "p.tsv")
    assert path.read_text().splitlines()[0] == "subject\tprediction\tsamples"
    assert read_tsv(path) == [{"subject": "3", "prediction": "41.5", "samples": "40.0,43.0"}]
