"""Writer round trips, recipe validation, CLI behavior, golden bytes."""

import json
from pathlib import Path

import numpy as np
import pytest
from scipy.io import savemat

from hsif_convert.cli import main
from hsif_convert.hsif import HsifError, read_hsif, synthesize, write_hsif
from hsif_convert.recipes import BUILTIN, SceneRecipe, load_recipe

# frozen bytes of synthesize(2, 2, 3, 2, seed=42); the classifier package
# ships the same file as its test fixture
GOLDEN_HEX = (
    "4853494601000200000002000000030000000200000030c9b63dacb4e03e4004"
    "b03d08e0c03dfb21463f2cb4dd3eb686323f53c7063fff91273f12cd5b3f044e"
    "4e3e62c2793f00000100020000000700636c6173735f310700636c6173735f32"
    "e88f170e"
)


def toy_mat_scene(tmp_path, h=4, w=5, v=3, c=2):
    """Small .mat pair plus a matching recipe JSON."""
    rng = np.random.default_rng(0)
    data = (rng.random((h, w, v)) * 1000).astype(np.uint16)
    labels = (np.arange(h * w).reshape(h, w) % (c + 1)).astype(np.uint8)
    savemat(tmp_path / "toy.mat", {"toy_data": data})
    savemat(tmp_path / "toy_gt.mat", {"toy_gt": labels})
    recipe = {
        "name": "toy",
        "data_file": "toy.mat",
        "data_key": "toy_data",
        "labels_file": "toy_gt.mat",
        "labels_key": "toy_gt",
        "height": h,
        "width": w,
        "bands": v,
        "class_names": [f"kind_{i}" for i in range(1, c + 1)],
    }
    recipe_path = tmp_path / "toy.json"
    recipe_path.write_text(json.dumps(recipe))
    return recipe_path, data, labels


# -- writer / reader ----------------------------------------------------------


def test_write_read_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    reflectance = rng.random((3, 4, 5), dtype=np.float32)
    labels = rng.integers(0, 3, size=(3, 4)).astype(np.uint16)
    path = tmp_path / "scene.hsif"
    write_hsif(path, reflectance, labels, ["a", "b"])
    back_r, back_l, back_n = read_hsif(path)
    assert np.array_equal(back_r, reflectance)
    assert np.array_equal(back_l, labels)
    assert back_n == ["a", "b"]


def test_write_rejects_bad_geometry(tmp_path):
    with pytest.raises(HsifError, match="geometry"):
        write_hsif(tmp_path / "x", np.zeros((2, 2, 1)), np.zeros((3, 2)), ["a"])


def test_write_rejects_out_of_range_labels(tmp_path):
    with pytest.raises(HsifError, match="0..1"):
        write_hsif(tmp_path / "x", np.zeros((2, 2, 1)), np.full((2, 2), 5), ["a"])


def test_flipped_byte_fails_crc(tmp_path):
    path = tmp_path / "scene.hsif"
    write_hsif(path, np.ones((2, 2, 2), dtype=np.float32), np.zeros((2, 2)), [])
    blob = bytearray(path.read_bytes())
    blob[30] ^= 0x01
    path.write_bytes(bytes(blob))
    with pytest.raises(HsifError, match="checksum mismatch"):
        read_hsif(path)


def test_truncation_detected(tmp_path):
    path = tmp_path / "scene.hsif"
    write_hsif(path, np.ones((2, 2, 2), dtype=np.float32), np.zeros((2, 2)), [])
    path.write_bytes(path.read_bytes()[:20])
    with pytest.raises(HsifError, match="truncated"):
        read_hsif(path)


# -- synthesize ---------------------------------------------------------------


def test_synthesize_matches_golden_bytes(tmp_path):
    path = tmp_path / "fixture.hsif"
    reflectance, labels, names = synthesize(2, 2, 3, 2, 42)
    write_hsif(path, reflectance, labels, names)
    assert path.read_bytes() == bytes.fromhex(GOLDEN_HEX)


def test_synthesize_matches_primary_fixture_if_present(tmp_path):
    shipped = Path(__file__).resolve().parents[2] / "tests" / "data" / "toy_scene.hsif"
    if not shipped.exists():
        pytest.skip("classifier fixture not in reach")
    assert shipped.read_bytes() == bytes.fromhex(GOLDEN_HEX)


def test_synthesize_label_rule():
    _, labels, names = synthesize(3, 3, 1, 4, 0)
    assert labels.tolist() == [[0, 1, 2], [3, 4, 0], [1, 2, 3]]
    assert names == ["class_1", "class_2", "class_3", "class_4"]


def test_synthesize_cli_deterministic(tmp_path, capsys):
    a, b, c = tmp_path / "a.hsif", tmp_path / "b.hsif", tmp_path / "c.hsif"
    assert main(["synthesize", "--dims", "3", "4", "2", "2", "--seed", "7", "--out", str(a)]) == 0
    assert main(["synthesize", "--dims", "3", "4", "2", "2", "--seed", "7", "--out", str(b)]) == 0
    assert main(["synthesize", "--dims", "3", "4", "2", "2", "--seed", "8", "--out", str(c)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes() != c.read_bytes()


# -- recipes ------------------------------------------------------------------


def test_builtin_recipes():
    assert set(BUILTIN) == {"indian_pines", "pavia_university", "houston"}
    ip = BUILTIN["indian_pines"]
    assert ip.expected_shape() == (145, 145, 200)
    assert len(ip.class_names) == 16
    assert ip.class_names[0] == "Alfalfa"
    pu = BUILTIN["pavia_university"]
    assert pu.expected_shape() == (610, 340, 103)
    assert len(pu.class_names) == 9
    ho = BUILTIN["houston"]
    assert ho.expected_shape() == (340, 1905, 144)
    assert len(ho.class_names) == 15


def test_load_recipe_from_json(tmp_path):
    recipe_path, _, _ = toy_mat_scene(tmp_path)
    recipe = load_recipe(str(recipe_path))
    assert isinstance(recipe, SceneRecipe)
    assert recipe.output_name() == "toy.hsif"
    assert recipe.class_names == ("kind_1", "kind_2")


def test_load_recipe_unknown_name():
    with pytest.raises(FileNotFoundError, match="indian_pines"):
        load_recipe("atlantis")


def test_load_recipe_unknown_field(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"name": "x", "wavelength": 42}))
    with pytest.raises(ValueError, match="wavelength"):
        load_recipe(str(bad))


# -- convert ------------------------------------------------------------------


def test_convert_end_to_end(tmp_path, capsys):
    recipe_path, data, labels = toy_mat_scene(tmp_path)
    out = tmp_path / "toy.hsif"
    rc = main(["convert", "--recipe", str(recipe_path), "--data-dir", str(tmp_path),
               "--out", str(out)])
    assert rc == 0
    back_r, back_l, back_n = read_hsif(out)
    assert np.array_equal(back_r, data.astype(np.float32))
    assert np.array_equal(back_l, labels.astype(np.uint16))
    assert back_n == ["kind_1", "kind_2"]


def test_convert_idempotent(tmp_path):
    recipe_path, _, _ = toy_mat_scene(tmp_path)
    a, b = tmp_path / "a.hsif", tmp_path / "b.hsif"
    for out in (a, b):
        assert main(["convert", "--recipe", str(recipe_path), "--data-dir", str(tmp_path),
                     "--out", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_convert_wrong_dims_lists_expected(tmp_path, capsys):
    recipe_path, _, _ = toy_mat_scene(tmp_path)
    recipe = json.loads(recipe_path.read_text())
    recipe["bands"] = 7  # now the data file will not match
    recipe_path.write_text(json.dumps(recipe))
    rc = main(["convert", "--recipe", str(recipe_path), "--data-dir", str(tmp_path),
               "--out", str(tmp_path / "x.hsif")])
    assert rc == 1
    assert "(4, 5, 7)" in capsys.readouterr().err


def test_convert_missing_source(tmp_path, capsys):
    rc = main(["convert", "--recipe", "indian_pines", "--data-dir", str(tmp_path),
               "--out", str(tmp_path / "x.hsif")])
    assert rc == 1
    assert "not found" in capsys.readouterr().err


def test_convert_missing_key(tmp_path, capsys):
    recipe_path, _, _ = toy_mat_scene(tmp_path)
    recipe = json.loads(recipe_path.read_text())
    recipe["data_key"] = "wrong_key"
    recipe_path.write_text(json.dumps(recipe))
    rc = main(["convert", "--recipe", str(recipe_path), "--data-dir", str(tmp_path),
               "--out", str(tmp_path / "x.hsif")])
    assert rc == 1
    assert "toy_data" in capsys.readouterr().err  # lists what is available


# -- verify -------------------------------------------------------------------


def test_verify_fresh_conversion(tmp_path, capsys):
    recipe_path, _, labels = toy_mat_scene(tmp_path)
    out = tmp_path / "toy.hsif"
    main(["convert", "--recipe", str(recipe_path), "--data-dir", str(tmp_path),
          "--out", str(out)])
    capsys.readouterr()
    assert main(["verify", str(out)]) == 0
    report = capsys.readouterr().out
    assert "CRC OK" in report
    counts = np.bincount(labels.reshape(-1), minlength=3)
    assert f"kind_1: {counts[1]}" in report
    assert f"kind_2: {counts[2]}" in report


def test_verify_corruption_nonzero_exit(tmp_path, capsys):
    path = tmp_path / "scene.hsif"
    reflectance, labels, names = synthesize(3, 3, 2, 2, 0)
    write_hsif(path, reflectance, labels, names)
    blob = bytearray(path.read_bytes())
    blob[25] ^= 0x10
    path.write_bytes(bytes(blob))
    assert main(["verify", str(path)]) == 1
    assert "checksum" in capsys.readouterr().err


def test_verify_missing_file(capsys):
    assert main(["verify", "/no/such/file.hsif"]) == 1
