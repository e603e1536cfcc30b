import numpy as np
import pytest

from muir import io
from muir.bank import BankConfig, init_bank


def make_bank():
    bank, psi = init_bank([6] * 5, BankConfig(c=2, m=3, n=2), np.random.default_rng(0))
    psi = np.array([0, 0, 2, 2, 4])
    bank.set_usage(psi)
    bank.prune_unused()
    return bank, psi


def test_checkpoint_round_trip(tmp_path):
    bank, psi = make_bank()
    files = io.save_checkpoint(tmp_path / "ck", bank, psi, seed=4, extra={"note": "x"})
    assert [f.name for f in files] == ["ck.json", "ck.npz"]
    loaded, psi2, meta = io.load_checkpoint(tmp_path / "ck")
    np.testing.assert_array_equal(psi2, psi)
    for name, arr in bank.arrays().items():
        np.testing.assert_array_equal(loaded.arrays()[name], arr)
    assert loaded.config == bank.config
    assert meta["seed"] == 4 and meta["active_modules"] == 3 and meta["extra"] == {"note": "x"}


def test_checkpoint_detects_corruption(tmp_path):
    bank, psi = make_bank()
    io.save_checkpoint(tmp_path / "ck", bank, psi, seed=0)
    npz = tmp_path / "ck.npz"
    data = bytearray(npz.read_bytes())
    data[-10] ^= 0xFF
    npz.write_bytes(bytes(data))
    with pytest.raises(io.CheckpointError, match="checksum"):
        io.load_checkpoint(tmp_path / "ck")
    with pytest.raises(io.CheckpointError):
        io.load_checkpoint(tmp_path / "missing")


def test_checkpoint_rejects_inconsistent_usage(tmp_path):
    bank, psi = make_bank()
    bank.usage[0] += 1
    io.save_checkpoint(tmp_path / "ck", bank, psi, seed=0)
    with pytest.raises(io.CheckpointError, match="usage"):
        io.load_checkpoint(tmp_path / "ck")


def test_json_is_canonical_and_handles_numpy(tmp_path):
    obj = {"b": np.float64(1.5), "a": np.arange(3), "c": float("nan"), "d": np.bool_(True)}
    text = io.dumps(obj)
    assert text.index('"a"') < text.index('"b"')
    assert io.read_json(io.write_json(tmp_path / "x.json", obj)) == {"a": [0, 1, 2], "b": 1.5, "c": None, "d": True}
    assert io.config_hash({"x": 1, "y": 2}) == io.config_hash({"y": 2, "x": 1})


def test_csv_round_trip(tmp_path):
    rows = [{"g": 0, "v": 0.1}, {"g": 1, "v": 1 / 3, "extra": "e"}]
    io.write_csv(tmp_path / "h.csv", rows)
    back = io.read_csv(tmp_path / "h.csv")
    assert list(back[0]) == ["g", "v", "extra"]
    assert float(back[1]["v"]) == 1 / 3
    assert back[0]["extra"] == ""


def test_manifest_verification(tmp_path):
    (tmp_path / "sub").mkdir()
    (tmp_path / "sub" / "a.txt").write_text("hello")
    man = io.RunManifest("synthetic", "abc", [0])
    man.add_tree(tmp_path)
    man.write(tmp_path)
    assert man.ok and io.verify_manifest(tmp_path) == []
    (tmp_path / "sub" / "a.txt").write_text("changed")
    assert io.verify_manifest(tmp_path) == ["sub/a.txt"]
