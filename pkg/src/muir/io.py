"""Run-directory artifacts: JSON reports, CSV histories, checkpoints, manifests.

Reports are written with sorted keys and a fixed float repr so identical runs
produce byte-identical files.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .bank import BankConfig, HypermoduleBank

CHECKPOINT_FORMAT = 1


class CheckpointError(RuntimeError):
    pass


def _plain(obj):
    """Convert numpy scalars/arrays and non-finite floats to JSON-safe values."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return _plain(obj.item())
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def dumps(obj) -> str:
    return json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n"


def write_json(path: Path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj))
    return path


def read_json(path: Path):
    return json.loads(Path(path).read_text())


def write_csv(path: Path, rows: list[dict], columns: list[str] | None = None) -> Path:
    """Rows as CSV; columns default to first-seen key order across all rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if columns is None:
        columns = []
        for row in rows:
            columns.extend(k for k in row if k not in columns)
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _csv_value(row.get(k)) for k in columns})
    return path


def _csv_value(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def read_csv(path: Path) -> list[dict[str, str]]:
    with Path(path).open(newline="") as f:
        return list(csv.DictReader(f))


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(obj) -> str:
    return hashlib.sha256(dumps(obj).encode()).hexdigest()


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(stem: Path, bank: HypermoduleBank, psi0, seed: int, extra: dict | None = None) -> list[Path]:
    """Write ``stem.json`` (metadata) and ``stem.npz`` (tensors)."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    psi0 = np.asarray(psi0, dtype=np.int64)
    bank.check_psi(psi0)
    npz = stem.with_suffix(".npz")
    np.savez(npz, H=bank.H, z=bank.z, fan_in=bank.fan_in, usage=bank.usage, alive=bank.alive, psi0=psi0)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "code_version": __version__,
        "bank": asdict(bank.config),
        "shapes": {"H": list(bank.H.shape), "z": list(bank.z.shape)},
        "L": bank.L,
        "capacity": bank.capacity,
        "active_modules": bank.active_count,
        "seed": int(seed),
        "tensors": npz.name,
        "tensors_sha256": sha256(npz),
        "extra": extra or {},
    }
    js = write_json(stem.with_suffix(".json"), meta)
    return [js, npz]


def load_checkpoint(stem: Path) -> tuple[HypermoduleBank, np.ndarray, dict]:
    stem = Path(stem)
    js = stem.with_suffix(".json")
    if not js.exists():
        raise CheckpointError(f"no checkpoint at {js}")
    meta = read_json(js)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {meta.get('format')!r}")
    npz = js.parent / meta["tensors"]
    if not npz.exists():
        raise CheckpointError(f"missing tensor file {npz}")
    if sha256(npz) != meta["tensors_sha256"]:
        raise CheckpointError(f"checksum mismatch for {npz}")
    with np.load(npz) as data:
        arrays = {k: data[k] for k in data.files}
    bank = HypermoduleBank.from_arrays(BankConfig(**meta["bank"]), arrays)
    psi0 = arrays["psi0"]
    bank.check_psi(psi0)
    if not np.array_equal(np.bincount(psi0, minlength=bank.capacity), bank.usage):
        raise CheckpointError("stored usage counts disagree with the alignment")
    return bank, psi0, meta


# ---------------------------------------------------------------- manifest


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seeds: list[int]
    code_version: str = __version__
    started: float = field(default_factory=time.time)
    finished: float | None = None
    files: dict[str, str] = field(default_factory=dict)
    failed: list[dict] = field(default_factory=list)

    def add(self, root: Path, path: Path) -> None:
        self.files[str(Path(path).relative_to(root))] = sha256(path)

    def add_tree(self, root: Path) -> None:
        root = Path(root)
        for p in sorted(root.rglob("*")):
            if p.is_file() and p.name != "manifest.json":
                self.add(root, p)

    def write(self, root: Path) -> Path:
        self.finished = time.time()
        return write_json(Path(root) / "manifest.json", asdict(self))

    @property
    def ok(self) -> bool:
        return not self.failed


def verify_manifest(root: Path) -> list[str]:
    """Files whose checksum no longer matches (or that are missing)."""
    root = Path(root)
    man = read_json(root / "manifest.json")
    bad = []
    for rel, digest in man["files"].items():
        p = root / rel
        if not p.exists() or sha256(p) != digest:
            bad.append(rel)
    return bad
