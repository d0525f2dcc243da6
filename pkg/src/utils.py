"""Utility helpers (seeding, rng streams, run directories, manifests)."""
from __future__ import annotations
import hashlib, json, os, platform, random, time
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
import torch

from .errors import ArgumentError

DTYPE = torch.float64


def set_deterministic(seed: int = 42):
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    random.seed(seed)
    os.environ["PYTHONHASHSEED"] = str(seed)


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator for the stream ``(seed, *keys)``.

    Streams with different keys are independent, so a chain's draws do not
    depend on how many other chains run next to it.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))


def rng_cursor(rng: np.random.Generator) -> int:
    """64-bit words drawn so far from a fresh Philox stream (four per counter block)."""
    state = rng.bit_generator.state
    if state.get("has_uint32"):
        raise ArgumentError("stream holds half of a 64-bit word; draw integers with randint")
    return int(state["state"]["counter"][0]) * 4 + int(state.get("buffer_pos", 4)) - 4


def rng_at(cursor: int, seed: int, *keys: int) -> np.random.Generator:
    """The stream ``(seed, *keys)`` positioned where ``rng_cursor`` read ``cursor``."""
    rng = make_rng(seed, *keys)
    if cursor:
        rng.bit_generator.random_raw(cursor)
    return rng


def randint(rng: np.random.Generator, low, high, size=None) -> np.ndarray:
    """Integers in [low, high), one whole word per draw (``Generator.integers`` may split words)."""
    low = np.asarray(low, dtype=np.int64)
    high = np.asarray(high, dtype=np.int64)
    shape = np.broadcast(low, high).shape if size is None else size
    return low + np.floor(rng.random(shape) * (high - low)).astype(np.int64)


def normal(rng: np.random.Generator, shape: Sequence[int] | int) -> torch.Tensor:
    return torch.from_numpy(rng.standard_normal(shape)).to(DTYPE)


def uniform(rng: np.random.Generator, low: float, high: float, shape: Sequence[int] | int) -> torch.Tensor:
    return torch.from_numpy(rng.uniform(low, high, shape)).to(DTYPE)


def as_tensor(x: Any) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(x, dtype=DTYPE)


def config_hash(cfg: Dict[str, Any]) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def make_run_dir(output_dir: str | Path, cfg_hash: str, subcommand: str) -> Path:
    ts = time.strftime("%Y%m%d_%H%M%S")
    base = Path(output_dir) / f"{ts}_{cfg_hash[:8]}_{subcommand}"
    path, k = base, 0
    while path.exists():
        k += 1
        path = base.with_name(f"{base.name}_{k}")
    path.mkdir(parents=True)
    return path


def package_versions() -> Dict[str, str]:
    import scipy
    return {
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


def write_manifest(run_dir: Path, cfg: Dict[str, Any], seed: int, subcommand: str, flags: Dict[str, Any]) -> Path:
    manifest = {
        "subcommand": subcommand,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": seed,
        "flags": flags,
        "versions": package_versions(),
    }
    out = run_dir / "manifest.json"
    out.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return out


def read_manifest(path: str | Path) -> Tuple[Dict[str, Any], int, Dict[str, Any]]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return data["config"], int(data["seed"]), data.get("flags", {})


def save_json(path: Path, obj: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
    return path


def append_jsonl(path: Path, row: Dict[str, Any]) -> None:
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(row, sort_keys=True) + "\n")


def elapsed_ms(start: float, end: Optional[float] = None) -> float:
    return round(((end if end is not None else time.perf_counter()) - start) * 1000.0, 3)


__all__ = [
    "DTYPE",
    "set_deterministic",
    "make_rng",
    "rng_cursor",
    "rng_at",
    "randint",
    "normal",
    "uniform",
    "as_tensor",
    "config_hash",
    "make_run_dir",
    "write_manifest",
    "read_manifest",
    "save_json",
    "append_jsonl",
    "elapsed_ms",
]
