"""Checkpoint and curve file formats."""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .field import MLPField

MAGIC = b"PEFV"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQ")


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix == ".bin":
        p = p.with_suffix("")
    return p.with_suffix(".bin"), p.with_suffix(".json")


def dumps_params(params: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(params, dtype="<f8")
    return _HEADER.pack(MAGIC, FORMAT_VERSION, arr.size) + arr.tobytes()


def loads_params(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise ValueError("checkpoint truncated")
    magic, version, n = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ValueError("not a parameter checkpoint")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    body = blob[_HEADER.size:]
    if len(body) != 8 * n:
        raise ValueError("checkpoint length does not match its header")
    return np.frombuffer(body, dtype="<f8").astype(float)


def save_field(field: MLPField, path) -> Path:
    """Write ``<path>.bin`` (parameters) and ``<path>.json`` (architecture)."""
    bin_path, meta_path = _paths(path)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    blob = dumps_params(field.params)
    bin_path.write_bytes(blob)
    meta = {
        "format": "prefedit-field",
        "format_version": FORMAT_VERSION,
        "architecture": field.architecture(),
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return bin_path


def load_field(path) -> MLPField:
    bin_path, meta_path = _paths(path)
    meta = json.loads(meta_path.read_text())
    blob = bin_path.read_bytes()
    if meta.get("sha256") and hashlib.sha256(blob).hexdigest() != meta["sha256"]:
        raise ValueError(f"{bin_path} does not match its sidecar checksum")
    arch = meta["architecture"]
    if arch.get("kind") != "mlp":
        raise ValueError(f"unsupported architecture {arch.get('kind')!r}")
    return MLPField(arch["dim"], arch["cond_dim"], tuple(arch["hidden"]), arch["activation"],
                    arch["time_embedding"], loads_params(blob))


def save_grpo_state(path, state: dict) -> Path:
    bin_path, _ = _paths(path)
    out = bin_path.with_suffix(".grpo.json")
    out.write_text(json.dumps(state, indent=2, sort_keys=True) + "\n")
    return out


def write_loss_curve(losses, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, loss in enumerate(losses):
            w.writerow([i, repr(float(loss))])


def write_trajectories(traj, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        d = traj.states.shape[2]
        w.writerow(["traj_id", "step", "t", *[f"dim{j}" for j in range(d)], "logprob"])
        for i in range(len(traj)):
            for k in range(traj.steps + 1):
                # logprob of the transition into state k
                lp = traj.logprobs[i, k - 1] if k > 0 else float("nan")
                lp_text = "" if np.isnan(lp) else repr(float(lp))
                w.writerow([i, k, repr(float(traj.times[k])),
                            *[repr(float(v)) for v in traj.states[i, k]], lp_text])


class RewardCurveWriter:
    """Appends one row per iteration and flushes immediately."""

    columns = ["iteration", "mean_reward", "mean_score", "kl"]

    def __init__(self, path):
        self._fh = Path(path).open("w", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(self.columns)
        self._fh.flush()

    def __call__(self, rec):
        self._w.writerow([rec.iteration, repr(rec.mean_reward), repr(rec.mean_score), repr(rec.kl)])
        self._fh.flush()

    def close(self):
        self._fh.close()


def read_reward_curve(path) -> list[dict]:
    with Path(path).open() as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
