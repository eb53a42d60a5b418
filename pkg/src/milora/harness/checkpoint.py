"""Checkpoint = text manifest + raw little-endian float64 payload.

Layout of a checkpoint directory::

    manifest.txt   format line, config echo, one line per tensor
    tensors.bin    tensors concatenated in manifest order, no padding
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..model import MiLoRAModel
from .config import RunConfig

FORMAT = "milora-checkpoint"
VERSION = 1
MANIFEST = "manifest.txt"
PAYLOAD = "tensors.bin"


class CheckpointError(RuntimeError):
    pass


def build_model(cfg: RunConfig) -> MiLoRAModel:
    return MiLoRAModel(cfg.backbone, cfg.adapter, seed=cfg.seed)


def save_checkpoint(path: str | Path, model: MiLoRAModel, cfg: RunConfig) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [f"{FORMAT} {VERSION}", "[config]"]
    lines += cfg.to_text().splitlines()
    lines.append("[tensors]")
    offset = 0
    chunks = []
    for name, p in model.named_parameters():
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        shape = ",".join(str(s) for s in p.shape) or "-"
        lines.append(f"{name} {shape} {offset} {len(raw)}")
        chunks.append(raw)
        offset += len(raw)
    lines.append(f"[payload] {offset}")
    (path / PAYLOAD).write_bytes(b"".join(chunks))
    (path / MANIFEST).write_text("\n".join(lines) + "\n")
    return path


def _parse_manifest(text: str):
    lines = text.splitlines()
    if not lines or lines[0].split()[:1] != [FORMAT]:
        raise CheckpointError("not a milora checkpoint manifest")
    try:
        version = int(lines[0].split()[1])
    except (IndexError, ValueError) as exc:
        raise CheckpointError("manifest has no format version") from exc
    if version != VERSION:
        raise CheckpointError(f"checkpoint format version {version} != supported {VERSION}")
    try:
        i_cfg, i_ten = lines.index("[config]"), lines.index("[tensors]")
    except ValueError as exc:
        raise CheckpointError("manifest is missing a section") from exc
    cfg_text = "\n".join(lines[i_cfg + 1:i_ten])
    tensors = []
    total = None
    for line in lines[i_ten + 1:]:
        if not line.strip():
            continue
        if line.startswith("[payload]"):
            total = int(line.split()[1])
            break
        parts = line.split()
        if len(parts) != 4:
            raise CheckpointError(f"malformed tensor line: {line!r}")
        name, shape, off, nbytes = parts
        dims = () if shape == "-" else tuple(int(s) for s in shape.split(","))
        tensors.append((name, dims, int(off), int(nbytes)))
    if total is None:
        raise CheckpointError("manifest has no payload length")
    return cfg_text, tensors, total


def load_checkpoint(path: str | Path) -> tuple[MiLoRAModel, RunConfig]:
    """Validate the manifest against the payload, then rebuild the model."""
    path = Path(path)
    try:
        text = (path / MANIFEST).read_text()
        payload = (path / PAYLOAD).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint at {path}: {exc}") from exc
    cfg_text, tensors, total = _parse_manifest(text)
    expected = 0
    for name, dims, off, nbytes in tensors:
        if off != expected:
            raise CheckpointError(f"tensor {name}: offset {off}, expected {expected}")
        if nbytes != 8 * int(np.prod(dims, dtype=np.int64)):
            raise CheckpointError(f"tensor {name}: {nbytes} bytes does not match shape {dims}")
        if off + nbytes > len(payload):
            raise CheckpointError(f"tensor {name}: payload truncated "
                                  f"({len(payload)} bytes, tensor ends at {off + nbytes})")
        expected += nbytes
    if len(payload) != total:
        raise CheckpointError(f"payload is {len(payload)} bytes, manifest declares {total}")
    if expected != total:
        raise CheckpointError(f"tensors cover {expected} bytes of a {total}-byte payload")
    cfg = RunConfig.from_text(cfg_text)
    model = build_model(cfg)
    params = dict(model.named_parameters())
    names = [t[0] for t in tensors]
    missing = [n for n in params if n not in names]
    if missing:
        raise CheckpointError(f"tensor {missing[0]} missing from checkpoint")
    for name, dims, off, nbytes in tensors:
        if name not in params:
            raise CheckpointError(f"tensor {name} is not part of this model")
        p = params[name]
        if tuple(p.shape) != dims:
            raise CheckpointError(f"tensor {name}: shape {dims} != model shape {p.shape}")
        p.data[...] = np.frombuffer(payload, dtype="<f8", count=nbytes // 8, offset=off).reshape(dims)
    return model, cfg
