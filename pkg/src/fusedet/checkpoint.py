"""Single-file model checkpoints.

Layout: a 5-byte magic, one header line giving the manifest length, the
manifest itself (utf-8 text), then raw little-endian float64 blocks.

    FDA1\n
    manifest <byte count>\n
    epoch = 3
    <flat config lines, volatile run.* keys left out>
    [tensors]
    param <name> <dim,dim,...>
    momentum <name> <dim,dim,...>
    ...
    <binary blocks in manifest order>

Everything after [tensors] names one float64 block; block sizes follow
from the recorded shapes, so the binary section carries no framing of its
own. Saving the same state twice produces byte-identical files.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, resolve_config, serialize_run_config
from .detector import Model, build_model
from .errors import ConfigError, FileFormatError

MAGIC = b"FDA1\n"


@dataclass
class Checkpoint:
    config: RunConfig  # volatile run.* keys hold their defaults
    epoch: int
    params: dict
    momentum: dict


def _shape_str(arr: np.ndarray) -> str:
    if arr.ndim < 1:
        raise ValueError("checkpoint tensors must have rank >= 1")
    return ",".join(str(d) for d in arr.shape)


def _parse_shape(text: str) -> tuple:
    try:
        return tuple(int(d) for d in text.split(","))
    except ValueError as e:
        raise FileFormatError(f"bad tensor shape {text!r}") from e


def save_checkpoint(
    path, config: RunConfig, epoch: int, params: dict, momentum: dict
) -> None:
    lines = [f"epoch = {epoch}"]
    lines.append(serialize_run_config(config, include_volatile=False).rstrip("\n"))
    lines.append("[tensors]")
    blocks = []
    for kind, table in (("param", params), ("momentum", momentum)):
        for name, arr in table.items():
            a = np.ascontiguousarray(arr, dtype=np.float64)
            lines.append(f"{kind} {name} {_shape_str(a)}")
            blocks.append(a.astype("<f8", copy=False).tobytes())
    manifest = ("\n".join(lines) + "\n").encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"manifest {len(manifest)}\n".encode("ascii"))
        fh.write(manifest)
        for b in blocks:
            fh.write(b)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise FileFormatError(f"cannot read checkpoint {path}: {e}") from e
    if not blob.startswith(MAGIC):
        raise FileFormatError(f"{path}: bad magic, not a model checkpoint")
    rest = blob[len(MAGIC):]
    nl = rest.find(b"\n")
    header = rest[:nl].decode("ascii", errors="replace")
    if nl < 0 or not header.startswith("manifest "):
        raise FileFormatError(f"{path}: missing manifest header")
    try:
        manifest_len = int(header.split()[1])
    except (IndexError, ValueError) as e:
        raise FileFormatError(f"{path}: bad manifest header {header!r}") from e
    body = rest[nl + 1:]
    if len(body) < manifest_len:
        raise FileFormatError(f"{path}: truncated manifest")
    manifest = body[:manifest_len].decode("utf-8")
    binary = body[manifest_len:]

    config_lines = []
    inventory = []
    epoch = None
    in_tensors = False
    for ln in manifest.splitlines():
        if not ln.strip():
            continue
        if ln.strip() == "[tensors]":
            in_tensors = True
            continue
        if in_tensors:
            parts = ln.split()
            if len(parts) != 3 or parts[0] not in ("param", "momentum"):
                raise FileFormatError(f"{path}: bad tensor line {ln!r}")
            inventory.append((parts[0], parts[1], _parse_shape(parts[2])))
        elif ln.startswith("epoch"):
            _, _, v = ln.partition("=")
            try:
                epoch = int(v.strip())
            except ValueError as e:
                raise FileFormatError(f"{path}: bad epoch line {ln!r}") from e
        else:
            config_lines.append(ln)
    if epoch is None:
        raise FileFormatError(f"{path}: manifest has no epoch")
    try:
        config = resolve_config("\n".join(config_lines) + "\n", origin=str(path))
    except ConfigError as e:
        raise FileFormatError(f"{path}: bad embedded config: {e}") from e

    params: dict = {}
    momentum: dict = {}
    offset = 0
    for kind, name, shape in inventory:
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * 8
        if end > len(binary):
            raise FileFormatError(f"{path}: binary section truncated at {name!r}")
        arr = np.frombuffer(binary[offset:end], dtype="<f8").reshape(shape).copy()
        (params if kind == "param" else momentum)[name] = arr
        offset = end
    if offset != len(binary):
        raise FileFormatError(
            f"{path}: {len(binary) - offset} trailing bytes after last tensor"
        )
    return Checkpoint(config, epoch, params, momentum)


def restore_model(ckpt: Checkpoint) -> Model:
    """Rebuild the graph from the stored config and overwrite every
    parameter with its stored block."""
    model = build_model(ckpt.config.model, ckpt.config.train.seed)
    want = set(model.params)
    got = set(ckpt.params)
    if want != got:
        missing = sorted(want - got)[:3]
        surplus = sorted(got - want)[:3]
        raise FileFormatError(
            f"checkpoint parameters do not match the stored config "
            f"(missing {missing}, unexpected {surplus})"
        )
    for name, arr in ckpt.params.items():
        p = model.params[name]
        if p.data.shape != arr.shape:
            raise FileFormatError(
                f"parameter {name!r}: stored shape {arr.shape}, built {p.data.shape}"
            )
        p.data[...] = arr
    return model
