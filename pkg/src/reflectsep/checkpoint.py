"""Single-file checkpoint container.

Layout::

    b"RSCKPT\\n"                      magic
    8 bytes, little-endian uint64     header length H
    H bytes                           UTF-8 JSON header (sorted keys)
    payload                           raw little-endian tensor bytes

Header keys: ``format_version``, ``model`` (variant, width_div, image_size,
conditional, dtype), ``step``, ``rng`` (numpy bit-generator state),
``optimizers`` (name -> lr, betas), ``sharing`` (alias name -> canonical name),
``tensors`` (list of name, dtype, shape, offset, nbytes) and ``sha256`` of the
payload. Tensor names are ``param/<name>``, ``buffer/<name>`` and
``optim/<optimizer>/<param name>/<slot>``. Only canonical names are stored;
aliases are reinstated by construction of the variant.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

from . import networks

MAGIC = b"RSCKPT\n"
FORMAT_VERSION = 1

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


def _dtype_name(dtype):
    for k, v in _DTYPES.items():
        if v == dtype:
            return k
    raise CheckpointError(f"unsupported dtype {dtype}")


def _named_tensors(model, optimizers):
    names = {}
    for n, p in model.named_parameters():
        names[id(p)] = n
    items = [(f"param/{n}", p) for n, p in model.named_parameters()]
    items += [(f"buffer/{n}", b) for n, b in model.named_buffers()]
    for opt_name in sorted(optimizers):
        opt = optimizers[opt_name]
        for group in opt.param_groups:
            for p in group["params"]:
                state = opt.state.get(p)
                if not state:
                    continue
                for slot in sorted(state):
                    items.append((f"optim/{opt_name}/{names[id(p)]}/{slot}", state[slot]))
    return items


def write_bytes_atomic(path, data):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def dumps(model, optimizers, step, rng):
    """Serialize model, optimizer moments, step counter and RNG state to bytes."""
    entries = []
    chunks = []
    offset = 0
    for name, t in _named_tensors(model, optimizers):
        arr = t.detach().cpu().contiguous().numpy()
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "model": {**model.config(), "dtype": _dtype_name(next(model.parameters()).dtype)},
        "step": int(step),
        "rng": rng.bit_generator.state,
        "optimizers": {k: {"lr": o.param_groups[0]["lr"], "betas": list(o.param_groups[0]["betas"])}
                       for k, o in sorted(optimizers.items())},
        "sharing": model.sharing_map(),
        "tensors": entries,
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(head)) + head + payload


def save(path, model, optimizers, step, rng):
    try:
        return write_bytes_atomic(path, dumps(model, optimizers, step, rng))
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def read_header(data):
    if not data.startswith(MAGIC):
        raise CheckpointCorruptError("not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    if len(data) < pos + 8:
        raise CheckpointCorruptError("truncated header")
    (hlen,) = struct.unpack("<Q", data[pos:pos + 8])
    pos += 8
    try:
        header = json.loads(data[pos:pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"unreadable header: {exc}") from exc
    if not isinstance(header, dict) or "format_version" not in header:
        raise CheckpointCorruptError("header lacks format_version")
    if header["format_version"] != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format {header['format_version']}, expected {FORMAT_VERSION}")
    return header, data[pos + hlen:]


def loads(data, optimizer_factory):
    """Inverse of :func:`dumps`.

    ``optimizer_factory(model, spec)`` must return the same optimizer dict the
    training loop uses; ``spec`` is the header's optimizer hyperparameters.
    Returns ``(model, optimizers, step, rng)``.
    """
    header, payload = read_header(data)
    try:
        cfg = header["model"]
        model = networks.SeparatorModel(cfg["variant"], cfg["width_div"], cfg["image_size"],
                                        cfg["conditional"]).to(_DTYPES[cfg["dtype"]])
        entries = header["tensors"]
        sharing = header["sharing"]
        step = int(header["step"])
        rng_state = header["rng"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointCorruptError(f"malformed header: {exc}") from exc
    if sharing != model.sharing_map():
        raise CheckpointShapeError("sharing map does not match the variant")

    optimizers = optimizer_factory(model, header.get("optimizers", {}))
    expected = {}
    for name, t in model.named_parameters():
        expected[f"param/{name}"] = t
    for name, t in model.named_buffers():
        expected[f"buffer/{name}"] = t
    params = dict(model.named_parameters())

    # Shapes first, so tampered headers fail with a shape error, not a hash error.
    for e in entries:
        name = e["name"]
        if name.startswith("optim/"):
            _, opt_name, rest = name.split("/", 2)
            pname, _slot = rest.rsplit("/", 1)
            if opt_name not in optimizers or pname not in params:
                raise CheckpointShapeError(f"unexpected optimizer entry {name}")
            shape = tuple(params[pname].shape) if _slot != "step" else ()
        elif name in expected:
            shape = tuple(expected[name].shape)
        else:
            raise CheckpointShapeError(f"unexpected tensor {name}")
        if tuple(e["shape"]) != shape:
            raise CheckpointShapeError(f"{name}: stored shape {tuple(e['shape'])}, expected {shape}")
    missing = set(expected) - {e["name"] for e in entries}
    if missing:
        raise CheckpointShapeError(f"missing tensors: {sorted(missing)[:3]}")
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise CheckpointCorruptError("payload checksum mismatch")

    with torch.no_grad():
        for e in entries:
            raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
            arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<"))
            tensor = torch.from_numpy(arr.astype(np.dtype(e["dtype"])).reshape(e["shape"]).copy())
            name = e["name"]
            if name.startswith("optim/"):
                _, opt_name, rest = name.split("/", 2)
                pname, slot = rest.rsplit("/", 1)
                optimizers[opt_name].state[params[pname]][slot] = tensor
            else:
                expected[name].copy_(tensor)
    rng = np.random.default_rng()
    rng.bit_generator.state = rng_state
    return model, optimizers, step, rng


def load(path, optimizer_factory):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(data, optimizer_factory)
