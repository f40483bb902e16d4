"""Parameter checkpoints: a plain-text manifest plus raw little-endian buffers.

A checkpoint directory holds

    manifest.txt    one line per tensor: name<TAB>shape-csv<TAB>dtype
    params.bin      the tensors' raw bytes, little-endian, in manifest order

which is byte-stable across runs for identical seeds and configs.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .errors import MissingArtifact

_DTYPES = {
    "float32": ("<f4", torch.float32),
    "int64": ("<i8", torch.int64),
    "int32": ("<i4", torch.int32),
}


def save_tensors(dirpath: Path | str, tensors: dict[str, torch.Tensor]) -> None:
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    lines = []
    blobs = []
    for name, tensor in tensors.items():
        t = tensor.detach().cpu()
        dtype = str(t.dtype).removeprefix("torch.")
        if dtype not in _DTYPES:
            t = t.to(torch.float32)
            dtype = "float32"
        shape = ",".join(str(s) for s in t.shape)
        lines.append(f"{name}\t{shape}\t{dtype}")
        blobs.append(t.numpy().astype(_DTYPES[dtype][0]).tobytes())
    (dirpath / "manifest.txt").write_text("\n".join(lines) + "\n")
    (dirpath / "params.bin").write_bytes(b"".join(blobs))


def load_tensors(dirpath: Path | str, producing_stage: str = "train") -> dict[str, torch.Tensor]:
    dirpath = Path(dirpath)
    manifest = dirpath / "manifest.txt"
    if not manifest.exists():
        raise MissingArtifact(manifest, producing_stage)
    raw = (dirpath / "params.bin").read_bytes()
    out: dict[str, torch.Tensor] = {}
    offset = 0
    for line in manifest.read_text().splitlines():
        name, shape_csv, dtype = line.split("\t")
        shape = tuple(int(s) for s in shape_csv.split(",")) if shape_csv else ()
        np_dtype, torch_dtype = _DTYPES[dtype]
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype=np_dtype, count=count, offset=offset).reshape(shape)
        offset += arr.nbytes
        out[name] = torch.from_numpy(arr.copy()).to(torch_dtype)
    return out


def save_module(dirpath: Path | str, module: torch.nn.Module) -> None:
    save_tensors(dirpath, dict(module.state_dict()))


def load_module(dirpath: Path | str, module: torch.nn.Module, producing_stage: str = "train") -> None:
    state = load_tensors(dirpath, producing_stage)
    module.load_state_dict(state)


def module_digest(module: torch.nn.Module) -> bytes:
    """Concatenated raw bytes of all parameters; used for freeze-contract checks."""
    return b"".join(
        p.detach().cpu().numpy().astype("<f4").tobytes() for _, p in module.named_parameters()
    )
