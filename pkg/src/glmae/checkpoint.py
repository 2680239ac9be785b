"""Checkpoint archive: ``<stem>.npz`` of named float32 arrays plus ``<stem>.json`` manifest.

The archive is written with fixed zip timestamps so that identical weights
give byte-identical files.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _stem(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".npz", ".json") else p


def checkpoint_paths(path) -> tuple[Path, Path]:
    s = _stem(path)
    return s.with_name(s.name + ".npz"), s.with_name(s.name + ".json")


def save_arrays(path, arrays: dict[str, np.ndarray], manifest: dict) -> Path:
    npz, meta = checkpoint_paths(path)
    npz.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(npz, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name], dtype="<f4"), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())
    doc = {"format_version": FORMAT_VERSION, **manifest}
    meta.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return npz


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    npz, meta = checkpoint_paths(path)
    manifest = json.loads(meta.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format_version')}")
    with np.load(npz, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    return arrays, manifest


def module_arrays(prefix: str, module: nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v.detach().cpu().numpy().astype(np.float32) for k, v in module.state_dict().items()}


def load_module(prefix: str, module: nn.Module, arrays: dict[str, np.ndarray], strict: bool = True):
    sd = module.state_dict()
    state = {}
    for k, ref in sd.items():
        key = f"{prefix}.{k}"
        if key not in arrays:
            if strict:
                raise KeyError(f"checkpoint lacks {key}")
            continue
        state[k] = torch.from_numpy(np.array(arrays[key])).to(ref.dtype).reshape(ref.shape)
    module.load_state_dict(state, strict=strict)


def optimizer_arrays(prefix: str, opt: torch.optim.Optimizer, names: dict) -> dict[str, np.ndarray]:
    """Flatten Adam-style per-parameter state, keyed by parameter name."""
    out = {}
    for p, st in opt.state.items():
        name = names[p]
        for k, v in st.items():
            out[f"{prefix}.{name}.{k}"] = torch.as_tensor(v).detach().cpu().numpy().astype(np.float32)
    return out


def load_optimizer(prefix: str, opt: torch.optim.Optimizer, named_params: dict, arrays: dict):
    for name, p in named_params.items():
        keys = {k[len(prefix) + len(name) + 2:]: k for k in arrays if k.startswith(f"{prefix}.{name}.")}
        if not keys:
            continue
        st = {}
        for field, key in keys.items():
            t = torch.from_numpy(np.array(arrays[key]))
            st[field] = t.to(torch.float32) if field == "step" else t.to(p.dtype).reshape(p.shape)
        opt.state[p] = st
