"""Checkpoint container: an ``.npz`` of parameter arrays plus a JSON header.

Arrays are stored in their native dtype so a save/load round trip is
bit-exact. Metadata (config, lineage ids, version) lives under the
``__meta__`` key as UTF-8 bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .errors import FormatError

_META_KEY = "__meta__"


def parameter_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(path, module: torch.nn.Module, meta: dict) -> Path:
    path = Path(path)
    arrays = {f"p/{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}
    meta = dict(meta, version=__version__, kind=meta.get("kind", type(module).__name__),
                parameter_hash=parameter_hash(module))
    arrays[_META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(state_dict, meta)``."""
    path = Path(path)
    try:
        with np.load(path) as z:
            if _META_KEY not in z.files:
                raise FormatError(f"{path}: missing checkpoint header")
            meta = json.loads(bytes(z[_META_KEY]).decode())
            state = {k[2:]: torch.from_numpy(z[k].copy()) for k in z.files if k.startswith("p/")}
    except FileNotFoundError:
        raise
    except FormatError:
        raise
    except Exception as exc:
        raise FormatError(f"{path}: unreadable checkpoint ({exc})") from None
    return state, meta
