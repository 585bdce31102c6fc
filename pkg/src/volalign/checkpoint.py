"""Named-array checkpoint archive (``.npz``) shared by encoder, PSAT and optimizer state.

Layout: ``encoder/<param>``, ``psat/<param>``, ``extra/<name>``,
``optim/<group>/<param>/<state>`` plus a JSON ``__meta__`` string holding the
format version, configs, and step counter.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np
import torch

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _to_np(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().copy()


def save_checkpoint(path: str | Path, *, modules: Mapping[str, torch.nn.Module],
                    meta: Mapping[str, Any], extra: Optional[Mapping[str, torch.Tensor]] = None,
                    optimizer: Optional[torch.optim.Optimizer] = None,
                    param_names: Optional[Mapping[int, str]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = {}
    for ns, module in modules.items():
        for name, p in module.state_dict().items():
            arrays[f"{ns}/{name}"] = _to_np(p)
    for name, t in (extra or {}).items():
        arrays[f"extra/{name}"] = _to_np(t)
    if optimizer is not None:
        if param_names is None:
            raise ValueError("param_names is required to store optimizer state")
        for group in optimizer.param_groups:
            for p in group["params"]:
                for key, value in optimizer.state.get(p, {}).items():
                    arrays[f"optim/{param_names[id(p)]}/{key}"] = _to_np(torch.as_tensor(value))
    full_meta = {"format_version": FORMAT_VERSION, **meta}
    arrays["__meta__"] = np.array(json.dumps(full_meta, sort_keys=True))
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)
    return path


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(str(arrays.pop("__meta__")))
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} != supported version {FORMAT_VERSION}")
    return meta, arrays


def namespace(arrays: Mapping[str, np.ndarray], ns: str) -> dict[str, np.ndarray]:
    prefix = ns + "/"
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}


def load_module_state(module: torch.nn.Module, arrays: Mapping[str, np.ndarray], ns: str) -> None:
    """Copy ``ns/*`` arrays into ``module`` after checking names and shapes."""
    state = namespace(arrays, ns)
    own = module.state_dict()
    missing = sorted(set(own) - set(state))
    unexpected = sorted(set(state) - set(own))
    if missing or unexpected:
        raise CheckpointError(f"{ns}: missing {missing[:5]} unexpected {unexpected[:5]}")
    for name, target in own.items():
        if tuple(state[name].shape) != tuple(target.shape):
            raise CheckpointError(
                f"{ns}/{name}: checkpoint shape {tuple(state[name].shape)} != model shape {tuple(target.shape)}"
            )
    module.load_state_dict({k: torch.as_tensor(v).to(own[k].dtype) for k, v in state.items()})


def load_optimizer_state(optimizer: torch.optim.Optimizer, arrays: Mapping[str, np.ndarray],
                         param_names: Mapping[int, str]) -> None:
    state = namespace(arrays, "optim")
    for group in optimizer.param_groups:
        for p in group["params"]:
            prefix = param_names[id(p)] + "/"
            entries = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
            if entries:
                optimizer.state[p] = {
                    k: torch.as_tensor(v).clone() if k != "step" else torch.as_tensor(v).clone().float()
                    for k, v in entries.items()
                }


def check_config(meta: Mapping[str, Any], key: str, expected: Mapping[str, Any]) -> None:
    """Reject a checkpoint whose stored config section disagrees with ``expected``."""
    stored = meta.get(key)
    if stored is None:
        raise CheckpointError(f"checkpoint has no {key!r} section")
    diffs = {k: (stored.get(k), v) for k, v in expected.items() if stored.get(k) != v}
    if diffs:
        detail = ", ".join(f"{k}: checkpoint={a!r} expected={b!r}" for k, (a, b) in diffs.items())
        raise CheckpointError(f"{key} mismatch ({detail})")
