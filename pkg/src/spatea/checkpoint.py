"""Versioned parameter container: JSON with a magic string, the model
config, and named flat arrays. Kernel chains ride in an optional "chain"
section so compression artifacts share the same file format."""

from __future__ import annotations

import json

import numpy as np

from . import model as mdl

MAGIC = "SPATEA-CKPT-v1"


class CheckpointError(RuntimeError):
    pass


def _array_payload(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape),
            "data": [float(x) for x in np.asarray(arr, dtype=np.float64).ravel()]}


def _array_restore(payload: dict) -> np.ndarray:
    arr = np.array(payload["data"], dtype=np.float64)
    return arr.reshape(payload["shape"])


def chain_payload(chain) -> dict:
    sites = []
    for s in chain.sites:
        s = np.asarray(s)
        sites.append({"shape": list(s.shape),
                      "re": [float(x) for x in s.real.ravel()],
                      "im": [float(x) for x in s.imag.ravel()]})
    return {"sites": sites}


def chain_restore(payload: dict):
    from .compress import MPSChain
    sites = []
    for p in payload["sites"]:
        re = np.array(p["re"]).reshape(p["shape"])
        im = np.array(p["im"]).reshape(p["shape"])
        sites.append(re + 1j * im)
    return MPSChain(sites)


def save_checkpoint(path: str, config: mdl.ModelConfig, params: dict,
                    extra: dict = None, chain: dict = None) -> str:
    doc = {"magic": MAGIC,
           "config": config.to_dict(),
           "arrays": {k: _array_payload(v) for k, v in sorted(params.items())}}
    if extra is not None:
        doc["extra"] = extra
    if chain is not None:
        doc["chain"] = chain
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")
    return path


def load_checkpoint(path: str):
    """Returns (config, params, full document)."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path} is not a checkpoint: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("magic") != MAGIC:
        raise CheckpointError(
            f"{path} missing magic {MAGIC!r}; got {doc.get('magic')!r}"
            if isinstance(doc, dict) else f"{path} is not a checkpoint")
    config = mdl.ModelConfig.from_dict(doc["config"])
    params = {k: _array_restore(v) for k, v in doc["arrays"].items()}
    want = mdl.init_params(config, 0)
    if set(want) != set(params):
        missing = sorted(set(want) - set(params))
        surplus = sorted(set(params) - set(want))
        raise CheckpointError(f"parameter names disagree with config: "
                              f"missing {missing}, surplus {surplus}")
    for k, v in params.items():
        if v.shape != want[k].shape:
            raise CheckpointError(
                f"shape mismatch for {k}: file {v.shape}, config {want[k].shape}")
    return config, params, doc
