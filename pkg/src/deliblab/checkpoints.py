"""Self-describing JSON checkpoints.

Parameter tensors are stored as shape + flat float lists. Python's json
module serializes floats via repr (shortest round-trip form), so save->load
reproduces every tensor bit-exactly. Shared tensors (the x-encoder) are
stored once, under their first-pass names.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import NumericDomainError, ParseError
from .model import FirstPassParams, Vocab
from .second_pass import SecondPassParams

FORMAT = "deliblab-checkpoint"
VERSION = 1


def _pack(named):
    return {
        name: {"shape": list(t.data.shape), "values": t.data.ravel().tolist()}
        for name, t in named.items()
    }


def _unpack_into(named, stored, what):
    for name, t in named.items():
        if name not in stored:
            raise ParseError(f"{what}: missing parameter {name}")
        entry = stored[name]
        shape = tuple(entry["shape"])
        if shape != t.data.shape:
            raise ParseError(
                f"{what}: {name} has shape {shape}, expected {t.data.shape}")
        values = np.array(entry["values"], dtype=np.float64).reshape(shape)
        if not np.isfinite(values).all():
            raise NumericDomainError(f"{what}: {name} has non-finite values")
        t.data[...] = values


def save_checkpoint(path, first: FirstPassParams,
                    second: SecondPassParams | None,
                    config: dict, epoch: int):
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "epoch": epoch,
        "config": config,
        "model": {
            "V": first.vocab.size,
            "d": first.d,
            "context_in_state": first.context_in_state,
            "extras": bool(second.extras) if second is not None else False,
            "has_second": second is not None,
        },
        "params": _pack(first.named() if second is None
                        else {**first.named(), **second.named()}),
    }
    with open(path, "w") as f:
        json.dump(payload, f)
        f.write("\n")


def load_checkpoint(path):
    """Returns (first, second_or_None, config_dict, epoch)."""
    with open(path) as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid checkpoint JSON: {e}") from None
    if payload.get("format") != FORMAT or payload.get("version") != VERSION:
        raise ParseError("not a recognized checkpoint file")
    m = payload["model"]
    vocab = Vocab(m["V"])
    first = FirstPassParams(vocab, m["d"], seed=0,
                            context_in_state=m["context_in_state"])
    second = None
    if m.get("has_second"):
        second = SecondPassParams(first, seed=0, extras=m.get("extras", False))
    stored = payload["params"]
    _unpack_into(first.named(), stored, "checkpoint")
    if second is not None:
        _unpack_into(second.named(), stored, "checkpoint")
    return first, second, payload.get("config", {}), payload.get("epoch", 0)
