"""Sequence metrics and checkpoint evaluation helpers."""

from __future__ import annotations

import numpy as np

from .model import EOS, Seq


def levenshtein(a: Seq, b: Seq) -> int:
    """Plain edit distance (insert/delete/substitute, unit costs)."""
    a, b = tuple(a), tuple(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def content(ids: Seq) -> Seq:
    """Drop the terminal EOS, if present."""
    ids = tuple(ids)
    return ids[:-1] if ids and ids[-1] == EOS else ids


def token_error_rate(ref: Seq, hyp: Seq) -> float:
    """Normalized edit distance over content tokens: dist / max(len_ref, len_hyp).

    Always in [0, 1]; 0 iff the content matches exactly.
    """
    r, h = content(ref), content(hyp)
    denom = max(len(r), len(h), 1)
    return levenshtein(r, h) / denom


def exact_match(ref: Seq, hyp: Seq) -> bool:
    return tuple(ref) == tuple(hyp)


def mean_metrics(pairs):
    """Average TER and exact-match rate over (ref, hyp) pairs."""
    ters = [token_error_rate(r, h) for r, h in pairs]
    ems = [float(exact_match(r, h)) for r, h in pairs]
    return float(np.mean(ters)), float(np.mean(ems))


def within_band_mass(attn: np.ndarray, band: float = 0.2) -> float:
    """Mean per-step attention mass on cells with |t/T - l/T_I| < band.

    Row/column positions are 1-based, matching the alignment-penalty grid.
    """
    T, L = attn.shape
    t = (np.arange(1, T + 1) / T)[:, None]
    l = (np.arange(1, L + 1) / L)[None, :]
    mask = np.abs(t - l) < band
    return float((attn * mask).sum() / T)
