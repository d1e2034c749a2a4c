"""Synthetic sequence tasks and the on-disk corpus format.

Every example is derived from (seed, global index) through SplitMix64, so a
corpus is reproducible bit-for-bit and splits never overlap: train occupies
global indices [0, n_train), dev and test follow. Per example, the draw
order is: length, then each clean content token, then (noisy_copy only) per
position one uniform for the corruption coin and, when it fires, one draw
over the other content tokens.

File format (one pair per line, tab-separated, ids space-separated)::

    #deliblab-corpus\tv1\t{"task": {...}, "split": "train"}
    2 5 3 1\t2 5 3 1
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

from .errors import ContractError, ParseError
from .model import EOS, Vocab, check_token_seq
from .prng import SplitMix64, derive_seed

KINDS = ("copy", "reverse", "noisy_copy")
SPLITS = ("train", "dev", "test")


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    V: int
    L_min: int
    L_max: int
    n_train: int
    n_dev: int
    n_test: int
    p_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"task.kind: unknown kind {self.kind!r}")
        if self.V < 3:
            raise ContractError("task.V: need at least one content token")
        if self.kind == "noisy_copy" and self.p_noise > 0 and self.V < 4:
            raise ContractError(
                "task.V: noisy_copy needs two content tokens so corruption can change a token")
        if not 0.0 <= self.p_noise <= 1.0:
            raise ContractError("task.p_noise: must be in [0, 1]")
        if self.L_min < 1 or self.L_max < self.L_min:
            raise ContractError("task length range: need 1 <= L_min <= L_max")
        for f in ("n_train", "n_dev", "n_test"):
            if getattr(self, f) < 0:
                raise ContractError(f"task.{f}: must be >= 0")

    def split_range(self, split: str):
        if split not in SPLITS:
            raise ContractError(f"unknown split {split!r}")
        sizes = {"train": self.n_train, "dev": self.n_dev, "test": self.n_test}
        start = 0
        for s in SPLITS:
            if s == split:
                return start, start + sizes[s]
            start += sizes[s]


class Corpus:
    def __init__(self, spec: TaskSpec, split: str, pairs):
        self.spec = spec
        self.split = split
        self.pairs = list(pairs)

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]


def _example(spec: TaskSpec, index: int):
    rng = SplitMix64(derive_seed(spec.seed, index))
    n = spec.V - 2
    L = spec.L_min + rng.randint(spec.L_max - spec.L_min + 1)
    clean = [2 + rng.randint(n) for _ in range(L)]
    if spec.kind == "copy":
        x = list(clean)
        y = list(clean)
    elif spec.kind == "reverse":
        x = list(clean)
        y = list(reversed(clean))
    else:
        y = list(clean)
        x = []
        for tok in clean:
            if rng.u01() < spec.p_noise:
                # replace with one of the *other* content tokens
                r = rng.randint(n - 1)
                alt = 2 + r + (1 if r >= tok - 2 else 0)
                x.append(alt)
            else:
                x.append(tok)
    return tuple(x) + (EOS,), tuple(y) + (EOS,)


def generate_corpus(spec: TaskSpec, split: str = "train") -> Corpus:
    """Materialize one split; bit-reproducible from (spec, split)."""
    lo, hi = spec.split_range(split)
    return Corpus(spec, split, [_example(spec, i) for i in range(lo, hi)])


def save_corpus(corpus: Corpus, path):
    header = json.dumps({"task": asdict(corpus.spec), "split": corpus.split})
    with open(path, "w") as f:
        f.write(f"#deliblab-corpus\tv1\t{header}\n")
        for x, y in corpus.pairs:
            f.write(" ".join(map(str, x)) + "\t" + " ".join(map(str, y)) + "\n")


def load_corpus(path) -> Corpus:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise ParseError("empty corpus file", line=1)
    head = lines[0].split("\t")
    if len(head) != 3 or head[0] != "#deliblab-corpus" or head[1] != "v1":
        raise ParseError("bad corpus header", line=1)
    try:
        meta = json.loads(head[2])
        spec = TaskSpec(**meta["task"])
        split = meta["split"]
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"bad corpus metadata: {e}", line=1) from None
    vocab = Vocab(spec.V)
    pairs = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError("expected two tab-separated fields", line=ln)
        try:
            x = tuple(int(t) for t in parts[0].split())
            y = tuple(int(t) for t in parts[1].split())
        except ValueError:
            raise ParseError("non-integer token id", line=ln) from None
        try:
            check_token_seq(x, vocab)
            check_token_seq(y, vocab)
        except ContractError as e:
            raise ParseError(str(e), line=ln) from None
        pairs.append((x, y))
    return Corpus(spec, split, pairs)
