"""Single-pass attention encoder-decoder over a token vocabulary.

Layout conventions: hidden vectors are (1, d) rows, encoder outputs are
(L, d) matrices, logits are (1, V). Token id 0 is BOS (decoder start, never
emitted), id 1 is EOS, ids 2..V-1 are content tokens. The output
distribution at every step is a softmax over the emittable ids 1..V-1, so
the probability of any sequence space defined by "EOS-terminated or
truncated at t_max" sums to one exactly.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError

BOS = 0
EOS = 1

# Desk-scale widths (d <= 64) need a larger init than the classic 0.08 of
# thousand-unit seq2seq stacks: at d=16 the 0.08 scale leaves attention and
# gate gradients around 1e-6 and the toy tasks never leave the uniform
# plateau. 0.5 ~ 2/sqrt(d) restores signal flow at these sizes.
INIT_SCALE = 0.5

Seq = tuple  # token-id tuple


class Vocab:
    """Token alphabet: BOS=0, EOS=1, content ids 2..size-1."""

    def __init__(self, size: int):
        if size < 3:
            raise ContractError(f"vocab needs BOS, EOS and content, got size {size}")
        self.size = size

    @property
    def content_ids(self):
        return range(2, self.size)

    @property
    def n_content(self):
        return self.size - 2

    def __eq__(self, other):
        return isinstance(other, Vocab) and other.size == self.size

    def __repr__(self):
        return f"Vocab({self.size})"


def check_token_seq(ids, vocab: Vocab, t_max: int | None = None):
    """Validate the token-sequence contract; returns the ids as a tuple.

    EOS may appear only as the final token; BOS never. When t_max is given,
    a sequence without EOS must have length exactly t_max.
    """
    ids = tuple(int(i) for i in ids)
    if len(ids) == 0:
        raise ContractError("empty token sequence")
    for pos, i in enumerate(ids):
        if not 0 <= i < vocab.size:
            raise ContractError(f"token id {i} outside vocab of size {vocab.size}")
        if i == BOS:
            raise ContractError("BOS is reserved for the decoder start")
        if i == EOS and pos != len(ids) - 1:
            raise ContractError(f"EOS at interior position {pos}")
    if t_max is not None:
        if len(ids) > t_max:
            raise ContractError(f"sequence length {len(ids)} exceeds t_max {t_max}")
        if ids[-1] != EOS and len(ids) != t_max:
            raise ContractError(
                f"unterminated sequence must have length t_max={t_max}, got {len(ids)}"
            )
    return ids


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _u(rng, shape):
    return Tensor(rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape))


class CellParams:
    """Gated recurrent cell (GRU-style), input width k, state width d."""

    def __init__(self, rng, k: int, d: int):
        self.d = d
        self.Wzr = _u(rng, (k, 2 * d))
        self.Uzr = _u(rng, (d, 2 * d))
        self.bzr = Tensor(np.zeros((1, 2 * d)))
        self.Wn = _u(rng, (k, d))
        self.Un = _u(rng, (d, d))
        self.bn = Tensor(np.zeros((1, d)))

    def named(self, prefix):
        return {
            f"{prefix}.Wzr": self.Wzr, f"{prefix}.Uzr": self.Uzr,
            f"{prefix}.bzr": self.bzr, f"{prefix}.Wn": self.Wn,
            f"{prefix}.Un": self.Un, f"{prefix}.bn": self.bn,
        }

    def step(self, x: Tensor, s: Tensor) -> Tensor:
        d = self.d
        zr = ad.sigmoid(x @ self.Wzr + s @ self.Uzr + self.bzr)
        z = ad.slice_cols(zr, 0, d)
        r = ad.slice_cols(zr, d, 2 * d)
        n = ad.tanh(x @ self.Wn + (r * s) @ self.Un + self.bn)
        return n + z * (s - n)


class AttnParams:
    """Additive attention scorer: v' tanh(Ws s + Wh h_l)."""

    def __init__(self, rng, d: int):
        self.Ws = _u(rng, (d, d))
        self.Wh = _u(rng, (d, d))
        self.v = _u(rng, (d, 1))

    def named(self, prefix):
        return {f"{prefix}.Ws": self.Ws, f"{prefix}.Wh": self.Wh, f"{prefix}.v": self.v}


class FirstPassParams:
    """All trainable tensors of the single-pass model."""

    def __init__(self, vocab: Vocab, d: int, seed: int, context_in_state: bool = False):
        rng = np.random.Generator(np.random.PCG64(seed))
        self.vocab = vocab
        self.d = d
        self.context_in_state = context_in_state
        V = vocab.size
        self.enc_emb = _u(rng, (V, d))
        self.enc_cell = CellParams(rng, d, d)
        self.dec_emb = _u(rng, (V, d))
        dec_in = 2 * d if context_in_state else d
        self.dec_cell = CellParams(rng, dec_in, d)
        self.attn = AttnParams(rng, d)
        self.out_W = _u(rng, (2 * d, V))
        self.out_b = Tensor(np.zeros((1, V)))

    def named(self):
        out = {"first.enc.emb": self.enc_emb}
        out.update(self.enc_cell.named("first.enc.cell"))
        out["first.dec.emb"] = self.dec_emb
        out.update(self.dec_cell.named("first.dec.cell"))
        out.update(self.attn.named("first.attn"))
        out["first.out.W"] = self.out_W
        out["first.out.b"] = self.out_b
        return out

    def encoder_named(self):
        out = {"first.enc.emb": self.enc_emb}
        out.update(self.enc_cell.named("first.enc.cell"))
        return out


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def encode(x: Seq, params: FirstPassParams) -> Tensor:
    """Encoder hidden states as an (L, d) matrix, one row per input token."""
    x = check_token_seq(x, params.vocab)
    d = params.d
    emb = ad.embed(params.enc_emb, x)
    s = ad.const(np.zeros((1, d)))
    rows = []
    for l in range(len(x)):
        s = params.enc_cell.step(ad.slice_rows(emb, l, l + 1), s)
        rows.append(s)
    return rows[0] if len(rows) == 1 else ad.concat_rows(rows)


def attend(s: Tensor, h: Tensor, attn: AttnParams, h_proj: Tensor | None = None):
    """Alignment row (1, L) and context (1, d) for one decoder state."""
    if h.data.shape[0] < 1:
        raise ContractError("attention needs at least one encoder state")
    if h_proj is None:
        h_proj = h @ attn.Wh
    u = ad.tanh(h_proj + (s @ attn.Ws))
    scores = ad.transpose(u @ attn.v)
    alpha = ad.softmax(scores)
    return alpha, alpha @ h


def decode_step(s_prev: Tensor, prev_token: int, h: Tensor,
                params: FirstPassParams, c_prev: Tensor | None = None,
                h_proj: Tensor | None = None):
    """One decoder step: new state, alignment row, context, (1, V) logits."""
    e = ad.embed(params.dec_emb, (prev_token,))
    if params.context_in_state:
        if c_prev is None:
            raise ContractError("context_in_state model needs c_prev")
        e = ad.concat_cols([e, c_prev])
    s = params.dec_cell.step(e, s_prev)
    alpha, c = attend(s, h, params.attn, h_proj)
    logits = ad.concat_cols([s, c]) @ params.out_W + params.out_b
    return s, alpha, c, logits


def emit_log_dist(logits: Tensor) -> Tensor:
    """Log-probabilities over emittable ids 1..V-1 (column j = token j+1)."""
    return ad.log_softmax(ad.slice_cols(logits, 1, logits.data.shape[1]))


def emit_dist(logits: Tensor) -> np.ndarray:
    """Probabilities over emittable ids as a flat float array."""
    x = logits.data[0, 1:]
    m = x.max()
    e = np.exp(x - m)
    return e / e.sum()


# ---------------------------------------------------------------------------
# scoring and generation
# ---------------------------------------------------------------------------

class DecoderRun:
    """Per-step record of one teacher-forced or free-running decode."""

    def __init__(self):
        self.states: list[Tensor] = []
        self.contexts: list[Tensor] = []
        self.alphas: list[Tensor] = []
        self.step_logprobs: list[Tensor] = []
        self.dists: list[np.ndarray] = []


def _zero_state(d):
    return ad.const(np.zeros((1, d)))


def teacher_forced_run(x: Seq, y: Seq, params: FirstPassParams,
                       want_dists: bool = False) -> DecoderRun:
    h = encode(x, params)
    h_proj = h @ params.attn.Wh
    run = DecoderRun()
    s = _zero_state(params.d)
    c = _zero_state(params.d)
    prev = BOS
    for t in range(len(y)):
        s, alpha, c, logits = decode_step(s, prev, h, params, c_prev=c, h_proj=h_proj)
        logd = emit_log_dist(logits)
        run.states.append(s)
        run.contexts.append(c)
        run.alphas.append(alpha)
        run.step_logprobs.append(ad.pick(logd, 0, y[t] - 1))
        if want_dists:
            run.dists.append(np.exp(logd.data[0]))
        prev = y[t]
    return run


def teacher_forced_logprob(x: Seq, y: Seq, params: FirstPassParams):
    """Log p(y | x) under teacher forcing.

    Returns (total, per_step, attn): total is a scalar graph tensor suitable
    for backward(); per_step are plain floats; attn stacks the alignment rows.
    """
    x = check_token_seq(x, params.vocab)
    y = check_token_seq(y, params.vocab)
    run = teacher_forced_run(x, y, params)
    total = ad.reduce_sum(ad.concat_cols(run.step_logprobs))
    per_step = [t.item() for t in run.step_logprobs]
    attn = np.concatenate([a.data for a in run.alphas], axis=0)
    return total, per_step, attn


def step_scores(logits: Tensor, temperature: float) -> np.ndarray:
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    return logits.data[0, 1:] / temperature


class FreeRunResult:
    def __init__(self, ids, logprob, states, contexts, alphas):
        self.ids = ids
        self.logprob = logprob
        self.states = states
        self.contexts = contexts
        self.alphas = alphas


def free_run(x: Seq, params: FirstPassParams, t_max: int,
             select, collect=False) -> FreeRunResult:
    """Autoregressive decode; ``select(step_index, scores)`` picks each token.

    ``scores`` are the emittable-token scores (log-scale, unnormalized);
    the chosen index is relative to id 1. Stops after EOS or t_max tokens.
    """
    h = encode(x, params)
    h_proj = h @ params.attn.Wh
    s = _zero_state(params.d)
    c = _zero_state(params.d)
    prev = BOS
    ids = []
    logprob = 0.0
    states, contexts, alphas = [], [], []
    for t in range(t_max):
        s, alpha, c, logits = decode_step(s, prev, h, params, c_prev=c, h_proj=h_proj)
        logd = logits.data[0, 1:]
        logd = logd - logd.max()
        logd = logd - np.log(np.exp(logd).sum())
        k = select(t, logits)
        ids.append(k + 1)
        logprob += float(logd[k])
        if collect:
            states.append(s.data.copy())
            contexts.append(c.data.copy())
            alphas.append(alpha.data.copy())
        if ids[-1] == EOS:
            break
        prev = ids[-1]
    return FreeRunResult(tuple(ids), logprob, states, contexts, alphas)


def gumbel_select(rng, temperature=1.0):
    """Selector drawing exact softmax samples via the Gumbel-max trick."""

    def select(t, logits):
        z = rng.gumbel(size=logits.data.shape[1] - 1)
        return int(np.argmax(step_scores(logits, temperature) + z))

    return select


def greedy_select(t, logits):
    return int(np.argmax(logits.data[0, 1:]))


def beam_search(x: Seq, params: FirstPassParams, width: int, t_max: int):
    """All finished hypotheses, best-first, pruned to ``width`` live beams."""
    if width < 1:
        raise ContractError("beam width must be >= 1")
    h = encode(x, params)
    h_proj = h @ params.attn.Wh
    live = [((), 0.0, _zero_state(params.d), _zero_state(params.d), BOS)]
    done = []
    for t in range(t_max):
        cands = []
        for ids, lp, s, c, prev in live:
            s2, _, c2, logits = decode_step(s, prev, h, params, c_prev=c, h_proj=h_proj)
            logd = logits.data[0, 1:]
            logd = logd - logd.max()
            logd = logd - np.log(np.exp(logd).sum())
            for k in range(logd.shape[0]):
                cands.append((ids + (k + 1,), lp + float(logd[k]), s2, c2, k + 1))
        cands.sort(key=lambda b: (-b[1], b[0]))
        live = []
        for ids, lp, s, c, prev in cands[:width]:
            if ids[-1] == EOS:
                done.append((ids, lp))
            else:
                live.append((ids, lp, s, c, prev))
        if not live:
            break
    done.extend((ids, lp) for ids, lp, _, _, _ in live)
    done.sort(key=lambda b: (-b[1], b[0]))
    return done


def generate(x: Seq, params: FirstPassParams, mode: str = "greedy",
             t_max: int = 16, seed: int | None = None, temperature: float = 1.0,
             width: int = 1, collect=False):
    """Free-running generation. Returns (ids, logprob) or a FreeRunResult.

    mode: "greedy", "sample" (Gumbel-max at the given temperature, seeded),
    or "beam" (best of ``width``).
    """
    x = check_token_seq(x, params.vocab)
    if t_max < 1:
        raise ContractError("t_max must be >= 1")
    if mode == "greedy":
        res = free_run(x, params, t_max, greedy_select, collect=collect)
    elif mode == "sample":
        if seed is None:
            raise ContractError("sample mode needs a seed")
        rng = np.random.Generator(np.random.PCG64(seed))
        res = free_run(x, params, t_max, gumbel_select(rng, temperature), collect=collect)
    elif mode == "beam":
        hyps = beam_search(x, params, width, t_max)
        ids, lp = hyps[0]
        res = FreeRunResult(ids, lp, [], [], [])
    else:
        raise ContractError(f"unknown generation mode {mode!r}")
    if collect:
        return res
    return res.ids, res.logprob
