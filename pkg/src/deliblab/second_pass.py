"""Second-pass refinement model: dual attention over the input sequence and
the first pass's output.

The x-side encoder is the first pass's encoder (same tensor objects, so an
update through either handle moves both). Everything else is owned by this
pass: its own decoder, an encoder for the first-pass output, two attention
scorers, and an output projection over [state; x-context; y-context].
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .model import (
    BOS, EOS, AttnParams, CellParams, FirstPassParams, FreeRunResult, Seq,
    _u, _zero_state, attend, check_token_seq, emit_log_dist, encode,
    generate, greedy_select, gumbel_select,
)


class IntermediateFeatures:
    """First-pass output tokens, optionally with per-step states/contexts."""

    def __init__(self, tokens: Seq, states=None, contexts=None):
        self.tokens = tuple(int(t) for t in tokens)
        if not self.tokens:
            raise ContractError(
                "empty first-pass output; materialize it as a single EOS token"
            )
        if (states is None) != (contexts is None):
            raise ContractError("states and contexts must be given together")
        if states is not None and (len(states) != len(self.tokens)
                                   or len(contexts) != len(self.tokens)):
            raise ContractError("per-step extras must align with the tokens")
        self.states = states
        self.contexts = contexts

    @property
    def has_extras(self):
        return self.states is not None


def as_intermediate(y_first) -> IntermediateFeatures:
    if isinstance(y_first, IntermediateFeatures):
        return y_first
    return IntermediateFeatures(tuple(y_first))


class SecondPassParams:
    """Second-pass parameters; shares the x-encoder with the first pass."""

    def __init__(self, first: FirstPassParams, seed: int, extras: bool = False):
        rng = np.random.Generator(np.random.PCG64(seed))
        self.first = first
        self.vocab = first.vocab
        self.d = first.d
        self.extras = extras
        V = self.vocab.size
        d = self.d
        self.dec_emb = _u(rng, (V, d))
        self.dec_cell = CellParams(rng, d, d)
        self.yenc_emb = _u(rng, (V, d))
        yin = 3 * d if extras else d
        self.yenc_cell = CellParams(rng, yin, d)
        self.attn_x = AttnParams(rng, d)
        self.attn_y = AttnParams(rng, d)
        self.out_W = _u(rng, (3 * d, V))
        self.out_b = Tensor(np.zeros((1, V)))

    def named(self):
        """Parameters owned by this pass (the shared encoder is not listed)."""
        out = {"second.dec.emb": self.dec_emb}
        out.update(self.dec_cell.named("second.dec.cell"))
        out["second.yenc.emb"] = self.yenc_emb
        out.update(self.yenc_cell.named("second.yenc.cell"))
        out.update(self.attn_x.named("second.attn_x"))
        out.update(self.attn_y.named("second.attn_y"))
        out["second.out.W"] = self.out_W
        out["second.out.b"] = self.out_b
        return out


def y_encoder_states(params: SecondPassParams, input_rows: list[Tensor]) -> Tensor:
    """Run the y-encoder over prepared input rows; returns (T_I, d)."""
    if not input_rows:
        raise ContractError("y-encoder needs at least one input row")
    s = _zero_state(params.d)
    rows = []
    for r in input_rows:
        s = params.yenc_cell.step(r, s)
        rows.append(s)
    return rows[0] if len(rows) == 1 else ad.concat_rows(rows)


def encode_first_output(params: SecondPassParams, y_first: IntermediateFeatures) -> Tensor:
    """Embed first-pass output tokens (plus extras when enabled) and encode."""
    feats = as_intermediate(y_first)
    emb = ad.embed(params.yenc_emb, feats.tokens)
    rows = []
    for t in range(len(feats.tokens)):
        r = ad.slice_rows(emb, t, t + 1)
        if params.extras:
            if not feats.has_extras:
                raise ContractError("extras-enabled model needs per-step extras")
            r = ad.concat_cols([
                r, ad.const(feats.states[t]), ad.const(feats.contexts[t]),
            ])
        rows.append(r)
    return y_encoder_states(params, rows)


def second_pass_step(s_prev: Tensor, prev_token: int, h_x: Tensor, h_y: Tensor,
                     params: SecondPassParams,
                     h_proj_x: Tensor | None = None,
                     h_proj_y: Tensor | None = None):
    """One refinement decoder step.

    Returns (state, alpha_x, alpha_y, c_x, c_y, logits); logits condition on
    the concatenation [state; c_x; c_y].
    """
    if h_y.data.shape[0] < 1:
        raise ContractError("h_y must be nonempty (encode [EOS] for a degenerate pass)")
    e = ad.embed(params.dec_emb, (prev_token,))
    s = params.dec_cell.step(e, s_prev)
    alpha_x, c_x = attend(s, h_x, params.attn_x, h_proj_x)
    alpha_y, c_y = attend(s, h_y, params.attn_y, h_proj_y)
    logits = ad.concat_cols([s, c_x, c_y]) @ params.out_W + params.out_b
    return s, alpha_x, alpha_y, c_x, c_y, logits


class SecondRun:
    """Per-step record of a teacher-forced second-pass decode."""

    def __init__(self):
        self.step_logprobs: list[Tensor] = []
        self.alphas_x: list[Tensor] = []
        self.alphas_y: list[Tensor] = []
        self.dists: list[np.ndarray] = []


def second_teacher_forced_run(x: Seq, y_first, y: Seq, params: SecondPassParams,
                              h_x: Tensor | None = None,
                              h_y: Tensor | None = None,
                              want_dists: bool = False) -> SecondRun:
    if h_x is None:
        h_x = encode(x, params.first)
    if h_y is None:
        h_y = encode_first_output(params, y_first)
    h_proj_x = h_x @ params.attn_x.Wh
    h_proj_y = h_y @ params.attn_y.Wh
    run = SecondRun()
    s = _zero_state(params.d)
    prev = BOS
    for t in range(len(y)):
        s, ax, ay, cx, cy, logits = second_pass_step(
            s, prev, h_x, h_y, params, h_proj_x, h_proj_y)
        logd = emit_log_dist(logits)
        run.step_logprobs.append(ad.pick(logd, 0, y[t] - 1))
        run.alphas_x.append(ax)
        run.alphas_y.append(ay)
        if want_dists:
            run.dists.append(np.exp(logd.data[0]))
        prev = y[t]
    return run


def second_pass_logprob(x: Seq, y_first, y: Seq, params: SecondPassParams,
                        h_x: Tensor | None = None):
    """Log p(y | y_first, x) under teacher forcing on the reference.

    Returns (total, per_step, attn_x, attn_y). Pass a precomputed ``h_x`` to
    keep the shared encoder off the active tape when its gradient is not
    wanted.
    """
    x = check_token_seq(x, params.vocab)
    y = check_token_seq(y, params.vocab)
    feats = as_intermediate(y_first)
    check_token_seq(feats.tokens, params.vocab)
    run = second_teacher_forced_run(x, feats, y, params, h_x=h_x)
    total = ad.reduce_sum(ad.concat_cols(run.step_logprobs))
    per_step = [t.item() for t in run.step_logprobs]
    attn_x = np.concatenate([a.data for a in run.alphas_x], axis=0)
    attn_y = np.concatenate([a.data for a in run.alphas_y], axis=0)
    return total, per_step, attn_x, attn_y


def second_free_run(x: Seq, y_first, params: SecondPassParams, t_max: int,
                    select, collect: bool = False) -> FreeRunResult:
    """Autoregressive second-pass decode conditioned on (x, y_first)."""
    h_x = encode(x, params.first)
    h_y = encode_first_output(params, as_intermediate(y_first))
    h_proj_x = h_x @ params.attn_x.Wh
    h_proj_y = h_y @ params.attn_y.Wh
    s = _zero_state(params.d)
    prev = BOS
    ids = []
    logprob = 0.0
    alphas = []
    for t in range(t_max):
        s, ax, ay, cx, cy, logits = second_pass_step(
            s, prev, h_x, h_y, params, h_proj_x, h_proj_y)
        logd = logits.data[0, 1:]
        logd = logd - logd.max()
        logd = logd - np.log(np.exp(logd).sum())
        k = select(t, logits)
        ids.append(k + 1)
        logprob += float(logd[k])
        if collect:
            alphas.append((ax.data.copy(), ay.data.copy()))
        if ids[-1] == EOS:
            break
        prev = ids[-1]
    return FreeRunResult(tuple(ids), logprob, [], [], alphas)


def second_beam_search(x: Seq, y_first, params: SecondPassParams,
                       width: int, t_max: int):
    """Beam search over the refinement decoder; finished hypotheses best-first."""
    if width < 1:
        raise ContractError("beam width must be >= 1")
    h_x = encode(x, params.first)
    h_y = encode_first_output(params, as_intermediate(y_first))
    h_proj_x = h_x @ params.attn_x.Wh
    h_proj_y = h_y @ params.attn_y.Wh
    live = [((), 0.0, _zero_state(params.d), BOS)]
    done = []
    for t in range(t_max):
        cands = []
        for ids, lp, s, prev in live:
            s2, _, _, _, _, logits = second_pass_step(
                s, prev, h_x, h_y, params, h_proj_x, h_proj_y)
            logd = logits.data[0, 1:]
            logd = logd - logd.max()
            logd = logd - np.log(np.exp(logd).sum())
            for k in range(logd.shape[0]):
                cands.append((ids + (k + 1,), lp + float(logd[k]), s2, k + 1))
        cands.sort(key=lambda b: (-b[1], b[0]))
        live = []
        for ids, lp, s, prev in cands[:width]:
            if ids[-1] == EOS:
                done.append((ids, lp))
            else:
                live.append((ids, lp, s, prev))
        if not live:
            break
    done.extend((ids, lp) for ids, lp, _, _ in live)
    done.sort(key=lambda b: (-b[1], b[0]))
    return done


def two_pass_generate(x: Seq, first: FirstPassParams, second: SecondPassParams,
                      mode: str = "greedy", t_max: int = 16,
                      seed: int | None = None, temperature: float = 1.0,
                      width: int = 1):
    """Run the first pass free-running, then refine. Returns (y_first, y_hat)."""
    if second.extras:
        res = generate(x, first, mode=mode, t_max=t_max, seed=seed,
                       temperature=temperature, width=width, collect=True)
        feats = IntermediateFeatures(res.ids, res.states, res.contexts)
    else:
        ids, _ = generate(x, first, mode=mode, t_max=t_max, seed=seed,
                          temperature=temperature, width=width)
        feats = IntermediateFeatures(ids)
    if mode == "beam":
        hyps = second_beam_search(x, feats, second, width, t_max)
        return feats.tokens, hyps[0][0]
    if mode == "greedy":
        select = greedy_select
    elif mode == "sample":
        rng = np.random.Generator(np.random.PCG64(seed + 1))
        select = gumbel_select(rng, temperature)
    else:
        raise ContractError(f"unknown generation mode {mode!r}")
    res2 = second_free_run(x, feats, second, t_max, select)
    return feats.tokens, res2.ids
