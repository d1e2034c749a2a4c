"""Losses and update schemes for the two-pass model.

Three families:

* joint, gradients approximated: sample intermediates, weight the first
  pass's score-function gradient by the second pass's log-likelihood
  (the second pass itself is plain teacher forcing on the reference);
* joint, loss approximated: reparameterize the sampling with per-step Gumbel
  noise so the relaxed intermediate is differentiable, and backpropagate the
  sampled loss into the first pass directly;
* separate: teacher-force the first pass, freeze it, pre-generate samples,
  then train the second pass alone (parallelizable across time because every
  conditioning sequence is known in advance).

Gradient bookkeeping: the x-encoder is stored once and owned by the first
pass. When scoring the second pass, schemes pass a detached encoding so the
second pass's gradient map covers exactly its own parameters; the first
pass's map is the score-function (or pathwise) term.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DataError, NonFiniteGradientError
from .evaluation import levenshtein
from .model import (
    BOS, EOS, FirstPassParams, Seq, decode_step, encode, gumbel_select,
    teacher_forced_logprob, teacher_forced_run, beam_search, free_run,
    _zero_state,
)
from .oracle import enumerate_space, DEFAULT_CAP
from .prng import derive_seed
from .second_pass import (
    IntermediateFeatures, SecondPassParams, as_intermediate,
    second_pass_logprob, second_teacher_forced_run, y_encoder_states,
)


@dataclass
class SamplingStrategy:
    """How intermediate sequences are drawn from the first pass."""
    kind: str = "ancestral"          # ancestral | noisy_greedy | beam
    temperature: float = 1.0
    width: int = 4

    def __post_init__(self):
        if self.kind not in ("ancestral", "noisy_greedy", "beam"):
            raise ContractError(f"unknown sampling strategy {self.kind!r}")
        if self.temperature <= 0:
            raise ContractError("temperature must be positive")
        if self.width < 1:
            raise ContractError("beam width must be >= 1")


@dataclass
class Scheme:
    """Training scheme selector."""
    kind: str                        # joint_grad | joint_loss | separate
    M: int = 4
    tau: float = 1.0
    strategy: SamplingStrategy = field(default_factory=SamplingStrategy)

    def __post_init__(self):
        if self.kind not in ("joint_grad", "joint_loss", "separate"):
            raise ContractError(f"unknown scheme {self.kind!r}")
        if self.M < 1:
            raise ContractError("M must be >= 1")
        if self.tau <= 0:
            raise ContractError("tau must be positive")


@dataclass
class LossReport:
    nll: float | None = None
    mbr: float | None = None
    joint: float | None = None
    guided_attention: float | None = None
    combined: float | None = None
    sample_mixture_nll: float | None = None
    grad_norms: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def __post_init__(self):
        for name in ("nll", "mbr", "joint", "guided_attention", "combined",
                     "sample_mixture_nll"):
            v = getattr(self, name)
            if v is not None and not np.isfinite(v):
                raise NonFiniteGradientError(f"loss report field {name} is {v}")


class SampleSet:
    """M intermediate sequences with their first-pass log-probabilities."""

    def __init__(self, features, logprobs, gumbels=None):
        self.features = [as_intermediate(f) for f in features]
        self.logprobs = [float(l) for l in logprobs]
        for l in self.logprobs:
            if l > 1e-12:
                raise ContractError(f"log-probability {l} > 0")
        self.gumbels = gumbels

    @property
    def samples(self):
        return [f.tokens for f in self.features]

    def __len__(self):
        return len(self.features)


# ---------------------------------------------------------------------------
# gradient utilities
# ---------------------------------------------------------------------------

def zeros_like_named(named):
    return {k: np.zeros_like(v.data) for k, v in named.items()}


def accumulate(acc, grads, weight=1.0):
    for k, g in grads.items():
        acc[k] += weight * g


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def group_norms(grads) -> dict:
    groups = {}
    for k, g in grads.items():
        head = k.split(".", 1)[0]
        groups[head] = groups.get(head, 0.0) + float((g * g).sum())
    return {k: float(np.sqrt(v)) for k, v in groups.items()}


def sgd_update(named_params, grads, lr: float, clip: float = 0.0):
    """In-place SGD step with global-norm clipping; rejects non-finite grads."""
    if lr <= 0:
        raise ContractError("learning rate must be positive")
    gnorm = global_norm(grads)
    if not np.isfinite(gnorm):
        bad = [k for k, g in grads.items() if not np.isfinite(g).all()]
        raise NonFiniteGradientError(f"non-finite gradient in {bad}")
    factor = 1.0
    if clip > 0 and gnorm > clip:
        factor = clip / gnorm
    for k, p in named_params.items():
        if k in grads:
            p.data -= lr * factor * grads[k]
    return named_params


# ---------------------------------------------------------------------------
# first-pass objectives
# ---------------------------------------------------------------------------

def nll_teacher_forcing(first: FirstPassParams, batch):
    """Mean teacher-forcing negative log-likelihood and its exact gradients."""
    if not batch:
        raise ContractError("empty batch")
    t0 = time.perf_counter()
    named = first.named()
    grads = zeros_like_named(named)
    total = 0.0
    w = 1.0 / len(batch)
    for x, y in batch:
        with ad.Tape():
            tot, _, _ = teacher_forced_logprob(x, y, first)
            g = ad.backward(tot, named)
        total -= w * tot.item()
        accumulate(grads, g, -w)
    report = LossReport(nll=total, grad_norms=group_norms(grads),
                        wall_time=time.perf_counter() - t0)
    return report, grads


def separate_train_first(first: FirstPassParams, batch):
    """First phase of separate training: a standard teacher-forced model."""
    return nll_teacher_forcing(first, batch)


def _distance_fn(distance):
    if callable(distance):
        return distance
    if distance == "zero_one":
        return lambda ref, cand: 0.0 if tuple(ref) == tuple(cand) else 1.0
    if distance == "levenshtein":
        return lambda ref, cand: float(levenshtein(ref, cand))
    raise ContractError(f"unknown distance {distance!r}")


def mbr_loss(first: FirstPassParams, batch, distance="levenshtein",
             mode: str = "exact", t_max: int = 8, cap: int = DEFAULT_CAP,
             M: int = 4, seed: int = 0):
    """Expected risk under the model distribution.

    exact: enumerate the output space and differentiate the exact expectation.
    sampled: M-sample estimate with score-function gradients.
    """
    if not batch:
        raise ContractError("empty batch")
    t0 = time.perf_counter()
    dist = _distance_fn(distance)
    named = first.named()
    grads = zeros_like_named(named)
    total = 0.0
    w = 1.0 / len(batch)
    if mode == "exact":
        space = enumerate_space(first.vocab, t_max, cap)
        for x, y in batch:
            risks = [dist(y, cand) for cand in space]
            with ad.Tape():
                terms = []
                for cand, r in zip(space, risks):
                    lp, _, _ = teacher_forced_logprob(x, cand, first)
                    terms.append(ad.scale(ad.exp(lp), r))
                loss = ad.reduce_sum(ad.concat_cols(terms))
                g = ad.backward(loss, named)
            total += w * loss.item()
            accumulate(grads, g, w)
    elif mode == "sampled":
        for b, (x, y) in enumerate(batch):
            rng_seed = derive_seed(seed, b)
            for m in range(M):
                rng = np.random.Generator(np.random.PCG64(derive_seed(rng_seed, m)))
                res = free_run(x, first, t_max, gumbel_select(rng))
                r = dist(y, res.ids)
                total += w * r / M
                with ad.Tape():
                    lp, _, _ = teacher_forced_logprob(x, res.ids, first)
                    g = ad.backward(lp, named)
                accumulate(grads, g, w * r / M)
    else:
        raise ContractError(f"unknown mbr mode {mode!r}")
    report = LossReport(mbr=total, grad_norms=group_norms(grads),
                        wall_time=time.perf_counter() - t0)
    return report, grads


# ---------------------------------------------------------------------------
# intermediate sampling
# ---------------------------------------------------------------------------

def _recording_gumbel_select(rng, temperature, record):
    def select(t, logits):
        z = rng.gumbel(size=logits.data.shape[1] - 1)
        record.append(z)
        return int(np.argmax(logits.data[0, 1:] / temperature + z))
    return select


def draw_intermediate_samples(first: FirstPassParams, x: Seq, M: int,
                              strategy: SamplingStrategy, seed: int,
                              t_max: int, collect_extras: bool = False) -> SampleSet:
    """M free-running draws from the first pass, reproducible from the seed.

    Ancestral draws are exact samples from the model's sequence distribution
    (Gumbel-argmax per step at temperature 1). Sample m consumes its own
    generator seeded by derive_seed(seed, m).
    """
    if M < 1:
        raise ContractError("M must be >= 1")
    feats, lps, gumbels = [], [], []
    if strategy.kind == "beam":
        hyps = beam_search(x, first, max(strategy.width, M), t_max)
        hyps = hyps[:M]
        for ids, lp in hyps:
            feats.append(IntermediateFeatures(ids))
            lps.append(lp)
        return SampleSet(feats, lps)
    temp = 1.0 if strategy.kind == "ancestral" else strategy.temperature
    for m in range(M):
        rng = np.random.Generator(np.random.PCG64(derive_seed(seed, m)))
        record = []
        res = free_run(x, first, t_max,
                       _recording_gumbel_select(rng, temp, record),
                       collect=collect_extras)
        if collect_extras:
            feats.append(IntermediateFeatures(res.ids, res.states, res.contexts))
        else:
            feats.append(IntermediateFeatures(res.ids))
        lps.append(res.logprob)
        gumbels.append(record)
    return SampleSet(feats, lps, gumbels)


# ---------------------------------------------------------------------------
# joint training, Monte Carlo on the gradients
# ---------------------------------------------------------------------------

def joint_grad_step(first: FirstPassParams, second: SecondPassParams,
                    batch, M: int, seed: int, t_max: int,
                    strategy: SamplingStrategy | None = None,
                    sampler=None):
    """Score-function scheme: the first pass's gradient weights each sampled
    sequence's score gradient by the second pass's log-likelihood; the second
    pass gets plain teacher-forcing gradients on the reference.

    ``sampler(x, y, M, seed) -> SampleSet`` overrides the default free-running
    draw (used to condition intermediates on the reference back-history).
    """
    if not batch:
        raise ContractError("empty batch")
    strategy = strategy or SamplingStrategy("ancestral")
    t0 = time.perf_counter()
    namedI = first.named()
    namedII = second.named()
    gradI = zeros_like_named(namedI)
    gradII = zeros_like_named(namedII)
    joint = 0.0
    w = 1.0 / (len(batch) * M)
    for b, (x, y) in enumerate(batch):
        if sampler is not None:
            ss = sampler(x, y, M, derive_seed(seed, b))
        else:
            ss = draw_intermediate_samples(
                first, x, M, strategy, derive_seed(seed, b), t_max,
                collect_extras=second.extras)
        h_x_const = ad.const(encode(x, first).data)
        for m in range(M):
            with ad.Tape():
                totI, _, _ = teacher_forced_logprob(x, ss.samples[m], first)
                gI = ad.backward(totI, namedI)
            with ad.Tape():
                totII, _, _, _ = second_pass_logprob(
                    x, ss.features[m], y, second, h_x=h_x_const)
                gII = ad.backward(totII, namedII)
            lpII = totII.item()
            joint -= w * lpII
            accumulate(gradI, gI, -w * lpII)
            accumulate(gradII, gII, -w)
    norms = group_norms(gradI)
    norms.update(group_norms(gradII))
    report = LossReport(joint=joint, grad_norms=norms,
                        wall_time=time.perf_counter() - t0)
    return report, gradI, gradII


# ---------------------------------------------------------------------------
# joint training, Monte Carlo on the loss (reparameterized)
# ---------------------------------------------------------------------------

def _relaxed_first_pass(first, second, x, h_x, tau, rng, t_max, relaxation):
    """Free-run the first pass on the tape, building relaxed y-encoder rows.

    Per step: draw Gumbel noise z, take the hard token argmax(logits + z)
    (an exact ancestral sample), and build the relaxed emission
    softmax((logits + z)/tau). The y-encoder consumes relaxed-row @ embedding,
    with a hard forward under the straight_through relaxation. The hard token
    feeds the first-pass decoder; that feedback is locally constant.
    """
    V = first.vocab.size
    h_proj = h_x @ first.attn.Wh
    yemb = ad.slice_rows(second.yenc_emb, 1, V)
    s = _zero_state(first.d)
    c = _zero_state(first.d)
    prev = BOS
    ids = []
    rows = []
    for t in range(t_max):
        s, _, c, logits = decode_step(s, prev, h_x, first, c_prev=c, h_proj=h_proj)
        em = ad.slice_cols(logits, 1, V)
        z = rng.gumbel(size=V - 1)
        k = int(np.argmax(em.data[0] + z))
        soft = ad.softmax(ad.scale(em + ad.const(z.reshape(1, -1)), 1.0 / tau))
        if relaxation == "straight_through":
            hard = np.zeros((1, V - 1))
            hard[0, k] = 1.0
            weights = ad.straight_through(hard, soft)
        elif relaxation == "relaxed":
            weights = soft
        else:
            raise ContractError(f"unknown relaxation {relaxation!r}")
        row = weights @ yemb
        if second.extras:
            row = ad.concat_cols([row, ad.const(s.data), ad.const(c.data)])
        rows.append(row)
        ids.append(k + 1)
        if ids[-1] == EOS:
            break
        prev = ids[-1]
    return tuple(ids), rows


def joint_loss_step(first: FirstPassParams, second: SecondPassParams,
                    batch, M: int, tau: float, seed: int, t_max: int,
                    relaxation: str = "straight_through"):
    """Reparameterized scheme: the sampled loss itself is differentiated.

    The first pass's gradient is pathwise, flowing through the relaxed
    intermediate into the decoder logits (and through the encoder, which the
    second pass also reads). Given the same noise, the hard samples equal the
    ancestral draws of joint_grad_step, and so do the second pass's gradients.
    """
    if not batch:
        raise ContractError("empty batch")
    if tau <= 0:
        raise ContractError("tau must be positive")
    t0 = time.perf_counter()
    namedI = first.named()
    namedII = second.named()
    both = {**namedI, **namedII}
    gradI = zeros_like_named(namedI)
    gradII = zeros_like_named(namedII)
    joint = 0.0
    w = 1.0 / (len(batch) * M)
    for b, (x, y) in enumerate(batch):
        bseed = derive_seed(seed, b)
        for m in range(M):
            rng = np.random.Generator(np.random.PCG64(derive_seed(bseed, m)))
            with ad.Tape():
                h_x = encode(x, first)
                ids, rows = _relaxed_first_pass(
                    first, second, x, h_x, tau, rng, t_max, relaxation)
                h_y = y_encoder_states(second, rows)
                run = second_teacher_forced_run(x, None, y, second,
                                                h_x=h_x, h_y=h_y)
                totII = ad.reduce_sum(ad.concat_cols(run.step_logprobs))
                loss = ad.scale(totII, -1.0)
                g = ad.backward(loss, both)
            joint += w * loss.item()
            for k in gradI:
                gradI[k] += w * g[k]
            for k in gradII:
                gradII[k] += w * g[k]
    norms = group_norms(gradI)
    norms.update(group_norms(gradII))
    report = LossReport(joint=joint, grad_norms=norms,
                        wall_time=time.perf_counter() - t0)
    return report, gradI, gradII


# ---------------------------------------------------------------------------
# separate training, second phase
# ---------------------------------------------------------------------------

def separate_train_second(second: SecondPassParams, batch, stored):
    """Train the second pass on pre-generated samples; the first pass is
    frozen and receives no gradient.

    The optimized loss is the per-sample mean NLL -(1/M) sum_m log F2_m; the
    mixture form -log[(1/M) sum_m F2_m] is reported alongside it.
    """
    if not batch:
        raise ContractError("empty batch")
    if len(stored) != len(batch):
        raise DataError(f"{len(batch)} examples but {len(stored)} sample sets")
    t0 = time.perf_counter()
    namedII = second.named()
    grads = zeros_like_named(namedII)
    total = 0.0
    mixture = 0.0
    for b, (x, y) in enumerate(batch):
        ss = stored[b]
        if ss is None or len(ss) == 0:
            raise DataError(f"no stored samples for example {b}")
        w = 1.0 / (len(batch) * len(ss))
        h_x_const = ad.const(encode(x, second.first).data)
        lps = []
        for feats in ss.features:
            with ad.Tape():
                tot, _, _, _ = second_pass_logprob(x, feats, y, second,
                                                   h_x=h_x_const)
                g = ad.backward(tot, namedII)
            lps.append(tot.item())
            total -= w * tot.item()
            accumulate(grads, g, -w)
        lps = np.array(lps)
        m = lps.max()
        mixture -= (m + np.log(np.mean(np.exp(lps - m)))) / len(batch)
    report = LossReport(nll=total, sample_mixture_nll=float(mixture),
                        grad_norms=group_norms(grads),
                        wall_time=time.perf_counter() - t0)
    return report, grads


# ---------------------------------------------------------------------------
# guided attention
# ---------------------------------------------------------------------------

def guided_attention_weights(T: int, T_I: int, g: float) -> np.ndarray:
    """Penalty grid w[t,l] = 1 - exp(-(t/T - l/T_I)^2 / (2 g^2)), 1-based."""
    if g <= 0:
        raise ContractError("sharpness g must be positive")
    t = np.arange(1, T + 1)[:, None] / T
    l = np.arange(1, T_I + 1)[None, :] / T_I
    return 1.0 - np.exp(-((t - l) ** 2) / (2.0 * g * g))


def guided_attention_loss(attn_y: np.ndarray, g: float) -> float:
    """Total attention mass weighted by off-diagonal penalty."""
    attn_y = np.asarray(attn_y, dtype=np.float64)
    T, T_I = attn_y.shape
    return float((attn_y * guided_attention_weights(T, T_I, g)).sum())


def _guided_loss_graph(alphas_y, g):
    alpha = ad.concat_rows(alphas_y) if len(alphas_y) > 1 else alphas_y[0]
    W = guided_attention_weights(alpha.data.shape[0], alpha.data.shape[1], g)
    return ad.reduce_sum(alpha * ad.const(W))


def combined_second_pass_loss(second: SecondPassParams, batch, stored,
                              gamma: float, g: float):
    """Second-pass NLL plus gamma times the guided-attention penalty,
    averaged over batch and samples."""
    if gamma < 0:
        raise ContractError("gamma must be >= 0")
    if not batch:
        raise ContractError("empty batch")
    if len(stored) != len(batch):
        raise DataError(f"{len(batch)} examples but {len(stored)} sample sets")
    t0 = time.perf_counter()
    namedII = second.named()
    grads = zeros_like_named(namedII)
    nll = 0.0
    ga = 0.0
    for b, (x, y) in enumerate(batch):
        ss = stored[b]
        if ss is None or len(ss) == 0:
            raise DataError(f"no stored samples for example {b}")
        w = 1.0 / (len(batch) * len(ss))
        h_x_const = ad.const(encode(x, second.first).data)
        for feats in ss.features:
            with ad.Tape():
                run = second_teacher_forced_run(x, feats, y, second,
                                                h_x=h_x_const)
                totII = ad.reduce_sum(ad.concat_cols(run.step_logprobs))
                la = _guided_loss_graph(run.alphas_y, g)
                loss = ad.scale(totII, -1.0) + ad.scale(la, gamma)
                gr = ad.backward(loss, namedII)
            nll -= w * totII.item()
            ga += w * la.item()
            accumulate(grads, gr, w)
    report = LossReport(nll=nll, guided_attention=ga,
                        combined=nll + gamma * ga,
                        grad_norms=group_norms(grads),
                        wall_time=time.perf_counter() - t0)
    return report, grads


# ---------------------------------------------------------------------------
# information-gain diagnostic
# ---------------------------------------------------------------------------

def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def teacher_forced_intermediate(first: FirstPassParams, x: Seq, y: Seq,
                                rng=None, temperature: float | None = None) -> Seq:
    """One intermediate sequence emitted with the reference as back-history.

    Each step takes the model's most likely token given the *reference*
    prefix (pass a temperature and rng for a noisy variant). Because the
    history is always correct, the result tracks the reference closely for a
    trained model; that similarity is the point of this mode. The output is
    truncated at its first EOS and forced to end with EOS otherwise, so it
    is always a valid sequence.
    """
    h = encode(x, first)
    h_proj = h @ first.attn.Wh
    s = _zero_state(first.d)
    c = _zero_state(first.d)
    prev = BOS
    out = []
    for t in range(len(y)):
        s, _, c, logits = decode_step(s, prev, h, first, c_prev=c, h_proj=h_proj)
        scores = logits.data[0, 1:].copy()
        if temperature is not None:
            if rng is None:
                raise ContractError("noisy teacher-forced draw needs an rng")
            scores = scores / temperature + rng.gumbel(size=scores.shape[0])
        k = int(np.argmax(scores))
        out.append(k + 1)
        if out[-1] == EOS:
            break
        prev = y[t]
    if out[-1] != EOS:
        out[-1] = EOS
    return tuple(out)


def info_gain_estimate(first: FirstPassParams, second: SecondPassParams,
                       batch, intermediate_mode: str = "free_running",
                       seed: int = 0, t_max: int = 16) -> float:
    """Mean per-step entropy drop from conditioning on the intermediate
    output (single sample per example, reference back-history throughout)."""
    if intermediate_mode not in ("free_running", "teacher_forced"):
        raise ContractError(f"unknown intermediate mode {intermediate_mode!r}")
    if not batch:
        raise ContractError("empty batch")
    gains = []
    for b, (x, y) in enumerate(batch):
        rng = np.random.Generator(np.random.PCG64(derive_seed(seed, b)))
        if intermediate_mode == "free_running":
            res = free_run(x, first, t_max, gumbel_select(rng),
                           collect=second.extras)
            feats = (IntermediateFeatures(res.ids, res.states, res.contexts)
                     if second.extras else IntermediateFeatures(res.ids))
        else:
            ids = teacher_forced_intermediate(first, x, y, rng)
            if second.extras:
                runf = teacher_forced_run(x, ids, first)
                feats = IntermediateFeatures(
                    ids, [s.data.copy() for s in runf.states],
                    [c.data.copy() for c in runf.contexts])
            else:
                feats = IntermediateFeatures(ids)
        runI = teacher_forced_run(x, y, first, want_dists=True)
        runII = second_teacher_forced_run(x, feats, y, second, want_dists=True)
        per_t = [_entropy(pI) - _entropy(pII)
                 for pI, pII in zip(runI.dists, runII.dists)]
        gains.append(float(np.mean(per_t)))
    return float(np.mean(gains))
