"""Exact enumeration over tiny output spaces.

With a handful of content tokens and a short length cap, the full output
space is small enough to sum over directly. That turns marginal likelihoods,
expected risks and their gradients into exact quantities, against which the
Monte Carlo machinery in training.py can be validated statistically.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import CapacityError, ContractError
from .model import FirstPassParams, Seq, EOS, Vocab, encode, teacher_forced_logprob
from .prng import derive_seed
from .second_pass import SecondPassParams, second_pass_logprob

DEFAULT_CAP = 100_000


class EnumeratedSpace:
    """Every valid output sequence of length <= t_max, duplicate-free."""

    def __init__(self, vocab: Vocab, t_max: int, seqs: list[Seq]):
        self.vocab = vocab
        self.t_max = t_max
        self.seqs = seqs

    def __len__(self):
        return len(self.seqs)

    def __iter__(self):
        return iter(self.seqs)


def space_size(vocab: Vocab, t_max: int) -> int:
    """Closed-form count: EOS-terminated with k content tokens (k < t_max)
    plus unterminated sequences of exactly t_max content tokens."""
    n = vocab.n_content
    return sum(n ** k for k in range(t_max)) + n ** t_max


def enumerate_space(vocab: Vocab, t_max: int, cap: int = DEFAULT_CAP) -> EnumeratedSpace:
    if t_max < 1:
        raise ContractError("t_max must be >= 1")
    count = space_size(vocab, t_max)
    if count > cap:
        raise CapacityError(count, cap)
    content = list(vocab.content_ids)
    seqs: list[Seq] = []

    def grow(prefix):
        if len(prefix) < t_max:
            seqs.append(prefix + (EOS,))
        if len(prefix) == t_max:
            seqs.append(prefix)
            return
        for c in content:
            grow(prefix + (c,))

    grow(())
    assert len(seqs) == count
    return EnumeratedSpace(vocab, t_max, seqs)


# ---------------------------------------------------------------------------
# exact quantities
# ---------------------------------------------------------------------------

def _logprob_first(first, x, yI) -> float:
    total, _, _ = teacher_forced_logprob(x, yI, first)
    return total.item()


def _logprob_second(second, x, yI, y, h_x=None) -> float:
    total, _, _, _ = second_pass_logprob(x, yI, y, second, h_x=h_x)
    return total.item()


def first_pass_probs(first: FirstPassParams, x: Seq, space: EnumeratedSpace) -> np.ndarray:
    """p(yI | x) for every sequence of the space; sums to one."""
    return np.exp([_logprob_first(first, x, yI) for yI in space])


def exact_marginal(first: FirstPassParams, second: SecondPassParams,
                   x: Seq, y: Seq, space: EnumeratedSpace) -> float:
    """Sum over intermediates of p(yI|x) p(y|yI,x)."""
    h_x = ad.const(encode(x, first).data)
    total = 0.0
    for yI in space:
        total += np.exp(_logprob_first(first, x, yI)
                        + _logprob_second(second, x, yI, y, h_x=h_x))
    return float(total)


def exact_losses(first: FirstPassParams, second: SecondPassParams,
                 x: Seq, y: Seq, space: EnumeratedSpace):
    """(naive, bound): negative log marginal, and the Jensen upper bound."""
    h_x = ad.const(encode(x, first).data)
    marginal = 0.0
    bound = 0.0
    for yI in space:
        lpI = _logprob_first(first, x, yI)
        lpII = _logprob_second(second, x, yI, y, h_x=h_x)
        fI = np.exp(lpI)
        marginal += np.exp(lpI + lpII)
        bound += -fI * lpII
    return float(-np.log(marginal)), float(bound)


def exact_loss_graph(first: FirstPassParams, second: SecondPassParams,
                     x: Seq, y: Seq, space: EnumeratedSpace,
                     which: str = "bound") -> ad.Tensor:
    """The enumerated loss as one differentiable expression.

    Unlike exact_gradients, differentiating this scalar follows *every*
    dependence on parameter storage, including the second pass reading the
    shared x-encoder. Useful for finite-difference validation and as an
    independent route to the tabulated gradient forms.
    """
    if which not in ("bound", "naive"):
        raise ContractError(f"unknown loss kind {which!r}")
    h_x = encode(x, first)
    terms = []
    for yI in space:
        lpI, _, _ = teacher_forced_logprob(x, yI, first)
        lpII, _, _, _ = second_pass_logprob(x, yI, y, second, h_x=h_x)
        if which == "bound":
            terms.append(ad.exp(lpI) * lpII)
        else:
            terms.append(ad.exp(lpI + lpII))
    s = ad.reduce_sum(ad.concat_cols(terms))
    if which == "bound":
        return ad.scale(s, -1.0)
    return ad.scale(ad.log(s), -1.0)


def exact_gradients(first: FirstPassParams, second: SecondPassParams,
                    x: Seq, y: Seq, space: EnumeratedSpace,
                    which: str = "bound"):
    """Enumerated loss gradients, one weighted backward pass per sequence.

    "bound": single-sum forms -sum_yI F_I (log F_II) grad log F_I for the
    first pass and -sum_yI F_I grad log F_II for the second.
    "naive": ratio forms of the exact negative log marginal.
    Returns (grad_first, grad_second) keyed like the params' named() dicts.
    """
    if which not in ("bound", "naive"):
        raise ContractError(f"unknown gradient kind {which!r}")
    namedI = first.named()
    namedII = second.named()
    h_x_const = ad.const(encode(x, first).data)

    terms = []
    for yI in space:
        with ad.Tape():
            totI, _, _ = teacher_forced_logprob(x, yI, first)
            gI = ad.backward(totI, namedI)
        with ad.Tape():
            totII, _, _, _ = second_pass_logprob(x, yI, y, second, h_x=h_x_const)
            gII = ad.backward(totII, namedII)
        terms.append((totI.item(), totII.item(), gI, gII))

    gradI = {k: np.zeros_like(v.data) for k, v in namedI.items()}
    gradII = {k: np.zeros_like(v.data) for k, v in namedII.items()}
    if which == "bound":
        for lpI, lpII, gI, gII in terms:
            fI = np.exp(lpI)
            for k in gradI:
                gradI[k] -= fI * lpII * gI[k]
            for k in gradII:
                gradII[k] -= fI * gII[k]
    else:
        marginal = sum(np.exp(lpI + lpII) for lpI, lpII, _, _ in terms)
        for lpI, lpII, gI, gII in terms:
            w = np.exp(lpI + lpII) / marginal
            for k in gradI:
                gradI[k] -= w * gI[k]
            for k in gradII:
                gradII[k] -= w * gII[k]
    return gradI, gradII


# ---------------------------------------------------------------------------
# Monte Carlo estimator validation
# ---------------------------------------------------------------------------

class EstimatorStats:
    """Streaming per-coordinate moments of a gradient estimator vs the oracle."""

    def __init__(self, names_shapes, exact, trials):
        if trials < 2:
            raise ContractError("need at least 2 trials")
        self.trials = trials
        self.exact = exact
        self._sum = {k: np.zeros(s) for k, s in names_shapes.items()}
        self._sumsq = {k: np.zeros(s) for k, s in names_shapes.items()}
        self._n = 0

    def add(self, grads):
        self._n += 1
        for k, g in grads.items():
            self._sum[k] += g
            self._sumsq[k] += g * g

    def finalize(self):
        n = self._n
        self.mean = {k: v / n for k, v in self._sum.items()}
        self.var = {
            k: np.maximum(self._sumsq[k] / n - self.mean[k] ** 2, 0.0) * n / (n - 1)
            for k in self._sum
        }
        self.z = {}
        for k in self.mean:
            se = np.sqrt(self.var[k] / n)
            diff = self.mean[k] - self.exact[k]
            with np.errstate(divide="ignore", invalid="ignore"):
                z = np.where(se > 0, diff / np.where(se > 0, se, 1.0), 0.0)
            z = np.where((se == 0) & (np.abs(diff) > 1e-12), np.inf, z)
            self.z[k] = z
        self.max_abs_z = max(
            (float(np.abs(z).max()) for z in self.z.values()), default=0.0)
        return self

    def flat_var(self):
        return np.concatenate([v.ravel() for v in self.var.values()])


def verify_estimator(first: FirstPassParams, second: SecondPassParams,
                     batch, scheme, M: int, trials: int, seed: int,
                     t_max: int, cap: int = DEFAULT_CAP) -> EstimatorStats:
    """Run a scheme's gradient estimator many times against the enumerated
    bound gradients. Per-trial seeds derive from (seed, trial)."""
    from . import training  # imported here: training builds on this module

    space = enumerate_space(first.vocab, t_max, cap)
    namedI = first.named()
    namedII = second.named()
    exactI = {k: np.zeros_like(v.data) for k, v in namedI.items()}
    exactII = {k: np.zeros_like(v.data) for k, v in namedII.items()}
    for x, y in batch:
        gI, gII = exact_gradients(first, second, x, y, space, "bound")
        for k in exactI:
            exactI[k] += gI[k] / len(batch)
        for k in exactII:
            exactII[k] += gII[k] / len(batch)

    kind = scheme.kind if hasattr(scheme, "kind") else str(scheme)
    if kind == "separate":
        exact = exactII
        shapes = {k: v.data.shape for k, v in namedII.items()}
    else:
        exact = {**exactI, **exactII}
        shapes = {k: v.data.shape for k, v in {**namedI, **namedII}.items()}
    stats = EstimatorStats(shapes, exact, trials)

    for trial in range(trials):
        ts = derive_seed(seed, trial)
        if kind == "joint_grad":
            _, gI, gII = training.joint_grad_step(
                first, second, batch, M, ts, t_max)
            stats.add({**gI, **gII})
        elif kind == "joint_loss":
            tau = getattr(scheme, "tau", 1.0)
            _, gI, gII = training.joint_loss_step(
                first, second, batch, M, tau, ts, t_max)
            stats.add({**gI, **gII})
        elif kind == "separate":
            stored = [
                training.draw_intermediate_samples(
                    first, x, M, training.SamplingStrategy("ancestral"),
                    derive_seed(ts, b), t_max)
                for b, (x, y) in enumerate(batch)
            ]
            _, gII = training.separate_train_second(second, batch, stored)
            stats.add(gII)
        else:
            raise ContractError(f"unknown scheme kind {kind!r}")
    return stats.finalize()
