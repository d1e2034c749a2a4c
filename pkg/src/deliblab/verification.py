"""Verification battery: every analytic claim checked against the
enumeration oracle, finite differences, or simulation.

Each check returns a CheckResult with the measured margin and its tolerance;
the battery is deterministic given the VerifyConfig seed, so reruns emit
byte-identical reports.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import training as tr
from .config import VerifyConfig
from .errors import VerificationInvalidError
from .model import EOS, FirstPassParams, Vocab, encode
from .oracle import (enumerate_space, exact_gradients, exact_loss_graph,
                     exact_losses, exact_marginal, first_pass_probs,
                     verify_estimator)
from .prng import SplitMix64, derive_seed
from .second_pass import SecondPassParams, second_pass_logprob, \
    second_teacher_forced_run, y_encoder_states
from .training import (SamplingStrategy, Scheme, combined_second_pass_loss,
                       draw_intermediate_samples, guided_attention_loss,
                       joint_grad_step, joint_loss_step, mbr_loss,
                       nll_teacher_forcing, separate_train_second)

# tiny sizes for the exhaustive finite-difference battery
FD_V, FD_T_MAX, FD_D, FD_L = 3, 2, 2, 2


@dataclass
class CheckResult:
    name: str
    passed: bool
    margin: float
    tolerance: float
    detail: str = ""

    def __post_init__(self):
        self.passed = bool(self.passed)
        self.margin = float(self.margin)
        self.tolerance = float(self.tolerance)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        out = (f"{status} {self.name}: margin={self.margin:.6g} "
               f"tol={self.tolerance:.6g}")
        if self.detail:
            out += f" ({self.detail})"
        return out


def random_instance(V, d, L, t_max, seed, extras=False):
    """Randomly initialized two-pass model plus one (x, y) pair."""
    vocab = Vocab(V)
    first = FirstPassParams(vocab, d, seed=derive_seed(seed, 1))
    second = SecondPassParams(first, seed=derive_seed(seed, 2), extras=extras)
    rng = SplitMix64(derive_seed(seed, 3))
    n = V - 2
    lx = 1 + rng.randint(L)
    x = tuple(2 + rng.randint(n) for _ in range(lx)) + (EOS,)
    ly = 1 + rng.randint(max(t_max - 1, 1))
    y = tuple(2 + rng.randint(n) for _ in range(ly)) + (EOS,)
    return first, second, x, y


def point_mass_first(V, d, seed, token=2, bias=40.0):
    """First pass concentrated (up to ~1e-17) on one repeated-token sequence."""
    vocab = Vocab(V)
    first = FirstPassParams(vocab, d, seed=seed)
    first.out_W.data[:] = 0.0
    first.out_b.data[:] = 0.0
    first.out_b.data[0, token] = bias
    return first


# ---------------------------------------------------------------------------
# probability checks
# ---------------------------------------------------------------------------

def check_normalization(cfg: VerifyConfig):
    worst_first = 0.0
    worst_second = 0.0
    worst_marginal = 0.0
    for i in range(cfg.n_normalization):
        first, second, x, y = random_instance(
            cfg.V, cfg.d, cfg.L, cfg.t_max, derive_seed(cfg.seed, 10, i))
        space = enumerate_space(first.vocab, cfg.t_max, cfg.cap)
        probs = first_pass_probs(first, x, space)
        worst_first = max(worst_first, abs(probs.sum() - 1.0))
        yI = space.seqs[i % len(space)]
        tot = 0.0
        for cand in space:
            lp, _, _, _ = second_pass_logprob(x, yI, cand, second)
            tot += np.exp(lp.item())
        worst_second = max(worst_second, abs(tot - 1.0))
        marg = sum(exact_marginal(first, second, x, cand, space)
                   for cand in space)
        worst_marginal = max(worst_marginal, abs(marg - 1.0))
    tol = 1e-9
    return [
        CheckResult("normalization.first_pass", worst_first < tol,
                    worst_first, tol,
                    f"{cfg.n_normalization} random instances"),
        CheckResult("normalization.second_pass", worst_second < tol,
                    worst_second, tol),
        CheckResult("normalization.marginal", worst_marginal < tol,
                    worst_marginal, tol),
    ]


def check_bound_inequality(cfg: VerifyConfig):
    tol = 1e-9
    worst_gap = np.inf
    violations = 0
    for i in range(cfg.n_bound):
        first, second, x, y = random_instance(
            cfg.V, cfg.d, cfg.L, cfg.t_max, derive_seed(cfg.seed, 20, i))
        space = enumerate_space(first.vocab, cfg.t_max, cfg.cap)
        naive, bound = exact_losses(first, second, x, y, space)
        gap = bound - naive
        worst_gap = min(worst_gap, gap)
        if gap < -tol:
            violations += 1
    # with a (near) point mass the bound is tight
    first, second, x, y = random_instance(
        cfg.V, cfg.d, cfg.L, cfg.t_max, derive_seed(cfg.seed, 21))
    pm = point_mass_first(cfg.V, cfg.d, derive_seed(cfg.seed, 22))
    second_pm = SecondPassParams(pm, seed=derive_seed(cfg.seed, 23))
    space = enumerate_space(pm.vocab, cfg.t_max, cfg.cap)
    naive, bound = exact_losses(pm, second_pm, x, y, space)
    eq_gap = abs(bound - naive)
    return [
        CheckResult("bound.inequality", violations == 0, worst_gap, -tol,
                    f"min gap over {cfg.n_bound} instances, all >= -tol"),
        CheckResult("bound.point_mass_equality", eq_gap < tol, eq_gap, tol),
    ]


def check_mbr_identity(cfg: VerifyConfig, n_instances=20):
    """The first pass's enumerated bound loss is expected-risk training with
    risk -log F2; losses and gradients must agree to near round-off."""
    tol = 1e-12
    worst = 0.0
    for i in range(n_instances):
        first, second, x, y = random_instance(
            cfg.V, cfg.d, cfg.L, cfg.t_max, derive_seed(cfg.seed, 30, i))
        space = enumerate_space(first.vocab, cfg.t_max, cfg.cap)
        h_x = ad.const(encode(x, first).data)

        def risk(ref, cand):
            lp, _, _, _ = second_pass_logprob(x, cand, y, second, h_x=h_x)
            return -lp.item()

        _, bound = exact_losses(first, second, x, y, space)
        gI, _ = exact_gradients(first, second, x, y, space, "bound")
        report, gmbr = mbr_loss(first, [(x, y)], distance=risk, mode="exact",
                                t_max=cfg.t_max, cap=cfg.cap)
        worst = max(worst, abs(report.mbr - bound))
        for k in gI:
            worst = max(worst, float(np.abs(gI[k] - gmbr[k]).max()))
    return CheckResult("mbr.risk_identity", worst < tol, worst, tol,
                       f"{n_instances} instances, loss and all first-pass "
                       "gradient coordinates")


def check_scheme_equivalence(cfg: VerifyConfig, n_instances=5):
    """Identical second-pass gradients across the three schemes when they
    share realized samples."""
    tol = 1e-12
    worst = 0.0
    for i in range(n_instances):
        first, second, x, y = random_instance(
            cfg.V, cfg.d, cfg.L, cfg.t_max, derive_seed(cfg.seed, 40, i))
        batch = [(x, y)]
        seed = derive_seed(cfg.seed, 41, i)
        _, _, g_joint = joint_grad_step(first, second, batch, cfg.M, seed,
                                        cfg.t_max)
        _, _, g_loss = joint_loss_step(first, second, batch, cfg.M, 1.0, seed,
                                       cfg.t_max, relaxation="straight_through")
        stored = [draw_intermediate_samples(
            first, x, cfg.M, SamplingStrategy("ancestral"),
            derive_seed(seed, 0), cfg.t_max)]
        _, g_sep = separate_train_second(second, batch, stored)
        for k in g_joint:
            worst = max(worst, float(np.abs(g_joint[k] - g_loss[k]).max()))
            worst = max(worst, float(np.abs(g_joint[k] - g_sep[k]).max()))
    return CheckResult("schemes.second_pass_gradient_equality", worst < tol,
                       worst, tol, f"{n_instances} instances, M={cfg.M}")


def check_estimator(cfg: VerifyConfig):
    """Unbiasedness of the score-function estimator and its 1/M variance."""
    first, second, x, y = random_instance(
        cfg.V, cfg.d, cfg.L, cfg.t_max, derive_seed(cfg.seed, 50))
    batch = [(x, y)]
    stats1 = verify_estimator(first, second, batch, Scheme("joint_grad", M=1),
                              1, cfg.trials, derive_seed(cfg.seed, 51),
                              cfg.t_max, cfg.cap)
    statsM = verify_estimator(first, second, batch,
                              Scheme("joint_grad", M=cfg.M), cfg.M,
                              cfg.trials, derive_seed(cfg.seed, 52),
                              cfg.t_max, cfg.cap)
    v1 = stats1.flat_var()
    vM = statsM.flat_var()
    live = v1 > 1e-18
    ratio = float(np.mean(vM[live] / v1[live]))
    lo, hi = (1.0 / cfg.M) * 0.75, (1.0 / cfg.M) * 1.25
    return [
        CheckResult("estimator.unbiased", stats1.max_abs_z < cfg.z_threshold,
                    stats1.max_abs_z, cfg.z_threshold,
                    f"max |z| over coordinates, {cfg.trials} trials, M=1"),
        CheckResult("estimator.variance_ratio",
                    lo <= ratio <= hi, ratio, hi,
                    f"mean var(M={cfg.M})/var(M=1) over live coordinates, "
                    f"band [{lo:.4g}, {hi:.4g}]"),
    ], stats1, statsM


def check_separate_matches_joint_trials(cfg: VerifyConfig, trials=50):
    """Per-trial exact equality of second-pass gradients when the separate
    and joint estimators consume the same sample seeds."""
    first, second, x, y = random_instance(
        cfg.V, cfg.d, cfg.L, cfg.t_max, derive_seed(cfg.seed, 60))
    batch = [(x, y)]
    worst = 0.0
    for t in range(trials):
        ts = derive_seed(cfg.seed, 61, t)
        _, _, g_joint = joint_grad_step(first, second, batch, cfg.M, ts,
                                        cfg.t_max)
        stored = [draw_intermediate_samples(
            first, x, cfg.M, SamplingStrategy("ancestral"),
            derive_seed(ts, 0), cfg.t_max)]
        _, g_sep = separate_train_second(second, batch, stored)
        for k in g_joint:
            worst = max(worst, float(np.abs(g_joint[k] - g_sep[k]).max()))
    return CheckResult("estimator.separate_equals_joint_per_trial",
                       worst == 0.0, worst, 0.0, f"{trials} shared-seed trials")


# ---------------------------------------------------------------------------
# gradient checks
# ---------------------------------------------------------------------------

def fd_check_loss_fn(loss_fn, named, step=1e-5):
    """Central finite differences against a (value, grads) producing callable.

    Validates the gradients the training code actually emits, including all
    weighting and accumulation. Returns the worst relative error.
    """
    v0, grads = loss_fn()
    v1, _ = loss_fn()
    if v0 != v1:
        raise VerificationInvalidError("loss function is not deterministic")
    worst = 0.0
    for name, p in named.items():
        a = grads[name]
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up, _ = loss_fn()
            flat[i] = orig - step
            dn, _ = loss_fn()
            flat[i] = orig
            fd = (up - dn) / (2 * step)
            an = a.reshape(-1)[i]
            worst = max(worst, abs(fd - an) / max(1.0, abs(fd), abs(an)))
    return worst


def check_gradients(cfg: VerifyConfig):
    """Finite-difference battery over every loss at its shipped gradients."""
    tol = 1e-6
    seed = derive_seed(cfg.seed, 70)
    first, second, x, y = random_instance(FD_V, FD_D, FD_L, FD_T_MAX, seed)
    x2 = (2, EOS)
    batch = [(x, y), (x2, (2, 2))]
    space = enumerate_space(first.vocab, FD_T_MAX, cfg.cap)
    namedI = first.named()
    namedII = second.named()
    both = {**namedI, **namedII}
    results = []

    worst = fd_check_loss_fn(
        lambda: (lambda r, g: (r.nll, g))(*nll_teacher_forcing(first, batch)),
        namedI)
    results.append(CheckResult("gradcheck.teacher_forcing_nll", worst < tol,
                               worst, tol))

    for which in ("naive", "bound"):
        rep = ad.finite_diff_check(
            lambda params, w=which: exact_loss_graph(first, second, x, y,
                                                     space, w),
            both, tol=tol)
        results.append(CheckResult(f"gradcheck.exact_{which}_loss",
                                   rep.passed, rep.worst, tol))

    worst = fd_check_loss_fn(
        lambda: (lambda r, g: (r.mbr, g))(*mbr_loss(
            first, batch, distance="levenshtein", mode="exact",
            t_max=FD_T_MAX, cap=cfg.cap)),
        namedI)
    results.append(CheckResult("gradcheck.mbr_exact", worst < tol, worst, tol))

    stored = [draw_intermediate_samples(first, bx, 2,
                                        SamplingStrategy("ancestral"),
                                        derive_seed(seed, 71, b), FD_T_MAX)
              for b, (bx, by) in enumerate(batch)]
    worst_comb = fd_check_loss_fn(
        lambda: (lambda r, g: (r.combined, g))(
            *combined_second_pass_loss(second, batch, stored, 1.0, 0.2)),
        namedII)
    results.append(CheckResult("gradcheck.combined_gamma1", worst_comb < tol,
                               worst_comb, tol))

    ga_only = _guided_only_fd(second, batch, stored, namedII)
    results.append(CheckResult("gradcheck.guided_attention", ga_only < tol,
                               ga_only, tol))

    def relaxed(params):
        rng = np.random.Generator(np.random.PCG64(derive_seed(seed, 72)))
        h_x = encode(x, first)
        ids, rows = tr._relaxed_first_pass(first, second, x, h_x, 1.0, rng,
                                           FD_T_MAX, "relaxed")
        h_y = y_encoder_states(second, rows)
        run = second_teacher_forced_run(x, None, y, second, h_x=h_x, h_y=h_y)
        tot = ad.reduce_sum(ad.concat_cols(run.step_logprobs))
        return ad.scale(tot, -1.0)

    rep = ad.finite_diff_check(relaxed, both, tol=tol)
    results.append(CheckResult("gradcheck.relaxed_joint_loss_frozen_noise",
                               rep.passed, rep.worst, tol))
    return results


def _guided_only_fd(second, batch, stored, namedII):
    def loss_fn():
        r1, g1 = combined_second_pass_loss(second, batch, stored, 1.0, 0.2)
        r0, g0 = combined_second_pass_loss(second, batch, stored, 0.0, 0.2)
        grads = {k: g1[k] - g0[k] for k in g1}
        return r1.guided_attention, grads

    return fd_check_loss_fn(loss_fn, namedII)


def check_guided_attention(cfg: VerifyConfig):
    """Zero on the diagonal, vanishing as g grows, frozen spot value."""
    tol = 1e-12
    diag = np.eye(5)
    v_diag = guided_attention_loss(diag, 0.2)
    v_big_g = guided_attention_loss(np.full((4, 4), 0.25), 1e6)
    attn = np.array([[0.0, 1.0], [0.0, 1.0]])
    expected = 1.0 - np.exp(-0.25 / 0.08)
    v_spot = guided_attention_loss(attn, 0.2)
    worst = max(abs(v_diag), abs(v_big_g), abs(v_spot - expected))
    return CheckResult("guided_attention.formula", worst < 1e-9, worst, 1e-9,
                       "diagonal zero, large-g limit, frozen off-diagonal value")


def run_battery(cfg: VerifyConfig):
    """The full verification suite as an ordered list of CheckResults."""
    results = []
    results += check_normalization(cfg)
    results += check_bound_inequality(cfg)
    results.append(check_mbr_identity(cfg))
    results.append(check_scheme_equivalence(cfg))
    est_results, _, _ = check_estimator(cfg)
    results += est_results
    results.append(check_separate_matches_joint_trials(cfg))
    results += check_gradients(cfg)
    results.append(check_guided_attention(cfg))
    return results
