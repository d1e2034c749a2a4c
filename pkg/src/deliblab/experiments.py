"""Reusable experiment procedures: exposure-bias reproduction and the
guided-attention ablation.

These drive the library API directly (no per-epoch metric logging) so a
multi-seed run stays inside a tight wall-clock budget. scripts/ wraps them
for the command line; the acceptance suite calls them in-process. Worker
parallelism is across seeds only, never inside a run.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .evaluation import mean_metrics, within_band_mass
from .model import FirstPassParams, Vocab, generate
from .prng import derive_seed
from .second_pass import (IntermediateFeatures, SecondPassParams,
                          second_free_run, second_pass_logprob)
from .model import greedy_select
from .tasks import TaskSpec, generate_corpus
from .trainer import draw_samples_for
from .training import (SamplingStrategy, combined_second_pass_loss,
                       nll_teacher_forcing, separate_train_second, sgd_update)
from .config import ModelConfig, OptimConfig, RegConfig, RunConfig
from .training import Scheme


def exposure_bias_task(seed=0) -> TaskSpec:
    return TaskSpec(kind="noisy_copy", V=12, L_min=4, L_max=8,
                    n_train=2000, n_dev=200, n_test=300, p_noise=0.2,
                    seed=seed)


@dataclass
class SeparateRunResult:
    seed: int
    ter_first: float
    ter_second: float
    em_first: float
    em_second: float
    band_mass: float


def _batches(pairs, batch_size, rng):
    order = np.arange(len(pairs))
    rng.shuffle(order)
    for i in range(0, len(order), batch_size):
        yield [pairs[int(j)] for j in order[i:i + batch_size]]


def train_separate(task: TaskSpec, seed: int, d=16, lr=0.5, clip=1.0,
                   lr2=0.5, clip2=1.0,
                   pretrain_epochs=10, second_epochs=6, batch_size=8,
                   intermediate_mode="free_running", gamma=0.0, g=0.2,
                   M=2, strategy=None, t_max=None, eval_cap=300):
    """Pretrain the first pass, train the second pass on stored samples,
    and measure both passes on the test split.

    Returns a SeparateRunResult; the first-pass numbers double as the
    single-pass teacher-forcing baseline since that is exactly how the
    first pass was trained. Intermediates default to noisy-greedy draws,
    close to the greedy drafts the refiner will see at inference but still
    diverse across samples.
    """
    t_max = t_max or task.L_max + 6
    strategy = strategy or SamplingStrategy("noisy_greedy", temperature=0.5)
    cfg = RunConfig(
        task=task,
        model=ModelConfig(d=d),
        scheme=Scheme("separate", M=M, strategy=strategy),
        optimizer=OptimConfig(lr=lr, clip=clip, epochs=second_epochs,
                              pretrain_epochs=pretrain_epochs,
                              batch_size=batch_size),
        regularizer=RegConfig(enabled=gamma > 0, gamma=gamma, g=g),
        intermediate_mode=intermediate_mode,
        seed=seed, t_max=t_max, out_dir="unused")
    train = generate_corpus(task, "train").pairs
    test = generate_corpus(task, "test").pairs[:eval_cap]
    vocab = Vocab(task.V)
    first = FirstPassParams(vocab, d, seed=derive_seed(seed, 11))
    second = SecondPassParams(first, seed=derive_seed(seed, 12))

    for epoch in range(1, pretrain_epochs + 1):
        rng = np.random.Generator(np.random.PCG64(derive_seed(seed, 21, epoch)))
        for batch in _batches(train, batch_size, rng):
            _, grads = nll_teacher_forcing(first, batch)
            sgd_update(first.named(), grads, lr, clip)

    stored = [draw_samples_for(first, x, y, cfg, derive_seed(seed, 23, i))
              for i, (x, y) in enumerate(train)]

    for epoch in range(1, second_epochs + 1):
        rng = np.random.Generator(np.random.PCG64(derive_seed(seed, 22, epoch)))
        order = np.arange(len(train))
        rng.shuffle(order)
        for i in range(0, len(order), batch_size):
            sel = [int(j) for j in order[i:i + batch_size]]
            batch = [train[j] for j in sel]
            sub = [stored[j] for j in sel]
            if gamma > 0:
                _, grads = combined_second_pass_loss(second, batch, sub,
                                                     gamma, g)
            else:
                _, grads = separate_train_second(second, batch, sub)
            sgd_update(second.named(), grads, lr2, clip2)

    firsts, seconds, masses = [], [], []
    for x, y in test:
        ids1, _ = generate(x, first, mode="greedy", t_max=t_max)
        feats = IntermediateFeatures(ids1)
        ids2 = second_free_run(x, feats, second, t_max, greedy_select).ids
        firsts.append((y, ids1))
        seconds.append((y, ids2))
        _, _, _, ay = second_pass_logprob(x, feats, y, second)
        masses.append(within_band_mass(ay))
    ter1, em1 = mean_metrics(firsts)
    ter2, em2 = mean_metrics(seconds)
    return SeparateRunResult(seed, ter1, ter2, em1, em2,
                             float(np.mean(masses)))


def _exposure_worker(args):
    task_seed, run_seed, mode, kwargs = args
    task = exposure_bias_task(task_seed)
    return train_separate(task, run_seed, intermediate_mode=mode, **kwargs)


def run_exposure_bias(seeds=(1, 2, 3, 4, 5), workers=2, **kwargs):
    """Free-running vs teacher-forced intermediates, one run pair per seed.

    Returns {"free_running": [SeparateRunResult...], "teacher_forced": [...]}.
    """
    jobs = []
    for s in seeds:
        jobs.append((s, s, "free_running", kwargs))
        jobs.append((s, s, "teacher_forced", kwargs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_exposure_worker, jobs))
    else:
        results = [_exposure_worker(j) for j in jobs]
    out = {"free_running": [], "teacher_forced": []}
    for (ts, rs, mode, _), res in zip(jobs, results):
        out[mode].append(res)
    return out


def guided_attention_task(seed=0) -> TaskSpec:
    return TaskSpec(kind="noisy_copy", V=10, L_min=3, L_max=6,
                    n_train=600, n_dev=100, n_test=150, p_noise=0.2,
                    seed=seed)


def _guided_worker(args):
    task_seed, run_seed, gamma, kwargs = args
    task = guided_attention_task(task_seed)
    return train_separate(task, run_seed, gamma=gamma, **kwargs)


def run_guided_attention(seeds=(1, 2, 3), gammas=(0.0, 1.0), workers=2,
                         **kwargs):
    """Within-band y-attention mass with and without the alignment penalty."""
    jobs = [(s, s, g, kwargs) for s in seeds for g in gammas]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_guided_worker, jobs))
    else:
        results = [_guided_worker(j) for j in jobs]
    out = {g: [] for g in gammas}
    for (ts, rs, g, _), res in zip(jobs, results):
        out[g].append(res)
    return out
