"""End-to-end training runs: pretraining, scheme phases, metrics, checkpoints.

A run is a pure function of (config, seed): batches are shuffled with seeds
derived from the run seed, sampling seeds derive from (seed, phase, epoch,
step or example index), and gradient reduction follows ascending example
order, so reruns produce bit-identical checkpoints.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass

import numpy as np

from .checkpoints import save_checkpoint
from .config import RunConfig, run_config_to_dict
from .errors import DataError
from .evaluation import mean_metrics
from .model import FirstPassParams, Vocab, generate, teacher_forced_logprob
from .prng import derive_seed
from .second_pass import (IntermediateFeatures, SecondPassParams,
                          second_pass_logprob)
from .tasks import generate_corpus, load_corpus, save_corpus
from .training import (SampleSet, combined_second_pass_loss,
                       draw_intermediate_samples, guided_attention_loss,
                       info_gain_estimate, joint_grad_step, joint_loss_step,
                       nll_teacher_forcing, separate_train_second, sgd_update,
                       teacher_forced_intermediate)

# seed-derivation tags, fixed for reproducibility
TAG_FIRST_INIT = 11
TAG_SECOND_INIT = 12
TAG_SHUFFLE = 21
TAG_JOINT = 22
TAG_SAMPLES = 23
TAG_EVAL = 24


@dataclass
class MetricRecord:
    epoch: int
    split: str
    scheme: str
    nll: float
    ter: float
    exact_match: float
    guided_attention: float | None
    info_gain_fr: float | None
    info_gain_tf: float | None
    wall_time: float


def data_paths(out_dir):
    d = os.path.join(out_dir, "data")
    return {s: os.path.join(d, f"{s}.txt") for s in ("train", "dev", "test")}


def write_corpora(cfg: RunConfig):
    paths = data_paths(cfg.out_dir)
    os.makedirs(os.path.join(cfg.out_dir, "data"), exist_ok=True)
    for split, path in paths.items():
        save_corpus(generate_corpus(cfg.task, split), path)
    return paths


def load_corpora(cfg: RunConfig):
    paths = data_paths(cfg.out_dir)
    out = {}
    for split, path in paths.items():
        if not os.path.exists(path):
            raise DataError(f"corpus file missing: {path} (run generate-data first)")
        out[split] = load_corpus(path)
    return out


def init_models(cfg: RunConfig):
    vocab = Vocab(cfg.task.V)
    first = FirstPassParams(vocab, cfg.model.d,
                            seed=derive_seed(cfg.seed, TAG_FIRST_INIT),
                            context_in_state=cfg.model.context_in_state)
    second = SecondPassParams(first, seed=derive_seed(cfg.seed, TAG_SECOND_INIT),
                              extras=cfg.model.extras)
    return first, second


def _batches(corpus, batch_size, rng):
    order = np.arange(len(corpus))
    rng.shuffle(order)
    for i in range(0, len(order), batch_size):
        yield [corpus[int(j)] for j in order[i:i + batch_size]]


def first_pass_features(first, x, cfg: RunConfig):
    """Greedy first-pass output as refinement input, with extras if enabled."""
    res = generate(x, first, mode="greedy", t_max=cfg.t_max,
                   collect=cfg.model.extras)
    if cfg.model.extras:
        return IntermediateFeatures(res.ids, res.states, res.contexts)
    return IntermediateFeatures(res[0])


def evaluate_split(first, second, corpus, cfg: RunConfig, scheme_name,
                   epoch, split, with_info_gain=True, info_cap=32):
    """Metrics on (a deterministic prefix of) one split."""
    from .second_pass import second_free_run
    from .model import greedy_select
    t0 = time.perf_counter()
    pairs = corpus.pairs[: cfg.eval_cap]
    hyps = []
    nll = 0.0
    ga = []
    for x, y in pairs:
        if second is not None:
            feats = first_pass_features(first, x, cfg)
            yh = second_free_run(x, feats, second, cfg.t_max, greedy_select).ids
            tot, _, _, attn_y = second_pass_logprob(x, feats, y, second)
            ga.append(guided_attention_loss(attn_y, cfg.regularizer.g))
        else:
            yh, _ = generate(x, first, mode="greedy", t_max=cfg.t_max)
            tot, _, _ = teacher_forced_logprob(x, y, first)
        nll -= tot.item() / len(pairs)
        hyps.append((y, yh))
    ter, em = mean_metrics(hyps)
    ig_fr = ig_tf = None
    if second is not None and with_info_gain:
        sub = pairs[:info_cap]
        ig_fr = info_gain_estimate(first, second, sub, "free_running",
                                   seed=derive_seed(cfg.seed, TAG_EVAL),
                                   t_max=cfg.t_max)
        ig_tf = info_gain_estimate(first, second, sub, "teacher_forced",
                                   seed=derive_seed(cfg.seed, TAG_EVAL),
                                   t_max=cfg.t_max)
    return MetricRecord(
        epoch=epoch, split=split, scheme=scheme_name, nll=nll, ter=ter,
        exact_match=em,
        guided_attention=float(np.mean(ga)) if ga else None,
        info_gain_fr=ig_fr, info_gain_tf=ig_tf,
        wall_time=time.perf_counter() - t0)


def draw_samples_for(first, x, y, cfg: RunConfig, seed):
    """Per-example intermediate samples honoring the configured mode."""
    M = cfg.scheme.M
    if cfg.intermediate_mode == "free_running":
        return draw_intermediate_samples(first, x, M, cfg.scheme.strategy,
                                         seed, cfg.t_max,
                                         collect_extras=cfg.model.extras)
    feats, lps = [], []
    for m in range(M):
        rng = np.random.Generator(np.random.PCG64(derive_seed(seed, m)))
        ids = teacher_forced_intermediate(first, x, y, rng)
        tot, _, _ = teacher_forced_logprob(x, ids, first)
        if cfg.model.extras:
            from .model import teacher_forced_run
            run = teacher_forced_run(x, ids, first)
            feats.append(IntermediateFeatures(
                ids, [s.data.copy() for s in run.states],
                [c.data.copy() for c in run.contexts]))
        else:
            feats.append(IntermediateFeatures(ids))
        lps.append(min(tot.item(), 0.0))
    return SampleSet(feats, lps)


class TrainResult:
    def __init__(self, first, second, records, checkpoint_path, samples_path=None):
        self.first = first
        self.second = second
        self.records = records
        self.checkpoint_path = checkpoint_path
        self.samples_path = samples_path


def train_run(cfg: RunConfig, log=None, eval_each_epoch=True) -> TrainResult:
    """Pretrain the first pass, run the configured scheme, write artifacts."""
    corpora = load_corpora(cfg)
    first, second = init_models(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    metrics_path = os.path.join(cfg.out_dir, "metrics.jsonl")
    ckpt_path = os.path.join(cfg.out_dir, "checkpoint.json")
    records = []
    mf = open(metrics_path, "w")

    def emit(rec: MetricRecord):
        records.append(rec)
        mf.write(json.dumps(asdict(rec)) + "\n")
        mf.flush()
        if log:
            log(f"epoch {rec.epoch:3d} {rec.split:5s} {rec.scheme:10s} "
                f"nll {rec.nll:7.3f} ter {rec.ter:.3f} em {rec.exact_match:.3f}")

    def checkpoint(epoch, with_second):
        save_checkpoint(ckpt_path, first,
                        second if with_second else None,
                        run_config_to_dict(cfg), epoch)

    epoch = 0
    opt = cfg.optimizer
    train = corpora["train"]
    try:
        # phase 1: teacher-forced pretraining of the first pass
        for _ in range(opt.pretrain_epochs):
            epoch += 1
            rng = np.random.Generator(np.random.PCG64(
                derive_seed(cfg.seed, TAG_SHUFFLE, epoch)))
            for batch in _batches(train, opt.batch_size, rng):
                _, grads = nll_teacher_forcing(first, batch)
                sgd_update(first.named(), grads, opt.lr, opt.clip)
            if eval_each_epoch:
                for split in ("train", "dev", "test"):
                    emit(evaluate_split(first, None, corpora[split], cfg,
                                        "pretrain", epoch, split))
            checkpoint(epoch, with_second=False)

        # phase 2: the configured scheme
        kind = cfg.scheme.kind
        samples_path = None
        if kind == "separate":
            stored = []
            for idx, (x, y) in enumerate(train.pairs):
                stored.append(draw_samples_for(
                    first, x, y, cfg, derive_seed(cfg.seed, TAG_SAMPLES, idx)))
            samples_path = os.path.join(cfg.out_dir, "samples.txt")
            with open(samples_path, "w") as f:
                for ss in stored:
                    f.write("\t".join(" ".join(map(str, s)) for s in ss.samples)
                            + "\n")
            for _ in range(opt.epochs):
                epoch += 1
                rng = np.random.Generator(np.random.PCG64(
                    derive_seed(cfg.seed, TAG_SHUFFLE, epoch)))
                order = np.arange(len(train))
                rng.shuffle(order)
                for i in range(0, len(order), opt.batch_size):
                    sel = [int(j) for j in order[i:i + opt.batch_size]]
                    batch = [train[j] for j in sel]
                    sub = [stored[j] for j in sel]
                    if cfg.regularizer.enabled:
                        _, grads = combined_second_pass_loss(
                            second, batch, sub, cfg.regularizer.gamma,
                            cfg.regularizer.g)
                    else:
                        _, grads = separate_train_second(second, batch, sub)
                    sgd_update(second.named(), grads, opt.lr, opt.clip)
                if eval_each_epoch:
                    for split in ("train", "dev", "test"):
                        emit(evaluate_split(first, second, corpora[split], cfg,
                                            kind, epoch, split))
                checkpoint(epoch, with_second=True)
        else:
            for _ in range(opt.epochs):
                epoch += 1
                rng = np.random.Generator(np.random.PCG64(
                    derive_seed(cfg.seed, TAG_SHUFFLE, epoch)))
                sampler = None
                if cfg.intermediate_mode == "teacher_forced":
                    def sampler(x, y, M, sd):
                        return draw_samples_for(first, x, y, cfg, sd)
                for step, batch in enumerate(_batches(train, opt.batch_size, rng)):
                    sd = derive_seed(cfg.seed, TAG_JOINT, epoch, step)
                    if kind == "joint_grad":
                        _, gI, gII = joint_grad_step(
                            first, second, batch, cfg.scheme.M, sd, cfg.t_max,
                            cfg.scheme.strategy, sampler=sampler)
                    else:
                        _, gI, gII = joint_loss_step(
                            first, second, batch, cfg.scheme.M, cfg.scheme.tau,
                            sd, cfg.t_max, cfg.relaxation)
                    sgd_update(first.named(), gI, opt.lr, opt.clip)
                    sgd_update(second.named(), gII, opt.lr, opt.clip)
                if eval_each_epoch:
                    for split in ("train", "dev", "test"):
                        emit(evaluate_split(first, second, corpora[split], cfg,
                                            kind, epoch, split))
                checkpoint(epoch, with_second=True)
        if not eval_each_epoch:
            for split in ("train", "dev", "test"):
                emit(evaluate_split(first, second, corpora[split], cfg,
                                    cfg.scheme.kind, epoch, split))
            checkpoint(epoch, with_second=True)
    finally:
        mf.close()
    return TrainResult(first, second, records, ckpt_path, samples_path)
