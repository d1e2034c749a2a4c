"""Command-line interface.

Commands: generate-data, train, evaluate, verify, gradcheck.
Exit codes: 0 success, 1 usage/config error, 2 numeric failure,
3 verification failure. Set DELIBLAB_LOG=debug|info|warning|quiet to control
verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict

import numpy as np

from .checkpoints import load_checkpoint
from .config import (VerifyConfig, load_run_config, load_verify_config)
from .errors import (CapacityError, ConfigError, ContractError, DataError,
                     NonFiniteGradientError, NumericDomainError, ParseError,
                     VerificationInvalidError)
from .evaluation import mean_metrics
from .model import generate, teacher_forced_logprob
from .second_pass import second_free_run, second_pass_logprob, \
    IntermediateFeatures
from .tasks import load_corpus
from .trainer import train_run, write_corpora
from .training import guided_attention_loss, info_gain_estimate
from .verification import check_gradients, run_battery

log = logging.getLogger("deliblab")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _setup_logging():
    level = os.environ.get("DELIBLAB_LOG", "info").lower()
    levels = {"debug": logging.DEBUG, "info": logging.INFO,
              "warning": logging.WARNING, "quiet": logging.ERROR}
    logging.basicConfig(level=levels.get(level, logging.INFO),
                        format="%(levelname)s %(message)s")


def build_parser() -> Parser:
    p = Parser(prog="deliblab",
               description="two-pass deliberation model laboratory")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write train/dev/test corpora")
    g.add_argument("--config", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--out")

    t = sub.add_parser("train", help="pretrain and run the configured scheme")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")

    e = sub.add_parser("evaluate", help="evaluate a checkpoint on a corpus")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--out")
    e.add_argument("--attn-cap", type=int, default=8)

    v = sub.add_parser("verify", help="run the oracle verification battery")
    v.add_argument("--config")
    v.add_argument("--seed", type=int)
    v.add_argument("--out")

    c = sub.add_parser("gradcheck", help="finite-difference gradient battery")
    c.add_argument("--config")
    c.add_argument("--seed", type=int)
    return p


def _load_run_cfg(args):
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    return cfg


def cmd_generate_data(args) -> int:
    cfg = _load_run_cfg(args)
    paths = write_corpora(cfg)
    for split, path in paths.items():
        print(f"wrote {split}: {path}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_cfg(args)
    result = train_run(cfg, log=lambda s: log.info(s))
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics: {os.path.join(cfg.out_dir, 'metrics.jsonl')}")
    return 0


def cmd_evaluate(args) -> int:
    first, second, cfg_dict, epoch = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    if corpus.spec.V != first.vocab.size:
        raise ContractError(
            f"vocab mismatch: corpus V={corpus.spec.V}, "
            f"checkpoint V={first.vocab.size}")
    t_max = cfg_dict.get("t_max") or corpus.spec.L_max + 4
    g = cfg_dict.get("regularizer", {}).get("g", 0.2)
    out_dir = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    attn_dir = os.path.join(out_dir, "attn")
    os.makedirs(attn_dir, exist_ok=True)

    hyps = []
    nll = 0.0
    ga = []
    extras = second.extras if second is not None else False
    for i, (x, y) in enumerate(corpus.pairs):
        res = generate(x, first, mode="greedy", t_max=t_max, collect=True)
        feats = (IntermediateFeatures(res.ids, res.states, res.contexts)
                 if extras else IntermediateFeatures(res.ids))
        if second is not None:
            yh = second_free_run(x, feats, second, t_max,
                                 select=_greedy).ids
            tot, _, ax, ay = second_pass_logprob(x, feats, y, second)
            ga.append(guided_attention_loss(ay, g))
        else:
            yh = res.ids
            tot, _, _ = teacher_forced_logprob(x, y, first)
        nll -= tot.item() / len(corpus)
        hyps.append((y, yh))
        if i < args.attn_cap:
            _dump_attention(attn_dir, i, x, first, second, feats, yh)
    ter, em = mean_metrics(hyps)
    record = {
        "epoch": epoch, "split": corpus.split, "examples": len(corpus),
        "nll": nll, "ter": ter, "exact_match": em,
        "guided_attention": float(np.mean(ga)) if ga else None,
    }
    if second is not None:
        sub = corpus.pairs[: min(32, len(corpus))]
        record["info_gain_fr"] = info_gain_estimate(
            first, second, sub, "free_running", seed=0, t_max=t_max)
        record["info_gain_tf"] = info_gain_estimate(
            first, second, sub, "teacher_forced", seed=0, t_max=t_max)
    path = os.path.join(out_dir, "eval.json")
    with open(path, "w") as f:
        json.dump(record, f, indent=1)
        f.write("\n")
    print(json.dumps(record))
    print(f"attention dumps: {attn_dir}")
    return 0


def _greedy(t, logits):
    return int(np.argmax(logits.data[0, 1:]))


def _dump_attention(attn_dir, i, x, first, second, feats, yh):
    # re-scoring the generated tokens reproduces generation-time attention
    _, _, attn1 = teacher_forced_logprob(x, feats.tokens, first)
    np.savetxt(os.path.join(attn_dir, f"ex{i:04d}.first.txt"), attn1,
               fmt="%.17g")
    if second is not None:
        _, _, ax, ay = second_pass_logprob(x, feats, yh, second)
        np.savetxt(os.path.join(attn_dir, f"ex{i:04d}.second_x.txt"), ax,
                   fmt="%.17g")
        np.savetxt(os.path.join(attn_dir, f"ex{i:04d}.second_y.txt"), ay,
                   fmt="%.17g")


def _verify_cfg(args) -> VerifyConfig:
    cfg = (load_verify_config(args.config) if args.config else VerifyConfig())
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def cmd_verify(args) -> int:
    cfg = _verify_cfg(args)
    results = run_battery(cfg)
    for r in results:
        print(r.line())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "verify_report.json"), "w") as f:
            json.dump([asdict(r) for r in results], f, indent=1)
            f.write("\n")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 3 if failed else 0


def cmd_gradcheck(args) -> int:
    cfg = _verify_cfg(args)
    results = check_gradients(cfg)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 3 if failed else 0


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "verify": cmd_verify,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (ConfigError, ParseError, DataError, ContractError,
            CapacityError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (NumericDomainError, NonFiniteGradientError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 2
    except VerificationInvalidError as e:
        print(f"verification invalid: {e}", file=sys.stderr)
        return 3


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
