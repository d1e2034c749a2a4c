"""CLI, config, checkpoint and end-to-end pipeline tests."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from deliblab.checkpoints import load_checkpoint, save_checkpoint
from deliblab.cli import main
from deliblab.config import (RunConfig, load_run_config, run_config_from_dict,
                             run_config_to_dict, verify_config_from_dict)
from deliblab.errors import ConfigError
from deliblab.model import EOS, FirstPassParams, Vocab, teacher_forced_logprob
from deliblab.second_pass import SecondPassParams, second_pass_logprob
from deliblab.tasks import TaskSpec


def small_cfg(out_dir, **overrides):
    data = {
        "task": {"kind": "copy", "V": 6, "L_min": 2, "L_max": 3,
                 "n_train": 40, "n_dev": 10, "n_test": 10, "seed": 2},
        "model": {"d": 6},
        "scheme": {"kind": "separate", "M": 1},
        "optimizer": {"lr": 0.5, "clip": 1.0, "epochs": 1,
                      "pretrain_epochs": 1, "batch_size": 8},
        "seed": 3,
        "out_dir": str(out_dir),
        "eval_cap": 10,
    }
    data.update(overrides)
    return data


def write_cfg(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


# ------------------------------------------------------------ config


def test_unknown_top_level_key_rejected(tmp_path):
    data = small_cfg(tmp_path)
    data["tsak"] = {}
    with pytest.raises(ConfigError, match="tsak"):
        run_config_from_dict(data)


def test_unknown_nested_key_rejected(tmp_path):
    data = small_cfg(tmp_path)
    data["optimizer"]["momentum"] = 0.9
    with pytest.raises(ConfigError, match="optimizer.momentum"):
        run_config_from_dict(data)


def test_field_level_messages(tmp_path):
    data = small_cfg(tmp_path)
    data["optimizer"]["lr"] = -1
    with pytest.raises(ConfigError, match="optimizer.lr"):
        run_config_from_dict(data)
    data = small_cfg(tmp_path)
    data["task"]["V"] = 1
    with pytest.raises(ConfigError, match="task"):
        run_config_from_dict(data)


def test_missing_task_section(tmp_path):
    with pytest.raises(ConfigError, match="task"):
        run_config_from_dict({"seed": 1})


def test_joint_loss_rejects_teacher_forced_intermediates(tmp_path):
    data = small_cfg(tmp_path, scheme={"kind": "joint_loss", "M": 1},
                     intermediate_mode="teacher_forced")
    with pytest.raises(ConfigError, match="intermediate_mode"):
        run_config_from_dict(data)


def test_verify_config_defaults_and_validation():
    cfg = verify_config_from_dict({"trials": 500})
    assert cfg.trials == 500 and cfg.V == 4
    with pytest.raises(ConfigError):
        verify_config_from_dict({"trials": 5})


def test_config_roundtrip(tmp_path):
    path = write_cfg(tmp_path, small_cfg(tmp_path))
    cfg = load_run_config(path)
    assert isinstance(cfg, RunConfig)
    d = run_config_to_dict(cfg)
    assert d["task"]["kind"] == "copy"


# ------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    v = Vocab(5)
    first = FirstPassParams(v, d=4, seed=1)
    second = SecondPassParams(first, seed=2)
    x, y = (2, 3, EOS), (3, EOS)
    before, _, _, _ = second_pass_logprob(x, (2, EOS), y, second)
    path = tmp_path / "ck.json"
    save_checkpoint(path, first, second, {"note": "test"}, epoch=7)
    f2, s2, cfg, epoch = load_checkpoint(path)
    assert epoch == 7 and cfg == {"note": "test"}
    after, _, _, _ = second_pass_logprob(x, (2, EOS), y, s2)
    assert before.item() == after.item()
    for k, t in first.named().items():
        np.testing.assert_array_equal(t.data, f2.named()[k].data)


def test_checkpoint_first_pass_only(tmp_path):
    v = Vocab(5)
    first = FirstPassParams(v, d=4, seed=3)
    path = tmp_path / "ck.json"
    save_checkpoint(path, first, None, {}, epoch=1)
    f2, s2, _, _ = load_checkpoint(path)
    assert s2 is None
    tot1, _, _ = teacher_forced_logprob((2, EOS), (2, EOS), first)
    tot2, _, _ = teacher_forced_logprob((2, EOS), (2, EOS), f2)
    assert tot1.item() == tot2.item()


# ------------------------------------------------------------- cli


def test_generate_data_writes_deterministic_files(tmp_path):
    cfg_path = write_cfg(tmp_path, small_cfg(tmp_path / "run"))
    assert main(["generate-data", "--config", cfg_path]) == 0
    files = {s: (tmp_path / "run" / "data" / f"{s}.txt").read_bytes()
             for s in ("train", "dev", "test")}
    assert main(["generate-data", "--config", cfg_path]) == 0
    for s, content in files.items():
        assert (tmp_path / "run" / "data" / f"{s}.txt").read_bytes() == content
    header = files["train"].decode().splitlines()[0]
    assert header.startswith("#deliblab-corpus\tv1\t")
    assert len(files["train"].decode().splitlines()) == 41


def test_train_requires_corpus(tmp_path):
    cfg_path = write_cfg(tmp_path, small_cfg(tmp_path / "norun"))
    assert main(["train", "--config", cfg_path]) == 1


def test_train_evaluate_verify_pipeline(tmp_path, capsys):
    out = tmp_path / "run"
    cfg_path = write_cfg(tmp_path, small_cfg(out))
    assert main(["generate-data", "--config", cfg_path]) == 0
    assert main(["train", "--config", cfg_path]) == 0
    ck = out / "checkpoint.json"
    assert ck.exists()
    metrics = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
    assert metrics, "no metric records written"
    epochs = [m["epoch"] for m in metrics]
    assert epochs == sorted(epochs)
    assert {m["split"] for m in metrics} == {"train", "dev", "test"}
    assert (out / "samples.txt").exists()

    assert main(["evaluate", "--checkpoint", str(ck),
                 "--corpus", str(out / "data" / "test.txt"),
                 "--out", str(out / "eval")]) == 0
    record = json.loads((out / "eval" / "eval.json").read_text())
    assert 0.0 <= record["ter"] <= 1.0
    attn_files = sorted((out / "eval" / "attn").glob("*.txt"))
    assert attn_files
    for f in attn_files:
        attn = np.loadtxt(f, ndmin=2)
        np.testing.assert_allclose(attn.sum(axis=1), 1.0, atol=1e-9)


def test_untrained_model_scores_at_chance_level(tmp_path):
    """A randomly initialized single-pass model on the copy task lands at
    chance level over content tokens, (V-3)/(V-2) within 0.1."""
    from deliblab.model import FirstPassParams, Vocab
    from deliblab.checkpoints import save_checkpoint
    from deliblab.tasks import TaskSpec, generate_corpus, save_corpus

    V = 12
    spec = TaskSpec(kind="copy", V=V, L_min=4, L_max=8, n_train=0, n_dev=0,
                    n_test=80, seed=5)
    corpus_path = tmp_path / "test.txt"
    save_corpus(generate_corpus(spec, "test"), corpus_path)
    first = FirstPassParams(Vocab(V), d=8, seed=123)
    ck = tmp_path / "ck.json"
    save_checkpoint(ck, first, None, {"t_max": 12}, epoch=0)
    assert main(["evaluate", "--checkpoint", str(ck),
                 "--corpus", str(corpus_path), "--out", str(tmp_path)]) == 0
    record = json.loads((tmp_path / "eval.json").read_text())
    chance = (V - 3) / (V - 2)
    assert abs(record["ter"] - chance) <= 0.1, record["ter"]


def test_evaluate_refuses_vocab_mismatch(tmp_path):
    out = tmp_path / "run"
    cfg_path = write_cfg(tmp_path, small_cfg(out))
    main(["generate-data", "--config", cfg_path])
    main(["train", "--config", cfg_path])
    other = small_cfg(tmp_path / "other")
    other["task"]["V"] = 9
    other_path = write_cfg(tmp_path, other, "other.json")
    main(["generate-data", "--config", other_path])
    rc = main(["evaluate", "--checkpoint", str(out / "checkpoint.json"),
               "--corpus", str(tmp_path / "other" / "data" / "test.txt")])
    assert rc == 1


def test_train_rerun_is_bit_identical(tmp_path):
    out = tmp_path / "run"
    cfg_path = write_cfg(tmp_path, small_cfg(out))
    outs = []
    for _ in range(2):
        assert main(["generate-data", "--config", cfg_path]) == 0
        assert main(["train", "--config", cfg_path]) == 0
        outs.append((out / "checkpoint.json").read_bytes())
    assert outs[0] == outs[1]


def test_verify_small_battery_deterministic(tmp_path, capsys):
    vcfg = {"V": 3, "t_max": 2, "d": 2, "trials": 400,
            "n_normalization": 2, "n_bound": 5}
    cfg_path = write_cfg(tmp_path, vcfg, "verify.json")
    rc1 = main(["verify", "--config", cfg_path, "--out", str(tmp_path / "r1")])
    out1 = capsys.readouterr().out
    rc2 = main(["verify", "--config", cfg_path, "--out", str(tmp_path / "r2")])
    out2 = capsys.readouterr().out
    assert rc1 == rc2 == 0
    assert out1 == out2
    assert (tmp_path / "r1" / "verify_report.json").read_bytes() == \
        (tmp_path / "r2" / "verify_report.json").read_bytes()
    assert "PASS" in out1


def test_bad_config_exit_code(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    assert main(["generate-data", "--config", str(path)]) == 1
    missing = small_cfg(tmp_path)
    missing["optimizer"]["lr"] = -2
    assert main(["train", "--config", write_cfg(tmp_path, missing)]) == 1


def test_usage_error_exit_code():
    assert main(["train"]) == 1  # --config missing
    assert main(["no-such-command"]) == 1


def test_numeric_failure_exit_code(tmp_path):
    # a checkpoint poisoned with NaN trips the numeric guard -> exit 2
    out = tmp_path / "run"
    cfg_path = write_cfg(tmp_path, small_cfg(out))
    main(["generate-data", "--config", cfg_path])
    main(["train", "--config", cfg_path])
    ck = out / "checkpoint.json"
    payload = json.loads(ck.read_text())
    payload["params"]["first.out.W"]["values"][0] = float("nan")
    ck.write_text(json.dumps(payload))
    rc = main(["evaluate", "--checkpoint", str(ck),
               "--corpus", str(out / "data" / "test.txt"),
               "--out", str(tmp_path / "eval")])
    assert rc == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "deliblab", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("generate-data", "train", "evaluate", "verify", "gradcheck"):
        assert cmd in proc.stdout
