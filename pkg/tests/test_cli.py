import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

from speechprompt import cli
from speechprompt.cli import (
    EXIT_CHECK_FAILED,
    EXIT_INTEGRITY,
    EXIT_OK,
    EXIT_USAGE,
    ExperimentConfig,
    main,
)
from speechprompt.serialization import CHECKPOINT_MAGIC, read_container

TINY = {
    "master_seed": 99,
    "world": {
        "n_lm_sentences": 40, "n_lm_heldout": 10, "n_asr_train": 16,
        "n_few_shot": 6, "n_test": 8, "min_len": 3, "max_len": 6,
        "d_in": 6, "duration_range": [4, 7],
    },
    "lm": {
        "d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32,
        "max_epochs": 2, "ppl_stop": 1.0, "ppl_threshold": 1000.0,
        "competence_min_pct": 0.0, "repeat_min_pct": 0.0, "competence_eval_n": 6,
    },
    "encoder": {"hidden": 8, "content_dim": 6, "n_mixing": 1},
    "train": {"epochs": 1, "batch_size": 8, "val_size": 4},
    "finetune": {"epochs": 1, "batch_size": 4, "val_size": 2},
    "decode": {"beam": 2, "rep_penalty": 1.5, "max_len": 8},
    "eval": {"max_records": 4},
}


def write_config(tmp, overrides=None):
    cfg = TINY if not overrides else cli._deep_merge(TINY, overrides)
    path = tmp / "config.yaml"
    with open(path, "w") as f:
        yaml.safe_dump(cfg, f)
    return str(path)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Fixtures built + all systems trained once, shared by the module."""
    tmp = tmp_path_factory.mktemp("cli")
    out = str(tmp / "run")
    cfgp = write_config(tmp)
    assert main(["fixtures", "--config", cfgp, "--out", out]) == EXIT_OK
    assert main(["train", "--config", cfgp, "--out", out, "--system", "cascade"]) == EXIT_OK
    assert main(["train", "--config", cfgp, "--out", out, "--system", "wav2prompt"]) == EXIT_OK
    assert main(["train", "--config", cfgp, "--out", out, "--system", "encoder-llm"]) == EXIT_OK
    assert main(["train", "--config", cfgp, "--out", out, "--system", "flat-start-encoder-llm"]) == EXIT_OK
    return tmp, Path(out), cfgp


class TestFixtures:
    def test_outputs_exist(self, workdir):
        _, out, _ = workdir
        assert (out / "fixtures" / "lm.fix").exists()
        assert (out / "fixtures" / "lm.meta.json").exists()
        assert (out / "fixtures" / "competence.json").exists()
        assert (out / "config.yaml").exists()
        for task in ("transcribe", "reverse", "cipher", "intent"):
            assert (out / "fixtures" / "datasets" / task / "manifest.jsonl").exists()

    def test_unmet_competence_gate_fails(self, tmp_path):
        cfgp = write_config(tmp_path, {"lm": {"competence_min_pct": 95.0, "repeat_min_pct": 99.0}})
        rc = main(["fixtures", "--config", cfgp, "--out", str(tmp_path / "r")])
        assert rc == EXIT_INTEGRITY
        meta = json.loads((tmp_path / "r" / "fixtures" / "lm.meta.json").read_text())
        assert meta["usable"] is False

    def test_unusable_fixture_blocks_training(self, tmp_path):
        cfgp = write_config(tmp_path, {"lm": {"competence_min_pct": 95.0}})
        out = str(tmp_path / "r")
        main(["fixtures", "--config", cfgp, "--out", out])
        assert main(["train", "--config", cfgp, "--out", out, "--system", "wav2prompt"]) == EXIT_INTEGRITY


class TestTrain:
    def test_checkpoints_and_metrics(self, workdir):
        _, out, _ = workdir
        for system in ("wav2prompt", "cascade", "encoder-llm", "flat-start-encoder-llm"):
            assert (out / "checkpoints" / f"{system}.ckpt").exists()
        assert (out / "metrics" / "train-wav2prompt.jsonl").exists()

    def test_oracle_is_noop(self, workdir):
        tmp, out, cfgp = workdir
        assert main(["train", "--config", cfgp, "--out", str(out), "--system", "oracle"]) == EXIT_OK
        assert not (out / "checkpoints" / "oracle.ckpt").exists()

    def test_encoder_llm_requires_ctc_checkpoint(self, tmp_path):
        cfgp = write_config(tmp_path)
        out = str(tmp_path / "r")
        assert main(["fixtures", "--config", cfgp, "--out", out]) == EXIT_OK
        rc = main(["train", "--config", cfgp, "--out", out, "--system", "encoder-llm"])
        assert rc == EXIT_INTEGRITY

    def test_encoder_llm_initialised_from_ctc(self, workdir):
        _, out, _ = workdir
        _, ctc_arrays = read_container(out / "checkpoints" / "cascade.ckpt", CHECKPOINT_MAGIC)
        header, fs_arrays = read_container(
            out / "checkpoints" / "flat-start-encoder-llm.ckpt", CHECKPOINT_MAGIC
        )
        # flat-start trains 0 epochs: encoder params equal the CTC checkpoint
        for name, arr in ctc_arrays.items():
            if name.startswith("encoder."):
                assert np.array_equal(arr, fs_arrays[name])

    def test_checkpoint_roundtrip_bit_exact(self, workdir, tmp_path):
        _, out, _ = workdir
        src = out / "checkpoints" / "wav2prompt.ckpt"
        header, arrays = read_container(src, CHECKPOINT_MAGIC)
        from speechprompt.serialization import write_container

        dst = tmp_path / "copy.ckpt"
        write_container(dst, CHECKPOINT_MAGIC, {k: v for k, v in header.items()
                                                if k not in ("arrays", "blob_sha256")}, arrays)
        assert dst.read_bytes() == src.read_bytes()


class TestEval:
    def test_oracle_eval(self, workdir):
        _, out, cfgp = workdir
        rc = main(["eval", "--config", cfgp, "--out", str(out),
                   "--system", "oracle", "--task", "transcribe", "--split", "test"])
        assert rc == EXIT_OK
        summary = json.loads(
            (out / "metrics" / "eval-oracle-transcribe-test.summary.json").read_text()
        )
        assert summary["metrics"]["n"] == 4  # max_records cap

    def test_trained_system_eval(self, workdir):
        _, out, cfgp = workdir
        for system in ("wav2prompt", "encoder-llm", "cascade"):
            rc = main(["eval", "--config", cfgp, "--out", str(out),
                       "--system", system, "--task", "reverse", "--split", "test"])
            assert rc == EXIT_OK

    def test_unknown_task_is_usage_error(self, workdir):
        _, out, cfgp = workdir
        rc = main(["eval", "--config", cfgp, "--out", str(out),
                   "--system", "oracle", "--task", "nonsense", "--split", "test"])
        assert rc == EXIT_USAGE

    def test_eval_never_writes_parameters(self, workdir):
        _, out, cfgp = workdir
        ckpt = out / "checkpoints" / "wav2prompt.ckpt"
        before = ckpt.read_bytes()
        main(["eval", "--config", cfgp, "--out", str(out),
              "--system", "wav2prompt", "--task", "cipher", "--split", "test"])
        assert ckpt.read_bytes() == before

    def test_empty_split_rejected(self, tmp_path):
        cfgp = write_config(tmp_path, {"world": {"n_few_shot": 0}})
        out = str(tmp_path / "r")
        assert main(["fixtures", "--config", cfgp, "--out", out]) == EXIT_OK
        rc = main(["eval", "--config", cfgp, "--out", out,
                   "--system", "oracle", "--task", "reverse", "--split", "few-shot"])
        assert rc == EXIT_INTEGRITY


class TestFinetune:
    def test_finetune_writes_checkpoint_and_drift(self, workdir):
        _, out, cfgp = workdir
        rc = main(["finetune", "--config", cfgp, "--out", str(out),
                   "--system", "wav2prompt", "--task", "reverse"])
        assert rc == EXIT_OK
        assert (out / "checkpoints" / "wav2prompt-ft-reverse.ckpt").exists()
        lines = (out / "metrics" / "finetune-wav2prompt-reverse.jsonl").read_text().splitlines()
        assert all("mean_abs_firing_drift" in json.loads(l) for l in lines)

    def test_zero_epoch_finetune_equals_zero_shot(self, tmp_path, workdir):
        tmp, out, _ = workdir
        cfgp2 = write_config(tmp_path, {"finetune": {"epochs": 0}})
        rc = main(["finetune", "--config", cfgp2, "--out", str(out),
                   "--system", "wav2prompt", "--task", "cipher"])
        assert rc == EXIT_OK
        base = main(["eval", "--config", cfgp2, "--out", str(out),
                     "--system", "wav2prompt", "--task", "cipher", "--split", "test"])
        ft = main(["eval", "--config", cfgp2, "--out", str(out),
                   "--system", "wav2prompt", "--task", "cipher", "--split", "test",
                   "--finetuned", "cipher"])
        assert base == ft == EXIT_OK
        s1 = json.loads((out / "metrics" / "eval-wav2prompt-cipher-test.summary.json").read_text())
        s2 = json.loads(
            (out / "metrics" / "eval-wav2prompt-ft-cipher-cipher-test.summary.json").read_text()
        )
        assert s1["metrics"] == s2["metrics"]

    def test_cascade_finetune_adapts_ctc(self, workdir):
        _, out, cfgp = workdir
        rc = main(["finetune", "--config", cfgp, "--out", str(out),
                   "--system", "cascade", "--task", "reverse"])
        assert rc == EXIT_OK
        assert (out / "checkpoints" / "cascade-ft-reverse.ckpt").exists()


class TestGradcheck:
    def test_passes_and_writes_report(self, tmp_path):
        cfgp = write_config(tmp_path)
        out = tmp_path / "r"
        rc = main(["gradcheck", "--config", cfgp, "--out", str(out)])
        assert rc == EXIT_OK
        report = json.loads((out / "gradcheck.json").read_text())
        assert set(report) == {"wav2prompt-train", "wav2prompt-finetune", "encoder-llm-ce", "ctc"}
        for entry in report.values():
            assert entry["passed"]
            assert not any(p.startswith("lm.") for p in entry["params"])


class TestReproducibility:
    def test_identical_config_and_seed_bitwise_outputs(self, tmp_path):
        cfgp = write_config(tmp_path)
        outs = []
        for sub in ("a", "b"):
            out = str(tmp_path / sub)
            assert main(["fixtures", "--config", cfgp, "--out", out]) == EXIT_OK
            assert main(["train", "--config", cfgp, "--out", out, "--system", "cascade"]) == EXIT_OK
            assert main(["eval", "--config", cfgp, "--out", out, "--system", "cascade",
                         "--task", "transcribe", "--split", "test"]) == EXIT_OK
            outs.append(Path(out))
        a, b = outs
        for rel in (
            "fixtures/lm.fix",
            "fixtures/datasets/reverse/manifest.jsonl",
            "fixtures/datasets/reverse/frames.bin",
            "checkpoints/cascade.ckpt",
            "metrics/train-cascade.jsonl",
            "metrics/eval-cascade-transcribe-test.jsonl",
            "metrics/eval-cascade-transcribe-test.summary.json",
        ):
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


class TestConfig:
    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("bogus_key: 1\n")
        with pytest.raises(cli.UsageError):
            ExperimentConfig.load(str(path))

    def test_archive_is_verbatim_resolved(self, tmp_path, workdir):
        _, out, _ = workdir
        archived = yaml.safe_load((out / "config.yaml").read_text())
        assert archived["world"]["n_asr_train"] == 16
        assert archived["train"]["gamma"] == 20.0  # defaults merged in

    def test_console_entry_point(self):
        proc = subprocess.run(
            [sys.executable, "-m", "speechprompt.cli", "eval", "--help"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        assert "--system" in proc.stdout
