"""Command-line front-end: fixtures, train, finetune, eval, gradcheck, ablate.

Owns the config, checkpoint, and metrics formats. Every run archives its
resolved config; all randomness flows from the master seed through named
sub-seeds, so identical config+seed reproduces identical output bytes
(timestamps never enter output files).

Exit codes: 0 success, 1 usage, 2 integrity/fixture failure,
3 acceptance-check failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import diffmath as dm
from .baselines import CascadeSystem, CtcSystem, EncoderLlmSystem
from .diffmath import finite_diff_check
from .encoder import EncoderConfig
from .metrics import aggregate, exact_match, normalized_edit_distance, token_accuracy
from .serialization import (
    CHECKPOINT_MAGIC,
    IntegrityError,
    dump_json,
    load_json,
    read_container,
    write_container,
)
from .synthdata import (
    TaskRecord,
    World,
    WorldConfig,
    build_world,
    derive_seed,
    load_dataset,
    save_dataset,
)
from .toyllm import (
    DecodeConfig,
    FrozenLM,
    LMConfig,
    LmPretrainConfig,
    TASKS,
    Vocabulary,
    build_templates,
    default_vocabulary,
    load_fixture,
    pretrain_fixture,
    save_fixture,
)
from .training import TrainConfig, Wav2PromptSystem, run_training

SYSTEMS = ("wav2prompt", "encoder-llm", "flat-start-encoder-llm", "cascade", "oracle")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INTEGRITY = 2
EXIT_CHECK_FAILED = 3


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


DEFAULT_CONFIG: dict = {
    "master_seed": 1234,
    "out_dir": "runs/default",
    "system": "wav2prompt",
    "task": "reverse",
    "split": "test",
    "stack_k": 8,
    "tail_policy": "fire-if-half",
    "world": {
        "n_lm_sentences": 4000,
        "n_lm_heldout": 400,
        "n_asr_train": 8000,
        "n_few_shot": 200,
        "n_test": 1000,
        "min_len": 3,
        "max_len": 12,
        "d_in": 16,
        "duration_range": [16, 24],
        "noise_sigma": 0.1,
        "offset_scale": 0.05,
    },
    "lm": {
        "d_model": 64,
        "n_layers": 2,
        "n_heads": 4,
        "d_ff": 256,
        "context": 128,
        "lr": 2e-3,
        "lr_floor_frac": 0.1,
        "batch_size": 64,
        "max_epochs": 40,
        "ppl_stop": 1.005,
        "ppl_threshold": 1.35,
        "competence_min_pct": 95.0,
        "repeat_min_pct": 99.0,
        "competence_eval_n": 300,
    },
    "encoder": {
        "hidden": 48,
        "content_dim": 24,
        "n_mixing": 2,
        "firing_bias": -1.0,
    },
    "train": {
        "gamma": 20.0,
        "mu": 0.05,
        "lr": 2e-3,
        "epochs": 12,
        "batch_size": 16,
        "clip_norm": 5.0,
        "val_size": 256,
    },
    "finetune": {
        "mu": 0.05,
        "lr": 1e-3,
        "epochs": 10,
        "batch_size": 16,
        "val_size": 64,
    },
    "decode": {"beam": 5, "rep_penalty": 1.5, "max_len": 16},
    "eval": {"max_records": 0},
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if k in out and isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class ExperimentConfig:
    raw: dict

    @classmethod
    def load(cls, path: str | None, overrides: dict | None = None) -> "ExperimentConfig":
        cfg = DEFAULT_CONFIG
        if path:
            with open(path, "r", encoding="utf-8") as f:
                user = yaml.safe_load(f) or {}
            if not isinstance(user, dict):
                raise UsageError("config file must contain a mapping")
            unknown = set(user) - set(DEFAULT_CONFIG)
            if unknown:
                raise UsageError(f"unknown config keys: {sorted(unknown)}")
            cfg = _deep_merge(cfg, user)
        if overrides:
            cfg = _deep_merge(cfg, {k: v for k, v in overrides.items() if v is not None})
        return cls(raw=cfg)

    # typed views ----------------------------------------------------------

    @property
    def master_seed(self) -> int:
        return int(self.raw["master_seed"])

    @property
    def out_dir(self) -> Path:
        return Path(self.raw["out_dir"])

    def world_config(self) -> WorldConfig:
        w = self.raw["world"]
        return WorldConfig.from_dict(w)

    def lm_config(self) -> LMConfig:
        l = self.raw["lm"]
        return LMConfig(
            vocab_size=default_vocabulary().size,
            d_model=int(l["d_model"]),
            n_layers=int(l["n_layers"]),
            n_heads=int(l["n_heads"]),
            d_ff=int(l["d_ff"]),
            context=int(l["context"]),
        )

    def lm_pretrain_config(self) -> LmPretrainConfig:
        l = self.raw["lm"]
        return LmPretrainConfig(
            lr=float(l["lr"]),
            lr_floor_frac=float(l["lr_floor_frac"]),
            batch_size=int(l["batch_size"]),
            max_epochs=int(l["max_epochs"]),
            ppl_stop=float(l["ppl_stop"]),
            ppl_threshold=float(l["ppl_threshold"]),
            seed=derive_seed(self.master_seed, "lm-pretrain"),
        )

    def encoder_config(self) -> EncoderConfig:
        e = self.raw["encoder"]
        return EncoderConfig(
            d_in=int(self.raw["world"]["d_in"]),
            hidden=int(e["hidden"]),
            content_dim=int(e["content_dim"]),
            n_mixing=int(e["n_mixing"]),
            firing_bias=float(e["firing_bias"]),
        )

    def train_config(self, system: str) -> TrainConfig:
        t = self.raw["train"]
        return TrainConfig(
            gamma=float(t["gamma"]),
            mu=float(t["mu"]),
            lr=float(t["lr"]),
            epochs=int(t["epochs"]),
            batch_size=int(t["batch_size"]),
            seed=derive_seed(self.master_seed, f"train/{system}"),
            regime="asr-train",
            clip_norm=float(t["clip_norm"]),
            val_size=int(t["val_size"]),
        )

    def finetune_config(self, system: str, task: str) -> TrainConfig:
        t = self.raw["finetune"]
        return TrainConfig(
            gamma=0.0,
            mu=float(t["mu"]),
            lr=float(t["lr"]),
            epochs=int(t["epochs"]),
            batch_size=int(t["batch_size"]),
            seed=derive_seed(self.master_seed, f"finetune/{system}/{task}"),
            regime="few-shot-finetune",
            val_size=int(t["val_size"]),
        )

    def decode_config(self) -> DecodeConfig:
        d = self.raw["decode"]
        return DecodeConfig(
            beam=int(d["beam"]),
            rep_penalty=float(d["rep_penalty"]),
            max_len=int(d["max_len"]),
        )

    def archive(self, out_dir: Path):
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "config.yaml", "w", encoding="utf-8") as f:
            yaml.safe_dump(self.raw, f, sort_keys=True)


# ---------------------------------------------------------------------------
# paths and shared loading


def fixture_dir(cfg: ExperimentConfig) -> Path:
    return cfg.out_dir / "fixtures"


def lm_fixture_path(cfg: ExperimentConfig) -> Path:
    return fixture_dir(cfg) / "lm.fix"


def dataset_dir(cfg: ExperimentConfig, task: str) -> Path:
    return fixture_dir(cfg) / "datasets" / task


def checkpoint_path(cfg: ExperimentConfig, system: str, suffix: str = "") -> Path:
    return cfg.out_dir / "checkpoints" / f"{system}{suffix}.ckpt"


def metrics_path(cfg: ExperimentConfig, name: str) -> Path:
    return cfg.out_dir / "metrics" / name


def load_world_from_fixtures(cfg: ExperimentConfig):
    vocab = default_vocabulary()
    templates = build_templates(vocab)
    datasets = {}
    for task in TASKS:
        d = dataset_dir(cfg, task)
        if not (d / "meta.json").exists():
            raise IntegrityError(f"missing dataset fixture for task {task!r}: run `fixtures` first")
        datasets[task] = load_dataset(d)
    meta = load_json(fixture_dir(cfg) / "lm.meta.json")
    if not meta.get("usable", False):
        raise IntegrityError("LM fixture is marked unusable; rebuild fixtures")
    lm = load_fixture(lm_fixture_path(cfg))
    if lm.checksum != meta["param_checksum"]:
        raise IntegrityError("LM fixture checksum does not match its metadata")
    return vocab, templates, datasets, lm


def write_metrics_jsonl(path: Path, rows: list[dict]):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# systems


def build_system(name: str, cfg: ExperimentConfig, lm: FrozenLM, templates):
    seed = derive_seed(cfg.master_seed, f"init/{name}")
    enc = cfg.encoder_config()
    if name == "wav2prompt":
        return Wav2PromptSystem(enc, lm, templates, seed=seed, tail_policy=cfg.raw["tail_policy"])
    if name in ("encoder-llm", "flat-start-encoder-llm"):
        return EncoderLlmSystem(enc, lm, templates, seed=seed, stack_k=int(cfg.raw["stack_k"]))
    if name == "cascade":
        return CtcSystem(enc, lm.config.vocab_size, seed=seed)
    raise UsageError(f"system {name!r} has no trainable model")


def save_checkpoint(path: Path, system_name: str, system, cfg: ExperimentConfig,
                    result, lm: FrozenLM, extra: dict | None = None):
    path.parent.mkdir(parents=True, exist_ok=True)
    semantic_cfg = {k: v for k, v in cfg.raw.items() if k != "out_dir"}
    header = {
        "kind": "checkpoint",
        "system": system_name,
        "config": semantic_cfg,
        "lm_checksum": lm.checksum,
        "history": result.history,
        "best_epoch": result.best_epoch,
        "best_metric": result.best_metric,
    }
    if extra:
        header.update(extra)
    write_container(path, CHECKPOINT_MAGIC, header, result.best_arrays)


def load_checkpoint(path: Path, cfg: ExperimentConfig, lm: FrozenLM, templates):
    header, arrays = read_container(path, CHECKPOINT_MAGIC)
    if header["lm_checksum"] != lm.checksum:
        raise IntegrityError(f"{path}: checkpoint was trained against a different LM fixture")
    system = build_system(header["system"], cfg, lm, templates)
    system.params.set_arrays(arrays)
    return header["system"], system, header


# ---------------------------------------------------------------------------
# commands


def cmd_fixtures(cfg: ExperimentConfig) -> int:
    out = fixture_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    cfg.archive(cfg.out_dir)
    vocab = default_vocabulary()
    templates = build_templates(vocab)
    world = build_world(cfg.world_config(), derive_seed(cfg.master_seed, "dataset"), vocab, templates)
    for task, ds in world.datasets.items():
        save_dataset(ds, dataset_dir(cfg, task))
    print(f"datasets written under {out / 'datasets'}")

    lm, meta = pretrain_fixture(
        world.lm_train_lines, world.lm_heldout_lines, cfg.lm_config(), cfg.lm_pretrain_config()
    )
    print(f"LM pretrained: held-out ppl {meta['heldout_ppl']:.4f} in {meta['epochs_run']} epochs")

    # text-path competence: the precondition for every ordering criterion
    lmcfg = cfg.raw["lm"]
    n_eval = int(lmcfg["competence_eval_n"])
    decode = DecodeConfig(beam=1, max_len=int(cfg.raw["decode"]["max_len"]))
    competence = {}
    for task in TASKS:
        pairs = world.text_eval[task][:n_eval]
        prompts = []
        for sentence, _ in pairs:
            from .baselines import build_generation_prompt

            with dm.no_grad():
                payload = lm.embed(vocab.encode_text(sentence)).data
            prompts.append(build_generation_prompt(lm, templates[task], payload))
        preds = lm.generate_batch(prompts, decode)
        em = 100.0 * float(np.mean([p == a.tolist() for p, (_, a) in zip(preds, pairs)]))
        competence[task] = {"exact_match_pct": em, "n": len(pairs)}
        print(f"text competence {task}: {em:.1f}% of {len(pairs)}")

    gates = {t: float(lmcfg["competence_min_pct"]) for t in TASKS}
    gates["transcribe"] = max(gates["transcribe"], float(lmcfg["repeat_min_pct"]))
    ok = meta["usable"] and all(competence[t]["exact_match_pct"] >= gates[t] for t in TASKS)
    meta["competence"] = competence
    meta["competence_gates"] = gates
    meta["usable"] = bool(ok)
    save_fixture(lm, lm_fixture_path(cfg))
    dump_json(out / "lm.meta.json", meta)
    dump_json(out / "competence.json", {"competence": competence, "gates": gates, "usable": ok})
    if not ok:
        print("fixture UNUSABLE: competence or perplexity gate unmet", file=sys.stderr)
        return EXIT_INTEGRITY
    print(f"fixture usable; checksum {lm.checksum[:16]}…")
    return EXIT_OK


def _train_val_split(records: list[TaskRecord], val_size: int):
    val_size = min(val_size, max(len(records) // 5, 1))
    if val_size <= 0 or len(records) <= val_size:
        return records, []
    return records[:-val_size], records[-val_size:]


def cmd_train(cfg: ExperimentConfig, system_name: str) -> int:
    if system_name not in SYSTEMS:
        raise UsageError(f"unknown system {system_name!r}")
    cfg.archive(cfg.out_dir)
    if system_name == "oracle":
        print("oracle has no trainable parameters; nothing to do")
        return EXIT_OK
    vocab, templates, datasets, lm = load_world_from_fixtures(cfg)
    tcfg = cfg.train_config(system_name)
    records = datasets["transcribe"].splits["asr-train"]
    train_recs, val_recs = _train_val_split(records, tcfg.val_size)

    system = build_system(system_name, cfg, lm, templates)
    extra = {}
    if system_name == "flat-start-encoder-llm":
        # CTC-initialised but skips the transcription-data training stage
        _, ctc_sys, _ = _require_checkpoint(cfg, "cascade", lm, templates)
        system.init_encoder_from(ctc_sys.params.get_arrays())
        tcfg = TrainConfig(**{**tcfg.to_dict(), "epochs": 0})
        extra["note"] = "flat-start: CTC-initialised, no transcription-data training"
    elif system_name == "encoder-llm":
        _, ctc_sys, _ = _require_checkpoint(cfg, "cascade", lm, templates)
        system.init_encoder_from(ctc_sys.params.get_arrays())

    result = run_training(
        train_recs, system, tcfg, val_records=val_recs, lm=lm,
        log=lambda e: print(f"  epoch {e['epoch']}: loss {e['loss']['total']:.4f}"
                            + (f" val {e['val_metric']:.4f}" if "val_metric" in e else "")),
    )
    lm.verify()
    save_checkpoint(checkpoint_path(cfg, system_name), system_name, system, cfg, result, lm, extra)
    write_metrics_jsonl(
        metrics_path(cfg, f"train-{system_name}.jsonl"),
        [{"epoch": h["epoch"], **h["loss"],
          **({"val_metric": h["val_metric"]} if "val_metric" in h else {})}
         for h in result.history],
    )
    print(f"checkpoint: {checkpoint_path(cfg, system_name)} (best epoch {result.best_epoch})")
    return EXIT_OK


def _require_checkpoint(cfg: ExperimentConfig, system_name: str, lm, templates, suffix=""):
    path = checkpoint_path(cfg, system_name, suffix)
    if not path.exists():
        raise IntegrityError(f"missing checkpoint {path}; train {system_name!r} first")
    return load_checkpoint(path, cfg, lm, templates)


def cmd_finetune(cfg: ExperimentConfig, system_name: str, task: str) -> int:
    if task not in TASKS:
        raise UsageError(f"unknown task {task!r}")
    cfg.archive(cfg.out_dir)
    vocab, templates, datasets, lm = load_world_from_fixtures(cfg)
    records = datasets[task].splits["few-shot"]
    ftcfg = cfg.finetune_config(system_name, task)
    train_recs, val_recs = _train_val_split(records, ftcfg.val_size)

    if system_name == "oracle":
        print("oracle cannot be fine-tuned; nothing to do")
        return EXIT_OK
    _, system, _ = _require_checkpoint(cfg, system_name, lm, templates)

    if system_name == "cascade":
        # no end-to-end path: the CTC front-end adapts on few-shot ASR pairs
        ftcfg = TrainConfig(**{**ftcfg.to_dict(), "regime": "asr-train", "gamma": 0.0, "mu": 0.0})
    elif system_name in ("encoder-llm", "flat-start-encoder-llm"):
        pass  # CE-only objective regardless of regime fields
    drift_log: list[dict] = []
    if system_name == "wav2prompt":
        probe = val_recs or train_recs[: min(32, len(train_recs))]

        def log(entry):
            # firing-count drift diagnostic: raw firing mass vs target length
            with dm.no_grad():
                drifts = []
                for r in probe:
                    _, raw = system.representation(r.features, "raw")
                    drifts.append(abs(float(raw.alphas.data.sum()) - len(r.input_ids)))
            drift_log.append({"epoch": entry["epoch"], "mean_abs_firing_drift": float(np.mean(drifts))})
            print(f"  epoch {entry['epoch']}: loss {entry['loss']['total']:.4f} "
                  f"drift {drift_log[-1]['mean_abs_firing_drift']:.3f}")
    else:
        def log(entry):
            print(f"  epoch {entry['epoch']}: loss {entry['loss']['total']:.4f}")

    result = run_training(train_recs, system, ftcfg, val_records=val_recs, lm=lm, log=log)
    lm.verify()
    suffix = f"-ft-{task}"
    save_checkpoint(checkpoint_path(cfg, system_name, suffix), system_name, system, cfg, result, lm,
                    {"finetuned_on": task, "firing_drift": drift_log})
    rows = [{"epoch": h["epoch"], **h["loss"],
             **({"val_metric": h["val_metric"]} if "val_metric" in h else {})}
            for h in result.history]
    for row, d in zip(rows, drift_log):
        row["mean_abs_firing_drift"] = d["mean_abs_firing_drift"]
    write_metrics_jsonl(metrics_path(cfg, f"finetune-{system_name}-{task}.jsonl"), rows)
    print(f"checkpoint: {checkpoint_path(cfg, system_name, suffix)}")
    return EXIT_OK


def _payload_fn(system_name: str, system, lm: FrozenLM):
    if system_name == "oracle":
        def fn(record):
            with dm.no_grad():
                return lm.embed(record.input_ids).data
    elif system_name == "cascade":
        def fn(record):
            transcript = system.transcribe(record.features)
            with dm.no_grad():
                return lm.embed(transcript).data
    else:
        def fn(record):
            with dm.no_grad():
                return system.payload(record).data
    return fn


def evaluate_records(records, payload_fn, lm, template, decode, chunk=64):
    from .baselines import build_generation_prompt

    rows = []
    pairs = []
    for lo in range(0, len(records), chunk):
        batch = records[lo : lo + chunk]
        prompts = [build_generation_prompt(lm, template, payload_fn(r)) for r in batch]
        preds = lm.generate_batch(prompts, decode)
        for r, pred in zip(batch, preds):
            target = r.target_ids.tolist()
            pairs.append((pred, target))
            rows.append({
                "id": r.record_id,
                "pred": pred,
                "target": target,
                "exact_match": exact_match(pred, target),
                "token_accuracy": token_accuracy(pred, target),
                "norm_edit_distance": normalized_edit_distance(pred, target),
            })
    return aggregate(pairs), rows


def cmd_eval(cfg: ExperimentConfig, system_name: str, task: str, split: str,
             ckpt_suffix: str = "") -> int:
    if system_name not in SYSTEMS:
        raise UsageError(f"unknown system {system_name!r}")
    if task not in TASKS:
        raise UsageError(f"unknown task {task!r} (no such template)")
    cfg.archive(cfg.out_dir)
    vocab, templates, datasets, lm = load_world_from_fixtures(cfg)
    if split not in datasets[task].splits:
        raise UsageError(f"task {task!r} has no split {split!r}")
    records = datasets[task].splits[split]
    max_records = int(cfg.raw["eval"]["max_records"])
    if max_records > 0:
        records = records[:max_records]
    if not records:
        raise IntegrityError(f"split {task}/{split} is empty; refusing a vacuous evaluation")

    if system_name == "oracle":
        system = None
    else:
        _, system, _ = _require_checkpoint(cfg, system_name, lm, templates, ckpt_suffix)
    params_before = system.params.checksum() if system is not None else None

    summary, rows = evaluate_records(
        records, _payload_fn(system_name, system, lm), lm, templates[task], cfg.decode_config()
    )
    if system is not None and system.params.checksum() != params_before:
        raise IntegrityError("evaluation mutated system parameters")
    lm.verify()

    name = f"eval-{system_name}{ckpt_suffix}-{task}-{split}"
    write_metrics_jsonl(metrics_path(cfg, f"{name}.jsonl"), rows)
    dump_json(metrics_path(cfg, f"{name}.summary.json"), {
        "system": system_name, "checkpoint_suffix": ckpt_suffix, "task": task,
        "split": split, "seed": cfg.master_seed, "metrics": summary,
    })
    print(f"{system_name}{ckpt_suffix} on {task}/{split}: "
          f"EM {summary['exact_match_pct']:.1f}%  "
          f"token-acc {summary['token_accuracy_pct']:.1f}%  "
          f"NED {summary['norm_edit_distance']:.3f}  (n={summary['n']})")
    return EXIT_OK


def cmd_gradcheck(cfg: ExperimentConfig) -> int:
    """Finite-difference check on a tiny instance of every trainable system."""
    cfg.archive(cfg.out_dir)
    vocab = default_vocabulary()
    templates = build_templates(vocab)
    tiny_world = WorldConfig(
        n_lm_sentences=4, n_lm_heldout=2, n_asr_train=6, n_few_shot=3, n_test=3,
        d_in=6, duration_range=(4, 7),
    )
    world = build_world(tiny_world, derive_seed(cfg.master_seed, "gradcheck"), vocab, templates)
    lmcfg = LMConfig(vocab_size=vocab.size, d_model=8, n_layers=1, n_heads=2, d_ff=16, context=96)
    ps = dm.ParamSet(seed=derive_seed(cfg.master_seed, "gradcheck-lm"))
    from .toyllm import register_lm_params

    register_lm_params(ps, lmcfg, trainable=False)
    lm = FrozenLM(lmcfg, ps)
    enc = EncoderConfig(d_in=6, hidden=6, content_dim=5, n_mixing=1)

    from .training import finetune_objective, train_objective

    checks = {}
    rec = world.datasets["transcribe"].splits["asr-train"][0]
    w2p = Wav2PromptSystem(enc, lm, templates, seed=1)
    checks["wav2prompt-train"] = finite_diff_check(
        lambda: train_objective(w2p, rec, TrainConfig())[0], w2p.params,
        step=1e-4, order=4, max_scalars=220,
    )
    ft_rec = world.datasets["reverse"].splits["few-shot"][0]
    w2p2 = Wav2PromptSystem(enc, lm, templates, seed=2)
    checks["wav2prompt-finetune"] = finite_diff_check(
        lambda: finetune_objective(w2p2, ft_rec, TrainConfig(regime="few-shot-finetune"))[0],
        w2p2.params, step=1e-4, order=4, max_scalars=220,
    )
    ellm = EncoderLlmSystem(enc, lm, templates, seed=3, stack_k=4)
    checks["encoder-llm-ce"] = finite_diff_check(
        lambda: ellm.loss(rec, TrainConfig())[0], ellm.params,
        step=1e-4, order=4, max_scalars=220,
    )
    from .baselines import ctc_loss

    ctc = CtcSystem(enc, vocab.size, seed=4)
    checks["ctc"] = finite_diff_check(
        lambda: ctc.loss(rec, TrainConfig())[0], ctc.params,
        step=1e-4, order=4, max_scalars=220,
    )

    report = {
        name: {"max_rel_err": r.max_rel_err, "passed": r.passed(1e-4),
               "params": {e.name: e.max_rel_err for e in r.entries.values()}}
        for name, r in checks.items()
    }
    out = cfg.out_dir / "gradcheck.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    dump_json(out, report)
    ok = True
    for name, r in checks.items():
        lm_leak = any(e.startswith("lm.") for e in report[name]["params"])
        print(f"{name}: max rel err {r.max_rel_err:.3e} "
              f"{'PASS' if r.passed(1e-4) and not lm_leak else 'FAIL'}")
        ok &= r.passed(1e-4) and not lm_leak
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_ablate(cfg: ExperimentConfig) -> int:
    """Train with and without the embedding-MSE term on identical seeds, then
    compare zero-shot transfer."""
    cfg.archive(cfg.out_dir)
    vocab, templates, datasets, lm = load_world_from_fixtures(cfg)
    records = datasets["transcribe"].splits["asr-train"]
    tasks = ("reverse", "cipher")
    results = {}
    for label, gamma in (("with-mse", None), ("no-mse", 0.0)):
        tcfg = cfg.train_config("wav2prompt")  # identical seeds by construction
        if gamma is not None:
            tcfg = TrainConfig(**{**tcfg.to_dict(), "gamma": gamma})
        train_recs, val_recs = _train_val_split(records, tcfg.val_size)
        system = build_system("wav2prompt", cfg, lm, templates)
        result = run_training(train_recs, system, tcfg, val_records=val_recs, lm=lm)
        system.params.set_arrays(result.best_arrays)
        row = {"gamma": tcfg.gamma}
        for task in tasks:
            recs = datasets[task].splits["test"]
            max_records = int(cfg.raw["eval"]["max_records"])
            if max_records > 0:
                recs = recs[:max_records]
            summary, _ = evaluate_records(
                recs, _payload_fn("wav2prompt", system, lm), lm, templates[task],
                cfg.decode_config(),
            )
            row[task] = summary["exact_match_pct"]
        results[label] = row
        print(f"{label} (gamma={row['gamma']}): " +
              "  ".join(f"{t} EM {row[t]:.1f}%" for t in tasks))

    lm.verify()
    table_rows = [
        ("variant", "gamma", *[f"{t} EM%" for t in tasks]),
        *[(label, f"{results[label]['gamma']:g}",
           *[f"{results[label][t]:.1f}" for t in tasks]) for label in results],
    ]
    widths = [max(len(str(r[i])) for r in table_rows) for i in range(len(table_rows[0]))]
    text = "\n".join("  ".join(str(c).ljust(w) for c, w in zip(r, widths)) for r in table_rows)
    out = cfg.out_dir / "ablate"
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.txt").write_text(text + "\n", encoding="utf-8")
    dump_json(out / "table.json", {
        "results": results, "tasks": list(tasks),
        "seeds": {"master": cfg.master_seed,
                  "train": derive_seed(cfg.master_seed, "train/wav2prompt"),
                  "init": derive_seed(cfg.master_seed, "init/wav2prompt")},
    })
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="speechprompt", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("fixtures", "train", "finetune", "eval", "gradcheck", "ablate"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", default=None, help="YAML config path")
        sp.add_argument("--seed", type=int, default=None, help="master seed override")
        sp.add_argument("--out", default=None, help="output directory override")
        sp.add_argument("--system", default=None, choices=SYSTEMS)
        sp.add_argument("--task", default=None, choices=TASKS)
        sp.add_argument("--split", default=None)
        sp.add_argument("--finetuned", default=None, choices=TASKS,
                        help="evaluate the checkpoint fine-tuned on this task")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        cfg = ExperimentConfig.load(args.config, {
            "master_seed": args.seed, "out_dir": args.out,
            "system": args.system, "task": args.task, "split": args.split,
        })
        system = args.system or cfg.raw["system"]
        task = args.task or cfg.raw["task"]
        split = args.split or cfg.raw["split"]
        if args.command == "fixtures":
            return cmd_fixtures(cfg)
        if args.command == "train":
            return cmd_train(cfg, system)
        if args.command == "finetune":
            return cmd_finetune(cfg, system, task)
        if args.command == "eval":
            suffix = f"-ft-{args.finetuned}" if args.finetuned else ""
            return cmd_eval(cfg, system, task, split, suffix)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except IntegrityError as e:
        print(f"integrity error: {e}", file=sys.stderr)
        return EXIT_INTEGRITY


if __name__ == "__main__":
    sys.exit(main())
