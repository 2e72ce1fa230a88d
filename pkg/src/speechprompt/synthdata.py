"""Synthetic world: text grammar, instruction corpus, pseudo-speech, datasets.

Sentences are i.i.d. uniform strings over 26 letters plus space, so payloads
are unpredictable and the only learnable structure is the task itself. Tasks:
transcribe (identity), reverse, cipher (+3 cyclic letter shift), and intent
(first keyword letter maps to one of four labels). Pseudo-speech renders each
token as a run of noisy copies of a per-symbol prototype vector. Everything
derives from the master seed through named sub-seeds.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .serialization import dump_json, load_json
from .toyllm import (
    LETTERS,
    TASKS,
    PromptTemplate,
    Vocabulary,
    render_text_line,
)

ALPHABET = LETTERS + " "
CIPHER_SHIFT = 3
N_KEYWORDS = 8
N_LABELS = 4


class LeakError(RuntimeError):
    """A sentence appears in more than one split."""


def derive_seed(master: int, name: str) -> int:
    """Stable named sub-seed of the master seed."""
    digest = hashlib.sha256(f"{master}/{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


# ---------------------------------------------------------------------------
# grammar and task answers


@dataclass(frozen=True)
class GrammarConfig:
    min_len: int = 3
    max_len: int = 12


def gen_text_corpus(seed: int, size: int, grammar: GrammarConfig = GrammarConfig()) -> list[str]:
    """Deterministic sentence list: lengths uniform in [min_len, max_len],
    symbols i.i.d. uniform over the 27-symbol alphabet."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(size):
        n = int(rng.integers(grammar.min_len, grammar.max_len + 1))
        idx = rng.integers(0, len(ALPHABET), size=n)
        out.append("".join(ALPHABET[i] for i in idx))
    return out


def unique_sentence_stream(seed: int, grammar: GrammarConfig = GrammarConfig()):
    """Infinite deterministic stream of pairwise-distinct sentences."""
    rng = np.random.default_rng(seed)
    seen = set()
    while True:
        n = int(rng.integers(grammar.min_len, grammar.max_len + 1))
        idx = rng.integers(0, len(ALPHABET), size=n)
        s = "".join(ALPHABET[i] for i in idx)
        if s not in seen:
            seen.add(s)
            yield s


def build_keyword_map(seed: int) -> dict[str, str]:
    """Seeded keyword->intent-label table: 8 keyword letters, 4 labels."""
    rng = np.random.default_rng(seed)
    letters = rng.choice(list(LETTERS), size=N_KEYWORDS, replace=False)
    return {str(ch): f"<l{i % N_LABELS}>" for i, ch in enumerate(letters)}


def cipher_text(text: str) -> str:
    out = []
    for ch in text:
        if ch == " ":
            out.append(ch)
        else:
            out.append(LETTERS[(LETTERS.index(ch) + CIPHER_SHIFT) % 26])
    return "".join(out)


def intent_label(text: str, keyword_map: dict[str, str]) -> str | None:
    for ch in text:
        if ch in keyword_map:
            return keyword_map[ch]
    return None


def task_answer_ids(
    task: str, sentence: str, keyword_map: dict[str, str], vocab: Vocabulary
) -> np.ndarray | None:
    """Target token ids for a task; None when the task is undefined (intent
    on a keyword-free sentence)."""
    if task == "transcribe":
        return vocab.encode_text(sentence)
    if task == "reverse":
        return vocab.encode_text(sentence[::-1])
    if task == "cipher":
        return vocab.encode_text(cipher_text(sentence))
    if task == "intent":
        label = intent_label(sentence, keyword_map)
        return None if label is None else np.array([vocab.id(label)], dtype=np.int64)
    raise ValueError(f"unknown task {task!r}")


def gen_instruction_corpus(
    sentences: list[str],
    vocab: Vocabulary,
    templates: dict[str, PromptTemplate],
    keyword_map: dict[str, str],
) -> list[tuple[np.ndarray, int]]:
    """One rendered line per (sentence, applicable task) for LM pretraining."""
    lines = []
    for s in sentences:
        payload = vocab.encode_text(s)
        for task in TASKS:
            answer = task_answer_ids(task, s, keyword_map, vocab)
            if answer is None:
                continue
            lines.append(render_text_line(templates[task], payload, answer))
    return lines


# ---------------------------------------------------------------------------
# pseudo-speech


@dataclass
class PseudoSpeechSpec:
    """Per-symbol prototype codebook plus duration/noise/speaker-offset model."""

    codebook: np.ndarray  # (vocab_size, d_in)
    duration_range: tuple[int, int] = (16, 24)
    noise_sigma: float = 0.1
    offset_scale: float = 0.05
    codebook_seed: int = 0

    @property
    def d_in(self) -> int:
        return self.codebook.shape[1]


def build_speech_spec(
    vocab_size: int,
    seed: int,
    d_in: int = 16,
    duration_range: tuple[int, int] = (16, 24),
    noise_sigma: float = 0.1,
    offset_scale: float = 0.05,
) -> PseudoSpeechSpec:
    rng = np.random.default_rng(seed)
    codebook = rng.normal(size=(vocab_size, d_in))
    dists = np.linalg.norm(codebook[:, None, :] - codebook[None, :, :], axis=-1)
    np.fill_diagonal(dists, np.inf)
    if noise_sigma > 0 and dists.min() <= 4.0 * noise_sigma:
        raise ValueError("codebook prototypes are not distinguishable at this noise level")
    return PseudoSpeechSpec(
        codebook=codebook,
        duration_range=(int(duration_range[0]), int(duration_range[1])),
        noise_sigma=float(noise_sigma),
        offset_scale=float(offset_scale),
        codebook_seed=int(seed),
    )


def render_pseudo_speech(tokens: np.ndarray, spec: PseudoSpeechSpec, seed: int) -> np.ndarray:
    """Per token: a uniformly-drawn run of noisy prototype copies, plus one
    per-utterance offset vector. Draw order (durations, offset, noise) is
    part of the determinism contract."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size == 0:
        raise ValueError("cannot render an empty token sequence")
    rng = np.random.default_rng(seed)
    lo, hi = spec.duration_range
    durations = rng.integers(lo, hi + 1, size=tokens.size)
    offset = (
        rng.normal(scale=spec.offset_scale, size=spec.d_in)
        if spec.offset_scale > 0
        else np.zeros(spec.d_in)
    )
    frames = np.repeat(spec.codebook[tokens], durations, axis=0)
    if spec.noise_sigma > 0:
        frames = frames + rng.normal(scale=spec.noise_sigma, size=frames.shape)
    return frames + offset


def nearest_prototype_transcribe(features: np.ndarray, spec: PseudoSpeechSpec) -> np.ndarray:
    """Duration-aware nearest-prototype decoder (learnability witness).

    Classifies each frame to its closest prototype, then divides each constant
    run by the mean token duration to recover repeated symbols.
    """
    d2 = ((features[:, None, :] - spec.codebook[None, :, :]) ** 2).sum(axis=-1)
    classes = d2.argmin(axis=1)
    mean_dur = 0.5 * (spec.duration_range[0] + spec.duration_range[1])
    out = []
    i = 0
    while i < len(classes):
        j = i
        while j < len(classes) and classes[j] == classes[i]:
            j += 1
        count = max(1, int(round((j - i) / mean_dur)))
        out.extend([classes[i]] * count)
        i = j
    return np.array(out, dtype=np.int64)


# ---------------------------------------------------------------------------
# task datasets


@dataclass
class TaskRecord:
    record_id: str
    task: str
    sentence: str
    input_ids: np.ndarray
    target_ids: np.ndarray
    template_id: str
    features: np.ndarray


@dataclass
class TaskDataset:
    task: str
    seed: int
    splits: dict[str, list[TaskRecord]]

    def split(self, name: str) -> list[TaskRecord]:
        return self.splits[name]


@dataclass(frozen=True)
class WorldConfig:
    n_lm_sentences: int = 6000
    n_lm_heldout: int = 400
    n_asr_train: int = 8000
    n_few_shot: int = 200
    n_test: int = 1000
    grammar: GrammarConfig = field(default_factory=GrammarConfig)
    d_in: int = 16
    duration_range: tuple[int, int] = (16, 24)
    noise_sigma: float = 0.1
    offset_scale: float = 0.05

    def to_dict(self) -> dict:
        return {
            "n_lm_sentences": self.n_lm_sentences,
            "n_lm_heldout": self.n_lm_heldout,
            "n_asr_train": self.n_asr_train,
            "n_few_shot": self.n_few_shot,
            "n_test": self.n_test,
            "min_len": self.grammar.min_len,
            "max_len": self.grammar.max_len,
            "d_in": self.d_in,
            "duration_range": list(self.duration_range),
            "noise_sigma": self.noise_sigma,
            "offset_scale": self.offset_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        return cls(
            n_lm_sentences=int(d["n_lm_sentences"]),
            n_lm_heldout=int(d["n_lm_heldout"]),
            n_asr_train=int(d["n_asr_train"]),
            n_few_shot=int(d["n_few_shot"]),
            n_test=int(d["n_test"]),
            grammar=GrammarConfig(int(d["min_len"]), int(d["max_len"])),
            d_in=int(d["d_in"]),
            duration_range=tuple(int(x) for x in d["duration_range"]),
            noise_sigma=float(d["noise_sigma"]),
            offset_scale=float(d["offset_scale"]),
        )


@dataclass
class World:
    config: WorldConfig
    master_seed: int
    vocab: Vocabulary
    templates: dict[str, PromptTemplate]
    spec: PseudoSpeechSpec
    keyword_map: dict[str, str]
    datasets: dict[str, TaskDataset]
    lm_train_lines: list[tuple[np.ndarray, int]]
    lm_heldout_lines: list[tuple[np.ndarray, int]]
    text_eval: dict[str, list[tuple[str, np.ndarray]]]  # task -> (sentence, answer ids)


def _make_records(
    task: str,
    split: str,
    sentences: list[str],
    vocab: Vocabulary,
    keyword_map: dict[str, str],
    spec: PseudoSpeechSpec,
    master_seed: int,
) -> list[TaskRecord]:
    records = []
    for idx, s in enumerate(sentences):
        input_ids = vocab.encode_text(s)
        target_ids = task_answer_ids(task, s, keyword_map, vocab)
        assert target_ids is not None
        feats = render_pseudo_speech(
            input_ids, spec, derive_seed(master_seed, f"frames/{task}/{split}/{idx}")
        )
        records.append(
            TaskRecord(
                record_id=f"{task}-{split}-{idx}",
                task=task,
                sentence=s,
                input_ids=input_ids,
                target_ids=target_ids,
                template_id=task,
                features=feats,
            )
        )
    return records


def check_no_leak(datasets: dict[str, TaskDataset], extra_pools: list[list[str]] | None = None):
    """Fatal if any sentence appears in two splits anywhere in the world."""
    seen: dict[str, str] = {}
    pools = []
    for ds in datasets.values():
        for split, records in ds.splits.items():
            pools.append((f"{ds.task}/{split}", [r.sentence for r in records]))
    for i, pool in enumerate(extra_pools or []):
        pools.append((f"extra/{i}", pool))
    for name, sentences in pools:
        for s in sentences:
            if s in seen and seen[s] != name:
                raise LeakError(f"sentence {s!r} appears in {seen[s]} and {name}")
            seen.setdefault(s, name)


def build_world(cfg: WorldConfig, master_seed: int, vocab: Vocabulary, templates) -> World:
    spec = build_speech_spec(
        vocab.size,
        derive_seed(master_seed, "codebook"),
        d_in=cfg.d_in,
        duration_range=cfg.duration_range,
        noise_sigma=cfg.noise_sigma,
        offset_scale=cfg.offset_scale,
    )
    keyword_map = build_keyword_map(derive_seed(master_seed, "keywords"))
    stream = unique_sentence_stream(derive_seed(master_seed, "sentences"), cfg.grammar)

    def take(n):
        return [next(stream) for _ in range(n)]

    def take_with_keyword(n):
        out = []
        while len(out) < n:
            s = next(stream)
            if intent_label(s, keyword_map) is not None:
                out.append(s)
        return out

    lm_train = take(cfg.n_lm_sentences)
    lm_heldout = take(cfg.n_lm_heldout)

    datasets: dict[str, TaskDataset] = {}
    for task in TASKS:
        picker = take_with_keyword if task == "intent" else take
        splits = {}
        if task == "transcribe":
            splits["asr-train"] = picker(cfg.n_asr_train)
        splits["few-shot"] = picker(cfg.n_few_shot)
        splits["test"] = picker(cfg.n_test)
        datasets[task] = TaskDataset(
            task=task,
            seed=master_seed,
            splits={
                split: _make_records(task, split, sentences, vocab, keyword_map, spec, master_seed)
                for split, sentences in splits.items()
            },
        )

    check_no_leak(datasets, extra_pools=[lm_train, lm_heldout])

    lm_train_lines = gen_instruction_corpus(lm_train, vocab, templates, keyword_map)
    lm_heldout_lines = gen_instruction_corpus(lm_heldout, vocab, templates, keyword_map)
    text_eval = {}
    for task in TASKS:
        pairs = []
        for s in lm_heldout:
            answer = task_answer_ids(task, s, keyword_map, vocab)
            if answer is not None:
                pairs.append((s, answer))
        text_eval[task] = pairs

    return World(
        config=cfg,
        master_seed=master_seed,
        vocab=vocab,
        templates=templates,
        spec=spec,
        keyword_map=keyword_map,
        datasets=datasets,
        lm_train_lines=lm_train_lines,
        lm_heldout_lines=lm_heldout_lines,
        text_eval=text_eval,
    )


# ---------------------------------------------------------------------------
# on-disk format: manifest.jsonl + frames.bin (+ meta.json)


def save_dataset(ds: TaskDataset, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames_path = out_dir / "frames.bin"
    manifest_path = out_dir / "manifest.jsonl"
    offset = 0
    with open(frames_path, "wb") as fb, open(manifest_path, "w", encoding="utf-8") as mf:
        for split in sorted(ds.splits):
            for r in ds.splits[split]:
                blob = struct.pack("<QQ", *r.features.shape) + np.ascontiguousarray(
                    r.features, dtype="<f8"
                ).tobytes()
                fb.write(blob)
                mf.write(
                    json.dumps(
                        {
                            "id": r.record_id,
                            "task": r.task,
                            "split": split,
                            "sentence": r.sentence,
                            "input_ids": r.input_ids.tolist(),
                            "target_ids": r.target_ids.tolist(),
                            "template": r.template_id,
                            "offset": offset,
                            "frames": int(r.features.shape[0]),
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
                offset += len(blob)
    dump_json(
        out_dir / "meta.json",
        {
            "task": ds.task,
            "seed": ds.seed,
            "splits": {k: len(v) for k, v in ds.splits.items()},
            "frames_bytes": offset,
        },
    )


def load_dataset(out_dir) -> TaskDataset:
    out_dir = Path(out_dir)
    meta = load_json(out_dir / "meta.json")
    blob = (out_dir / "frames.bin").read_bytes()
    splits: dict[str, list[TaskRecord]] = {name: [] for name in meta["splits"]}
    with open(out_dir / "manifest.jsonl", "r", encoding="utf-8") as mf:
        for line in mf:
            rec = json.loads(line)
            off = rec["offset"]
            t0, d_in = struct.unpack("<QQ", blob[off : off + 16])
            feats = np.frombuffer(
                blob[off + 16 : off + 16 + t0 * d_in * 8], dtype="<f8"
            ).reshape(t0, d_in).astype(np.float64)
            splits.setdefault(rec["split"], []).append(
                TaskRecord(
                    record_id=rec["id"],
                    task=rec["task"],
                    sentence=rec["sentence"],
                    input_ids=np.array(rec["input_ids"], dtype=np.int64),
                    target_ids=np.array(rec["target_ids"], dtype=np.int64),
                    template_id=rec["template"],
                    features=feats,
                )
            )
    return TaskDataset(task=meta["task"], seed=meta["seed"], splits=splits)
