"""Comparison systems: CTC transcription front-end, text cascade, oracle text
path, and the stacked-frame encoder-prompt system (plus its flat-start
variant, which differs only in training regime)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .diffmath import ParamSet, Tensor
from .encoder import EncoderConfig, encode, encode_batch, register_encoder_params, stack_frames
from .metrics import token_accuracy
from .synthdata import TaskRecord
from .toyllm import DecodeConfig, FrozenLM, PromptTemplate, Vocabulary
from .training import LossBreakdown, TrainConfig, ce_loss, prompt_forward, teacher_forced_accuracy

NEG = -1e30


class InfeasibleAlignmentError(ValueError):
    """No monotonic blank-augmented alignment exists (frames < target length)."""


def _lse(parts: list[Tensor]) -> Tensor:
    """Elementwise log-sum-exp over a list of equal-length vectors."""
    S = parts[0].shape[0]
    stacked = dm.concat([dm.reshape(p, (1, S)) for p in parts], axis=0)
    return dm.logsumexp(stacked, axis=0)


def ctc_loss(log_probs: Tensor, targets: np.ndarray) -> Tensor:
    """Negative log of the total probability over blank-augmented monotonic
    alignments (forward dynamic program in log space). Blank is the last class."""
    T, K = log_probs.shape
    blank = K - 1
    tgt = [int(t) for t in np.asarray(targets).ravel()]
    if T < len(tgt):
        raise InfeasibleAlignmentError(f"{T} frames cannot align {len(tgt)} targets")
    ext = [blank]
    for t in tgt:
        ext.extend([t, blank])
    S = len(ext)
    ext_arr = np.array(ext, dtype=np.int64)

    skip_mask = np.full(S, NEG)
    for s in range(2, S):
        if ext[s] != blank and ext[s] != ext[s - 2]:
            skip_mask[s] = 0.0

    init = np.full(S, NEG)
    init[0] = 0.0
    if S > 1:
        init[1] = 0.0
    alpha = dm.add(log_probs[(0, ext_arr)], dm.const(init))
    pad1 = dm.const(np.array([NEG]))
    pad2 = dm.const(np.array([NEG, NEG]))
    for t in range(1, T):
        stay = alpha
        step = dm.concat([pad1, alpha[: S - 1]]) if S > 1 else None
        skip = dm.add(dm.concat([pad2, alpha[: S - 2]]), dm.const(skip_mask)) if S > 2 else None
        parts = [p for p in (stay, step, skip) if p is not None]
        alpha = dm.add(_lse(parts), log_probs[(t, ext_arr)])

    if S > 1:
        final = _lse([alpha[S - 1 : S], alpha[S - 2 : S - 1]])
    else:
        final = alpha[0:1]
    return dm.mul(dm.tsum(final), -1.0)


def ctc_greedy_decode(log_probs: np.ndarray, blank: int) -> np.ndarray:
    """Per-frame argmax (ties to the lowest id), collapse repeats, drop blanks."""
    best = np.asarray(log_probs).argmax(axis=1)
    out = []
    prev = -1
    for s in best:
        if s != prev and s != blank:
            out.append(int(s))
        prev = s
    return np.array(out, dtype=np.int64)


class CtcSystem:
    """Transcription model: shared encoder plus a (V+1)-way output layer."""

    name = "cascade"

    def __init__(self, encoder_cfg: EncoderConfig, vocab_size: int, seed: int):
        self.encoder_cfg = encoder_cfg
        self.vocab_size = vocab_size
        self.blank = vocab_size  # outside the LM vocabulary
        self.params = ParamSet(seed=seed)
        register_encoder_params(self.params, encoder_cfg)
        self.params.add("ctc.w", (encoder_cfg.d_out, vocab_size + 1))
        self.params.add("ctc.b", (vocab_size + 1,), init="zeros")

    def log_probs(self, features: np.ndarray) -> Tensor:
        e = encode(features, self.params, self.encoder_cfg)
        logits = dm.add(dm.matmul(e, self.params["ctc.w"]), self.params["ctc.b"])
        return dm.log_softmax(logits, axis=-1)

    def loss(self, record: TaskRecord, cfg: TrainConfig) -> tuple[Tensor, LossBreakdown]:
        nll = ctc_loss(self.log_probs(record.features), record.input_ids)
        # per-token normalisation keeps batches with long transcripts balanced
        nll = dm.mul(nll, 1.0 / max(len(record.input_ids), 1))
        parts = LossBreakdown(float(nll.data), float(nll.data), 0.0, 0.0)
        return nll, parts

    def batch_loss(self, records: list[TaskRecord], cfg: TrainConfig):
        enc, lengths = encode_batch(
            [r.features for r in records], self.params, self.encoder_cfg
        )
        total = None
        parts_list = []
        for i, r in enumerate(records):
            logits = dm.add(
                dm.matmul(enc[i, : lengths[i]], self.params["ctc.w"]), self.params["ctc.b"]
            )
            nll = ctc_loss(dm.log_softmax(logits, axis=-1), r.input_ids)
            nll = dm.mul(nll, 1.0 / max(len(r.input_ids), 1))
            total = nll if total is None else dm.add(total, nll)
            parts_list.append(LossBreakdown(float(nll.data), float(nll.data), 0.0, 0.0))
        return dm.mul(total, 1.0 / len(records)), parts_list

    def transcribe(self, features: np.ndarray) -> np.ndarray:
        with dm.no_grad():
            lp = self.log_probs(features).data
        return ctc_greedy_decode(lp, self.blank)

    def validation_metric(self, records: list[TaskRecord]) -> float:
        scores = [
            token_accuracy(self.transcribe(r.features).tolist(), r.input_ids.tolist())
            for r in records
        ]
        return float(np.mean(scores)) if scores else 0.0


class EncoderLlmSystem:
    """Stacked-frame prompts through an extra projection; CE-only training.

    The flat-start variant is this same model trained only on few-shot pairs.
    """

    name = "encoder-llm"

    def __init__(
        self,
        encoder_cfg: EncoderConfig,
        lm: FrozenLM,
        templates: dict[str, PromptTemplate],
        seed: int,
        stack_k: int = 8,
    ):
        self.encoder_cfg = encoder_cfg
        self.lm = lm
        self.templates = templates
        self.stack_k = stack_k
        self.params = ParamSet(seed=seed)
        register_encoder_params(self.params, encoder_cfg)
        self.params.add("fc.w", (stack_k * encoder_cfg.d_out, lm.config.d_model))
        self.params.add("fc.b", (lm.config.d_model,), init="zeros")

    def init_encoder_from(self, arrays: dict[str, np.ndarray]):
        """Copy encoder weights from a trained CTC checkpoint."""
        self.params.set_arrays(
            {k: v for k, v in arrays.items() if k.startswith("encoder.")}
        )

    def payload(self, record: TaskRecord) -> Tensor:
        e = encode(record.features, self.params, self.encoder_cfg)
        stacked = stack_frames(e, self.stack_k)
        return dm.add(dm.matmul(stacked, self.params["fc.w"]), self.params["fc.b"])

    def loss(self, record: TaskRecord, cfg: TrainConfig) -> tuple[Tensor, LossBreakdown]:
        template = self.templates[record.template_id]
        logits, sos, ce_targets = prompt_forward(
            self.lm, template, self.payload(record), record.target_ids
        )
        ce = ce_loss(logits, ce_targets, sos)
        parts = LossBreakdown(float(ce.data), float(ce.data), 0.0, 0.0)
        return ce, parts

    def batch_loss(self, records: list[TaskRecord], cfg: TrainConfig):
        from .training import batched_prompt_ce

        enc, lengths = encode_batch(
            [r.features for r in records], self.params, self.encoder_cfg
        )
        items = []
        for i, r in enumerate(records):
            stacked = stack_frames(enc[i, : lengths[i]], self.stack_k)
            payload = dm.add(dm.matmul(stacked, self.params["fc.w"]), self.params["fc.b"])
            items.append((payload, self.templates[r.template_id], r.target_ids))
        ces = batched_prompt_ce(self.lm, items)
        total = None
        parts_list = []
        for ce in ces:
            total = ce if total is None else dm.add(total, ce)
            parts_list.append(LossBreakdown(float(ce.data), float(ce.data), 0.0, 0.0))
        return dm.mul(total, 1.0 / len(records)), parts_list

    def validation_metric(self, records: list[TaskRecord]) -> float:
        return teacher_forced_accuracy(self, records)


# ---------------------------------------------------------------------------
# inference-only compositions


def build_generation_prompt(
    lm: FrozenLM, template: PromptTemplate, payload_rows: np.ndarray
) -> np.ndarray:
    """prefix | payload | postfix | [sos] as raw embedding rows."""
    with dm.no_grad():
        prefix = lm.embed(np.asarray(template.prefix, dtype=np.int64)).data
        postfix = lm.embed(np.asarray(template.postfix, dtype=np.int64)).data
        sos = lm.embed(np.array([Vocabulary.SOS])).data
    return np.concatenate([prefix, payload_rows, postfix, sos], axis=0)


def oracle_infer(
    lm: FrozenLM,
    template: PromptTemplate,
    true_tokens: np.ndarray,
    decode: DecodeConfig | None = None,
) -> list[int]:
    """Upper bound: ground-truth text tokens as the payload."""
    with dm.no_grad():
        payload = lm.embed(true_tokens).data
    return lm.generate(build_generation_prompt(lm, template, payload), decode)


@dataclass
class CascadeSystem:
    """CTC transcription fed to the frozen LM as text; no gradient path."""

    ctc: CtcSystem
    lm: FrozenLM
    templates: dict[str, PromptTemplate]

    def infer(
        self, features: np.ndarray, template_id: str, decode: DecodeConfig | None = None
    ) -> list[int]:
        transcript = self.ctc.transcribe(features)
        with dm.no_grad():
            payload = self.lm.embed(transcript).data
        prompt = build_generation_prompt(self.lm, self.templates[template_id], payload)
        return self.lm.generate(prompt, decode)
