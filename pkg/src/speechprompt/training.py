"""Losses and training regimes for the speech-prompt system.

Two regimes: transcription-data training (CE through the frozen LM + embedding
MSE + quantity loss, weighted gamma/mu) and few-shot fine-tuning (MSE dropped,
raw firing weights, quantity loss kept). The LM never receives gradients; its
checksum is verified before and after every run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from .cif import firing_weights, integrate_and_fire, project, quantity_loss, scale_weights
from .diffmath import Adam, ParamSet, Tensor
from .encoder import EncoderConfig, encode, encode_batch, register_encoder_params
from .synthdata import TaskRecord, derive_seed
from .toyllm import FrozenLM, PromptTemplate, Vocabulary

REGIMES = ("asr-train", "few-shot-finetune")


class TrainingError(RuntimeError):
    pass


class LengthMismatchError(ValueError):
    """Representation/target lengths differ; scaled-mode invariant violated."""


@dataclass
class TrainConfig:
    gamma: float = 20.0
    mu: float = 0.05
    lr: float = 2e-3
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0
    regime: str = "asr-train"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    val_size: int = 256

    def __post_init__(self):
        if self.gamma < 0 or self.mu < 0:
            raise ValueError("gamma and mu must be >= 0")
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma, "mu": self.mu, "lr": self.lr, "epochs": self.epochs,
            "batch_size": self.batch_size, "seed": self.seed, "regime": self.regime,
            "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "clip_norm": self.clip_norm, "val_size": self.val_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class LossBreakdown:
    total: float
    ce: float
    mse: float
    qua: float

    def recomposes(self, gamma: float, mu: float, tol: float = 1e-12) -> bool:
        return abs(self.total - (self.ce + gamma * self.mse + mu * self.qua)) <= tol

    def to_dict(self) -> dict:
        return {"total": self.total, "ce": self.ce, "mse": self.mse, "qua": self.qua}


def mse_loss(rep: Tensor, targets: Tensor) -> Tensor:
    """Sum over rows of the per-row mean squared difference."""
    if rep.shape[0] != targets.shape[0]:
        raise LengthMismatchError(
            f"representation rows {rep.shape[0]} != target rows {targets.shape[0]}"
        )
    diff = dm.sub(rep, targets)
    return dm.mul(dm.tsum(dm.mul(diff, diff)), 1.0 / rep.shape[1])


def ce_loss(logits: Tensor, targets: np.ndarray, start: int) -> Tensor:
    """Mean NLL of ``targets`` predicted at positions start..start+len-1."""
    m = len(targets)
    if start + m > logits.shape[0]:
        raise ValueError("target longer than the available logits span")
    ls = dm.log_softmax(logits, axis=-1)
    picked = ls[(np.arange(start, start + m), np.asarray(targets, dtype=np.int64))]
    return dm.mul(dm.tsum(picked), -1.0 / m)


def prompt_forward(
    lm: FrozenLM, template: PromptTemplate, payload: Tensor, answer_ids: np.ndarray
) -> tuple[Tensor, int, np.ndarray]:
    """Concatenated forward prefix|payload|postfix|[sos]+answer.

    Returns (logits, index of the [sos] row, CE targets = answer + [eos]).
    """
    prefix = lm.embed(np.asarray(template.prefix, dtype=np.int64))
    postfix = lm.embed(np.asarray(template.postfix, dtype=np.int64))
    z = lm.embed(np.concatenate([[Vocabulary.SOS], answer_ids]).astype(np.int64))
    parts = [p for p in (prefix, payload, postfix, z) if p.shape[0] > 0]
    logits = lm.forward(dm.concat(parts, axis=0))
    sos_pos = prefix.shape[0] + payload.shape[0] + postfix.shape[0]
    ce_targets = np.concatenate([answer_ids, [Vocabulary.EOS]]).astype(np.int64)
    return logits, sos_pos, ce_targets


class Wav2PromptSystem:
    """Encoder + integrate-and-fire + projection feeding the frozen LM."""

    name = "wav2prompt"

    def __init__(
        self,
        encoder_cfg: EncoderConfig,
        lm: FrozenLM,
        templates: dict[str, PromptTemplate],
        seed: int,
        tail_policy: str = "fire-if-half",
    ):
        self.encoder_cfg = encoder_cfg
        self.lm = lm
        self.templates = templates
        self.tail_policy = tail_policy
        self.params = ParamSet(seed=seed)
        register_encoder_params(self.params, encoder_cfg)
        d_llm = lm.config.d_model
        self.params.add("fc.w", (encoder_cfg.content_dim, d_llm))
        self.params.add("fc.b", (d_llm,), init="zeros")

    def _rep_from_encoded(self, encoded: Tensor, mode: str, target_len: int | None):
        raw = firing_weights(encoded)
        w = scale_weights(raw, target_len) if mode == "scaled" else raw
        content = encoded[:, 0 : self.encoder_cfg.content_dim]
        events, pooled = integrate_and_fire(content, w, tail_policy=self.tail_policy)
        rep = project(pooled, events, self.params["fc.w"], self.params["fc.b"])
        return rep, raw

    def representation(self, features: np.ndarray, mode: str, target_len: int | None = None):
        """(LabelRepSequence, raw FiringWeights) for one utterance."""
        e = encode(features, self.params, self.encoder_cfg)
        return self._rep_from_encoded(e, mode, target_len)

    def loss(self, record: TaskRecord, cfg: TrainConfig) -> tuple[Tensor, LossBreakdown]:
        if cfg.regime == "asr-train":
            return train_objective(self, record, cfg)
        return finetune_objective(self, record, cfg)

    def payload(self, record: TaskRecord) -> Tensor:
        """Inference-condition payload: raw weights, tail policy applied."""
        rep, _ = self.representation(record.features, "raw")
        return rep.matrix

    def batch_loss(self, records: list[TaskRecord], cfg: TrainConfig):
        """Mean objective over a batch: one padded encoder forward and one
        padded LM forward, numerically equal to the per-record objectives."""
        scaled = cfg.regime == "asr-train"
        enc, lengths = encode_batch([r.features for r in records], self.params, self.encoder_cfg)
        items, extras = [], []
        for i, r in enumerate(records):
            target_len = len(r.input_ids)
            rep, raw = self._rep_from_encoded(
                enc[i, : lengths[i]], "scaled" if scaled else "raw",
                target_len if scaled else None,
            )
            mse = mse_loss(rep.matrix, self.lm.embed(r.input_ids)) if scaled else None
            qua = quantity_loss(raw, target_len)
            items.append((rep.matrix, self.templates[r.template_id], r.target_ids))
            extras.append((mse, qua))
        ces = batched_prompt_ce(self.lm, items)
        total = None
        parts_list = []
        for ce, (mse, qua) in zip(ces, extras):
            if scaled:
                t = dm.add(ce, dm.add(dm.mul(mse, cfg.gamma), dm.mul(qua, cfg.mu)))
                parts = LossBreakdown(float(t.data), float(ce.data), float(mse.data), float(qua.data))
            else:
                t = dm.add(ce, dm.mul(qua, cfg.mu))
                parts = LossBreakdown(float(t.data), float(ce.data), 0.0, float(qua.data))
            total = t if total is None else dm.add(total, t)
            parts_list.append(parts)
        return dm.mul(total, 1.0 / len(records)), parts_list

    def validation_metric(self, records: list[TaskRecord]) -> float:
        return teacher_forced_accuracy(self, records)


def train_objective(
    system: Wav2PromptSystem, record: TaskRecord, cfg: TrainConfig
) -> tuple[Tensor, LossBreakdown]:
    """CE + gamma*MSE + mu*quantity on transcription data (scaled weights)."""
    if cfg.regime != "asr-train":
        raise TrainingError("train_objective requires the asr-train regime")
    target_len = len(record.input_ids)
    rep, raw = system.representation(record.features, "scaled", target_len)
    emb_targets = system.lm.embed(record.input_ids)
    mse = mse_loss(rep.matrix, emb_targets)
    template = system.templates[record.template_id]
    logits, sos, ce_targets = prompt_forward(system.lm, template, rep.matrix, record.target_ids)
    ce = ce_loss(logits, ce_targets, sos)
    qua = quantity_loss(raw, target_len)
    total = dm.add(ce, dm.add(dm.mul(mse, cfg.gamma), dm.mul(qua, cfg.mu)))
    parts = LossBreakdown(float(total.data), float(ce.data), float(mse.data), float(qua.data))
    return total, parts


def finetune_objective(
    system: Wav2PromptSystem, record: TaskRecord, cfg: TrainConfig
) -> tuple[Tensor, LossBreakdown]:
    """CE + mu*quantity with raw weights; the MSE term is dropped.

    The quantity target is the paired transcript length (identical to the
    input token length for these datasets).
    """
    if cfg.regime != "few-shot-finetune":
        raise TrainingError("finetune_objective requires the few-shot-finetune regime")
    rep, raw = system.representation(record.features, "raw")
    template = system.templates[record.template_id]
    logits, sos, ce_targets = prompt_forward(system.lm, template, rep.matrix, record.target_ids)
    ce = ce_loss(logits, ce_targets, sos)
    qua = quantity_loss(raw, len(record.input_ids))
    total = dm.add(ce, dm.mul(qua, cfg.mu))
    parts = LossBreakdown(float(total.data), float(ce.data), 0.0, float(qua.data))
    return total, parts


def batched_prompt_ce(
    lm: FrozenLM, items: list[tuple[Tensor, PromptTemplate, np.ndarray]]
) -> list[Tensor]:
    """One padded LM forward for many (payload, template, answer) triples.

    Numerically equivalent to per-record ``prompt_forward`` + ``ce_loss`` (the
    pad rows are masked out of attention and carry no CE slots); exists purely
    to amortise graph overhead across a batch.
    """
    d = lm.config.d_model
    concats, sos_list, targets_list = [], [], []
    for payload, template, answer_ids in items:
        prefix = lm.embed(np.asarray(template.prefix, dtype=np.int64))
        postfix = lm.embed(np.asarray(template.postfix, dtype=np.int64))
        z = lm.embed(np.concatenate([[Vocabulary.SOS], answer_ids]).astype(np.int64))
        parts = [p for p in (prefix, payload, postfix, z) if p.shape[0] > 0]
        concats.append(dm.concat(parts, axis=0) if len(parts) > 1 else parts[0])
        sos_list.append(prefix.shape[0] + payload.shape[0] + postfix.shape[0])
        targets_list.append(np.concatenate([answer_ids, [Vocabulary.EOS]]).astype(np.int64))

    n_max = max(c.shape[0] for c in concats)
    rows = []
    key_mask = np.zeros((len(items), n_max), dtype=bool)
    for i, c in enumerate(concats):
        n_i = c.shape[0]
        key_mask[i, :n_i] = True
        padded = c if n_i == n_max else dm.concat([c, dm.const(np.zeros((n_max - n_i, d)))])
        rows.append(dm.reshape(padded, (1, n_max, d)))
    x = rows[0] if len(rows) == 1 else dm.concat(rows, axis=0)
    ls = dm.log_softmax(lm.forward(x, key_mask=key_mask), axis=-1)

    losses = []
    for i, (sos, targets) in enumerate(zip(sos_list, targets_list)):
        m = len(targets)
        picked = ls[(np.full(m, i), np.arange(sos, sos + m), targets)]
        losses.append(dm.mul(dm.tsum(picked), -1.0 / m))
    return losses


def teacher_forced_accuracy(system, records: list[TaskRecord]) -> float:
    """Fraction of response tokens predicted correctly under teacher forcing."""
    hits, total = 0, 0
    with dm.no_grad():
        for r in records:
            payload = system.payload(r)
            template = system.templates[r.template_id]
            logits, sos, ce_targets = prompt_forward(system.lm, template, payload, r.target_ids)
            pred = logits.data[sos : sos + len(ce_targets)].argmax(axis=1)
            hits += int((pred == ce_targets).sum())
            total += len(ce_targets)
    return hits / max(total, 1)


@dataclass
class TrainResult:
    best_arrays: dict[str, np.ndarray]
    final_arrays: dict[str, np.ndarray]
    history: list[dict]
    best_metric: float
    best_epoch: int


def run_training(
    records: list[TaskRecord],
    system,
    cfg: TrainConfig,
    val_records: list[TaskRecord] | None = None,
    lm: FrozenLM | None = None,
    log=None,
) -> TrainResult:
    """Seeded epoch loop: batch gradient accumulation, norm clipping, Adam.

    Retains the best parameters by validation metric; verifies the frozen-LM
    checksum before and after. Zero epochs returns the initialisation.
    """
    lm = lm or getattr(system, "lm", None)
    if lm is not None:
        lm.verify()
    opt = Adam(system.params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    val_records = val_records or []

    best_arrays = system.params.get_arrays()
    best_metric = -np.inf
    best_epoch = -1
    history: list[dict] = []

    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(derive_seed(cfg.seed, f"shuffle/{epoch}"))
        order = rng.permutation(len(records))
        sums = np.zeros(4)  # total, ce, mse, qua
        n_batches = 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = [records[i] for i in order[lo : lo + cfg.batch_size]]
            acc = np.zeros(4)
            try:
                if hasattr(system, "batch_loss"):
                    total, parts_list = system.batch_loss(batch, cfg)
                    for parts in parts_list:
                        acc += [parts.total, parts.ce, parts.mse, parts.qua]
                else:
                    total = None
                    for rec in batch:
                        loss, parts = system.loss(rec, cfg)
                        total = loss if total is None else dm.add(total, loss)
                        acc += [parts.total, parts.ce, parts.mse, parts.qua]
                    total = dm.mul(total, 1.0 / len(batch))
            except dm.GraphError as e:
                raise TrainingError(f"non-finite loss at epoch {epoch}") from e
            grads = dm.backprop(total, system.params)
            dm.clip_grad_norm(grads, cfg.clip_norm)
            opt.step(grads)
            sums += acc / len(batch)
            n_batches += 1

        mean = sums / max(n_batches, 1)
        entry = {
            "epoch": epoch,
            "loss": LossBreakdown(*mean).to_dict(),
        }
        if val_records:
            metric = system.validation_metric(val_records)
            entry["val_metric"] = metric
            if metric > best_metric:
                best_metric = metric
                best_arrays = system.params.get_arrays()
                best_epoch = epoch
        history.append(entry)
        if log:
            log(entry)

    if not val_records or best_epoch < 0:
        best_arrays = system.params.get_arrays()
        best_metric = history[-1]["val_metric"] if (history and "val_metric" in history[-1]) else float("nan")
        best_epoch = cfg.epochs - 1

    if lm is not None:
        lm.verify()
    return TrainResult(
        best_arrays=best_arrays,
        final_arrays=system.params.get_arrays(),
        history=history,
        best_metric=float(best_metric),
        best_epoch=best_epoch,
    )
