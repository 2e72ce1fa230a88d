"""A small frozen decoder-only LM: embeddings, causal blocks, beam decoding.

The embedding table doubles as the regression target for speech prompts, so
positional embeddings are added inside the forward pass, never inside
``embed``. Once pretrained the parameter set is frozen and checksummed; every
load and every downstream training run re-verifies the checksum.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .diffmath import Adam, ParamSet, Tensor
from .serialization import (
    IntegrityError,
    LM_FIXTURE_MAGIC,
    read_container,
    write_container,
)


class ContextOverflowError(ValueError):
    pass


# ---------------------------------------------------------------------------
# vocabulary and prompt templates


@dataclass(frozen=True)
class Vocabulary:
    """Bijective symbol/id mapping; special tokens occupy the leading ids."""

    symbols: tuple[str, ...]

    PAD = 0
    SOS = 1
    EOS = 2

    @property
    def size(self) -> int:
        return len(self.symbols)

    def id(self, symbol: str) -> int:
        try:
            return self.symbols.index(symbol)
        except ValueError:
            raise KeyError(f"unknown symbol {symbol!r}") from None

    def encode_text(self, text: str) -> np.ndarray:
        return np.array([self.id(ch) for ch in text], dtype=np.int64)

    def decode(self, ids, stop_at_eos: bool = True) -> str:
        out = []
        for i in ids:
            i = int(i)
            if stop_at_eos and i == self.EOS:
                break
            out.append(self.symbols[i])
        return "".join(out)


TASKS = ("transcribe", "reverse", "cipher", "intent")
LETTERS = "abcdefghijklmnopqrstuvwxyz"


def default_vocabulary() -> Vocabulary:
    symbols = (
        "[pad]",
        "[sos]",
        "[eos]",
        "<rep>",
        "<rev>",
        "<cip>",
        "<int>",
        "<l0>",
        "<l1>",
        "<l2>",
        "<l3>",
        " ",
        *LETTERS,
        "<r0>",
        "<r1>",
    )
    return Vocabulary(symbols=symbols)


@dataclass(frozen=True)
class PromptTemplate:
    """Task instruction rendered around the payload: prefix | payload | postfix."""

    template_id: str
    prefix: tuple[int, ...]
    postfix: tuple[int, ...]


def build_templates(vocab: Vocabulary) -> dict[str, PromptTemplate]:
    return {
        "transcribe": PromptTemplate("transcribe", (), (vocab.id("<rep>"),)),
        "reverse": PromptTemplate("reverse", (), (vocab.id("<rev>"),)),
        "cipher": PromptTemplate("cipher", (), (vocab.id("<cip>"),)),
        "intent": PromptTemplate("intent", (vocab.id("<int>"),), (vocab.id("<int>"),)),
    }


def render_text_line(
    template: PromptTemplate, payload: np.ndarray, answer: np.ndarray
) -> tuple[np.ndarray, int]:
    """Full token line prefix|payload|postfix|[sos]|answer|[eos]; returns
    (tokens, position of [sos])."""
    sos_pos = len(template.prefix) + len(payload) + len(template.postfix)
    tokens = np.concatenate(
        [
            np.asarray(template.prefix, dtype=np.int64),
            payload.astype(np.int64),
            np.asarray(template.postfix, dtype=np.int64),
            np.array([Vocabulary.SOS], dtype=np.int64),
            answer.astype(np.int64),
            np.array([Vocabulary.EOS], dtype=np.int64),
        ]
    )
    return tokens, sos_pos


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class LMConfig:
    vocab_size: int = 40
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 128
    context: int = 128

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "context": self.context,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LMConfig":
        return cls(**{k: int(v) for k, v in d.items()})


def register_lm_params(ps: ParamSet, cfg: LMConfig, trainable: bool = True, prefix: str = "lm"):
    d, v = cfg.d_model, cfg.vocab_size
    ps.add(f"{prefix}.embed", (v, d), fan_in=d, trainable=trainable)
    ps.add(f"{prefix}.pos", (cfg.context, d), fan_in=d, trainable=trainable)
    for i in range(cfg.n_layers):
        p = f"{prefix}.h{i}"
        for nm in ("ln1", "ln2"):
            ps.add(f"{p}.{nm}.g", (d,), init=np.ones(d), trainable=trainable)
            ps.add(f"{p}.{nm}.b", (d,), init="zeros", trainable=trainable)
        for nm in ("wq", "wk", "wv", "wo"):
            ps.add(f"{p}.attn.{nm}", (d, d), trainable=trainable)
        ps.add(f"{p}.mlp.w1", (d, cfg.d_ff), trainable=trainable)
        ps.add(f"{p}.mlp.b1", (cfg.d_ff,), init="zeros", trainable=trainable)
        ps.add(f"{p}.mlp.w2", (cfg.d_ff, d), trainable=trainable)
        ps.add(f"{p}.mlp.b2", (d,), init="zeros", trainable=trainable)
    ps.add(f"{prefix}.lnf.g", (d,), init=np.ones(d), trainable=trainable)
    ps.add(f"{prefix}.lnf.b", (d,), init="zeros", trainable=trainable)
    ps.add(f"{prefix}.head.w", (d, v), trainable=trainable)
    ps.add(f"{prefix}.head.b", (v,), init="zeros", trainable=trainable)


def lm_param_names(cfg: LMConfig, prefix: str = "lm") -> list[str]:
    ps = ParamSet(seed=0)
    register_lm_params(ps, cfg, trainable=False, prefix=prefix)
    return ps.names()


def _layer_norm(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    mu = dm.tmean(x, axis=-1, keepdims=True)
    xc = dm.sub(x, mu)
    var = dm.tmean(dm.mul(xc, xc), axis=-1, keepdims=True)
    inv = dm.exp(dm.mul(dm.log(dm.add(var, dm.const(1e-5))), -0.5))
    return dm.add(dm.mul(dm.mul(xc, inv), g), b)


@dataclass
class DecodeConfig:
    beam: int = 5
    rep_penalty: float = 1.5
    max_len: int = 16
    eos_id: int = Vocabulary.EOS


class FrozenLM:
    """Decoder-only LM over a frozen ParamSet; safe for concurrent reads."""

    def __init__(self, config: LMConfig, params: ParamSet, checksum: str | None = None):
        self.config = config
        self.params = params
        names = lm_param_names(config)
        if params.names() != names:
            raise IntegrityError("LM parameter names do not match the config")
        self.checksum = checksum or params.checksum()

    @classmethod
    def from_arrays(cls, config: LMConfig, arrays: dict[str, np.ndarray]) -> "FrozenLM":
        ps = ParamSet(seed=0)
        for name in lm_param_names(config):
            ps.add(name, arrays[name].shape, init=arrays[name], trainable=False)
        return cls(config, ps)

    def verify(self):
        if self.params.checksum() != self.checksum:
            raise IntegrityError("frozen LM checksum changed")

    # -- embedding ---------------------------------------------------------

    def embed(self, tokens: np.ndarray) -> Tensor:
        """Pure table rows; no positional information added here."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise ValueError("unknown token id")
        return self.params["lm.embed"][tokens]

    # -- forward -----------------------------------------------------------

    def forward(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        """Causal forward over embedded rows; one vocab-sized logit row per position."""
        squeeze = x.ndim == 2
        if squeeze:
            x = dm.reshape(x, (1,) + tuple(x.shape))
        B, n, d = x.shape
        cfg = self.config
        if n > cfg.context:
            raise ContextOverflowError(f"sequence length {n} exceeds context {cfg.context}")
        if n == 0:
            raise ValueError("empty input sequence")

        p = self.params
        x = dm.add(x, p["lm.pos"][:n])
        causal = np.triu(np.full((n, n), -1e30), k=1)
        bias = causal
        if key_mask is not None:
            bias = causal + np.where(key_mask[:, None, None, :], 0.0, -1e30)
        bias_t = dm.const(bias)

        H = cfg.n_heads
        dh = d // H
        scale = 1.0 / np.sqrt(dh)
        for i in range(cfg.n_layers):
            pre = f"lm.h{i}"
            h = _layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])

            def heads(t):
                return dm.swapaxes(dm.reshape(t, (B, n, H, dh)), 1, 2)

            q = heads(dm.matmul(h, p[f"{pre}.attn.wq"]))
            k = heads(dm.matmul(h, p[f"{pre}.attn.wk"]))
            v = heads(dm.matmul(h, p[f"{pre}.attn.wv"]))
            scores = dm.add(dm.mul(dm.matmul(q, dm.swapaxes(k, -1, -2)), scale), bias_t)
            ctx = dm.matmul(dm.softmax(scores, axis=-1), v)
            ctx = dm.reshape(dm.swapaxes(ctx, 1, 2), (B, n, d))
            x = dm.add(x, dm.matmul(ctx, p[f"{pre}.attn.wo"]))

            h2 = _layer_norm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
            ff = dm.tanh(dm.add(dm.matmul(h2, p[f"{pre}.mlp.w1"]), p[f"{pre}.mlp.b1"]))
            x = dm.add(x, dm.add(dm.matmul(ff, p[f"{pre}.mlp.w2"]), p[f"{pre}.mlp.b2"]))

        x = _layer_norm(x, p["lm.lnf.g"], p["lm.lnf.b"])
        logits = dm.add(dm.matmul(x, p["lm.head.w"]), p["lm.head.b"])
        if squeeze:
            logits = dm.reshape(logits, (n, cfg.vocab_size))
        return logits

    @staticmethod
    def next_token_dist(logits_row: Tensor) -> Tensor:
        return dm.softmax(logits_row, axis=-1)

    # -- decoding ----------------------------------------------------------

    def generate(self, prompt: Tensor | np.ndarray, cfg: DecodeConfig | None = None) -> list[int]:
        data = prompt.data if isinstance(prompt, Tensor) else np.asarray(prompt, dtype=np.float64)
        if data.shape[0] == 0:
            raise ValueError("empty prompt")
        return self.generate_batch([data], cfg)[0]

    def generate_batch(
        self, prompts: list[np.ndarray], cfg: DecodeConfig | None = None
    ) -> list[list[int]]:
        """Beam search with length-normalised scores and repetition penalty.

        The penalty follows the divide-if-positive / multiply-if-negative rule
        on raw logits for tokens already generated in the hypothesis. Ties
        break deterministically by token id, then beam index.
        """
        cfg = cfg or DecodeConfig()
        if not prompts:
            return []
        for pr in prompts:
            if pr.shape[0] == 0:
                raise ValueError("empty prompt")
        R, K = len(prompts), cfg.beam
        d = self.config.d_model
        plens = [p.shape[0] for p in prompts]
        n_max = max(plens) + cfg.max_len
        if n_max > self.config.context:
            raise ContextOverflowError(f"decode buffer {n_max} exceeds context")

        buf = np.zeros((R * K, n_max, d))
        valid = np.zeros((R * K, n_max), dtype=bool)
        lengths = np.zeros(R * K, dtype=np.int64)
        for r, p in enumerate(prompts):
            for b in range(K):
                row = r * K + b
                buf[row, : plens[r]] = p
                valid[row, : plens[r]] = True
                lengths[row] = plens[r]

        table = self.params["lm.embed"].data
        beams = [[{"tokens": [], "score": 0.0, "alive": b == 0} for b in range(K)] for _ in range(R)]
        finished: list[list[tuple[float, tuple[int, ...]]]] = [[] for _ in range(R)]
        done = [False] * R

        for _ in range(cfg.max_len):
            if all(done):
                break
            n_cur = int(lengths.max())
            with dm.no_grad():
                logits = self.forward(dm.const(buf[:, :n_cur]), key_mask=valid[:, :n_cur]).data

            new_rows: list[tuple[int, int, int]] = []  # (dest_row, src_row, token)
            for r in range(R):
                if done[r]:
                    continue
                cands = []
                for b, beam in enumerate(beams[r]):
                    if not beam["alive"]:
                        continue
                    row = r * K + b
                    lrow = logits[row, lengths[row] - 1].copy()
                    for tok in set(beam["tokens"]):
                        lrow[tok] = lrow[tok] / cfg.rep_penalty if lrow[tok] > 0 else lrow[tok] * cfg.rep_penalty
                    m = lrow.max()
                    logp = lrow - (m + np.log(np.exp(lrow - m).sum()))
                    new_len = len(beam["tokens"]) + 1
                    for tok in range(self.config.vocab_size):
                        score = beam["score"] + logp[tok]
                        cands.append((-(score / new_len), tok, b, score))
                cands.sort()

                chosen = []
                for neg_norm, tok, b, score in cands:
                    if tok == cfg.eos_id:
                        # every explored prefix may terminate here; record all
                        finished[r].append((-neg_norm, tuple(beams[r][b]["tokens"])))
                    elif len(chosen) < K:
                        chosen.append((b, tok, score))
                if not chosen:
                    done[r] = True
                    for beam in beams[r]:
                        beam["alive"] = False
                    continue

                next_beams = []
                for slot, (b, tok, score) in enumerate(chosen):
                    src = r * K + b
                    dest = r * K + slot
                    new_rows.append((dest, src, tok))
                    next_beams.append(
                        {"tokens": beams[r][b]["tokens"] + [tok], "score": score, "alive": True}
                    )
                while len(next_beams) < K:
                    next_beams.append({"tokens": [], "score": -np.inf, "alive": False})
                beams[r] = next_beams

            if new_rows:
                snap_buf = buf.copy()
                snap_valid = valid.copy()
                snap_len = lengths.copy()
                for dest, src, tok in new_rows:
                    L = snap_len[src]
                    buf[dest, :L] = snap_buf[src, :L]
                    valid[dest, :L] = snap_valid[src, :L]
                    buf[dest, L] = table[tok]
                    valid[dest, L] = True
                    buf[dest, L + 1 :] = 0.0
                    valid[dest, L + 1 :] = False
                    lengths[dest] = L + 1

        results = []
        for r in range(R):
            pool = list(finished[r])
            if not pool:
                live = [
                    (b["score"] / max(len(b["tokens"]), 1), tuple(b["tokens"]))
                    for b in beams[r]
                    if b["alive"] and b["tokens"]
                ]
                pool = live or [(0.0, ())]
            pool.sort(key=lambda x: (-x[0], x[1]))
            results.append(list(pool[0][1]))
        return results


# ---------------------------------------------------------------------------
# pretraining


@dataclass
class LmPretrainConfig:
    lr: float = 2e-3
    lr_floor_frac: float = 0.1  # cosine-decay target as a fraction of lr
    batch_size: int = 64
    max_epochs: int = 60
    ppl_stop: float = 1.01  # stop training once held-out perplexity reaches this
    ppl_threshold: float = 1.35  # fixture is unusable above this
    seed: int = 0


def _batch_ce(ps: ParamSet, lm_forward, lines, pad_id: int):
    """Mean response-token NLL over a batch of (tokens, sos_pos) lines."""
    nmax = max(len(t) for t, _ in lines)
    B = len(lines)
    toks = np.full((B, nmax), pad_id, dtype=np.int64)
    key_mask = np.zeros((B, nmax), dtype=bool)
    rows, cols, targs = [], [], []
    for i, (t, sos) in enumerate(lines):
        toks[i, : len(t)] = t
        key_mask[i, : len(t)] = True
        for p in range(sos, len(t) - 1):
            rows.append(i)
            cols.append(p)
            targs.append(t[p + 1])
    emb = ps["lm.embed"][toks]
    logits = lm_forward(emb, key_mask)
    ls = dm.log_softmax(logits, axis=-1)
    picked = ls[(np.array(rows), np.array(cols), np.array(targs))]
    return dm.mul(dm.tsum(picked), -1.0 / len(rows)), len(rows)


def heldout_perplexity(lm: FrozenLM, lines) -> float:
    """exp(mean response-token NLL) on held-out lines."""
    total_nll, total_n = 0.0, 0
    with dm.no_grad():
        for i in range(0, len(lines), 128):
            chunk = lines[i : i + 128]
            ce, n = _batch_ce(lm.params, lm.forward, chunk, Vocabulary.PAD)
            total_nll += float(ce.data) * n
            total_n += n
    return float(np.exp(total_nll / max(total_n, 1)))


def pretrain_fixture(
    train_lines: list[tuple[np.ndarray, int]],
    heldout_lines: list[tuple[np.ndarray, int]],
    lm_config: LMConfig,
    cfg: LmPretrainConfig,
) -> tuple[FrozenLM, dict]:
    """Train with next-token CE on response positions until the held-out
    perplexity target or the epoch budget is hit, then freeze and checksum."""
    ps = ParamSet(seed=cfg.seed)
    register_lm_params(ps, lm_config, trainable=True)
    opt = Adam(ps, lr=cfg.lr)

    # live view over the trainable params; frozen/checksummed only at the end
    lm_tmp = FrozenLM.__new__(FrozenLM)
    lm_tmp.config = lm_config
    lm_tmp.params = ps
    lm_tmp.checksum = ""

    history = []
    ppl = float("inf")
    epochs_run = 0
    order_rng = np.random.default_rng(cfg.seed + 1)
    for epoch in range(cfg.max_epochs):
        # cosine decay toward lr * lr_floor_frac across the epoch budget
        frac = epoch / max(cfg.max_epochs - 1, 1)
        floor = cfg.lr * cfg.lr_floor_frac
        opt.lr = floor + 0.5 * (cfg.lr - floor) * (1.0 + np.cos(np.pi * frac))
        order = order_rng.permutation(len(train_lines))
        chunks = [order[i : i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
        epoch_loss = 0.0
        n_batches = 0
        for chunk in chunks:
            lines = [train_lines[j] for j in chunk]
            ce, _ = _batch_ce(ps, lm_tmp.forward, lines, Vocabulary.PAD)
            grads = dm.backprop(ce, ps)
            dm.clip_grad_norm(grads, 5.0)
            opt.step(grads)
            epoch_loss += float(ce.data)
            n_batches += 1
        epochs_run = epoch + 1
        ppl = heldout_perplexity(lm_tmp, heldout_lines)
        history.append({"epoch": epoch, "train_ce": epoch_loss / max(n_batches, 1), "heldout_ppl": ppl})
        if ppl <= cfg.ppl_stop:
            break

    lm = FrozenLM.from_arrays(lm_config, ps.get_arrays())
    meta = {
        "heldout_ppl": ppl,
        "epochs_run": epochs_run,
        "seed": cfg.seed,
        "usable": bool(ppl <= cfg.ppl_threshold),
        "history": history,
        "param_checksum": lm.checksum,
    }
    return lm, meta


# ---------------------------------------------------------------------------
# fixture container


def probe_logits_digest(lm: FrozenLM) -> str:
    """SHA-256 of logits on a canonical probe input (bit-stability witness)."""
    probe = np.arange(min(8, lm.config.vocab_size), dtype=np.int64)
    with dm.no_grad():
        logits = lm.forward(lm.embed(probe))
    return hashlib.sha256(np.ascontiguousarray(logits.data).tobytes()).hexdigest()


def save_fixture(lm: FrozenLM, path):
    header = {
        "kind": "lm_fixture",
        "config": lm.config.to_dict(),
        "param_checksum": lm.checksum,
        "probe_digest": probe_logits_digest(lm),
    }
    write_container(path, LM_FIXTURE_MAGIC, header, lm.params.get_arrays())


def load_fixture(path) -> FrozenLM:
    header, arrays = read_container(path, LM_FIXTURE_MAGIC)
    lm = FrozenLM.from_arrays(LMConfig.from_dict(header["config"]), arrays)
    if lm.checksum != header["param_checksum"]:
        raise IntegrityError(f"{path}: parameter checksum mismatch")
    if probe_logits_digest(lm) != header["probe_digest"]:
        raise IntegrityError(f"{path}: probe logits mismatch")
    return lm
