import numpy as np
import pytest

from speechprompt import diffmath as dm
from speechprompt.baselines import (
    CascadeSystem,
    CtcSystem,
    EncoderLlmSystem,
    InfeasibleAlignmentError,
    build_generation_prompt,
    ctc_greedy_decode,
    ctc_loss,
    oracle_infer,
)
from speechprompt.diffmath import ParamSet, finite_diff_check
from speechprompt.encoder import EncoderConfig
from speechprompt.synthdata import WorldConfig, build_world
from speechprompt.toyllm import (
    DecodeConfig,
    FrozenLM,
    LMConfig,
    build_templates,
    default_vocabulary,
    register_lm_params,
)
from speechprompt.training import TrainConfig

from oracle_utils import oracle_ctc_nll

V = default_vocabulary()
TEMPLATES = build_templates(V)
TINY_ENC = EncoderConfig(d_in=4, hidden=5, content_dim=4, n_mixing=1)
TINY_WORLD = WorldConfig(
    n_lm_sentences=8, n_lm_heldout=4, n_asr_train=12, n_few_shot=4, n_test=6,
    d_in=4, duration_range=(4, 7),
)


def tiny_lm(d_model=8, seed=1):
    cfg = LMConfig(vocab_size=V.size, d_model=d_model, n_layers=1, n_heads=2,
                   d_ff=16, context=96)
    ps = ParamSet(seed=seed)
    register_lm_params(ps, cfg, trainable=False)
    return FrozenLM(cfg, ps)


@pytest.fixture(scope="module")
def world():
    return build_world(TINY_WORLD, 555, V, TEMPLATES)


def rand_log_probs(T, K, seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(T, K))
    return logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))


class TestCtcLoss:
    def test_single_frame_single_token(self):
        lp = rand_log_probs(1, 4, 0)
        got = ctc_loss(dm.const(lp), np.array([2])).item()
        assert abs(got - (-lp[0, 2])) < 1e-12

    def test_two_frames_one_token_closed_form(self):
        lp = rand_log_probs(2, 4, 1)
        blank = 3
        p = np.exp(lp)
        total = p[0, 1] * p[1, 1] + p[0, 1] * p[1, blank] + p[0, blank] * p[1, 1]
        got = ctc_loss(dm.const(lp), np.array([1])).item()
        assert abs(got - (-np.log(total))) < 1e-12

    @pytest.mark.parametrize("T,tlen,K", [(3, 1, 3), (4, 2, 4), (5, 3, 5), (6, 3, 6)])
    def test_matches_exhaustive_enumeration(self, T, tlen, K):
        rng = np.random.default_rng(T * 10 + tlen)
        for case in range(3):
            lp = rand_log_probs(T, K, seed=case + T * 100 + tlen * 7)
            target = rng.integers(0, K - 1, size=tlen)
            got = ctc_loss(dm.const(lp), target).item()
            expect = oracle_ctc_nll(lp, target.tolist(), blank=K - 1)
            assert abs(got - expect) < 1e-10

    def test_repeated_label_needs_gap_frame(self):
        lp = rand_log_probs(3, 3, 5)
        got = ctc_loss(dm.const(lp), np.array([1, 1])).item()
        expect = oracle_ctc_nll(lp, [1, 1], blank=2)
        assert abs(got - expect) < 1e-10

    def test_monotone_in_correct_token_mass(self):
        base = rand_log_probs(4, 4, 6)
        target = np.array([0, 1])
        prev = np.inf
        for boost in (0.0, 0.5, 1.0, 2.0):
            logits = base.copy()
            logits[1, 0] += boost
            lp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
            cur = ctc_loss(dm.const(lp), target).item()
            assert cur <= prev + 1e-12
            prev = cur

    def test_infeasible_when_fewer_frames_than_targets(self):
        lp = rand_log_probs(2, 4, 7)
        with pytest.raises(InfeasibleAlignmentError):
            ctc_loss(dm.const(lp), np.array([0, 1, 2]))

    def test_gradient_matches_finite_differences(self):
        ps = ParamSet(seed=0)
        rng = np.random.default_rng(8)
        logits = ps.add("logits", (5, 4), init=rng.normal(size=(5, 4)))
        target = np.array([1, 0])

        def forward():
            lp = dm.log_softmax(logits, axis=-1)
            return ctc_loss(lp, target)

        report = finite_diff_check(forward, ps, step=1e-6)
        assert report.max_rel_err < 1e-4, report.format()


class TestGreedyDecode:
    def test_collapse_and_blank_removal(self):
        # frames argmax: a a - b  ->  "ab"
        lp = np.full((4, 3), -10.0)
        for t, s in enumerate([0, 0, 2, 1]):
            lp[t, s] = 0.0
        assert ctc_greedy_decode(lp, blank=2).tolist() == [0, 1]

    def test_all_blank_empty(self):
        lp = np.zeros((3, 3))
        lp[:, 2] = 5.0
        assert ctc_greedy_decode(lp, blank=2).tolist() == []

    def test_matches_collapse_oracle(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            lp = rng.normal(size=(10, 5))
            got = ctc_greedy_decode(lp, blank=4).tolist()
            best = lp.argmax(axis=1)
            expect, prev = [], None
            for s in best:
                if s != prev and s != 4:
                    expect.append(int(s))
                prev = s
            assert got == expect


class TestCtcSystem:
    def test_loss_and_validation(self, world):
        sys = CtcSystem(TINY_ENC, V.size, seed=2)
        rec = world.datasets["transcribe"].splits["asr-train"][0]
        loss, parts = sys.loss(rec, TrainConfig())
        assert np.isfinite(loss.data)
        assert parts.mse == 0.0 and parts.qua == 0.0
        metric = sys.validation_metric(world.datasets["transcribe"].splits["test"][:3])
        assert 0.0 <= metric <= 1.0


class StubCtc(CtcSystem):
    def __init__(self, base: CtcSystem, transcript):
        self.__dict__.update(base.__dict__)
        self._transcript = np.asarray(transcript, dtype=np.int64)

    def transcribe(self, features):
        return self._transcript


class TestCascadeAndOracle:
    def test_perfect_transcript_equals_oracle(self, world):
        lm = tiny_lm()
        rec = world.datasets["transcribe"].splits["test"][0]
        ctc = StubCtc(CtcSystem(TINY_ENC, V.size, seed=3), rec.input_ids)
        cascade = CascadeSystem(ctc=ctc, lm=lm, templates=world.templates)
        decode = DecodeConfig(beam=2, max_len=6)
        assert cascade.infer(rec.features, "transcribe", decode) == oracle_infer(
            lm, world.templates["transcribe"], rec.input_ids, decode
        )

    def test_empty_transcript_generates_from_template(self, world):
        lm = tiny_lm()
        rec = world.datasets["transcribe"].splits["test"][1]
        ctc = StubCtc(CtcSystem(TINY_ENC, V.size, seed=3), np.array([], dtype=np.int64))
        cascade = CascadeSystem(ctc=ctc, lm=lm, templates=world.templates)
        decode = DecodeConfig(beam=1, max_len=4)
        got = cascade.infer(rec.features, "reverse", decode)
        prompt = build_generation_prompt(lm, world.templates["reverse"], np.zeros((0, 8)))
        assert got == lm.generate(prompt, decode)

    def test_cascade_inference_produces_no_gradients(self, world):
        lm = tiny_lm()
        ctc = CtcSystem(TINY_ENC, V.size, seed=4)
        cascade = CascadeSystem(ctc=ctc, lm=lm, templates=world.templates)
        rec = world.datasets["transcribe"].splits["test"][0]
        ctc.params.zero_grad()
        cascade.infer(rec.features, "transcribe", DecodeConfig(beam=1, max_len=3))
        assert all(p.tensor.grad is None for p in ctc.params.items())
        assert all(p.tensor.grad is None for p in lm.params.items())

    def test_oracle_empty_text(self, world):
        lm = tiny_lm()
        decode = DecodeConfig(beam=1, max_len=3)
        out = oracle_infer(lm, world.templates["reverse"], np.array([], dtype=np.int64), decode)
        assert isinstance(out, list)


class TestEncoderLlm:
    def test_payload_stack_arithmetic(self, world):
        lm = tiny_lm()
        sys = EncoderLlmSystem(TINY_ENC, lm, world.templates, seed=5)
        feats = np.zeros((64, 4))  # T0=64 -> T=16 -> 2 stacked rows
        rec = world.datasets["transcribe"].splits["test"][0]
        payload = sys.payload(type(rec)(
            record_id="x", task="transcribe", sentence=rec.sentence,
            input_ids=rec.input_ids, target_ids=rec.target_ids,
            template_id="transcribe", features=feats,
        ))
        assert payload.shape == (2, 8)

    def test_ce_gradient_check(self, world):
        lm = tiny_lm()
        sys = EncoderLlmSystem(TINY_ENC, lm, world.templates, seed=6, stack_k=4)
        rec = world.datasets["transcribe"].splits["asr-train"][1]
        cfg = TrainConfig()
        report = finite_diff_check(
            lambda: sys.loss(rec, cfg)[0], sys.params, step=1e-4, order=4, max_scalars=200
        )
        assert report.max_rel_err < 1e-4, report.format()
        assert not any(n.startswith("lm.") for n in report.entries)

    def test_init_encoder_from_ctc(self, world):
        ctc = CtcSystem(TINY_ENC, V.size, seed=7)
        sys = EncoderLlmSystem(TINY_ENC, tiny_lm(), world.templates, seed=8)
        sys.init_encoder_from(ctc.params.get_arrays())
        for name in ctc.params.names():
            if name.startswith("encoder."):
                assert np.array_equal(sys.params[name].data, ctc.params[name].data)
        # projection stays its own initialisation
        assert sys.params["fc.w"].shape == (8 * TINY_ENC.d_out, 8)
