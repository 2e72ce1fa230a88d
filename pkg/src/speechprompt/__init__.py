"""Speech-prompt learning against a frozen toy language model.

A dependency-light numpy implementation of label-level speech prompts:
an encoder emits per-frame firing weights, a monotonic integrate-and-fire
pass pools frames into one vector per text token, and a linear projection
lands those vectors in the embedding space of a frozen decoder-only LM.
Includes a CTC cascade, stacked-frame encoder-prompt baselines, and a
synthetic pseudo-speech task suite for zero-shot/few-shot experiments.
"""

__version__ = "0.1.0"
