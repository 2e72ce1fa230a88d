"""Sequence metrics: exact match, token accuracy, normalised edit distance."""

from __future__ import annotations

import numpy as np


def levenshtein(a, b) -> int:
    a, b = list(a), list(b)
    if not a:
        return len(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def normalized_edit_distance(pred, target) -> float:
    return levenshtein(pred, target) / max(len(list(target)), 1)


def token_accuracy(pred, target) -> float:
    """1 - token error rate, floored at zero (word-accuracy analog)."""
    return max(0.0, 1.0 - normalized_edit_distance(pred, target))


def exact_match(pred, target) -> bool:
    return list(pred) == list(target)


def aggregate(pairs: list[tuple[list[int], list[int]]]) -> dict:
    """Summary metrics over (prediction, target) token-id pairs, as percents."""
    if not pairs:
        raise ValueError("no records to evaluate")
    em = float(np.mean([exact_match(p, t) for p, t in pairs]))
    acc = float(np.mean([token_accuracy(p, t) for p, t in pairs]))
    ned = float(np.mean([normalized_edit_distance(p, t) for p, t in pairs]))
    return {
        "n": len(pairs),
        "exact_match_pct": 100.0 * em,
        "token_accuracy_pct": 100.0 * acc,
        "norm_edit_distance": ned,
    }
