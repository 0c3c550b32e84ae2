"""Word error rate over token sequences (caller tokenizes)."""

from typing import Sequence


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit substitution/insertion/deletion costs."""
    ref, hyp = list(ref), list(hyp)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(reference: Sequence, hypothesis: Sequence) -> float:
    """(S + D + I) / len(reference). May exceed 1."""
    if len(reference) == 0:
        raise ValueError("reference must be non-empty")
    return edit_distance(reference, hypothesis) / len(reference)


def corpus_wer(references, hypotheses) -> float:
    """Total edits over total reference tokens."""
    if len(references) != len(hypotheses):
        raise ValueError("reference/hypothesis count mismatch")
    n = sum(len(r) for r in references)
    if n == 0:
        raise ValueError("references must be non-empty")
    return sum(edit_distance(r, h) for r, h in zip(references, hypotheses)) / n
