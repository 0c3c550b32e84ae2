"""Significance tests for MOS ratings (Mann-Whitney U) and A/B preference counts (z-test)."""

import itertools
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

SIGNIFICANT = "•"
NOT_SIGNIFICANT = "□"
SELF = "-"


@dataclass(frozen=True)
class RatingSet:
    label: str
    scores: Tuple[int, ...]

    def __post_init__(self):
        scores = tuple(int(s) for s in self.scores)
        if not scores:
            raise ValueError(f"rating set {self.label!r} is empty")
        bad = [s for s in scores if not 1 <= s <= 5]
        if bad:
            raise ValueError(f"rating set {self.label!r} has scores outside 1..5: {bad[:5]}")
        object.__setattr__(self, "scores", scores)


@dataclass(frozen=True)
class ABOutcome:
    wins: int
    n: int

    def __post_init__(self):
        if self.n < 1 or not 0 <= self.wins <= self.n:
            raise ValueError(f"need 0 <= wins <= n and n >= 1, got {self.wins}/{self.n}")


@dataclass(frozen=True)
class MWUResult:
    U: float
    z: float
    p_two_sided: float
    # True when every observation is tied and the variance is zero
    degenerate: bool = False


@dataclass(frozen=True)
class ZTestResult:
    z: float
    p: float
    significant: bool


def _scores(x):
    return list(x.scores) if isinstance(x, RatingSet) else list(x)


def norm_sf(z):
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def midranks(values) -> List[float]:
    """1-based ranks; tied values share the mean of the ranks they span."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def u_statistic(x, y) -> float:
    """U for the first sample: its rank sum minus n1(n1+1)/2."""
    x, y = _scores(x), _scores(y)
    r = midranks(x + y)
    n1 = len(x)
    return sum(r[:n1]) - n1 * (n1 + 1) / 2.0


def mann_whitney_u(x, y) -> MWUResult:
    """Normal approximation with tie-corrected variance and a 0.5 continuity correction."""
    x, y = _scores(x), _scores(y)
    n1, n2 = len(x), len(y)
    if n1 == 0 or n2 == 0:
        raise ValueError("both samples must be non-empty")
    U = u_statistic(x, y)
    n = n1 + n2
    ties = sum(t**3 - t for t in Counter(x + y).values())
    var = n1 * n2 / 12.0 * ((n + 1) - ties / (n * (n - 1)))
    if var <= 0:
        return MWUResult(U, 0.0, 1.0, degenerate=True)
    dev = U - n1 * n2 / 2.0
    z = math.copysign(max(abs(dev) - 0.5, 0.0), dev) / math.sqrt(var)
    return MWUResult(U, z, min(1.0, 2.0 * norm_sf(abs(z))))


EXACT_LIMIT = 12


def exact_mwu_p(x, y) -> float:
    """Two-sided permutation p-value by enumerating every split of the pooled midranks.

    p = P(|U - n1 n2 / 2| >= |U_obs - n1 n2 / 2|) under random assignment.
    """
    x, y = _scores(x), _scores(y)
    n1, n2 = len(x), len(y)
    if n1 == 0 or n2 == 0:
        raise ValueError("both samples must be non-empty")
    if n1 + n2 > EXACT_LIMIT:
        raise ValueError(f"exact enumeration limited to n1 + n2 <= {EXACT_LIMIT}")
    ranks = midranks(x + y)
    mu = n1 * n2 / 2.0
    base = n1 * (n1 + 1) / 2.0
    observed = abs(sum(ranks[:n1]) - base - mu)
    hits = total = 0
    for combo in itertools.combinations(range(n1 + n2), n1):
        total += 1
        if abs(sum(ranks[i] for i in combo) - base - mu) >= observed - 1e-9:
            hits += 1
    return hits / total


def pairwise_z(outcome: ABOutcome, alpha=0.05, two_sided=False) -> ZTestResult:
    """z-test of a preference proportion against 0.5.

    The one-sided p is taken in whichever direction the proportion deviates.
    """
    phat = outcome.wins / outcome.n
    z = (phat - 0.5) / math.sqrt(0.25 / outcome.n)
    p = norm_sf(abs(z))
    if two_sided:
        p = min(1.0, 2.0 * p)
    return ZTestResult(z, p, p <= alpha)


@dataclass
class SignificanceMatrix:
    """Lower-triangular grid of pairwise outcomes; ``cells[(i, j)]`` for i > j."""

    labels: List[str]
    cells: Dict[Tuple[int, int], bool] = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("duplicate condition labels")
        for lab in self.labels:
            if "\t" in lab or "\n" in lab or not lab:
                raise ValueError(f"unusable label {lab!r}")

    def symbol(self, i, j):
        if i == j:
            return SELF
        if i < j:
            return ""
        return SIGNIFICANT if self.cells[(i, j)] else NOT_SIGNIFICANT

    def to_text(self) -> str:
        lines = ["\t".join([""] + self.labels)]
        for i, lab in enumerate(self.labels):
            lines.append("\t".join([lab] + [self.symbol(i, j) for j in range(len(self.labels))]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SignificanceMatrix":
        rows = [line.split("\t") for line in text.rstrip("\n").split("\n")]
        labels = rows[0][1:]
        if len(rows) != len(labels) + 1:
            raise ValueError("row count does not match header")
        cells = {}
        for i, row in enumerate(rows[1:]):
            if row[0] != labels[i] or len(row) != len(labels) + 1:
                raise ValueError(f"malformed row {i + 1}")
            for j, sym in enumerate(row[1:]):
                expected = {True: SELF, False: ""}[i == j] if i <= j else None
                if expected is not None:
                    if sym != expected:
                        raise ValueError(f"unexpected {sym!r} at ({i}, {j})")
                elif sym in (SIGNIFICANT, NOT_SIGNIFICANT):
                    cells[(i, j)] = sym == SIGNIFICANT
                else:
                    raise ValueError(f"unknown symbol {sym!r} at ({i}, {j})")
        return cls(labels, cells)

    def to_json(self):
        return {
            "labels": self.labels,
            "significant": [
                {"row": self.labels[i], "col": self.labels[j], "significant": v}
                for (i, j), v in sorted(self.cells.items())
            ],
        }


def significance_matrix(sets: Sequence[RatingSet], alpha=0.05) -> SignificanceMatrix:
    if len(sets) < 2:
        raise ValueError("need at least two conditions")
    labels = [s.label for s in sets]
    matrix = SignificanceMatrix(labels)
    for i in range(len(sets)):
        for j in range(i):
            matrix.cells[(i, j)] = mann_whitney_u(sets[i], sets[j]).p_two_sided <= alpha
    return matrix
