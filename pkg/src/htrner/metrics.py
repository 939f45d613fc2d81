"""Character error rate and entity-level basic/complete scores.

An entity word earns credit only when its tags match the ground truth
(category for *basic*, category and person for *complete*); the credit is
then ``100 * (1 - CER)`` of its transcription, floored at zero. Predicted and
ground-truth entities are paired by an order-preserving alignment that
maximises total credit.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .records import Record
from .vocab import Diagnostics, parse_entities

Entity = tuple[str, str, str]


def levenshtein(a: Sequence, b: Sequence) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def cer(hyp: str, ref: str) -> float:
    if not ref:
        raise ValueError("CER is undefined for an empty reference")
    return levenshtein(hyp, ref) / len(ref)


def word_credit(pred: Entity, gt: Entity, require_person: bool = False) -> float:
    if pred[1] != gt[1] or (require_person and pred[2] != gt[2]):
        return 0.0
    n = len(gt[0])
    return 100.0 * max(0, n - levenshtein(pred[0], gt[0])) / n


@dataclass
class Matching:
    pairs: list[tuple[int, int]]
    credits: list[float]

    @property
    def total(self) -> float:
        return sum(self.credits)


def align_entities(pred: Sequence[Entity], gt: Sequence[Entity], require_person: bool = False) -> Matching:
    """Order-preserving one-to-one matching maximising summed word credit."""
    n, m = len(pred), len(gt)
    credit = [[word_credit(p, g, require_person) for g in gt] for p in pred]
    best = [[0.0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            best[i][j] = max(best[i - 1][j], best[i][j - 1], best[i - 1][j - 1] + credit[i - 1][j - 1])
    pairs, credits = [], []
    i, j = n, m
    while i and j:
        c = credit[i - 1][j - 1]
        if c > 0 and best[i][j] == best[i - 1][j - 1] + c:
            pairs.append((i - 1, j - 1))
            credits.append(c)
            i, j = i - 1, j - 1
        elif best[i][j] == best[i - 1][j]:
            i -= 1
        else:
            j -= 1
    return Matching(pairs[::-1], credits[::-1])


def align_entities_bruteforce(pred: Sequence[Entity], gt: Sequence[Entity], require_person: bool = False) -> float:
    """Best total credit over every order-preserving matching (exponential)."""
    best = 0.0
    for k in range(min(len(pred), len(gt)) + 1):
        for ps in itertools.combinations(range(len(pred)), k):
            for gs in itertools.combinations(range(len(gt)), k):
                total = sum(word_credit(pred[a], gt[b], require_person) for a, b in zip(ps, gs))
                best = max(best, total)
    return best


def _score(pred: Record, gt: Record, require_person: bool) -> float | None:
    gt_ents = parse_entities(gt)
    if not gt_ents:
        return None
    return align_entities(parse_entities(pred), gt_ents, require_person).total / len(gt_ents)


def basic_score(pred: Record, gt: Record) -> float | None:
    """Mean credit over ground-truth entities gated on category; None if gt has none."""
    return _score(pred, gt, False)


def complete_score(pred: Record, gt: Record) -> float | None:
    return _score(pred, gt, True)


@dataclass
class ScoreReport:
    records: list[dict] = field(default_factory=list)
    mean_basic: float = 0.0
    mean_complete: float = 0.0
    corpus_cer: float = 0.0
    n_scored: int = 0
    n_excluded: int = 0
    diagnostics: dict[str, int] = field(default_factory=dict)
    exact_matches: int = 0

    def to_dict(self) -> dict:
        return {
            "aggregate": {
                "mean_basic": self.mean_basic,
                "mean_complete": self.mean_complete,
                "corpus_cer": self.corpus_cer,
                "n_scored": self.n_scored,
                "n_excluded": self.n_excluded,
                "exact_matches": self.exact_matches,
                "diagnostics": self.diagnostics,
            },
            "records": self.records,
        }


def score_records(
    items: Iterable[tuple[Record, Record, Diagnostics | None]],
) -> ScoreReport:
    """Score ``(prediction, ground truth, decode diagnostics)`` triples."""
    report = ScoreReport()
    basics, completes = [], []
    edits = ref_len = 0
    diag_totals: dict[str, int] = {}
    for pred, gt, diag in items:
        b, c = basic_score(pred, gt), complete_score(pred, gt)
        hyp_text, ref_text = pred.text(), gt.text()
        d = levenshtein(hyp_text, ref_text)
        edits += d
        ref_len += len(ref_text)
        row = {
            "id": gt.id,
            "basic": b,
            "complete": c,
            "cer": d / len(ref_text) if ref_text else 0.0,
            "exact": pred.lines == gt.lines,
        }
        if diag is not None:
            row["diagnostics"] = diag.as_dict()
            for k, v in diag.as_dict().items():
                diag_totals[k] = diag_totals.get(k, 0) + int(v)
        if b is None:
            row["excluded"] = "no ground-truth entities"
            report.n_excluded += 1
        else:
            basics.append(b)
            completes.append(c)
        report.exact_matches += row["exact"]
        report.records.append(row)
    report.n_scored = len(basics)
    # fsum keeps aggregates independent of record order
    report.mean_basic = math.fsum(basics) / len(basics) if basics else 0.0
    report.mean_complete = math.fsum(completes) / len(completes) if completes else 0.0
    report.corpus_cer = edits / ref_len if ref_len else 0.0
    report.diagnostics = diag_totals
    return report
