"""Automatic evaluation: BLEU, CIDEr, Distinct-n, avgLen and Welch t-tests."""

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from nltk.translate.bleu_score import SmoothingFunction, corpus_bleu, sentence_bleu
from nltk.util import ngrams
from scipy.special import betainc

logger = logging.getLogger(__name__)

COLUMNS = ('BLEU-1', 'BLEU-2', 'BLEU-3', 'CIDEr', 'Dist-1', 'Dist-2', 'avgLen')
CIDER_MAX_N = 4
CIDER_SCALE = 10.0

_smoothing = SmoothingFunction()


def words(text: str) -> List[str]:
    """Metric tokenization: lowercase whitespace split."""
    return text.lower().split()


def _weights(n: int) -> Tuple[float, ...]:
    if n < 1:
        raise ValueError("n-gram order must be at least 1")
    return tuple(1.0 / n for _ in range(n))


def _check_aligned(hypotheses: Sequence, references: Sequence) -> None:
    if len(hypotheses) != len(references):
        raise ValueError(f"misaligned corpora: {len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("cannot evaluate an empty corpus")


def bleu_n(hypotheses: Sequence[str], references: Sequence[str], n: int) -> float:
    """
    Corpus BLEU over orders 1..n with uniform weights, scaled to [0, 100].

    Args:
        hypotheses: Generated responses
        references: One reference per hypothesis
        n: Highest n-gram order

    Returns:
        BLEU x 100
    """
    _check_aligned(hypotheses, references)
    score = corpus_bleu([[words(r)] for r in references], [words(h) for h in hypotheses], weights=_weights(n))
    return 100.0 * float(score)


def sentence_bleu_scores(hypotheses: Sequence[str], references: Sequence[str], n: int) -> List[float]:
    """Per-sample BLEU x 100 with add-one smoothing on orders >= 2."""
    _check_aligned(hypotheses, references)
    return [
        100.0 * float(sentence_bleu([words(r)], words(h), weights=_weights(n), smoothing_function=_smoothing.method2))
        if words(h) else 0.0
        for h, r in zip(hypotheses, references)
    ]


def distinct_n(hypotheses: Sequence[str], n: int) -> float:
    """
    Unique n-grams over total n-grams across every hypothesis.

    Returns 0 (with a warning) when no hypothesis has n tokens.
    """
    if not hypotheses:
        raise ValueError("cannot compute Distinct-n of an empty corpus")
    grams = [g for h in hypotheses for g in ngrams(words(h), n)]
    if not grams:
        logger.warning(f"Distinct-{n}: every hypothesis is shorter than {n} tokens")
        return 0.0
    return len(set(grams)) / len(grams)


def _sample_distinct(hypothesis: str, n: int) -> float:
    grams = list(ngrams(words(hypothesis), n))
    return len(set(grams)) / len(grams) if grams else 0.0


def _cider_vectors(sentence: List[str], idf: Dict[Tuple[str, ...], float]) -> List[Dict[Tuple[str, ...], float]]:
    vectors = []
    for n in range(1, CIDER_MAX_N + 1):
        counts = Counter(ngrams(sentence, n))
        vectors.append({gram: tf * idf.get(gram, idf[()]) for gram, tf in counts.items()})
    return vectors


def _cider_similarity(hyp: Dict, ref: Dict) -> float:
    hyp_norm = math.sqrt(sum(v * v for v in hyp.values()))
    ref_norm = math.sqrt(sum(v * v for v in ref.values()))
    if hyp_norm == 0 or ref_norm == 0:
        return 0.0
    overlap = sum(min(value, ref[gram]) * ref[gram] for gram, value in hyp.items() if gram in ref)
    return overlap / (hyp_norm * ref_norm)


def cider_scores(hypotheses: Sequence[str], references: Sequence[str]) -> List[float]:
    """
    Per-sample CIDEr (n = 1..4, x 10, no length penalty).

    Term frequencies are weighted by ln(N / df) with document frequencies
    counted over the references (floored at 1 for unseen n-grams).
    """
    _check_aligned(hypotheses, references)
    refs = [words(r) for r in references]
    df: Counter = Counter()
    for ref in refs:
        df.update({gram for n in range(1, CIDER_MAX_N + 1) for gram in ngrams(ref, n)})
    total = len(refs)
    idf = {gram: math.log(total / count) for gram, count in df.items()}
    idf[()] = math.log(total)

    scores = []
    for hyp, ref in zip(hypotheses, refs):
        hyp_vectors = _cider_vectors(words(hyp), idf)
        ref_vectors = _cider_vectors(ref, idf)
        similarity = np.mean([_cider_similarity(h, r) for h, r in zip(hyp_vectors, ref_vectors)])
        scores.append(CIDER_SCALE * float(similarity))
    return scores


def cider(hypotheses: Sequence[str], references: Sequence[str]) -> float:
    return float(np.mean(cider_scores(hypotheses, references)))


def avg_len(hypotheses: Sequence[str]) -> float:
    if not hypotheses:
        raise ValueError("cannot average the length of an empty corpus")
    return float(np.mean([len(words(h)) for h in hypotheses]))


def copy_rate(hypotheses: Sequence[str], last_turns: Sequence[str]) -> float:
    """Fraction of responses that repeat the last history turn verbatim."""
    _check_aligned(hypotheses, last_turns)
    return sum(words(h) == words(s) for h, s in zip(hypotheses, last_turns)) / len(hypotheses)


def token_accuracy(hypotheses: Sequence[str], references: Sequence[str]) -> float:
    """Position-aligned token matches over total reference tokens."""
    _check_aligned(hypotheses, references)
    correct = total = 0
    for h, r in zip(hypotheses, references):
        hyp, ref = words(h), words(r)
        correct += sum(a == b for a, b in zip(hyp, ref))
        total += len(ref)
    return correct / total if total else 0.0


def t_test(sample_a: Sequence[float], sample_b: Sequence[float]) -> Tuple[float, float]:
    """
    Welch's two-sample t-test.

    Args:
        sample_a: Per-example scores of system A
        sample_b: Per-example scores of system B

    Returns:
        Tuple of (t statistic, two-sided p-value)

    Raises:
        ValueError: If either sample has fewer than two values
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("t-test needs at least two values per sample")
    mean_diff = a.mean() - b.mean()
    var_a, var_b = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    standard_error2 = var_a + var_b
    if standard_error2 == 0:
        if mean_diff == 0:
            return 0.0, 1.0
        logger.warning("t-test on zero-variance samples with different means")
        return math.copysign(math.inf, mean_diff), 0.0
    t = mean_diff / math.sqrt(standard_error2)
    dof = standard_error2 ** 2 / (var_a ** 2 / (len(a) - 1) + var_b ** 2 / (len(b) - 1))
    p = float(betainc(dof / 2.0, 0.5, dof / (dof + t * t)))
    return float(t), min(1.0, p)


def stars(p: float) -> str:
    if p < 0.01:
        return '**'
    if p < 0.05:
        return '*'
    return ''


@dataclass
class MetricsReport:
    """Corpus scores plus the per-sample vectors behind each column."""

    bleu1: float
    bleu2: float
    bleu3: float
    cider: float
    distinct1: float
    distinct2: float
    avg_len: float
    count: int
    per_sample: Dict[str, List[float]] = field(default_factory=dict)
    copy_rate: Optional[float] = None

    def column(self, name: str) -> float:
        return dict(zip(COLUMNS, (self.bleu1, self.bleu2, self.bleu3, self.cider,
                                  self.distinct1, self.distinct2, self.avg_len)))[name]

    def to_key_values(self) -> str:
        lines = [f'{key}={value:.4f}' for key, value in (
            ('bleu1', self.bleu1), ('bleu2', self.bleu2), ('bleu3', self.bleu3), ('cider', self.cider),
            ('distinct1', self.distinct1), ('distinct2', self.distinct2), ('avgLen', self.avg_len),
        )]
        if self.copy_rate is not None:
            lines.append(f'copy_rate={self.copy_rate:.4f}')
        lines.append(f'count={self.count}')
        return '\n'.join(lines)

    def to_row(self, name: str = '') -> str:
        return render_table({name: self})


def evaluate(
    hypotheses: Sequence[str],
    references: Sequence[str],
    last_turns: Optional[Sequence[str]] = None,
) -> MetricsReport:
    """
    Score generated responses against references.

    Args:
        hypotheses: Generated responses
        references: Gold responses, aligned with hypotheses
        last_turns: Final history turn per sample, for the copy rate

    Returns:
        MetricsReport

    Raises:
        ValueError: On misaligned or empty corpora
    """
    _check_aligned(hypotheses, references)
    per_sample = {
        'BLEU-1': sentence_bleu_scores(hypotheses, references, 1),
        'BLEU-2': sentence_bleu_scores(hypotheses, references, 2),
        'BLEU-3': sentence_bleu_scores(hypotheses, references, 3),
        'CIDEr': cider_scores(hypotheses, references),
        'Dist-1': [_sample_distinct(h, 1) for h in hypotheses],
        'Dist-2': [_sample_distinct(h, 2) for h in hypotheses],
        'avgLen': [float(len(words(h))) for h in hypotheses],
    }
    return MetricsReport(
        bleu1=bleu_n(hypotheses, references, 1),
        bleu2=bleu_n(hypotheses, references, 2),
        bleu3=bleu_n(hypotheses, references, 3),
        cider=float(np.mean(per_sample['CIDEr'])),
        distinct1=distinct_n(hypotheses, 1),
        distinct2=distinct_n(hypotheses, 2),
        avg_len=avg_len(hypotheses),
        count=len(hypotheses),
        per_sample=per_sample,
        copy_rate=copy_rate(hypotheses, last_turns) if last_turns is not None else None,
    )


def compare_reports(reports: Dict[str, MetricsReport]) -> Dict[str, Dict[str, str]]:
    """
    Significance marks per (system, column) against the column's best system.

    The best system of a column is left unmarked; any other gets * (p < 0.05)
    or ** (p < 0.01) from a t-test of the two per-sample vectors.
    """
    marks: Dict[str, Dict[str, str]] = {name: {} for name in reports}
    for column in COLUMNS:
        best = max(reports, key=lambda name: reports[name].column(column))
        for name, report in reports.items():
            if name == best:
                marks[name][column] = ''
                continue
            _, p = t_test(report.per_sample[column], reports[best].per_sample[column])
            marks[name][column] = stars(p)
    return marks


def render_table(reports: Dict[str, MetricsReport]) -> str:
    """Aligned plain-text table, one row per system, significance stars included."""
    marks = compare_reports(reports) if len(reports) > 1 else {name: {} for name in reports}
    name_width = max([len('Model')] + [len(name) for name in reports])
    header = 'Model'.ljust(name_width) + ''.join(f'{c:>10}' for c in COLUMNS)
    rows = [header]
    for name, report in reports.items():
        cells = []
        for column in COLUMNS:
            value = report.column(column)
            text = f'{value:.3f}' if column.startswith('Dist') else f'{value:.2f}'
            cells.append(f'{text + marks[name].get(column, ""):>10}')
        rows.append(name.ljust(name_width) + ''.join(cells))
    return '\n'.join(rows)
