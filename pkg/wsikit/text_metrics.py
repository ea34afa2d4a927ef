"""
BLEU-1..4 and ROUGE-L for report-generation evaluation.

Tokenization: lowercase, punctuation stripped, whitespace split. Scores are
therefore only qualitatively comparable with numbers produced by other
tokenizers.
"""
import math
import string
from collections import Counter
from typing import List, Sequence

from pydantic import BaseModel, Field

from wsikit.errors import DimensionMismatchError, EmptyInputError

MAX_NGRAM = 4
DEFAULT_ROUGE_BETA = 1.2

_PUNCTUATION = str.maketrans("", "", string.punctuation)


class TextMetricReport(BaseModel):
    bleu1: float = Field(..., ge=0.0, le=100.0)
    bleu2: float = Field(..., ge=0.0, le=100.0)
    bleu3: float = Field(..., ge=0.0, le=100.0)
    bleu4: float = Field(..., ge=0.0, le=100.0)
    rouge_l: float = Field(..., ge=0.0, le=1.0)


def tokenize(text: str) -> List[str]:
    """Lowercase, strip punctuation and split on whitespace."""
    return text.lower().translate(_PUNCTUATION).split()


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_length(candidate_len: int, references: Sequence[Sequence[str]]) -> int:
    # Ties go to the shorter reference
    return min((len(r) for r in references), key=lambda length: (abs(length - candidate_len), length))


def corpus_bleu(
    candidates: Sequence[Sequence[str]],
    references: Sequence[Sequence[Sequence[str]]],
    max_n: int = MAX_NGRAM,
) -> List[float]:
    """
    Corpus BLEU with clipped n-gram precision and brevity penalty.

    Args:
        candidates: Tokenized candidate sentences
        references: For each candidate, its list of tokenized references
        max_n: Highest n-gram order (1..4)

    Returns:
        Cumulative BLEU-1..BLEU-max_n, each scaled to [0, 100]. An order with
        no matching n-grams (or no candidate n-grams at all) scores 0 from
        that order on.

    Raises:
        EmptyInputError: On an empty candidate or an empty reference set
    """
    if not 1 <= max_n <= MAX_NGRAM:
        raise ValueError(f"max_n must be in 1..{MAX_NGRAM}, got {max_n}")
    if len(candidates) != len(references):
        raise DimensionMismatchError(f"{len(candidates)} candidates but {len(references)} reference sets")

    matches = [0] * max_n
    totals = [0] * max_n
    candidate_len = reference_len = 0
    for candidate, refs in zip(candidates, references):
        if not candidate:
            raise EmptyInputError("BLEU needs a nonempty candidate")
        if not refs:
            raise EmptyInputError("BLEU needs at least one reference")
        candidate_len += len(candidate)
        reference_len += _closest_ref_length(len(candidate), refs)
        for n in range(1, max_n + 1):
            counts = _ngrams(candidate, n)
            max_ref_counts: Counter = Counter()
            for ref in refs:
                max_ref_counts |= _ngrams(ref, n)
            matches[n - 1] += sum(min(c, max_ref_counts[g]) for g, c in counts.items())
            totals[n - 1] += sum(counts.values())

    if not candidates:
        raise EmptyInputError("BLEU needs at least one candidate")

    brevity = 1.0 if candidate_len > reference_len else math.exp(1.0 - reference_len / candidate_len)
    scores = []
    log_sum = 0.0
    for n in range(1, max_n + 1):
        if matches[n - 1] == 0 or totals[n - 1] == 0:
            scores.extend([0.0] * (max_n - n + 1))
            break
        log_sum += math.log(matches[n - 1] / totals[n - 1])
        scores.append(100.0 * brevity * math.exp(log_sum / n))
    return scores


def bleu(candidate: Sequence[str], references: Sequence[Sequence[str]], max_n: int = MAX_NGRAM) -> List[float]:
    """Cumulative BLEU-1..max_n (x100) of one candidate against its references."""
    return corpus_bleu([candidate], [references], max_n=max_n)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    """Longest common subsequence length, O(len(a) * len(b))."""
    previous = [0] * (len(b) + 1)
    for token in a:
        current = [0]
        for j, other in enumerate(b, 1):
            current.append(previous[j - 1] + 1 if token == other else max(previous[j], current[j - 1]))
        previous = current
    return previous[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str], beta: float = DEFAULT_ROUGE_BETA) -> float:
    """
    ROUGE-L F-measure from the LCS of candidate and reference.

    Raises:
        EmptyInputError: If either sequence is empty
    """
    if not candidate or not reference:
        raise EmptyInputError("ROUGE-L needs nonempty candidate and reference")
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    precision = lcs / len(candidate)
    recall = lcs / len(reference)
    return (1 + beta ** 2) * precision * recall / (recall + beta ** 2 * precision)


def metric_report(candidates: Sequence[str], references: Sequence[str], beta: float = DEFAULT_ROUGE_BETA) -> TextMetricReport:
    """
    Corpus BLEU-1..4 and mean ROUGE-L over line-aligned candidate/reference texts.

    Raises:
        DimensionMismatchError: If the two lists differ in length
    """
    if len(candidates) != len(references):
        raise DimensionMismatchError(f"{len(candidates)} candidates but {len(references)} references")
    if not candidates:
        raise EmptyInputError("metric report needs at least one candidate")
    cand_tokens = [tokenize(c) for c in candidates]
    ref_tokens = [tokenize(r) for r in references]
    scores = corpus_bleu(cand_tokens, [[r] for r in ref_tokens])
    rouge = sum(rouge_l(c, r, beta) for c, r in zip(cand_tokens, ref_tokens)) / len(cand_tokens)
    return TextMetricReport(bleu1=scores[0], bleu2=scores[1], bleu3=scores[2], bleu4=scores[3], rouge_l=rouge)
