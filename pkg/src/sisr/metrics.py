"""NLG and clinical-efficacy-analog metrics plus saliency localization.

BLEU is reported corpus-level (pooled clipped n-gram counts, brevity penalty);
ROUGE-L uses the LCS F-measure with beta^2 = 1.2.  Observation metrics are
micro-averaged over every (sample, kind) pair.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass


@dataclass
class MetricReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rougeL: float
    ce_precision: float
    ce_recall: float
    ce_f1: float
    sal_recall: float | None
    sal_precision: float | None
    n_samples: int
    degenerate: bool = False

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _clipped_counts(candidate, reference, n):
    cand = _ngrams(candidate, n)
    ref = _ngrams(reference, n)
    matched = sum(min(c, ref[g]) for g, c in cand.items())
    return matched, sum(cand.values())


def bleu_n(candidate, reference, n: int):
    """Sentence-level BLEU-n; returns (score, degenerate_flag)."""
    return corpus_bleu_n([candidate], [reference], n)


def corpus_bleu_n(candidates, references, n: int):
    """Corpus-level BLEU with pooled clipped counts and brevity penalty."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cand_len = sum(len(c) for c in candidates)
    ref_len = sum(len(r) for r in references)
    if cand_len == 0:
        return 0.0, True
    log_prec = 0.0
    for order in range(1, n + 1):
        matched = total = 0
        for cand, ref in zip(candidates, references):
            m, t = _clipped_counts(cand, ref, order)
            matched += m
            total += t
        if matched == 0 or total == 0:
            return 0.0, False
        log_prec += math.log(matched / total)
    bp = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_prec / n), False


def _lcs_length(a, b):
    m, n = len(a), len(b)
    prev = [0] * (n + 1)
    for i in range(1, m + 1):
        cur = [0] * (n + 1)
        for j in range(1, n + 1):
            if a[i - 1] == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[n]


def rouge_l(candidate, reference, beta2: float = 1.2):
    """LCS-based F-measure; returns (score, degenerate_flag)."""
    if not candidate or not reference:
        return 0.0, True
    lcs = _lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0, False
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return (1.0 + beta2) * p * r / (r + beta2 * p), False


def micro_ce(predicted, reference):
    """Pooled precision/recall/F1 over all (sample, kind) label pairs."""
    if len(predicted) != len(reference):
        raise ValueError(f"label list lengths differ: {len(predicted)} vs {len(reference)}")
    tp = fp = fn = 0
    for pred, ref in zip(predicted, reference):
        tp += len(pred & ref)
        fp += len(pred - ref)
        fn += len(ref - pred)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def saliency_localization(pred, truth):
    """(recall, precision) of a predicted salient patch set against ground truth.

    Recall is None for truth-free (normal) images; callers skip those.
    """
    pred, truth = set(pred), set(truth)
    hit = len(pred & truth)
    recall = hit / len(truth) if truth else None
    precision = hit / len(pred) if pred else 0.0
    return recall, precision


def evaluate_reports(candidates, references, pred_labels, ref_labels,
                     sal_pairs=None) -> MetricReport:
    """Aggregate every metric over a matched candidate/reference corpus.

    `sal_pairs` is an optional list of (predicted patch set, truth patch set)
    restricted to images with a non-empty truth set.
    """
    bleu, degenerate = {}, False
    for n in range(1, 5):
        bleu[n], flag = corpus_bleu_n(candidates, references, n)
        degenerate = degenerate or flag
    rl_scores = []
    for cand, ref in zip(candidates, references):
        score, flag = rouge_l(cand, ref)
        degenerate = degenerate or flag
        rl_scores.append(score)
    rl = sum(rl_scores) / len(rl_scores) if rl_scores else 0.0
    p, r, f1 = micro_ce(pred_labels, ref_labels)
    sal_recall = sal_precision = None
    if sal_pairs:
        recalls, precisions = [], []
        for pred, truth in sal_pairs:
            rec, prec = saliency_localization(pred, truth)
            if rec is not None:
                recalls.append(rec)
                precisions.append(prec)
        if recalls:
            sal_recall = sum(recalls) / len(recalls)
            sal_precision = sum(precisions) / len(precisions)
    return MetricReport(bleu1=bleu[1], bleu2=bleu[2], bleu3=bleu[3], bleu4=bleu[4],
                        rougeL=rl, ce_precision=p, ce_recall=r, ce_f1=f1,
                        sal_recall=sal_recall, sal_precision=sal_precision,
                        n_samples=len(candidates), degenerate=degenerate)
