"""Similarity and claim-response metrics.

BLEU here is per-sentence, averaged over the corpus: modified n-gram
precision with clipping, add-one smoothing on numerator and denominator
for n >= 2 (unsmoothed BLEU-4 is degenerate on short outputs), vacuous
orders (hypothesis shorter than n) counting as precision 1, brevity
penalty min(1, exp(1 - len_ref/len_hyp)). A zero unigram precision or an
empty hypothesis scores 0.

ROUGE-1/2/L use the beta-weighted F measure f = (1+b^2)PR / (R + b^2 P)
with beta = 1.2 (recall-leaning, following the common pypi package
convention); ROUGE-L measures the longest common subsequence.

Claim-response metrics compare boolean label matrices: micro scores pool
all (case, label) decisions, macro scores average per-label values over
the m labels; Jaccard uses tp/(tp+fp+fn). Zero-denominator scores are
defined as 1.0 (vacuously perfect label), which keeps "predictions equal
gold implies all ones" exact.
"""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

ROUGE_BETA = 1.2

CSV_COLUMNS = ["b1", "b2", "bn", "r1", "r2", "rl", "mif", "maf", "mij", "maj", "seed", "flags"]


def _ngram_counts(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_n(hypothesis, reference, n: int) -> float:
    """Sentence BLEU-n (geometric mean of smoothed precisions, with BP)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    hyp = list(hypothesis)
    ref = list(reference)
    if not hyp:
        warnings.warn("empty hypothesis scores 0 in BLEU", stacklevel=2)
        return 0.0
    log_sum = 0.0
    for order in range(1, n + 1):
        hc = _ngram_counts(hyp, order)
        rc = _ngram_counts(ref, order)
        clipped = sum(min(c, rc.get(g, 0)) for g, c in hc.items())
        total = sum(hc.values())
        if order == 1:
            if clipped == 0:
                return 0.0
            p = clipped / total
        elif total == 0:
            p = 1.0
        else:
            p = (clipped + 1) / (total + 1)
        log_sum += math.log(p)
    bp = min(1.0, math.exp(1.0 - len(ref) / len(hyp)))
    return bp * math.exp(log_sum / n)


def _beta_f(p: float, r: float, beta: float = ROUGE_BETA) -> float:
    if p == 0.0 or r == 0.0:
        return 0.0
    b2 = beta * beta
    return (1 + b2) * p * r / (r + b2 * p)


def rouge_n(hypothesis, reference, n: int) -> float:
    hc = _ngram_counts(list(hypothesis), n)
    rc = _ngram_counts(list(reference), n)
    overlap = sum(min(c, rc.get(g, 0)) for g, c in hc.items())
    th, tr = sum(hc.values()), sum(rc.values())
    if th == 0 or tr == 0:
        return 0.0
    return _beta_f(overlap / th, overlap / tr)


def lcs_length(a, b) -> int:
    """Length of the longest common subsequence (linear-space DP)."""
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(hypothesis, reference) -> float:
    hyp = list(hypothesis)
    ref = list(reference)
    if not ref:
        raise ValueError("ROUGE-L needs a nonempty reference")
    if not hyp:
        return 0.0
    lcs = lcs_length(hyp, ref)
    return _beta_f(lcs / len(hyp), lcs / len(ref))


def claim_response_metrics(pred: np.ndarray, gold: np.ndarray):
    """(Mi-F, Ma-F, Mi-J, Ma-J) from [n_cases, m] boolean matrices."""
    pred = np.asarray(pred, dtype=bool)
    gold = np.asarray(gold, dtype=bool)
    if pred.shape != gold.shape:
        raise ValueError(f"prediction matrix {pred.shape} does not match gold {gold.shape}")
    tp = (pred & gold).sum(axis=0).astype(float)
    fp = (pred & ~gold).sum(axis=0).astype(float)
    fn = (~pred & gold).sum(axis=0).astype(float)

    def f1(t, p_, n_):
        denom = 2 * t + p_ + n_
        return 1.0 if denom == 0 else 2 * t / denom

    def jac(t, p_, n_):
        denom = t + p_ + n_
        return 1.0 if denom == 0 else t / denom

    m = pred.shape[1]
    mi_f = f1(tp.sum(), fp.sum(), fn.sum())
    ma_f = float(np.mean([f1(tp[j], fp[j], fn[j]) for j in range(m)]))
    mi_j = jac(tp.sum(), fp.sum(), fn.sum())
    ma_j = float(np.mean([jac(tp[j], fp[j], fn[j]) for j in range(m)]))
    return mi_f, ma_f, mi_j, ma_j


@dataclass
class MetricReport:
    b1: float
    b2: float
    bn: float
    r1: float
    r2: float
    rl: float
    mif: float
    maf: float
    mij: float
    maj: float
    metadata: dict = field(default_factory=dict)

    def scores(self) -> dict:
        return {k: getattr(self, k) for k in CSV_COLUMNS[:10]}

    def csv_row(self) -> str:
        cells = [f"{getattr(self, k):.6f}" for k in CSV_COLUMNS[:10]]
        cells.append(str(self.metadata.get("seed", "")))
        cells.append(self.metadata.get("flags", ""))
        return ",".join(cells)

    def to_text(self) -> str:
        lines = ["metric,value"]
        for k in CSV_COLUMNS[:10]:
            lines.append(f"{k},{getattr(self, k) * 100:.2f}")
        for k in sorted(self.metadata):
            lines.append(f"# {k}={self.metadata[k]}")
        return "\n".join(lines) + "\n"


def csv_header() -> str:
    return ",".join(CSV_COLUMNS)


def evaluate_generations(hypotheses, references, pred_labels, gold_labels,
                         metadata: dict | None = None) -> MetricReport:
    """Score one generation run: token-list hypotheses/references plus label matrices."""
    if len(hypotheses) != len(references) or len(hypotheses) == 0:
        raise ValueError("need one hypothesis per reference")
    bleus = np.zeros((len(hypotheses), 4))
    r1 = r2 = rl = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for i, (hyp, ref) in enumerate(zip(hypotheses, references)):
            for n in range(1, 5):
                bleus[i, n - 1] = bleu_n(hyp, ref, n)
            r1 += rouge_n(hyp, ref, 1)
            r2 += rouge_n(hyp, ref, 2)
            rl += rouge_l(hyp, ref)
    n_cases = len(hypotheses)
    mean_bleu = bleus.mean(axis=0)
    mi_f, ma_f, mi_j, ma_j = claim_response_metrics(pred_labels, gold_labels)
    return MetricReport(
        b1=float(mean_bleu[0]), b2=float(mean_bleu[1]), bn=float(mean_bleu.mean()),
        r1=r1 / n_cases, r2=r2 / n_cases, rl=rl / n_cases,
        mif=mi_f, maf=ma_f, mij=mi_j, maj=ma_j,
        metadata=dict(metadata or {}),
    )


# ---------------------------------------------------------------------------
# Deterministic SVG line charts (sweep figures)


def svg_line_chart(path, x_values, series: dict, title: str,
                   x_label: str, y_label: str) -> None:
    """Write a small multi-series line chart as standalone SVG (byte-stable)."""
    width, height, pad = 640, 400, 60
    xs = list(x_values)
    ys_all = [v for vals in series.values() for v in vals]
    y_min, y_max = min(ys_all), max(ys_all)
    if y_max - y_min < 1e-9:
        y_min, y_max = y_min - 1.0, y_max + 1.0
    span_x = (max(xs) - min(xs)) or 1

    def sx(x):
        return pad + (x - min(xs)) / span_x * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y_min) / (y_max - y_min) * (height - 2 * pad)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width/2:.1f}" y="24" text-anchor="middle" font-size="16">{title}</text>',
        f'<line x1="{pad}" y1="{height-pad}" x2="{width-pad}" y2="{height-pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height-pad}" stroke="black"/>',
        f'<text x="{width/2:.1f}" y="{height-16}" text-anchor="middle" font-size="12">{x_label}</text>',
        f'<text x="18" y="{height/2:.1f}" font-size="12" transform="rotate(-90 18 {height/2:.1f})" text-anchor="middle">{y_label}</text>',
    ]
    for x in xs:
        parts.append(f'<text x="{sx(x):.1f}" y="{height-pad+16}" text-anchor="middle" font-size="10">{x:g}</text>')
    for tick in (y_min, (y_min + y_max) / 2, y_max):
        parts.append(f'<text x="{pad-6}" y="{sy(tick)+4:.1f}" text-anchor="end" font-size="10">{tick:.2f}</text>')
    for idx, (name, vals) in enumerate(sorted(series.items())):
        color = colors[idx % len(colors)]
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, vals))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in zip(xs, vals):
            parts.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3" fill="{color}"/>')
        parts.append(f'<text x="{width-pad+8}" y="{pad+16*idx+12}" font-size="11" fill="{color}">{name}</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(parts) + "\n")
