"""Independent brute-force oracles used to cross-check the library.

Everything here is deliberately naive (loops, quadratic DP, direct set
arithmetic) and shares no code with the implementations under test.
"""

import math
from collections import Counter

import numpy as np


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function f at x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def sampled_finite_diff(f, x: np.ndarray, idx: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences at a subset of flat indices of x."""
    flat = x.reshape(-1)
    out = np.zeros(len(idx), dtype=np.float64)
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[j] = (fp - fm) / (2.0 * h)
    return out


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Max relative error with an absolute floor sitting above central-difference
    noise (~1e-16 * |f| / h), so near-zero gradients are not compared to FD dust."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


# ---------------------------------------------------------------------------
# Metric oracles


def ngrams_list(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def bleu_oracle(hyp, ref, n):
    """Per-sentence BLEU-n by direct counting.

    Geometric mean of modified i-gram precisions for i=1..n with clipping,
    add-one smoothing on numerator and denominator for i >= 2, vacuous
    precisions (no i-grams in the hypothesis) treated as 1, and brevity
    penalty min(1, exp(1 - len_ref/len_hyp)). Zero unigram precision or an
    empty hypothesis scores 0.
    """
    if len(hyp) == 0:
        return 0.0
    log_sum = 0.0
    for i in range(1, n + 1):
        hgrams = ngrams_list(hyp, i)
        rgrams = ngrams_list(ref, i)
        rcount = Counter(rgrams)
        clipped = 0
        for gram, cnt in Counter(hgrams).items():
            clipped += min(cnt, rcount.get(gram, 0))
        total = len(hgrams)
        if i == 1:
            if clipped == 0:
                return 0.0
            p = clipped / total
        else:
            if total == 0:
                p = 1.0
            else:
                p = (clipped + 1) / (total + 1)
        log_sum += math.log(p)
    bp = min(1.0, math.exp(1.0 - len(ref) / len(hyp)))
    return bp * math.exp(log_sum / n)


def lcs_oracle(a, b):
    """Quadratic DP longest common subsequence length."""
    la, lb = len(a), len(b)
    dp = [[0] * (lb + 1) for _ in range(la + 1)]
    for i in range(1, la + 1):
        for j in range(1, lb + 1):
            if a[i - 1] == b[j - 1]:
                dp[i][j] = dp[i - 1][j - 1] + 1
            else:
                dp[i][j] = max(dp[i - 1][j], dp[i][j - 1])
    return dp[la][lb]


def rouge_l_oracle(hyp, ref, beta=1.2):
    if len(hyp) == 0 or len(ref) == 0:
        return 0.0
    lcs = lcs_oracle(hyp, ref)
    p = lcs / len(hyp)
    r = lcs / len(ref)
    if p == 0.0 or r == 0.0:
        return 0.0
    return (1 + beta * beta) * p * r / (r + beta * beta * p)


def rouge_n_oracle(hyp, ref, n, beta=1.2):
    hgrams = Counter(ngrams_list(hyp, n))
    rgrams = Counter(ngrams_list(ref, n))
    overlap = sum(min(c, rgrams.get(g, 0)) for g, c in hgrams.items())
    total_h = sum(hgrams.values())
    total_r = sum(rgrams.values())
    if total_h == 0 or total_r == 0:
        return 0.0
    p = overlap / total_h
    r = overlap / total_r
    if p == 0.0 or r == 0.0:
        return 0.0
    return (1 + beta * beta) * p * r / (r + beta * beta * p)


def claim_metrics_oracle(pred: np.ndarray, gold: np.ndarray):
    """(Mi-F, Ma-F, Mi-J, Ma-J) from per-label confusion counts.

    pred/gold: [n_cases, m] boolean. Zero-denominator scores are defined
    as 1.0 (vacuously perfect label).
    """
    pred = np.asarray(pred, dtype=bool)
    gold = np.asarray(gold, dtype=bool)
    m = pred.shape[1]
    tp = np.zeros(m, dtype=int)
    fp = np.zeros(m, dtype=int)
    fn = np.zeros(m, dtype=int)
    for i in range(pred.shape[0]):
        for j in range(m):
            if pred[i, j] and gold[i, j]:
                tp[j] += 1
            elif pred[i, j] and not gold[i, j]:
                fp[j] += 1
            elif not pred[i, j] and gold[i, j]:
                fn[j] += 1

    def f1(t, p_, n_):
        denom = 2 * t + p_ + n_
        return 1.0 if denom == 0 else 2 * t / denom

    def jac(t, p_, n_):
        denom = t + p_ + n_
        return 1.0 if denom == 0 else t / denom

    mi_f = f1(tp.sum(), fp.sum(), fn.sum())
    ma_f = sum(f1(tp[j], fp[j], fn[j]) for j in range(m)) / m
    mi_j = jac(tp.sum(), fp.sum(), fn.sum())
    ma_j = sum(jac(tp[j], fp[j], fn[j]) for j in range(m)) / m
    return mi_f, ma_f, mi_j, ma_j


def label_attention_oracle(h: np.ndarray, C: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Triple-loop claim-aware context: h'_t = h_t + sum_i softmax_i(h_t W C_i) C_i."""
    T, d = h.shape
    m = C.shape[0]
    out = np.zeros_like(h)
    for t in range(T):
        scores = np.empty(m)
        for i in range(m):
            s = 0.0
            for p in range(d):
                for q in range(d):
                    s += h[t, p] * W[p, q] * C[i, q]
            scores[i] = s
        e = np.exp(scores - scores.max())
        w = e / e.sum()
        ctx = np.zeros(d)
        for i in range(m):
            ctx += w[i] * C[i]
        out[t] = h[t] + ctx
    return out


def softmax_oracle(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max())
    return e / e.sum()


# ---------------------------------------------------------------------------
# Naive transformer forward (independent of courtview.lm)


def reference_forward(params, cfg, tokens, prefix_k=None, prefix_v=None):
    """Plain-loop pre-norm causal transformer; returns final normed hidden [T, d].

    params: dict name -> float64 array (tok_emb, pos_emb, layer{i}.*, lnf_*).
    prefix_k/prefix_v: optional per-layer [l_p, d] blocks injected as extra
    attention slots ahead of the real tokens.
    """
    d = cfg["d_model"]
    H = cfg["n_heads"]
    dk = d // H
    l_p = 0 if prefix_k is None else prefix_k[0].shape[0]
    T = len(tokens)

    def ln(x, g, b, eps=1e-8):
        out = np.empty_like(x)
        for t in range(x.shape[0]):
            row = x[t]
            mu = row.mean()
            var = ((row - mu) ** 2).mean()
            out[t] = (row - mu) / math.sqrt(var + eps) * g + b
        return out

    x = np.array([params["tok_emb"][tok] + params["pos_emb"][l_p + i]
                  for i, tok in enumerate(tokens)])
    for li in range(cfg["n_layers"]):
        pre = f"layer{li}."
        a = ln(x, params[pre + "ln1_g"], params[pre + "ln1_b"])
        qkv = a @ params[pre + "w_qkv"] + params[pre + "b_qkv"]
        q, k, v = qkv[:, :d], qkv[:, d:2 * d], qkv[:, 2 * d:]
        if l_p:
            k = np.concatenate([prefix_k[li], k], axis=0)
            v = np.concatenate([prefix_v[li], v], axis=0)
        attn = np.zeros((T, d))
        for h in range(H):
            sl = slice(h * dk, (h + 1) * dk)
            for i in range(T):
                scores = []
                for j in range(l_p + i + 1):  # prefix slots + causal history
                    scores.append(float(q[i, sl] @ k[j, sl]) / math.sqrt(dk))
                scores = np.array(scores)
                w = softmax_oracle(scores)
                for j, wj in enumerate(w):
                    attn[i, sl] += wj * v[j, sl]
        x = x + attn @ params[pre + "w_o"] + params[pre + "b_o"]
        mh = ln(x, params[pre + "ln2_g"], params[pre + "ln2_b"])
        inner = mh @ params[pre + "w_ff1"] + params[pre + "b_ff1"]
        from scipy.special import erf as _erf
        act = inner * 0.5 * (1.0 + _erf(inner / math.sqrt(2.0)))
        x = x + act @ params[pre + "w_ff2"] + params[pre + "b_ff2"]
    return ln(x, params["lnf_g"], params["lnf_b"])
