"""Generating navigator: classifier-guided greedy decoding.

A small causal transformer (its own embeddings, fresh instance, never
sharing LM weights) reads a court-view prefix and emits m sigmoid outputs
per position. During decoding, the top-N tokens of the generator's
distribution are each hypothetically appended; the classifier's thresholded
label set for the extended prefix is Jaccard-compared to the true label
set, softmaxed over the candidates, damped by a logistic length schedule,
and added (times lambda) onto those candidates' probabilities. The adjusted
vector is a ranking score only; greedy argmax consumes it.

`guided_step` needs nothing but a probability vector and a candidate
scoring callback, so the navigator bolts onto any generator exposing those.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .corpus import Tokenizer
from .lm import CausalTransformer, DecodingState, LmConfig, PrefixActivations, TransformerLM
from .tensor import Tensor


@dataclass(frozen=True)
class GuidanceSchedule:
    lam: float = 6.0
    k: int = 50
    mu: float = 10.0
    top_n: int = 10

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.mu <= 0:
            raise ValueError("mu must be > 0")
        if self.top_n < 1:
            raise ValueError("top_n must be >= 1")


def schedule_factor(l: int, sched: GuidanceSchedule) -> float:
    """Logistic ramp 1 / (1 + exp((k - l) / mu)) of guidance strength in length l."""
    if l < 0:
        raise ValueError("generation length must be >= 0")
    z = (sched.k - l) / sched.mu
    return float(1.0 / (1.0 + math.exp(min(z, 700.0))))


def jaccard(a: np.ndarray, b: np.ndarray) -> float:
    """|a & b| / |a | b| over boolean label sets; 1 when both empty, 0 when one is."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def recommendation_scores(cand_probs: np.ndarray, true_labels: np.ndarray,
                          tau: float = 0.5):
    """Softmax over per-candidate Jaccard scores; returns (phi_s, raw_scores)."""
    preds = np.asarray(cand_probs) >= tau
    raw = np.array([jaccard(p, true_labels) for p in preds])
    shifted = raw - raw.max()
    e = np.exp(shifted)
    return e / e.sum(), raw


def guided_step(phi_g: np.ndarray, l: int, sched: GuidanceSchedule,
                true_labels: np.ndarray, classify_candidates,
                tau: float = 0.5, space: str = "prob") -> int:
    """One guided greedy selection.

    phi_g: generator's probability simplex over the vocabulary.
    classify_candidates: token ids -> [n, m] label probabilities for each
    hypothetical extension (the token-append oracle).
    space: "prob" adds lambda * phi_s_tilde onto probabilities (the literal
    reading); "logit" adds onto log-probabilities instead.
    """
    order = np.argsort(-phi_g, kind="stable")
    cand_ids = order[:sched.top_n]
    probs = classify_candidates(cand_ids)
    phi_s, _ = recommendation_scores(probs, true_labels, tau=tau)
    phi_s_tilde = phi_s * schedule_factor(l, sched)
    if space == "prob":
        adjusted = phi_g.copy()
    elif space == "logit":
        adjusted = np.log(np.maximum(phi_g, 1e-300))
    else:
        raise ValueError(f"unknown guidance space {space!r}")
    adjusted[cand_ids] += sched.lam * phi_s_tilde
    return int(np.argmax(adjusted))


# ---------------------------------------------------------------------------
# Prefix classifier


class PrefixClassifier(CausalTransformer):
    """Causal trunk plus a per-position multi-label sigmoid head."""

    def __init__(self, cfg: LmConfig, m: int, seed: int = 0, tau: float = 0.5):
        super().__init__(cfg, seed)
        rng = np.random.default_rng(seed + 211)
        self.m = m
        self.tau = tau
        w = Tensor(rng.normal(0, 0.02, (cfg.d_model, m)), requires_grad=True)
        b = Tensor(np.zeros(m), requires_grad=True)
        self.params["w_clf"] = w
        self.params["b_clf"] = b
        self.w_clf, self.b_clf = w, b

    def position_probs(self, tokens) -> Tensor:
        """[T, m] label probabilities at every prefix length (training path)."""
        _, final = self.forward(tokens)
        return tc.sigmoid(tc.add(tc.matmul(final, self.w_clf), self.b_clf))

    def _head_np(self, hidden: np.ndarray) -> np.ndarray:
        z = hidden @ self.w_clf.data + self.b_clf.data
        return 1.0 / (1.0 + np.exp(-z))

    def full_view_probs(self, tokens) -> np.ndarray:
        """Label probabilities after reading the whole view (last position)."""
        state = self.start_state()
        hidden = self.extend_state(state, tokens)
        return self._head_np(hidden[-1])

    def begin(self) -> DecodingState:
        return self.start_state()

    def consume(self, state: DecodingState, tokens) -> np.ndarray:
        return self._head_np(self.extend_state(state, tokens)[-1])

    def candidate_probs(self, state: DecodingState, cand_ids) -> np.ndarray:
        """[n, m] probabilities for each candidate appended to the cached prefix."""
        return self._head_np(self.candidate_hiddens(state, cand_ids))

    def predict(self, tokens) -> np.ndarray:
        return self.full_view_probs(tokens) >= self.tau


def classifier_loss(clf: PrefixClassifier, tokens, labels: np.ndarray) -> Tensor:
    """Per-position multi-label cross entropy against the case's label set,
    summed over labels and averaged over prefix lengths (all sub-samples in
    one forward-backward pass)."""
    probs = clf.position_probs(tokens)
    targets = np.broadcast_to(np.asarray(labels, dtype=np.float64), probs.shape)
    return tc.scale(tc.binary_cross_entropy(probs, targets), 1.0 / probs.shape[0])


def train_classifier(records, tok: Tokenizer, cfg: LmConfig, m: int, seed: int,
                     epochs: int, lr: float, batch_size: int = 8, tau: float = 0.5,
                     log=None):
    """Train a prefix classifier on gold court views; returns (clf, history)."""
    for r in records:
        if not r.labels.any():
            raise ValueError(f"record {r.case_id} has no claim labels")
    clf = PrefixClassifier(cfg, m, seed=seed, tau=tau)
    state = tc.AdamState(list(clf.params.values()), lr=lr)
    rng = np.random.default_rng(seed + 31)
    order = np.arange(len(records))
    views = [np.asarray(tok.encode(r.court_view), dtype=np.int64) for r in records]
    history = []
    for epoch in range(epochs):
        rng.shuffle(order)
        running = 0.0
        pending = 0
        for idx in order:
            with tc.Tape() as tape:
                loss = tc.scale(classifier_loss(clf, views[idx], records[idx].labels), 1.0 / batch_size)
            tc.assert_finite(loss, "classifier loss")
            tape.backward(loss)
            running += loss.item() * batch_size
            pending += 1
            if pending == batch_size:
                tc.optimizer_step(state)
                pending = 0
        if pending:
            tc.optimizer_step(state)
        history.append((epoch, running / len(records)))
        if log:
            log(f"classifier epoch {epoch}: train {running / len(records):.4f}")
    return clf, history


def classifier_micro_f1(clf: PrefixClassifier, records, tok: Tokenizer) -> float:
    """Full-view micro-F1 against gold labels (the classifier quality gate)."""
    tp = fp = fn = 0
    for r in records:
        pred = clf.predict(tok.encode(r.court_view))
        gold = r.labels
        tp += int(np.sum(pred & gold))
        fp += int(np.sum(pred & ~gold))
        fn += int(np.sum(~pred & gold))
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def save_classifier(path, clf: PrefixClassifier, extra_meta: dict | None = None) -> None:
    meta = clf.cfg.to_meta()
    meta.update({"kind": "classifier", "m": str(clf.m), "tau": repr(clf.tau)})
    if extra_meta:
        meta.update(extra_meta)
    tc.save_checkpoint(path, clf.params, meta)


def load_classifier(path) -> PrefixClassifier:
    named, meta = tc.load_checkpoint(path)
    if meta.get("kind") != "classifier":
        raise tc.CheckpointError(f"{path}: expected a classifier checkpoint, got kind={meta.get('kind')!r}")
    cfg = LmConfig.from_meta(meta)
    clf = PrefixClassifier(cfg, int(meta["m"]), seed=0, tau=float(meta["tau"]))
    clf.load_state(named)
    return clf


# ---------------------------------------------------------------------------
# Guided generation


def guided_generate(lm: TransformerLM, prompt_ids: np.ndarray,
                    prefix: PrefixActivations | None,
                    classifier: PrefixClassifier | None,
                    true_labels: np.ndarray, sched: GuidanceSchedule,
                    eos_id: int, max_view_len: int,
                    use_navigator: bool = True, tau: float = 0.5,
                    space: str = "prob") -> list:
    """Greedy decode of a court view from [prefix; fact; sep; claims; sep].

    With `use_navigator` the classifier re-ranks the top-N tokens at every
    position; without it (or with lambda = 0 and the full arithmetic still
    running) plain argmax decoding falls out. Deterministic.
    """
    if use_navigator and classifier is None:
        raise ValueError("navigator decoding requires a classifier")
    state = lm.start_state(prefix)
    hidden = lm.extend_state(state, prompt_ids)[-1]
    clf_state = classifier.begin() if use_navigator else None
    view: list[int] = []
    cap = min(max_view_len, lm.cfg.max_seq_len - state.n - 1)
    if use_navigator:
        cap = min(cap, classifier.cfg.max_seq_len - 1)
    while len(view) < cap:
        phi_g = lm.next_token_distribution(hidden)
        if use_navigator:
            tok_id = guided_step(
                phi_g, len(view), sched, true_labels,
                lambda ids: classifier.candidate_probs(clf_state, ids),
                tau=tau, space=space)
        else:
            tok_id = int(np.argmax(phi_g))
        if tok_id == eos_id:
            break
        view.append(tok_id)
        hidden = lm.extend_state(state, [tok_id])[-1]
        if use_navigator:
            classifier.extend_state(clf_state, [tok_id])
    return view
