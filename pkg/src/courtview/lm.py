"""Decoder-only autoregressive transformer with prefix-activation injection.

The same causal core backs three models in this repo: the frozen language
model that generates court views, and the two multi-label claim classifiers
(navigator and evaluation judge), which swap the vocabulary head for a
sigmoid head.

Prefix injection: an external module may supply per-layer key/value blocks
of length `l_p`. These occupy attention slots (and learned positions)
0..l_p-1; real tokens start at position l_p and attend to the prefix slots
plus their own causal history. The prefix emits no output tokens.

Training-time forwards run on `Tensor` ops under a tape. Decoding and
classifier scoring run on a plain-numpy fast path with per-layer KV caches;
`tests/test_lm.py` pins the two paths together to 1e-9.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as tc
from .tensor import Tensor

NEG_INF = -1e30  # additive mask value; finite so softmax stays NaN-free


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    max_seq_len: int = 512
    feedforward_mult: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if min(self.vocab_size, self.n_layers, self.d_model, self.max_seq_len) < 1:
            raise ValueError("config dimensions must be positive")

    def to_meta(self) -> dict:
        return {k: str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_meta(cls, meta: dict) -> "LmConfig":
        return cls(**{k: int(meta[k]) for k in (
            "vocab_size", "n_layers", "d_model", "n_heads", "max_seq_len", "feedforward_mult")})


class PrefixActivations:
    """Per-layer key/value blocks injected ahead of the model's own cache."""

    def __init__(self, keys: list, values: list, n_layers: int, d_model: int):
        if len(keys) != n_layers or len(values) != n_layers:
            raise ValueError(f"expected {n_layers} layers of prefix blocks")
        l_p = keys[0].shape[0]
        for blk in list(keys) + list(values):
            if blk.shape != (l_p, d_model):
                raise ValueError("prefix blocks must all be [l_p, d_model]")
        self.keys = keys
        self.values = values
        self.length = l_p

    def numpy_blocks(self):
        ks = [k.data if isinstance(k, Tensor) else k for k in self.keys]
        vs = [v.data if isinstance(v, Tensor) else v for v in self.values]
        return ks, vs


_MASK_CACHE: dict = {}


def _causal_mask(t: int, l_p: int) -> np.ndarray:
    """[t, l_p + t] additive mask: prefix slots open, future real slots closed."""
    key = (t, l_p)
    m = _MASK_CACHE.get(key)
    if m is None:
        m = np.zeros((t, l_p + t))
        iu = np.triu_indices(t, k=1)
        m[iu[0], l_p + iu[1]] = NEG_INF
        _MASK_CACHE[key] = m
    return m


class CausalTransformer:
    """Transformer trunk: embeddings, pre-norm blocks, final layer norm."""

    def __init__(self, cfg: LmConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d, f = cfg.d_model, cfg.d_model * cfg.feedforward_mult
        self.params: dict[str, Tensor] = {}

        def p(name, arr):
            t = Tensor(arr, requires_grad=True)
            self.params[name] = t
            return t

        self.tok_emb = p("tok_emb", rng.normal(0, 0.02, (cfg.vocab_size, d)))
        self.pos_emb = p("pos_emb", rng.normal(0, 0.02, (cfg.max_seq_len, d)))
        self.layers = []
        for i in range(cfg.n_layers):
            pre = f"layer{i}."
            self.layers.append({
                "ln1_g": p(pre + "ln1_g", np.ones(d)),
                "ln1_b": p(pre + "ln1_b", np.zeros(d)),
                "w_qkv": p(pre + "w_qkv", rng.normal(0, 0.02, (d, 3 * d))),
                "b_qkv": p(pre + "b_qkv", np.zeros(3 * d)),
                "w_o": p(pre + "w_o", rng.normal(0, 0.02, (d, d))),
                "b_o": p(pre + "b_o", np.zeros(d)),
                "ln2_g": p(pre + "ln2_g", np.ones(d)),
                "ln2_b": p(pre + "ln2_b", np.zeros(d)),
                "w_ff1": p(pre + "w_ff1", rng.normal(0, 0.02, (d, f))),
                "b_ff1": p(pre + "b_ff1", np.zeros(f)),
                "w_ff2": p(pre + "w_ff2", rng.normal(0, 0.02, (f, d))),
                "b_ff2": p(pre + "b_ff2", np.zeros(d)),
            })
        self.lnf_g = p("lnf_g", np.ones(d))
        self.lnf_b = p("lnf_b", np.zeros(d))

    # -- shared bookkeeping ------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def param_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def fingerprint(self) -> str:
        return tc.params_fingerprint(self.params)

    def set_trainable(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag
            if flag and t.grad is None:
                t.grad = np.zeros_like(t.data)
            if not flag:
                t.grad = None

    def load_state(self, named: dict) -> None:
        for name, tparam in self.params.items():
            arr = named[name]
            if arr.shape != tparam.data.shape:
                raise tc.CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {tparam.data.shape}")
            tparam.data[...] = arr

    # -- tape forward (training / oracle path) ------------------------------

    def forward(self, tokens, prefix: PrefixActivations | None = None):
        """Full forward; returns (per-layer hidden list, final normed hidden [T, d])."""
        tokens = np.asarray(tokens, dtype=np.int64)
        cfg = self.cfg
        T = len(tokens)
        l_p = prefix.length if prefix is not None else 0
        if prefix is not None and len(prefix.keys) != cfg.n_layers:
            raise ValueError("prefix layer count does not match model")
        if T + l_p > cfg.max_seq_len:
            raise ValueError(f"sequence of {T} tokens plus prefix {l_p} exceeds max_seq_len {cfg.max_seq_len}")
        if tokens.size and tokens.max() >= cfg.vocab_size:
            raise ValueError("token id out of vocabulary")

        d = cfg.d_model
        x = tc.add(tc.embedding_gather(self.tok_emb, tokens),
                   tc.embedding_gather(self.pos_emb, np.arange(l_p, l_p + T)))
        mask = _causal_mask(T, l_p)
        hiddens = []
        for i, ly in enumerate(self.layers):
            a = tc.layer_norm(x, ly["ln1_g"], ly["ln1_b"])
            qkv = tc.add(tc.matmul(a, ly["w_qkv"]), ly["b_qkv"])
            q = tc.narrow(qkv, 1, 0, d)
            k = tc.narrow(qkv, 1, d, d)
            v = tc.narrow(qkv, 1, 2 * d, d)
            if prefix is not None:
                k = tc.concat([prefix.keys[i], k], axis=0)
                v = tc.concat([prefix.values[i], v], axis=0)
            attn_out = tc.causal_attention(q, k, v, cfg.n_heads, mask)
            x = tc.add(x, tc.add(tc.matmul(attn_out, ly["w_o"]), ly["b_o"]))
            mh = tc.layer_norm(x, ly["ln2_g"], ly["ln2_b"])
            ff = tc.add(tc.matmul(tc.gelu(tc.add(tc.matmul(mh, ly["w_ff1"]), ly["b_ff1"])), ly["w_ff2"]), ly["b_ff2"])
            x = tc.add(x, ff)
            hiddens.append(x)
        final = tc.layer_norm(x, self.lnf_g, self.lnf_b)
        return hiddens, final

    # -- numpy fast path -----------------------------------------------------

    def _np_ln(self, x, g, b, eps=1e-8):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc / np.sqrt(var + eps) * g + b

    @staticmethod
    def _np_gelu(x):
        from scipy.special import erf
        return x * 0.5 * (1.0 + erf(x / math.sqrt(2.0)))

    def start_state(self, prefix: PrefixActivations | None = None) -> "DecodingState":
        return DecodingState(self, prefix)

    def extend_state(self, state: "DecodingState", tokens) -> np.ndarray:
        """Consume tokens into the cache; returns final normed hiddens [T, d]."""
        tokens = np.asarray(tokens, dtype=np.int64)
        cfg = self.cfg
        T = len(tokens)
        if T == 0:
            raise ValueError("extend_state with no tokens")
        if state.n + T > cfg.max_seq_len:
            raise ValueError("decoding state overflow of max_seq_len")
        d, H = cfg.d_model, cfg.n_heads
        dk = d // H
        inv_sqrt = 1.0 / math.sqrt(dk)
        pos = np.arange(state.n, state.n + T)
        x = self.tok_emb.data[tokens] + self.pos_emb.data[pos]
        n0 = state.n
        block_mask = _causal_mask(T, 0)[:, :T] if T > 1 else None
        for i, ly in enumerate(self.layers):
            a = self._np_ln(x, ly["ln1_g"].data, ly["ln1_b"].data)
            qkv = a @ ly["w_qkv"].data + ly["b_qkv"].data
            q, k, v = qkv[:, :d], qkv[:, d:2 * d], qkv[:, 2 * d:]
            state.k[i][n0:n0 + T] = k
            state.v[i][n0:n0 + T] = v
            q3 = q.reshape(T, H, dk).transpose(1, 0, 2)
            K3 = state.k[i][:n0 + T].reshape(n0 + T, H, dk).transpose(1, 0, 2)
            V3 = state.v[i][:n0 + T].reshape(n0 + T, H, dk).transpose(1, 0, 2)
            scores = q3 @ K3.transpose(0, 2, 1) * inv_sqrt  # [H, T, n0+T]
            if block_mask is not None:
                scores[:, :, n0:] += block_mask
            scores -= scores.max(axis=-1, keepdims=True)
            e = np.exp(scores)
            w = e / e.sum(axis=-1, keepdims=True)
            out = (w @ V3).transpose(1, 0, 2).reshape(T, d)
            x = x + (out @ ly["w_o"].data + ly["b_o"].data)
            mh = self._np_ln(x, ly["ln2_g"].data, ly["ln2_b"].data)
            x = x + (self._np_gelu(mh @ ly["w_ff1"].data + ly["b_ff1"].data) @ ly["w_ff2"].data + ly["b_ff2"].data)
        state.n += T
        state.tokens.extend(int(t) for t in tokens)
        return self._np_ln(x, self.lnf_g.data, self.lnf_b.data)

    def candidate_hiddens(self, state: "DecodingState", cand_ids) -> np.ndarray:
        """Final hidden for each candidate appended (hypothetically) at the next slot.

        Candidates share the cache and attend to it plus themselves only;
        the cache is not mutated. Returns [n_cand, d].
        """
        cand_ids = np.asarray(cand_ids, dtype=np.int64)
        cfg = self.cfg
        d, H = cfg.d_model, cfg.n_heads
        dk = d // H
        inv_sqrt = 1.0 / math.sqrt(dk)
        n0 = state.n
        if n0 + 1 > cfg.max_seq_len:
            raise ValueError("decoding state overflow of max_seq_len")
        n_cand = len(cand_ids)
        x = self.tok_emb.data[cand_ids] + self.pos_emb.data[n0]
        for i, ly in enumerate(self.layers):
            a = self._np_ln(x, ly["ln1_g"].data, ly["ln1_b"].data)
            qkv = a @ ly["w_qkv"].data + ly["b_qkv"].data
            q, k, v = qkv[:, :d], qkv[:, d:2 * d], qkv[:, 2 * d:]
            q3 = q.reshape(n_cand, H, dk).transpose(1, 0, 2)       # [H, n, dk]
            k3 = k.reshape(n_cand, H, dk).transpose(1, 0, 2)
            v3 = v.reshape(n_cand, H, dk).transpose(1, 0, 2)
            K3 = state.k[i][:n0].reshape(n0, H, dk).transpose(1, 0, 2)
            V3 = state.v[i][:n0].reshape(n0, H, dk).transpose(1, 0, 2)
            scores = q3 @ K3.transpose(0, 2, 1) * inv_sqrt          # [H, n, n0]
            self_sc = (q3 * k3).sum(axis=2, keepdims=True) * inv_sqrt
            full = np.concatenate([scores, self_sc], axis=2)
            full -= full.max(axis=-1, keepdims=True)
            e = np.exp(full)
            w = e / e.sum(axis=-1, keepdims=True)
            out3 = w[:, :, :-1] @ V3 + w[:, :, -1:] * v3
            out = out3.transpose(1, 0, 2).reshape(n_cand, d)
            x = x + (out @ ly["w_o"].data + ly["b_o"].data)
            mh = self._np_ln(x, ly["ln2_g"].data, ly["ln2_b"].data)
            x = x + (self._np_gelu(mh @ ly["w_ff1"].data + ly["b_ff1"].data) @ ly["w_ff2"].data + ly["b_ff2"].data)
        return self._np_ln(x, self.lnf_g.data, self.lnf_b.data)


class DecodingState:
    """Owned by exactly one decoding sequence: per-layer KV cache + consumed ids."""

    def __init__(self, model: CausalTransformer, prefix: PrefixActivations | None):
        cfg = model.cfg
        cap = cfg.max_seq_len
        self.k = [np.zeros((cap, cfg.d_model)) for _ in range(cfg.n_layers)]
        self.v = [np.zeros((cap, cfg.d_model)) for _ in range(cfg.n_layers)]
        self.l_p = 0
        self.tokens: list[int] = []
        if prefix is not None:
            ks, vs = prefix.numpy_blocks()
            self.l_p = prefix.length
            for i in range(cfg.n_layers):
                self.k[i][:self.l_p] = ks[i]
                self.v[i][:self.l_p] = vs[i]
        self.n = self.l_p

    @property
    def cache_length(self) -> int:
        return self.n


class TransformerLM(CausalTransformer):
    """Causal trunk plus a (vocab-sized) output projection; Eq(2)-style head."""

    def __init__(self, cfg: LmConfig, seed: int = 0):
        super().__init__(cfg, seed)
        rng = np.random.default_rng(seed + 101)
        w = Tensor(rng.normal(0, 0.02, (cfg.d_model, cfg.vocab_size)), requires_grad=True)
        b = Tensor(np.zeros(cfg.vocab_size), requires_grad=True)
        self.params["w_head"] = w
        self.params["b_head"] = b
        self.w_head, self.b_head = w, b

    def logits(self, final_hidden: Tensor) -> Tensor:
        return tc.add(tc.matmul(final_hidden, self.w_head), self.b_head)

    def next_token_distribution(self, h_last: np.ndarray) -> np.ndarray:
        """Probability simplex over the vocabulary from a final hidden vector."""
        z = h_last @ self.w_head.data + self.b_head.data
        z = z - z.max()
        e = np.exp(z)
        return e / e.sum()

    def sequence_loss(self, tokens, loss_mask=None, prefix: PrefixActivations | None = None) -> Tensor:
        """Next-token cross entropy over the sequence; mask selects target positions."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if len(tokens) < 2:
            raise ValueError("need at least two tokens for next-token loss")
        inputs, targets = tokens[:-1], tokens[1:]
        if loss_mask is None:
            mask = np.ones(len(targets), dtype=bool)
        else:
            mask = np.asarray(loss_mask, dtype=bool)
        _, final = self.forward(inputs, prefix=prefix)
        return tc.cross_entropy_lm(self.logits(final), targets, mask)


def mean_lm_loss(model: TransformerLM, sequences, prefix_fn=None) -> float:
    """Dataset mean of per-sequence next-token loss, computed without a tape."""
    total = 0.0
    for seq in sequences:
        prefix = prefix_fn(seq) if prefix_fn else None
        total += model.sequence_loss(np.asarray(seq), prefix=prefix).item()
    return total / len(sequences)


def pretrain_lm(sequences, cfg: LmConfig, seed: int, epochs: int, lr: float,
                batch_size: int = 8, valid_sequences=None, log=None):
    """Standard next-token training over whole sequences; returns (model, history).

    history rows: (epoch, train_loss, valid_loss or nan).
    """
    if not sequences:
        raise ValueError("empty pretraining corpus")
    model = TransformerLM(cfg, seed=seed)
    state = tc.AdamState(list(model.params.values()), lr=lr)
    rng = np.random.default_rng(seed + 7)
    history = []
    order = np.arange(len(sequences))
    for epoch in range(epochs):
        rng.shuffle(order)
        running = 0.0
        pending = 0
        for idx in order:
            seq = np.asarray(sequences[idx])
            with tc.Tape() as tape:
                loss = tc.scale(model.sequence_loss(seq), 1.0 / batch_size)
            tc.assert_finite(loss, "pretrain loss")
            tape.backward(loss)
            running += loss.item() * batch_size
            pending += 1
            if pending == batch_size:
                tc.optimizer_step(state)
                pending = 0
        if pending:
            tc.optimizer_step(state)
        train_loss = running / len(sequences)
        valid_loss = mean_lm_loss(model, valid_sequences) if valid_sequences else float("nan")
        history.append((epoch, train_loss, valid_loss))
        if log:
            log(f"pretrain epoch {epoch}: train {train_loss:.4f} valid {valid_loss:.4f}")
    return model, history


def save_lm(path, model: TransformerLM, extra_meta: dict | None = None) -> None:
    meta = model.cfg.to_meta()
    meta["kind"] = "lm"
    if extra_meta:
        meta.update(extra_meta)
    tc.save_checkpoint(path, model.params, meta)


def load_lm(path) -> TransformerLM:
    named, meta = tc.load_checkpoint(path)
    if meta.get("kind") != "lm":
        raise tc.CheckpointError(f"{path}: expected an lm checkpoint, got kind={meta.get('kind')!r}")
    cfg = LmConfig.from_meta(meta)
    model = TransformerLM(cfg, seed=0)
    model.load_state(named)
    return model
