"""Knowledge-injected prompt encoder.

Produces the per-layer key/value prefix blocks that steer the frozen
language model. Three ingredients:

* prefix slot embeddings, one per claim label, initialized as the
  keyword-frequency-weighted sum of the label's keyword embeddings taken
  from the frozen LM embedding table (multi-word keywords contribute the
  mean of their token embeddings);
* label attention: claim-label definitions are encoded by a small
  bidirectional transformer with mean pooling, and each context position
  attends over the label representations through a trainable bilinear map,
  the result added residually to give a claim-aware context;
* a one-layer autoregressive prompt network over the slots, with
  cross-attention into the claim-aware context, projected to
  2 * n_layers * d_model per slot and reshaped into prefix blocks.

Attention inside this module uses low-rank query/key/value maps; the whole
trainable bundle stays well under a fifth of the LM's parameter count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .corpus import SEP, UNK, ClaimCatalog, Tokenizer
from .lm import NEG_INF, LmConfig, PrefixActivations, TransformerLM
from .tensor import Tensor


@dataclass(frozen=True)
class PromptConfig:
    m: int
    d_model: int
    n_lm_layers: int
    attn_rank: int = 8
    ff_hidden: int = 16
    kv_rank: int = 8
    no_keyword_init: bool = False
    no_label_attention: bool = False

    def to_meta(self) -> dict:
        return {
            "m": str(self.m), "d_model": str(self.d_model),
            "n_lm_layers": str(self.n_lm_layers), "attn_rank": str(self.attn_rank),
            "ff_hidden": str(self.ff_hidden), "kv_rank": str(self.kv_rank),
            "no_keyword_init": str(int(self.no_keyword_init)),
            "no_label_attention": str(int(self.no_label_attention)),
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "PromptConfig":
        return cls(
            m=int(meta["m"]), d_model=int(meta["d_model"]),
            n_lm_layers=int(meta["n_lm_layers"]), attn_rank=int(meta["attn_rank"]),
            ff_hidden=int(meta["ff_hidden"]), kv_rank=int(meta["kv_rank"]),
            no_keyword_init=bool(int(meta["no_keyword_init"])),
            no_label_attention=bool(int(meta["no_label_attention"])),
        )


def keyword_embedding(keyword: str, emb_table: np.ndarray, tok: Tokenizer) -> np.ndarray:
    """Mean embedding of a keyword's in-vocabulary tokens; OOV tokens excluded."""
    ids = [i for i in tok.encode(keyword) if i != UNK]
    if not ids:
        raise ValueError(f"keyword {keyword!r} is entirely out of vocabulary")
    return emb_table[ids].mean(axis=0)


def init_prefix_embedding(catalog: ClaimCatalog, emb_table: np.ndarray,
                          phi_cl: list, tok: Tokenizer) -> np.ndarray:
    """Keyword-frequency-weighted prefix slot embeddings, one row per label."""
    rows = []
    for lab, phi in zip(catalog.labels, phi_cl):
        e = np.zeros(emb_table.shape[1])
        for weight, kw in zip(phi, lab.keywords):
            e += weight * keyword_embedding(kw, emb_table, tok)
        rows.append(e)
    return np.stack(rows)


def label_attention(h_fc: Tensor, C: Tensor, W_c: Tensor) -> Tensor:
    """Claim-aware context: residual add of label-definition mixtures.

    Per position t: scores over the m labels are h_t^T W_c C_i, softmaxed
    over labels; the weighted label representation is added to h_t.
    """
    scores = tc.matmul(tc.matmul(h_fc, W_c), tc.transpose(C))  # [T, m]
    weights = tc.softmax(scores, axis=-1)
    return tc.add(h_fc, tc.matmul(weights, C))


class PromptEncoder:
    """Trainable prompt encoder bound to a frozen LM, tokenizer and catalog."""

    def __init__(self, cfg: PromptConfig, lm: TransformerLM, tok: Tokenizer,
                 catalog: ClaimCatalog, seed: int = 0,
                 phi_cl: list | None = None):
        if cfg.d_model != lm.cfg.d_model or cfg.n_lm_layers != lm.cfg.n_layers:
            raise ValueError("prompt encoder dimensions do not match the LM")
        if cfg.m != catalog.m:
            raise ValueError("prefix length must equal the number of claim labels")
        self.cfg = cfg
        self.lm = lm
        self.tok = tok
        self.catalog = catalog
        self.def_ids = [np.asarray(tok.encode(lab.definition), dtype=np.int64)
                        for lab in catalog.labels]
        for lab, ids in zip(catalog.labels, self.def_ids):
            if len(ids) == 0:
                raise ValueError(f"label {lab.name} has an empty definition")

        rng = np.random.default_rng(seed)
        d, r, h = cfg.d_model, cfg.attn_rank, cfg.ff_hidden
        self.params: dict[str, Tensor] = {}

        def p(name, arr):
            t = Tensor(arr, requires_grad=True)
            self.params[name] = t
            return t

        if cfg.no_keyword_init or phi_cl is None:
            d_p0 = rng.normal(0, 0.02, (cfg.m, d))
        else:
            d_p0 = init_prefix_embedding(catalog, lm.tok_emb.data, phi_cl, tok)
        self.D_p = p("D_p", d_p0)
        self.W_c = p("W_c", rng.normal(0, 0.02, (d, d)))

        # definition encoder (bidirectional, low-rank attention, mean pooled)
        self.enc = {
            "wq": p("enc.wq", rng.normal(0, 0.02, (d, r))),
            "wk": p("enc.wk", rng.normal(0, 0.02, (d, r))),
            "wv": p("enc.wv", rng.normal(0, 0.02, (d, r))),
            "wo": p("enc.wo", rng.normal(0, 0.02, (r, d))),
            "ln1_g": p("enc.ln1_g", np.ones(d)), "ln1_b": p("enc.ln1_b", np.zeros(d)),
            "ff1": p("enc.ff1", rng.normal(0, 0.02, (d, h))), "ff1_b": p("enc.ff1_b", np.zeros(h)),
            "ff2": p("enc.ff2", rng.normal(0, 0.02, (h, d))), "ff2_b": p("enc.ff2_b", np.zeros(d)),
            "ln2_g": p("enc.ln2_g", np.ones(d)), "ln2_b": p("enc.ln2_b", np.zeros(d)),
            # small-init low-rank output: label attention starts near-neutral
            # (h' ~ h) instead of flooding the context with untrained vectors
            "out1": p("enc.out1", rng.normal(0, 0.02, (d, 4))),
            "out2": p("enc.out2", rng.normal(0, 0.02, (4, d))),
        }

        # autoregressive prompt network over the m slots
        self.net = {
            "self_wq": p("net.self_wq", rng.normal(0, 0.02, (d, r))),
            "self_wk": p("net.self_wk", rng.normal(0, 0.02, (d, r))),
            "self_wv": p("net.self_wv", rng.normal(0, 0.02, (d, r))),
            "self_wo": p("net.self_wo", rng.normal(0, 0.02, (r, d))),
            "ln1_g": p("net.ln1_g", np.ones(d)), "ln1_b": p("net.ln1_b", np.zeros(d)),
            "cross_wq": p("net.cross_wq", rng.normal(0, 0.02, (d, r))),
            "cross_wk": p("net.cross_wk", rng.normal(0, 0.02, (d, r))),
            "cross_wv": p("net.cross_wv", rng.normal(0, 0.02, (d, r))),
            "cross_wo": p("net.cross_wo", rng.normal(0, 0.02, (r, d))),
            "lnc_g": p("net.lnc_g", np.ones(d)), "lnc_b": p("net.lnc_b", np.zeros(d)),
            "ff1": p("net.ff1", rng.normal(0, 0.02, (d, h))), "ff1_b": p("net.ff1_b", np.zeros(h)),
            "ff2": p("net.ff2", rng.normal(0, 0.02, (h, d))), "ff2_b": p("net.ff2_b", np.zeros(d)),
            "ln2_g": p("net.ln2_g", np.ones(d)), "ln2_b": p("net.ln2_b", np.zeros(d)),
            "lnf_g": p("net.lnf_g", np.ones(d)), "lnf_b": p("net.lnf_b", np.zeros(d)),
            "kv_p1": p("net.kv_p1", rng.normal(0, 0.02, (d, cfg.kv_rank))),
            "kv_p2": p("net.kv_p2", rng.normal(0, 0.02, (cfg.kv_rank, 2 * cfg.n_lm_layers * d))),
            "kv_b": p("net.kv_b", np.zeros(2 * cfg.n_lm_layers * d)),
        }
        self._slot_mask = Tensor(_slot_causal_mask(cfg.m))

    # -- bookkeeping ---------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def param_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def load_state(self, named: dict) -> None:
        for name, t in self.params.items():
            t.data[...] = named[name]

    # -- submodule forwards ----------------------------------------------------

    def encode_label_definitions(self) -> Tensor:
        """[m, d] matrix of encoded label-definition representations."""
        rows = []
        e = self.enc
        inv = 1.0 / math.sqrt(self.cfg.attn_rank)
        for ids in self.def_ids:
            x = tc.embedding_gather(self.lm.tok_emb, ids)  # frozen table
            q = tc.matmul(x, e["wq"])
            k = tc.matmul(x, e["wk"])
            v = tc.matmul(x, e["wv"])
            att = tc.matmul(tc.softmax(tc.scale(tc.matmul(q, tc.transpose(k)), inv), axis=-1), v)
            x = tc.layer_norm(tc.add(x, tc.matmul(att, e["wo"])), e["ln1_g"], e["ln1_b"])
            ff = tc.add(tc.matmul(tc.gelu(tc.add(tc.matmul(x, e["ff1"]), e["ff1_b"])), e["ff2"]), e["ff2_b"])
            x = tc.layer_norm(tc.add(x, ff), e["ln2_g"], e["ln2_b"])
            rows.append(tc.mean_pool(x, axis=0))
        stacked = tc.concat([tc.reshape(r_, (1, self.cfg.d_model)) for r_ in rows], axis=0)
        return tc.matmul(tc.matmul(stacked, e["out1"]), e["out2"])

    def claim_aware_context(self, h_fc: Tensor) -> Tensor:
        if self.cfg.no_label_attention:
            return h_fc
        C = self.encode_label_definitions()
        return label_attention(h_fc, C, self.W_c)

    def prompt_network(self, h_ctx: Tensor) -> PrefixActivations:
        """Run the slots through self-attention, cross-attention and the KV head.

        Each layer's base key/value block comes from the frozen LM's own
        ln1 + qkv projection applied to the slot outputs, so the slots act
        as pseudo-tokens the LM natively reads (keyword-initialized slots
        inject keyword semantics un-scrambled); a shared trainable low-rank
        map adds a learned per-layer delta on top.
        """
        cfg = self.cfg
        n = self.net
        inv = 1.0 / math.sqrt(cfg.attn_rank)
        x = self.D_p
        # causal self-attention over the m prefix slots
        q = tc.matmul(x, n["self_wq"])
        k = tc.matmul(x, n["self_wk"])
        v = tc.matmul(x, n["self_wv"])
        scores = tc.add(tc.scale(tc.matmul(q, tc.transpose(k)), inv), self._slot_mask)
        att = tc.matmul(tc.softmax(scores, axis=-1), v)
        x = tc.layer_norm(tc.add(x, tc.matmul(att, n["self_wo"])), n["ln1_g"], n["ln1_b"])
        # cross-attention from slots to the claim-aware context
        qc = tc.matmul(x, n["cross_wq"])
        kc = tc.matmul(h_ctx, n["cross_wk"])
        vc = tc.matmul(h_ctx, n["cross_wv"])
        cross = tc.matmul(tc.softmax(tc.scale(tc.matmul(qc, tc.transpose(kc)), inv), axis=-1), vc)
        x = tc.layer_norm(tc.add(x, tc.matmul(cross, n["cross_wo"])), n["lnc_g"], n["lnc_b"])
        ff = tc.add(tc.matmul(tc.gelu(tc.add(tc.matmul(x, n["ff1"]), n["ff1_b"])), n["ff2"]), n["ff2_b"])
        x = tc.layer_norm(tc.add(x, ff), n["ln2_g"], n["ln2_b"])
        # per-slot, per-layer key/value blocks: frozen pseudo-token base + delta
        z = tc.add(tc.matmul(tc.matmul(x, n["kv_p1"]), n["kv_p2"]), n["kv_b"])  # [m, 2*L*d]
        keys, values = [], []
        d = cfg.d_model
        for layer in range(cfg.n_lm_layers):
            ly = self.lm.layers[layer]
            a = tc.layer_norm(x, ly["ln1_g"], ly["ln1_b"])
            qkv = tc.add(tc.matmul(a, ly["w_qkv"]), ly["b_qkv"])
            keys.append(tc.add(tc.narrow(qkv, 1, d, d),
                               tc.narrow(z, 1, layer * 2 * d, d)))
            values.append(tc.add(tc.narrow(qkv, 1, 2 * d, d),
                                 tc.narrow(z, 1, layer * 2 * d + d, d)))
        return PrefixActivations(keys, values, cfg.n_lm_layers, d)

    def context_hidden(self, ctx_ids: np.ndarray) -> Tensor:
        """Frozen-LM encoding of [fact <sep> claims]; constant w.r.t. training."""
        _, final = self.lm.forward(ctx_ids)
        return final

    def prefix_for_context(self, ctx_ids: np.ndarray) -> PrefixActivations:
        h_fc = self.context_hidden(ctx_ids)
        return self.prompt_network(self.claim_aware_context(h_fc))


def _slot_causal_mask(m: int) -> np.ndarray:
    mask = np.zeros((m, m))
    iu = np.triu_indices(m, k=1)
    mask[iu] = NEG_INF
    return mask


def context_ids(record, tok: Tokenizer) -> np.ndarray:
    return np.asarray(tok.encode(record.fact) + [SEP] + tok.encode(record.claims), dtype=np.int64)


# ---------------------------------------------------------------------------
# Training


def prompt_loss(encoder: PromptEncoder, record, tok: Tokenizer) -> Tensor:
    """Next-token loss over the court-view span only, with prefix injection."""
    from .corpus import encode_case
    seq, view_mask = encode_case(record, tok)
    prefix = encoder.prefix_for_context(context_ids(record, tok))
    return encoder.lm.sequence_loss(seq, view_mask, prefix=prefix)


def mean_prompt_loss(encoder: PromptEncoder, records, tok: Tokenizer) -> float:
    return sum(prompt_loss(encoder, r, tok).item() for r in records) / len(records)


def train_prompt(train_records, valid_records, lm: TransformerLM, tok: Tokenizer,
                 catalog: ClaimCatalog, cfg: PromptConfig, seed: int, epochs: int,
                 lr: float, batch_size: int = 8, phi_cl: list | None = None,
                 log=None):
    """Train the prompt encoder against a frozen LM; returns (encoder, history).

    Aborts if the LM parameters change during training (freezing contract).
    """
    lm.set_trainable(False)
    lm_hash_before = lm.fingerprint()
    encoder = PromptEncoder(cfg, lm, tok, catalog, seed=seed, phi_cl=phi_cl)
    state = tc.AdamState(list(encoder.params.values()), lr=lr)
    rng = np.random.default_rng(seed + 13)
    order = np.arange(len(train_records))
    history = []
    for epoch in range(epochs):
        rng.shuffle(order)
        running = 0.0
        pending = 0
        for idx in order:
            with tc.Tape() as tape:
                loss = tc.scale(prompt_loss(encoder, train_records[idx], tok), 1.0 / batch_size)
            tc.assert_finite(loss, "prompt loss")
            tape.backward(loss)
            running += loss.item() * batch_size
            pending += 1
            if pending == batch_size:
                tc.optimizer_step(state)
                pending = 0
        if pending:
            tc.optimizer_step(state)
        train_loss = running / len(train_records)
        valid_loss = mean_prompt_loss(encoder, valid_records, tok) if valid_records else float("nan")
        history.append((epoch, train_loss, valid_loss))
        if log:
            log(f"prompt epoch {epoch}: train {train_loss:.4f} valid {valid_loss:.4f}")
    if lm.fingerprint() != lm_hash_before:
        raise RuntimeError("LM parameters changed during prompt training; freezing contract broken")
    return encoder, history


def save_prompt(path, encoder: PromptEncoder, extra_meta: dict | None = None) -> None:
    meta = encoder.cfg.to_meta()
    meta["kind"] = "prompt"
    meta["lm_fingerprint"] = encoder.lm.fingerprint()
    if extra_meta:
        meta.update(extra_meta)
    tc.save_checkpoint(path, encoder.params, meta)


def load_prompt(path, lm: TransformerLM, tok: Tokenizer, catalog: ClaimCatalog) -> PromptEncoder:
    named, meta = tc.load_checkpoint(path)
    if meta.get("kind") != "prompt":
        raise tc.CheckpointError(f"{path}: expected a prompt checkpoint, got kind={meta.get('kind')!r}")
    cfg = PromptConfig.from_meta(meta)
    encoder = PromptEncoder(cfg, lm, tok, catalog, seed=0)
    encoder.load_state(named)
    return encoder
