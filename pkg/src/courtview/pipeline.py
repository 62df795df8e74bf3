"""Experiment stages over a run directory.

Layout under a run dir:
    config.json                 frozen config snapshot (written by gen-data)
    corpus/cases.jsonl          full corpus; train/valid/test .jsonl splits
    corpus/catalog.json         claim label catalog
    corpus/tokenizer.json       vocabulary (built from the training split)
    ckpt/lm.ckpt                frozen language model
    ckpt/prompt_<variant>.ckpt  prompt encoders (kig, no_v, no_la)
    ckpt/navigator.ckpt         guidance classifier
    ckpt/judge.ckpt             evaluation classifier
    gen/views_<tag>.jsonl       generated court views (+ .meta.json)
    reports/report_<tag>.csv    metric reports (+ .txt)
    reports/ablate.csv          4-variant comparison
    reports/sweep_<param>.csv   sweep rows (+ .svg chart)

Every artifact embeds the config hash; stages refuse prerequisites from a
different configuration. Stage seeds derive from the master seed by stage
name.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from . import corpus as cp
from . import metrics as mt
from . import navigator as nv
from . import prompt_encoder as pe
from . import tensor as tc
from .config import RunConfig
from .lm import LmConfig, TransformerLM, load_lm, pretrain_lm, save_lm
from .navigator import GuidanceSchedule, PrefixClassifier

VARIANTS = ("kig", "no_v", "no_la", "no_n")
LAMBDA_GRID = (0.0, 2.0, 4.0, 6.0, 8.0, 10.0)
K_GRID = (0, 25, 50, 75, 100)


class DependencyError(RuntimeError):
    """A required stage artifact is missing; message names the prerequisite."""


class ValidationError(ValueError):
    """Configuration or artifact-compatibility failure."""


def _dirs(run_dir):
    run_dir = Path(run_dir)
    return {name: run_dir / name for name in ("corpus", "ckpt", "gen", "reports")}


def _require(path: Path, producer: str):
    if not path.exists():
        raise DependencyError(f"missing {path.name}; run `{producer}` first")
    return path


def _check_hash(meta_hash: str, cfg: RunConfig, what: str, force: bool = False):
    if meta_hash != cfg.config_hash():
        msg = f"{what} was produced under config hash {meta_hash}, current is {cfg.config_hash()}"
        if not force:
            raise ValidationError(msg + " (pass --force to override)")


# ---------------------------------------------------------------------------
# Stage: gen-data


def stage_gen_data(cfg: RunConfig, run_dir, log=print):
    d = _dirs(run_dir)
    for p in d.values():
        p.mkdir(parents=True, exist_ok=True)
    Path(run_dir, "config.json").write_text(cfg.to_json() + "\n", encoding="utf-8")
    records = cp.generate_corpus(cfg.derive_seed("corpus"), cfg.n_cases, scale=cfg.scale)
    train, valid, test = cp.split_corpus(records, cfg.derive_seed("split"))
    cp.save_corpus(d["corpus"] / "cases.jsonl", records)
    for name, part in (("train", train), ("valid", valid), ("test", test)):
        cp.save_corpus(d["corpus"] / f"{name}.jsonl", part)
    cp.save_catalog(d["corpus"] / "catalog.json", cp.DEFAULT_CATALOG)
    tok = cp.Tokenizer.build(train)
    (d["corpus"] / "tokenizer.json").write_text(tok.to_json() + "\n", encoding="utf-8")
    (d["corpus"] / "hash.txt").write_text(cfg.config_hash() + "\n", encoding="utf-8")
    log(f"gen-data: {len(records)} cases (train {len(train)} valid {len(valid)} test {len(test)}), "
        f"vocab {tok.vocab_size}")
    return records


def load_world(cfg: RunConfig, run_dir, force: bool = False):
    d = _dirs(run_dir)
    _require(d["corpus"] / "cases.jsonl", "gen-data")
    stored = (d["corpus"] / "hash.txt").read_text().strip()
    _check_hash(stored, cfg, "corpus", force)
    catalog = cp.load_catalog(d["corpus"] / "catalog.json")
    tok = cp.Tokenizer.from_json((d["corpus"] / "tokenizer.json").read_text())
    splits = {name: cp.load_corpus(d["corpus"] / f"{name}.jsonl", catalog)
              for name in ("train", "valid", "test")}
    return {"catalog": catalog, "tok": tok, **splits}


# ---------------------------------------------------------------------------
# Stage: pretrain-lm


def lm_config(cfg: RunConfig, vocab_size: int) -> LmConfig:
    return LmConfig(vocab_size=vocab_size, n_layers=cfg.lm_layers, d_model=cfg.lm_d_model,
                    n_heads=cfg.lm_heads, max_seq_len=cfg.lm_max_seq_len,
                    feedforward_mult=cfg.lm_ff_mult)


def stage_pretrain_lm(cfg: RunConfig, run_dir, log=print):
    d = _dirs(run_dir)
    world = load_world(cfg, run_dir)
    tok = world["tok"]
    train_seqs = [cp.encode_case(r, tok)[0] for r in world["train"]]
    valid_seqs = [cp.encode_case(r, tok)[0] for r in world["valid"]]
    model, history = pretrain_lm(
        train_seqs, lm_config(cfg, tok.vocab_size), seed=cfg.derive_seed("lm"),
        epochs=cfg.lm_epochs, lr=cfg.lm_lr, batch_size=cfg.lm_batch,
        valid_sequences=valid_seqs, log=log)
    save_lm(d["ckpt"] / "lm.ckpt", model, {"config_hash": cfg.config_hash()})
    with open(d["reports"] / "pretrain_history.csv", "w", encoding="utf-8") as f:
        f.write("epoch,train_loss,valid_loss\n")
        for epoch, tr, va in history:
            f.write(f"{epoch},{tr:.6f},{va:.6f}\n")
    log(f"pretrain-lm: {model.param_count()} parameters, "
        f"valid loss {history[-1][2]:.4f}")
    return model


def load_frozen_lm(cfg: RunConfig, run_dir, force: bool = False) -> TransformerLM:
    d = _dirs(run_dir)
    path = _require(d["ckpt"] / "lm.ckpt", "pretrain-lm")
    _, meta = tc.load_checkpoint(path)
    _check_hash(meta.get("config_hash", ""), cfg, "lm checkpoint", force)
    model = load_lm(path)
    model.set_trainable(False)
    return model


# ---------------------------------------------------------------------------
# Stages: train-prompt / train-navigator / train-eval-classifier


def variant_name(cfg: RunConfig) -> str:
    if cfg.no_keyword_init:
        return "no_v"
    if cfg.no_label_attention:
        return "no_la"
    return "kig"


def prompt_config(cfg: RunConfig, catalog) -> pe.PromptConfig:
    return pe.PromptConfig(
        m=catalog.m, d_model=cfg.lm_d_model, n_lm_layers=cfg.lm_layers,
        attn_rank=cfg.prompt_attn_rank, ff_hidden=cfg.prompt_ff_hidden,
        kv_rank=cfg.prompt_kv_rank, no_keyword_init=cfg.no_keyword_init,
        no_label_attention=cfg.no_label_attention)


def nav_config(cfg: RunConfig, vocab_size: int) -> LmConfig:
    return LmConfig(vocab_size=vocab_size, n_layers=cfg.nav_layers, d_model=cfg.nav_d_model,
                    n_heads=cfg.nav_heads, max_seq_len=cfg.max_view_len + 8)


def judge_config(cfg: RunConfig, vocab_size: int) -> LmConfig:
    return LmConfig(vocab_size=vocab_size, n_layers=cfg.judge_layers, d_model=cfg.judge_d_model,
                    n_heads=cfg.judge_heads, max_seq_len=cfg.max_view_len + 8)


def report_parameter_budget(cfg: RunConfig, run_dir, log=print) -> float:
    """Print the trainable/LM parameter ratio; returns the ratio."""
    world = load_world(cfg, run_dir)
    lm = load_frozen_lm(cfg, run_dir)
    enc = pe.PromptEncoder(prompt_config(cfg, world["catalog"]), lm, world["tok"],
                           world["catalog"], seed=0)
    nav_clf = PrefixClassifier(nav_config(cfg, world["tok"].vocab_size), world["catalog"].m, seed=0)
    trainable = enc.param_count() + nav_clf.param_count()
    ratio = trainable / lm.param_count()
    log(f"parameter budget: prompt encoder {enc.param_count()} + navigator {nav_clf.param_count()} "
        f"= {trainable} trainable vs LM {lm.param_count()} ({100 * ratio:.1f}%)")
    return ratio


def stage_train_prompt(cfg: RunConfig, run_dir, log=print):
    d = _dirs(run_dir)
    world = load_world(cfg, run_dir)
    lm = load_frozen_lm(cfg, run_dir)
    report_parameter_budget(cfg, run_dir, log=log)
    variant = variant_name(cfg)
    phi = cp.keyword_frequency(world["train"], world["catalog"])
    encoder, history = pe.train_prompt(
        world["train"], world["valid"], lm, world["tok"], world["catalog"],
        prompt_config(cfg, world["catalog"]), seed=cfg.derive_seed(f"prompt-{variant}"),
        epochs=cfg.prompt_epochs, lr=cfg.prompt_lr, batch_size=cfg.prompt_batch,
        phi_cl=phi, log=log)
    pe.save_prompt(d["ckpt"] / f"prompt_{variant}.ckpt", encoder,
                   {"config_hash": cfg.config_hash(), "variant": variant})
    log(f"train-prompt[{variant}]: valid view loss {history[-1][2]:.4f}")
    return encoder


def stage_train_navigator(cfg: RunConfig, run_dir, log=print):
    d = _dirs(run_dir)
    world = load_world(cfg, run_dir)
    report_parameter_budget(cfg, run_dir, log=log)
    clf, _ = nv.train_classifier(
        world["train"], world["tok"], nav_config(cfg, world["tok"].vocab_size),
        m=world["catalog"].m, seed=cfg.derive_seed("navigator"),
        epochs=cfg.nav_epochs, lr=cfg.nav_lr, batch_size=cfg.nav_batch, log=log)
    mif = nv.classifier_micro_f1(clf, world["test"], world["tok"])
    nv.save_classifier(d["ckpt"] / "navigator.ckpt", clf,
                       {"config_hash": cfg.config_hash(), "role": "navigator",
                        "heldout_micro_f1": f"{mif:.6f}"})
    log(f"train-navigator: held-out full-view micro-F1 {mif:.4f}")
    return clf, mif


def stage_train_judge(cfg: RunConfig, run_dir, log=print):
    d = _dirs(run_dir)
    world = load_world(cfg, run_dir)
    clf, _ = nv.train_classifier(
        world["train"], world["tok"], judge_config(cfg, world["tok"].vocab_size),
        m=world["catalog"].m, seed=cfg.derive_seed("judge"),
        epochs=cfg.judge_epochs, lr=cfg.judge_lr, batch_size=cfg.judge_batch, log=log)
    mif = nv.classifier_micro_f1(clf, world["test"], world["tok"])
    nv.save_classifier(d["ckpt"] / "judge.ckpt", clf,
                       {"config_hash": cfg.config_hash(), "role": "judge",
                        "heldout_micro_f1": f"{mif:.6f}"})
    log(f"train-eval-classifier: held-out full-view micro-F1 {mif:.4f}")
    return clf, mif


def _load_classifier(cfg: RunConfig, run_dir, name: str, producer: str, force=False):
    d = _dirs(run_dir)
    path = _require(d["ckpt"] / f"{name}.ckpt", producer)
    _, meta = tc.load_checkpoint(path)
    _check_hash(meta.get("config_hash", ""), cfg, f"{name} checkpoint", force)
    return nv.load_classifier(path), meta


# ---------------------------------------------------------------------------
# Stage: generate


def guidance_schedule(cfg: RunConfig) -> GuidanceSchedule:
    return GuidanceSchedule(lam=cfg.lam, k=cfg.effective_k(), mu=cfg.mu, top_n=cfg.top_n)


def flags_string(cfg: RunConfig, variant: str) -> str:
    parts = [variant]
    if not cfg.no_navigator:
        parts.append(f"lam={cfg.lam:g}")
        parts.append(f"k={cfg.effective_k()}")
    return ";".join(parts)


class Generator:
    """Loaded model bundle for decoding one run's views."""

    def __init__(self, cfg: RunConfig, run_dir, variant: str | None = None, force=False):
        self.cfg = cfg
        world = load_world(cfg, run_dir, force)
        self.tok = world["tok"]
        self.catalog = world["catalog"]
        self.test = world["test"]
        self.lm = load_frozen_lm(cfg, run_dir, force)
        variant = variant or variant_name(cfg)
        d = _dirs(run_dir)
        path = _require(d["ckpt"] / f"prompt_{variant}.ckpt", "train-prompt")
        _, meta = tc.load_checkpoint(path)
        _check_hash(meta.get("config_hash", ""), cfg, "prompt checkpoint", force)
        self.encoder = pe.load_prompt(path, self.lm, self.tok, self.catalog)
        self.variant = variant
        if cfg.no_navigator:
            self.navigator = None
        else:
            self.navigator, _ = _load_classifier(cfg, run_dir, "navigator", "train-navigator", force)
        self.sched = guidance_schedule(cfg)
        view_room = cfg.lm_max_seq_len - self.catalog.m - 1
        self.max_view = min(int(round(cfg.max_view_len * cfg.scale)), view_room)

    def generate_case(self, record) -> list:
        true_labels = cp.extract_labels(record.claims, self.catalog)
        prompt_ids = cp.encode_prompt(record, self.tok)
        prefix = self.encoder.prefix_for_context(pe.context_ids(record, self.tok))
        max_view = min(self.max_view,
                       self.cfg.lm_max_seq_len - self.catalog.m - len(prompt_ids) - 1)
        return nv.guided_generate(
            self.lm, prompt_ids, prefix, self.navigator, true_labels, self.sched,
            eos_id=cp.EOS, max_view_len=max_view,
            use_navigator=not self.cfg.no_navigator, space=self.cfg.guidance_space)


_WORKER: dict = {}


def _worker_init(cfg_dict, run_dir, variant):
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    _WORKER["gen"] = Generator(RunConfig.from_dict(cfg_dict), run_dir, variant)


def _worker_generate(idx):
    gen = _WORKER["gen"]
    return idx, gen.generate_case(gen.test[idx])


def stage_generate(cfg: RunConfig, run_dir, tag: str | None = None,
                   variant: str | None = None, jobs: int | None = None,
                   log=print, force=False):
    from dataclasses import asdict
    d = _dirs(run_dir)
    variant = variant or variant_name(cfg)
    tag = tag or variant
    jobs = jobs or cfg.jobs
    gen = Generator(cfg, run_dir, variant, force)
    n = len(gen.test)
    if jobs > 1 and n > 8:
        import multiprocessing as mp
        with mp.get_context("fork").Pool(jobs, initializer=_worker_init,
                                         initargs=(asdict(cfg), str(run_dir), variant)) as pool:
            results = dict(pool.map(_worker_generate, range(n), chunksize=8))
        views = [results[i] for i in range(n)]
    else:
        views = [gen.generate_case(r) for r in gen.test]
    out = d["gen"] / f"views_{tag}.jsonl"
    with open(out, "w", encoding="utf-8") as f:
        for record, ids in zip(gen.test, views):
            f.write(json.dumps({"id": record.case_id, "tokens": [int(t) for t in ids],
                                "text": gen.tok.decode(ids)}, sort_keys=True) + "\n")
    meta = {
        "config_hash": cfg.config_hash(), "variant": variant, "tag": tag,
        "seed": cfg.seed, "flags": flags_string(cfg, variant),
        "lm_fingerprint": gen.lm.fingerprint()[:12],
        "prompt_fingerprint": tc.params_fingerprint(gen.encoder.params)[:12],
    }
    (d["gen"] / f"views_{tag}.meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log(f"generate[{tag}]: {n} views -> {out.name}")
    return views


# ---------------------------------------------------------------------------
# Stage: evaluate


def stage_evaluate(cfg: RunConfig, run_dir, tag: str, log=print, force=False) -> mt.MetricReport:
    d = _dirs(run_dir)
    world = load_world(cfg, run_dir, force)
    tok, catalog = world["tok"], world["catalog"]
    gen_path = _require(d["gen"] / f"views_{tag}.jsonl", "generate")
    meta = json.loads((d["gen"] / f"views_{tag}.meta.json").read_text())
    _check_hash(meta.get("config_hash", ""), cfg, "generation artifact", force)
    judge, judge_meta = _load_classifier(cfg, run_dir, "judge", "train-eval-classifier", force)

    rows = [json.loads(line) for line in open(gen_path, encoding="utf-8")]
    test = world["test"]
    if len(rows) != len(test):
        raise ValidationError(f"expected {len(test)} generations, found {len(rows)}")

    gate_mif = float(judge_meta.get("heldout_micro_f1",
                                    nv.classifier_micro_f1(judge, test, tok)))
    hyps = [row["text"].split() for row in rows]
    refs = [r.court_view.split() for r in test]
    preds = np.stack([judge.predict(row["tokens"]) if row["tokens"]
                      else np.zeros(catalog.m, dtype=bool) for row in rows])
    golds = np.stack([r.labels for r in test])
    report = mt.evaluate_generations(hyps, refs, preds, golds, metadata={
        "seed": cfg.seed, "flags": meta.get("flags", tag), "tag": tag,
        "config_hash": cfg.config_hash(),
        "judge_gate_micro_f1": f"{gate_mif:.6f}",
        "judge_reliable": str(gate_mif >= 0.85),
        "lm_fingerprint": meta.get("lm_fingerprint", ""),
        "prompt_fingerprint": meta.get("prompt_fingerprint", ""),
    })
    (d["reports"] / f"report_{tag}.csv").write_text(
        mt.csv_header() + "\n" + report.csv_row() + "\n", encoding="utf-8")
    (d["reports"] / f"report_{tag}.txt").write_text(report.to_text(), encoding="utf-8")
    if gate_mif < 0.85:
        log(f"evaluate[{tag}]: WARNING judge micro-F1 {gate_mif:.3f} < 0.85; report flagged unreliable")
    log(f"evaluate[{tag}]: B-N {report.bn * 100:.2f} R-L {report.rl * 100:.2f} "
        f"Mi-F {report.mif * 100:.2f} Ma-F {report.maf * 100:.2f}")
    return report


# ---------------------------------------------------------------------------
# Composite stages: ablate and sweep


def ensure_artifacts(cfg: RunConfig, run_dir, variants=("kig",), log=print):
    """Build any missing stage artifacts for the given prompt variants."""
    d = _dirs(run_dir)
    if not (d["corpus"] / "cases.jsonl").exists():
        stage_gen_data(cfg, run_dir, log=log)
    if not (d["ckpt"] / "lm.ckpt").exists():
        stage_pretrain_lm(cfg, run_dir, log=log)
    for variant in variants:
        if not (d["ckpt"] / f"prompt_{variant}.ckpt").exists():
            flags = {"no_v": {"no_keyword_init": True}, "no_la": {"no_label_attention": True}}
            from dataclasses import replace
            stage_train_prompt(replace(cfg, **flags.get(variant, {})), run_dir, log=log)
    if not (d["ckpt"] / "navigator.ckpt").exists():
        stage_train_navigator(cfg, run_dir, log=log)
    if not (d["ckpt"] / "judge.ckpt").exists():
        stage_train_judge(cfg, run_dir, log=log)


def stage_ablate(cfg: RunConfig, run_dir, jobs: int | None = None, log=print) -> dict:
    """Run the four variants and emit a comparison table; returns tag -> report."""
    from dataclasses import replace
    d = _dirs(run_dir)
    ensure_artifacts(cfg, run_dir, variants=("kig", "no_v", "no_la"), log=log)
    runs = {
        "kig": (replace(cfg), "kig"),
        "no_v": (replace(cfg, no_keyword_init=True), "no_v"),
        "no_la": (replace(cfg, no_label_attention=True), "no_la"),
        "no_n": (replace(cfg, no_navigator=True), "kig"),
    }
    reports = {}
    for tag, (variant_cfg, prompt_variant) in runs.items():
        stage_generate(variant_cfg, run_dir, tag=tag, variant=prompt_variant,
                       jobs=jobs, log=log)
        reports[tag] = stage_evaluate(variant_cfg, run_dir, tag, log=log)
    with open(d["reports"] / "ablate.csv", "w", encoding="utf-8") as f:
        f.write("variant," + ",".join(mt.CSV_COLUMNS[:10]) + "\n")
        for tag in VARIANTS:
            rep = reports[tag]
            f.write(tag + "," + ",".join(f"{rep.scores()[k]:.6f}" for k in mt.CSV_COLUMNS[:10]) + "\n")
    log("ablate: wrote reports/ablate.csv")
    return reports


def stage_sweep(cfg: RunConfig, run_dir, param: str, jobs: int | None = None,
                log=print) -> list:
    """Sweep lambda or k; emits CSV rows plus an SVG trend chart."""
    from dataclasses import replace
    d = _dirs(run_dir)
    ensure_artifacts(cfg, run_dir, variants=("kig",), log=log)
    if param == "lambda":
        values = LAMBDA_GRID
        make = lambda v: replace(cfg, lam=float(v))
    elif param == "k":
        values = K_GRID
        make = lambda v: replace(cfg, k=int(v))
    else:
        raise ValidationError(f"unknown sweep parameter {param!r} (expected 'lambda' or 'k')")
    rows = []
    for v in values:
        vcfg = make(v)
        tag = f"sweep_{param}_{v:g}"
        stage_generate(vcfg, run_dir, tag=tag, variant="kig", jobs=jobs, log=log)
        rows.append((v, stage_evaluate(vcfg, run_dir, tag, log=log)))
    out = d["reports"] / f"sweep_{param}.csv"
    with open(out, "w", encoding="utf-8") as f:
        f.write(param + "," + ",".join(mt.CSV_COLUMNS[:10]) + "\n")
        for v, rep in rows:
            f.write(f"{v:g}," + ",".join(f"{rep.scores()[k]:.6f}" for k in mt.CSV_COLUMNS[:10]) + "\n")
    mt.svg_line_chart(
        d["reports"] / f"sweep_{param}.svg",
        [v for v, _ in rows],
        {"Ma-F": [rep.maf * 100 for _, rep in rows],
         "B-N": [rep.bn * 100 for _, rep in rows]},
        f"{param} sweep", param, "score (x100)")
    log(f"sweep[{param}]: wrote {out.name}")
    return rows
