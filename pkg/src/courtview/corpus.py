"""Synthetic civil-case corpus: generation, labels, tokenization, splits.

Each case is a loan dispute with a fact description, plaintiff claims and a
court view, over four claim labels (principal, interest, spousal joint
debt, guarantee liability). Claim labels are ground-truthed by keyword
matching on the plaintiff claims; the generator plants exactly the active
labels' keywords there, so `extract_labels(claims) == labels` holds for
every generated case.

Court views open with ~50 tokens of preamble (scaled by `scale`) and then
respond to each active claim with a clause of the form "regarding the
<label> claim the court holds ...", in catalog order, followed by a short
closing. Facts carry supporting sentences for active labels plus decoy
sentences with near-miss vocabulary (curiosity/principle/wedding/
guaranteed) tied to inactive labels, which is what makes claim response
non-trivial for a small generator.

Keyword matching is case-sensitive, exact, whitespace-token based; a
multi-word keyword matches as a contiguous token phrase.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass

import numpy as np

UNK, SEP, EOS = 0, 1, 2
SPECIAL_TOKENS = ("<unk>", "<sep>", "<eos>")

# §-style length bounds at scale 1.0 (min, max) in whitespace tokens.
FACT_BOUNDS = (20, 400)
CLAIM_BOUNDS = (20, 200)
VIEW_BOUNDS = (20, 400)


@dataclass(frozen=True)
class ClaimLabel:
    name: str
    keywords: tuple
    definition: str


@dataclass(frozen=True)
class ClaimCatalog:
    labels: tuple

    def __post_init__(self):
        if not self.labels:
            raise ValueError("catalog needs at least one label")
        seen = set()
        for lab in self.labels:
            kws = frozenset(lab.keywords)
            if not kws:
                raise ValueError(f"label {lab.name} has no keywords")
            if kws in seen:
                raise ValueError("keyword sets must be mutually distinct")
            seen.add(kws)

    @property
    def m(self) -> int:
        return len(self.labels)

    @property
    def names(self) -> list:
        return [lab.name for lab in self.labels]


DEFAULT_CATALOG = ClaimCatalog((
    ClaimLabel(
        "principal",
        ("principal", "debt", "borrower"),
        "the claim that the defendant shall repay the principal sum advanced under the loan in full",
    ),
    ClaimLabel(
        "interest",
        ("interest", "interest rate", "bank"),
        "the claim that the defendant shall pay the interest accrued on the sum at the agreed interest rate",
    ),
    ClaimLabel(
        "spousal_joint_debt",
        ("spouse", "joint debt", "property division", "marriage"),
        "the claim that the spouse of the defendant shall bear joint liability for obligations formed during the marriage",
    ),
    ClaimLabel(
        "guarantee_liability",
        ("guarantor", "guarantee", "guaranty contract"),
        "the claim that the guarantor shall perform the guarantee liability undertaken in the guaranty contract",
    ),
))

# Mix over 1..4 active labels per case; mean 2.13 claim labels.
DEFAULT_CLAIM_MIX = (0.30, 0.38, 0.21, 0.11)


@dataclass
class CaseRecord:
    case_id: str
    fact: str
    claims: str
    court_view: str
    labels: np.ndarray  # bool [m]

    def lengths(self):
        return (len(self.fact.split()), len(self.claims.split()), len(self.court_view.split()))


# ---------------------------------------------------------------------------
# Label extraction and keyword statistics


def _phrase_count(tokens: list, phrase: list) -> int:
    n, k = len(tokens), len(phrase)
    if k == 0 or k > n:
        return 0
    return sum(1 for i in range(n - k + 1) if tokens[i:i + k] == phrase)


def extract_labels(claims, catalog: ClaimCatalog = DEFAULT_CATALOG) -> np.ndarray:
    """Label i active iff any keyword of label i occurs (contiguously) in the claims."""
    tokens = claims.split() if isinstance(claims, str) else list(claims)
    out = np.zeros(catalog.m, dtype=bool)
    for i, lab in enumerate(catalog.labels):
        for kw in lab.keywords:
            if _phrase_count(tokens, kw.split()) > 0:
                out[i] = True
                break
    return out


def keyword_frequency(records, catalog: ClaimCatalog = DEFAULT_CATALOG) -> list:
    """Per label: keyword occurrence counts over training claims, normalized to sum 1.

    All-zero counts fall back to uniform weights.
    """
    if not records:
        raise ValueError("keyword_frequency needs a nonempty training split")
    claim_tokens = [r.claims.split() for r in records]
    out = []
    for lab in catalog.labels:
        counts = np.zeros(len(lab.keywords))
        for j, kw in enumerate(lab.keywords):
            phrase = kw.split()
            counts[j] = sum(_phrase_count(toks, phrase) for toks in claim_tokens)
        total = counts.sum()
        if total == 0:
            out.append(np.full(len(lab.keywords), 1.0 / len(lab.keywords)))
        else:
            out.append(counts / total)
    return out


# ---------------------------------------------------------------------------
# Template pools

_NAMES = ["chen", "wang", "li", "zhang", "liu", "yang", "zhao", "huang",
          "zhou", "wu", "xu", "sun", "ma", "zhu", "lin", "guo"]
_AMOUNTS = ["8000", "12000", "20000", "30000", "45000", "50000", "60000",
            "75000", "80000", "96000", "120000", "150000"]
_RATES = ["four", "five", "six", "eight", "nine", "twelve"]
_MONTHS = ["january", "march", "april", "june", "july", "september", "october", "december"]
_YEARS = ["2017", "2018", "2019", "2020", "2021"]

_FACT_OPENERS = [
    "in {month} {year} the defendant {dname} borrowed {amount} yuan from the plaintiff {pname} and issued a written receipt",
    "the plaintiff {pname} delivered {amount} yuan to the defendant {dname} in {month} {year} as recorded in a signed receipt",
]

_FACT_SUPPORT = {
    "principal": [
        "despite repeated demands the defendant has not returned the sum and the whole amount remains unpaid",
        "the defendant repaid nothing and the full sum advanced by the plaintiff is still outstanding today",
    ],
    "interest": [
        "the receipt records that interest accrues monthly at a rate of {rate} percent agreed by both parties",
        "both parties agreed in writing that interest would run at {rate} percent each month until repayment",
    ],
    "spousal_joint_debt": [
        "the defendant married {sname} in {year} and the borrowed money was spent on the common life of the family",
        "during the marriage of the defendant and {sname} the money was used for the household of the couple",
    ],
    "guarantee_liability": [
        "{gname} signed the same receipt as guarantor and undertook responsibility should the defendant fail to perform",
        "at the time of lending {gname} acted as guarantor and promised in writing to answer for the defendant",
    ],
}

# Near-miss decoys keyed by the label they imitate; sampled for inactive labels.
_FACT_DECOYS = {
    "principal": [
        "the defendant said that personal principle prevented him from signing any further documents for the plaintiff",
    ],
    "interest": [
        "the defendant often visited the local bank branch out of curiosity about its lending business",
    ],
    "spousal_joint_debt": [
        "the defendant attended the wedding of a mutual friend that year and spoke warmly of family matters",
    ],
    "guarantee_liability": [
        "the defendant once promised guaranteed delivery of goods to the plaintiff under a separate commercial arrangement",
    ],
}

_FACT_FILLERS = [
    "the two parties had known each other for many years and maintained frequent business contact",
    "the plaintiff produced transfer records testimony and the original receipt in support of these facts",
    "several attempts at settlement were made before this action and none of them succeeded",
    "the defendant acknowledged receipt of the money but raised objections concerning the conditions of repayment",
    "witnesses confirmed the delivery of the money and the account given by the plaintiff",
]

# Claims announce how many claims follow and enumerate them with ordinals:
# a small generator can copy the count (so clause omissions stay rare) while
# the label identity of each clause remains the hard part.
_CLAIMS_OPENERS = {
    1: "the plaintiff raises one claim in this action and respectfully asks the court to grant it",
    2: "the plaintiff raises two claims in this action and respectfully asks the court to grant them",
    3: "the plaintiff raises three claims in this action and respectfully asks the court to grant them",
    4: "the plaintiff raises four claims in this action and respectfully asks the court to grant them",
}
_ORDINALS = ["first", "second", "third", "fourth"]
_CLAIMS_CLOSER = "and that the defendant bear all costs of this action"

# Claim clause variants: (template, labels the introduced keywords trigger).
# A variant is eligible only if its triggered set is contained in the case's
# active set, which keeps extract_labels(claims) == labels by construction.
_CLAIM_VARIANTS = {
    "principal": [
        ("that the defendant repay the principal advanced under the loan without further delay", ("principal",)),
        ("that the defendant as borrower return the full sum originally delivered by the plaintiff", ("principal",)),
        ("that the outstanding debt of {amount} yuan be settled by the defendant in its entirety", ("principal",)),
        ("that the defendant return the principal sum recorded in the receipt", ("principal",)),
    ],
    "interest": [
        ("that the defendant pay interest on the sum at the agreed interest rate until actual repayment", ("interest",)),
        ("that the defendant pay interest calculated with reference to the standard bank lending rate", ("interest",)),
        ("that interest accrued from the day of delivery be paid by the defendant in full", ("interest",)),
        ("that the defendant pay the agreed interest together with the sums already due", ("interest",)),
    ],
    "spousal_joint_debt": [
        ("that {sname} as spouse of the defendant bear joint liability for obligations formed during the marriage", ("spousal_joint_debt",)),
        ("that the joint debt incurred within the marriage bind both the defendant and the spouse {sname}", ("spousal_joint_debt", "principal")),
        ("that the property division between the defendant and the spouse {sname} not defeat this recovery", ("spousal_joint_debt",)),
        ("that the spouse of the defendant answer equally for the obligations of the marriage", ("spousal_joint_debt",)),
    ],
    "guarantee_liability": [
        ("that {gname} the guarantor assume guarantee liability under the guaranty contract signed with the plaintiff", ("guarantee_liability",)),
        ("that {gname} honour the guarantee given at the time of lending as guarantor of the defendant", ("guarantee_liability",)),
        ("that the guarantor be ordered to perform the duties undertaken in the guaranty contract", ("guarantee_liability",)),
        ("that guarantee liability attach to the guarantor named in the receipt", ("guarantee_liability",)),
    ],
}

# Court views carry no case-specific slots: the entire case-dependence is
# which response clauses appear. Toy-scale generators then fail on claim
# response rather than on entity copying, and the judge stays reliable on
# generated text.
_VIEW_OPENERS = [
    "upon examination this court finds that the facts stated above are established by the receipt and the submitted records",
    "having reviewed the evidence presented at the hearing this court finds the facts described above to be proven",
]
_VIEW_EVIDENCE = "the transfer records the testimony and the receipt together confirm a lawful lending relation between the parties"
_VIEW_DISTRACTORS = [
    "mediation was attempted during the hearing and the curiosity of the parties produced no settlement",
    "the procedural requirements of notice and appearance were satisfied by both parties before the hearing",
    "the defendant spoke of principle and of guaranteed future dealings but offered no repayment plan",
]
_VIEW_RESPONSES = {
    "principal": "regarding the principal claim the court holds that the defendant shall repay the outstanding principal in full",
    "interest": "regarding the interest claim the court holds that the defendant shall pay the interest accrued at the agreed rate",
    "spousal_joint_debt": "regarding the spousal claim the court holds that the spouse of the defendant shall bear joint liability for the obligations of the marriage",
    "guarantee_liability": "regarding the guarantee claim the court holds that the guarantor shall perform the guarantee liability as undertaken",
}
_VIEW_CLOSING = "the remaining requests of the parties are dismissed and this judgment takes effect immediately"

RESPONSE_CUE = "regarding"


def scaled_bounds(scale: float):
    def sb(bounds):
        return (max(4, math.ceil(bounds[0] * scale)), math.ceil(bounds[1] * scale))
    return sb(FACT_BOUNDS), sb(CLAIM_BOUNDS), sb(VIEW_BOUNDS)


def generate_case(rng: random.Random, case_id: str, catalog: ClaimCatalog,
                  claim_mix, scale: float, forced_labels=None) -> CaseRecord:
    m = catalog.m
    names = catalog.names
    if forced_labels is not None:
        active = [i for i in range(m) if forced_labels[i]]
    else:
        n_active = rng.choices(range(1, m + 1), weights=claim_mix[:m])[0]
        active = sorted(rng.sample(range(m), n_active))
    active_names = [names[i] for i in active]

    slots = {
        "pname": rng.choice(_NAMES),
        "month": rng.choice(_MONTHS),
        "year": rng.choice(_YEARS),
        "amount": rng.choice(_AMOUNTS),
        "rate": rng.choice(_RATES),
    }
    slots["dname"] = rng.choice([n for n in _NAMES if n != slots["pname"]])
    slots["sname"] = rng.choice([n for n in _NAMES if n not in (slots["pname"], slots["dname"])])
    slots["gname"] = rng.choice([n for n in _NAMES if n not in (slots["pname"], slots["dname"], slots["sname"])])

    def fill(t):
        return t.format(**slots)

    fact_bounds, claim_bounds, view_bounds = scaled_bounds(scale)

    # fact: opener + active-label support + decoys for some inactive labels + fillers
    fact_parts = [fill(rng.choice(_FACT_OPENERS))]
    for name in active_names:
        fact_parts.append(fill(rng.choice(_FACT_SUPPORT[name])))
    inactive = [names[i] for i in range(m) if i not in active]
    rng.shuffle(inactive)
    for name in inactive[:rng.randint(1, 2)] if inactive else []:
        fact_parts.append(fill(rng.choice(_FACT_DECOYS[name])))
    fillers = list(_FACT_FILLERS)
    rng.shuffle(fillers)
    target_fact = rng.randint(max(fact_bounds[0], int(45 * scale)), max(fact_bounds[0] + 4, int(70 * scale)))
    for filler in fillers:
        if sum(len(p.split()) for p in fact_parts) >= target_fact:
            break
        fact_parts.append(filler)
    fact = " ".join(fact_parts)

    # claims: count-announcing opener + ordinal-enumerated clauses + closer
    claim_parts = [_CLAIMS_OPENERS[len(active_names)]]
    active_set = set(active_names)
    for pos, name in enumerate(active_names):
        eligible = [t for t, trig in _CLAIM_VARIANTS[name] if set(trig) <= active_set]
        claim_parts.append(_ORDINALS[pos] + " " + fill(rng.choice(eligible)))
    claim_parts.append(_CLAIMS_CLOSER)
    claims = " ".join(claim_parts)

    # view: ~50*scale-token generic preamble, response clause per active label, closing
    view_parts = [rng.choice(_VIEW_OPENERS), _VIEW_EVIDENCE, rng.choice(_VIEW_DISTRACTORS)]
    for name in active_names:
        view_parts.append(_VIEW_RESPONSES[name])
    view_parts.append(_VIEW_CLOSING)
    view = " ".join(view_parts)

    record = CaseRecord(
        case_id=case_id,
        fact=fact,
        claims=claims,
        court_view=view,
        labels=np.array([i in active for i in range(m)], dtype=bool),
    )
    lf, lc, lv = record.lengths()
    if not (fact_bounds[0] <= lf <= fact_bounds[1]
            and claim_bounds[0] <= lc <= claim_bounds[1]
            and view_bounds[0] <= lv <= view_bounds[1]):
        raise ValueError(
            f"templates produced out-of-bounds lengths (fact {lf}, claims {lc}, view {lv}) at scale {scale}")
    assert record.labels.any()
    return record


def generate_corpus(seed: int, n_cases: int, claim_mix=None, scale: float = 1.0,
                    catalog: ClaimCatalog = DEFAULT_CATALOG) -> list:
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    if scale < 0.2:
        raise ValueError("scale below 0.2 makes the length bounds infeasible for the templates")
    claim_mix = tuple(claim_mix) if claim_mix is not None else DEFAULT_CLAIM_MIX
    records = []
    for idx in range(n_cases):
        rng = random.Random(f"{seed}:{idx}")  # str seeds hash stably across platforms
        records.append(generate_case(rng, f"case-{seed}-{idx:06d}", catalog, claim_mix, scale))
    return records


def split_corpus(records, seed: int):
    """Disjoint, exhaustive 8:1:1 split (test and valid get floor(n/10) each)."""
    n = len(records)
    if n < 10:
        raise ValueError("corpus too small to split 8:1:1")
    order = list(range(n))
    random.Random(seed).shuffle(order)
    n_eval = n // 10
    test_idx = order[:n_eval]
    valid_idx = order[n_eval:2 * n_eval]
    train_idx = order[2 * n_eval:]
    return ([records[i] for i in train_idx],
            [records[i] for i in valid_idx],
            [records[i] for i in test_idx])


# ---------------------------------------------------------------------------
# Tokenizer


class Tokenizer:
    """Whitespace word tokenizer with reserved <unk>/<sep>/<eos> ids."""

    def __init__(self, words: list):
        self.words = list(words)
        self.vocab = list(SPECIAL_TOKENS) + self.words
        self.index = {w: i for i, w in enumerate(self.vocab)}

    @classmethod
    def build(cls, records) -> "Tokenizer":
        seen = set()
        for r in records:
            for field in (r.fact, r.claims, r.court_view):
                seen.update(field.split())
        seen -= set(SPECIAL_TOKENS)
        return cls(sorted(seen))

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> list:
        return [self.index.get(w, UNK) for w in text.split()]

    def decode(self, ids) -> str:
        return " ".join(self.vocab[i] for i in ids)

    def to_json(self) -> str:
        return json.dumps({"words": self.words})

    @classmethod
    def from_json(cls, blob: str) -> "Tokenizer":
        return cls(json.loads(blob)["words"])


def encode_case(record: CaseRecord, tok: Tokenizer):
    """Model sequence [f <sep> c <sep> v <eos>] plus the view-target mask.

    The mask selects next-token targets belonging to the court view (or the
    end token), i.e. the positions the prompt-encoder loss sums over.
    """
    f = tok.encode(record.fact)
    c = tok.encode(record.claims)
    v = tok.encode(record.court_view)
    seq = f + [SEP] + c + [SEP] + v + [EOS]
    view_start = len(f) + len(c) + 2  # index of first view token in seq
    mask = np.zeros(len(seq) - 1, dtype=bool)
    mask[view_start - 1:] = True  # targets seq[1:]: view tokens and <eos>
    return np.asarray(seq, dtype=np.int64), mask


def encode_prompt(record: CaseRecord, tok: Tokenizer) -> np.ndarray:
    """Decoding prompt [f <sep> c <sep>]."""
    return np.asarray(tok.encode(record.fact) + [SEP] + tok.encode(record.claims) + [SEP],
                      dtype=np.int64)


# ---------------------------------------------------------------------------
# File formats (line-delimited JSON records; JSON catalog)


def save_corpus(path, records) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps({
                "id": r.case_id,
                "fact": r.fact,
                "claims": r.claims,
                "court_view": r.court_view,
                "labels": [n for n, on in zip(DEFAULT_CATALOG.names, r.labels) if on],
            }, sort_keys=True) + "\n")


def load_corpus(path, catalog: ClaimCatalog = DEFAULT_CATALOG) -> list:
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            obj = json.loads(line)
            names = set(obj["labels"])
            labels = np.array([n in names for n in catalog.names], dtype=bool)
            records.append(CaseRecord(obj["id"], obj["fact"], obj["claims"], obj["court_view"], labels))
    return records


def save_catalog(path, catalog: ClaimCatalog) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump([{"name": lab.name, "keywords": list(lab.keywords), "definition": lab.definition}
                   for lab in catalog.labels], f, indent=2, sort_keys=True)


def load_catalog(path) -> ClaimCatalog:
    with open(path, encoding="utf-8") as f:
        items = json.load(f)
    return ClaimCatalog(tuple(ClaimLabel(o["name"], tuple(o["keywords"]), o["definition"]) for o in items))
