"""Neuroimaging-mention detection, preference-pair construction and the
mixed preference objective."""

from __future__ import annotations

import json
import math
import random
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .backend import ForkObservation
from .cohort import LabelValue


class PreferenceError(ValueError):
    pass


@dataclass(frozen=True)
class MentionLexicon:
    """Case-insensitive patterns. ``term*`` matches the term followed by any
    word characters; other terms must match whole words."""

    terms: tuple[str, ...]
    version: str = "default-1"

    def __post_init__(self):
        terms = tuple(t.strip() for t in self.terms if t.strip())
        if not terms:
            raise PreferenceError("lexicon is empty")
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "_regex", _compile(terms))

    @property
    def regex(self) -> re.Pattern:
        return self._regex

    @classmethod
    def load(cls, path=None, version: str | None = None) -> "MentionLexicon":
        if path is None:
            raw = resources.files("scaffoldkit.data").joinpath("lexicon.txt").read_text(encoding="utf-8")
            version = version or "default-1"
        else:
            raw = Path(path).read_text(encoding="utf-8")
            version = version or Path(path).name
        terms = []
        for line in raw.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                terms.append(line)
        return cls(tuple(terms), version)


def _compile(terms: Sequence[str]) -> re.Pattern:
    parts = []
    # longest first so "brain parcellation" wins over "parcellation"
    for term in sorted(terms, key=lambda t: (-len(t.rstrip("*")), t)):
        prefix = term.endswith("*")
        body = re.escape(term.rstrip("*")).replace(r"\ ", r"\s+")
        parts.append(rf"(?<!\w){body}\w*" if prefix else rf"(?<!\w){body}(?!\w)")
    try:
        return re.compile("|".join(parts), re.IGNORECASE)
    except re.error as exc:
        raise PreferenceError(f"lexicon pattern does not compile: {exc}") from exc


@dataclass(frozen=True)
class Span:
    start: int
    end: int
    text: str


def detect_neuro_mention(text: str, lexicon: MentionLexicon | None = None) -> tuple[bool, list[Span]]:
    """Lexicon hits as spans with UTF-8 byte offsets."""
    lex = lexicon or default_lexicon()
    spans = []
    for m in lex.regex.finditer(text):
        start = len(text[: m.start()].encode("utf-8"))
        end = start + len(m.group(0).encode("utf-8"))
        spans.append(Span(start, end, m.group(0)))
    return bool(spans), spans


_DEFAULT_LEXICON: MentionLexicon | None = None


def default_lexicon() -> MentionLexicon:
    global _DEFAULT_LEXICON
    if _DEFAULT_LEXICON is None:
        _DEFAULT_LEXICON = MentionLexicon.load()
    return _DEFAULT_LEXICON


@dataclass(frozen=True)
class PreferencePair:
    subject_id: str
    prompt: str
    chosen: str
    rejected: str
    chosen_condition: str
    rejected_condition: str
    chosen_model: str
    rejected_model: str
    label: LabelValue
    evidence: tuple[Span, ...]

    def to_dict(self) -> dict:
        return {
            "prompt": self.prompt,
            "chosen": self.chosen,
            "rejected": self.rejected,
            "subject_id": self.subject_id,
            "label": self.label.value,
            "chosen_condition": self.chosen_condition,
            "rejected_condition": self.rejected_condition,
            "chosen_model": self.chosen_model,
            "rejected_model": self.rejected_model,
            "evidence": [{"start": s.start, "end": s.end, "text": s.text} for s in self.evidence],
        }


@dataclass
class BalanceReport:
    candidates: dict[str, int] = field(default_factory=dict)
    emitted: dict[str, int] = field(default_factory=dict)
    skipped_no_chosen: int = 0
    skipped_no_rejected: int = 0

    @property
    def ratio(self) -> float:
        """Positive-class share of emitted pairs."""
        total = sum(self.emitted.values())
        return self.emitted.get(LabelValue.POSITIVE.value, 0) / total if total else float("nan")

    def to_dict(self) -> dict:
        return {
            "candidates": dict(sorted(self.candidates.items())),
            "emitted": dict(sorted(self.emitted.items())),
            "positive_ratio": self.ratio,
            "skipped_no_chosen": self.skipped_no_chosen,
            "skipped_no_rejected": self.skipped_no_rejected,
        }


def pair_violations(pair: PreferencePair, lexicon: MentionLexicon | None = None, chosen_correct: bool = True) -> list[str]:
    out = []
    if pair.chosen_condition != "C1":
        out.append("chosen not from the text-only condition")
    if not chosen_correct:
        out.append("chosen prediction incorrect")
    if detect_neuro_mention(pair.chosen, lexicon)[0]:
        out.append("chosen mentions neuroimaging")
    if not detect_neuro_mention(pair.rejected, lexicon)[0]:
        out.append("rejected has no neuroimaging mention")
    return out


def build_preference_pairs(
    runs: Iterable[ForkObservation],
    prompts: Mapping[str, str] | None = None,
    lexicon: MentionLexicon | None = None,
    model_f1: Mapping[str, float] | None = None,
    max_rejected: int = 4,
    seed: int = 0,
    balance: bool = True,
) -> tuple[list[PreferencePair], BalanceReport]:
    """Pair a correct, mention-free text-only output (chosen) with outputs
    that mention neuroimaging (rejected), per subject.

    The chosen run comes from the model with the highest ``model_f1``
    (ties and missing scores fall back to model id order). Rejected runs are
    ordered by (model, condition) and capped at ``max_rejected``. With
    ``balance`` the majority class is downsampled at random (seeded) to the
    minority count. ``prompts`` maps subject id to the text-only prompt.
    """
    lex = lexicon or default_lexicon()
    f1 = model_f1 or {}
    by_subject: dict[str, list[ForkObservation]] = {}
    for obs in runs:
        by_subject.setdefault(obs.subject_id, []).append(obs)

    report = BalanceReport()
    per_class: dict[str, list[PreferencePair]] = {}
    for sid in sorted(by_subject):
        obs = by_subject[sid]
        labels = {o.label for o in obs if o.label is not None}
        if len(labels) != 1:
            raise PreferenceError(f"subject {sid!r} has {'no' if not labels else 'conflicting'} ground-truth labels")
        label = labels.pop()
        chosen_pool = [
            o for o in obs if o.condition == "C1" and o.predicted is label and not detect_neuro_mention(o.text, lex)[0]
        ]
        if not chosen_pool:
            report.skipped_no_chosen += 1
            continue
        chosen = min(chosen_pool, key=lambda o: (-f1.get(o.model_id, float("-inf")), o.model_id))
        rejected = []
        for o in sorted(obs, key=lambda o: (o.model_id, o.condition)):
            hit, spans = detect_neuro_mention(o.text, lex)
            if hit:
                rejected.append((o, spans))
        if not rejected:
            report.skipped_no_rejected += 1
            continue
        prompt = (prompts or {}).get(sid, "")
        for o, spans in rejected[:max_rejected]:
            pair = PreferencePair(
                subject_id=sid,
                prompt=prompt,
                chosen=chosen.text,
                rejected=o.text,
                chosen_condition=chosen.condition,
                rejected_condition=o.condition,
                chosen_model=chosen.model_id,
                rejected_model=o.model_id,
                label=label,
                evidence=tuple(spans),
            )
            per_class.setdefault(label.value, []).append(pair)

    report.candidates = {k: len(v) for k, v in per_class.items()}
    if balance and len(per_class) == 2:
        n = min(len(v) for v in per_class.values())
        rng = random.Random(seed)
        for key in sorted(per_class):
            pairs = per_class[key]
            if len(pairs) > n:
                keep = sorted(rng.sample(range(len(pairs)), n))
                per_class[key] = [pairs[i] for i in keep]
    report.emitted = {k: len(v) for k, v in per_class.items()}
    out = sorted((p for v in per_class.values() for p in v), key=lambda p: (p.subject_id, p.rejected_model, p.rejected_condition))
    return out, report


def write_pairs(path, pairs: Iterable[PreferencePair]) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        for p in pairs:
            f.write(json.dumps(p.to_dict(), ensure_ascii=False) + "\n")
    return path


# objective


def _log_sigmoid(x: float) -> float:
    # stable for large |x|
    return -math.log1p(math.exp(-x)) if x >= 0 else x - math.log1p(math.exp(x))


def dpo_sigmoid_loss(logratio_chosen: float, logratio_rejected: float, beta: float = 0.1) -> float:
    """-log sigmoid(beta * (chosen - rejected)); logratios are policy minus
    reference log-probabilities of each response."""
    if beta <= 0:
        raise PreferenceError("beta must be positive")
    return -_log_sigmoid(beta * (logratio_chosen - logratio_rejected))


def bco_pair_loss(logratio_chosen: float, logratio_rejected: float, beta: float = 0.1, running_delta: float = 0.0) -> float:
    """Binary classifier loss: chosen rewards pushed above the running reward
    mean, rejected rewards below it."""
    r_c = beta * logratio_chosen
    r_r = beta * logratio_rejected
    return -_log_sigmoid(r_c - running_delta) - _log_sigmoid(-(r_r - running_delta))


def sft_loss(token_logprobs: Sequence[float]) -> float:
    if not len(token_logprobs):
        raise PreferenceError("sft loss of an empty response")
    return -sum(token_logprobs) / len(token_logprobs)


@dataclass(frozen=True)
class MPOWeights:
    w_sigmoid: float = 0.8
    w_bco: float = 0.2
    w_sft: float = 1.0
    beta: float = 0.1

    def __post_init__(self):
        if min(self.w_sigmoid, self.w_bco, self.w_sft) < 0:
            raise PreferenceError("loss weights must be nonnegative")
        if self.beta <= 0:
            raise PreferenceError("beta must be positive")


def mpo_loss(components: Sequence[float], weights: MPOWeights = MPOWeights()) -> float:
    l_sig, l_bco, l_sft = components
    if not all(math.isfinite(c) for c in components):
        raise PreferenceError("loss components must be finite")
    return weights.w_sigmoid * l_sig + weights.w_bco * l_bco + weights.w_sft * l_sft


class RunningDelta:
    """Exponential moving average of the mean reward, used as the binary
    pair loss offset."""

    def __init__(self, decay: float = 0.99, init: float = 0.0):
        self.decay = decay
        self.value = init

    def update(self, rewards: Sequence[float]) -> float:
        batch = sum(rewards) / len(rewards)
        self.value = self.decay * self.value + (1.0 - self.decay) * batch
        return self.value


def mpo_step(logratio_chosen: float, logratio_rejected: float, chosen_logprobs: Sequence[float], weights: MPOWeights = MPOWeights(), delta: RunningDelta | None = None) -> tuple[float, tuple[float, float, float]]:
    """Loss for one pair. The running delta is read before it is updated
    with this pair's rewards."""
    offset = delta.value if delta is not None else 0.0
    comps = (
        dpo_sigmoid_loss(logratio_chosen, logratio_rejected, weights.beta),
        bco_pair_loss(logratio_chosen, logratio_rejected, weights.beta, offset),
        sft_loss(chosen_logprobs),
    )
    if delta is not None:
        delta.update([weights.beta * logratio_chosen, weights.beta * logratio_rejected])
    return mpo_loss(comps, weights), comps
