"""Inference contract: greedy generation, label-fork probabilities and
hidden-state capture at the fork step.

Backends implement ``fork_distribution`` (and optionally ``generate`` and
``logit_lens``); ``run_inference`` checks capabilities and wraps failures.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .cohort import ClassLabel, LabelValue
from .confidence import NormalizedConfidence, normalize_confidence, predict_label
from .prompts import PromptBundle

GENERATE = "generate"
FORK_PROBS = "fork_probs"
HIDDEN_STATES = "hidden_states"
LOGIT_LENS = "logit_lens"

ANSWER_PREFIX = '{"category": "'


class BackendError(RuntimeError):
    def __init__(self, message: str, bundle_id: str | None = None):
        self.bundle_id = bundle_id
        super().__init__(f"[{bundle_id}] {message}" if bundle_id else message)


class CapabilityError(BackendError):
    pass


class ForkError(ValueError):
    pass


class SpecError(ValueError):
    pass


_WORD = re.compile(r"\w+|[^\w\s]")


class Vocabulary:
    """Word-level vocabulary: words and single punctuation marks are tokens."""

    UNK = "<unk>"

    def __init__(self, tokens: Iterable[str]):
        self.tokens: list[str] = [self.UNK]
        self.index: dict[str, int] = {self.UNK: 0}
        for t in tokens:
            if t not in self.index:
                self.index[t] = len(self.tokens)
                self.tokens.append(t)

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocabulary":
        return cls(tok for text in texts for tok in _WORD.findall(text))

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(t, 0) for t in _WORD.findall(text)]

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)


class TokenizerVocab:
    """Adapter exposing a Hugging Face tokenizer through ``encode``/``decode``."""

    def __init__(self, tokenizer):
        self.tokenizer = tokenizer

    def encode(self, text: str) -> list[int]:
        return list(self.tokenizer.encode(text, add_special_tokens=False))

    def decode(self, ids: Sequence[int]) -> str:
        return self.tokenizer.decode(list(ids))

    def __len__(self) -> int:
        return len(self.tokenizer)


@dataclass(frozen=True)
class ForkSpec:
    prefix: tuple[int, ...]
    s: int
    pos_token: int
    neg_token: int
    positive_ids: tuple[int, ...] = ()
    negative_ids: tuple[int, ...] = ()


def detect_label_fork(labels: ClassLabel, vocab, context: str = "") -> ForkSpec:
    """Longest common token prefix of the two label names and the first
    token where they differ.

    With ``context`` the names are tokenized as continuations of it (as they
    appear after an answer prefix) and the context tokens are stripped.
    """
    ctx = vocab.encode(context) if context else []
    seqs = []
    for name in (labels.positive_name, labels.negative_name):
        ids = vocab.encode(context + name)
        if ids[: len(ctx)] != ctx:
            raise ForkError(f"label {name!r} does not tokenize as a continuation of the answer prefix")
        ids = ids[len(ctx):]
        if not ids:
            raise ForkError(f"label {name!r} tokenizes to an empty sequence")
        seqs.append(tuple(ids))
    pos, neg = seqs
    s = 0
    while s < min(len(pos), len(neg)) and pos[s] == neg[s]:
        s += 1
    if s == min(len(pos), len(neg)):
        raise ForkError(f"no clean fork: {labels.positive_name!r} and {labels.negative_name!r} share all of {s} leading tokens")
    return ForkSpec(prefix=pos[:s], s=s, pos_token=pos[s], neg_token=neg[s], positive_ids=pos, negative_ids=neg)


@dataclass(frozen=True)
class ForkObservation:
    subject_id: str
    condition: str
    p_pos: float
    p_neg: float
    text: str = ""
    model_id: str = ""
    label: LabelValue | None = None
    hidden: Mapping[int, np.ndarray] | None = None

    def __post_init__(self):
        for name in ("p_pos", "p_neg"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise BackendError(f"{name}={v} outside [0, 1]", f"{self.subject_id}/{self.condition}")
        if self.label is not None:
            object.__setattr__(self, "label", LabelValue(self.label))
        if self.hidden:
            dims = {np.asarray(h).shape for h in self.hidden.values()}
            if len(dims) != 1:
                raise BackendError(f"hidden states differ in shape: {sorted(dims)}", f"{self.subject_id}/{self.condition}")

    @property
    def confidence(self) -> NormalizedConfidence:
        return normalize_confidence(self.p_pos, self.p_neg)

    @property
    def predicted(self) -> LabelValue:
        return predict_label(self.confidence)

    @property
    def correct(self) -> bool | None:
        return None if self.label is None else self.predicted is self.label


class Backend:
    model_id = "backend"
    capabilities: frozenset = frozenset()
    n_layers = 0

    def fork_distribution(self, bundle: PromptBundle, fork: ForkSpec, layers: Sequence[int]):
        """Return ``(p_pos, p_neg, {layer: hidden})``."""
        raise NotImplementedError

    def generate(self, bundle: PromptBundle, fork: ForkSpec) -> str:
        raise NotImplementedError

    def logit_lens(self, bundle: PromptBundle, fork: ForkSpec) -> list[float]:
        """Normalised positive-label confidence read out at every layer."""
        raise NotImplementedError


def run_inference(
    backend: Backend,
    bundle: PromptBundle,
    fork: ForkSpec,
    layers: Iterable[int] = (),
    label: LabelValue | None = None,
) -> ForkObservation:
    layers = sorted(set(int(l) for l in layers))
    if FORK_PROBS not in backend.capabilities:
        raise CapabilityError(f"{backend.model_id} cannot report fork probabilities", bundle.bundle_id)
    if layers and HIDDEN_STATES not in backend.capabilities:
        raise CapabilityError(f"{backend.model_id} cannot capture hidden states (requested layers {layers})", bundle.bundle_id)
    bad = [l for l in layers if not 0 <= l < backend.n_layers]
    if bad:
        raise CapabilityError(f"layers {bad} outside 0..{backend.n_layers - 1}", bundle.bundle_id)
    try:
        p_pos, p_neg, hidden = backend.fork_distribution(bundle, fork, layers)
        text = backend.generate(bundle, fork) if GENERATE in backend.capabilities else ""
    except (CapabilityError, BackendError):
        raise
    except Exception as exc:  # surface the failing bundle
        raise BackendError(f"inference failed: {exc}", bundle.bundle_id) from exc
    return ForkObservation(
        subject_id=bundle.subject_id,
        condition=bundle.condition.tag,
        p_pos=float(p_pos),
        p_neg=float(p_neg),
        text=text,
        model_id=backend.model_id,
        label=label,
        hidden={l: np.asarray(hidden[l], dtype=np.float64) for l in layers} if layers else None,
    )


class ScriptedBackend(Backend):
    """Replays fixed outputs keyed by ``(subject_id, condition)``.

    Values are ``(p_pos, p_neg)`` or ``(p_pos, p_neg, text)``; a callable
    receives the bundle and returns the same. Optional ``hidden`` maps the
    same key to ``{layer: vector}``.
    """

    def __init__(self, script, hidden=None, model_id: str = "scripted", n_layers: int = 0):
        self.script = script
        self.hidden = hidden or {}
        self.model_id = model_id
        self.n_layers = n_layers
        caps = {FORK_PROBS, GENERATE}
        if hidden:
            caps.add(HIDDEN_STATES)
        self.capabilities = frozenset(caps)

    def _lookup(self, bundle):
        if callable(self.script):
            out = self.script(bundle)
        else:
            key = (bundle.subject_id, bundle.condition.tag)
            if key not in self.script:
                raise BackendError("no scripted output", bundle.bundle_id)
            out = self.script[key]
        return tuple(out) + ("",) * (3 - len(out))

    def fork_distribution(self, bundle, fork, layers):
        p_pos, p_neg, _ = self._lookup(bundle)
        states = self.hidden.get((bundle.subject_id, bundle.condition.tag), {})
        missing = [l for l in layers if l not in states]
        if missing:
            raise BackendError(f"no scripted hidden state for layers {missing}", bundle.bundle_id)
        return p_pos, p_neg, {l: states[l] for l in layers}

    def generate(self, bundle, fork):
        return self._lookup(bundle)[2]


def logistic(x: float) -> float:
    return 0.5 * (1.0 + math.tanh(0.5 * x))


DEFAULT_TRIGGERS = ("mri", "brain scan", "neuroimaging")

_EXPLANATIONS = {
    LabelValue.POSITIVE: (
        "The questionnaire responses indicate persistent low mood and reduced resilience.",
        "Reported stress and social strain are elevated relative to typical values.",
    ),
    LabelValue.NEGATIVE: (
        "The reported measures fall within typical ranges.",
        "No marked abnormality appears in the clinical variables.",
    ),
}
_MENTIONS = (
    "The MRI data suggest reduced hippocampal volume.",
    "Brain parcellation volumes show cortical thinning in frontal regions.",
    "The neuroimaging findings support this assessment.",
)


def _unit_hash(*parts) -> int:
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


@dataclass
class SyntheticSpec:
    """Planted parameters of the synthetic model.

    The positive-class fork probability is
    ``logistic(b_true + u_i + a_true*trigger + image_gain*image + parcel_gain*parcel + noise)``
    scaled by ``fork_mass``. Hidden states at layer l are
    ``base_i + text_noise*eps(text) + a_true*trigger*v*[l >= k]``.
    """

    a_true: float
    b_true: float
    direction: np.ndarray
    n_layers: int = 8
    divergence_layer: int = 5
    offsets: Mapping[str, float] = field(default_factory=dict)
    triggers: tuple[str, ...] = DEFAULT_TRIGGERS
    image_gain: float = 0.0
    parcel_gain: float = 0.0
    logit_noise: float = 0.0
    text_noise: float = 0.03
    fork_mass: float = 0.95
    mention_rate: float = 0.0
    seed: int = 0
    model_id: str = "synthetic"

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if self.direction.ndim != 1 or self.direction.shape[0] < 2:
            raise SpecError(f"hidden dimension must be >= 2, got shape {self.direction.shape}")
        if not 0 <= self.divergence_layer < self.n_layers:
            raise SpecError(f"divergence layer k={self.divergence_layer} must satisfy 0 <= k < L={self.n_layers}")
        if not 0.0 < self.fork_mass <= 1.0:
            raise SpecError("fork_mass must lie in (0, 1]")
        if not self.triggers:
            raise SpecError("trigger lexicon is empty")

    @property
    def dim(self) -> int:
        return int(self.direction.shape[0])


def plant_offsets(subjects: Sequence[tuple[str, LabelValue]], separation: float = 0.8, spread: float = 0.5, seed: int = 0) -> dict[str, float]:
    """Per-subject offsets ``+-separation + N(0, spread)``, sign by class."""
    rng = np.random.default_rng(seed)
    out = {}
    for sid, value in subjects:
        sign = 1.0 if LabelValue(value) is LabelValue.POSITIVE else -1.0
        out[sid] = sign * separation + spread * float(rng.standard_normal())
    return out


class SyntheticBackend(Backend):
    def __init__(self, spec: SyntheticSpec):
        self.spec = spec
        self.model_id = spec.model_id
        self.n_layers = spec.n_layers
        self.capabilities = frozenset({GENERATE, FORK_PROBS, HIDDEN_STATES, LOGIT_LENS})

    def trigger(self, bundle: PromptBundle) -> int:
        text = bundle.text.lower()
        return int(any(t.lower() in text for t in self.spec.triggers))

    def _rng(self, *parts) -> np.random.Generator:
        return np.random.default_rng(_unit_hash(self.spec.seed, *parts))

    def _noise(self, bundle) -> float:
        if self.spec.logit_noise == 0.0:
            return 0.0
        return self.spec.logit_noise * float(self._rng("logit", bundle.subject_id, bundle.text, bundle.image_ref).standard_normal())

    def logit(self, bundle: PromptBundle, late: bool = True) -> float:
        s = self.spec
        z = s.b_true + s.offsets.get(bundle.subject_id, 0.0) + self._noise(bundle)
        if late:
            z += s.a_true * self.trigger(bundle)
            z += s.image_gain * (bundle.image_ref is not None)
            z += s.parcel_gain * (bundle.segment("parcel") is not None)
        return z

    def hidden_state(self, bundle: PromptBundle, layer: int) -> np.ndarray:
        s = self.spec
        base = self._rng("base", bundle.subject_id).standard_normal(s.dim)
        noise = self._rng("text", bundle.subject_id, bundle.text).standard_normal(s.dim)
        h = base + s.text_noise * noise
        if layer >= s.divergence_layer:
            h = h + s.a_true * self.trigger(bundle) * s.direction
        return h

    def fork_distribution(self, bundle, fork, layers):
        p = logistic(self.logit(bundle))
        m = self.spec.fork_mass
        return m * p, m * (1.0 - p), {l: self.hidden_state(bundle, l) for l in layers}

    def logit_lens(self, bundle, fork):
        k = self.spec.divergence_layer
        early, late = logistic(self.logit(bundle, late=False)), logistic(self.logit(bundle))
        return [late if l >= k else early for l in range(self.n_layers)]

    def generate(self, bundle, fork):
        p = logistic(self.logit(bundle))
        m = self.spec.fork_mass
        value = predict_label(normalize_confidence(m * p, m * (1.0 - p)))
        rng = self._rng("gen", bundle.subject_id, bundle.text)
        parts = [_EXPLANATIONS[value][int(rng.integers(2))]]
        if self.trigger(bundle) and rng.random() < self.spec.mention_rate:
            parts.append(_MENTIONS[int(rng.integers(len(_MENTIONS)))])
        return json.dumps({"category": bundle.labels.name_of(value), "explanation": " ".join(parts)}, ensure_ascii=False)


# observation log IO


def write_observations(path, observations: Iterable[ForkObservation], hidden_dir=None) -> Path:
    """Newline-delimited JSON, one record per observation. Hidden states go
    to ``hidden_dir`` as little-endian float32 ``.bin`` files with a JSON
    sidecar; the record stores the relative file name."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    hdir = Path(hidden_dir) if hidden_dir is not None else path.parent / (path.stem + "_hidden")
    with open(path, "w", encoding="utf-8") as f:
        for obs in observations:
            rec = {
                "subject_id": obs.subject_id,
                "condition": obs.condition,
                "model_id": obs.model_id,
                "label": obs.label.value if obs.label is not None else None,
                "p_pos": obs.p_pos,
                "p_neg": obs.p_neg,
                "text": obs.text,
                "hidden_ref": None,
            }
            if obs.hidden:
                stem = _safe(f"{obs.model_id}__{obs.subject_id}__{obs.condition}")
                write_hidden(hdir / stem, obs.hidden, obs.subject_id, obs.condition)
                rec["hidden_ref"] = os.path.relpath(hdir / stem, path.parent)
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")
    return path


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name)


def read_observations(path, load_hidden: bool = True) -> list[ForkObservation]:
    path = Path(path)
    out = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise BackendError(f"{path}:{line_no}: malformed record ({exc.msg})") from exc
            hidden = None
            if load_hidden and rec.get("hidden_ref"):
                ref = Path(rec["hidden_ref"])
                hidden = read_hidden(ref if ref.is_absolute() else path.parent / ref)
            out.append(
                ForkObservation(
                    subject_id=str(rec["subject_id"]),
                    condition=rec["condition"],
                    p_pos=float(rec["p_pos"]),
                    p_neg=float(rec["p_neg"]),
                    text=rec.get("text", ""),
                    model_id=rec.get("model_id", ""),
                    label=rec.get("label"),
                    hidden=hidden,
                )
            )
    return out


def write_hidden(stem, hidden: Mapping[int, np.ndarray], subject_id: str, condition: str) -> Path:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    layers = sorted(hidden)
    arr = np.stack([np.asarray(hidden[l], dtype="<f4") for l in layers])
    stem.with_suffix(".bin").write_bytes(arr.tobytes())
    meta = {"layers": layers, "dim": int(arr.shape[1]), "subject": subject_id, "condition": condition, "dtype": "float32", "endianness": "little"}
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    return stem


def read_hidden(stem) -> dict[int, np.ndarray]:
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text(encoding="utf-8"))
    arr = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f4").reshape(len(meta["layers"]), meta["dim"])
    return {int(l): arr[i].astype(np.float64) for i, l in enumerate(meta["layers"])}


# real checkpoints


class HFBackend(Backend):
    """Adapter for Hugging Face causal LMs and vision-language models.

    Text-only bundles go through the tokenizer (chat template when it has
    one). Bundles with images need a ``processor`` that accepts chat
    messages with image entries; model-specific handling stays here.
    Hidden state for layer ``l`` is ``hidden_states[l + 1]`` (index 0 is the
    embedding output) at the last input position, i.e. the step that emits
    the fork token. Probabilities are computed in float64.
    """

    def __init__(self, model, tokenizer, model_id: str = "checkpoint", processor=None, answer_prefix: str = ANSWER_PREFIX, max_new_tokens: int = 64, image_loader: Callable | None = None):
        self.model = model.eval()
        self.tokenizer = tokenizer
        self.processor = processor
        self.model_id = model_id
        self.answer_prefix = answer_prefix
        self.max_new_tokens = max_new_tokens
        self.image_loader = image_loader
        cfg = getattr(model.config, "text_config", model.config)
        self.n_layers = int(getattr(cfg, "num_hidden_layers", getattr(cfg, "n_layer", 0)))
        self.capabilities = frozenset({GENERATE, FORK_PROBS, HIDDEN_STATES, LOGIT_LENS})
        self.vocab = TokenizerVocab(tokenizer)

    @classmethod
    def from_pretrained(cls, name: str, **kwargs) -> "HFBackend":
        import torch
        from transformers import AutoModelForCausalLM, AutoTokenizer

        tok = AutoTokenizer.from_pretrained(name)
        model = AutoModelForCausalLM.from_pretrained(name, torch_dtype=torch.float32)
        return cls(model, tok, model_id=name, **kwargs)

    def fork_for(self, labels: ClassLabel) -> ForkSpec:
        return detect_label_fork(labels, self.vocab, context=self.answer_prefix)

    def _inputs(self, bundle: PromptBundle, fork: ForkSpec):
        import torch

        if bundle.image_ref is not None:
            if self.processor is None:
                raise CapabilityError(f"{self.model_id}: image bundles need a processor", bundle.bundle_id)
            messages = bundle.to_messages()
            if self.image_loader is not None:
                for part in messages[0]["content"]:
                    if part["type"] == "image":
                        part["image"] = self.image_loader(part["image"])
            inputs = self.processor.apply_chat_template(messages, add_generation_prompt=True, tokenize=True, return_dict=True, return_tensors="pt")
        else:
            if getattr(self.tokenizer, "chat_template", None):
                msgs = [{"role": "user", "content": bundle.text}]
                prompt = self.tokenizer.apply_chat_template(msgs, add_generation_prompt=True, tokenize=False)
            else:
                prompt = bundle.text + "\n"
            ids = self.tokenizer.encode(prompt, add_special_tokens=False)
            inputs = {"input_ids": torch.tensor([ids])}
        forced = self.vocab.encode(self.answer_prefix) + list(fork.prefix)
        extra = torch.tensor([forced], dtype=inputs["input_ids"].dtype)
        inputs["input_ids"] = torch.cat([inputs["input_ids"], extra], dim=1)
        inputs["attention_mask"] = torch.ones_like(inputs["input_ids"])
        return inputs

    def _forward(self, bundle, fork):
        import torch

        with torch.no_grad():
            return self.model(**self._inputs(bundle, fork), output_hidden_states=True)

    def fork_distribution(self, bundle, fork, layers):
        import torch

        out = self._forward(bundle, fork)
        probs = torch.softmax(out.logits[0, -1].to(torch.float64), dim=-1)
        hidden = {l: out.hidden_states[l + 1][0, -1].to(torch.float64).numpy() for l in layers}
        return float(probs[fork.pos_token]), float(probs[fork.neg_token]), hidden

    def _final_norm(self):
        for path in ("model.norm", "transformer.ln_f", "model.language_model.norm", "language_model.model.norm", "model.final_layernorm"):
            obj = self.model
            for attr in path.split("."):
                obj = getattr(obj, attr, None)
                if obj is None:
                    break
            if obj is not None:
                return obj
        return None

    def logit_lens(self, bundle, fork):
        import torch

        out = self._forward(bundle, fork)
        norm = self._final_norm()
        head = self.model.get_output_embeddings()
        scores = []
        with torch.no_grad():
            for l in range(self.n_layers):
                if l == self.n_layers - 1:
                    logits = out.logits[0, -1]
                else:
                    h = out.hidden_states[l + 1][0, -1]
                    logits = head(norm(h) if norm is not None else h)
                probs = torch.softmax(logits.to(torch.float64), dim=-1)
                conf = normalize_confidence(float(probs[fork.pos_token]), float(probs[fork.neg_token]))
                scores.append(conf.P_pos)
        return scores

    def generate(self, bundle, fork):
        import torch

        inputs = self._inputs(bundle, ForkSpec((), 0, fork.pos_token, fork.neg_token))
        pad = self.tokenizer.pad_token_id if self.tokenizer.pad_token_id is not None else self.tokenizer.eos_token_id
        with torch.no_grad():
            gen = self.model.generate(**inputs, do_sample=False, max_new_tokens=self.max_new_tokens, pad_token_id=pad)
        new = gen[0, inputs["input_ids"].shape[1]:]
        return self.answer_prefix + self.tokenizer.decode(new, skip_special_tokens=True)
