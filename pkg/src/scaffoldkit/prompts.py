"""Prompt assembly for the input conditions, the false-modality ablations and
phrase-probe substitutions.

A bundle's text is the concatenation of its segments; each segment carries
its own leading separator so that inserting or removing one segment changes
exactly one contiguous span of the text.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

from .cohort import ClassLabel, PatientRecord

CATEGORIES = (
    "mri_neuroimaging",
    "general_clinical",
    "authoritative",
    "neutral",
    "structural_format",
    "negation",
)

IMAGE_KINDS = ("none", "mri_plot", "swap")


class PromptError(ValueError):
    pass


class AssemblyError(PromptError):
    def __init__(self, component: str, detail: str = ""):
        self.component = component
        super().__init__(f"missing required component {component!r}" + (f": {detail}" if detail else ""))


class UnknownConditionError(PromptError):
    pass


@dataclass(frozen=True)
class Condition:
    tag: str
    includes_arcf: bool = True
    includes_mri_preamble: bool = False
    includes_parcel_text: bool = False
    includes_image: bool = False
    image_kind: str = "none"
    # which preamble clause fills the slot: mri, fmri, weather or probe
    preamble: str | None = None
    phrase_id: str | None = None

    @property
    def has_preamble(self) -> bool:
        return self.preamble is not None


CONDITIONS: dict[str, Condition] = {
    "C1": Condition("C1"),
    "C2": Condition("C2", includes_mri_preamble=True, preamble="mri"),
    "C3": Condition("C3", includes_mri_preamble=True, includes_image=True, image_kind="mri_plot", preamble="mri"),
    "C4": Condition(
        "C4", includes_mri_preamble=True, includes_parcel_text=True, includes_image=True, image_kind="mri_plot", preamble="mri"
    ),
    "C5": Condition(
        "C5", includes_mri_preamble=True, includes_parcel_text=True, includes_image=True, image_kind="swap", preamble="mri"
    ),
    "C2_fmri": Condition("C2_fmri", preamble="fmri"),
    "C2_weather": Condition("C2_weather", preamble="weather"),
}

MAIN_CONDITIONS = ("C1", "C2", "C3", "C4", "C5")


def probe_condition(phrase_id: str) -> Condition:
    return Condition(f"probe:{phrase_id}", preamble="probe", phrase_id=str(phrase_id))


def get_condition(tag: str) -> Condition:
    if tag in CONDITIONS:
        return CONDITIONS[tag]
    if tag.startswith("probe:") and len(tag) > len("probe:"):
        return probe_condition(tag.split(":", 1)[1])
    raise UnknownConditionError(f"unknown condition {tag!r}; expected one of {', '.join(CONDITIONS)} or probe:<id>")


def parse_conditions(spec: str) -> list[Condition]:
    return [get_condition(t.strip()) for t in spec.split(",") if t.strip()]


@dataclass(frozen=True)
class PhraseProbeSpec:
    phrase_id: str
    category: str
    text: str

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise PromptError(f"phrase {self.phrase_id}: unknown category {self.category!r}")
        if not self.text.strip():
            raise PromptError(f"phrase {self.phrase_id}: empty text")


@dataclass(frozen=True)
class Segment:
    name: str
    text: str


@dataclass(frozen=True)
class PromptBundle:
    segments: tuple[Segment, ...]
    condition: Condition
    labels: ClassLabel
    subject_id: str
    image_ref: str | None = None
    image_kind: str = "none"
    image_position: str = "first"

    @property
    def text(self) -> str:
        return "".join(s.text for s in self.segments)

    @property
    def out_of_domain(self) -> bool:
        return self.image_kind == "swap"

    @property
    def bundle_id(self) -> str:
        return f"{self.subject_id}/{self.condition.tag}"

    def segment(self, name: str) -> Segment | None:
        for s in self.segments:
            if s.name == name:
                return s
        return None

    def to_messages(self) -> list[dict]:
        """Single user turn; the image (when present) sits before or after
        the text according to ``image_position``."""
        content = [{"type": "text", "text": self.text}]
        if self.image_ref is not None:
            image = {"type": "image", "image": self.image_ref}
            content = [image] + content if self.image_position == "first" else content + [image]
        return [{"role": "user", "content": content}]

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "condition": self.condition.tag,
            "labels": [self.labels.positive_name, self.labels.negative_name],
            "image_ref": self.image_ref,
            "image_kind": self.image_kind,
            "out_of_domain": self.out_of_domain,
            "segments": [{"name": s.name, "text": s.text} for s in self.segments],
        }

    def dump(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True)


@dataclass
class PromptTemplates:
    lead: str
    classify: str
    response_format: Sequence[str]
    preambles: Mapping[str, str]
    cohorts: Mapping[str, Mapping]
    block_separator: str = "\n\n"
    probe_separator: str = "\n"
    parcel_header: str = "Brain parcellation volumes:"
    image_position: str = "first"

    @classmethod
    def load(cls, path=None) -> "PromptTemplates":
        if path is None:
            raw = resources.files("scaffoldkit.data").joinpath("templates.json").read_text(encoding="utf-8")
        else:
            raw = Path(path).read_text(encoding="utf-8")
        spec = json.loads(raw)
        if spec.get("image_position", "first") not in ("first", "last"):
            raise PromptError("image_position must be 'first' or 'last'")
        return cls(**spec)

    def options_for(self, labels: ClassLabel) -> list[str]:
        for profile in self.cohorts.values():
            if (profile["positive_name"], profile["negative_name"]) == (labels.positive_name, labels.negative_name):
                return list(profile["options"])
        return [labels.positive_name, labels.negative_name]

    def instruction_tail(self, labels: ClassLabel) -> str:
        sep = self.block_separator
        blocks = [self.classify] + [f"- {o}" for o in self.options_for(labels)] + list(self.response_format)
        return sep + sep.join(blocks)


_DEFAULT_TEMPLATES: PromptTemplates | None = None


def default_templates() -> PromptTemplates:
    global _DEFAULT_TEMPLATES
    if _DEFAULT_TEMPLATES is None:
        _DEFAULT_TEMPLATES = PromptTemplates.load()
    return _DEFAULT_TEMPLATES


def build_prompt(
    record: PatientRecord,
    serialized: str,
    parcel_text: str | None,
    condition: Condition,
    labels: ClassLabel,
    image_ref: str | None = None,
    templates: PromptTemplates | None = None,
    phrase: PhraseProbeSpec | None = None,
) -> PromptBundle:
    """Assemble the user turn for one subject under one condition.

    Segment order: lead, preamble slot, instruction tail, record, parcel text.
    For image conditions ``image_ref`` defaults to ``record.volume_ref`` for
    the subject's own plot; swap conditions need an explicit reference.
    """
    t = templates or default_templates()
    if condition.includes_arcf and not serialized:
        raise AssemblyError("record", "serialized clinical text is empty")
    if condition.includes_parcel_text and not parcel_text:
        raise AssemblyError("parcel_text", f"condition {condition.tag} needs parcellation text")
    if parcel_text and not condition.includes_parcel_text:
        raise AssemblyError("parcel_text", f"condition {condition.tag} takes no parcellation text")

    ref = None
    if condition.includes_image:
        ref = image_ref
        if ref is None and condition.image_kind == "mri_plot":
            ref = record.volume_ref
        if ref is None:
            raise AssemblyError("image", f"condition {condition.tag} needs a {condition.image_kind} image")

    segments = [Segment("lead", t.lead)]
    if condition.preamble == "probe":
        if phrase is None or phrase.phrase_id != condition.phrase_id:
            raise AssemblyError("phrase", f"probe condition {condition.tag} needs phrase {condition.phrase_id}")
        segments.append(Segment("preamble", t.probe_separator + phrase.text))
    elif condition.preamble is not None:
        if condition.preamble not in t.preambles:
            raise AssemblyError("preamble", f"no clause configured for {condition.preamble!r}")
        segments.append(Segment("preamble", t.preambles[condition.preamble]))
    segments.append(Segment("instruction", t.instruction_tail(labels)))
    if condition.includes_arcf:
        segments.append(Segment("record", t.block_separator + serialized))
    if condition.includes_parcel_text:
        segments.append(Segment("parcel", t.block_separator + t.parcel_header + "\n" + parcel_text))

    return PromptBundle(
        segments=tuple(segments),
        condition=condition,
        labels=ClassLabel(labels.positive_name, labels.negative_name),
        subject_id=record.subject_id,
        image_ref=ref,
        image_kind=condition.image_kind if condition.includes_image else "none",
        image_position=t.image_position,
    )


def substitute_preamble(base: PromptBundle, phrase: PhraseProbeSpec, templates: PromptTemplates | None = None) -> PromptBundle:
    """Insert ``phrase`` into the preamble slot of a text-only baseline bundle."""
    t = templates or default_templates()
    if base.image_ref is not None or base.condition.includes_image:
        raise PromptError("phrase probes start from a text-only baseline bundle")
    if base.segment("preamble") is not None or base.condition.has_preamble:
        raise PromptError("base bundle already carries a preamble; probes replace it, they do not stack")
    segments = list(base.segments)
    at = [s.name for s in segments].index("lead") + 1
    segments.insert(at, Segment("preamble", t.probe_separator + phrase.text))
    return replace(base, segments=tuple(segments), condition=probe_condition(phrase.phrase_id))


def phrase_inventory(config_file=None) -> list[PhraseProbeSpec]:
    """Load probe phrases from JSON (``{"phrases": [{id, category, text}]}``
    or a bare list). ``None`` loads the shipped inventory; an empty file
    yields an empty list."""
    if config_file is None:
        raw = resources.files("scaffoldkit.data").joinpath("phrases.json").read_text(encoding="utf-8")
    else:
        raw = Path(config_file).read_text(encoding="utf-8")
    if not raw.strip():
        return []
    spec = json.loads(raw)
    items = spec.get("phrases", []) if isinstance(spec, dict) else spec
    out: list[PhraseProbeSpec] = []
    seen: set[str] = set()
    for item in items:
        pid = str(item["id"])
        if pid in seen:
            raise PromptError(f"duplicate phrase id {pid!r}")
        seen.add(pid)
        out.append(PhraseProbeSpec(pid, item["category"], item["text"]))
    return out


def changed_segments(a: PromptBundle, b: PromptBundle) -> list[str]:
    """Names of segments present in only one bundle or differing between them."""
    sa = {s.name: s.text for s in a.segments}
    sb = {s.name: s.text for s in b.segments}
    return sorted(n for n in set(sa) | set(sb) if sa.get(n) != sb.get(n))
