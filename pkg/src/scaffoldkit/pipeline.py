"""End-to-end runs: conditions over a cohort, the phrase probe with layer
selection and curve fit, and the planted synthetic setup used for
desk-scale checks."""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .backend import (
    LOGIT_LENS,
    Backend,
    CapabilityError,
    ForkObservation,
    ForkSpec,
    SyntheticBackend,
    SyntheticSpec,
    Vocabulary,
    detect_label_fork,
    logistic,
    plant_offsets,
    run_inference,
)
from .cohort import ClassLabel, DataDictionary, LabelValue, PatientRecord, serialize_record
from .confidence import normalize_confidence
from .neuro import N_REGIONS, ProbabilisticAtlas, VolumeGrid, parcellate, pick_swap_image, serialize_parcellation
from .probe import (
    LayerSweepResult,
    PhraseProbeResult,
    ResponseCurveFit,
    ScaffoldDirection,
    fit_response_curve,
    phrase_alignment,
    scaffold_direction,
    select_probe_layer,
)
from .prompts import (
    Condition,
    PhraseProbeSpec,
    PromptBundle,
    PromptTemplates,
    build_prompt,
    get_condition,
    substitute_preamble,
)

logger = logging.getLogger(__name__)

DEFAULT_SWAP_POOL = ("swap/dog_photo.png", "swap/scifi_brain.png")


@dataclass
class CohortInputs:
    """Everything needed to build bundles for a cohort."""

    records: list[PatientRecord]
    dictionary: DataDictionary
    labels: ClassLabel
    parcel_texts: Mapping[str, str] = field(default_factory=dict)
    image_refs: Mapping[str, str] = field(default_factory=dict)
    swap_pool: Sequence[str] = DEFAULT_SWAP_POOL
    seed: int = 0
    templates: PromptTemplates | None = None
    missing: str = "placeholder"

    def __post_init__(self):
        self._serialized = {}

    def serialized(self, record: PatientRecord) -> str:
        if record.subject_id not in self._serialized:
            self._serialized[record.subject_id] = serialize_record(record, self.dictionary, missing=self.missing)
        return self._serialized[record.subject_id]

    def bundle(self, record: PatientRecord, condition: Condition, index: int = 0) -> PromptBundle:
        image = None
        if condition.image_kind == "swap":
            image = pick_swap_image(self.seed + index, list(self.swap_pool))
        elif condition.image_kind == "mri_plot":
            image = self.image_refs.get(record.subject_id)
        parcel = self.parcel_texts.get(record.subject_id) if condition.includes_parcel_text else None
        return build_prompt(record, self.serialized(record), parcel, condition, self.labels, image_ref=image, templates=self.templates)


def run_conditions(
    inputs: CohortInputs,
    backend: Backend,
    conditions: Sequence[str | Condition],
    fork: ForkSpec,
    layers: Sequence[int] = (),
) -> list[ForkObservation]:
    out = []
    conds = [c if isinstance(c, Condition) else get_condition(c) for c in conditions]
    for cond in conds:
        for i, rec in enumerate(inputs.records):
            bundle = inputs.bundle(rec, cond, i)
            out.append(run_inference(backend, bundle, fork, layers, label=rec.label.value))
    return out


def sample_probe_subjects(records: Sequence[PatientRecord], n: int = 71, seed: int = 0, positive_only: bool = True) -> list[PatientRecord]:
    """Seeded subset for the phrase probe, drawn from the positive class by
    default; fewer candidates than ``n`` returns them all."""
    pool = [r for r in records if not positive_only or r.label.value is LabelValue.POSITIVE]
    pool.sort(key=lambda r: r.subject_id)
    if len(pool) <= n:
        return pool
    idx = sorted(random.Random(seed).sample(range(len(pool)), n))
    return [pool[i] for i in idx]


def layer_sweep(backend: Backend, base: Sequence[PromptBundle], target: Sequence[PromptBundle], fork: ForkSpec) -> list[tuple[float, float]]:
    """Per-layer mean logit-lens confidence for the two bundle sets."""
    if LOGIT_LENS not in backend.capabilities:
        raise CapabilityError(f"{backend.model_id} has no logit-lens readout")
    a = np.array([backend.logit_lens(b, fork) for b in base])
    b = np.array([backend.logit_lens(t, fork) for t in target])
    return [(float(x), float(y)) for x, y in zip(a.mean(axis=0), b.mean(axis=0))]


@dataclass
class ProbeReport:
    direction: ScaffoldDirection
    sweep: LayerSweepResult
    read_layer: int
    read_rule: str
    phrases: list[PhraseProbeResult]
    fit: ResponseCurveFit | None
    subjects: list[str]

    def fit_record(self) -> dict:
        rec = {"tau": self.sweep.tau, "l_star": self.sweep.l_star, "divergence_layer": self.sweep.divergence_layer,
               "read_layer": self.read_layer, "read_rule": self.read_rule, "n_subjects": len(self.subjects)}
        if self.fit is not None:
            rec.update(self.fit.to_dict())
        return rec


def run_phrase_probe(
    inputs: CohortInputs,
    backend: Backend,
    phrases: Sequence[PhraseProbeSpec],
    fork: ForkSpec,
    n_subjects: int = 71,
    tau: float = 0.1,
    read_layer: str = "divergence",
    base: str = "C1",
    preamble: str = "C2",
) -> ProbeReport:
    """Phrase probe on a seeded subset.

    The logit-lens sweep between ``base`` and ``preamble`` bundles locates
    the divergence layer k and l* = k - 1. Hidden states are read at k
    (``read_layer="divergence"``) or at l* (``"preceding"``). The scaffold
    direction is mean(h_preamble) - mean(h_base), so phrases that move the
    representation the way the preamble does score positive cosines.
    """
    if read_layer not in ("divergence", "preceding"):
        raise ValueError("read_layer must be 'divergence' or 'preceding'")
    subjects = sample_probe_subjects(inputs.records, n_subjects, inputs.seed)
    if not subjects:
        raise ValueError("no subjects available for the phrase probe")
    c0, c1 = get_condition(base), get_condition(preamble)
    b0 = [inputs.bundle(r, c0, i) for i, r in enumerate(subjects)]
    b1 = [inputs.bundle(r, c1, i) for i, r in enumerate(subjects)]
    sweep = select_probe_layer(layer_sweep(backend, b0, b1, fork), tau)
    layer = sweep.divergence_layer if read_layer == "divergence" else sweep.l_star

    o0 = [run_inference(backend, b, fork, [layer]) for b in b0]
    o1 = [run_inference(backend, b, fork, [layer]) for b in b1]
    h0 = [o.hidden[layer] for o in o0]
    direction = scaffold_direction([o.hidden[layer] for o in o1], h0, layer, conditions=(preamble, base))
    p0 = [o.confidence.P_pos for o in o0]

    results = []
    for phrase in phrases:
        obs = [run_inference(backend, substitute_preamble(b, phrase, inputs.templates), fork, [layer]) for b in b0]
        align = phrase_alignment([o.hidden[layer] for o in obs], h0, direction)
        deltas = [o.confidence.P_pos - p for o, p in zip(obs, p0)]
        results.append(
            PhraseProbeResult(
                phrase_id=phrase.phrase_id,
                category=phrase.category,
                mean_cosine=align.mean_cosine,
                mean_delta=float(np.mean(deltas)),
                cosines=[float(c) for c in align.cosines],
                deltas=deltas,
                n_skipped=align.n_skipped,
                text=phrase.text,
            )
        )
    fit = None
    if len(results) >= 3:
        fit = fit_response_curve([(r.mean_cosine, r.mean_delta) for r in results])
    return ProbeReport(direction, sweep, layer, read_layer, results, fit, [r.subject_id for r in subjects])


# planted synthetic setup


@dataclass
class PlantedSetup:
    inputs: CohortInputs
    backend: SyntheticBackend
    fork: ForkSpec
    vocab: Vocabulary

    @property
    def spec(self) -> SyntheticSpec:
        return self.backend.spec

    def planted_share(self) -> float:
        """mean shift from the preamble alone over mean shift of the full
        multimodal condition, evaluated on the noiseless planted logits."""
        s = self.spec
        u = np.array([s.offsets[r.subject_id] for r in self.inputs.records])
        base = np.vectorize(logistic)(s.b_true + u)
        pre = np.vectorize(logistic)(s.b_true + u + s.a_true)
        full = np.vectorize(logistic)(s.b_true + u + s.a_true + s.image_gain + s.parcel_gain)
        return float((pre - base).mean() / (full - base).mean())


def synthetic_parcel_texts(records: Sequence[PatientRecord], seed: int = 0, dims=(10, 10, 10)) -> dict[str, str]:
    """Region-volume text per subject from one random probabilistic atlas;
    subjects differ by voxel size (head-size jitter)."""
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.full(N_REGIONS, 0.2), size=dims)
    atlas = ProbabilisticAtlas(probs)
    out = {}
    for rec in records:
        vs = float(rng.uniform(1.8, 2.2))
        grid = VolumeGrid(np.zeros(dims), voxel_size=(vs, vs, vs))
        out[rec.subject_id] = serialize_parcellation(parcellate(grid, atlas), atlas)
    return out


def planted_setup(
    records: Sequence[PatientRecord],
    dictionary: DataDictionary,
    labels: ClassLabel,
    a_true: float = 2.0,
    b_true: float = -1.0,
    dim: int = 64,
    n_layers: int = 8,
    divergence_layer: int = 5,
    image_gain: float = 0.5,
    parcel_gain: float = 0.25,
    logit_noise: float = 0.0,
    text_noise: float = 0.03,
    mention_rate: float = 0.0,
    seed: int = 0,
    model_id: str = "synthetic",
    separation: float = 0.8,
    spread: float = 0.5,
) -> PlantedSetup:
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    offsets = plant_offsets([(r.subject_id, r.label.value) for r in records], separation, spread, seed)
    spec = SyntheticSpec(
        a_true=a_true,
        b_true=b_true,
        direction=v,
        n_layers=n_layers,
        divergence_layer=divergence_layer,
        offsets=offsets,
        image_gain=image_gain,
        parcel_gain=parcel_gain,
        logit_noise=logit_noise,
        text_noise=text_noise,
        mention_rate=mention_rate,
        seed=seed,
        model_id=model_id,
    )
    vocab = Vocabulary.from_texts([labels.positive_name, labels.negative_name])
    inputs = CohortInputs(
        records=list(records),
        dictionary=dictionary,
        labels=labels,
        parcel_texts=synthetic_parcel_texts(records, seed),
        image_refs={r.subject_id: f"mri/{r.subject_id}.png" for r in records},
        seed=seed,
    )
    return PlantedSetup(inputs, SyntheticBackend(spec), detect_label_fork(labels, vocab), vocab)


def confidences_by_key(observations: Sequence[ForkObservation], model: str | None = None):
    """``{(subject_id, condition): NormalizedConfidence}`` for one model."""
    out = {}
    for o in observations:
        if model is not None and o.model_id != model:
            continue
        key = (o.subject_id, o.condition)
        if key in out:
            raise ValueError(f"duplicate observation for {key} (pass a model id to disambiguate)")
        out[key] = normalize_confidence(o.p_pos, o.p_neg)
    return out
