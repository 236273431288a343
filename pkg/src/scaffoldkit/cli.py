"""Command-line entry point.

Subcommands: serialize, run, confidence, probe, ablate, prefpairs, report.
Without ``--cohort`` every stage works on a seeded synthetic cohort served
by the planted synthetic backend.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .backend import BackendError, HFBackend, read_observations, write_observations
from .cohort import CohortError, FOR2107_LABELS, class_distribution, load_cohort, make_synthetic_cohort
from .confidence import DELTA_PAIRS, group_statistics, paired_deltas, summarize_deltas
from .metrics import ConditionMatrix, condition_matrix, fixture_matrix, reference_values
from .pipeline import CohortInputs, confidences_by_key, planted_setup, run_conditions, run_phrase_probe
from .preference import MentionLexicon, build_preference_pairs, write_pairs
from .prompts import MAIN_CONDITIONS, PromptError, get_condition, phrase_inventory
from .report import FORMATS, Artifacts, ReportError, emit_report, f1_pivot_table, load_artifacts, probe_table, save_json

OUT_ENV = "SCAFFOLDKIT_OUT"
ABLATION_CONDITIONS = ("C1", "C2", "C2_fmri", "C2_weather")

log = logging.getLogger("scaffoldkit")


class ValidationError(Exception):
    pass


@dataclass
class RunConfig:
    cohort: list[Path] = field(default_factory=list)
    dictionary: Path | None = None
    conditions: list[str] = field(default_factory=lambda: list(MAIN_CONDITIONS))
    backend: str = "synthetic"
    layers: list[int] = field(default_factory=list)
    phrases: Path | None = None
    lexicon: Path | None = None
    seed: int = 0
    out: Path = Path("scaffoldkit_out")
    parcel_dir: Path | None = None
    image_dir: Path | None = None

    def validate(self) -> "RunConfig":
        if self.cohort and self.dictionary is None:
            raise ValidationError("--cohort needs --dictionary")
        for p in list(self.cohort) + [self.dictionary, self.phrases, self.lexicon, self.parcel_dir, self.image_dir]:
            if p is not None and not Path(p).exists():
                raise ValidationError(f"path does not exist: {p}")
        if not (self.backend == "synthetic" or self.backend.startswith("checkpoint:")):
            raise ValidationError(f"unknown backend {self.backend!r}; use synthetic or checkpoint:<id>")
        return self


def _condition_list(text: str) -> list[str]:
    tags = [t.strip() for t in text.split(",") if t.strip()]
    try:
        for t in tags:
            get_condition(t)
    except PromptError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    if not tags:
        raise argparse.ArgumentTypeError("empty condition list")
    return tags


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"layers must be comma-separated integers: {text!r}") from exc


def _formats(text: str) -> list[str]:
    fmts = [t.strip() for t in text.split(",") if t.strip()]
    bad = [f for f in fmts if f not in FORMATS]
    if bad or not fmts:
        raise argparse.ArgumentTypeError(f"formats must be drawn from {', '.join(FORMATS)}")
    return fmts


def _common(p: argparse.ArgumentParser, conditions: bool = True):
    p.add_argument("--cohort", action="append", type=Path, default=[], help="records file (repeatable)")
    p.add_argument("--dictionary", type=Path, help="data dictionary JSON")
    p.add_argument("--backend", default="synthetic", help="synthetic | checkpoint:<model id>")
    if conditions:
        p.add_argument("--condition", type=_condition_list, default=None, help="comma-separated condition tags")
    p.add_argument("--layers", type=_int_list, default=[], help="hidden-state layers to capture")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None, help=f"output directory (default ${OUT_ENV} or ./scaffoldkit_out)")
    p.add_argument("--n-subjects", type=int, default=200, help="synthetic cohort size")
    p.add_argument("--positive-fraction", type=float, default=0.4, help="synthetic cohort class share")
    p.add_argument("--parcel-dir", type=Path, help="per-subject parcellation text files <subject>.txt")
    p.add_argument("--image-dir", type=Path, help="per-subject MRI plot files <subject>.png")
    p.add_argument("--swap-pool", default=None, help="comma-separated out-of-domain image refs")
    p.add_argument("--a-true", type=float, default=2.0, help="synthetic: planted trigger sensitivity")
    p.add_argument("--b-true", type=float, default=-1.0, help="synthetic: planted bias")
    p.add_argument("--mention-rate", type=float, default=0.0, help="synthetic: share of triggered outputs that mention imaging")
    p.add_argument("--logit-noise", type=float, default=0.0, help="synthetic: per-prompt logit noise")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scaffoldkit", description="Diagnostics for prompt-triggered modality collapse.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serialize", help="cohort -> prompt texts")
    _common(p)
    p.add_argument("--missing", choices=("placeholder", "omit"), default="placeholder")

    p = sub.add_parser("run", help="conditions x subjects -> observation log")
    _common(p)

    p = sub.add_parser("confidence", help="observation log -> delta tables and group statistics")
    p.add_argument("--logs", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--pairs", default=None, help="base>target pairs, e.g. C1>C2,C1>C4")
    p.add_argument("--format", type=_formats, default=["markdown"])

    p = sub.add_parser("probe", help="phrase probe -> phrase table and response-curve fit")
    _common(p, conditions=False)
    p.add_argument("--phrases", default="default", help="phrase inventory JSON or 'default'")
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--probe-subjects", type=int, default=71)
    p.add_argument("--read-layer", choices=("divergence", "preceding"), default="divergence")
    p.add_argument("--format", type=_formats, default=["csv"])

    p = sub.add_parser("ablate", help="false-modality ablation -> F1 by condition")
    _common(p, conditions=False)
    p.add_argument("--format", type=_formats, default=["markdown"])
    p.add_argument("--average", choices=("binary", "macro"), default="binary")

    p = sub.add_parser("prefpairs", help="observation log -> preference-pair corpus")
    _common(p, conditions=False)
    p.add_argument("--logs", type=Path, required=True)
    p.add_argument("--lexicon", type=Path, default=None)
    p.add_argument("--max-rejected", type=int, default=4)
    p.add_argument("--no-balance", action="store_true")

    p = sub.add_parser("report", help="artifacts -> report files")
    p.add_argument("--artifacts", type=Path, default=None, help="directory written by earlier stages")
    p.add_argument("--fixture", default=None, help="alignment | phrases | for2107 | oasis3 | ablation:FOR2107 | ablation:OASIS-3")
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--format", type=_formats, default=list(FORMATS))
    p.add_argument("--no-plot-data", action="store_true")
    return parser


def _out_dir(args) -> Path:
    if args.out is not None:
        return args.out
    return Path(os.environ.get(OUT_ENV, "scaffoldkit_out"))


def _config(args) -> RunConfig:
    cfg = RunConfig(
        cohort=list(getattr(args, "cohort", []) or []),
        dictionary=getattr(args, "dictionary", None),
        conditions=getattr(args, "condition", None) or list(MAIN_CONDITIONS),
        backend=getattr(args, "backend", "synthetic"),
        layers=getattr(args, "layers", []),
        phrases=Path(args.phrases) if getattr(args, "phrases", "default") not in (None, "default") else None,
        lexicon=getattr(args, "lexicon", None),
        seed=getattr(args, "seed", 0),
        out=_out_dir(args),
        parcel_dir=getattr(args, "parcel_dir", None),
        image_dir=getattr(args, "image_dir", None),
    )
    return cfg.validate()


def _setup(args, cfg: RunConfig):
    """Cohort inputs, backend and fork for the configured run."""
    if cfg.cohort:
        records, dictionary, summary = load_cohort(cfg.cohort, cfg.dictionary)
        labels = dictionary.config.labels
    else:
        records, dictionary = make_synthetic_cohort(args.n_subjects, args.positive_fraction, seed=cfg.seed)
        summary = class_distribution(records)
        labels = FOR2107_LABELS

    if cfg.backend == "synthetic":
        setup = planted_setup(
            records, dictionary, labels, a_true=args.a_true, b_true=args.b_true,
            mention_rate=args.mention_rate, logit_noise=args.logit_noise, seed=cfg.seed,
        )
        inputs, backend, fork = setup.inputs, setup.backend, setup.fork
    else:
        backend = HFBackend.from_pretrained(cfg.backend.split(":", 1)[1])
        fork = backend.fork_for(labels)
        inputs = CohortInputs(records, dictionary, labels, seed=cfg.seed)
    if cfg.parcel_dir is not None:
        inputs.parcel_texts = {
            r.subject_id: (cfg.parcel_dir / f"{r.subject_id}.txt").read_text(encoding="utf-8")
            for r in records
            if (cfg.parcel_dir / f"{r.subject_id}.txt").exists()
        }
    if cfg.image_dir is not None:
        inputs.image_refs = {r.subject_id: str(cfg.image_dir / f"{r.subject_id}.png") for r in records}
    if getattr(args, "swap_pool", None):
        inputs.swap_pool = [s for s in args.swap_pool.split(",") if s]
    return inputs, backend, fork, summary


def cmd_serialize(args) -> int:
    cfg = _config(args)
    inputs, _, _, _ = _setup(args, cfg)
    inputs.missing = args.missing
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    path = out / "prompts.jsonl"
    with open(path, "w", encoding="utf-8") as f:
        for tag in cfg.conditions:
            cond = get_condition(tag)
            for i, rec in enumerate(inputs.records):
                b = inputs.bundle(rec, cond, i)
                f.write(json.dumps({**b.to_dict(), "text": b.text}, ensure_ascii=False, sort_keys=True) + "\n")
    print(path)
    return 0


def _matrix_json(matrix: ConditionMatrix, pivot=None) -> dict:
    d = matrix.to_dict()
    if pivot:
        d["pivot_conditions"] = list(pivot)
    return d


def cmd_run(args) -> int:
    cfg = _config(args)
    inputs, backend, fork, summary = _setup(args, cfg)
    obs = run_conditions(inputs, backend, cfg.conditions, fork, cfg.layers)
    out = cfg.out
    write_observations(out / "observations.jsonl", obs)
    matrix = condition_matrix(obs, summary, expected_conditions=cfg.conditions)
    save_json(out / "matrix.json", _matrix_json(matrix))
    save_json(out / "cohort.json", {"n_positive": summary.n_positive, "n_negative": summary.n_negative, "p": summary.p})
    print(out / "observations.jsonl")
    return 0


def _parse_pairs(text: str | None):
    if not text:
        return list(DELTA_PAIRS)
    pairs = []
    for item in text.split(","):
        if ">" not in item:
            raise ValidationError(f"pair {item!r} must look like BASE>TARGET")
        b, t = (s.strip() for s in item.split(">", 1))
        get_condition(b), get_condition(t)
        pairs.append((b, t))
    return pairs


def cmd_confidence(args) -> int:
    if not args.logs.exists():
        raise ValidationError(f"path does not exist: {args.logs}")
    obs = read_observations(args.logs, load_hidden=False)
    out = _out_dir(args)
    pairs = _parse_pairs(args.pairs)
    deltas, groups = [], []
    for model in sorted({o.model_id for o in obs}):
        conf = confidences_by_key(obs, model)
        present = {c for _, c in conf}
        for b, t in pairs:
            if b in present and t in present:
                deltas.append((model, summarize_deltas(paired_deltas(conf, b, t))))
        for cond in sorted(present):
            vals = [v for (s, c), v in conf.items() if c == cond]
            groups.append((model, group_statistics(vals, cond)))
    save_json(
        out / "confidence.json",
        {
            "deltas": [{"model": m, "base": d.base, "target": d.target, "mean": d.mean, "std": d.std, "n": d.n, "ddof": d.ddof} for m, d in deltas],
            "groups": [{"model": m, "condition": g.condition, "mean": g.mean, "std": g.std, "n": g.n, "ddof": g.ddof} for m, g in groups],
        },
    )
    art = Artifacts(deltas=deltas, groups=groups)
    emit_report(art, out, args.format)
    print(out / "confidence.json")
    return 0


def cmd_probe(args) -> int:
    cfg = _config(args)
    inputs, backend, fork, _ = _setup(args, cfg)
    phrases = phrase_inventory(cfg.phrases)
    rep = run_phrase_probe(inputs, backend, phrases, fork, n_subjects=args.probe_subjects, tau=args.tau, read_layer=args.read_layer)
    rows = [
        {"phrase_id": r.phrase_id, "category": r.category, "text": r.text, "mean_cosine": r.mean_cosine, "mean_delta": r.mean_delta, "n_skipped": r.n_skipped}
        for r in rep.phrases
    ]
    out = cfg.out
    save_json(
        out / "probe.json",
        {"phrases": rows, "fit": rep.fit_record(), "direction": rep.direction.to_dict(), "sweep": list(rep.sweep.scores), "subjects": rep.subjects},
    )
    save_json(out / "fit.json", rep.fit_record())
    emit_report([probe_table(rows)], out, args.format)
    print(out / "probe.json")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    inputs, backend, fork, summary = _setup(args, cfg)
    obs = run_conditions(inputs, backend, ABLATION_CONDITIONS, fork)
    out = cfg.out
    write_observations(out / "observations_ablation.jsonl", obs)
    matrix = condition_matrix(obs, summary, average=args.average, expected_conditions=ABLATION_CONDITIONS)
    save_json(out / "matrix.json", _matrix_json(matrix, ABLATION_CONDITIONS))
    emit_report([f1_pivot_table(matrix, ABLATION_CONDITIONS, name="ablation")], out, args.format)
    print(out / "ablation.md" if "markdown" in args.format else out / "matrix.json")
    return 0


def cmd_prefpairs(args) -> int:
    cfg = _config(args)
    if not args.logs.exists():
        raise ValidationError(f"path does not exist: {args.logs}")
    obs = read_observations(args.logs, load_hidden=False)
    lexicon = MentionLexicon.load(cfg.lexicon) if cfg.lexicon else None
    c1 = [o for o in obs if o.condition == "C1"]
    model_f1 = {r.model: r.f1 for r in condition_matrix(c1).rows} if c1 else {}
    prompts = {}
    try:
        inputs, _, _, _ = _setup(args, cfg)
        c1_cond = get_condition("C1")
        prompts = {r.subject_id: inputs.bundle(r, c1_cond).text for r in inputs.records}
    except (CohortError, OSError) as exc:
        log.warning("prompts unavailable: %s", exc)
    pairs, balance = build_preference_pairs(
        obs, prompts, lexicon, model_f1, max_rejected=args.max_rejected, seed=cfg.seed, balance=not args.no_balance
    )
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    write_pairs(out / "pairs.jsonl", pairs)
    save_json(out / "balance.json", balance.to_dict())
    print(out / "pairs.jsonl")
    return 0


def _fixture_artifacts(name: str) -> Artifacts:
    if name == "alignment":
        t = reference_values()["alignment"]
        return Artifacts(alignment=t["rows"], alignment_baseline=t["random_baseline"])
    if name == "phrases":
        t = reference_values()
        phrases = {p.phrase_id: p for p in phrase_inventory()}
        rows = [
            {"phrase_id": r["id"], "category": phrases[r["id"]].category, "text": phrases[r["id"]].text, "mean_cosine": r["cos"], "mean_delta": r["delta"]}
            for r in t["phrase_probe"]
        ]
        return Artifacts(probe=rows)
    m = fixture_matrix(name)
    return Artifacts(matrix=m)


def cmd_report(args) -> int:
    if args.artifacts is None and args.fixture is None:
        raise ValidationError("report needs --artifacts or --fixture")
    if args.fixture is not None:
        try:
            art = _fixture_artifacts(args.fixture)
        except ValueError as exc:
            raise ValidationError(str(exc)) from exc
    else:
        art = load_artifacts(args.artifacts)
    paths = emit_report(art, _out_dir(args), args.format, plot_data=not args.no_plot_data)
    for p in paths:
        print(p)
    return 0


COMMANDS = {
    "serialize": cmd_serialize,
    "run": cmd_run,
    "confidence": cmd_confidence,
    "probe": cmd_probe,
    "ablate": cmd_ablate,
    "prefpairs": cmd_prefpairs,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValidationError, CohortError, PromptError, BackendError, ReportError, ValueError, OSError) as exc:
        msg = " ".join(str(exc).split())
        print(f"scaffoldkit {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
