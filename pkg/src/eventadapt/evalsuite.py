"""Token-level scoring and lexical/semantic shift analysis."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import Corpus, IvOovPartition, SentenceRecord, TokenRecord

REPORT_SCHEMA_VERSION = 1
TYPE_CSV_FIELDS = ("token", "model", "target", "event_type", "correct")


class AlignmentError(ValueError):
    pass


@dataclass
class EvalReport:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    buckets: dict[str, "EvalReport"] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "counts": {"tp": self.tp, "fp": self.fp, "fn": self.fn},
            "buckets": {k: v.to_dict() for k, v in self.buckets.items()},
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        c = d["counts"]
        return cls(c["tp"], c["fp"], c["fn"], {k: cls.from_dict(v) for k, v in d.get("buckets", {}).items()},
                   dict(d.get("metadata", {})))


def _gold_sequences(gold) -> list[list[int]]:
    if isinstance(gold, Corpus):
        return [s.labels for s in gold.sentences()]
    return [g.labels if isinstance(g, SentenceRecord) else list(g) for g in gold]


def _check_alignment(pred, gold):
    if len(pred) != len(gold):
        raise AlignmentError(f"{len(pred)} predicted sentences vs {len(gold)} gold sentences")
    for i, (p, g) in enumerate(zip(pred, gold)):
        if len(p) != len(g):
            raise AlignmentError(f"sentence {i}: {len(p)} predicted labels vs {len(g)} gold tokens")


def score(pred: Sequence[Sequence[int]], gold, metadata: dict | None = None) -> EvalReport:
    """Token-level true/false positive and false negative counts."""
    gold_seqs = _gold_sequences(gold)
    _check_alignment(pred, gold_seqs)
    tp = fp = fn = 0
    for p_seq, g_seq in zip(pred, gold_seqs):
        for p, g in zip(p_seq, g_seq):
            if p and g:
                tp += 1
            elif p:
                fp += 1
            elif g:
                fn += 1
    return EvalReport(tp, fp, fn, metadata=dict(metadata or {}))


def bucket_score(pred: Sequence[Sequence[int]], gold, partition: IvOovPartition,
                 metadata: dict | None = None) -> EvalReport:
    """Overall report whose ``buckets`` split every token's outcome by its IV/OOV membership."""
    gold_seqs = _gold_sequences(gold)
    _check_alignment(pred, gold_seqs)
    overall = EvalReport(metadata=dict(metadata or {}))
    parts = {"IV": EvalReport(), "OOV": EvalReport()}
    for si, (p_seq, g_seq) in enumerate(zip(pred, gold_seqs)):
        for ti, (p, g) in enumerate(zip(p_seq, g_seq)):
            bucket = parts[partition.bucket_of((si, ti))]
            for rep in (overall, bucket):
                if p and g:
                    rep.tp += 1
                elif p:
                    rep.fp += 1
                elif g:
                    rep.fn += 1
    overall.buckets = parts
    return overall


MORPH_PATTERNS = {
    "ed": ("ed",),
    "ing": ("ing",),
    "tion_sion": ("tion", "sion"),
}
# POS each pattern is meant to capture: past-tense verbs, gerunds, nominalisations
MORPH_POS = {"ed": {"VERB"}, "ing": {"VERB", "NOUN"}, "tion_sion": {"NOUN"}}


def morph_pattern_report(correct_oov_events: Iterable[str | TokenRecord]) -> dict:
    """Suffix counts over correctly identified OOV events.

    Tokens given as ``TokenRecord`` with a POS tag also feed the
    POS-constrained counts (``-ed`` on verbs, ``-ing`` on verbs/nouns,
    ``-tion``/``-sion`` on nouns).
    """
    from .encoders import to_upos

    counts = {k: 0 for k in MORPH_PATTERNS}
    pos_counts = {k: 0 for k in MORPH_PATTERNS}
    any_count = any_pos = total = 0
    for item in correct_oov_events:
        text = item.text if isinstance(item, TokenRecord) else item
        pos = to_upos(item.pos) if isinstance(item, TokenRecord) else None
        word = text.casefold()
        total += 1
        hit = hit_pos = False
        for name, suffixes in MORPH_PATTERNS.items():
            if word.endswith(suffixes):
                counts[name] += 1
                hit = True
                if pos in MORPH_POS[name]:
                    pos_counts[name] += 1
                    hit_pos = True
        any_count += hit
        any_pos += hit_pos
    return {
        "counts": counts,
        "any": any_count,
        "total": total,
        "fraction": any_count / total if total else 0.0,
        "pos_constrained": {"counts": pos_counts, "any": any_pos,
                            "fraction": any_pos / total if total else 0.0},
    }


@dataclass
class TypeAnalysisRow:
    token: str
    model: str
    target: str
    event_type: str
    correct: int


@dataclass
class OovItem:
    position: tuple
    token: str
    gold: int
    event_type: str | None
    target: str


def oov_items(test: Corpus, partition: IvOovPartition, target: str) -> list[OovItem]:
    sents = test.sentences()
    items = []
    for si, ti in sorted(partition.oov):
        tok = sents[si].tokens[ti]
        items.append(OovItem((si, ti), tok.text, tok.label, tok.event_type, target))
    return items


def sample_type_analysis(oov_tokens: Sequence[OovItem], k: int, models: Mapping[str, Sequence[Sequence[int]]],
                         seed: int = 0) -> list[TypeAnalysisRow]:
    """Seeded sample of ``k`` OOV tokens without replacement, one row per (token, model).

    ``models`` maps a model id to its predicted label sequences for the corpus
    the positions refer to. Non-event tokens carry the type ``None``.
    """
    if k < 0:
        raise ValueError("k must be nonnegative")
    population = list(oov_tokens)
    if k > len(population):
        warnings.warn(f"requested {k} tokens but only {len(population)} available; using all of them")
        k = len(population)
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(len(population), size=k, replace=False).tolist()) if k else []
    rows = []
    for i in chosen:
        item = population[i]
        etype = item.event_type if item.gold and item.event_type else "None"
        si, ti = item.position
        for model_id, pred in models.items():
            rows.append(TypeAnalysisRow(item.token, model_id, item.target, etype, int(pred[si][ti] == item.gold)))
    return rows


def write_type_csv(rows: Iterable[TypeAnalysisRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=TYPE_CSV_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow(asdict(r))


# --------------------------------------------------------------------------
# reports

def _label(rep: EvalReport, i: int) -> str:
    return str(rep.metadata.get("model", f"model{i}"))


def plot_scores(reports: Sequence[EvalReport]):
    """Grouped P/R/F1 bars per model, one panel per bucket (overall, IV, OOV when present)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    panels = ["overall"] + [b for b in ("IV", "OOV") if all(b in r.buckets for r in reports)]
    fig, axes = plt.subplots(1, len(panels), figsize=(4.5 * len(panels), 3.5), squeeze=False)
    width = 0.25
    for ax, panel in zip(axes[0], panels):
        top = 0.0
        for j, metric in enumerate(("precision", "recall", "f1")):
            vals = [getattr(r if panel == "overall" else r.buckets[panel], metric) * 100 for r in reports]
            ax.bar(np.arange(len(reports)) + (j - 1) * width, vals, width, label=metric)
            top = max([top] + vals)
        ax.set_xticks(np.arange(len(reports)))
        ax.set_xticklabels([_label(r, i) for i, r in enumerate(reports)], rotation=30, ha="right")
        ax.set_ylim(0, max(100.0, top))
        ax.set_title(panel)
    axes[0][0].set_ylabel("score (%)")
    axes[0][-1].legend(fontsize="small")
    fig.tight_layout()
    return fig


def emit_report(reports: Sequence[EvalReport], out_dir) -> dict[str, Path]:
    """Write ``summary.md``, ``reports.json`` and ``scores.png`` into ``out_dir``."""
    if not reports:
        raise ValueError("need at least one report")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"cannot write reports to {out}: {exc}") from exc

    lines = ["| model | source | target | P | R | F1 | IV F1 | OOV F1 |", "|---|---|---|---|---|---|---|---|"]
    for i, r in enumerate(reports):
        iv = f"{r.buckets['IV'].f1 * 100:.1f}" if "IV" in r.buckets else "-"
        oov = f"{r.buckets['OOV'].f1 * 100:.1f}" if "OOV" in r.buckets else "-"
        lines.append(
            f"| {_label(r, i)} | {r.metadata.get('source', '-')} | {r.metadata.get('target', '-')} | "
            f"{r.precision * 100:.1f} | {r.recall * 100:.1f} | {r.f1 * 100:.1f} | {iv} | {oov} |"
        )
    paths = {"summary": out / "summary.md", "json": out / "reports.json", "chart": out / "scores.png"}
    paths["summary"].write_text("\n".join(lines) + "\n")
    paths["json"].write_text(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True))
    fig = plot_scores(reports)
    fig.savefig(paths["chart"], dpi=100)
    import matplotlib.pyplot as plt

    plt.close(fig)
    return paths


def load_reports(path) -> list[EvalReport]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = [data]
    return [EvalReport.from_dict(d) for d in data]
