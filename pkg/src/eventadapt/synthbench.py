"""Seeded generator of paired source/target corpora with controlled shift.

Sentences come from a small compositional frame grammar. Content slots are
filled from type-tagged pseudo-word lexicons; function words are shared by
both domains and never substituted. The target lexicon replaces a fixed
fraction of each content category with target-only words, optionally with
event-typical suffixes, and a fraction of source sentences borrows one
target-only word. Every count the checks need is recorded while tokens are
emitted, so the ground truth never comes from re-measuring the output.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .corpus import (Corpus, DocumentRecord, SentenceRecord, TokenRecord, build_vocab, corpus_stats,
                     iv_oov_partition, write_jsonl)

SOURCE_TYPE_MIX = {"Occurrence": 0.55, "State": 0.2, "I-State": 0.15, "Aspectual": 0.1}
TARGET_TYPE_MIX = {"Occurrence": 0.3, "State": 0.15, "I-State": 0.1, "Aspectual": 0.05,
                   "LongTermState": 0.25, "ActivityPattern": 0.15}

FUNCTION_WORDS = {
    "DET": (("the", "DET"), ("a", "DET"), ("this", "DET"), ("that", "DET")),
    "PRON": (("she", "PRON"), ("he", "PRON"), ("they", "PRON"), ("we", "PRON")),
    "AUX": (("was", "AUX"), ("is", "AUX"), ("were", "AUX"), ("has", "AUX"), ("had", "AUX")),
    "NEG": (("not", "PART"), ("never", "ADV")),
    "ADP_EV": (("after", "ADP"), ("during", "ADP"), ("before", "ADP"), ("following", "ADP")),
    "ADP_EN": (("with", "ADP"), ("of", "ADP"), ("on", "ADP"), ("into", "ADP")),
    "LIGHT": (("take", "VERB"), ("get", "VERB"), ("give", "VERB"), ("keep", "VERB")),
    "ADV": (("then", "ADV"), ("also", "ADV"), ("today", "ADV"), ("again", "ADV")),
    "CCONJ": (("and", "CCONJ"), ("or", "CCONJ")),
}
FUNCTION_SET = {w for ws in FUNCTION_WORDS.values() for w, _ in ws} | {".", ","}

# content slots: V event verb, N event noun, E entity noun, J adjective, X noun that is an event half the time
SUBJECTS = ("{PRON}", "{DET} E", "{DET} J E", "{DET} X", "{DET} N")
PREDICATES = ("{AUX} V", "V {DET} E", "V {DET} X", "{AUX} J", "{LIGHT} {DET} N", "{AUX} {NEG} V",
              "V {CCONJ} V", "V {DET} J X")
ADJUNCTS = ("", "{ADP_EV} {DET} N", "{ADP_EN} {DET} E", "{ADP_EN} {DET} X", "{ADV}")
ALL_FRAMES = tuple(" ".join(p for p in (s, v, a, ".") if p)
                   for s, v, a in itertools.product(SUBJECTS, PREDICATES, ADJUNCTS))

SUFFIXES = {"V": ("ed", "ing"), "N": ("tion", "sion")}
PATTERN_ENDINGS = ("ed", "ing", "tion", "sion")
CONTENT_POS = {"V": "VERB", "N": "NOUN", "E": "NOUN", "J": "ADJ"}
EVENT_SLOTS = ("V", "N")

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


class SpecError(ValueError):
    pass


@dataclass
class ShiftSpec:
    substitution_rate: float = 0.5
    morph_pattern_rate: float = 0.5
    source_morph_rate: float = 0.5
    type_mix: dict = field(default_factory=lambda: dict(TARGET_TYPE_MIX))
    source_type_mix: dict = field(default_factory=lambda: dict(SOURCE_TYPE_MIX))
    leak_rate: float = 0.1
    ambiguous_event_rate: float = 0.5
    lexicon_sizes: dict = field(default_factory=lambda: {"V": 50, "N": 50, "E": 60, "J": 40})
    frames_per_domain: int = 20
    shared_frames: int = 8
    source_train_sentences: int = 1200
    source_dev_sentences: int = 300
    target_test_sentences: int = 600
    target_raw_tokens: int = 50_000
    source_raw_tokens: int = 50_000
    sentences_per_doc: int = 20
    seed: int = 0

    def validate(self):
        for name in ("substitution_rate", "morph_pattern_rate", "source_morph_rate", "leak_rate",
                     "ambiguous_event_rate"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise SpecError(f"{name} must be in [0, 1], got {v}")
        for name, mix in (("type_mix", self.type_mix), ("source_type_mix", self.source_type_mix)):
            if abs(sum(mix.values()) - 1) > 1e-9 or min(mix.values()) < 0:
                raise SpecError(f"{name} must be a distribution summing to 1")
        if set(self.lexicon_sizes) != set(CONTENT_POS):
            raise SpecError(f"lexicon_sizes needs keys {sorted(CONTENT_POS)}")
        if min(self.lexicon_sizes.values()) < 2:
            raise SpecError("each lexicon category needs at least 2 words")
        if not 0 <= self.shared_frames <= self.frames_per_domain:
            raise SpecError("shared_frames must be between 0 and frames_per_domain")
        if 2 * self.frames_per_domain - self.shared_frames > len(ALL_FRAMES):
            raise SpecError(f"grammar only has {len(ALL_FRAMES)} frames")
        if min(self.source_train_sentences, self.source_dev_sentences, self.target_test_sentences) < 1:
            raise SpecError("every labeled split needs at least one sentence")
        if self.sentences_per_doc < 1:
            raise SpecError("sentences_per_doc must be positive")
        if self.target_raw_tokens < 1 or self.source_raw_tokens < 1:
            raise SpecError("raw text sizes must be positive")


@dataclass
class Entry:
    word: str
    slot: str
    target_only: bool = False
    event_type: str | None = None

    @property
    def label(self) -> int:
        return int(self.slot in EVENT_SLOTS)


@dataclass
class GroundTruth:
    counts: dict
    oov_positions: list
    oov_event_positions: list
    oov_event_words: list
    contains_target_vocab: list
    target_only_words: list
    source_frames: list
    target_frames: list
    spec: dict

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("oov_positions", "oov_event_positions"):
            d[k] = [tuple(p) for p in d[k]]
        return cls(**d)


@dataclass
class SynthBench:
    source_train: Corpus
    source_dev: Corpus
    target_test: Corpus
    target_raw: Corpus
    source_raw: Corpus
    truth: GroundTruth

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {}
        for name in ("source_train", "source_dev", "target_test", "target_raw", "source_raw"):
            paths[name] = out / f"{name}.jsonl"
            write_jsonl(getattr(self, name), paths[name])
        for name in ("target_raw", "source_raw"):
            paths[f"{name}_text"] = out / f"{name}.txt"
            with open(paths[f"{name}_text"], "w", encoding="utf-8") as fh:
                for s in getattr(self, name).sentences():
                    fh.write(" ".join(s.words) + "\n")
        paths["truth"] = out / "ground_truth.json"
        paths["truth"].write_text(json.dumps(self.truth.to_dict(), indent=1, sort_keys=True))
        return paths


class _Tally:
    def __init__(self):
        self.n_tokens = self.n_events = self.n_sentences = 0
        self.vocab: set[str] = set()
        self.event_vocab: set[str] = set()

    def add(self, word, label):
        self.n_tokens += 1
        self.vocab.add(word.casefold())
        if label:
            self.n_events += 1
            self.event_vocab.add(word.casefold())

    def as_dict(self, n_files):
        return {"n_files": n_files, "n_tokens": self.n_tokens, "n_events": self.n_events,
                "event_density": self.n_events / self.n_tokens if self.n_tokens else 0.0,
                "vocab_size": len(self.vocab), "event_vocab_size": len(self.event_vocab)}


class _Generator:
    def __init__(self, spec: ShiftSpec):
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed)
        self.used: set[str] = set(FUNCTION_SET)

    def pseudo_word(self, suffix: str = "") -> str:
        for _ in range(10_000):
            n = int(self.rng.integers(2, 4))
            w = "".join(self.rng.choice(list(_CONSONANTS)) + self.rng.choice(list(_VOWELS)) for _ in range(n))
            if self.rng.random() < 0.4:
                w += self.rng.choice(list("lmnrst"))
            if w.endswith(PATTERN_ENDINGS):
                continue
            w += suffix
            if w not in self.used:
                self.used.add(w)
                return w
        raise SpecError("ran out of pseudo-words; lexicon too large")

    def event_type(self, mix):
        names = list(mix)
        return names[int(self.rng.choice(len(names), p=[mix[n] for n in names]))]

    def entry(self, slot, target_only, morph_rate, mix):
        suffix = ""
        if slot in SUFFIXES and self.rng.random() < morph_rate:
            suffix = SUFFIXES[slot][int(self.rng.integers(len(SUFFIXES[slot])))]
        etype = self.event_type(mix) if slot in EVENT_SLOTS else None
        return Entry(self.pseudo_word(suffix), slot, target_only, etype)

    def lexicons(self):
        spec = self.spec
        source, target = {}, {}
        for slot, n in spec.lexicon_sizes.items():
            source[slot] = [self.entry(slot, False, spec.source_morph_rate, spec.source_type_mix) for _ in range(n)]
            n_sub = int(round(spec.substitution_rate * n))
            replaced = set(self.rng.choice(n, size=n_sub, replace=False).tolist())
            target[slot] = [self.entry(slot, True, spec.morph_pattern_rate, spec.type_mix) if i in replaced else e
                            for i, e in enumerate(source[slot])]
        return source, target

    def frames(self):
        spec = self.spec
        order = self.rng.permutation(len(ALL_FRAMES)).tolist()
        src = order[:spec.frames_per_domain]
        tgt = src[:spec.shared_frames] + order[spec.frames_per_domain:2 * spec.frames_per_domain - spec.shared_frames]
        return [ALL_FRAMES[i] for i in src], [ALL_FRAMES[i] for i in tgt]

    def sentence(self, frame, lexicon, leak_lexicon=None):
        """Fill a frame; returns ``[(word, pos, label, event_type, target_only)]``."""
        rng = self.rng
        slots = []
        for piece in frame.split():
            if piece.startswith("{"):
                w, pos = FUNCTION_WORDS[piece[1:-1]][int(rng.integers(len(FUNCTION_WORDS[piece[1:-1]])))]
                slots.append([w, pos, 0, None, False])
            elif piece in (".", ","):
                slots.append([piece, "PUNCT", 0, None, False])
            else:
                slot = piece
                if slot == "X":
                    slot = "N" if rng.random() < self.spec.ambiguous_event_rate else "E"
                slots.append(slot)
        content = [i for i, s in enumerate(slots) if isinstance(s, str)]
        leak_at = None
        if leak_lexicon is not None and content:
            options = [i for i in content if leak_lexicon[slots[i]]]
            if options:
                leak_at = options[int(rng.integers(len(options)))]
        out = []
        for i, s in enumerate(slots):
            if isinstance(s, str):
                pool = leak_lexicon[s] if i == leak_at else lexicon[s]
                e = pool[int(rng.integers(len(pool)))]
                out.append((e.word, CONTENT_POS[s], e.label, e.event_type, e.target_only))
            else:
                out.append(tuple(s))
        return out


def _to_corpus(rows, prefix, domain, split, per_doc, tally: _Tally, labeled=True):
    docs = []
    for d0 in range(0, len(rows), per_doc):
        doc_id = f"{prefix}-{d0 // per_doc:04d}"
        sentences = []
        offset = 0
        for row in rows[d0:d0 + per_doc]:
            toks = []
            for word, pos, label, etype, _ in row:
                label = label if labeled else 0
                toks.append(TokenRecord(word, offset, offset + len(word), label, pos, etype if label else None))
                tally.add(word, label)
                offset += len(word) + 1
            sentences.append(SentenceRecord(toks, doc_id, domain))
        docs.append(DocumentRecord(doc_id, domain, sentences))
    return Corpus(docs, split)


def generate(spec: ShiftSpec = ShiftSpec()) -> SynthBench:
    spec.validate()
    g = _Generator(spec)
    src_lex, tgt_lex = g.lexicons()
    leak_lex = {slot: [e for e in entries if e.target_only] for slot, entries in tgt_lex.items()}
    src_frames, tgt_frames = g.frames()

    def draw(frames, lexicon, n=None, tokens=None, leak=0.0):
        rows, flags, total = [], [], 0
        while (n is not None and len(rows) < n) or (tokens is not None and total < tokens):
            frame = frames[int(g.rng.integers(len(frames)))]
            leaking = leak > 0 and g.rng.random() < leak
            row = g.sentence(frame, lexicon, leak_lex if leaking else None)
            rows.append(row)
            flags.append(any(t[4] for t in row))
            total += len(row)
        return rows, flags

    train_rows, train_flags = draw(src_frames, src_lex, n=spec.source_train_sentences, leak=spec.leak_rate)
    dev_rows, _ = draw(src_frames, src_lex, n=spec.source_dev_sentences, leak=spec.leak_rate)
    test_rows, _ = draw(tgt_frames, tgt_lex, n=spec.target_test_sentences)
    traw_rows, _ = draw(tgt_frames, tgt_lex, tokens=spec.target_raw_tokens)
    sraw_rows, _ = draw(src_frames, src_lex, tokens=spec.source_raw_tokens, leak=spec.leak_rate)

    per = spec.sentences_per_doc
    tallies = {k: _Tally() for k in ("source_train", "source_dev", "target_test", "target_raw", "source_raw")}
    corpora = {
        "source_train": _to_corpus(train_rows, "src-train", "source", "train", per, tallies["source_train"]),
        "source_dev": _to_corpus(dev_rows, "src-dev", "source", "dev", per, tallies["source_dev"]),
        "target_test": _to_corpus(test_rows, "tgt-test", "target", "test", per, tallies["target_test"]),
        "target_raw": _to_corpus(traw_rows, "tgt-raw", "target", "train", per, tallies["target_raw"], labeled=False),
        "source_raw": _to_corpus(sraw_rows, "src-raw", "source", "train", per, tallies["source_raw"], labeled=False),
    }
    counts = {k: tallies[k].as_dict(len(corpora[k].documents)) for k in tallies}

    # OOV ground truth: target test tokens whose form never appeared in the source training rows
    seen = tallies["source_train"].vocab
    oov, oov_events, oov_event_words = [], [], set()
    for si, row in enumerate(test_rows):
        for ti, (word, _, label, _, _) in enumerate(row):
            if word.casefold() not in seen:
                oov.append((si, ti))
                if label:
                    oov_events.append((si, ti))
                    oov_event_words.add(word.casefold())

    truth = GroundTruth(
        counts=counts,
        oov_positions=oov,
        oov_event_positions=oov_events,
        oov_event_words=sorted(oov_event_words),
        contains_target_vocab=train_flags,
        target_only_words=sorted(e.word for es in leak_lex.values() for e in es),
        source_frames=src_frames,
        target_frames=tgt_frames,
        spec=asdict(spec),
    )
    return SynthBench(truth=truth, **corpora)


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


def oracle_checks(bench: SynthBench, truth: GroundTruth | None = None) -> list[Check]:
    """Compare measured statistics of the corpora with the generator's records."""
    truth = truth or bench.truth
    checks = []
    for name in ("source_train", "source_dev", "target_test", "target_raw", "source_raw"):
        got = corpus_stats(getattr(bench, name)).to_dict()
        want = truth.counts[name]
        for key in ("n_files", "n_tokens", "n_events", "vocab_size", "event_vocab_size"):
            checks.append(Check(f"{name}.{key}", got[key] == want[key], f"measured {got[key]} vs {want[key]}"))
        exact = got["n_events"] * want["n_tokens"] == want["n_events"] * got["n_tokens"]
        checks.append(Check(f"{name}.event_density", exact and got["event_density"] == want["event_density"],
                            f"measured {got['event_density']} vs {want['event_density']}"))

    part = iv_oov_partition(bench.target_test, build_vocab(bench.source_train))
    want_oov = set(map(tuple, truth.oov_positions))
    checks.append(Check("target_test.oov_partition", set(part.oov) == want_oov,
                        f"{len(part.oov)} measured vs {len(want_oov)} recorded OOV tokens"))
    sents = bench.target_test.sentences()
    got_events = {p for p in part.oov if sents[p[0]].tokens[p[1]].label}
    checks.append(Check("target_test.oov_events", got_events == set(map(tuple, truth.oov_event_positions)),
                        f"{len(got_events)} measured vs {len(truth.oov_event_positions)} recorded OOV events"))

    target_only = set(truth.target_only_words)
    flags = [any(t.text in target_only for t in s.tokens) for s in bench.source_train.sentences()]
    checks.append(Check("source_train.contains_target_vocab", flags == list(truth.contains_target_vocab),
                        f"{sum(flags)} measured vs {sum(truth.contains_target_vocab)} recorded"))
    return checks
