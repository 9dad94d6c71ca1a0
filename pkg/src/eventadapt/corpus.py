"""Corpus data model, annotation parsers, statistics and agreement.

Everything downstream consumes the canonical JSONL layout: one document per
line, ``{doc_id, domain, sentences: [{tokens: [{text, pos, label, event_type,
char_start, char_end}]}]}``.
"""
from __future__ import annotations

import json
import logging
import re
import warnings
import xml.etree.ElementTree as ET
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Iterator, Sequence

logger = logging.getLogger(__name__)

EVENT_TYPES = (
    "State",
    "I-State",
    "Occurrence",
    "Aspectual",
    "ActivityPattern",
    "LongTermState",
    "None",
)
SPLITS = ("train", "dev", "test")

_TYPE_LOOKUP = {re.sub(r"[-_\s]", "", t).lower(): t for t in EVENT_TYPES}

TOKEN_RE = re.compile(r"\w+|[^\w\s]")
_SENT_END = {".", "!", "?"}


class CorpusError(Exception):
    pass


class ParseError(CorpusError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class IntegrityError(CorpusError):
    pass


@dataclass
class TokenRecord:
    text: str
    char_start: int
    char_end: int
    label: int = 0
    pos: str | None = None
    event_type: str | None = None

    def __post_init__(self):
        if not self.text:
            raise ValueError("token text must be non-empty")
        if self.char_start >= self.char_end:
            raise ValueError(f"bad offsets {self.char_start}..{self.char_end} for {self.text!r}")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if self.event_type is not None and self.event_type not in EVENT_TYPES:
            raise ValueError(f"unknown event type {self.event_type!r}")
        if self.label == 0 and self.event_type not in (None, "None"):
            raise ValueError("non-event token cannot carry an event type")

    def to_dict(self):
        return {
            "text": self.text,
            "pos": self.pos,
            "label": self.label,
            "event_type": self.event_type,
            "char_start": self.char_start,
            "char_end": self.char_end,
        }


@dataclass
class SentenceRecord:
    tokens: list[TokenRecord]
    doc_id: str = ""
    domain: str = ""

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("sentence must contain at least one token")

    def __len__(self):
        return len(self.tokens)

    @property
    def words(self) -> list[str]:
        return [t.text for t in self.tokens]

    @property
    def labels(self) -> list[int]:
        return [t.label for t in self.tokens]

    @property
    def pos_tags(self) -> list[str | None]:
        return [t.pos for t in self.tokens]


@dataclass
class SpanRecord:
    """An annotation span kept alongside the tokens (entities, raw events)."""

    id: str
    type: str
    start: int
    end: int
    text: str


@dataclass
class DocumentRecord:
    doc_id: str
    domain: str
    sentences: list[SentenceRecord]
    spans: list[SpanRecord] = field(default_factory=list)

    def tokens(self) -> Iterator[TokenRecord]:
        for s in self.sentences:
            yield from s.tokens

    def to_dict(self):
        d = {
            "doc_id": self.doc_id,
            "domain": self.domain,
            "sentences": [{"tokens": [t.to_dict() for t in s.tokens]} for s in self.sentences],
        }
        if self.spans:
            d["spans"] = [asdict(sp) for sp in self.spans]
        return d

    @classmethod
    def from_dict(cls, d):
        doc_id, domain = d["doc_id"], d.get("domain", "")
        sentences = [
            SentenceRecord([TokenRecord(**t) for t in s["tokens"]], doc_id, domain)
            for s in d["sentences"]
        ]
        spans = [SpanRecord(**sp) for sp in d.get("spans", [])]
        return cls(doc_id, domain, sentences, spans)


@dataclass
class Corpus:
    documents: list[DocumentRecord]
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        seen = set()
        for d in self.documents:
            if d.doc_id in seen:
                raise ValueError(f"duplicate doc_id {d.doc_id!r}")
            seen.add(d.doc_id)

    def sentences(self) -> list[SentenceRecord]:
        return [s for d in self.documents for s in d.sentences]

    def tokens(self) -> Iterator[TokenRecord]:
        for d in self.documents:
            yield from d.tokens()

    def __len__(self):
        return len(self.documents)


# --------------------------------------------------------------------------
# tokenization

def tokenize(text: str, offset: int = 0) -> list[tuple[str, int, int]]:
    """Whitespace + punctuation split that keeps character offsets."""
    return [(m.group(), m.start() + offset, m.end() + offset) for m in TOKEN_RE.finditer(text)]


def segment(text: str) -> list[list[tuple[str, int, int]]]:
    """Split into sentences at newlines and sentence-final punctuation."""
    sentences = []
    pos = 0
    for line in text.splitlines(keepends=True):
        current = []
        for tok in tokenize(line, pos):
            current.append(tok)
            if tok[0] in _SENT_END:
                sentences.append(current)
                current = []
        if current:
            sentences.append(current)
        pos += len(line)
    return sentences


def _overlapping(tokens, start, end):
    return [i for i, (_, s, e) in enumerate(tokens) if s < end and e > start]


def _build_document(doc_id, domain, text, events, pos_tags=None):
    """Tokenize ``text`` and label every token overlapped by an event span.

    ``events`` holds ``(start, end, event_type)`` triples.
    """
    flat = [tok for sent in segment(text) for tok in sent]
    labels = [0] * len(flat)
    types: list[str | None] = [None] * len(flat)
    for start, end, etype in events:
        hit = _overlapping(flat, start, end)
        if not hit:
            logger.warning("%s: event span %d-%d covers no token", doc_id, start, end)
            continue
        if flat[hit[0]][1] < start or flat[hit[-1]][2] > end:
            logger.warning(
                "%s: event span %d-%d %r is not token-aligned; labelling %d overlapped token(s)",
                doc_id, start, end, text[start:end], len(hit),
            )
        for i in hit:
            labels[i] = 1
            if etype is not None:
                types[i] = etype
    sentences = []
    i = 0
    for sent in segment(text):
        toks = []
        for word, s, e in sent:
            toks.append(TokenRecord(word, s, e, labels[i], pos_tags[i] if pos_tags else None, types[i]))
            i += 1
        sentences.append(SentenceRecord(toks, doc_id, domain))
    return DocumentRecord(doc_id, domain, sentences)


# --------------------------------------------------------------------------
# BRAT standoff

_BRAT_T = re.compile(r"^(T\d+)\t(\S+) (\d+) (\d+)\t(.*)$")
_BRAT_A = re.compile(r"^(A\d+)\t(\S+) (T\d+)(?: (\S+))?$")


def parse_brat(ann_text: str, txt_text: str, doc_id: str = "doc", domain: str = "",
               event_types: Sequence[str] = ("EVENT",)) -> DocumentRecord:
    """Read the textbound subset of a BRAT ``.ann`` file against its ``.txt``.

    Spans whose type is in ``event_types`` (case-insensitive) mark triggers;
    every other textbound span is kept in ``DocumentRecord.spans`` only. An
    ``A`` line whose value names an event type (``A1<TAB>Type T3 Occurrence``)
    sets the event type of that trigger.
    """
    wanted = {t.lower() for t in event_types}
    spans: list[SpanRecord] = []
    attrs: dict[str, str] = {}
    for lineno, raw in enumerate(ann_text.splitlines(), 1):
        line = raw.rstrip("\r")
        if not line.strip() or line.startswith("#"):
            continue
        if line.startswith("T"):
            m = _BRAT_T.match(line)
            if m is None:
                if re.match(r"^T\d+\t\S+ \d+ \d+;", line):
                    raise ParseError("discontinuous spans are not supported", lineno)
                raise ParseError(f"malformed textbound line {line!r}", lineno)
            tid, typ, start, end, surface = m.groups()
            start, end = int(start), int(end)
            if not 0 <= start < end <= len(txt_text):
                raise IntegrityError(f"line {lineno}: offsets {start}-{end} outside document")
            if txt_text[start:end] != surface:
                raise IntegrityError(
                    f"line {lineno}: span {tid} text {surface!r} != document slice {txt_text[start:end]!r}"
                )
            spans.append(SpanRecord(tid, typ, start, end, surface))
        elif line.startswith("A") or line.startswith("M"):
            m = _BRAT_A.match(line)
            if m and m.group(4):
                key = re.sub(r"[-_\s]", "", m.group(4)).lower()
                if key in _TYPE_LOOKUP:
                    attrs[m.group(3)] = _TYPE_LOOKUP[key]
        else:
            logger.debug("skipping non-textbound line %d: %r", lineno, line)

    events = [(sp.start, sp.end, attrs.get(sp.id)) for sp in spans if sp.type.lower() in wanted]
    doc = _build_document(doc_id, domain, txt_text, events)
    doc.spans = spans
    return doc


def read_brat(ann_path, domain: str = "", **kw) -> DocumentRecord:
    ann_path = Path(ann_path)
    txt = ann_path.with_suffix(".txt").read_text(encoding="utf-8")
    return parse_brat(ann_path.read_text(encoding="utf-8"), txt, ann_path.stem, domain, **kw)


# --------------------------------------------------------------------------
# TimeML

_XML_PROLOG = re.compile(r"<\?xml[^>]*\?>|<!DOCTYPE[^>]*>", re.I)


def map_event_class(value: str | None) -> str | None:
    if value is None:
        return None
    return _TYPE_LOOKUP.get(re.sub(r"[-_\s]", "", value).lower())


def parse_timeml(xml_text: str, doc_id: str | None = None, domain: str = "news") -> DocumentRecord:
    """Read EVENT elements from TimeML markup; all other tags are stripped.

    Accepts both full documents and bare fragments. The EVENT ``class``
    attribute becomes the event type when it names one of ``EVENT_TYPES``;
    any other class is kept as an event with type ``None``.
    """
    body = _XML_PROLOG.sub("", xml_text)
    try:
        root = ET.fromstring(f"<_root>{body}</_root>")
    except ET.ParseError as exc:
        raise ParseError(f"malformed TimeML: {exc}", exc.position[0] if exc.position else None) from exc

    pieces: list[str] = []
    events: list[tuple[int, int, str | None]] = []
    length = 0

    def walk(elem):
        nonlocal length
        start = length
        if elem.text:
            pieces.append(elem.text)
            length += len(elem.text)
        for child in elem:
            walk(child)
            if child.tail:
                pieces.append(child.tail)
                length += len(child.tail)
        if elem.tag == "EVENT":
            cls = elem.get("class")
            etype = map_event_class(cls)
            if cls is not None and etype is None:
                warnings.warn(f"unknown TimeML event class {cls!r}; event type set to None", stacklevel=3)
            events.append((start, length, etype))

    walk(root)
    text = "".join(pieces)
    if doc_id is None:
        node = root.find(".//DOCID")
        doc_id = node.text.strip() if node is not None and node.text else "doc"
    return _build_document(doc_id, domain, text, events)


def read_timeml(path, domain: str = "news") -> DocumentRecord:
    path = Path(path)
    return parse_timeml(path.read_text(encoding="utf-8"), doc_id=path.stem, domain=domain)


# --------------------------------------------------------------------------
# canonical JSONL

def write_jsonl(corpus: Corpus | Iterable[DocumentRecord], path) -> None:
    docs = corpus.documents if isinstance(corpus, Corpus) else corpus
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps(doc.to_dict(), ensure_ascii=False) + "\n")


def read_jsonl(path, split: str = "train") -> Corpus:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                docs.append(DocumentRecord.from_dict(json.loads(line)))
    return Corpus(docs, split)


def read_raw_text(path, domain: str = "", doc_id: str | None = None, split: str = "train") -> Corpus:
    """One sentence per line, tokens separated by whitespace; all labels 0."""
    path = Path(path)
    doc_id = doc_id or path.stem
    sentences = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            toks = [TokenRecord(w, s, e) for w, s, e in tokenize(line)]
            if toks:
                sentences.append(SentenceRecord(toks, doc_id, domain))
    return Corpus([DocumentRecord(doc_id, domain, sentences)], split)


def load_corpus(path, split: str = "train", domain: str = "") -> Corpus:
    """Load canonical JSONL, a plain-text file, or a directory of ``.ann``/``.tml`` files."""
    path = Path(path)
    if path.is_dir():
        docs = [read_brat(p, domain) for p in sorted(path.glob("*.ann"))]
        docs += [read_timeml(p, domain or "news") for p in sorted(path.glob("*.tml"))]
        if not docs:
            raise CorpusError(f"no .ann or .tml files in {path}")
        return Corpus(docs, split)
    if path.suffix in (".jsonl", ".json"):
        return read_jsonl(path, split)
    if path.suffix == ".ann":
        return Corpus([read_brat(path, domain)], split)
    if path.suffix in (".tml", ".xml"):
        return Corpus([read_timeml(path, domain or "news")], split)
    return read_raw_text(path, domain, split=split)


# --------------------------------------------------------------------------
# statistics

@dataclass
class StatsRecord:
    n_files: int = 0
    n_tokens: int = 0
    n_events: int = 0
    event_density: float = 0.0
    vocab_size: int = 0
    event_vocab_size: int = 0
    case_folded: bool = True

    def to_dict(self):
        return asdict(self)

    def to_text(self) -> str:
        return "\n".join(f"{k}\t{v}" for k, v in asdict(self).items()) + "\n"


def corpus_stats(c: Corpus) -> StatsRecord:
    n_tokens = n_events = 0
    vocab, event_vocab = set(), set()
    for tok in c.tokens():
        n_tokens += 1
        folded = tok.text.casefold()
        vocab.add(folded)
        if tok.label:
            n_events += 1
            event_vocab.add(folded)
    return StatsRecord(
        n_files=len(c.documents),
        n_tokens=n_tokens,
        n_events=n_events,
        event_density=n_events / n_tokens if n_tokens else 0.0,
        vocab_size=len(vocab),
        event_vocab_size=len(event_vocab),
    )


def cohens_kappa(a: Sequence[Hashable], b: Sequence[Hashable]) -> float:
    """Chance-corrected agreement between two label sequences over the same tokens."""
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    n = len(a)
    if n == 0:
        raise ValueError("cannot compute agreement over zero items")
    p_o = sum(x == y for x, y in zip(a, b)) / n
    ca, cb = Counter(a), Counter(b)
    p_e = sum(ca[k] * cb[k] for k in ca) / (n * n)
    if p_e == 1.0:
        return 1.0
    return (p_o - p_e) / (1.0 - p_e)


def span_labels(doc: DocumentRecord, types: Iterable[str]) -> list[int]:
    """Per-token 0/1 indicator of overlap with any span of the given types."""
    wanted = {t.lower() for t in types}
    chosen = [sp for sp in doc.spans if sp.type.lower() in wanted]
    return [int(any(sp.start < t.char_end and sp.end > t.char_start for sp in chosen)) for t in doc.tokens()]


# --------------------------------------------------------------------------
# vocabulary and IV/OOV

class Vocab:
    UNK = "<unk>"

    def __init__(self, words: Iterable[str] = (), casefold: bool = True):
        self.casefold = casefold
        self.itos = [self.UNK]
        self.stoi = {self.UNK: 0}
        for w in words:
            self.add(w)

    @property
    def unk_id(self) -> int:
        return 0

    def norm(self, word: str) -> str:
        return word.casefold() if self.casefold else word

    def add(self, word: str) -> int:
        w = self.norm(word)
        if w not in self.stoi:
            self.stoi[w] = len(self.itos)
            self.itos.append(w)
        return self.stoi[w]

    def __contains__(self, word: str) -> bool:
        return self.norm(word) in self.stoi

    def __getitem__(self, word: str) -> int:
        return self.stoi.get(self.norm(word), 0)

    def __len__(self):
        return len(self.itos)

    def lookup(self, idx: int) -> str:
        return self.itos[idx]

    def to_dict(self):
        return {"casefold": self.casefold, "words": self.itos[1:]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["words"], d.get("casefold", True))


def build_vocab(train: Corpus, casefold: bool = True) -> Vocab:
    return Vocab((t.text for t in train.tokens()), casefold)


@dataclass(frozen=True)
class IvOovPartition:
    """Token positions ``(sentence_index, token_index)`` of a test corpus split by vocabulary membership."""

    iv: frozenset
    oov: frozenset
    words: dict = field(compare=False, default_factory=dict)

    def bucket_of(self, position) -> str:
        if position in self.iv:
            return "IV"
        if position in self.oov:
            return "OOV"
        raise KeyError(f"position {position} is in neither bucket")

    def iv_words(self) -> set[str]:
        return {self.words[p] for p in self.iv}

    def oov_words(self) -> set[str]:
        return {self.words[p] for p in self.oov}


def iv_oov_partition(test: Corpus, v: Vocab) -> IvOovPartition:
    iv, oov, words = set(), set(), {}
    for si, sent in enumerate(test.sentences()):
        for ti, tok in enumerate(sent.tokens):
            pos = (si, ti)
            words[pos] = v.norm(tok.text)
            (iv if tok.text in v else oov).add(pos)
    return IvOovPartition(frozenset(iv), frozenset(oov), words)
