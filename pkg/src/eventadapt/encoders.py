"""Per-word feature extraction: contextual encoders and POS embedding tables."""
from __future__ import annotations

import contextlib
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .corpus import SentenceRecord

CACHE_ENV = "EVENTADAPT_CACHE"

# Universal POS tagset
UPOS_TAGS = (
    "ADJ", "ADP", "ADV", "AUX", "CCONJ", "DET", "INTJ", "NOUN", "NUM",
    "PART", "PRON", "PROPN", "PUNCT", "SCONJ", "SYM", "VERB", "X",
)

@contextlib.contextmanager
def _quiet_hf():
    """Silence transformers warnings and progress bars for the duration."""
    from transformers.utils import logging as hf_logging

    verbosity = hf_logging.get_verbosity()
    bars = hf_logging.is_progress_bar_enabled()
    hf_logging.set_verbosity_error()
    hf_logging.disable_progress_bar()
    try:
        yield
    finally:
        hf_logging.set_verbosity(verbosity)
        if bars:
            hf_logging.enable_progress_bar()


_PTB_TO_UPOS = {
    "CC": "CCONJ", "CD": "NUM", "DT": "DET", "EX": "PRON", "FW": "X", "IN": "ADP",
    "JJ": "ADJ", "JJR": "ADJ", "JJS": "ADJ", "LS": "X", "MD": "AUX", "NN": "NOUN",
    "NNS": "NOUN", "NNP": "PROPN", "NNPS": "PROPN", "PDT": "DET", "POS": "PART",
    "PRP": "PRON", "PRP$": "PRON", "RB": "ADV", "RBR": "ADV", "RBS": "ADV", "RP": "ADP",
    "SYM": "SYM", "TO": "PART", "UH": "INTJ", "VB": "VERB", "VBD": "VERB", "VBG": "VERB",
    "VBN": "VERB", "VBP": "VERB", "VBZ": "VERB", "WDT": "DET", "WP": "PRON", "WP$": "PRON",
    "WRB": "ADV", ".": "PUNCT", ",": "PUNCT", ":": "PUNCT", "``": "PUNCT", "''": "PUNCT",
    "-LRB-": "PUNCT", "-RRB-": "PUNCT", "HYPH": "PUNCT", "NFP": "PUNCT", "$": "SYM", "#": "SYM",
}


def to_upos(tag: str | None) -> str | None:
    """Map a Penn Treebank tag (as emitted by CoreNLP) onto the universal tagset.

    Tags from neither set pass through unchanged, so lookups send them to the
    unknown row.
    """
    if tag is None or tag in UPOS_TAGS:
        return tag
    return _PTB_TO_UPOS.get(tag, tag)


class ConfigurationError(Exception):
    pass


@dataclass
class EncoderConfig:
    checkpoint_id: str
    layers_to_concat: int = 4
    subword_to_word: str = "first_subtoken"
    trainable: bool = False
    # 0 means: use the model's position limit
    max_subtokens: int = 0

    def __post_init__(self):
        if self.layers_to_concat < 1:
            raise ConfigurationError("layers_to_concat must be >= 1")
        if self.subword_to_word != "first_subtoken":
            raise ConfigurationError(f"unsupported sub-word alignment {self.subword_to_word!r}")
        if self.trainable:
            raise ConfigurationError(
                "end-to-end encoder training is not supported; the encoder is a frozen feature "
                "extractor (use DAFT to adapt it)"
            )


def resolve_checkpoint(checkpoint_id: str) -> Path:
    """Find the directory for a checkpoint id: a path, or a name under $EVENTADAPT_CACHE."""
    p = Path(checkpoint_id).expanduser()
    if p.is_dir() and (p / "config.json").exists():
        return p.resolve()
    cache = os.environ.get(CACHE_ENV)
    if cache:
        q = Path(cache) / checkpoint_id
        if q.is_dir() and (q / "config.json").exists():
            return q.resolve()
    raise ConfigurationError(f"unknown checkpoint id {checkpoint_id!r} (not a directory, not in ${CACHE_ENV})")


def train_wordpiece(texts: Iterable[str], vocab_size: int = 1000):
    """Train a lower-casing WordPiece tokenizer wrapped for ``transformers``."""
    from tokenizers import Tokenizer, decoders, models, normalizers, pre_tokenizers, trainers
    from tokenizers.processors import TemplateProcessing
    from transformers import BertTokenizerFast

    specials = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
    tok = Tokenizer(models.WordPiece(unk_token="[UNK]"))
    tok.normalizer = normalizers.BertNormalizer(lowercase=True)
    tok.pre_tokenizer = pre_tokenizers.BertPreTokenizer()
    tok.decoder = decoders.WordPiece()
    tok.train_from_iterator(texts, trainers.WordPieceTrainer(vocab_size=vocab_size, special_tokens=specials))
    tok.post_processor = TemplateProcessing(
        single="[CLS] $A [SEP]",
        pair="[CLS] $A [SEP] $B [SEP]",
        special_tokens=[("[CLS]", tok.token_to_id("[CLS]")), ("[SEP]", tok.token_to_id("[SEP]"))],
    )
    return BertTokenizerFast(tokenizer_object=tok)


def init_encoder(texts: Sequence[str], out_dir, *, vocab_size=1000, hidden_size=64, num_layers=4,
                 num_heads=4, intermediate_size=128, max_positions=128, seed=0) -> Path:
    """Write a randomly initialised small BERT (with MLM head) and its tokenizer.

    Meant to be followed by masked-LM training on generic text so that a
    desk-scale stand-in for a pretrained checkpoint exists.
    """
    from transformers import BertConfig, BertForMaskedLM

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tokenizer = train_wordpiece(texts, vocab_size)
    torch.manual_seed(seed)
    cfg = BertConfig(
        vocab_size=len(tokenizer), hidden_size=hidden_size, num_hidden_layers=num_layers,
        num_attention_heads=num_heads, intermediate_size=intermediate_size,
        max_position_embeddings=max_positions, pad_token_id=tokenizer.pad_token_id,
    )
    model = BertForMaskedLM(cfg)
    with _quiet_hf():
        model.save_pretrained(out)
        tokenizer.save_pretrained(out)
    return out


class ContextualEncoder:
    """A loaded checkpoint: tokenizer plus masked-LM model (the encoder is ``.bert``)."""

    def __init__(self, tokenizer, model, path: Path | None = None):
        self.tokenizer = tokenizer
        self.model = model
        self.path = path
        self.model.eval()

    @classmethod
    def load(cls, checkpoint_id: str):
        from transformers import AutoModelForMaskedLM, AutoTokenizer

        path = resolve_checkpoint(checkpoint_id)
        with _quiet_hf():
            tokenizer = AutoTokenizer.from_pretrained(path)
            model = AutoModelForMaskedLM.from_pretrained(path)
        return cls(tokenizer, model, path)

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with _quiet_hf():
            self.model.save_pretrained(out)
            self.tokenizer.save_pretrained(out)
        return out

    @property
    def backbone(self):
        return self.model.base_model

    @property
    def hidden_size(self) -> int:
        return self.model.config.hidden_size

    @property
    def depth(self) -> int:
        return self.model.config.num_hidden_layers

    @property
    def max_subtokens(self) -> int:
        return self.model.config.max_position_embeddings - 2

    def word_pieces(self, words: Sequence[str]) -> list[list[int]]:
        """Sub-token ids per word; a word the tokenizer drops entirely becomes [UNK]."""
        enc = self.tokenizer(list(words), is_split_into_words=True, add_special_tokens=False)
        pieces: list[list[int]] = [[] for _ in words]
        for tid, wid in zip(enc["input_ids"], enc.word_ids()):
            if wid is not None:
                pieces[wid].append(tid)
        unk = self.tokenizer.unk_token_id
        return [p if p else [unk] for p in pieces]

    def encode_words(self, pieces: list[list[int]], limit: int):
        """Flatten word pieces into one [CLS] ... [SEP] sequence; returns ids and first-subtoken index per word."""
        ids = [self.tokenizer.cls_token_id]
        first = []
        for p in pieces:
            first.append(len(ids))
            ids.extend(p[:limit])
        ids.append(self.tokenizer.sep_token_id)
        return ids, first

    def _layers(self, ids: list[int], n_layers: int) -> torch.Tensor:
        x = torch.tensor([ids])
        out = self.backbone(input_ids=x, attention_mask=torch.ones_like(x), output_hidden_states=True)
        return torch.cat(out.hidden_states[-n_layers:], dim=-1)[0]

    def windows(self, pieces: list[list[int]], limit: int) -> list[tuple[int, int]]:
        """Word ranges ``[start, end)`` whose sub-token count fits ``limit``, overlapping by about half."""
        lens = [min(len(p), limit) for p in pieces]
        n = len(lens)
        spans = []
        start = 0
        while True:
            end, total = start, 0
            while end < n and total + lens[end] <= limit:
                total += lens[end]
                end += 1
            spans.append((start, end))
            if end >= n:
                return spans
            nxt = start + max(1, (end - start) // 2)
            start = nxt

    def embed(self, words: Sequence[str], layers_to_concat: int = 4, max_subtokens: int = 0) -> torch.Tensor:
        if layers_to_concat > self.depth:
            raise ConfigurationError(f"layers_to_concat={layers_to_concat} exceeds encoder depth {self.depth}")
        limit = min(max_subtokens or self.max_subtokens, self.max_subtokens)
        pieces = self.word_pieces(words)
        with torch.no_grad():
            if sum(min(len(p), limit) for p in pieces) <= limit:
                ids, first = self.encode_words(pieces, limit)
                return self._layers(ids, layers_to_concat)[first].clone()
            spans = self.windows(pieces, limit)
            # every word is read from the window where it sits furthest from an edge
            best: list[tuple[int, int]] = [(-1, -1)] * len(words)
            for wi, (s, e) in enumerate(spans):
                for i in range(s, e):
                    margin = min(i - s, e - 1 - i)
                    if margin > best[i][0]:
                        best[i] = (margin, wi)
            out = torch.empty(len(words), layers_to_concat * self.hidden_size)
            for wi, (s, e) in enumerate(spans):
                mine = [i for i in range(s, e) if best[i][1] == wi]
                if not mine:
                    continue
                ids, first = self.encode_words(pieces[s:e], limit)
                layers = self._layers(ids, layers_to_concat)
                for i in mine:
                    out[i] = layers[first[i - s]]
            return out


_LOADED: dict[Path, ContextualEncoder] = {}


def get_encoder(checkpoint_id: str) -> ContextualEncoder:
    path = resolve_checkpoint(checkpoint_id)
    if path not in _LOADED:
        _LOADED[path] = ContextualEncoder.load(str(path))
    return _LOADED[path]


def embed_contextual(s: SentenceRecord, cfg: EncoderConfig, encoder: ContextualEncoder | None = None) -> torch.Tensor:
    """Word vectors ``[n_words, layers_to_concat * hidden]`` from the configured checkpoint."""
    enc = encoder or get_encoder(cfg.checkpoint_id)
    return enc.embed(s.words, cfg.layers_to_concat, cfg.max_subtokens)


def embed_corpus(sentences: Sequence[SentenceRecord], cfg: EncoderConfig,
                 encoder: ContextualEncoder | None = None) -> list[torch.Tensor]:
    enc = encoder or get_encoder(cfg.checkpoint_id)
    return [enc.embed(s.words, cfg.layers_to_concat, cfg.max_subtokens) for s in sentences]


# --------------------------------------------------------------------------
# POS embeddings

@dataclass
class PosEmbeddingTable:
    tagset: list[str]
    dim: int
    matrix: np.ndarray  # (len(tagset) + 1) x dim, last row is the unknown tag

    def __post_init__(self):
        if len(set(self.tagset)) != len(self.tagset):
            raise ValueError("duplicate tags in tagset")
        if self.matrix.shape != (len(self.tagset) + 1, self.dim):
            raise ValueError(f"matrix shape {self.matrix.shape} != ({len(self.tagset) + 1}, {self.dim})")
        self._index = {t: i for i, t in enumerate(self.tagset)}

    @property
    def unk_index(self) -> int:
        return len(self.tagset)

    def index(self, tag: str | None) -> int:
        return self._index.get(tag, self.unk_index)

    @classmethod
    def random(cls, tagset: Sequence[str] = UPOS_TAGS, dim: int = 32, seed: int = 0):
        rng = np.random.default_rng(seed)
        return cls(list(tagset), dim, rng.normal(0, 1, (len(tagset) + 1, dim)).astype(np.float32))


def embed_pos(s: SentenceRecord, tbl: PosEmbeddingTable) -> np.ndarray:
    return tbl.matrix[[tbl.index(to_upos(t.pos)) for t in s.tokens]]


# --------------------------------------------------------------------------
# static embeddings (GloVe-style text files)

def read_static_embeddings(path, dim: int = 300, words: set[str] | None = None) -> dict[str, np.ndarray]:
    """Read ``word v1 ... v_dim`` lines, optionally keeping only ``words``."""
    vectors = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip().split(" ")
            if len(parts) != dim + 1:
                raise ValueError(f"{path}:{lineno}: expected {dim + 1} fields, got {len(parts)}")
            if words is None or parts[0] in words:
                vectors[parts[0]] = np.asarray(parts[1:], dtype=np.float32)
    return vectors

