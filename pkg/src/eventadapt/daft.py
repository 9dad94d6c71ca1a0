"""Domain-adaptive fine-tuning of the contextual encoder.

Step one fine-tunes the encoder on a token-balanced mix of source and target
sentences, with either a masked-LM objective or POS tagging. Step two is the
ordinary tagger training on labeled source data, fed by the fine-tuned
encoder.
"""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import tagger
from .corpus import Corpus, SentenceRecord
from .encoders import ContextualEncoder, EncoderConfig, UPOS_TAGS, to_upos

logger = logging.getLogger(__name__)

IGNORE = -100


@dataclass
class MixedCorpus:
    sentences: list[SentenceRecord]
    n_source: int
    n_target: int
    source_tokens: int
    target_tokens: int


@dataclass
class DaftConfig:
    epochs: int = 3
    batch_size: int = 4
    objective: str = "mlm"
    mask_rate: float = 0.15
    # fractions of selected positions replaced by [MASK], by a random token, kept
    mask_split: tuple = (0.8, 0.1, 0.1)
    lr: float = 5e-5
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.mask_rate < 1:
            raise ValueError("mask_rate must be in (0, 1)")
        if self.objective not in ("mlm", "pos"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if abs(sum(self.mask_split) - 1) > 1e-9 or min(self.mask_split) < 0:
            raise ValueError("mask_split must be three nonnegative fractions summing to 1")
        if self.epochs < 0 or self.batch_size <= 0:
            raise ValueError("epochs must be >= 0 and batch_size > 0")


def _sentences(x) -> list[SentenceRecord]:
    return x.sentences() if isinstance(x, Corpus) else list(x)


def build_mixed_corpus(src_raw, tgt_raw, seed: int = 0) -> MixedCorpus:
    """Balance the two sides by token count and shuffle them together.

    The larger side is subsampled uniformly at random (seeded) until it
    reaches the smaller side's token total, so the two totals differ by less
    than one sentence.
    """
    src, tgt = _sentences(src_raw), _sentences(tgt_raw)
    if not src or not tgt:
        raise ValueError("both source and target text must be non-empty")
    rng = np.random.default_rng(seed)
    n_src, n_tgt = sum(map(len, src)), sum(map(len, tgt))

    def take(sents, budget):
        out, total = [], 0
        for i in rng.permutation(len(sents)):
            if total >= budget:
                break
            out.append(sents[i])
            total += len(sents[i])
        return out

    if n_src > n_tgt:
        src = take(src, n_tgt)
    elif n_tgt > n_src:
        tgt = take(tgt, n_src)
    mixed = src + tgt
    order = rng.permutation(len(mixed))
    return MixedCorpus([mixed[i] for i in order], len(src), len(tgt),
                       sum(map(len, src)), sum(map(len, tgt)))


def mask_tokens(input_ids: torch.Tensor, maskable: torch.Tensor, cfg: DaftConfig, mask_id: int,
                vocab_size: int, generator: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Select ``mask_rate`` of maskable positions and corrupt them 80/10/10.

    Returns the corrupted ids and labels holding the original id at selected
    positions and ``-100`` everywhere else.
    """
    selected = (torch.rand(input_ids.shape, generator=generator) < cfg.mask_rate) & maskable
    labels = torch.where(selected, input_ids, torch.full_like(input_ids, IGNORE))
    p_mask, p_rand, _ = cfg.mask_split
    u = torch.rand(input_ids.shape, generator=generator)
    corrupted = input_ids.clone()
    corrupted[selected & (u < p_mask)] = mask_id
    rand_pos = selected & (u >= p_mask) & (u < p_mask + p_rand)
    corrupted[rand_pos] = torch.randint(vocab_size, input_ids.shape, generator=generator)[rand_pos]
    return corrupted, labels


def _encode(encoder: ContextualEncoder, sentences: Sequence[SentenceRecord]):
    limit = encoder.max_subtokens
    out = []
    for s in sentences:
        pieces = encoder.word_pieces(s.words)
        ids, first = encoder.encode_words(pieces, limit)
        if len(ids) > limit + 2:
            ids = ids[:limit + 1] + [ids[-1]]
            first = [f for f in first if f <= limit]
        out.append((ids, first))
    return out


def _pad(seqs: list[list[int]], value: int) -> torch.Tensor:
    width = max(len(s) for s in seqs)
    t = torch.full((len(seqs), width), value, dtype=torch.long)
    for i, s in enumerate(seqs):
        t[i, :len(s)] = torch.tensor(s)
    return t


def mlm_token_losses(model, ids: torch.Tensor, attention: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-position masked-LM cross-entropy; positions labelled -100 contribute exactly 0."""
    logits = model(input_ids=ids, attention_mask=attention).logits
    return nn.functional.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), labels.reshape(-1), ignore_index=IGNORE, reduction="none"
    ).reshape(labels.shape)


def _optimizer(params, cfg: DaftConfig, total_steps: int):
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda step: max(0.0, 1 - step / max(1, total_steps)))
    return opt, sched


def _copy(encoder: ContextualEncoder) -> ContextualEncoder:
    return ContextualEncoder(encoder.tokenizer, copy.deepcopy(encoder.model), None)


def _finish(new: ContextualEncoder, history, cfg: DaftConfig, out_dir, base: ContextualEncoder):
    new.model.eval()
    new.history = history
    if out_dir is not None:
        out = Path(out_dir)
        if base.path is not None and out.resolve() == Path(base.path).resolve():
            raise ValueError("refusing to overwrite the base checkpoint")
        new.save(out)
        (out / "daft.json").write_text(json.dumps(
            {"config": asdict(cfg), "base": str(base.path) if base.path else None, "history": history}, indent=2))
        new.path = out.resolve()
    return new


def mlm_finetune(encoder: ContextualEncoder, mixed: MixedCorpus | Sequence[SentenceRecord], cfg: DaftConfig,
                 out_dir=None) -> ContextualEncoder:
    """Masked-LM fine-tuning of a copy of ``encoder`` for exactly ``cfg.epochs`` passes."""
    if cfg.objective != "mlm":
        raise ValueError("mlm_finetune needs objective='mlm'")
    sentences = mixed.sentences if isinstance(mixed, MixedCorpus) else list(mixed)
    if len(sentences) < cfg.batch_size:
        raise ValueError(f"mixed corpus ({len(sentences)} sentences) is smaller than one batch")
    new = _copy(encoder)
    tok = new.tokenizer
    encoded = [ids for ids, _ in _encode(new, sentences)]
    special = {tok.cls_token_id, tok.sep_token_id, tok.pad_token_id}
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    n_batches = -(-len(encoded) // cfg.batch_size)
    opt, sched = _optimizer(new.model.parameters(), cfg, n_batches * cfg.epochs)
    history = []
    torch.manual_seed(cfg.seed)
    for epoch in range(1, cfg.epochs + 1):
        new.model.train()
        total, count = 0.0, 0
        order = rng.permutation(len(encoded))
        for i in range(0, len(order), cfg.batch_size):
            ids = _pad([encoded[j] for j in order[i:i + cfg.batch_size]], tok.pad_token_id)
            attention = (ids != tok.pad_token_id).long()
            maskable = attention.bool()
            for sid in special:
                maskable &= ids != sid
            corrupted, labels = mask_tokens(ids, maskable, cfg, tok.mask_token_id, len(tok), gen)
            n_sel = int((labels != IGNORE).sum())
            if n_sel == 0:
                continue
            losses = mlm_token_losses(new.model, corrupted, attention, labels)
            loss = losses.sum() / n_sel
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += losses.sum().item()
            count += n_sel
        history.append({"epoch": epoch, "loss": total / max(count, 1)})
        logger.info("mlm epoch %d loss %.4f", epoch, total / max(count, 1))
    return _finish(new, history, cfg, out_dir, encoder)


class TagHead(nn.Module):
    def __init__(self, hidden: int, n_tags: int):
        super().__init__()
        self.proj = nn.Linear(hidden, n_tags)

    def forward(self, h):
        return self.proj(h)


def pos_finetune(encoder: ContextualEncoder, mixed: MixedCorpus | Sequence[SentenceRecord], cfg: DaftConfig,
                 out_dir=None, tagset: Sequence[str] = UPOS_TAGS, return_head: bool = False):
    """Fine-tune a copy of ``encoder`` plus a temporary linear tag head on first sub-tokens.

    The head is discarded unless ``return_head`` is set (then ``(encoder,
    head)`` is returned, for inspection).
    """
    sentences = mixed.sentences if isinstance(mixed, MixedCorpus) else list(mixed)
    index = {t: i for i, t in enumerate(tagset)}
    targets = []
    for s in sentences:
        row = []
        for tok in s.tokens:
            tag = to_upos(tok.pos)
            if tag is None:
                raise ValueError(f"document {s.doc_id!r} has untagged token {tok.text!r}; tag the text first")
            row.append(index.get(tag, index.get("X", 0)))
        targets.append(row)
    if len(sentences) < cfg.batch_size:
        raise ValueError(f"mixed corpus ({len(sentences)} sentences) is smaller than one batch")

    new = _copy(encoder)
    tok = new.tokenizer
    encoded = _encode(new, sentences)
    torch.manual_seed(cfg.seed)
    head = TagHead(new.hidden_size, len(tagset))
    rng = np.random.default_rng(cfg.seed)
    n_batches = -(-len(encoded) // cfg.batch_size)
    params = list(new.backbone.parameters()) + list(head.parameters())
    opt, sched = _optimizer(params, cfg, n_batches * cfg.epochs)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        new.model.train()
        head.train()
        total, count, correct = 0.0, 0, 0
        order = rng.permutation(len(encoded))
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            ids = _pad([encoded[j][0] for j in idx], tok.pad_token_id)
            labels = torch.full(ids.shape, IGNORE, dtype=torch.long)
            for r, j in enumerate(idx):
                first = encoded[j][1]
                labels[r, first] = torch.tensor(targets[j][:len(first)])
            attention = (ids != tok.pad_token_id).long()
            h = new.backbone(input_ids=ids, attention_mask=attention).last_hidden_state
            logits = head(h)
            loss = nn.functional.cross_entropy(logits.reshape(-1, len(tagset)), labels.reshape(-1), ignore_index=IGNORE)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            keep = labels != IGNORE
            n = int(keep.sum())
            total += loss.item() * n
            count += n
            correct += int((logits.argmax(-1)[keep] == labels[keep]).sum())
        history.append({"epoch": epoch, "loss": total / max(count, 1), "tag_accuracy": correct / max(count, 1)})
        logger.info("pos epoch %d loss %.4f acc %.4f", epoch, total / max(count, 1), correct / max(count, 1))
    new = _finish(new, history, cfg, out_dir, encoder)
    return (new, head) if return_head else new


def tag_accuracy(encoder: ContextualEncoder, head: TagHead, sentences: Sequence[SentenceRecord],
                 tagset: Sequence[str] = UPOS_TAGS) -> float:
    index = {t: i for i, t in enumerate(tagset)}
    correct = total = 0
    encoder.model.eval()
    with torch.no_grad():
        for s, (ids, first) in zip(sentences, _encode(encoder, sentences)):
            h = encoder.backbone(input_ids=torch.tensor([ids])).last_hidden_state[0]
            pred = head(h[first]).argmax(-1).tolist()
            gold = [index.get(to_upos(t.pos), index.get("X", 0)) for t in s.tokens[:len(first)]]
            correct += sum(p == g for p, g in zip(pred, gold))
            total += len(gold)
    return correct / total


def run_daft(encoder: ContextualEncoder, src_raw, tgt_raw, cfg: DaftConfig, enc_cfg: EncoderConfig,
             model, train, dev, train_cfg, encoder_dir=None, out_dir=None, seed: int = 0):
    """Both DAFT steps: fine-tune the encoder, then the unchanged tagger training."""
    mixed = build_mixed_corpus(src_raw, tgt_raw, seed)
    if cfg.objective == "mlm":
        tuned = mlm_finetune(encoder, mixed, cfg, encoder_dir)
    else:
        tuned = pos_finetune(encoder, mixed, cfg, encoder_dir)

    cache: dict[tuple, torch.Tensor] = {}

    def featurize(s):
        key = tuple(s.words)
        if key not in cache:
            cache[key] = tuned.embed(s.words, enc_cfg.layers_to_concat, enc_cfg.max_subtokens)
        return cache[key]

    result = tagger.train_tagger(model, train, dev, train_cfg, featurize, out_dir=out_dir,
                                 meta={"daft": asdict(cfg), "encoder": str(tuned.path) if tuned.path else None})
    return tuned, result
