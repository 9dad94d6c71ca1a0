"""Likelihood-based instance weighting.

A word-level LSTM language model is trained on unlabeled target-domain text.
Each source training sentence is scored by its likelihood under that model
and the normalized likelihoods (scaled so the weights average to one) become
per-sentence loss weights for the tagger.
"""
from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .corpus import Corpus, SentenceRecord, Vocab
from .encoders import read_static_embeddings
from .tagger import WeightedSentence

logger = logging.getLogger(__name__)

EOS = "<eos>"


@dataclass
class LmConfig:
    emb_dim: int = 300
    hidden_size: int = 300
    num_layers: int = 3
    dropout: float = 0.2
    tie_weights: bool = True
    min_count: int = 2
    lowercase: bool = True


@dataclass
class LmTrainConfig:
    optimizer: str = "sgd"
    lr: float = 20.0
    lr_divisor: float = 4.0
    # epochs without validation-loss decrease before the lr is divided
    plateau_patience: int = 0
    clip: float = 0.25
    batch_size: int = 16
    epochs: int = 25
    val_fraction: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.optimizer != "sgd":
            raise ValueError("only SGD is supported")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must be in (0, 1)")


class TargetLM(nn.Module):
    """Word-level LSTM LM; ``<eos>`` doubles as the start-of-sentence context."""

    def __init__(self, vocab: Vocab, cfg: LmConfig = LmConfig()):
        super().__init__()
        if cfg.tie_weights and cfg.emb_dim != cfg.hidden_size:
            raise ValueError("tied embeddings need emb_dim == hidden_size")
        self.vocab = vocab
        self.cfg = cfg
        self.eos_id = vocab[EOS]
        self.drop = nn.Dropout(cfg.dropout)
        self.embedding = nn.Embedding(len(vocab), cfg.emb_dim)
        # inter-layer dropout only exists with two or more layers; self.drop still covers the edges
        self.lstm = nn.LSTM(cfg.emb_dim, cfg.hidden_size, cfg.num_layers, batch_first=True,
                            dropout=cfg.dropout if cfg.num_layers > 1 else 0.0)
        self.decoder = nn.Linear(cfg.hidden_size, len(vocab))
        nn.init.uniform_(self.embedding.weight, -0.1, 0.1)
        nn.init.zeros_(self.decoder.bias)
        if cfg.tie_weights:
            self.decoder.weight = self.embedding.weight
        else:
            nn.init.uniform_(self.decoder.weight, -0.1, 0.1)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        h, _ = self.lstm(self.drop(self.embedding(ids)))
        return self.decoder(self.drop(h))

    def encode(self, words: Sequence[str]) -> list[int]:
        return [self.vocab[w] for w in words]

    def token_logprobs(self, words: Sequence[str]) -> np.ndarray:
        """log P(w_i | w_1..w_{i-1}) for every word, first word conditioned on sentence start."""
        return self.batch_token_logprobs([words])[0]

    def batch_token_logprobs(self, sentences: Sequence[Sequence[str]]) -> list[np.ndarray]:
        self.eval()
        ids = [self.encode(ws) for ws in sentences]
        lengths = [len(x) for x in ids]
        width = max(lengths)
        inp = torch.full((len(ids), width), self.eos_id, dtype=torch.long)
        tgt = torch.zeros((len(ids), width), dtype=torch.long)
        for i, x in enumerate(ids):
            if x:
                inp[i, 1:len(x)] = torch.tensor(x[:-1])
                tgt[i, :len(x)] = torch.tensor(x)
        with torch.no_grad():
            logp = torch.log_softmax(self(inp), dim=-1).gather(-1, tgt[..., None])[..., 0]
        return [logp[i, :n].double().numpy() for i, n in enumerate(lengths)]

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        torch.save(self.state_dict(), out / "lm.pt")
        (out / "lm.json").write_text(json.dumps(
            {"config": asdict(self.cfg), "vocab": self.vocab.to_dict(),
             "history": getattr(self, "history", [])}, indent=2))
        return out

    @classmethod
    def load(cls, path):
        path = Path(path)
        info = json.loads((path / "lm.json").read_text())
        lm = cls(Vocab.from_dict(info["vocab"]), LmConfig(**info["config"]))
        lm.load_state_dict(torch.load(path / "lm.pt", weights_only=True))
        lm.history = info.get("history", [])
        lm.eval()
        return lm


def _as_token_lists(text) -> list[list[str]]:
    if isinstance(text, Corpus):
        return [s.words for s in text.sentences()]
    return [list(s.words) if isinstance(s, SentenceRecord) else list(s) for s in text]


def build_lm_vocab(sentences: Iterable[Sequence[str]], min_count: int = 2, lowercase: bool = True) -> Vocab:
    fold = (lambda w: w.casefold()) if lowercase else (lambda w: w)
    counts = Counter(fold(w) for s in sentences for w in s)
    if not counts:
        raise ValueError("cannot build a vocabulary from empty text")
    v = Vocab([EOS], casefold=lowercase)
    for w, c in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])):
        if c >= min_count:
            v.add(w)
    return v


def make_scheduler(optimizer, cfg: LmTrainConfig):
    """Divide the lr by ``cfg.lr_divisor`` whenever validation loss stops decreasing."""
    return torch.optim.lr_scheduler.ReduceLROnPlateau(
        optimizer, mode="min", factor=1.0 / cfg.lr_divisor, patience=cfg.plateau_patience,
        threshold=0.0, threshold_mode="abs",
    )


def _batches(ids: list[list[int]], order, batch_size, eos_id):
    for i in range(0, len(order), batch_size):
        chunk = [ids[j] for j in order[i:i + batch_size]]
        width = max(len(x) for x in chunk) + 1
        inp = torch.full((len(chunk), width), eos_id, dtype=torch.long)
        tgt = torch.full((len(chunk), width), -100, dtype=torch.long)
        for k, x in enumerate(chunk):
            inp[k, 1:len(x) + 1] = torch.tensor(x)
            tgt[k, :len(x)] = torch.tensor(x)
            tgt[k, len(x)] = eos_id
        yield inp, tgt


def evaluate_lm(lm: TargetLM, ids: list[list[int]], batch_size: int = 64) -> float:
    """Mean next-word cross-entropy (nats) including the end-of-sentence prediction."""
    lm.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for inp, tgt in _batches(ids, list(range(len(ids))), batch_size, lm.eos_id):
            logits = lm(inp)
            total += nn.functional.cross_entropy(
                logits.reshape(-1, logits.shape[-1]), tgt.reshape(-1), ignore_index=-100, reduction="sum"
            ).item()
            count += int((tgt != -100).sum())
    return total / count


def train_lm(raw_target_text, cfg: LmTrainConfig = LmTrainConfig(), lm_cfg: LmConfig = LmConfig(),
             embeddings_path=None) -> TargetLM:
    """Fit the target-domain LM; per-epoch validation perplexity lands in ``lm.history``.

    The last ``cfg.val_fraction`` of the sentences is held out for validation
    and for the plateau lr schedule. The weights from the epoch with the best
    validation loss are kept.
    """
    sentences = [s for s in _as_token_lists(raw_target_text) if s]
    if not sentences:
        raise ValueError("cannot build a vocabulary from empty text")
    n_val = max(1, int(round(len(sentences) * cfg.val_fraction)))
    if n_val >= len(sentences):
        raise ValueError("not enough sentences to hold out a validation slice")
    train_s, val_s = sentences[:-n_val], sentences[-n_val:]

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    vocab = build_lm_vocab(train_s, lm_cfg.min_count, lm_cfg.lowercase)
    lm = TargetLM(vocab, lm_cfg)
    if embeddings_path is not None:
        vectors = read_static_embeddings(embeddings_path, lm_cfg.emb_dim, set(vocab.itos))
        with torch.no_grad():
            for w, vec in vectors.items():
                lm.embedding.weight[vocab[w]] = torch.from_numpy(vec)
        logger.info("initialised %d/%d LM embeddings from %s", len(vectors), len(vocab), embeddings_path)

    train_ids = [lm.encode(s) for s in train_s]
    val_ids = [lm.encode(s) for s in val_s]
    optimizer = torch.optim.SGD(lm.parameters(), lr=cfg.lr)
    scheduler = make_scheduler(optimizer, cfg)
    history = []
    best_loss, best_state = math.inf, None
    for epoch in range(1, cfg.epochs + 1):
        lm.train()
        order = rng.permutation(len(train_ids))
        for inp, tgt in _batches(train_ids, order, cfg.batch_size, lm.eos_id):
            optimizer.zero_grad()
            logits = lm(inp)
            loss = nn.functional.cross_entropy(logits.reshape(-1, logits.shape[-1]), tgt.reshape(-1), ignore_index=-100)
            loss.backward()
            nn.utils.clip_grad_norm_(lm.parameters(), cfg.clip)
            optimizer.step()
        val_loss = evaluate_lm(lm, val_ids)
        lr = optimizer.param_groups[0]["lr"]
        history.append({"epoch": epoch, "val_loss": val_loss, "val_ppl": math.exp(val_loss), "lr": lr})
        logger.info("lm epoch %d val ppl %.3f lr %g", epoch, math.exp(val_loss), lr)
        if val_loss < best_loss:
            best_loss = val_loss
            best_state = {k: v.detach().clone() for k, v in lm.state_dict().items()}
        scheduler.step(val_loss)
    lm.load_state_dict(best_state)
    lm.history = history
    lm.eval()
    return lm


def sentence_loglik(lm, s: SentenceRecord | Sequence[str]) -> float:
    """log of P(w_1) * prod_i P(w_i | w_1..w_{i-1}); unknown words score as ``<unk>``."""
    words = s.words if isinstance(s, SentenceRecord) else list(s)
    return float(np.sum(lm.token_logprobs(words), dtype=np.float64))


@dataclass
class WeightSet:
    logliks: np.ndarray
    alphas: np.ndarray
    log_alphas: np.ndarray
    n: int
    length_normalized: bool = False
    meta: dict = field(default_factory=dict)


def compute_weights(logliks: Sequence[float], lengths: Sequence[int] | None = None) -> WeightSet:
    """alpha_t = L_t / sum_i L_i * N, evaluated from log-likelihoods.

    Subtracting the largest log-likelihood before exponentiating leaves the
    ratio unchanged and keeps the top sentence at exp(0) = 1. Weights are held
    in extended precision so that sentences far below the best one keep
    distinct, nonzero weights. Passing ``lengths`` switches to the per-token
    normalized variant (log-likelihood divided by sentence length).
    """
    ll = np.asarray(logliks, dtype=np.float64)
    if ll.ndim != 1 or ll.size == 0:
        raise ValueError("need a non-empty 1-d sequence of log-likelihoods")
    if not np.all(np.isfinite(ll)):
        raise ValueError("log-likelihoods must be finite")
    scores = ll
    if lengths is not None:
        lens = np.asarray(lengths, dtype=np.float64)
        if lens.shape != ll.shape or np.any(lens <= 0):
            raise ValueError("lengths must be positive and match logliks")
        scores = ll / lens
    n = scores.size
    shifted = scores.astype(np.longdouble) - scores.max()
    unnorm = np.exp(shifted)
    total = unnorm.sum()
    if not total > 0:
        raise ValueError("all likelihoods underflow to zero")
    alphas = unnorm / total * n
    log_alphas = shifted - np.log(total) + np.log(np.longdouble(n))
    return WeightSet(ll, alphas, log_alphas, n, lengths is not None)


def weigh_corpus(lm, train: Corpus, length_normalized: bool = False) -> tuple[list[WeightedSentence], WeightSet]:
    sentences = train.sentences()
    if not sentences:
        raise ValueError("empty training corpus")
    logliks = []
    for i in range(0, len(sentences), 64):
        chunk = sentences[i:i + 64]
        for lp in lm.batch_token_logprobs([s.words for s in chunk]):
            logliks.append(float(np.sum(lp, dtype=np.float64)))
    ws = compute_weights(logliks, [len(s) for s in sentences] if length_normalized else None)
    weighted = [WeightedSentence(s, float(a)) for s, a in zip(sentences, ws.alphas)]
    return weighted, ws


def write_sidecar(path, train: Corpus, ws: WeightSet) -> None:
    """JSONL rows ``{doc_id, sentence_index, loglik, alpha, log_alpha}`` in corpus order."""
    rows = ((d.doc_id, i) for d in train.documents for i in range(len(d.sentences)))
    with open(path, "w", encoding="utf-8") as fh:
        for (doc_id, i), ll, a, la in zip(rows, ws.logliks, ws.alphas, ws.log_alphas):
            fh.write(json.dumps({"doc_id": doc_id, "sentence_index": i, "loglik": float(ll),
                                 "alpha": float(a), "log_alpha": float(la)}) + "\n")


def read_sidecar(path, train: Corpus) -> list[WeightedSentence]:
    """Attach sidecar alphas to the sentences of ``train``; every sentence must be covered."""
    alphas = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                alphas[(r["doc_id"], r["sentence_index"])] = r["alpha"]
    out = []
    for d in train.documents:
        for i, s in enumerate(d.sentences):
            if (d.doc_id, i) not in alphas:
                raise KeyError(f"no weight for sentence {i} of {d.doc_id!r}")
            out.append(WeightedSentence(s, alphas[(d.doc_id, i)]))
    return out
