"""Token-level event taggers and the (instance-weighted) training loop."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence, pad_sequence

from .corpus import SentenceRecord
from .encoders import PosEmbeddingTable, UPOS_TAGS, to_upos

logger = logging.getLogger(__name__)

VERB_TAGS = frozenset({"VERB"})
AUX_TAGS = frozenset({"AUX"})


class TrainingError(RuntimeError):
    pass


def verb_baseline(s: SentenceRecord, include_aux: bool = True) -> list[int]:
    """Label every verb as an event. Auxiliaries count as verbs unless ``include_aux`` is off."""
    verbal = VERB_TAGS | AUX_TAGS if include_aux else VERB_TAGS
    labels = []
    for tok in s.tokens:
        if tok.pos is None:
            raise ValueError(f"token {tok.text!r} in {s.doc_id!r} has no POS tag; run POS tagging first")
        labels.append(int(to_upos(tok.pos) in verbal))
    return labels


class TaggerModel(nn.Module):
    """Input dropout -> single-layer BiLSTM (group R) -> MLP head (group E)."""

    def __init__(self, input_dim: int, hidden_size: int = 100, mlp_size: int = 100, dropout: float = 0.5):
        super().__init__()
        self.hparams = dict(kind="bilstm", input_dim=input_dim, hidden_size=hidden_size,
                            mlp_size=mlp_size, dropout=dropout)
        self.input_dropout = nn.Dropout(dropout)
        self.bilstm = nn.LSTM(input_dim, hidden_size, batch_first=True, bidirectional=True)
        self.head = nn.Sequential(nn.Linear(2 * hidden_size, mlp_size), nn.ReLU(), nn.Linear(mlp_size, 1))

    @property
    def repr_dim(self) -> int:
        return 2 * self.bilstm.hidden_size

    def repr_parameters(self):
        return list(self.bilstm.parameters())

    def head_parameters(self):
        return list(self.head.parameters())

    def representations(self, feats: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        x = self.input_dropout(feats)
        packed = pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.bilstm(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=feats.shape[1])
        return out

    def classify(self, reprs: torch.Tensor) -> torch.Tensor:
        return self.head(reprs).squeeze(-1)

    def forward(self, feats, lengths):
        return self.classify(self.representations(feats, lengths))


class DelexTagger(nn.Module):
    """POS-embedding lookup (group R) followed by a per-token MLP (group E)."""

    def __init__(self, table: PosEmbeddingTable | None = None, mlp_size: int = 100, dim: int = 32, seed: int = 0):
        super().__init__()
        table = table or PosEmbeddingTable.random(UPOS_TAGS, dim, seed)
        self.tagset = list(table.tagset)
        self.hparams = dict(kind="delex", tagset=self.tagset, dim=table.dim, mlp_size=mlp_size)
        self._index = {t: i for i, t in enumerate(self.tagset)}
        self.embedding = nn.Embedding(len(self.tagset) + 1, table.dim)
        with torch.no_grad():
            self.embedding.weight.copy_(torch.as_tensor(table.matrix))
        self.head = nn.Sequential(nn.Linear(table.dim, mlp_size), nn.ReLU(), nn.Linear(mlp_size, 1))

    @property
    def repr_dim(self) -> int:
        return self.embedding.embedding_dim

    def table(self) -> PosEmbeddingTable:
        return PosEmbeddingTable(self.tagset, self.embedding.embedding_dim,
                                 self.embedding.weight.detach().cpu().numpy().copy())

    def featurize(self, s: SentenceRecord) -> torch.Tensor:
        unk = len(self.tagset)
        return torch.tensor([self._index.get(to_upos(t.pos), unk) for t in s.tokens], dtype=torch.long)

    def repr_parameters(self):
        return list(self.embedding.parameters())

    def head_parameters(self):
        return list(self.head.parameters())

    def representations(self, tag_ids, lengths):
        return self.embedding(tag_ids)

    def classify(self, reprs):
        return self.head(reprs).squeeze(-1)

    def forward(self, tag_ids, lengths):
        return self.classify(self.representations(tag_ids, lengths))


def build_model(hparams: dict) -> nn.Module:
    hp = dict(hparams)
    kind = hp.pop("kind")
    if kind == "bilstm":
        return TaggerModel(**hp)
    if kind == "delex":
        table = PosEmbeddingTable.random(hp["tagset"], hp["dim"])
        return DelexTagger(table, hp["mlp_size"])
    raise ValueError(f"unknown model kind {kind!r}")


@dataclass
class TrainConfig:
    batch_size: int = 16
    optimizer: str = "adam"
    lr: float = 0.001
    max_epochs: int = 1000
    patience: int = 25
    seed: int = 0
    threshold: float = 0.5

    def __post_init__(self):
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")
        if self.optimizer != "adam":
            raise ValueError("only the Adam optimizer is supported")


@dataclass
class WeightedSentence:
    sentence: SentenceRecord
    alpha: float = 1.0

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValueError(f"alpha must be nonnegative, got {self.alpha}")


@dataclass
class Batch:
    inputs: torch.Tensor
    lengths: torch.Tensor
    mask: torch.Tensor
    labels: torch.Tensor
    alphas: torch.Tensor


def collate(feats: Sequence[torch.Tensor], labels: Sequence[Sequence[int]] | None = None,
            alphas: Sequence[float] | None = None) -> Batch:
    lengths = torch.tensor([len(f) for f in feats])
    inputs = pad_sequence(list(feats), batch_first=True)
    mask = torch.arange(inputs.shape[1])[None, :] < lengths[:, None]
    dtype = inputs.dtype if inputs.is_floating_point() else torch.float32
    if labels is None:
        y = torch.zeros(mask.shape, dtype=dtype)
    else:
        y = pad_sequence([torch.as_tensor(l, dtype=dtype) for l in labels], batch_first=True)
    a = torch.ones(len(feats), dtype=dtype) if alphas is None else torch.as_tensor(alphas, dtype=dtype)
    return Batch(inputs, lengths, mask, y, a)


def weighted_bce(logits: torch.Tensor, labels: torch.Tensor, mask: torch.Tensor, alphas: torch.Tensor) -> torch.Tensor:
    """Token BCE, each sentence's tokens scaled by its alpha, averaged over real tokens."""
    per_token = nn.functional.binary_cross_entropy_with_logits(logits, labels, reduction="none")
    per_token = per_token * mask * alphas[:, None]
    return per_token.sum() / mask.sum()


def task_loss(model, batch: Batch) -> torch.Tensor:
    return weighted_bce(model(batch.inputs, batch.lengths), batch.labels, batch.mask, batch.alphas)


def task_step(model, optimizer, batch: Batch) -> dict:
    model.train()
    optimizer.zero_grad()
    loss = task_loss(model, batch)
    loss.backward()
    optimizer.step()
    return {"event_loss": loss.item()}


def predict_proba(model, feats: Sequence[torch.Tensor], batch_size: int = 64) -> list[np.ndarray]:
    """Per-token event probabilities, evaluation mode."""
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(feats), batch_size):
            b = collate(feats[i:i + batch_size])
            probs = torch.sigmoid(model(b.inputs, b.lengths))
            for row, n in zip(probs, b.lengths):
                out.append(row[:n].numpy().copy())
    return out


def predict(model, feats: Sequence[torch.Tensor], threshold: float = 0.5, batch_size: int = 64) -> list[list[int]]:
    return [[int(p >= threshold) for p in probs] for probs in predict_proba(model, feats, batch_size)]


def _prf(pred, gold):
    tp = sum(p and g for ps, gs in zip(pred, gold) for p, g in zip(ps, gs))
    n_pred = sum(sum(ps) for ps in pred)
    n_gold = sum(sum(gs) for gs in gold)
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


@dataclass
class TrainResult:
    model: nn.Module
    history: list[dict]
    best_epoch: int
    best_dev_f1: float
    checkpoint: Path | None = None
    extra: dict = field(default_factory=dict)


def train_tagger(
    model: nn.Module,
    train: Sequence[WeightedSentence],
    dev: Sequence[SentenceRecord],
    cfg: TrainConfig,
    featurize: Callable[[SentenceRecord], torch.Tensor],
    out_dir=None,
    step_fn: Callable | None = None,
    extra_modules: dict[str, nn.Module] | None = None,
    meta: dict | None = None,
) -> TrainResult:
    """Train with early stopping on dev F1 and keep the best epoch's weights.

    ``step_fn(model, optimizer, batch) -> dict`` replaces the plain weighted
    task step (the adversarial trainer plugs in here). Training order is
    reshuffled every epoch from a generator seeded with ``cfg.seed``.
    """
    if not train:
        raise ValueError("empty training set")
    extra_modules = extra_modules or {}
    step_fn = step_fn or task_step
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    train_feats = [featurize(ws.sentence) for ws in train]
    train_labels = [ws.sentence.labels for ws in train]
    alphas = [float(ws.alpha) for ws in train]
    dev_feats = [featurize(s) for s in dev]
    dev_gold = [s.labels for s in dev]

    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    history = []
    best_f1, best_epoch, bad = -1.0, 0, 0
    best_state = copy.deepcopy(model.state_dict())
    best_extra = {k: copy.deepcopy(m.state_dict()) for k, m in extra_modules.items()}

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train))
        total, n_batches = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            batch = collate([train_feats[j] for j in idx], [train_labels[j] for j in idx], [alphas[j] for j in idx])
            rec = step_fn(model, optimizer, batch)
            loss = rec["event_loss"]
            if not math.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss} at epoch {epoch}, batch {i // cfg.batch_size} "
                    f"(alphas {batch.alphas.tolist()}); check weights and learning rate"
                )
            total += loss
            n_batches += 1
        pred = predict(model, dev_feats, cfg.threshold) if dev_feats else []
        p, r, f = _prf(pred, dev_gold)
        history.append({"epoch": epoch, "train_loss": total / n_batches, "dev_p": p, "dev_r": r, "dev_f1": f})
        logger.info("epoch %d loss %.4f dev P %.3f R %.3f F1 %.3f", epoch, total / n_batches, p, r, f)
        if f > best_f1:
            best_f1, best_epoch, bad = f, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
            best_extra = {k: copy.deepcopy(m.state_dict()) for k, m in extra_modules.items()}
        else:
            bad += 1
            if bad >= cfg.patience:
                break

    model.load_state_dict(best_state)
    for k, m in extra_modules.items():
        m.load_state_dict(best_extra[k])
    result = TrainResult(model, history, best_epoch, best_f1)
    if out_dir is not None:
        result.checkpoint = save_checkpoint(out_dir, model, cfg, history, best_epoch, best_f1, extra_modules, meta)
    return result


def save_checkpoint(out_dir, model, cfg: TrainConfig, history, best_epoch, best_f1,
                    extra_modules=None, meta=None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), out / "model.pt")
    for name, m in (extra_modules or {}).items():
        torch.save(m.state_dict(), out / f"{name}.pt")
    info = {
        "model": model.hparams,
        "train_config": asdict(cfg),
        "seed": cfg.seed,
        "best_epoch": best_epoch,
        "best_dev_f1": best_f1,
        "dev_f1_curve": [h["dev_f1"] for h in history],
        **(meta or {}),
    }
    (out / "meta.json").write_text(json.dumps(info, indent=2, sort_keys=True))
    with open(out / "history.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "dev_p", "dev_r", "dev_f1"])
        w.writeheader()
        w.writerows(history)
    return out


def load_checkpoint(path) -> tuple[nn.Module, dict]:
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    model = build_model(meta["model"])
    model.load_state_dict(torch.load(path / "model.pt", weights_only=True))
    model.eval()
    return model, meta
