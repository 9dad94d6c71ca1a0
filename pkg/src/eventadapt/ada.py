"""Adversarial domain adaptation.

Alternating optimisation over a tagger (representation learner R = BiLSTM,
event classifier E = MLP head) and a domain predictor D over pooled sequence
representations:

1. update D alone on domain cross-entropy over a source and a target batch;
2. update R and E on ``event_loss - lambda * domain_loss`` with D frozen.

Domain losses are computed on dropout-free representations so that the
adversarial term never consumes random numbers; with lambda = 0 a run
therefore follows the plain training trajectory exactly.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .corpus import SentenceRecord
from .tagger import (Batch, TrainConfig, TrainResult, WeightedSentence, collate, train_tagger,
                     weighted_bce)

logger = logging.getLogger(__name__)

LAMBDA_GRID = (0.5, 1.0, 2.0, 5.0)
SOURCE, TARGET = 0.0, 1.0


class DomainPredictor(nn.Module):
    def __init__(self, input_dim: int, hidden: int = 100, layers: int = 3):
        super().__init__()
        mods: list[nn.Module] = []
        dim = input_dim
        for _ in range(layers - 1):
            mods += [nn.Linear(dim, hidden), nn.ReLU()]
            dim = hidden
        mods.append(nn.Linear(dim, 1))
        self.net = nn.Sequential(*mods)
        self.hparams = dict(input_dim=input_dim, hidden=hidden, layers=layers)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.net(pooled).squeeze(-1)


@dataclass
class AdaConfig:
    lam: float = 1.0
    seed: int = 0
    selection_metric: str = "source_dev_f1"
    d_lr: float = 0.001

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError("lambda must be nonnegative")


def pool_sequence(token_reprs: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over token vectors; ``[T, H] -> [H]`` or, batched with a mask, ``[B, T, H] -> [B, H]``."""
    if token_reprs.dim() == 2:
        if token_reprs.shape[0] == 0:
            raise ValueError("cannot pool an empty sequence")
        return token_reprs.mean(dim=0)
    if mask is None:
        return token_reprs.mean(dim=1)
    m = mask.to(token_reprs.dtype)[..., None]
    return (token_reprs * m).sum(dim=1) / m.sum(dim=1)


def _clean_pooled(model, batch: Batch) -> torch.Tensor:
    was_training = model.training
    model.eval()
    try:
        return pool_sequence(model.representations(batch.inputs, batch.lengths), batch.mask)
    finally:
        model.train(was_training)


def domain_loss(d: DomainPredictor, src_pooled, tgt_pooled) -> torch.Tensor:
    logits = torch.cat([d(src_pooled), d(tgt_pooled)])
    y = torch.cat([torch.full((len(src_pooled),), SOURCE), torch.full((len(tgt_pooled),), TARGET)]).to(logits.dtype)
    return nn.functional.binary_cross_entropy_with_logits(logits, y)


def ada_step(src_batch: Batch, tgt_batch: Batch, model, d: DomainPredictor, cfg: AdaConfig,
             task_opt: torch.optim.Optimizer, d_opt: torch.optim.Optimizer) -> dict:
    """One alternating update. ``task_opt`` must cover R and E only, ``d_opt`` D only."""
    if len(src_batch.lengths) == 0 or len(tgt_batch.lengths) == 0:
        raise ValueError("empty source or target batch")

    # step 1: D on the domain task, representations fixed
    d.train()
    with torch.no_grad():
        src_fixed = _clean_pooled(model, src_batch)
        tgt_fixed = _clean_pooled(model, tgt_batch)
    d_opt.zero_grad()
    loss_d1 = domain_loss(d, src_fixed, tgt_fixed)
    loss_d1.backward()
    d_opt.step()

    # step 2: R and E on event loss minus weighted domain loss, D frozen
    model.train()
    task_opt.zero_grad()
    frozen = [p.requires_grad for p in d.parameters()]
    for p in d.parameters():
        p.requires_grad_(False)
    try:
        logits = model(src_batch.inputs, src_batch.lengths)
        event = weighted_bce(logits, src_batch.labels, src_batch.mask, src_batch.alphas)
        loss_d2 = domain_loss(d, _clean_pooled(model, src_batch), _clean_pooled(model, tgt_batch))
        (event - cfg.lam * loss_d2).backward()
    finally:
        for p, flag in zip(d.parameters(), frozen):
            p.requires_grad_(flag)
    task_opt.step()
    return {"event_loss": event.item(), "domain_loss_step1": loss_d1.item(), "domain_loss_step2": loss_d2.item()}


class TargetSampler:
    """Draws unlabeled target batches of a requested size, reshuffling on exhaustion."""

    def __init__(self, feats: Sequence[torch.Tensor], seed: int = 0):
        if not feats:
            raise ValueError("target data is empty")
        self.feats = list(feats)
        self.rng = np.random.default_rng(seed + 1)
        self.order: list[int] = []

    def next(self, size: int) -> Batch:
        idx = []
        while len(idx) < size:
            if not self.order:
                self.order = list(self.rng.permutation(len(self.feats)))
            idx.append(self.order.pop())
        return collate([self.feats[i] for i in idx])


def make_ada_step_fn(model, d: DomainPredictor, tgt_feats, cfg: AdaConfig) -> tuple[Callable, list]:
    """Adapter exposing ``ada_step`` through the tagger loop's ``step_fn`` hook.

    The loop hands over its Adam optimizer, which covers exactly R and E.
    """
    sampler = TargetSampler(tgt_feats, cfg.seed)
    d_opt = torch.optim.Adam(d.parameters(), lr=cfg.d_lr)
    log: list[dict] = []

    def step(model_, task_opt, src_batch):
        rec = ada_step(src_batch, sampler.next(len(src_batch.lengths)), model_, d, cfg, task_opt, d_opt)
        log.append(rec)
        return rec

    return step, log


@dataclass
class AdaTrial:
    lam: float
    seed: int
    best_dev_f1: float
    checkpoint: str | None


def train_ada_single(model, train: Sequence[WeightedSentence], tgt_raw: Sequence[SentenceRecord],
                     dev: Sequence[SentenceRecord], cfg: AdaConfig, train_cfg: TrainConfig,
                     featurize, out_dir=None) -> TrainResult:
    if not tgt_raw:
        raise ValueError("target raw corpus is empty")
    torch.manual_seed(train_cfg.seed)
    d = DomainPredictor(model.repr_dim)
    tgt_feats = [featurize(s) for s in tgt_raw]
    step, log = make_ada_step_fn(model, d, tgt_feats, cfg)
    res = train_tagger(model, train, dev, train_cfg, featurize, out_dir=out_dir, step_fn=step,
                       extra_modules={"domain_predictor": d}, meta={"ada": asdict(cfg)})
    res.extra["domain_predictor"] = d
    res.extra["step_log"] = log
    return res


def train_ada(model_factory: Callable[[], nn.Module], train: Sequence[WeightedSentence],
              tgt_raw: Sequence[SentenceRecord], dev: Sequence[SentenceRecord], train_cfg: TrainConfig,
              featurize, grid: Sequence[float] = LAMBDA_GRID, seed: int = 0,
              out_dir=None) -> tuple[TrainResult, list[AdaTrial]]:
    """One trial per lambda at a fixed seed; the best source-dev F1 wins.

    The model is rebuilt by ``model_factory`` after seeding, so every trial
    starts from the same initial weights.
    """
    if not tgt_raw:
        raise ValueError("target raw corpus is empty")
    trials, best = [], None
    tcfg = TrainConfig(**{**asdict(train_cfg), "seed": seed})
    for lam in grid:
        torch.manual_seed(seed)
        model = model_factory()
        trial_dir = Path(out_dir) / f"lambda_{lam:g}" if out_dir is not None else None
        res = train_ada_single(model, train, tgt_raw, dev, AdaConfig(lam=lam, seed=seed), tcfg, featurize, trial_dir)
        trials.append(AdaTrial(lam, seed, res.best_dev_f1, str(res.checkpoint) if res.checkpoint else None))
        logger.info("ada lambda=%g dev F1 %.4f", lam, res.best_dev_f1)
        if best is None or res.best_dev_f1 > best[1].best_dev_f1:
            best = (lam, res)
    lam, res = best
    res.extra["lambda"] = lam
    if out_dir is not None:
        write_trial_ledger(Path(out_dir) / "trials.csv", trials)
        (Path(out_dir) / "best.json").write_text(json.dumps({"lambda": lam, "checkpoint": str(res.checkpoint)}))
    return res, trials


def write_trial_ledger(path, trials: Sequence[AdaTrial]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "seed", "best_dev_f1", "checkpoint"])
        for t in trials:
            w.writerow([t.lam, t.seed, t.best_dev_f1, t.checkpoint or ""])


def pooled_representations(model, feats: Sequence[torch.Tensor], batch_size: int = 64) -> np.ndarray:
    """Mean-pooled representations from R, evaluation mode."""
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(feats), batch_size):
            b = collate(feats[i:i + batch_size])
            out.append(pool_sequence(model.representations(b.inputs, b.lengths), b.mask).numpy())
    return np.concatenate(out)


def domain_probe_accuracy(src_reprs: np.ndarray, tgt_reprs: np.ndarray, seed: int = 0,
                          test_fraction: float = 0.5) -> float:
    """Held-out accuracy of a fresh linear probe telling source from target representations."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import train_test_split
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    n = min(len(src_reprs), len(tgt_reprs))
    x = np.concatenate([src_reprs[:n], tgt_reprs[:n]])
    y = np.concatenate([np.zeros(n), np.ones(n)])
    xtr, xte, ytr, yte = train_test_split(x, y, test_size=test_fraction, random_state=seed, stratify=y)
    probe = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000))
    probe.fit(xtr, ytr)
    return float(probe.score(xte, yte))
