"""Command-line driver: single-stage subcommands plus the ``run`` pipeline.

Every subcommand reads and writes the canonical file formats, so stages can
be chained as separate processes. Flags may also come from a ``--config``
YAML/JSON file; explicit flags win.

Exit codes: 0 success, 1 usage, 2 validation, 3 runtime.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from . import ada, corpus, daft, encoders, evalsuite, liw, synthbench, tagger

logger = logging.getLogger("eventadapt")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3
TECHNIQUES = ("none", "ada", "liw", "daft", "daft-syn")
MODELS = ("bert", "delex", "verb")


class ValidationError(Exception):
    pass


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# experiment configuration

def _fill(cls, given: dict | None, where: str):
    given = dict(given or {})
    names = {f.name for f in fields(cls)}
    unknown = set(given) - names
    if unknown:
        raise ValidationError(f"unknown keys in {where}: {sorted(unknown)}")
    if "mask_split" in given:
        given["mask_split"] = tuple(given["mask_split"])
    try:
        return cls(**given)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{where}: {exc}") from exc


def default_subconfig(technique: str) -> dict:
    if technique == "ada":
        return {"grid": list(ada.LAMBDA_GRID), "d_lr": ada.AdaConfig().d_lr}
    if technique == "liw":
        return {"lm": asdict(liw.LmConfig()), "lm_train": asdict(liw.LmTrainConfig()), "length_normalized": False}
    if technique in ("daft", "daft-syn"):
        return asdict(daft.DaftConfig(objective="mlm" if technique == "daft" else "pos"))
    return {}


def _materialize_subconfig(technique: str, given: dict) -> dict:
    base = default_subconfig(technique)
    if technique == "ada":
        unknown = set(given) - set(base)
        if unknown:
            raise ValidationError(f"unknown keys in technique_config: {sorted(unknown)}")
        out = {**base, **given}
        if not out["grid"] or any(lam < 0 for lam in out["grid"]):
            raise ValidationError("ada grid must be a non-empty list of nonnegative lambdas")
        out["grid"] = [float(x) for x in out["grid"]]
        return out
    if technique == "liw":
        unknown = set(given) - set(base)
        if unknown:
            raise ValidationError(f"unknown keys in technique_config: {sorted(unknown)}")
        return {
            "lm": asdict(_fill(liw.LmConfig, given.get("lm"), "technique_config.lm")),
            "lm_train": asdict(_fill(liw.LmTrainConfig, given.get("lm_train"), "technique_config.lm_train")),
            "length_normalized": bool(given.get("length_normalized", False)),
        }
    objective = "mlm" if technique == "daft" else "pos"
    if given.get("objective", objective) != objective:
        raise ValidationError(f"technique {technique!r} implies objective {objective!r}")
    cfg = asdict(_fill(daft.DaftConfig, {**given, "objective": objective}, "technique_config"))
    cfg["mask_split"] = list(cfg["mask_split"])
    return cfg


@dataclass
class ExperimentConfig:
    source: str
    targets: list
    target_raw: str | None = None
    source_dev: str | None = None
    source_raw: str | None = None
    encoder: str | None = None
    model: str = "bert"
    technique: str = "none"
    technique_config: dict | None = None
    encoder_config: dict = field(default_factory=dict)
    tagger: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    dev_fraction: float = 0.1
    seed: int = 0
    output_dir: str = "runs"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        if "target" in d:
            raise ValidationError("use 'targets' (a list of paths)")
        for key in ("source", "targets"):
            if not d.get(key):
                raise ValidationError(f"config needs {key!r}")
        if isinstance(d["targets"], str):
            d["targets"] = [d["targets"]]
        return cls(**d).resolve()

    def resolve(self) -> "ExperimentConfig":
        """Check value constraints and materialize every default."""
        c = copy.deepcopy(self)
        if c.technique not in TECHNIQUES:
            raise ValidationError(f"technique must be one of {TECHNIQUES}, got {c.technique!r}")
        if c.model not in MODELS:
            raise ValidationError(f"model must be one of {MODELS}, got {c.model!r}")
        if c.technique == "none":
            if c.technique_config:
                raise ValidationError("technique_config given but technique is 'none'")
            c.technique_config = None
        else:
            c.technique_config = _materialize_subconfig(c.technique, dict(c.technique_config or {}))
        if c.model == "verb" and c.technique != "none":
            raise ValidationError("the VERB baseline has no trainable parameters to adapt")
        if c.model == "delex" and c.technique in ("daft", "daft-syn"):
            raise ValidationError("DAFT fine-tunes a contextual encoder; model must be 'bert'")
        if c.model == "bert" and not c.encoder:
            raise ValidationError("model 'bert' needs an encoder checkpoint")
        if c.technique in ("ada", "liw", "daft", "daft-syn") and not c.target_raw:
            raise ValidationError(f"technique {c.technique!r} needs target_raw")
        if not 0 < c.dev_fraction < 1:
            raise ValidationError("dev_fraction must be in (0, 1)")
        enc = _fill(encoders.EncoderConfig, {"checkpoint_id": c.encoder or "", **c.encoder_config},
                    "encoder_config") if c.model == "bert" else None
        c.encoder_config = {k: v for k, v in asdict(enc).items() if k != "checkpoint_id"} if enc else {}
        tdef = {"hidden_size": 100, "mlp_size": 100, "dropout": 0.5} if c.model == "bert" else \
            {"mlp_size": 100, "dim": 32} if c.model == "delex" else {}
        unknown = set(c.tagger) - set(tdef)
        if unknown:
            raise ValidationError(f"unknown keys in tagger: {sorted(unknown)}")
        c.tagger = {**tdef, **c.tagger}
        c.train = asdict(_fill(tagger.TrainConfig, {"seed": c.seed, **c.train}, "train"))
        if c.train["seed"] != c.seed:
            raise ValidationError("train.seed must equal the experiment seed")
        return c

    def check_inputs(self):
        paths = [("source", self.source)] + [("targets", t) for t in self.targets]
        for key in ("target_raw", "source_dev", "source_raw"):
            if getattr(self, key):
                paths.append((key, getattr(self, key)))
        for key, p in paths:
            if not Path(p).exists():
                raise ValidationError(f"{key}: {p} does not exist")
        if self.model == "bert":
            try:
                encoders.resolve_checkpoint(self.encoder)
            except (FileNotFoundError, encoders.ConfigurationError) as exc:
                raise ValidationError(f"encoder: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def load_config_file(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"config file {p} does not exist")
    try:
        data = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ValidationError(f"cannot parse {p}: {exc}") from exc
    if not isinstance(data, dict):
        raise ValidationError(f"{p} must hold a mapping")
    return data


# ---------------------------------------------------------------------------
# the pipeline

def cached_featurizer(encoder: encoders.ContextualEncoder, enc_cfg: encoders.EncoderConfig):
    cache: dict = {}

    def featurize(s):
        key = tuple(s.words)
        if key not in cache:
            cache[key] = encoder.embed(s.words, enc_cfg.layers_to_concat, enc_cfg.max_subtokens)
        return cache[key]

    return featurize


def split_dev(train: corpus.Corpus, fraction: float, seed: int) -> tuple[corpus.Corpus, corpus.Corpus]:
    """Document-level seeded split of a training corpus into train/dev."""
    import numpy as np

    n = len(train.documents)
    if n < 2:
        raise ValidationError("need at least two source documents to hold out a dev split")
    n_dev = min(n - 1, max(1, int(round(n * fraction))))
    order = np.random.default_rng(seed).permutation(n)
    dev_idx = set(order[:n_dev].tolist())
    docs = train.documents
    return (corpus.Corpus([d for i, d in enumerate(docs) if i not in dev_idx], "train"),
            corpus.Corpus([d for i, d in enumerate(docs) if i in dev_idx], "dev"))


def _next_run_dir(root: Path, technique: str, digest: str) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    n = 0
    while (root / f"{technique}-{digest[:8]}-{n}").exists():
        n += 1
    d = root / f"{technique}-{digest[:8]}-{n}"
    d.mkdir()
    return d


def _hash_files(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(paths, key=lambda p: p.as_posix()):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _write_predictions(path: Path, sentences, pred):
    with open(path, "w", encoding="utf-8") as fh:
        for s, p in zip(sentences, pred):
            fh.write(json.dumps({"doc_id": s.doc_id, "words": s.words, "pred": list(map(int, p)),
                                 "gold": s.labels}) + "\n")


@dataclass
class RunResult:
    run_dir: Path
    reports: dict
    outputs_hash: str
    extra: dict = field(default_factory=dict)


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    """ingest -> (adapt) -> train -> evaluate -> report, inside a fresh run directory."""
    import torch

    cfg = cfg.resolve()
    cfg.check_inputs()

    src_all = corpus.load_corpus(cfg.source, "train")
    if cfg.source_dev:
        train_c, dev_c = src_all, corpus.load_corpus(cfg.source_dev, "dev")
    else:
        train_c, dev_c = split_dev(src_all, cfg.dev_fraction, cfg.seed)
    targets = {Path(t).stem: corpus.load_corpus(t, "test") for t in cfg.targets}
    tgt_raw = corpus.load_corpus(cfg.target_raw, "train") if cfg.target_raw else None
    src_raw = corpus.load_corpus(cfg.source_raw, "train") if cfg.source_raw else train_c

    run_dir = _next_run_dir(Path(cfg.output_dir), cfg.technique, cfg.digest())
    handler = logging.FileHandler(run_dir / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    logger.addHandler(handler)
    if logger.level == logging.NOTSET or logger.level > logging.INFO:
        logger.setLevel(logging.INFO)
    try:
        (run_dir / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
        logger.info("run %s: technique=%s model=%s seed=%d", run_dir.name, cfg.technique, cfg.model, cfg.seed)
        return _run_in(cfg, run_dir, train_c, dev_c, targets, tgt_raw, src_raw, torch)
    finally:
        logger.removeHandler(handler)
        handler.close()


def _run_in(cfg, run_dir, train_c, dev_c, targets, tgt_raw, src_raw, torch) -> RunResult:
    tcfg = tagger.TrainConfig(**cfg.train)
    train_ws = [tagger.WeightedSentence(s) for s in train_c.sentences()]
    dev = dev_c.sentences()
    extra: dict = {}

    featurize = None
    enc_cfg = None
    if cfg.model == "bert":
        enc_cfg = encoders.EncoderConfig(cfg.encoder, **cfg.encoder_config)
        base = encoders.ContextualEncoder.load(cfg.encoder)
        featurize = cached_featurizer(base, enc_cfg)

    def new_model():
        torch.manual_seed(cfg.seed)
        if cfg.model == "delex":
            return tagger.DelexTagger(encoders.PosEmbeddingTable.random(dim=cfg.tagger["dim"], seed=cfg.seed),
                                      cfg.tagger["mlp_size"], seed=cfg.seed)
        dim = featurize(train_ws[0].sentence).shape[1]
        return tagger.TaggerModel(dim, **cfg.tagger)

    if cfg.model == "delex":
        featurize = new_model().featurize
    features = {"kind": cfg.model}
    if enc_cfg is not None:
        features.update(encoder=str(encoders.resolve_checkpoint(cfg.encoder)),
                        layers_to_concat=enc_cfg.layers_to_concat, max_subtokens=enc_cfg.max_subtokens)

    ckpt_dir = run_dir / "checkpoint"
    model = None
    if cfg.model == "verb":
        predictor = lambda sents: [tagger.verb_baseline(s) for s in sents]
    else:
        if cfg.technique == "liw":
            sub = cfg.technique_config
            lm = liw.train_lm(tgt_raw, liw.LmTrainConfig(**sub["lm_train"]), liw.LmConfig(**sub["lm"]))
            lm.save(run_dir / "lm")
            train_ws, ws = liw.weigh_corpus(lm, train_c, sub["length_normalized"])
            liw.write_sidecar(run_dir / "weights.jsonl", train_c, ws)
            extra["weights"] = ws
            extra["lm_history"] = lm.history
        if cfg.technique in ("daft", "daft-syn"):
            dcfg = _fill(daft.DaftConfig, cfg.technique_config, "technique_config")
            model = new_model()
            tuned, res = daft.run_daft(base, src_raw, tgt_raw, dcfg, enc_cfg, model, train_ws, dev, tcfg,
                                       encoder_dir=run_dir / "encoder", out_dir=ckpt_dir, seed=cfg.seed)
            featurize = cached_featurizer(tuned, enc_cfg)
        elif cfg.technique == "ada":
            res, trials = ada.train_ada(new_model, train_ws, tgt_raw.sentences(), dev, tcfg, featurize,
                                        grid=cfg.technique_config["grid"], seed=cfg.seed, out_dir=run_dir / "ada")
            model = res.model
            tagger.save_checkpoint(ckpt_dir, model, tcfg, res.history, res.best_epoch, res.best_dev_f1,
                                   {"domain_predictor": res.extra["domain_predictor"]},
                                   {"features": features,
                                    "ada": {"lambda": res.extra["lambda"], "grid": cfg.technique_config["grid"]}})
            extra["trials"] = trials
            extra["lambda"] = res.extra["lambda"]
        else:
            model = new_model()
            res = tagger.train_tagger(model, train_ws, dev, tcfg, featurize, out_dir=ckpt_dir,
                                      meta={"technique": cfg.technique, "features": features})
        extra["train_result"] = res
        predictor = lambda sents: tagger.predict(model, [featurize(s) for s in sents], tcfg.threshold)

    vocab = corpus.build_vocab(train_c)
    reports = {}
    pred_dir = run_dir / "predictions"
    pred_dir.mkdir()
    meta = {"model": f"{cfg.model.upper()}" + ("" if cfg.technique == "none" else f"-{cfg.technique.upper()}"),
            "technique": cfg.technique, "seed": cfg.seed, "source": Path(cfg.source).stem}
    dev_pred = predictor(dev)
    reports["in_domain"] = evalsuite.score(dev_pred, dev, {**meta, "target": "source-dev"})
    _write_predictions(pred_dir / "source-dev.jsonl", dev, dev_pred)
    for name, test_c in targets.items():
        sents = test_c.sentences()
        pred = predictor(sents)
        part = corpus.iv_oov_partition(test_c, vocab)
        reports[name] = evalsuite.bucket_score(pred, test_c, part, {**meta, "target": name})
        _write_predictions(pred_dir / f"{name}.jsonl", sents, pred)
    rep_paths = evalsuite.emit_report(list(reports.values()), run_dir / "reports")
    outputs = [rep_paths["json"], rep_paths["summary"]] + sorted(pred_dir.glob("*.jsonl"))
    if (run_dir / "weights.jsonl").exists():
        outputs.append(run_dir / "weights.jsonl")
    digest = _hash_files(outputs)
    entry = {"run_dir": run_dir.name, "config_hash": cfg.digest(), "outputs_hash": digest,
             "technique": cfg.technique, "model": cfg.model, "seed": cfg.seed,
             "f1": {k: r.f1 for k, r in reports.items()}}
    if "lambda" in extra:
        entry["lambda"] = extra["lambda"]
    (run_dir / "ledger.json").write_text(json.dumps(entry, indent=2, sort_keys=True))
    with open(Path(cfg.output_dir) / "ledger.jsonl", "a", encoding="utf-8") as fh:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")
    logger.info("run %s done: %s", run_dir.name, {k: round(r.f1, 4) for k, r in reports.items()})
    return RunResult(run_dir, reports, digest, extra)


# ---------------------------------------------------------------------------
# subcommands

def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) in (None, "", [])]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def cmd_ingest(args):
    _require(args, "input", "out")
    c = corpus.load_corpus(args.input, args.split, args.domain)
    corpus.write_jsonl(c, args.out)
    print(f"wrote {len(c.documents)} documents to {args.out}")


def cmd_stats(args):
    _require(args, "input")
    st = corpus.corpus_stats(corpus.load_corpus(args.input, domain=args.domain))
    print(json.dumps(st.to_dict(), indent=2) if args.json else st.to_text())


def cmd_kappa(args):
    _require(args, "a", "b")
    a = [t.label for t in corpus.load_corpus(args.a).tokens()]
    b = [t.label for t in corpus.load_corpus(args.b).tokens()]
    try:
        k = corpus.cohens_kappa(a, b)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    print(f"{k:.6f}")


def cmd_synth_gen(args):
    _require(args, "out")
    given = {k: v for k, v in (args.spec or {}).items()}
    for flag, key in (("rate", "substitution_rate"), ("seed", "seed")):
        if getattr(args, flag, None) is not None:
            given[key] = getattr(args, flag)
    spec = _fill(synthbench.ShiftSpec, given, "spec")
    try:
        bench = synthbench.generate(spec)
    except synthbench.SpecError as exc:
        raise ValidationError(str(exc)) from exc
    paths = bench.write(args.out)
    failed = [c for c in synthbench.oracle_checks(bench) if not c.passed]
    for c in failed:
        print(f"oracle check failed: {c.name} ({c.detail})", file=sys.stderr)
    print(f"wrote {len(paths)} files to {args.out}")
    if failed:
        raise RuntimeError(f"{len(failed)} oracle checks failed")


def cmd_lm_train(args):
    _require(args, "raw", "out")
    raw = corpus.load_corpus(args.raw)
    lm = liw.train_lm(raw, _fill(liw.LmTrainConfig, args.lm_train, "lm_train"), _fill(liw.LmConfig, args.lm, "lm"))
    lm.save(args.out)
    last = lm.history[-1] if lm.history else {}
    print(f"saved LM to {args.out}; final validation perplexity {last.get('val_ppl', float('nan')):.2f}")


def cmd_weigh(args):
    _require(args, "lm", "train", "out")
    lm = liw.TargetLM.load(args.lm)
    train = corpus.load_corpus(args.train)
    _, ws = liw.weigh_corpus(lm, train, args.length_normalized)
    liw.write_sidecar(args.out, train, ws)
    print(f"wrote {ws.n} weights to {args.out}")


def cmd_daft_finetune(args):
    _require(args, "encoder", "source_raw", "target_raw", "out")
    cfg = _fill(daft.DaftConfig, {**(args.daft or {}), **({"objective": args.objective} if args.objective else {})},
                "daft")
    base = encoders.ContextualEncoder.load(args.encoder)
    mixed = daft.build_mixed_corpus(corpus.load_corpus(args.source_raw), corpus.load_corpus(args.target_raw), cfg.seed)
    if cfg.objective == "mlm":
        daft.mlm_finetune(base, mixed, cfg, args.out)
    else:
        daft.pos_finetune(base, mixed, cfg, args.out)
    print(f"saved fine-tuned encoder to {args.out}")


def _featurizer_for(meta: dict, model):
    feats = meta.get("features", {})
    if feats.get("kind") == "bert":
        enc_cfg = encoders.EncoderConfig(feats["encoder"], feats["layers_to_concat"], max_subtokens=feats["max_subtokens"])
        return cached_featurizer(encoders.ContextualEncoder.load(feats["encoder"]), enc_cfg)
    return model.featurize


def cmd_train(args):
    import torch

    _require(args, "train", "dev", "out")
    model_kind = args.model or "bert"
    tcfg = _fill(tagger.TrainConfig, {"seed": args.seed or 0, **(args.train_config or {})}, "train_config")
    train_c = corpus.load_corpus(args.train)
    dev = corpus.load_corpus(args.dev, "dev").sentences()
    train_ws = liw.read_sidecar(args.weights, train_c) if args.weights else \
        [tagger.WeightedSentence(s) for s in train_c.sentences()]
    torch.manual_seed(tcfg.seed)
    if model_kind == "bert":
        _require(args, "encoder")
        enc_cfg = encoders.EncoderConfig(args.encoder, args.layers or 4)
        featurize = cached_featurizer(encoders.ContextualEncoder.load(args.encoder), enc_cfg)
        features = {"kind": "bert", "encoder": str(encoders.resolve_checkpoint(args.encoder)),
                    "layers_to_concat": enc_cfg.layers_to_concat, "max_subtokens": enc_cfg.max_subtokens}
        dim = featurize(train_ws[0].sentence).shape[1]
        factory = lambda: tagger.TaggerModel(dim)
    elif model_kind == "delex":
        factory = lambda: tagger.DelexTagger(encoders.PosEmbeddingTable.random(seed=tcfg.seed), seed=tcfg.seed)
        featurize = factory().featurize
        features = {"kind": "delex"}
    else:
        raise UsageError(f"cannot train model {model_kind!r}")
    if args.ada_target_raw:
        tgt = corpus.load_corpus(args.ada_target_raw).sentences()
        torch.manual_seed(tcfg.seed)
        res = ada.train_ada_single(factory(), train_ws, tgt, dev, ada.AdaConfig(lam=args.lam, seed=tcfg.seed),
                                   tcfg, featurize)
        tagger.save_checkpoint(args.out, res.model, tcfg, res.history, res.best_epoch, res.best_dev_f1,
                               {"domain_predictor": res.extra["domain_predictor"]},
                               {"features": features, "ada": {"lambda": args.lam}})
    else:
        res = tagger.train_tagger(factory(), train_ws, dev, tcfg, featurize, out_dir=args.out,
                                  meta={"features": features, "weights": args.weights})
    print(f"best dev F1 {res.best_dev_f1:.4f} at epoch {res.best_epoch}; checkpoint in {args.out}")


def cmd_eval(args):
    _require(args, "test", "out")
    test = corpus.load_corpus(args.test, "test")
    sents = test.sentences()
    if args.checkpoint:
        model, meta = tagger.load_checkpoint(args.checkpoint)
        featurize = _featurizer_for(meta, model)
        pred = tagger.predict(model, [featurize(s) for s in sents], meta["train_config"]["threshold"])
        name = args.name or Path(args.checkpoint).name
    else:
        pred = [tagger.verb_baseline(s) for s in sents]
        name = args.name or "VERB"
    metadata = {"model": name, "target": Path(args.test).stem}
    if args.train_vocab:
        part = corpus.iv_oov_partition(test, corpus.build_vocab(corpus.load_corpus(args.train_vocab)))
        rep = evalsuite.bucket_score(pred, test, part, metadata)
    else:
        rep = evalsuite.score(pred, test, metadata)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
    print(f"P {rep.precision:.4f} R {rep.recall:.4f} F1 {rep.f1:.4f}")


def cmd_report(args):
    _require(args, "reports", "out")
    reps = [r for p in args.reports for r in evalsuite.load_reports(p)]
    paths = evalsuite.emit_report(reps, args.out)
    print(paths["summary"].read_text(), end="")


def cmd_encoder_init(args):
    """Create a small BERT-style checkpoint and pretrain it with masked LM.

    The word-piece vocabulary is learned from ``--texts`` plus any
    ``--vocab-texts``; masked-LM pretraining only sees ``--texts``.
    """
    _require(args, "texts", "out")
    pre = [s for p in args.texts for s in corpus.load_corpus(p).sentences()]
    extra = [s for p in (args.vocab_texts or []) for s in corpus.load_corpus(p).sentences()]
    out = Path(args.out)
    init_dir = encoders.init_encoder([" ".join(s.words) for s in pre + extra], out / "init",
                                     vocab_size=args.vocab_size or 1000, seed=args.seed or 0,
                                     **(args.encoder_shape or {}))
    base = encoders.ContextualEncoder.load(str(init_dir))
    cfg = _fill(daft.DaftConfig, {"lr": 1e-3, "batch_size": 16, "epochs": 8, "seed": args.seed or 0,
                                   **(args.daft or {})}, "daft")
    daft.mlm_finetune(base, pre, cfg, out / "pretrained")
    print(f"pretrained encoder in {out / 'pretrained'}")


def cmd_run(args):
    data = load_config_file(args.config) if args.config else {}
    for key in ("seed", "output_dir", "technique", "encoder"):
        if getattr(args, key, None) is not None:
            data[key] = getattr(args, key)
    cfg = ExperimentConfig.from_dict(data)
    res = run_experiment(cfg)
    for name, rep in res.reports.items():
        print(f"{name}: P {rep.precision:.4f} R {rep.recall:.4f} F1 {rep.f1:.4f}")
    print(f"run directory {res.run_dir}; outputs hash {res.outputs_hash}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="eventadapt", description="domain adaptation for event trigger tagging")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    S = argparse.SUPPRESS

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, argument_default=S)
        sp.add_argument("--config", help="YAML/JSON file whose keys fill any option below")
        sp.set_defaults(func=fn)
        return sp

    sp = add("ingest", cmd_ingest, "convert BRAT/TimeML/raw text into canonical JSONL")
    sp.add_argument("input"); sp.add_argument("--out"); sp.add_argument("--split"); sp.add_argument("--domain")
    sp = add("stats", cmd_stats, "corpus statistics")
    sp.add_argument("input"); sp.add_argument("--domain"); sp.add_argument("--json", action="store_true")
    sp = add("kappa", cmd_kappa, "Cohen's kappa between two annotations of the same text")
    sp.add_argument("a"); sp.add_argument("b")
    sp = add("synth-gen", cmd_synth_gen, "generate a synthetic source/target benchmark")
    sp.add_argument("--out"); sp.add_argument("--rate", type=float); sp.add_argument("--seed", type=int)
    sp = add("lm-train", cmd_lm_train, "train the target-domain language model")
    sp.add_argument("--raw"); sp.add_argument("--out")
    sp = add("weigh", cmd_weigh, "write per-sentence likelihood weights for a training corpus")
    sp.add_argument("--lm"); sp.add_argument("--train"); sp.add_argument("--out")
    sp.add_argument("--length-normalized", action="store_true")
    sp = add("daft-finetune", cmd_daft_finetune, "fine-tune an encoder on mixed source+target text")
    sp.add_argument("--encoder"); sp.add_argument("--source-raw"); sp.add_argument("--target-raw")
    sp.add_argument("--objective", choices=["mlm", "pos"]); sp.add_argument("--out")
    sp = add("train", cmd_train, "train a tagger (optionally weighted or adversarial)")
    sp.add_argument("--train"); sp.add_argument("--dev"); sp.add_argument("--encoder")
    sp.add_argument("--model", choices=["bert", "delex"]); sp.add_argument("--layers", type=int)
    sp.add_argument("--weights", help="sidecar from `weigh`"); sp.add_argument("--seed", type=int)
    sp.add_argument("--ada-target-raw"); sp.add_argument("--lam", type=float); sp.add_argument("--out")
    sp = add("eval", cmd_eval, "score a checkpoint (or the VERB baseline) on a test corpus")
    sp.add_argument("--checkpoint"); sp.add_argument("--test"); sp.add_argument("--train-vocab")
    sp.add_argument("--name"); sp.add_argument("--out")
    sp = add("report", cmd_report, "summary table and chart from report JSON files")
    sp.add_argument("reports", nargs="+"); sp.add_argument("--out")
    sp = add("encoder-init", cmd_encoder_init, "build and pretrain a small local encoder checkpoint")
    sp.add_argument("--texts", nargs="+"); sp.add_argument("--vocab-texts", nargs="+")
    sp.add_argument("--out"); sp.add_argument("--vocab-size", type=int)
    sp.add_argument("--seed", type=int)
    sp = add("run", cmd_run, "full pipeline from an experiment config")
    sp.add_argument("--seed", type=int); sp.add_argument("--output-dir"); sp.add_argument("--encoder")
    sp.add_argument("--technique", choices=TECHNIQUES)
    return p


# option defaults applied after config-file merging
_DEFAULTS = {
    "split": "train", "domain": "", "json": False, "spec": None, "rate": None, "seed": None, "lm": None,
    "lm_train": None, "length_normalized": False, "objective": None, "daft": None, "model": None, "layers": None,
    "weights": None, "ada_target_raw": None, "lam": 1.0, "train_config": None, "checkpoint": None,
    "train_vocab": None, "name": None, "vocab_size": None, "vocab_texts": None, "encoder_shape": None,
    "output_dir": None, "technique": None, "encoder": None,
}


def _merge(args: argparse.Namespace) -> argparse.Namespace:
    given = vars(args)
    merged = dict(_DEFAULTS)
    if args.command != "run" and given.get("config"):
        merged.update({k.replace("-", "_"): v for k, v in load_config_file(given["config"]).items()})
    merged.update(given)
    return argparse.Namespace(**merged)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args = _merge(args)
        args.func(args)
        return EXIT_OK
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, corpus.CorpusError, encoders.ConfigurationError, synthbench.SpecError,
            FileNotFoundError, KeyError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        logger.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
