import hashlib

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from eventadapt import daft, tagger
from eventadapt.corpus import SentenceRecord, TokenRecord
from eventadapt.daft import (IGNORE, DaftConfig, MixedCorpus, build_mixed_corpus, mask_tokens, mlm_finetune,
                             mlm_token_losses, pos_finetune, run_daft, tag_accuracy)
from eventadapt.encoders import UPOS_TAGS, EncoderConfig
from eventadapt.tagger import TaggerModel, TrainConfig, WeightedSentence


def sent(n, prefix="w", domain="", pos="NOUN"):
    toks = [TokenRecord(f"{prefix}{i}", 3 * i, 3 * i + 2, 0, pos) for i in range(n)]
    return SentenceRecord(toks, f"{prefix}doc", domain)


def dir_digest(path):
    h = hashlib.sha256()
    for p in sorted(path.rglob("*")):
        if p.is_file():
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# ---- mixing ---------------------------------------------------------------------------

def test_mix_unequal_sides():
    m = build_mixed_corpus([sent(5, "s")] * 100, [sent(5, "t")] * 300, seed=1)
    assert (m.n_source, m.n_target) == (100, 100)
    assert m.source_tokens == m.target_tokens == 500
    assert len(m.sentences) == 200


def test_mix_equal_sides_is_union():
    src = [sent(3, f"s{i}_") for i in range(20)]
    tgt = [sent(3, f"t{i}_") for i in range(20)]
    m = build_mixed_corpus(src, tgt)
    assert sorted(id(s) for s in m.sentences) == sorted(id(s) for s in src + tgt)
    assert m.sentences != src + tgt  # shuffled


def test_mix_is_seeded():
    src = [sent(k, "s") for k in range(1, 30)]
    tgt = [sent(2, "t")] * 10
    a = build_mixed_corpus(src, tgt, seed=4)
    b = build_mixed_corpus(src, tgt, seed=4)
    assert [id(s) for s in a.sentences] == [id(s) for s in b.sentences]


@given(st.lists(st.integers(1, 40), min_size=1, max_size=60), st.lists(st.integers(1, 40), min_size=1, max_size=60),
       st.integers(0, 100))
@settings(max_examples=100, deadline=None)
def test_mix_token_balance(src_lens, tgt_lens, seed):
    m = build_mixed_corpus([sent(k, "s") for k in src_lens], [sent(k, "t") for k in tgt_lens], seed)
    longest = max(src_lens + tgt_lens)
    assert abs(m.source_tokens - m.target_tokens) < longest
    assert m.n_source + m.n_target == len(m.sentences)
    small = min(sum(src_lens), sum(tgt_lens))  # the smaller side is kept whole
    assert min(m.source_tokens, m.target_tokens) == small


def test_mix_empty_side():
    with pytest.raises(ValueError):
        build_mixed_corpus([], [sent(2)])
    with pytest.raises(ValueError):
        build_mixed_corpus([sent(2)], [])


# ---- masking -------------------------------------------------------------------------

def test_mask_fraction_and_split():
    cfg = DaftConfig()
    g = torch.Generator().manual_seed(0)
    ids = torch.randint(10, 500, (400, 300), generator=g)
    maskable = torch.ones_like(ids, dtype=torch.bool)
    maskable[:, 0] = False
    corrupted, labels = mask_tokens(ids, maskable, cfg, mask_id=3, vocab_size=500, generator=g)
    selected = labels != IGNORE
    n = int(maskable.sum())
    assert n >= 100_000
    frac = selected.sum().item() / n
    assert 0.13 <= frac <= 0.17
    assert not selected[:, 0].any()
    assert torch.equal(labels[selected], ids[selected])
    assert torch.equal(corrupted[~selected], ids[~selected])
    k = selected.sum().item()
    as_mask = (corrupted[selected] == 3).sum().item() / k
    unchanged = (corrupted[selected] == ids[selected]).sum().item() / k
    assert abs(as_mask - 0.8) < 0.02
    # kept tokens plus random draws that happened to hit the original id
    assert abs(unchanged - 0.1) < 0.02
    assert abs(1 - as_mask - unchanged - 0.1) < 0.02


def test_config_validation():
    for bad in (dict(mask_rate=0.0), dict(mask_rate=1.0), dict(objective="x"), dict(mask_split=(0.5, 0.5, 0.5)),
                dict(epochs=-1)):
        with pytest.raises(ValueError):
            DaftConfig(**bad)
    c = DaftConfig()
    assert (c.epochs, c.batch_size, c.mask_rate, c.mask_split) == (3, 4, 0.15, (0.8, 0.1, 0.1))


def test_loss_only_at_corrupted_positions(tiny_encoder):
    tok = tiny_encoder.tokenizer
    words = [["the", "patient", "underwent", "surgery", "."], ["she", "was", "ill", "."]]
    rows = [tok(w, is_split_into_words=True)["input_ids"] for w in words]
    ids = daft._pad(rows, tok.pad_token_id)
    attention = (ids != tok.pad_token_id).long()
    g = torch.Generator().manual_seed(1)
    corrupted, labels = mask_tokens(ids, attention.bool(), DaftConfig(mask_rate=0.4), tok.mask_token_id, len(tok), g)
    assert (labels != IGNORE).any()
    model = tiny_encoder.model
    model.eval()
    losses = mlm_token_losses(model, corrupted, attention, labels)
    assert torch.all(losses[labels == IGNORE] == 0)
    assert torch.all(losses[labels != IGNORE] > 0)
    # gradient flows only from the corrupted positions
    model.zero_grad()
    losses[labels == IGNORE].sum().backward()
    assert all(p.grad is None or torch.all(p.grad == 0) for p in model.parameters())


# ---- MLM fine-tuning -------------------------------------------------------------------

def test_mlm_loss_decreases_and_epoch_count(tiny_encoder, small_bench):
    sents = small_bench.source_raw.sentences()[:24]
    new = mlm_finetune(tiny_encoder, sents, DaftConfig(epochs=3, lr=2e-3, mask_rate=0.3, seed=0))
    assert [h["epoch"] for h in new.history] == [1, 2, 3]
    assert new.history[-1]["loss"] < new.history[0]["loss"]
    assert new.model is not tiny_encoder.model


def test_mlm_too_small(tiny_encoder):
    with pytest.raises(ValueError):
        mlm_finetune(tiny_encoder, [sent(3)] * 3, DaftConfig(batch_size=4))
    with pytest.raises(ValueError):
        mlm_finetune(tiny_encoder, [sent(3)] * 8, DaftConfig(objective="pos"))


def test_base_checkpoint_untouched(tmp_path, tiny_encoder, tiny_encoder_dir, small_bench):
    before = dir_digest(tiny_encoder_dir)
    words = small_bench.source_raw.sentences()[0].words
    emb_before = tiny_encoder.embed(words)
    sents = small_bench.source_raw.sentences()[:8]
    new = mlm_finetune(tiny_encoder, sents, DaftConfig(epochs=1, lr=1e-3), out_dir=tmp_path / "ft")
    assert dir_digest(tiny_encoder_dir) == before
    assert torch.equal(tiny_encoder.embed(words), emb_before)
    assert not torch.equal(new.embed(words), emb_before)
    assert (tmp_path / "ft" / "daft.json").exists() and new.path == (tmp_path / "ft").resolve()
    with pytest.raises(ValueError):
        mlm_finetune(tiny_encoder, sents, DaftConfig(epochs=1), out_dir=tiny_encoder_dir)
    assert dir_digest(tiny_encoder_dir) == before


# ---- POS fine-tuning ----------------------------------------------------------------

def test_pos_missing_tag_names_document(tiny_encoder):
    bad = SentenceRecord([TokenRecord("a", 0, 1, 0, "DET"), TokenRecord("b", 2, 3)], "doc-17")
    with pytest.raises(ValueError, match="doc-17"):
        pos_finetune(tiny_encoder, [sent(3)] * 4 + [bad], DaftConfig(objective="pos"))


def test_pos_overfits_small_corpus(tiny_encoder, small_bench):
    sents = small_bench.source_train.sentences()[:5]
    cfg = DaftConfig(objective="pos", epochs=60, batch_size=1, lr=3e-3)
    new, head = pos_finetune(tiny_encoder, sents, cfg, return_head=True)
    assert head.proj.out_features == len(UPOS_TAGS)
    assert tag_accuracy(new, head, sents) >= 0.95
    words = sents[0].words
    assert new.embed(words).shape == tiny_encoder.embed(words).shape


# ---- two-step procedure -----------------------------------------------------------

@pytest.fixture(scope="module")
def tagger_data(small_bench):
    train = [WeightedSentence(s) for s in small_bench.source_train.sentences()[:60]]
    dev = small_bench.source_dev.sentences()[:20]
    return train, dev


def test_zero_epochs_equals_baseline(tiny_encoder, small_bench, tagger_data):
    train, dev = tagger_data
    enc_cfg = EncoderConfig("tiny")
    tcfg = TrainConfig(max_epochs=3, patience=2, seed=0)
    test = small_bench.target_test.sentences()[:30]

    def feat(s):
        return tiny_encoder.embed(s.words, enc_cfg.layers_to_concat)

    torch.manual_seed(0)
    base = TaggerModel(4 * tiny_encoder.hidden_size, 16, 16)
    tagger.train_tagger(base, train, dev, tcfg, feat)
    base_pred = tagger.predict(base, [feat(s) for s in test])

    torch.manual_seed(0)
    model = TaggerModel(4 * tiny_encoder.hidden_size, 16, 16)
    tuned, _ = run_daft(tiny_encoder, small_bench.source_raw, small_bench.target_raw, DaftConfig(epochs=0),
                        enc_cfg, model, train, dev, tcfg)
    pred = tagger.predict(model, [tuned.embed(s.words) for s in test])
    assert pred == base_pred
    assert tuned.history == []


def test_step_two_is_train_tagger(monkeypatch, tiny_encoder, small_bench, tagger_data):
    train, dev = tagger_data
    calls = []
    real = tagger.train_tagger

    def spy(*a, **k):
        calls.append(k.get("meta"))
        return real(*a, **k)

    monkeypatch.setattr(tagger, "train_tagger", spy)
    run_daft(tiny_encoder, small_bench.source_raw, small_bench.target_raw, DaftConfig(epochs=0),
             EncoderConfig("tiny"), TaggerModel(4 * tiny_encoder.hidden_size, 8, 8), train, dev,
             TrainConfig(max_epochs=2, patience=1))
    assert len(calls) == 1 and calls[0]["daft"]["epochs"] == 0


def test_mixed_corpus_record_type(small_bench):
    m = build_mixed_corpus(small_bench.source_raw, small_bench.target_raw)
    assert isinstance(m, MixedCorpus)
    assert {s.domain for s in m.sentences} == {small_bench.source_raw.sentences()[0].domain,
                                               small_bench.target_raw.sentences()[0].domain}
    assert abs(m.source_tokens - m.target_tokens) < max(len(s) for s in m.sentences)
    assert np.isclose(sum(map(len, m.sentences)), m.source_tokens + m.target_tokens)
