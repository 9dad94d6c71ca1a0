import csv
import json
import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eventadapt.corpus import IvOovPartition, TokenRecord, build_vocab, iv_oov_partition
from eventadapt.evalsuite import (TYPE_CSV_FIELDS, AlignmentError, EvalReport, OovItem, bucket_score, emit_report,
                                  load_reports, morph_pattern_report, oov_items, plot_scores, sample_type_analysis,
                                  score, write_type_csv)


def brute_force(pred, gold):
    """Set intersection over positive positions, independent of the scorer's loop."""
    P = {(i, j) for i, s in enumerate(pred) for j, v in enumerate(s) if v == 1}
    G = {(i, j) for i, s in enumerate(gold) for j, v in enumerate(s) if v == 1}
    return len(P & G), len(P - G), len(G - P)


def random_pair(rng):
    n = int(rng.integers(1, 6))
    lens = rng.integers(1, 51, n)
    gold = [rng.integers(0, 2, k).tolist() for k in lens]
    pred = [rng.integers(0, 2, k).tolist() for k in lens]
    return pred, gold


def test_oracle_on_100_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(100):
        pred, gold = random_pair(rng)
        r = score(pred, gold)
        assert (r.tp, r.fp, r.fn) == brute_force(pred, gold)


def test_hand_cases():
    gold = [[0, 0, 1, 0, 0, 1]]
    r = score([[0, 0, 1, 1, 0, 0]], gold)
    assert (r.tp, r.fp, r.fn) == (1, 1, 1)
    assert r.precision == r.recall == r.f1 == 0.5
    perfect = score(gold, gold)
    assert perfect.precision == perfect.recall == perfect.f1 == 1.0
    none = score([[0] * 6], gold)
    assert (none.precision, none.recall, none.f1) == (0.0, 0.0, 0.0)


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_f1_formula(tp, fp, fn):
    r = EvalReport(tp, fp, fn)
    p, rec = r.precision, r.recall
    assert r.f1 == (2 * p * rec / (p + rec) if p + rec else 0.0)
    assert 0 <= r.f1 <= 1


def test_alignment_errors():
    with pytest.raises(AlignmentError, match="sentence 1"):
        score([[0], [0, 1]], [[0], [1]])
    with pytest.raises(AlignmentError):
        score([[0]], [[0], [1]])


def partition_for(gold, rng):
    pos = [(i, j) for i, s in enumerate(gold) for j in range(len(s))]
    oov = {p for p in pos if rng.random() < 0.3}
    return IvOovPartition(frozenset(set(pos) - oov), frozenset(oov))


def test_buckets_decompose_on_random_pairs():
    rng = np.random.default_rng(1)
    for _ in range(100):
        pred, gold = random_pair(rng)
        part = partition_for(gold, rng)
        rep = bucket_score(pred, gold, part)
        iv, oov = rep.buckets["IV"], rep.buckets["OOV"]
        for k in ("tp", "fp", "fn"):
            assert getattr(iv, k) + getattr(oov, k) == getattr(rep, k)
        assert (rep.tp, rep.fp, rep.fn) == brute_force(pred, gold)
        # each bucket also matches the oracle restricted to its positions
        mask = [[int((i, j) in part.oov) for j in range(len(s))] for i, s in enumerate(gold)]
        p_oov = [[v * m for v, m in zip(p, ms)] for p, ms in zip(pred, mask)]
        g_oov = [[v * m for v, m in zip(g, ms)] for g, ms in zip(gold, mask)]
        assert (oov.tp, oov.fp, oov.fn) == brute_force(p_oov, g_oov)


def test_all_iv_gives_empty_oov():
    gold = [[1, 0, 1]]
    part = IvOovPartition(frozenset({(0, 0), (0, 1), (0, 2)}), frozenset())
    rep = bucket_score([[1, 1, 0]], gold, part)
    o = rep.buckets["OOV"]
    assert (o.tp, o.fp, o.fn) == (0, 0, 0)


def test_position_outside_partition():
    with pytest.raises(KeyError):
        bucket_score([[1, 0]], [[1, 0]], IvOovPartition(frozenset({(0, 0)}), frozenset()))


def test_oov_recall_matches_generator(small_bench):
    test = small_bench.target_test
    part = iv_oov_partition(test, build_vocab(small_bench.source_train))
    assert sorted(part.oov) == sorted(map(tuple, small_bench.truth.oov_positions))
    rng = np.random.default_rng(5)
    pred = [rng.integers(0, 2, len(s)).tolist() for s in test.sentences()]
    events = [tuple(p) for p in small_bench.truth.oov_event_positions]
    assert events
    hits = sum(pred[i][j] for i, j in events)
    rep = bucket_score(pred, test, part)
    assert rep.buckets["OOV"].recall == hits / len(events)


# ---- morphology ----------------------------------------------------------------------

def test_morph_examples():
    r = morph_pattern_report({"irrigated", "excision", "wheezing"})
    assert r["counts"] == {"ed": 1, "ing": 1, "tion_sion": 1} and r["fraction"] == 1.0
    empty = morph_pattern_report([])
    assert empty["fraction"] == 0 and all(v == 0 for v in empty["counts"].values())
    assert morph_pattern_report({"cat"})["fraction"] == 0


def test_morph_case_and_pos():
    toks = [TokenRecord("Dissected", 0, 9, 1, "VBD"), TokenRecord("bed", 0, 3, 1, "NOUN"),
            TokenRecord("Ablation", 0, 8, 1, "NN")]
    r = morph_pattern_report(toks)
    assert r["counts"]["ed"] == 2 and r["counts"]["tion_sion"] == 1
    assert r["pos_constrained"]["counts"] == {"ed": 1, "ing": 0, "tion_sion": 1}
    assert r["pos_constrained"]["fraction"] == pytest.approx(2 / 3)


@given(st.lists(st.text("abcdegintos", min_size=1, max_size=8), max_size=30))
def test_morph_fraction_bounds(words):
    r = morph_pattern_report(words)
    assert 0 <= r["fraction"] <= 1
    assert r["any"] <= sum(r["counts"].values())
    expected = sum(w.casefold().endswith(("ed", "ing", "tion", "sion")) for w in words)
    assert r["any"] == expected


# ---- type analysis ----------------------------------------------------------------------

def items(n):
    return [OovItem((0, i), f"w{i}", i % 2, "Process" if i % 2 else None, "notes") for i in range(n)]


def test_sample_rows_and_seed():
    pop = items(40)
    models = {"a": [[1] * 40], "b": [[0] * 40]}
    rows = sample_type_analysis(pop, 10, models, seed=3)
    assert len(rows) == 20
    assert rows == sample_type_analysis(pop, 10, models, seed=3)
    assert len({r.token for r in rows}) == 10
    for r in rows:
        gold = int(r.token[1:]) % 2
        assert r.correct == int((r.model == "a") == bool(gold))
        assert r.event_type == ("Process" if gold else "None")


def test_sample_over_population_warns():
    with pytest.warns(UserWarning):
        rows = sample_type_analysis(items(3), 10, {"m": [[0, 0, 0]]})
    assert len(rows) == 3


def test_row_count_magnitude():
    # five models, five hundred tokens per domain, two domains
    rows = []
    for dom in ("notes", "convos"):
        pop = [OovItem((0, i), f"w{i}", 1, "Process", dom) for i in range(600)]
        rows += sample_type_analysis(pop, 500, {f"m{k}": [[1] * 600] for k in range(5)})
    assert len(rows) == 5000


def test_csv_header_and_empty(tmp_path):
    write_type_csv(sample_type_analysis(items(5), 0, {"m": [[0] * 5]}), tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines == [",".join(TYPE_CSV_FIELDS)]
    write_type_csv(sample_type_analysis(items(5), 2, {"m": [[0] * 5]}), tmp_path / "u.csv")
    rows = list(csv.DictReader(open(tmp_path / "u.csv")))
    assert len(rows) == 2 and tuple(rows[0]) == TYPE_CSV_FIELDS


def test_oov_items_from_bench(small_bench):
    part = iv_oov_partition(small_bench.target_test, build_vocab(small_bench.source_train))
    its = oov_items(small_bench.target_test, part, "target")
    assert len(its) == len(part.oov)
    assert sum(i.gold for i in its) == len(small_bench.truth.oov_event_positions)


# ---- report emission -----------------------------------------------------------------------

def make_reports():
    a = EvalReport(5, 2, 3, {"IV": EvalReport(4, 1, 1), "OOV": EvalReport(1, 1, 2)},
                   {"model": "bert", "source": "news", "target": "notes", "seed": 0})
    b = EvalReport(7, 0, 1, {"IV": EvalReport(6, 0, 0), "OOV": EvalReport(1, 0, 1)}, {"model": "bert-liw"})
    return [a, b]


def test_emit_report(tmp_path):
    reps = make_reports()
    paths = emit_report(reps[:1], tmp_path / "one")
    rows = [l for l in paths["summary"].read_text().splitlines() if l.startswith("| bert")]
    assert len(rows) == 1
    paths = emit_report(reps, tmp_path / "r")
    assert {p.name for p in paths.values()} == {"summary.md", "reports.json", "scores.png"}
    back = load_reports(paths["json"])
    assert [r.to_dict() for r in back] == [r.to_dict() for r in reps]
    assert json.loads(paths["json"].read_text())[0]["schema_version"] == 1


def test_chart_axes_cover_values():
    fig = plot_scores(make_reports())
    assert len(fig.axes) == 3
    for ax in fig.axes:
        top = max(bar.get_height() for bar in ax.patches)
        assert ax.get_ylim()[1] >= top
    import matplotlib.pyplot as plt

    plt.close(fig)


def test_emit_errors(tmp_path):
    with pytest.raises(ValueError):
        emit_report([], tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_report(make_reports(), blocker / "sub")
    if os.geteuid() != 0:
        ro = tmp_path / "ro"
        ro.mkdir()
        ro.chmod(0o500)
        with pytest.raises(OSError):
            emit_report(make_reports(), ro)
