"""Confusion analysis, difficulty levels, ambiguous groups, fusion, embeddings and reports."""

import json

import numpy as np
import pytest

from frhead.metrics import (
    ConfusionMatrix,
    ambiguous_groups,
    build_metrics,
    confusion,
    curves_svg,
    difficulty_level,
    difficulty_split,
    export_embeddings,
    fuse_streams,
    read_embeddings,
    write_report,
)
from frhead.trainer import EPOCH_FIELDS, RunLog


def cm_from_rows(rows):
    return ConfusionMatrix(np.asarray(rows, dtype=np.int64))


# ---------------------------------------------------------------------------
# confusion


def test_perfect_predictions_give_diagonal():
    labels = np.array([0, 1, 2, 2, 1])
    cm = confusion(labels, labels, 3)
    np.testing.assert_array_equal(cm.counts, np.diag([1, 2, 2]))
    assert cm.accuracy == 1.0


def test_swap_gives_anti_diagonal():
    np.testing.assert_array_equal(confusion([1, 0], [0, 1], 2).counts, [[0, 1], [1, 0]])


def test_confusion_identities_on_random_data():
    rng = np.random.default_rng(0)
    for _ in range(50):
        k, n = int(rng.integers(2, 9)), int(rng.integers(1, 200))
        labels, preds = rng.integers(0, k, n), rng.integers(0, k, n)
        cm = confusion(preds, labels, k)
        assert cm.total == n
        assert cm.accuracy == np.mean(preds == labels)
        np.testing.assert_array_equal(cm.counts.sum(axis=1), np.bincount(labels, minlength=k))


def test_empty_rows_are_undefined():
    cm = confusion([0, 0, 2], [0, 2, 2], 4)
    acc = cm.per_class_accuracy()
    assert cm.undefined.tolist() == [False, True, False, True]
    assert acc[0] == 1.0 and acc[2] == 0.5 and np.isnan(acc[1]) and np.isnan(acc[3])


@pytest.mark.parametrize("preds,labels", [([0, 3], [0, 1]), ([0, 1], [0, -1]), ([0], [0, 1])])
def test_confusion_range_errors(preds, labels):
    with pytest.raises(ValueError):
        confusion(preds, labels, 3)


# ---------------------------------------------------------------------------
# difficulty levels


def test_difficulty_thresholds():
    assert difficulty_split([0.5, 0.8, 0.95]).levels == ["Hard", "Medium", "Easy"]
    assert difficulty_split([1.0] * 4).levels == ["Easy"] * 4
    assert difficulty_level(0.70) == "Medium" and difficulty_level(0.90) == "Medium"
    assert difficulty_level(np.nextafter(0.70, 0)) == "Hard"
    assert difficulty_level(np.nextafter(0.90, 1)) == "Easy"


def test_difficulty_levels_follow_reference():
    split = difficulty_split([0.5, 0.6, 0.8, 0.95], [0.7, 0.9, 0.85, 1.0])
    assert split.level_counts == {"Hard": 2, "Medium": 1, "Easy": 1}
    assert split.level_accuracy["Hard"] == pytest.approx(0.8, abs=1e-15)
    assert split.level_accuracy["Medium"] == 0.85 and split.level_accuracy["Easy"] == 1.0
    table = split.table()
    assert len(table) == 3 and [r["level"] for r in table] == ["Hard", "Medium", "Easy"]
    assert difficulty_split([0.95, 0.99]).level_accuracy["Hard"] is None
    with pytest.raises(ValueError):
        difficulty_split([0.5], [0.5, 0.6])


# ---------------------------------------------------------------------------
# ambiguous groups


def test_top3_with_index_tie_break():
    # anchor 0; off-diagonals over classes 1..4 are [5, 3, 3, 1]
    rows = np.eye(5, dtype=np.int64) * 10
    rows[0, 1:] = [5, 3, 3, 1]
    (group,) = ambiguous_groups(cm_from_rows(rows), [0])
    assert group.members == [0, 1, 2, 3] and not group.degenerate
    rows[0, 1:] = [3, 3, 5, 3]
    assert ambiguous_groups(cm_from_rows(rows), [0])[0].confused == [3, 1, 2]


def test_diagonal_matrix_gives_degenerate_group():
    (group,) = ambiguous_groups(cm_from_rows(np.eye(4, dtype=np.int64) * 3), [2])
    assert group.degenerate and group.confused == [] and group.accuracy == 1.0


def test_group_accuracy_is_unweighted_mean():
    # per-class accuracies 0.6, 0.8, 0.9, 0.7 with very different row sizes
    rows = np.zeros((4, 4), dtype=np.int64)
    rows[0] = [6, 2, 1, 1]
    rows[1] = [20, 80, 0, 0]
    rows[2] = [1, 0, 9, 0]
    rows[3] = [3, 0, 0, 7]
    (group,) = ambiguous_groups(cm_from_rows(rows), [0])
    assert group.members == [0, 1, 2, 3]
    assert group.accuracy == pytest.approx(0.75, abs=1e-15)


def test_groups_are_deterministic():
    rng = np.random.default_rng(3)
    cm = cm_from_rows(rng.integers(0, 4, size=(8, 8)))
    a = [g.as_dict() for g in ambiguous_groups(cm, range(8))]
    b = [g.as_dict() for g in ambiguous_groups(cm, range(8))]
    assert a == b
    for g in a:
        assert len(set([g["anchor"]] + g["confused"])) == 1 + len(g["confused"])


# ---------------------------------------------------------------------------
# fusion


def softmax_rows(s):
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def test_fusion_cases():
    rng = np.random.default_rng(1)
    a, b, c = (rng.normal(size=(20, 6)) for _ in range(3))
    np.testing.assert_array_equal(fuse_streams([a], [1.0]).argmax(axis=1), a.argmax(axis=1))
    np.testing.assert_array_equal(fuse_streams([a, a]).argmax(axis=1), a.argmax(axis=1))
    np.testing.assert_allclose(fuse_streams([a, b], [1.0, 0.0]), softmax_rows(a), rtol=1e-14)
    np.testing.assert_allclose(fuse_streams([a, b, c]), fuse_streams([c, a, b]), rtol=1e-14)
    np.testing.assert_allclose(fuse_streams([a, b], [2.0, 0.5]), 2 * softmax_rows(a) + 0.5 * softmax_rows(b),
                               rtol=1e-14)


@pytest.mark.parametrize("scores,weights", [([np.zeros((2, 3)), np.zeros((2, 4))], None), ([], None),
                                            ([np.zeros((2, 3))], [-1.0]), ([np.zeros((2, 3))] * 2, [0.0, 0.0]),
                                            ([np.zeros((2, 3))] * 2, [1.0])])
def test_fusion_errors(scores, weights):
    with pytest.raises(ValueError):
        fuse_streams(scores, weights)


# ---------------------------------------------------------------------------
# embeddings


def test_embedding_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    emb = rng.normal(size=(12, 5)) * np.logspace(-6, 6, 5)
    labels = rng.integers(0, 4, size=12)
    path = tmp_path / "emb.csv"
    export_embeddings(emb, labels, path)
    assert len(path.read_text().splitlines()) == 13
    back, back_labels = read_embeddings(path)
    np.testing.assert_array_equal(back_labels, labels)
    np.testing.assert_allclose(back, emb, rtol=1e-7, atol=0)


def test_empty_embedding_export(tmp_path):
    path = tmp_path / "emb.csv"
    export_embeddings(np.zeros((0, 3)), [], path)
    assert path.read_text() == "label,e0,e1,e2\n"
    emb, labels = read_embeddings(path)
    assert emb.shape == (0, 3) and labels.size == 0


# ---------------------------------------------------------------------------
# reports


def small_log(n=4):
    records = []
    for e in range(n):
        r = {f: 0.0 for f in EPOCH_FIELDS}
        r.update(epoch=e, lr=0.1, loss_ce=2.0 / (e + 1), loss_total=2.1 / (e + 1), train_acc=0.2 * e,
                 eval_acc=0.15 * e, skipped=0)
        records.append(r)
    return RunLog(config={"seed": 0}, records=records)


def test_report_files_and_consistency(tmp_path):
    rng = np.random.default_rng(4)
    probs = softmax_rows(rng.normal(size=(30, 5)))
    labels = rng.integers(0, 5, size=30)
    metrics = build_metrics(probs, labels, 5)
    paths = write_report(small_log(), metrics, tmp_path / "r")
    summary = json.loads(paths["summary"].read_text())
    assert summary["metrics"]["accuracy"] == float(np.mean(probs.argmax(axis=1) == labels))
    assert len(summary["metrics"]["difficulty"]) == 3
    assert summary["run"]["best_epoch"] == 3
    assert paths["curves"].read_text().splitlines()[0] == ",".join(EPOCH_FIELDS)
    assert paths["svg"].read_text().startswith("<svg")
    first = {k: p.read_bytes() for k, p in paths.items()}
    again = write_report(small_log(), build_metrics(probs, labels, 5), tmp_path / "r")
    assert {k: p.read_bytes() for k, p in again.items()} == first


def test_report_without_svg_and_with_missing_classes(tmp_path):
    probs = np.eye(4)[[0, 0, 1]]
    metrics = build_metrics(probs, [0, 0, 1], 4, fusion={"weights": [1.0]})
    assert metrics["per_class_accuracy"] == [1.0, 1.0, None, None]
    paths = write_report(small_log(2), metrics, tmp_path, svg=False)
    assert "svg" not in paths and not (tmp_path / "curves.svg").exists()
    assert json.loads(paths["summary"].read_text())["metrics"]["fusion"] == {"weights": [1.0]}


def test_svg_handles_single_epoch():
    svg = curves_svg(small_log(1).records)
    assert svg.count("<polyline") == 4 and svg.rstrip().endswith("</svg>")
