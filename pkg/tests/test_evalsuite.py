"""Evaluation machinery: tracking, retrieval, predictiveness, alignment."""

import numpy as np
import pytest
import torch

from lamworld import evalsuite, lam, worldgen
from lamworld.evalsuite import (
    PredictivenessCurve,
    alignment_nmi,
    circular_displacement,
    classify_direction,
    nn_retrieval,
    predictiveness_curve,
    sprite_centroid,
    write_csv,
    write_table,
)
from lamworld.lam import LabeledPair, LatentAction
from lamworld.worldgen import ActionKind, Embodiment


def _pair(emb, dx=0.0, dy=0.0, grab=-1.0, kind=ActionKind.NOOP, source=("c", 0, 3)):
    emb = np.asarray(emb, dtype=np.float32).reshape(2, 2)
    frame = np.zeros((32, 32, 3), dtype=np.float32)
    return LabeledPair(
        obs=frame,
        goal=frame,
        context=frame[None],
        action=LatentAction(indices=(0, 0), embedding=emb, source=source),
        instruction=[0],
        gt_kind=kind,
        gt_continuous=np.array([dx, dy, grab], dtype=np.float32),
    )


# -- centroid tracking ----------------------------------------------------------


def test_sprite_centroid_tracks_rendered_agent():
    clip = worldgen.generate_episode(3, Embodiment.ARM_A, 6)
    color = worldgen.AGENT_COLORS[Embodiment.ARM_A]
    state, _ = worldgen.initial_state(3, Embodiment.ARM_A)
    c = sprite_centroid(clip.frames[0], color)
    true = state.positions[state.agent_index]
    d = circular_displacement(c, true)
    assert np.abs(d).max() < 1.0


def test_sprite_centroid_none_when_absent():
    frame = np.zeros((32, 32, 3), dtype=np.float32)
    assert sprite_centroid(frame, np.array([1.0, 0.5, 0.1])) is None


def test_circular_displacement_wraps():
    a = np.array([30.0, 30.0])
    b = np.array([1.0, 2.0])
    d = circular_displacement(a, b)
    assert d[0] == pytest.approx(3.0)
    assert d[1] == pytest.approx(4.0)


def test_classify_direction_dead_zone():
    assert classify_direction(0.2, 0.3) is None
    assert classify_direction(0.0, 2.0) is ActionKind.RIGHT
    assert classify_direction(-3.0, 1.0) is ActionKind.UP
    assert classify_direction(2.0, -1.0) is ActionKind.DOWN
    assert classify_direction(0.0, -0.8) is ActionKind.LEFT


# -- retrieval -------------------------------------------------------------------


def test_retrieval_planted_duplicate_is_rank_one():
    corpus = [
        _pair([0.0, 0.0, 0.0, 0.0], source=("a", 0, 3)),
        _pair([1.0, 1.0, 1.0, 1.0], source=("b", 0, 3)),
        _pair([5.0, 5.0, 5.0, 5.0], source=("c", 0, 3)),
    ]
    query = _pair([1.0, 1.0, 1.0, 1.0], source=("q", 0, 3))
    res = nn_retrieval(query, corpus, k=3)
    assert res.neighbors[0][0].action.source == ("b", 0, 3)
    assert res.neighbors[0][1] == 0.0
    dists = [d for _, d in res.neighbors]
    assert dists == sorted(dists)


def test_retrieval_excludes_query_itself():
    corpus = [_pair([float(i)] * 4, source=(f"c{i}", 0, 3)) for i in range(4)]
    res = nn_retrieval(corpus[1], corpus, k=4)
    assert all(n.action.source != ("c1", 0, 3) for n, _ in res.neighbors)
    assert len(res.neighbors) == 3  # truncated when k exceeds eligible corpus


def test_retrieval_matches_brute_force():
    rng = np.random.default_rng(0)
    corpus = [
        _pair(rng.normal(size=4), source=(f"c{i}", 0, 3)) for i in range(30)
    ]
    query = _pair(rng.normal(size=4), source=("q", 0, 3))
    res = nn_retrieval(query, corpus, k=5)
    q = query.action.embedding.reshape(-1)
    brute = sorted(
        range(30), key=lambda i: float(((corpus[i].action.embedding.reshape(-1) - q) ** 2).sum())
    )[:5]
    got = [n.action.source for n, _ in res.neighbors]
    assert got == [corpus[i].action.source for i in brute]


def test_retrieval_distance_symmetry():
    a = _pair([1.0, 2.0, 3.0, 4.0], source=("a", 0, 3))
    b = _pair([0.0, 1.0, 1.0, 2.0], source=("b", 0, 3))
    d_ab = nn_retrieval(a, [b], k=1).neighbors[0][1]
    d_ba = nn_retrieval(b, [a], k=1).neighbors[0][1]
    assert d_ab == d_ba


# -- predictiveness ---------------------------------------------------------------


def _labeled_corpus(n=64, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        emb = rng.normal(size=4)
        out.append(
            _pair(
                emb,
                dx=float(rng.normal()),
                dy=float(rng.normal()),
                grab=float(rng.choice([-1.0, 1.0])),
                source=(f"c{i}", 0, 3),
            )
        )
    return out


def test_predictiveness_endpoints_exact():
    corpus = _labeled_corpus()
    curve = predictiveness_curve(corpus, Ns=(1, len(corpus)), M=len(corpus), seed=0)
    assert np.all(curve.normalized_std[0] == 0.0)
    assert curve.normalized_std[-1] == pytest.approx(np.ones(3), abs=1e-9)


def test_predictiveness_matches_brute_force_small():
    corpus = _labeled_corpus(12, seed=1)
    curve = predictiveness_curve(corpus, Ns=(1, 3), M=12, seed=0)
    emb = np.stack([p.action.embedding.reshape(-1) for p in corpus])
    acts = np.stack([p.gt_continuous for p in corpus])
    ref = np.zeros(3)
    for q in range(12):
        d = ((emb - emb[q]) ** 2).sum(1)
        nn = np.argsort(d, kind="stable")[:3]
        ref += acts[nn].std(axis=0)
    ref = ref / 12 / acts.std(axis=0)
    assert curve.normalized_std[1] == pytest.approx(ref, rel=1e-5)


def test_predictiveness_clamps_m_with_warning():
    corpus = _labeled_corpus(10)
    with pytest.warns(UserWarning):
        curve = predictiveness_curve(corpus, Ns=(1, 2), M=50, seed=0)
    assert curve.Ns == [1, 2]


def test_predictiveness_validates_n():
    corpus = _labeled_corpus(10)
    with pytest.raises(ValueError):
        predictiveness_curve(corpus, Ns=(0, 2), M=5, seed=0)
    with pytest.raises(ValueError):
        predictiveness_curve(corpus, Ns=(1, 200), M=5, seed=0)


# -- alignment ---------------------------------------------------------------------


def test_alignment_perfect_and_shuffled():
    rng = np.random.default_rng(2)
    pairs = []
    kinds = [ActionKind.LEFT, ActionKind.RIGHT, ActionKind.UP, ActionKind.DOWN]
    for i in range(400):
        kind = kinds[i % 4]
        emb = np.zeros(4)
        emb[int(kind) % 4] = 10.0
        p = _pair(emb, kind=kind, source=(f"c{i}", 0, 3))
        p.action = LatentAction(indices=(int(kind), int(kind)), embedding=p.action.embedding)
        pairs.append(p)
    rep = alignment_nmi(pairs, seed=0)
    assert rep.nmi == pytest.approx(1.0, abs=1e-9)
    assert rep.shuffled_nmi < 0.05


# -- report writers ------------------------------------------------------------------


def test_write_csv_and_table(tmp_path):
    rows = [{"a": 1, "b": 0.5}, {"a": 2, "b": 0.25}]
    write_csv(tmp_path / "out.csv", rows)
    text = (tmp_path / "out.csv").read_text()
    assert text.splitlines()[0] == "a,b"
    write_table(tmp_path / "out.txt", rows, "title")
    table = (tmp_path / "out.txt").read_text()
    assert "title" in table and "0.25000" in table


def test_reference_values_recorded():
    assert evalsuite.REFERENCE_FULL_SCALE_VAL_LOSS == {
        "single_source": 0.145,
        "mixed": 0.112,
    }
