import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import mono_oracle, planted_sae, planted_suite, top_distance_oracle
from recsae.analysis import (
    best_neuron_for_label,
    export_neurons,
    genre_activation_profile,
    monosemanticity_from_activations,
    neuron_activations,
    neuron_reports,
    peak_neuron,
    popularity_percentile,
    popularity_top_distance,
    read_label_file,
    rows_to_csv,
    semantic_purity,
    temporal_profile,
    top_activating,
)
from recsae.data import ItemMeta
from recsae.mathops import make_rng
from recsae.synth import concept_label


def meta_of(labels_per_item, years=None):
    years = years or [None] * len(labels_per_item)
    return {i: ItemMeta(f"item {i}", frozenset(l), y) for i, (l, y) in enumerate(zip(labels_per_item, years))}


def test_top_activating_order_and_ties():
    acts = np.array([[0.5], [2.0], [0.5], [1.0]])
    assert top_activating(acts, 0, 3) == [(1, 2.0), (3, 1.0), (0, 0.5)]


def test_semantic_purity_hand_instance():
    meta = meta_of([{"A"}, {"A", "B"}, {"B"}, set()])
    assert semantic_purity([0, 1, 2, 3], "A", meta) == 0.5
    assert semantic_purity([(1, 3.0), (2, 1.0)], "B", meta) == 1.0
    assert semantic_purity([], "A", meta) == 0.0


def test_purity_counts_missing_metadata_as_miss(caplog):
    meta = meta_of([{"A"}, {"A"}])
    with caplog.at_level(logging.WARNING):
        assert semantic_purity([0, 1, 7, 8], "A", meta) == 0.5
    assert "2 of 4 items have no metadata" in caplog.text


def test_popularity_top_distance_hand_instance():
    pop = np.array([10, 3, 3, 50])
    np.testing.assert_allclose(popularity_top_distance(pop), [1.5 / 4, 3.0 / 4, 3.0 / 4, 0.5 / 4])
    assert popularity_percentile([3, 0], pop) == pytest.approx((0.5 / 4 + 1.5 / 4) / 2)
    assert popularity_percentile([3, 0, 1], pop, k=1) == pytest.approx(0.125)
    with pytest.raises(ValueError):
        popularity_percentile([], pop)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=25))
def test_popularity_top_distance_matches_counting_oracle(pop):
    got = popularity_top_distance(np.array(pop))
    np.testing.assert_allclose(got, top_distance_oracle(pop), atol=1e-12)
    assert np.all((got > 0) & (got < 1))


@pytest.mark.parametrize("seed", range(5))
def test_monosemanticity_matches_pairwise_oracle(seed):
    rng = make_rng(seed)
    acts = np.maximum(rng.normal(size=(40, 6)), 0.0)
    acts[:, 5] = 0.0
    acts[3, 5] = 1.0  # one active item only
    emb = rng.normal(size=(40, 5))
    got, agg, skipped = monosemanticity_from_activations(acts, emb, top_t=12)
    ref = mono_oracle(acts, emb, 12)
    np.testing.assert_allclose(got[:5], ref[:5], atol=1e-12)
    assert skipped == [5] and math.isnan(got[5])
    assert agg == pytest.approx(np.mean(ref[:5]), abs=1e-12)


def test_monosemanticity_identical_directions_is_one():
    emb = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [0.0, 1.0]])
    acts = np.array([[1.0], [2.0], [0.5], [0.0]])
    got, agg, _ = monosemanticity_from_activations(acts, emb, top_t=4)
    assert got[0] == pytest.approx(1.0) and agg == pytest.approx(1.0)


def test_genre_profile_both_modes():
    acts = np.array([[1.0, 0.0], [3.0, 1.0], [0.0, 2.0], [0.0, 0.0]])
    meta = meta_of([{"A"}, {"A"}, {"B"}, {"B"}])
    rows = genre_activation_profile(acts, meta, label="A")
    assert rows[0] == {"label": "A", "neuron": 0, "mean_activation": 2.0, "baseline": 1.0}
    assert rows[1]["mean_activation"] == 0.5 and rows[1]["baseline"] == 0.75
    assert peak_neuron(rows) == 0
    rows = genre_activation_profile(acts, meta, neuron=1)
    assert [(r["label"], r["n_items"], r["mean_activation"]) for r in rows] == [("A", 2, 0.5), ("B", 2, 1.0)]
    with pytest.raises(ValueError):
        genre_activation_profile(acts, meta)
    with pytest.raises(ValueError):
        genre_activation_profile(acts, meta, label="Z")


def test_temporal_profile_buckets_and_missing_years():
    acts = np.array([[5.0], [4.0], [3.0], [2.0], [1.0]])
    meta = meta_of([set()] * 5, [1994, 1999, None, 1971, 2003])
    del meta[4]
    counts, missing = temporal_profile(acts, meta, 0, k=5)
    assert counts == {1970: 1, 1990: 2}
    assert missing == 2


def test_best_neuron_prefers_purity_then_lift():
    acts = np.array([[1.0, 2.0, 0.0], [1.0, 2.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]])
    meta = meta_of([{"A"}, {"A"}, set(), set()])
    # neurons 0 and 1 both have purity 1 at k=2; neuron 1 has larger lift
    assert best_neuron_for_label(acts, meta, "A", k=2) == (1, 1.0)
    assert best_neuron_for_label(np.zeros((4, 2)), meta, "A", k=2) == (-1, 0.0)


def test_planted_concepts_have_pure_neurons():
    planted, ds, model = planted_suite(0)
    bundle = planted_sae(0)
    acts = neuron_activations(bundle.item, model, "item")
    for c in range(len(planted.concept_labels)):
        _, p = best_neuron_for_label(acts, ds.item_metadata, concept_label(c), k=10)
        assert p >= 0.9


def test_neuron_activations_side_and_shape():
    _, _, model = planted_suite(0)
    bundle = planted_sae(0)
    assert neuron_activations(bundle.user, model, "user").shape == (model.n_users, bundle.user.m)
    with pytest.raises(ValueError):
        neuron_activations(bundle.user, model, "both")


def test_reports_and_export(tmp_path):
    _, ds, model = planted_suite(0)
    bundle = planted_sae(0)
    acts = neuron_activations(bundle.item, model)
    labels = {0: concept_label(0)}
    reps = neuron_reports(acts, ds, model.item_embeddings, labels, ks=(10, 20))
    assert len(reps) == bundle.item.m
    r0 = reps[0]
    assert len(r0.top_items) == 20 and set(r0.purity_at) == {10, 20}
    assert r0.purity_at[10] == semantic_purity(r0.top_items[:10], concept_label(0), ds.item_metadata)
    assert reps[1].assigned_label is None and not reps[1].purity_at
    doc = export_neurons(reps, ds)
    assert doc["neurons"][0]["label"] == concept_label(0)
    first = doc["neurons"][0]["top_items"][0]
    assert first["item_id"] == ds.item_ids[r0.top_items[0][0]]
    assert "purity" not in doc["neurons"][1]


def test_read_label_file(tmp_path):
    p = tmp_path / "labels.tsv"
    p.write_text("# comment\n0\tHorror\n\n3\tSci-Fi extra\tignored\n")
    assert read_label_file(p) == {0: "Horror", 3: "Sci-Fi extra"}
    p.write_text("x\tHorror\n")
    with pytest.raises(ValueError, match=":1:"):
        read_label_file(p)


def test_rows_to_csv_roundtrip_floats():
    text = rows_to_csv([{"a": 0.1, "b": "x"}, {"a": 1 / 3, "b": "y"}])
    lines = text.splitlines()
    assert lines[0] == "a,b"
    assert float(lines[2].split(",")[0]) == 1 / 3
    assert rows_to_csv([]) == ""
