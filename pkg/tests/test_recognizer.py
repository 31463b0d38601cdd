import math

import numpy as np
import pytest

from protogate import recognizer
from protogate.alignment import Projector, PrototypeBank
from protogate.context import ContextDictionary, FusionHead
from protogate.dataio import UNKNOWN_LABEL, EmbeddingDataset
from protogate.errors import UndefinedSimilarityError, ValidationError


def identity_projector(d):
    eye = np.eye(d)
    return Projector(
        w1=np.concatenate([eye, -eye]),
        b1=np.zeros(2 * d),
        w2=np.concatenate([eye, -eye], axis=1),
        b2=np.zeros(d),
    )


def zero_projector(d):
    return Projector(
        w1=np.zeros((d, d)), b1=np.zeros(d),
        w2=np.zeros((d, d)), b2=np.zeros(d),
    )


def axis_bundle(fallback=None, projector=None):
    """Two known classes along e0/e1; fused features pass through unchanged."""
    d = 2
    dictionary = ContextDictionary(
        prototypes=np.zeros((1, d)),
        priors=np.array([1.0]),
        group_sizes=np.array([1], dtype=np.int64),
    )
    head = FusionHead(
        query_proj=np.eye(d), key_proj=np.eye(d),
        cls_weight=np.eye(d), cls_bias=np.zeros(d),
    )
    bank = PrototypeBank(
        prototypes=np.eye(d), counts=np.array([1, 1], dtype=np.int64)
    )
    return recognizer.ModelBundle(
        dictionary=dictionary,
        head=head,
        projector=identity_projector(d) if projector is None else projector,
        bank=bank,
        fallback=recognizer.NullFallback() if fallback is None else fallback,
    )


def full_fallback():
    # covers both known axes plus the unknown corner as class 2
    return recognizer.PrototypeFallback(
        prototypes=np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]]),
        labels=np.array([0, 1, 2], dtype=np.int64),
        class_names=["a", "b", "c"],
    )


class TestFallbackPredict:
    def test_exact_row_match(self):
        fb = full_fallback()
        assert recognizer.fallback_predict(np.array([0.0, 1.0]), fb) == 1

    def test_duplicate_rows_lowest_index_wins(self):
        fb = recognizer.PrototypeFallback(
            prototypes=np.array([[1.0, 0.0], [1.0, 0.0]]),
            labels=np.array([4, 7], dtype=np.int64),
            class_names=["x", "y"],
        )
        assert recognizer.fallback_predict(np.array([2.0, 0.0]), fb) == 4

    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            rows = rng.normal(size=(5, 4))
            fb = recognizer.PrototypeFallback(
                prototypes=rows,
                labels=np.arange(5, dtype=np.int64),
                class_names=[f"c{i}" for i in range(5)],
            )
            f = rng.normal(size=4)
            sims = [
                float(f @ r) / (np.linalg.norm(f) * np.linalg.norm(r))
                for r in rows
            ]
            assert recognizer.fallback_predict(f, fb) == int(np.argmax(sims))

    def test_zero_norm_input_rejected(self):
        with pytest.raises(UndefinedSimilarityError):
            recognizer.fallback_predict(np.zeros(2), full_fallback())

    def test_empty_fallback_rejected(self):
        with pytest.raises(ValidationError):
            recognizer.PrototypeFallback(
                prototypes=np.zeros((0, 2)),
                labels=np.zeros(0, dtype=np.int64),
                class_names=[],
            ).validate()


class TestDecide:
    def test_projected_equals_prototype_is_known(self):
        bundle = axis_bundle()
        dec = recognizer.decide(np.array([1.0, 0.0]), bundle, threshold=0.99)
        assert dec.csr_label == 0
        assert dec.similarity == pytest.approx(1.0, abs=1e-12)
        assert dec.is_known
        assert dec.final_label == 0
        assert dec.source == recognizer.SOURCE_CLOSED

    def test_threshold_minus_one_admits_everything(self):
        bundle = axis_bundle()
        rng = np.random.default_rng(1)
        for _ in range(10):
            f = rng.normal(size=2)
            if np.allclose(f, 0):
                continue
            dec = recognizer.decide(f, bundle, threshold=-1.0)
            assert dec.is_known
            assert dec.source == recognizer.SOURCE_CLOSED
            assert dec.final_label == dec.csr_label

    def test_far_sample_routed_to_fallback(self):
        bundle = axis_bundle(fallback=full_fallback())
        dec = recognizer.decide(np.array([-1.0, -1.0]), bundle, threshold=0.0)
        assert not dec.is_known
        assert dec.source == recognizer.SOURCE_FALLBACK
        assert dec.final_label == 2

    def test_null_fallback_returns_unknown_tag(self):
        bundle = axis_bundle()
        dec = recognizer.decide(np.array([-1.0, -1.0]), bundle, threshold=0.0)
        assert dec.final_label == UNKNOWN_LABEL

    def test_zero_norm_projection_gets_nan_and_fallback(self):
        bundle = axis_bundle(projector=zero_projector(2))
        dec = recognizer.decide(np.array([1.0, 0.0]), bundle, threshold=-1.0)
        assert math.isnan(dec.similarity)
        assert not dec.is_known
        assert dec.source == recognizer.SOURCE_FALLBACK

    def test_flipped_comparator_inverts_routing(self):
        bundle = axis_bundle()
        f = np.array([1.0, 0.0])
        default = recognizer.decide(f, bundle, 0.5, "sim-above-known")
        flipped = recognizer.decide(f, bundle, 0.5, "sim-above-unknown")
        assert default.is_known
        assert not flipped.is_known

    def test_closed_decision_ignores_fallback_contents(self):
        a = recognizer.decide(
            np.array([-1.0, -1.0]), axis_bundle(), 0.0
        )
        b = recognizer.decide(
            np.array([-1.0, -1.0]), axis_bundle(fallback=full_fallback()), 0.0
        )
        assert a.csr_label == b.csr_label
        assert a.is_known == b.is_known
        assert a.similarity == b.similarity

    def test_unknown_comparator_rejected(self):
        with pytest.raises(ValidationError):
            recognizer.decide(
                np.array([1.0, 0.0]), axis_bundle(), 0.0, "maybe"
            )


def routing_test_set():
    """4 clean knowns, 2 far unknowns labeled as class 2."""
    vecs = np.array(
        [
            [1.0, 0.0],
            [0.9, 0.1],
            [0.0, 1.0],
            [0.1, 0.9],
            [-1.0, -1.0],
            [-0.9, -1.1],
        ]
    )
    labels = np.array([0, 0, 1, 1, 2, 2], dtype=np.int64)
    return EmbeddingDataset(vecs, labels, ["a", "b", "c"])


class TestEvaluate:
    def test_all_known_reduces_to_closed_accuracy(self):
        vecs = np.array([[1.0, 0.0], [0.0, 1.0], [0.8, 0.2]])
        ds = EmbeddingDataset(
            vecs, np.array([0, 1, 0], dtype=np.int64), ["a", "b"]
        )
        rep = recognizer.evaluate(ds, axis_bundle(), threshold=-1.0)
        assert rep.n_unknown_truth == 0
        assert rep.overall_acc == rep.closed_acc == 1.0
        assert rep.open_acc == 1.0  # vacuous
        assert rep.n_known_routed == 3

    def test_all_unknown_with_oracle_fallback(self):
        # sim-above-unknown with T=-1 routes everything to the fallback
        ds = routing_test_set()
        bundle = axis_bundle(fallback=full_fallback())
        rep = recognizer.evaluate(
            ds, bundle, threshold=-1.0, comparator="sim-above-unknown",
            open_metric="label",
        )
        assert rep.n_known_routed == 0
        fb = full_fallback()
        expected = np.mean(
            [
                recognizer.fallback_predict(v, fb) == t
                for v, t in zip(ds.vectors, ds.labels)
            ]
        )
        assert rep.overall_acc == pytest.approx(expected)

    def test_detection_and_label_metrics(self):
        ds = routing_test_set()
        bundle = axis_bundle(fallback=full_fallback())
        det = recognizer.evaluate(ds, bundle, 0.5, open_metric="detection")
        lab = recognizer.evaluate(ds, bundle, 0.5, open_metric="label")
        assert det.open_acc == 1.0
        assert lab.open_acc == 1.0
        assert det.closed_acc == 1.0
        assert det.overall_acc == 1.0

    def test_counts_partition_samples(self):
        ds = routing_test_set()
        rep = recognizer.evaluate(ds, axis_bundle(), 0.5)
        assert rep.n_known_routed + rep.n_unknown_routed == rep.n_samples
        assert rep.n_known_truth + rep.n_unknown_truth == rep.n_samples
        total = (
            rep.known_as_known + rep.known_as_unknown
            + rep.unknown_as_known + rep.unknown_as_unknown
        )
        assert total == rep.n_samples

    def test_unknown_sentinel_truth_with_null_fallback(self):
        vecs = np.array([[1.0, 0.0], [-1.0, -1.0]])
        labels = np.array([0, UNKNOWN_LABEL], dtype=np.int64)
        ds = EmbeddingDataset(vecs, labels, ["a", "b"])
        rep = recognizer.evaluate(ds, axis_bundle(), 0.5, open_metric="label")
        assert rep.open_acc == 1.0  # null fallback answers -1, matching truth
        assert rep.overall_acc == 1.0

    def test_decision_invariants_hold(self):
        ds = routing_test_set()
        rep = recognizer.evaluate(ds, axis_bundle(fallback=full_fallback()), 0.5)
        for dec in rep.decisions:
            assert dec.is_known == (dec.source == recognizer.SOURCE_CLOSED)
            if dec.is_known:
                assert dec.final_label == dec.csr_label


class TestSweep:
    def test_single_threshold_equals_evaluate(self):
        ds = routing_test_set()
        bundle = axis_bundle(fallback=full_fallback())
        rows = recognizer.sweep_threshold(ds, bundle, [0.3])
        single = recognizer.evaluate(ds, bundle, 0.3)
        assert len(rows) == 1
        assert rows[0][0] == 0.3
        assert rows[0][1].to_dict() == single.to_dict()

    def test_known_sets_nest_as_threshold_rises(self):
        rng = np.random.default_rng(2)
        vecs = rng.normal(size=(30, 2))
        vecs = vecs[np.linalg.norm(vecs, axis=1) > 1e-6]
        labels = rng.integers(0, 2, size=len(vecs)).astype(np.int64)
        ds = EmbeddingDataset(vecs, labels, ["a", "b"])
        bundle = axis_bundle()
        results = recognizer.sweep_threshold(
            ds, bundle, [-1.0, 0.0, 0.5, 0.9]
        )
        known_sets = [
            {d.index for d in rep.decisions if d.is_known}
            for _, rep in results
        ]
        for wider, narrower in zip(known_sets, known_sets[1:]):
            assert narrower <= wider

    def test_empty_threshold_list_rejected(self):
        with pytest.raises(ValidationError):
            recognizer.sweep_threshold(routing_test_set(), axis_bundle(), [])

    def test_csv_format(self, tmp_path):
        ds = routing_test_set()
        bundle = axis_bundle(fallback=full_fallback())
        results = recognizer.sweep_threshold(ds, bundle, [0.2, 0.5])
        path = tmp_path / "sweep.csv"
        recognizer.write_sweep_csv(results, path, comment="seed=0")
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "# seed=0"
        assert lines[1] == (
            "T,closed_acc,open_acc,overall_acc,n_known_routed,n_unknown_routed"
        )
        assert len(lines) == 4
        first = lines[2].split(",")
        assert float(first[0]) == 0.2
        assert 0.0 <= float(first[1]) <= 1.0
        assert int(first[4]) + int(first[5]) == ds.n
