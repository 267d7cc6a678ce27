import numpy as np
import pytest

from dcq.baseline import FcHead
from dcq.errors import ConfigError
from dcq.evalbench import (
    evaluate_protocol,
    head_cost_report,
    identification_hits,
    identification_rank1,
    run_experiment_grid,
    tail_alignment_diagnostic,
    verification_accuracy,
)
from dcq.model import init_extractor
from dcq.synthdata import build_universe
from dcq.trainer import TrainConfig, run_training


def _unit(rows):
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


class TestVerificationAccuracy:
    def test_perfectly_separated(self):
        rng = np.random.default_rng(0)
        base = _unit(rng.standard_normal((10, 8)))
        # genuine pairs identical, impostor pairs orthogonalized
        emb_a = np.vstack([base, base])
        ortho = _unit(rng.standard_normal((10, 8)) - (base * 0))
        ortho = _unit(ortho - (ortho * base).sum(1, keepdims=True) * base)
        emb_b = np.vstack([base, ortho])
        genuine = np.array([True] * 10 + [False] * 10)
        acc, thr = verification_accuracy(emb_a, emb_b, genuine)
        assert acc == 1.0
        assert 0.0 < thr < 1.0

    def test_single_pair_each_kind(self):
        a = np.array([[1.0, 0.0], [1.0, 0.0]])
        b = np.array([[1.0, 0.0], [0.0, 1.0]])  # distances 0 and 1
        acc, thr = verification_accuracy(a, b, np.array([True, False]))
        assert acc == 1.0
        assert thr == pytest.approx(0.5)

    def test_random_labels_near_chance(self):
        rng = np.random.default_rng(1)
        emb_a = rng.standard_normal((1000, 16))
        emb_b = rng.standard_normal((1000, 16))
        genuine = rng.integers(0, 2, 1000).astype(bool)
        acc, _ = verification_accuracy(emb_a, emb_b, genuine)
        assert abs(acc - 0.5) < 0.05

    def test_empty_protocol_rejected(self):
        with pytest.raises(ConfigError):
            verification_accuracy(np.zeros((0, 4)), np.zeros((0, 4)), np.zeros(0, bool))

    def test_invariant_under_monotone_distance_transform(self):
        # the threshold sweep only sees the ordering of distances, so any
        # order-preserving warp of the embeddings' distances keeps accuracy
        rng = np.random.default_rng(2)
        emb_a = rng.standard_normal((60, 8))
        emb_b = rng.standard_normal((60, 8))
        genuine = rng.integers(0, 2, 60).astype(bool)
        acc, _ = verification_accuracy(emb_a, emb_b, genuine)
        # warp: shrink all embeddings toward each other, cosine order intact
        from dcq.evalbench import cosine_distances

        dists = cosine_distances(emb_a, emb_b)
        warped = np.sqrt(dists + 1.0)  # strictly increasing transform
        order = np.argsort(warped)
        thresholds = (np.sort(warped)[:-1] + np.sort(warped)[1:]) / 2
        best = max(float(((warped < t) == genuine).mean()) for t in thresholds)
        assert best == pytest.approx(acc)

    def test_tie_breaks_toward_smaller_threshold(self):
        a = np.array([[1.0, 0.0]] * 4)
        b = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
        genuine = np.array([True, False, False, False])
        acc, thr = verification_accuracy(a, b, genuine)
        assert acc == 1.0
        assert thr == pytest.approx(0.5)  # first midpoint achieving the max


class TestIdentificationRank1:
    def test_exact_mate_hits(self):
        gal = _unit(np.random.default_rng(3).standard_normal((5, 8)))
        hits = identification_hits(gal.copy(), gal, np.arange(5), np.arange(5))
        assert hits.all()

    def test_removed_mate_cannot_hit(self):
        rng = np.random.default_rng(4)
        gal = _unit(rng.standard_normal((5, 8)))
        probe = gal[:1]
        hits = identification_hits(probe, gal[1:], np.array([0]), np.arange(1, 5))
        assert not hits.any()

    def test_chance_level(self):
        rng = np.random.default_rng(5)
        g = 10
        gallery = rng.standard_normal((g, 64))
        probes = rng.standard_normal((2000, 64))
        rank1 = identification_rank1(
            probes, gallery, rng.integers(0, g, 2000), np.arange(g)
        )
        assert abs(rank1 - 1.0 / g) < 0.03

    def test_ties_break_to_lowest_gallery_index(self):
        gal = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])  # duplicate entries
        probe = np.array([[1.0, 0.0]])
        hits = identification_hits(probe, gal, np.array([7]), np.array([7, 8, 9]))
        assert hits[0]
        hits2 = identification_hits(probe, gal, np.array([8]), np.array([7, 8, 9]))
        assert not hits2[0]

    def test_permutation_invariant_without_ties(self):
        rng = np.random.default_rng(6)
        gal = rng.standard_normal((12, 16))
        probes = rng.standard_normal((30, 16))
        labels = np.arange(12)
        probe_labels = rng.integers(0, 12, 30)
        r1 = identification_rank1(probes, gal, probe_labels, labels)
        perm = rng.permutation(12)
        r2 = identification_rank1(probes, gal[perm], probe_labels, labels[perm])
        assert r1 == r2

    def test_distractors_never_increase_rank1(self):
        rng = np.random.default_rng(7)
        gal = rng.standard_normal((8, 16))
        probes = rng.standard_normal((40, 16))
        probe_labels = rng.integers(0, 8, 40)
        r_plain = identification_rank1(probes, gal, probe_labels, np.arange(8))
        for n_extra in (1, 5, 20):
            extra = rng.standard_normal((n_extra, 16))
            r_more = identification_rank1(
                probes,
                np.vstack([gal, extra]),
                probe_labels,
                np.concatenate([np.arange(8), 100 + np.arange(n_extra)]),
            )
            assert r_more <= r_plain
            r_plain = r_more

    def test_empty_gallery_rejected(self):
        with pytest.raises(ConfigError):
            identification_hits(np.ones((1, 4)), np.zeros((0, 4)), np.array([0]), np.zeros(0))


class TestHeadCostReport:
    def test_reference_class_count_arithmetic(self):
        full = head_cost_report("full", C=642_962, K=65_536, D=512, B=512)
        assert full.head_param_bytes == 1_316_786_176
        assert full.optimizer_state_bytes == 1_316_786_176
        assert full.head_macs_per_batch == 512 * 512 * 642_962

        dcq = head_cost_report("dcq", C=642_962, K=65_536, D=512, B=512)
        assert dcq.head_param_bytes == 134_217_728
        assert dcq.optimizer_state_bytes == 0
        ratio = dcq.head_param_bytes / full.head_param_bytes
        assert ratio == pytest.approx(0.10193, abs=5e-6)
        assert dcq.param_bytes_ratio == ratio

    def test_ratio_exactly_k_over_c(self):
        for c, k, d in ((1000, 100, 64), (642_962, 65_536, 512), (7, 7, 3)):
            dcq = head_cost_report("dcq", C=c, K=k, D=d, B=8)
            full = head_cost_report("full", C=c, K=k, D=d, B=8)
            assert dcq.param_bytes_ratio == k / c
            assert dcq.head_param_bytes / full.head_param_bytes == k / c

    def test_queue_equal_to_classes_gives_ratio_one(self):
        rep = head_cost_report("dcq", C=500, K=500, D=32, B=16)
        assert rep.param_bytes_ratio == 1.0

    def test_generator_forward_macs(self):
        rep = head_cost_report("dcq", C=100, K=10, D=4, B=2,
                               generator_layer_dims=[8, 16, 4])
        assert rep.head_macs_per_batch == 2 * 4 * 11 + 2 * (8 * 16 + 16 * 4)

    def test_bad_inputs(self):
        with pytest.raises(ConfigError):
            head_cost_report("full", C=0, K=1, D=1, B=1)
        with pytest.raises(ConfigError):
            head_cost_report("partial", C=1, K=1, D=1, B=1)


class TestTailAlignment:
    def test_converged_training_aligns(self):
        # soft scale keeps pull gradients alive until the columns align
        cfg = TrainConfig(
            method="cosface-full", n_classes=6, n_reserved=2, epochs=60, B=16,
            sigma=0.01, d_in=8, embed_dim=8, hidden_dims=(16,),
            min_count=30, max_count=30, zipf_exponent=0.0, s=4.0, m=0.1, lr0=0.05,
            eval_pairs=20, eval_probes=4, eval_distractors=1, decay_epochs=(50,),
        )
        result = run_training(cfg)
        report = tail_alignment_diagnostic(
            result.head.W.data, result.universe, result.counts, result.extractor
        )
        (bucket,) = report.mean_cosine
        assert report.mean_cosine[bucket] > 0.95

    def test_tail_buckets_align_worse_than_head_buckets(self):
        # few-instance classes collect mostly push-away updates, so their
        # learned columns sit further from their instances' mean embedding
        cfg = TrainConfig(
            method="cosface-full", n_classes=120, n_reserved=30, epochs=40, B=16,
            sigma=0.05, d_in=16, embed_dim=16, hidden_dims=(32,),
            min_count=2, max_count=60, zipf_exponent=1.2, s=8.0, m=0.2, lr0=0.05,
            eval_pairs=100, eval_probes=40, eval_distractors=20, decay_epochs=(30, 36),
        )
        result = run_training(cfg)
        report = tail_alignment_diagnostic(
            result.head.W.data, result.universe, result.counts, result.extractor
        )
        ordered = [report.mean_cosine[b] for b in (">=50", "10-49", "5-9", "<5")]
        assert all(a >= b for a, b in zip(ordered, ordered[1:]))

    def test_untrained_head_near_zero(self):
        universe = build_universe(120, 16, 0.1, seed=50)
        counts = np.full(100, 3)
        extractor = init_extractor([16, 32, 32], seed=51)
        head = FcHead(32, 100, seed=52)
        report = tail_alignment_diagnostic(head.W.data, universe, counts, extractor)
        for value in report.mean_cosine.values():
            assert abs(value) < 0.1

    def test_cosines_bounded_and_buckets_partition(self):
        universe = build_universe(30, 8, 0.2, seed=53)
        counts = np.array([2] * 10 + [7] * 10 + [20] * 10)
        extractor = init_extractor([8, 16, 8], seed=54)
        head = FcHead(8, 30, seed=55)
        report = tail_alignment_diagnostic(head.W.data, universe, counts, extractor)
        assert set(report.mean_cosine) == {"<5", "5-9", "10-49"}
        assert report.class_counts == {"<5": 10, "5-9": 10, "10-49": 10}
        assert all(-1.0 <= v <= 1.0 for v in report.mean_cosine.values())

    def test_empty_bucket_absent(self):
        universe = build_universe(5, 8, 0.2, seed=56)
        counts = np.full(5, 3)
        extractor = init_extractor([8, 16, 8], seed=57)
        head = FcHead(8, 5, seed=58)
        report = tail_alignment_diagnostic(head.W.data, universe, counts, extractor)
        assert set(report.mean_cosine) == {"<5"}


class TestExperimentGrid:
    def test_single_value_reproduces_single_run(self):
        cfg = TrainConfig(
            method="dcq", n_classes=12, n_reserved=8, epochs=2, B=8, K=8,
            sigma=0.05, d_in=8, embed_dim=8, hidden_dims=(16,),
            min_count=2, max_count=10, zipf_exponent=1.0,
            eval_pairs=40, eval_probes=10, eval_distractors=5, decay_epochs=(1,),
        )
        rows = run_experiment_grid(cfg, "alpha", [0.999])
        direct = run_training(cfg.replace(alpha=0.999))
        assert rows[0]["ver_acc"] == direct.final_eval["ver_acc"]
        assert rows[0]["id_rank1"] == direct.final_eval["id_rank1"]
        assert len(rows[0]["epochs"]) == 2

    def test_invalid_axis(self):
        with pytest.raises(ConfigError):
            run_experiment_grid(TrainConfig(), "epochs", [1, 2])

    GRID_CFG = dict(
        method="dcq", n_classes=300, n_reserved=60, epochs=12, B=8,
        sigma=0.1, d_in=16, embed_dim=16, hidden_dims=(32,),
        min_count=2, max_count=60, zipf_exponent=1.0,
        eval_pairs=600, eval_probes=150, eval_distractors=50,
        decay_epochs=(8, 10, 11),
    )

    def test_queue_size_trend(self):
        # accuracy should trend upward from 0.05C to a full-coverage queue;
        # desk scale tolerates small wiggles between interior points
        cfg = TrainConfig(**self.GRID_CFG)
        ks = [15, 30, 150, 300]
        rows = run_experiment_grid(cfg, "K", ks)
        assert [r["value"] for r in rows] == ks
        assert rows[-1]["ver_acc"] >= rows[0]["ver_acc"] - 0.02
        assert rows[-1]["id_rank1"] >= rows[0]["id_rank1"] - 0.02

    def test_momentum_trend(self):
        cfg = TrainConfig(**self.GRID_CFG)
        rows = run_experiment_grid(cfg, "alpha", [0.0, 0.9, 0.99, 0.999])
        by_alpha = {r["value"]: r["ver_acc"] for r in rows}
        assert by_alpha[0.999] >= by_alpha[0.0]

    def test_method_axis(self):
        cfg = TrainConfig(**{**self.GRID_CFG, "epochs": 3})
        methods = ["dcq", "cosface-full", "cosface-head-only"]
        rows = run_experiment_grid(cfg, "method", methods)
        assert [r["value"] for r in rows] == methods
        assert all(0.0 <= r["ver_acc"] <= 1.0 for r in rows)
        assert all(len(r["epochs"]) == 3 for r in rows)


class TestEvaluateProtocol:
    def test_reports_tail_and_head_split(self):
        cfg = TrainConfig(
            method="dcq", n_classes=12, n_reserved=8, epochs=1, B=8, K=8,
            sigma=0.05, d_in=8, embed_dim=8, hidden_dims=(16,),
            min_count=2, max_count=30, zipf_exponent=1.2,
            eval_pairs=40, eval_probes=12, eval_distractors=5, decay_epochs=(1,),
        )
        result = run_training(cfg)
        scores = evaluate_protocol(result.extractor, result.protocol, result.counts)
        assert set(scores) >= {"ver_acc", "id_rank1", "tail_rank1", "head_rank1"}
        assert scores["tail_probes"] == int(
            (result.counts[result.protocol.probe_labels] < 10).sum()
        )
