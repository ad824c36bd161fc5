import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_retrieval
from sgps.datagen import gen_mixture, inject_symmetric
from sgps.numkit import EmbeddingNet, Rng, l2_normalize
from sgps.pcs import partition_batch
from sgps.trainer import (
    SGPSTrainer,
    TrainConfig,
    evaluate,
    pair_f_measure,
    selection_accuracy,
    train,
)


def small_noisy(seed=0):
    return inject_symmetric(gen_mixture(4, 3, 10, 8, 0.1, seed), 0.4, seed)


class TestConfig:
    @pytest.mark.parametrize("kw", [
        dict(batch_size=1), dict(learning_rate=0.0), dict(ppm_mode="median"), dict(sgm_sources="X"),
        dict(sgm_worker="gpu"), dict(alpha=2.0), dict(tau=0.0), dict(K=0), dict(epochs=-1),
    ])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_replace_revalidates(self):
        with pytest.raises(ValueError):
            TrainConfig().replace(batch_size=0)
        assert TrainConfig().replace(tau=1.0).tau == 1.0


class TestTrain:
    def test_zero_epochs(self):
        ds = small_noisy()
        reports, net = train(ds, TrainConfig(epochs=0, seed=3))
        fresh = EmbeddingNet.init(ds.D, 64, 16, Rng(3))
        assert reports == []
        for k in net.param_names:
            assert np.array_equal(getattr(net, k), getattr(fresh, k))

    def test_deterministic(self):
        ds = small_noisy(1)
        cfg = TrainConfig(epochs=3, batch_size=16, seed=5)
        a, na = train(ds, cfg)
        b, nb = train(ds, cfg)
        assert [r.to_dict() for r in a] == [r.to_dict() for r in b]
        assert all(np.array_equal(getattr(na, k), getattr(nb, k)) for k in na.param_names)

    def test_background_worker_matches_sync(self):
        ds = small_noisy(2)
        cfg = TrainConfig(epochs=3, batch_size=16, seed=1)
        a, _ = train(ds, cfg)
        b, _ = train(ds, cfg.replace(sgm_worker="background"))
        assert [r.to_dict() for r in a] == [r.to_dict() for r in b]

    def test_report_fields(self):
        ds = small_noisy(3)
        reports, _ = train(ds, TrainConfig(epochs=3, batch_size=16))
        assert [r.epoch for r in reports] == [1, 2, 3]
        assert reports[0].sgm_version == 0 and reports[1].sgm_version == 1 and reports[2].sgm_version == 2
        assert reports[0].loss_noise == 0.0
        for r in reports:
            for v in (r.p_at_1, r.r_precision, r.map_at_r, r.selection_acc):
                assert 0.0 <= v <= 1.0
            assert np.isfinite(r.loss_clean) and np.isfinite(r.loss_noise)

    def test_no_train_split(self):
        ds = gen_mixture(1, 1, 4, 3, 0.1, 0)
        ds.is_train[:] = False
        with pytest.raises(ValueError):
            SGPSTrainer(ds, TrainConfig(epochs=1))

    def test_bank_and_memory_bounds(self):
        ds = small_noisy(4)
        tr = SGPSTrainer(ds, TrainConfig(epochs=2, batch_size=8, memory_capacity=20))
        tr.run()
        assert len(tr.memory) == 20
        assert len(tr.bank) == ds.N
        assert tr.bank.initialized.sum() == ds.is_train.sum()
        feats = tr.bank.features[tr.bank.initialized]
        np.testing.assert_allclose(np.linalg.norm(feats, axis=1), 1.0, atol=1e-9)

    def test_sgm_dump(self, tmp_path):
        ds = small_noisy(5)
        tr = SGPSTrainer(ds, TrainConfig(epochs=2, batch_size=16), sgm_dump=tmp_path / "sgm.csv")
        tr.run()
        lines = (tmp_path / "sgm.csv").read_text().splitlines()
        assert lines[0] == "sample_id,cB,cT,version"
        assert {ln.rsplit(",", 1)[1] for ln in lines[1:]} == {"1", "2"}

    def test_sgd_step(self):
        ds = small_noisy(6)
        cfg = TrainConfig(epochs=1, batch_size=16, momentum=0.9, weight_decay=0.01, learning_rate=0.1)
        tr = SGPSTrainer(ds, cfg)
        p0 = {k: v.copy() for k, v in tr.net.params().items()}
        g = {k: np.ones_like(v) for k, v in p0.items()}
        tr._sgd(g)
        tr._sgd(g)
        for k, w in p0.items():
            v1 = 1 + 0.01 * w
            w1 = w - 0.1 * v1
            v2 = 0.9 * v1 + 1 + 0.01 * w1
            np.testing.assert_allclose(tr.net.params()[k], w1 - 0.1 * v2, rtol=1e-12)

    def test_loss_trend_noise_free(self):
        ds = gen_mixture(20, 20, 30, 32, 0.08, 1)
        reports, _ = train(ds, TrainConfig(epochs=20, seed=1))
        assert reports[-1].loss_clean < reports[0].loss_clean


class TestEvaluate:
    def test_separated_identical(self):
        E = np.array([[1.0, 0.0]] * 3 + [[0.0, 1.0]] * 3)
        assert tuple(evaluate(E, [0, 0, 0, 1, 1, 1])) == (1.0, 1.0, 1.0)

    def test_singletons(self):
        m = evaluate(l2_normalize(np.random.default_rng(0).normal(size=(5, 3))), [0, 1, 2, 3, 4])
        assert m.p_at_1 == 0.0 and m.r_precision == 0.0 and m.map_at_r == 0.0 and not m.r_valid

    def test_too_small(self):
        with pytest.raises(ValueError):
            evaluate(np.ones((1, 2)), [0])

    def test_thirty_three_classes(self):
        rng = np.random.default_rng(30)
        E = l2_normalize(rng.normal(size=(30, 4)))
        y = rng.integers(0, 3, size=30)
        assert tuple(evaluate(E, y)) == pytest.approx(brute_retrieval(E.tolist(), y.tolist()), abs=1e-12)

    def test_ties_by_index(self):
        E = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
        # query 0: neighbours 1 (class 1) and 2 (class 0) tie, lower index first
        m = evaluate(E, [0, 1, 0])
        assert m.p_at_1 == pytest.approx(1 / 3)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**9), st.integers(2, 50), st.integers(1, 6))
    def test_oracle(self, seed, n, k):
        rng = np.random.default_rng(seed)
        E = l2_normalize(rng.normal(size=(n, 3)))
        y = rng.integers(0, k, size=n)
        m = evaluate(E, y)
        p1, rp, mapr = brute_retrieval(E.tolist(), y.tolist())
        assert m.p_at_1 == pytest.approx(p1, abs=1e-12)
        assert m.r_precision == pytest.approx(rp, abs=1e-12)
        assert m.map_at_r == pytest.approx(mapr, abs=1e-12)


class TestSelectionAccuracy:
    def test_all_correct(self):
        part = partition_batch([0.9, 0.1, 0.7], 0.5)
        assert selection_accuracy(part, [True, False, True]) == 1.0

    def test_all_inverted(self):
        part = partition_batch([0.9, 0.1, 0.7], 0.5)
        assert selection_accuracy(part, [False, True, False]) == 0.0

    def test_random(self):
        rng = np.random.default_rng(0)
        part = partition_batch(rng.random(1000), 0.5)
        assert abs(selection_accuracy(part, rng.random(1000) < 0.5) - 0.5) <= 0.1


class TestPairF:
    def test_identical_up_to_renaming(self):
        assert pair_f_measure([0, 0, 1, 1, 2], [5, 5, 3, 3, 9]) == 1.0

    def test_all_split_vs_all_merged(self):
        assert pair_f_measure([0, 1, 2, 3], [0, 0, 0, 0]) == 0.0

    def test_hand_count(self):
        # pred pairs {01, 23}, truth pairs {01, 02, 12}: tp 1, precision 1/2, recall 1/3
        assert pair_f_measure([0, 0, 1, 1], [0, 0, 0, 1]) == pytest.approx(0.4)
