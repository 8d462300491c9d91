import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import brute_krum, brute_two_partition
from vnsemcom.codec import CodecConfig, init_codec, make_dataset, per_class_ssim
from vnsemcom.errors import ConfigurationError, DimensionError
from vnsemcom.fedtrain import (GradientUpdate, LocalConfig, ScoreVector, cluster_filter, fedavg, kept_csv_text,
                               krum, krum_scores, krum_select, local_update, poison_targeted, poison_untargeted,
                               robust_aggregate, robust_aggregate_detail, run_federation, score_updates,
                               score_weights)
from vnsemcom.numkit import RngStream
from vnsemcom.scenario import AttackSpec

LOCAL = LocalConfig(epochs=8, lr=4.0, batch_size=40)


def upd(cid, delta, count=1):
    return GradientUpdate(cid, 0, np.asarray(delta, dtype=float), count)


def sv(cid, vec):
    return ScoreVector(cid, np.asarray(vec, dtype=float))


@pytest.fixture(scope="module")
def fed_setup():
    codec = init_codec(16, CodecConfig(), RngStream(0, "init/federation"))
    shard = make_dataset("shapes4", 40, RngStream(0, "shard"))
    eval_set = make_dataset("shapes4", 80, RngStream(0, "dataset/eval"))
    return codec, shard, eval_set


# ---------------------------------------------------------------------------
# local updates and attacks


def test_zero_epochs_zero_delta(fed_setup):
    codec, shard, _ = fed_setup
    u = local_update(codec, shard, LocalConfig(epochs=0), RngStream(0, "c"))
    assert not u.delta.any()


def test_delta_round_trip(fed_setup):
    from vnsemcom.codec import fit_codec
    codec, shard, _ = fed_setup
    u = local_update(codec, shard, LOCAL, RngStream(0, "c"))
    local, _ = fit_codec(codec, shard.images, shard.images, LOCAL.epochs, LOCAL.lr, LOCAL.batch_size,
                         RngStream(0, "c"))
    base, after = codec.params(), local.params()
    # exact up to the one rounding of base + delta
    ulp = np.spacing(np.maximum(np.abs(base), np.abs(after)))
    assert np.all(np.abs(base + u.delta - after) <= ulp)


def test_honest_delta_lowers_mse(fed_setup):
    codec, shard, _ = fed_setup
    u = local_update(codec, shard, LOCAL, RngStream(0, "c"))
    after = codec.with_params(codec.params() + u.delta)
    err = lambda c: np.mean((c.reconstruct(shard.images) - shard.images) ** 2)
    assert err(after) < err(codec)


def test_untargeted_rejects_zero_strength():
    with pytest.raises(ConfigurationError):
        poison_untargeted(upd("c", np.ones(10)), 0.0, RngStream(0, "a"))


def test_untargeted_statistics():
    honest = upd("c", RngStream(0, "h").normal(10 ** 4) * 0.3)
    bad = poison_untargeted(honest, 5.0, RngStream(0, "a"))
    assert abs(np.std(bad.delta) / (5.0 * np.std(honest.delta)) - 1) < 0.1
    cos = bad.delta @ honest.delta / (np.linalg.norm(bad.delta) * np.linalg.norm(honest.delta))
    assert -0.1 <= cos <= 0.1


def test_targeted_shard_contract():
    shard = make_dataset("shapes4", 12, RngStream(0, "s"))
    out = poison_targeted(shard, 0, 3)
    assert len(out) == len(shard)
    assert np.array_equal(out.images, shard.images)
    no_target = shard.subset(np.flatnonzero(shard.labels != 0))
    assert poison_targeted(no_target, 0, 2) is no_target
    with pytest.raises(ConfigurationError):
        poison_targeted(shard, 0, 9)


def test_targeted_attack_works(fed_setup):
    from vnsemcom.experiments import base_codec, codec_data
    from vnsemcom.scenario import Scenario
    scn = Scenario()
    train, _ = codec_data(scn)
    codec = base_codec(scn, train)
    _, shard, eval_set = fed_setup
    honest = local_update(codec, shard, LOCAL, RngStream(0, "c"))
    bad = local_update(codec, poison_targeted(shard, 0, 3), LOCAL, RngStream(0, "c"))
    s_h = per_class_ssim(codec.with_params(codec.params() + honest.delta).reconstruct(eval_set.images), eval_set)
    s_b = per_class_ssim(codec.with_params(codec.params() + bad.delta).reconstruct(eval_set.images), eval_set)
    assert s_h[0] - s_b[0] >= 0.2
    assert np.max(np.abs(s_h[1:] - s_b[1:])) <= 0.05


# ---------------------------------------------------------------------------
# aggregators


def test_fedavg_examples():
    assert np.array_equal(fedavg([upd("a", [1.0, 2.0])]), [1.0, 2.0])
    assert fedavg([upd("a", [1.0], 1), upd("b", [3.0], 3)])[0] == 2.5
    with pytest.raises(DimensionError):
        fedavg([upd("a", [1.0]), upd("b", [1.0, 2.0])])
    with pytest.raises(ConfigurationError):
        fedavg([])


def test_fedavg_matches_naive_mean():
    rng = RngStream(0, "avg")
    for i in range(20):
        n = 2 + rng.integers(6)
        deltas = rng.normal((n, 7))
        ups = [upd(f"c{j}", deltas[j]) for j in range(n)]
        naive = [sum(deltas[j][k] for j in range(n)) / n for k in range(7)]
        assert np.max(np.abs(fedavg(ups) - naive)) < 1e-12


@given(st.floats(-100, 100, allow_nan=False), st.integers(0, 1000))
def test_fedavg_linear(c, seed):
    rng = RngStream(seed, "lin")
    deltas = rng.normal((4, 5))
    counts = 1 + rng.integers(5, size=4)
    a = fedavg([upd(i, d * c, int(k)) for i, (d, k) in enumerate(zip(deltas, counts))])
    b = c * fedavg([upd(i, d, int(k)) for i, (d, k) in enumerate(zip(deltas, counts))])
    assert np.allclose(a, b, rtol=1e-12, atol=1e-12)


def test_krum_worked_example():
    ups = [upd(i, [v]) for i, v in enumerate([0.0, 0.1, 0.2, 10.0])]
    scores = krum_scores(np.array([[0.0], [0.1], [0.2], [10.0]]), 1)
    assert np.allclose(scores, [0.01, 0.01, 0.01, 96.04])
    assert krum_select(ups, 1) == 0


def test_krum_identical_picks_first():
    ups = [upd(i, [1.0, 1.0]) for i in range(5)]
    assert krum_select(ups, 1) == 0


def test_krum_needs_enough_clients():
    with pytest.raises(ConfigurationError):
        krum([upd(i, [0.0]) for i in range(3)], 1)


def test_krum_brute_force_50_instances():
    rng = RngStream(0, "krum")
    for i in range(50):
        f = int(rng.integers(3))
        n = int(f + 3 + rng.integers(8 - f - 2))
        dim = 1 + int(rng.integers(5))
        # coarse grid values force frequent exact ties
        deltas = rng.integers(-2, 3, size=(n, dim)).astype(float)
        ups = [upd(j, deltas[j]) for j in range(n)]
        assert krum_select(ups, f) == brute_krum(deltas, f)


# ---------------------------------------------------------------------------
# scoring and filtering


def test_zero_deltas_identical_scores(fed_setup):
    codec, _, eval_set = fed_setup
    zero = np.zeros(codec.param_count)
    scores = score_updates(codec, [upd("a", zero), upd("b", zero)], eval_set)
    assert np.array_equal(scores[0].per_class_ssim, scores[1].per_class_ssim)


def test_score_requires_all_classes(fed_setup):
    codec, _, eval_set = fed_setup
    with pytest.raises(ConfigurationError):
        score_updates(codec, [upd("a", np.zeros(codec.param_count))], eval_set.of_class(0))


def test_poisoned_scores_separate(fed_setup):
    codec, shard, eval_set = fed_setup
    honest = [local_update(codec, shard, LOCAL, RngStream(i, "c"), f"c{i}") for i in range(3)]
    noisy = poison_untargeted(honest[0], 1.0, RngStream(0, "atk"))
    targeted = local_update(codec, poison_targeted(shard, 0, 3), LOCAL, RngStream(9, "c"), "t")
    scores = score_updates(codec, honest + [noisy, targeted], eval_set)
    assert scores[3].mean_score < min(s.mean_score for s in scores[:3])
    assert int(np.argmin(scores[4].per_class_ssim)) == 0


def test_cluster_filter_examples():
    vecs = [[0.80] * 4, [0.81] * 4, [0.79] * 4, [0.10] * 4]
    assert cluster_filter([sv(i, v) for i, v in enumerate(vecs)]) == [0, 1, 2]
    assert cluster_filter([sv(i, [0.5, 0.5]) for i in range(4)]) == [0, 1, 2, 3]
    assert cluster_filter([sv("a", [0.8]), sv("b", [0.1])]) == ["a"]


def test_cluster_filter_matches_partition_oracle():
    rng = RngStream(0, "part")
    for _ in range(40):
        n_good, n_bad = 2 + int(rng.integers(5)), 1 + int(rng.integers(3))
        good = 0.8 + 0.02 * rng.normal((n_good, 4))
        bad = 0.2 + 0.1 * rng.normal((n_bad, 4))
        order = rng.permutation(n_good + n_bad)
        vecs = np.vstack([good, bad])[order]
        kept = cluster_filter([sv(i, v) for i, v in enumerate(vecs)])
        assert set(kept) == brute_two_partition(vecs)


def test_score_weights():
    w = score_weights([sv("a", [0.6]), sv("b", [0.2])])
    assert np.allclose(w, [0.75, 0.25])
    assert np.allclose(score_weights([sv("a", [-0.5]), sv("b", [0.0])]), [0.5, 0.5])


def test_robust_single_client(fed_setup):
    codec, shard, eval_set = fed_setup
    u = local_update(codec, shard, LOCAL, RngStream(0, "c"))
    assert np.array_equal(robust_aggregate(codec, [u], eval_set), u.delta)


def test_robust_near_fedavg_without_attack(fed_setup):
    codec, shard, eval_set = fed_setup
    pool = make_dataset("shapes4", 400, RngStream(0, "dataset/federation"))
    ups = [local_update(codec, pool.subset(np.arange(40 * i, 40 * (i + 1))), LOCAL, RngStream(i, "c"), f"c{i}")
           for i in range(10)]
    res = robust_aggregate_detail(codec, ups, eval_set)
    a, b = res.delta, fedavg(ups)
    assert len(res.kept) == 10
    assert a @ b / (np.linalg.norm(a) * np.linalg.norm(b)) >= 0.99


# ---------------------------------------------------------------------------
# full runs


@pytest.fixture(scope="module")
def short_scenario(default_scenario):
    return default_scenario.replace(federation=default_scenario.federation.__class__(rounds=8))


def test_no_attack_fedavg_vs_robust(short_scenario):
    a = run_federation(short_scenario, "fedavg")
    r = run_federation(short_scenario, "robust")
    assert abs(a.final_ssim - r.final_ssim) < 0.02
    kept_rounds = [m.value for m in r.rows if m.metric == "kept_count"]
    assert np.mean(np.array(kept_rounds) == 10) >= 0.9


def test_fedavg_degrades_with_fraction(short_scenario):
    finals = [run_federation(short_scenario, "fedavg", AttackSpec("untargeted", f)).final_ssim
              for f in (0.1, 0.3, 0.5)]
    assert finals[0] > finals[1] > finals[2]


def test_targeted_robust_holds(short_scenario):
    r = run_federation(short_scenario, "robust", AttackSpec("targeted", 0.5))
    assert r.final_class_ssim[0] >= r.final_ssim - 0.05


def test_run_rejects_label_flip(short_scenario):
    with pytest.raises(ConfigurationError):
        run_federation(short_scenario, "fedavg", AttackSpec("label_flip", 0.3))


def test_kept_csv(short_scenario):
    r = run_federation(short_scenario.replace(federation=short_scenario.federation.__class__(rounds=2)), "robust")
    text = kept_csv_text(r.kept_log)
    lines = text.splitlines()
    assert lines[0] == "round,client_id,kept,mean_score" and len(lines) == 1 + 2 * 10
