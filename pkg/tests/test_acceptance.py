"""Acceptance gate.

Each criterion prints exactly one ``criterion N: PASS|FAIL`` line (visible
with ``pytest -s`` or on failure) and is enforced with hard asserts at the
stated tolerances.
"""

import functools
import time

import numpy as np
import pytest
from scipy.stats import multivariate_normal, norm

from fedfusion.bayes import (
    gda_fit,
    gda_predict,
    global_posterior,
    personalized_posterior,
    posterior_update,
    uninformative_prior,
)
from fedfusion.embeddings import EmbeddingDataset, PromptBank
from fedfusion.fusion import calibrate, confidence, mixing_weight
from fedfusion.orchestrator import MessageBus, RunConfig, run_round
from fedfusion.partition import PartitionSpec, partition, synth_generate
from fedfusion.suffstats import ClassStats, ClientStatsMessage, compute_stats
from fedfusion.textalign import align_scores, client_confidences

TINY = 1e-12
# the worked example is checked to 12 decimal digits, so its uninformative
# prior has to sit well below that floor
TINIER = 1e-15


def criterion(num, desc):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"criterion {num}: FAIL - {desc}")
                raise
            print(f"criterion {num}: PASS - {desc}")
        return wrapper
    return deco


def empty_test(ds):
    return ds.subset(np.array([], dtype=np.int64))


def random_bank(rng, c, d, slots=2):
    emb = rng.standard_normal((c, slots, d))
    emb /= np.linalg.norm(emb, axis=2, keepdims=True)
    return PromptBank(emb, normalized=True)


def assert_posterior_close(a, b, rtol=1e-9):
    np.testing.assert_allclose(a.means, b.means, rtol=rtol, atol=1e-12)
    np.testing.assert_allclose(a.kappas, b.kappas, rtol=rtol)
    np.testing.assert_allclose(a.S, b.S, rtol=rtol, atol=1e-12)
    assert a.nu == pytest.approx(b.nu, rel=rtol)


@criterion(1, "federated aggregation matches pooled-data posterior "
              "(50 random triples, 1e-9 relative)")
def test_criterion_1_federated_equals_centralized():
    from fedfusion.bayes import unpack_posterior
    from fedfusion.suffstats import unpack_stats
    from fedfusion.partition import ClientSplit

    start = time.monotonic()
    rng = np.random.default_rng(2024)
    for trial in range(50):
        d = int(rng.integers(1, 17))
        c = int(rng.integers(2, 11))
        k = int(rng.integers(1, 21))
        n = int(rng.integers(max(4 * c, 6 * k), max(12 * c, 12 * k)))
        ds = EmbeddingDataset(rng.standard_normal((n, d)),
                              rng.integers(0, c, n), c)
        scheme = ["iid", "dirichlet", "class-split"][trial % 3]
        if scheme == "class-split":
            k = min(k, c)
        spec = PartitionSpec(scheme, k, beta=0.5, seed=trial)
        splits = [ClientSplit(train=s.train, test=empty_test(s.train))
                  for s in partition(ds, spec)]
        bus = MessageBus()
        run_round(splits, random_bank(rng, c, d),
                  RunConfig(alpha=1.0, calibration=False), transport=bus)
        g_fed = unpack_posterior(bus.broadcasts[0]["posterior.tfn"])
        pooled_vectors = np.vstack([s.train.vectors for s in splits])
        pooled_labels = np.concatenate([s.train.labels for s in splits])
        pooled = compute_stats(EmbeddingDataset(pooled_vectors, pooled_labels, c))
        g_central = global_posterior(pooled)
        assert_posterior_close(g_fed, g_central)
        # uploads were wire-encoded: confirm the merged stats round-tripped
        merged = unpack_stats(bus.broadcasts[0]["stats.tfs"])
        assert sum(s.count for s in merged.stats) == n
    elapsed = time.monotonic() - start
    assert elapsed < 30.0, f"criterion 1 took {elapsed:.1f}s"


@criterion(2, "sequential single-point updates equal batch updates "
              "(100 instances, 1e-9)")
def test_criterion_2_conjugacy():
    rng = np.random.default_rng(7)
    for _ in range(100):
        d = int(rng.integers(1, 5))
        n = int(rng.integers(1, 33))
        x = rng.standard_normal((n, d))
        prior = uninformative_prior(d, 1)
        batch_stats = compute_stats(
            EmbeddingDataset(x, np.zeros(n, dtype=np.int64), 1))
        batch = posterior_update(prior, batch_stats, alpha=1.0)
        seq = prior
        for row in x:
            one = ClientStatsMessage(
                client_id=-1, dim=d, num_classes=1,
                stats=(ClassStats(0, 1.0, row.copy(), np.outer(row, row)),))
            seq = posterior_update(seq, one, alpha=1.0)
        assert_posterior_close(seq, batch)


@criterion(3, "power-prior pooling identity at alpha=1; 1-D example "
              "m=5/3 kappa=3 nu=3 S=14/3 to 12 digits")
def test_criterion_3_pooling_identity():
    rng = np.random.default_rng(11)
    for _ in range(25):
        d = int(rng.integers(1, 5))
        c = int(rng.integers(1, 4))
        n_g = int(rng.integers(c, 8 * c))
        n_l = int(rng.integers(c, 8 * c))
        g_ds = EmbeddingDataset(rng.standard_normal((n_g, d)),
                                rng.integers(0, c, n_g), c)
        l_ds = EmbeddingDataset(rng.standard_normal((n_l, d)),
                                rng.integers(0, c, n_l), c)
        g_stats = compute_stats(g_ds)
        l_stats = compute_stats(l_ds)
        pers = personalized_posterior(global_posterior(g_stats, TINY, TINY),
                                      g_stats, l_stats, alpha=1.0,
                                      s0=TINY, kappa0=TINY)
        union = compute_stats(EmbeddingDataset(
            np.vstack([g_ds.vectors, l_ds.vectors]),
            np.concatenate([g_ds.labels, l_ds.labels]), c))
        batch = global_posterior(union, TINY, TINY)
        assert_posterior_close(pers, batch)

    def stats_1d(values):
        v = np.asarray(values, dtype=np.float64)[:, None]
        return compute_stats(
            EmbeddingDataset(v, np.zeros(len(values), dtype=np.int64), 1))

    g_stats = stats_1d([0.0, 2.0])
    l_stats = stats_1d([3.0])
    pers = personalized_posterior(global_posterior(g_stats, TINIER, TINIER),
                                  g_stats, l_stats, alpha=1.0,
                                  s0=TINIER, kappa0=TINIER)
    assert pers.means[0, 0] == pytest.approx(5.0 / 3.0, abs=1e-12)
    assert pers.kappas[0] == pytest.approx(3.0, abs=1e-12)
    assert pers.nu == pytest.approx(3.0, abs=1e-12)
    assert pers.S[0, 0] == pytest.approx(14.0 / 3.0, abs=1e-12)


@criterion(4, "GDA matches the Gaussian density-ratio oracle (1e-9); "
              "z=0.5 example gives 0.7311 +/- 1e-4")
def test_criterion_4_gda_oracle():
    rng = np.random.default_rng(13)
    for _ in range(100):
        d = int(rng.integers(1, 4))
        c = int(rng.integers(2, 5))
        means = rng.standard_normal((c, d))
        a = rng.standard_normal((d, d))
        cov = a @ a.T + 0.5 * np.eye(d)
        clf = gda_fit(means, cov, ridge=0.0)
        z = rng.standard_normal((16, d))
        probs = gda_predict(clf, z)
        dens = np.stack([multivariate_normal(mean=means[j], cov=cov).pdf(z)
                         for j in range(c)], axis=1)
        if dens.ndim == 1:
            dens = dens[:, None]
        oracle = dens / dens.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(probs, oracle, rtol=1e-9, atol=1e-12)

    clf = gda_fit(np.array([[1.0], [-1.0]]), np.array([[1.0]]), ridge=0.0)
    probs = gda_predict(clf, np.array([[0.5]]))
    oracle = norm.pdf(0.5, 1, 1) / (norm.pdf(0.5, 1, 1) + norm.pdf(0.5, -1, 1))
    assert probs[0, 0] == pytest.approx(0.7311, abs=1e-4)
    assert probs[0, 0] == pytest.approx(oracle, rel=1e-9)


@criterion(5, "visual head recovers the Bayes accuracy 0.9772 +/- 0.02 "
              "on the synthetic two-class instance in < 10 s")
def test_criterion_5_bayes_recovery():
    start = time.monotonic()
    means = np.array([[1.0, 0.0], [-1.0, 0.0]])
    cov = 0.25 * np.eye(2)
    splits, truth = synth_generate(2, 2, 10, means, cov, 500, seed=0,
                                   n_test_per_class=2000)
    unit = truth.means / np.linalg.norm(truth.means, axis=1, keepdims=True)
    bank = PromptBank(unit[:, None, :], normalized=True)
    _, report = run_round(splits, bank, RunConfig(alpha=1.0, seed=0))
    bayes = norm.cdf(2.0 / (2.0 * 0.5))  # half-distance over sigma
    assert bayes == pytest.approx(0.9772, abs=5e-5)
    for entry in report.clients:
        acc = entry["accuracy"]["visual"]["all"]
        assert abs(acc - bayes) <= 0.02, f"client {entry['client']}: {acc}"
    elapsed = time.monotonic() - start
    assert elapsed < 10.0, f"criterion 5 took {elapsed:.1f}s"


@criterion(6, "planted random prompt gets weight < 0.5 * b(handcrafted); "
              "r(handcrafted) is exactly zero")
def test_criterion_6_text_alignment():
    rng = np.random.default_rng(17)
    c, d, k = 3, 32, 4
    class_dirs = rng.standard_normal((c, d))
    class_dirs /= np.linalg.norm(class_dirs, axis=1, keepdims=True)

    emb = np.zeros((c, 4, d))
    emb[:, 0] = class_dirs
    for m in (1, 2):
        noisy = class_dirs + 0.2 * rng.standard_normal((c, d))
        emb[:, m] = noisy / np.linalg.norm(noisy, axis=1, keepdims=True)
    planted = rng.standard_normal((c, d))
    emb[:, 3] = planted / np.linalg.norm(planted, axis=1, keepdims=True)
    bank = PromptBank(emb, normalized=True)

    reports = []
    for client in range(k):
        labels = rng.integers(0, c, 120)
        vectors = class_dirs[labels] + 0.15 * rng.standard_normal((120, d))
        vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
        ds = EmbeddingDataset(vectors, labels, c, normalized=True)
        reports.append(client_confidences(bank, ds, client_id=client))

    aligned = align_scores(reports)
    assert (aligned.scores[:, 0] == 0.0).all()
    for cls in range(c):
        assert aligned.weights[cls, 3] < 0.5 * aligned.weights[cls, 0], (
            f"class {cls}: planted weight {aligned.weights[cls, 3]:.4f} vs "
            f"handcrafted {aligned.weights[cls, 0]:.4f}")


@criterion(7, "calibration hits attainable targets within 1e-3; "
              "analytic tau = 2/ln3 +/- 1e-3; confidence monotone in tau")
def test_criterion_7_calibration():
    rng = np.random.default_rng(19)
    for _ in range(20):
        logits = rng.standard_normal((64, 4)) * rng.uniform(0.5, 3.0)
        lo = confidence(logits, 100.0)
        hi = confidence(logits, 0.01)
        target = float(rng.uniform(lo + 1e-3, hi - 1e-3))
        result = calibrate(logits, target, tol=1e-3)
        assert not result.clamped
        assert abs(confidence(logits, result.tau) - target) <= 1e-3

    # single two-class logit gap of 2 at target 0.75: 1/(1 + e^(-2/tau)) = 3/4
    logits = np.array([[2.0, 0.0]])
    result = calibrate(logits, 0.75, tol=1e-5)
    assert result.tau == pytest.approx(2.0 / np.log(3.0), abs=1e-3)

    taus = np.geomspace(0.01, 100.0, 25)
    for _ in range(100):
        logits = rng.standard_normal((32, 3)) * rng.uniform(0.2, 5.0)
        conf = np.array([confidence(logits, t) for t in taus])
        assert (np.diff(conf) <= 1e-12).all()


@criterion(8, "fused head dominates both single-modality heads on the "
              "region-specialized instance; eta = 0.5 under equal confidence")
def test_criterion_8_fusion_dominance():
    rng = np.random.default_rng(23)
    n = 2000
    labels = rng.integers(0, 2, n)
    region = rng.integers(0, 2, n)  # 0 = A (visual expert), 1 = B (text)

    def head_probs(expert_region):
        probs = np.empty((n, 2))
        sure = region == expert_region
        conf = rng.uniform(0.9, 0.99, n)
        guess = rng.integers(0, 2, n)
        cls = np.where(sure, labels, guess)
        probs[np.arange(n), cls] = conf
        probs[np.arange(n), 1 - cls] = 1.0 - conf
        # off-region the head is uninformative: flatten toward chance
        probs[~sure] = 0.5 + (probs[~sure] - 0.5) * 0.1
        return probs

    p_v = head_probs(0)
    p_t = head_probs(1)
    eta = np.array([mixing_weight(a, b) for a, b in zip(p_v, p_t)])
    fused = eta[:, None] * p_v + (1.0 - eta[:, None]) * p_t

    acc = lambda p: float((p.argmax(axis=1) == labels).mean())
    assert acc(fused) >= max(acc(p_v), acc(p_t)) - 0.02

    for pv in ([0.7, 0.3], [0.4, 0.6], [0.2, 0.5, 0.3]):
        assert mixing_weight(np.array(pv), np.array(pv)) == 0.5


@criterion(9, "one upload per client per pipeline, one broadcast; "
              "identical seeds give byte-identical reports")
def test_criterion_9_one_shot_protocol():
    rng = np.random.default_rng(29)
    means = np.array([[1.0, 0.0], [-1.0, 0.0]])
    cov = 0.25 * np.eye(2)
    for k, alpha, calib in ((3, 1.0, True), (5, 0.5, False), (1, 0.0, True)):
        splits, truth = synth_generate(2, 2, k, means, cov, 60, seed=k,
                                       n_test_per_class=40)
        bank = random_bank(rng, 2, 2, slots=3)
        cfg = RunConfig(alpha=alpha, calibration=calib, seed=k)
        bus_a, bus_b = MessageBus(), MessageBus()
        _, rep_a = run_round(splits, bank, cfg, transport=bus_a)
        _, rep_b = run_round(splits, bank, cfg, transport=bus_b)
        assert bus_a.upload_counts() == {"stats": k, "text": k}
        assert len(bus_a.broadcasts) == 1
        assert rep_a.canonical_bytes() == rep_b.canonical_bytes()


@pytest.mark.skip(reason="requires a real CLIP encoder and the OxfordPets "
                         "dataset; covered by the extractor package's "
                         "opt-in smoke test")
def test_criterion_10_real_data_smoke():
    raise NotImplementedError
