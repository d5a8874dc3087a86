import numpy as np
import pytest

from wildlabel.evaluation import evaluate
from wildlabel.noisemodel import NoiseMatrix, estimate_from_pairs
from wildlabel.seeds import derive_seed
from wildlabel.simulate import BenchmarkConfig, build_benchmark_data
from wildlabel.taxonomy import ExpressionLabel
from wildlabel.trainer import (
    AffineSoftmax,
    ReluNet,
    Sample,
    SampleSource,
    ScenarioKind,
    TrainConfig,
    TrainingDivergedError,
    corrected_loss_and_gradient,
    load_checkpoint,
    lr_at,
    one_hot,
    preset,
    save_checkpoint,
    stratified_split,
    train,
    upsample_clean,
)

E = ExpressionLabel


def make_samples(per_class, dims=4, seed=0, source=SampleSource.CLEAN):
    rng = np.random.default_rng(seed)
    samples = []
    for label in E:
        n = per_class[label.value] if isinstance(per_class, list) else per_class
        for _ in range(n):
            samples.append(Sample(rng.standard_normal(dims), label, source))
    return samples


# -- learning-rate schedule ---------------------------------------------------

def test_lr_schedule_published_constants():
    config = preset("paper")
    assert lr_at(0, config) == pytest.approx(0.001)
    assert lr_at(9_999, config) == pytest.approx(0.001)
    assert lr_at(10_000, config) == pytest.approx(0.0001)
    assert lr_at(25_000, config) == pytest.approx(0.00001)


def test_lr_rejects_negative_iteration():
    with pytest.raises(ValueError):
        lr_at(-1, preset("desk"))


# -- split and upsampling -----------------------------------------------------

def test_stratified_split_counts():
    samples = make_samples(100)
    train_set, test_set = stratified_split(samples, 0.2, seed=1)
    assert len(test_set) == 140 and len(train_set) == 560
    for label in E:
        assert sum(1 for s in test_set if s.label == label) == 20


def test_stratified_split_deterministic_and_disjoint():
    samples = make_samples(23)
    a = stratified_split(samples, 0.2, seed=9)
    b = stratified_split(samples, 0.2, seed=9)
    assert [id(s) for s in a[0]] == [id(s) for s in b[0]]
    assert [id(s) for s in a[1]] == [id(s) for s in b[1]]
    assert len(a[0]) + len(a[1]) == len(samples)
    assert set(map(id, a[0])).isdisjoint(set(map(id, a[1])))


def test_stratified_split_floor_rule_uneven_counts():
    counts = [35, 71, 31, 14, 13, 7, 23]  # deliberately ragged
    samples = make_samples(counts)
    _, test_set = stratified_split(samples, 0.2, seed=3)
    for label in E:
        expected = int(np.floor(0.2 * counts[label.value]))
        assert sum(1 for s in test_set if s.label == label) == expected


def test_stratified_split_rejects_bad_fraction():
    with pytest.raises(ValueError):
        stratified_split(make_samples(5), 0.0, seed=0)
    with pytest.raises(ValueError):
        stratified_split(make_samples(5), 1.0, seed=0)


def test_upsample_to_half_noisy():
    clean = make_samples([1000, 0, 0, 0, 0, 0, 0])
    result = upsample_clean(clean, 60_000, seed=0)
    assert len(result) == 30_000
    assert set(map(id, clean)) <= set(map(id, result))  # originals retained


def test_upsample_already_large_enough():
    clean = make_samples(10)  # 70 samples
    assert upsample_clean(clean, 20, seed=0) == clean


def test_upsample_reproducible():
    clean = make_samples(3)
    a = upsample_clean(clean, 100, seed=5)
    b = upsample_clean(clean, 100, seed=5)
    assert [id(s) for s in a] == [id(s) for s in b]
    with pytest.raises(ValueError):
        upsample_clean([], 10, seed=0)


# -- gradients ----------------------------------------------------------------

def _fd_relative_error(model, loss_fn, h=1e-6):
    theta0 = model.params_vector()
    _, grads = loss_fn()
    g_an = np.concatenate([grads[k].ravel() for k in model.params])
    g_fd = np.empty_like(g_an)
    for i in range(len(theta0)):
        t = theta0.copy()
        t[i] += h
        model.set_params_vector(t)
        lp, _ = loss_fn()
        t[i] -= 2 * h
        model.set_params_vector(t)
        lm, _ = loss_fn()
        g_fd[i] = (lp - lm) / (2 * h)
    model.set_params_vector(theta0)
    return np.linalg.norm(g_an - g_fd) / max(
        np.linalg.norm(g_an), np.linalg.norm(g_fd), 1e-12)


def test_gradients_match_finite_differences_spot_check():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((6, 5))
    y = rng.integers(0, 7, 6)
    raw = rng.random((7, 7)) + 0.05
    q = NoiseMatrix(raw / raw.sum(axis=1, keepdims=True))
    for model in (AffineSoftmax(5, seed=1), ReluNet(5, hidden=6, seed=2)):
        err_plain = _fd_relative_error(
            model, lambda: model.loss_and_gradient(X, one_hot(y)))
        err_fwd = _fd_relative_error(
            model, lambda: corrected_loss_and_gradient(model, X, y, q))
        assert err_plain < 1e-5
        assert err_fwd < 1e-5


def test_distribution_targets_gradient():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((5, 3))
    targets = rng.random((5, 7))
    targets /= targets.sum(axis=1, keepdims=True)
    model = ReluNet(3, hidden=4, seed=0)
    err = _fd_relative_error(model, lambda: model.loss_and_gradient(X, targets))
    assert err < 1e-5


# -- training scenarios -------------------------------------------------------

def test_clean_only_fits_separable_toy_data():
    rng = np.random.default_rng(0)
    samples = []
    for label in (E.HAPPY, E.SAD):  # two far-apart clusters
        mean = np.zeros(4)
        mean[0] = 8.0 if label is E.HAPPY else -8.0
        for _ in range(40):
            samples.append(Sample(mean + rng.standard_normal(4), label,
                                  SampleSource.CLEAN))
    model = AffineSoftmax(4, seed=0)
    config = TrainConfig(batch_size=16, initial_lr=0.5, lr_drop_every=500,
                         max_iterations=600, seed=0)
    train(ScenarioKind.CLEAN_ONLY, samples, None, None, model, config)
    report = evaluate(model, samples)
    assert report.accuracy == 100.0


def test_identity_q_reduces_to_naive_mix_bit_identically():
    cfg = BenchmarkConfig(clean_per_class=30, noisy_per_class=100,
                          test_per_class=10)
    data = build_benchmark_data(cfg, 0)
    config = preset("desk", max_iterations=300, seed=11)

    m_noise = ReluNet(cfg.dims, hidden=8, seed=5)
    r_noise = train(ScenarioKind.NOISE_MODELED_MIX, data.clean, data.noisy,
                    NoiseMatrix.identity(), m_noise, config)
    clean_up = upsample_clean(data.clean, len(data.noisy),
                              derive_seed(config.seed, "upsample"))
    m_naive = ReluNet(cfg.dims, hidden=8, seed=5)
    r_naive = train(ScenarioKind.NAIVE_MIX, clean_up, data.noisy, None,
                    m_naive, config)

    assert [h.loss for h in r_noise.history] == [h.loss for h in r_naive.history]
    for key in m_noise.params:
        assert np.array_equal(m_noise.params[key], m_naive.params[key])


def test_training_is_deterministic_under_seed():
    cfg = BenchmarkConfig(clean_per_class=20, noisy_per_class=40,
                          test_per_class=5)
    data = build_benchmark_data(cfg, 1)
    config = preset("desk", max_iterations=200, seed=3)
    histories = []
    for _ in range(2):
        model = ReluNet(cfg.dims, hidden=8, seed=2)
        result = train(ScenarioKind.NAIVE_MIX, data.clean, data.noisy, None,
                       model, config)
        histories.append([h.loss for h in result.history])
    assert histories[0] == histories[1]


def test_loss_decreases_over_training():
    cfg = BenchmarkConfig(clean_per_class=50, noisy_per_class=100,
                          test_per_class=5)
    data = build_benchmark_data(cfg, 2)
    config = preset("desk", max_iterations=800, seed=0)
    model = ReluNet(cfg.dims, hidden=16, seed=0)
    result = train(ScenarioKind.NOISE_MODELED_MIX, data.clean, data.noisy,
                   estimate_from_pairs(data.pairs, smoothing=1.0), model,
                   config)
    for phase in ("pretrain", "train"):
        losses = result.phase_losses(phase)
        assert np.mean(losses[-100:]) < np.mean(losses[:100])


def test_divergence_aborts_with_diagnostics():
    # a non-finite feature poisons the loss on the first batch that hits it
    samples = make_samples(5, dims=3)
    bad = np.array([np.inf, 0.0, 0.0])
    samples.append(Sample(bad, E.HAPPY, SampleSource.CLEAN))
    model = AffineSoftmax(3, seed=0)
    config = TrainConfig(batch_size=36, initial_lr=0.1, lr_drop_every=100,
                         max_iterations=200, seed=0)
    with np.errstate(all="ignore"), pytest.raises(TrainingDivergedError) as excinfo:
        train(ScenarioKind.CLEAN_ONLY, samples, None, None, model, config)
    err = excinfo.value
    assert err.phase == "train"
    assert not np.isfinite(err.loss)
    assert set(err.model_state) == set(model.params)


def test_scenario_preconditions():
    samples = make_samples(3, dims=3)
    model = AffineSoftmax(3, seed=0)
    config = preset("desk", max_iterations=10)
    with pytest.raises(ValueError):
        train(ScenarioKind.NOISE_MODELED_MIX, samples, samples, None, model,
              config)
    with pytest.raises(ValueError):
        train(ScenarioKind.NAIVE_MIX, samples, None, None, model, config)


def test_em_refresh_runs_and_keeps_rows_stochastic():
    cfg = BenchmarkConfig(clean_per_class=30, noisy_per_class=60,
                          test_per_class=5)
    data = build_benchmark_data(cfg, 3)
    config = preset("desk", max_iterations=300, seed=1, em_refresh_epochs=1)
    model = ReluNet(cfg.dims, hidden=8, seed=1)
    result = train(ScenarioKind.NOISE_MODELED_MIX, data.clean, data.noisy,
                   estimate_from_pairs(data.pairs, smoothing=1.0), model,
                   config)
    assert result.em_refreshes >= 1
    assert np.allclose(result.q_final.values.sum(axis=1), 1.0, atol=1e-9)


def test_pretraining_beats_scratch_on_majority_of_seeds():
    cfg = BenchmarkConfig(clean_per_class=100, noisy_per_class=500,
                          test_per_class=100)
    wins = 0
    for seed in range(5):
        data = build_benchmark_data(cfg, seed)
        config = preset("desk", max_iterations=1500,
                        seed=derive_seed(seed, "train"))
        pre = ReluNet(cfg.dims, hidden=16, seed=seed)
        train(ScenarioKind.NAIVE_MIX, data.clean, data.noisy, None, pre, config)
        scratch = ReluNet(cfg.dims, hidden=16, seed=seed)
        train(ScenarioKind.CLEAN_ONLY, list(data.clean) + list(data.noisy),
              None, None, scratch, config)
        if evaluate(pre, data.test).accuracy >= \
                evaluate(scratch, data.test).accuracy:
            wins += 1
    assert wins >= 3


def test_assign_splits_floor_rule_and_idempotence(tmp_path):
    from conftest import add_kept_record, face_with_landmarks
    from wildlabel.annotate import resolve_all, submit_response
    from wildlabel.catalog import Catalog, Split
    from wildlabel.taxonomy import to_category
    from wildlabel.trainer import assign_splits

    counts = {E.HAPPY: 11, E.SAD: 7, E.ANGER: 4}
    with Catalog(tmp_path / "ws", writable=True) as catalog:
        for emotion, n in counts.items():
            for i in range(n):
                rid = add_kept_record(catalog, emotion.value * 100 + i,
                                      emotion, with_blob=False)
                submit_response(catalog, rid, "a1", to_category(emotion),
                                submitted_at="t1")
                submit_response(catalog, rid, "a2", to_category(emotion),
                                submitted_at="t2")
        resolve_all(catalog, base_seed=0)
        n_train, n_test = assign_splits(catalog, 0.2, seed=5)
        per_label_test = {e: 0 for e in counts}
        for record in catalog.records():
            if record.split is Split.TEST:
                per_label_test[record.primary_intended_emotion()] += 1
        for emotion, n in counts.items():
            assert per_label_test[emotion] == int(np.floor(0.2 * n))
        assert n_train + n_test == sum(counts.values())
        appends = catalog.appends
        again = assign_splits(catalog, 0.2, seed=5)
        assert again == (n_train, n_test)
        assert catalog.appends == appends  # same seed: zero rewrites


def test_multi_face_records_yield_one_sample_per_landmarked_face(tmp_path):
    from conftest import add_kept_record, face_with_landmarks, make_png
    from wildlabel.catalog import Catalog
    from wildlabel.facegate import BoundingBox, FaceInstance
    from wildlabel.trainer import load_samples_from_catalog

    with Catalog(tmp_path / "ws", writable=True) as catalog:
        rid = add_kept_record(catalog, 1, E.HAPPY)  # one landmarked face
        record = catalog.get(rid)
        two_faces = [
            face_with_landmarks(BoundingBox(2, 2, 10, 10)),
            face_with_landmarks(BoundingBox(12, 8, 10, 10)),
            FaceInstance(BoundingBox(1, 1, 5, 5), None, "fixture"),
        ]
        catalog.set_gate(rid, two_faces, True)
        datasets = load_samples_from_catalog(catalog, crop_size=8)
        # unannotated with an intended emotion: lands in the noisy pool,
        # one sample per landmarked face (the landmark-less one is skipped)
        assert len(datasets.noisy) == 2
        assert all(s.label is E.HAPPY for s in datasets.noisy)
        assert datasets.clean_train == [] and datasets.clean_test == []


def test_checkpoint_round_trip(tmp_path):
    model = ReluNet(6, hidden=5, seed=3)
    config = preset("desk", max_iterations=10, seed=1)
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path, scenario=ScenarioKind.CLEAN_ONLY,
                    config=config)
    loaded, meta = load_checkpoint(path)
    assert meta["scenario"] == "clean"
    assert meta["config_hash"]
    for key in model.params:
        assert np.array_equal(loaded.params[key], model.params[key])
    X = np.random.default_rng(0).standard_normal((4, 6))
    assert np.array_equal(loaded.forward(X), model.forward(X))
