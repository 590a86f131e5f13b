import math

import numpy as np
import pytest

import asdkit


def test_feature_shapes():
    clip = asdkit.synth_clip(seconds=10.0, seed=1)
    assert clip.shape == (160000,)
    g = asdkit.log_gammatone(clip)
    assert g.shape == (64, 499)
    assert np.all(np.isfinite(g))
    m = asdkit.log_mel(clip)
    assert m.shape[0] == 128


def test_silence_hits_the_log_floor():
    g = asdkit.log_gammatone(np.zeros(16000))
    assert np.allclose(g, math.log(1e-10))


def test_metric_worked_examples():
    assert asdkit.auc([0.3, 0.8], [0.5, 0.9]) == 0.75
    normal = [0.1 * i for i in range(10)]
    assert asdkit.pauc(normal, [0.85, 0.95], p=0.1) == 0.5


def test_metrics_match_pairwise_count():
    rng = np.random.default_rng(0)
    for _ in range(20):
        normal = rng.integers(0, 8, size=int(rng.integers(1, 30))).astype(float)
        anomaly = rng.integers(0, 8, size=int(rng.integers(1, 30))).astype(float)
        expected = np.mean(anomaly[:, None] > normal[None, :])
        assert asdkit.auc(normal.tolist(), anomaly.tolist()) == pytest.approx(expected, abs=1e-12)


def test_errors_map_to_python_exceptions():
    with pytest.raises(asdkit.MetricError):
        asdkit.auc([], [1.0])
    with pytest.raises(asdkit.ClipTooShortError):
        asdkit.log_gammatone(np.zeros(100))
    with pytest.raises(asdkit.ConfigError):
        asdkit.resolve_config(overrides=["model.family=semisupervised", "model.alpha=0.5", "model.beta=0.6"])
    assert issubclass(asdkit.ConfigError, asdkit.AsdError)


def test_config_hash_ignores_paths():
    _, h1 = asdkit.resolve_config(overrides=["run_dir=a"])
    _, h2 = asdkit.resolve_config(overrides=["run_dir=b", "workers=4"])
    _, h3 = asdkit.resolve_config(overrides=["seed=9"])
    assert h1 == h2 != h3


def test_selftest_passes():
    results = asdkit.selftest(seeds=1)
    assert results
    assert all(passed for _, passed, _ in results), results


def test_train_score_and_detector(tmp_path):
    manifest = asdkit.write_synthetic_corpus(
        tmp_path / "corpus", train_normal=8, test_normal=4, test_anomaly=4, seconds=1.0, seed=2
    )
    overrides = [
        f"manifest={manifest}",
        f"cache_dir={tmp_path / 'cache'}",
        f"run_dir={tmp_path / 'run'}",
        "segment.frames=16",
        "segment.hop_frames=8",
        "model.encoder_filters=[2, 2, 2]",
        "model.bottleneck=4",
        "train.max_epochs=2",
        "train.batch_size=4",
    ]
    run_dir, scores = asdkit.run_pipeline(overrides=overrides)
    assert len(scores) == 8
    assert {s["label"] for s in scores} == {"normal", "anomaly"}

    det = asdkit.Detector(run_dir)
    assert det.family == "unsupervised"
    first = scores[0]
    wav = asdkit.read_wav(manifest.parent / first["machine_type"] / "test" / first["clip_id"])
    assert det.score(wav) == first["anomaly_score"]
    errors = det.segment_errors(wav)
    assert errors.ndim == 1 and errors.size >= 1
    assert float(np.mean(errors)) == first["anomaly_score"]
