"""Pooling, AUROC, fold construction, and the fine-tuning loop."""
import numpy as np
import pytest
from hypothesis import given, strategies as st

import coughmae.tensor as T
from coughmae.dsp import DatasetManifest, MelConfig, synth_dataset
from coughmae.errors import ConfigError, DataError, NumericsError, ShapeError
from coughmae.finetune import (ClassifierHead, EvalReport, FinetuneConfig,
                               auroc, classify, cross_validate, finetune,
                               finetune_arrays, kfold_split, pool)
from coughmae.mae import prepare_patches
from coughmae.vit import EncoderParams, FeatureSequence, ModelConfig


def feats(values: np.ndarray, has_cls: bool = True) -> FeatureSequence:
    n = values.shape[1] - (1 if has_cls else 0)
    return FeatureSequence(features=T.Tensor(np.asarray(values, dtype=np.float64)),
                           has_cls=has_cls, n_patches=n)


# - Pooling -


def test_pool_cls_picks_slot_zero():
    x = np.arange(2 * 4 * 3, dtype=np.float64).reshape(2, 4, 3)
    out = pool(feats(x), "cls")
    assert out.shape == (2, 3)
    assert np.array_equal(out.data, x[:, 0, :])


def test_pool_mean_excludes_cls():
    x = np.zeros((1, 4, 2))
    x[0, 0] = 100.0          # CLS must not contribute
    x[0, 1] = [1.0, 2.0]
    x[0, 2] = [3.0, 4.0]
    x[0, 3] = [5.0, 6.0]
    out = pool(feats(x), "mean")
    assert np.allclose(out.data, [[3.0, 4.0]], atol=1e-15)


def test_pool_mean_without_cls():
    x = np.array([[[1.0, 10.0], [3.0, 30.0]]])
    out = pool(feats(x, has_cls=False), "mean")
    assert np.allclose(out.data, [[2.0, 20.0]], atol=1e-15)


def test_pool_mean_permutation_invariant_exactly():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 9, 5))
    base = pool(feats(x, has_cls=False), "mean").data
    for _ in range(5):
        perm = rng.permutation(9)
        out = pool(feats(x[:, perm, :], has_cls=False), "mean").data
        assert np.array_equal(out, base)   # bit-identical, not just close


def test_pool_cls_requires_cls():
    x = np.zeros((1, 3, 2))
    with pytest.raises(ShapeError):
        pool(feats(x, has_cls=False), "cls")
    with pytest.raises(ConfigError):
        pool(feats(x), "max")


def test_pool_gradient_flows():
    x = T.Tensor(np.ones((1, 3, 2)), requires_grad=True)
    fs = FeatureSequence(features=x, has_cls=True, n_patches=2)
    loss = T.reduce_mean(pool(fs, "mean"))
    T.backward(loss)
    # loss = mean over 2 dims of (mean over 2 patches): 1/4 per patch cell
    assert np.allclose(x.grad[0, 1:], 0.25)
    assert np.allclose(x.grad[0, 0], 0.0)   # CLS excluded from mean pooling


# - Classification head -


def test_classify_probabilities():
    head = ClassifierHead(dim=4, seed=0)
    pooled = T.Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    probs = classify(pooled, head).data
    assert probs.shape == (3, 2)
    assert np.all(probs > 0)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)


# - AUROC -


def test_auroc_worked_examples():
    assert auroc([0.1, 0.9], [0, 1]) == 1.0
    assert auroc([0.9, 0.1], [0, 1]) == 0.0
    assert auroc([0.5, 0.5], [0, 1]) == 0.5
    # 3 correct pairs out of 4 -> 0.75
    assert auroc([0.1, 0.6, 0.4, 0.8], [0, 0, 1, 1]) == 0.75


def brute_force_auroc(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    pos = s[y == 1]
    neg = s[y == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def test_auroc_matches_brute_force():
    rng = np.random.default_rng(11)
    for _ in range(300):
        n = int(rng.integers(2, 40))
        y = rng.integers(0, 2, size=n)
        if y.min() == y.max():
            y[0] = 1 - y[0]
        s = np.round(rng.normal(size=n), 1)   # coarse values force ties
        assert abs(auroc(s, y) - brute_force_auroc(s, y)) < 1e-12


def test_auroc_monotone_invariance():
    rng = np.random.default_rng(5)
    s = rng.normal(size=30)
    y = rng.integers(0, 2, size=30)
    y[0], y[1] = 0, 1
    base = auroc(s, y)
    for f in (lambda x: 3 * x + 2, np.tanh, lambda x: x ** 3,
              lambda x: np.exp(x / 4), lambda x: np.arctan(x)):
        assert auroc(f(s), y) == base


def test_auroc_label_flip_symmetry():
    rng = np.random.default_rng(6)
    s = rng.normal(size=25)         # continuous, ties have measure zero
    y = rng.integers(0, 2, size=25)
    y[:2] = [0, 1]
    assert abs(auroc(s, y) + auroc(s, 1 - y) - 1.0) < 1e-12


def test_auroc_errors():
    with pytest.raises(DataError):
        auroc([0.2, 0.4], [1, 1])
    with pytest.raises(ShapeError):
        auroc([0.2, 0.4, 0.6], [0, 1])
    with pytest.raises(NumericsError):
        auroc([0.2, float("nan")], [0, 1])


@given(st.integers(0, 2 ** 32 - 1))
def test_auroc_rank_vs_pairs_property(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 20))
    y = rng.integers(0, 2, size=n)
    if y.min() == y.max():
        y[0] = 1 - y[0]
    s = rng.choice([0.0, 0.25, 0.5, 0.75, 1.0], size=n)
    assert abs(auroc(s, y) - brute_force_auroc(s, y)) < 1e-12


# - K-fold splitting -


def test_kfold_partitions_everything():
    labels = np.array([0, 1] * 20)
    split = kfold_split(labels, 5, seed=3)
    all_idx = sorted(i for fold in split.folds for i in fold)
    assert all_idx == list(range(40))
    assert len(split.folds) == 5


def test_kfold_stratified_balance():
    labels = np.array([0] * 13 + [1] * 17)
    split = kfold_split(labels, 5, seed=0)
    for fold in split.folds:
        counts = np.bincount(labels[list(fold)], minlength=2)
        # 13/5 and 17/5 -> each fold holds floor or ceil of the proportion
        assert counts[0] in (2, 3)
        assert counts[1] in (3, 4)


def test_kfold_deterministic():
    labels = np.array([0, 1] * 15)
    assert kfold_split(labels, 3, seed=7) == kfold_split(labels, 3, seed=7)
    assert kfold_split(labels, 3, seed=7) != kfold_split(labels, 3, seed=8)


def test_kfold_errors():
    labels = np.array([0, 0, 0, 1])
    with pytest.raises(DataError):
        kfold_split(labels, 5, seed=0)       # class 1 has 1 member < k
    with pytest.raises(DataError):
        kfold_split(np.array([0, 1]), 1, seed=0)


def test_kfold_unstratified_sizes():
    split = kfold_split(np.zeros(10, dtype=int), 3, seed=1, stratified=False)
    sizes = sorted(len(f) for f in split.folds)
    assert sizes == [3, 3, 4]


# - Fine-tuning loop -


@pytest.fixture(scope="module")
def small_task(tmp_path_factory):
    """Tiny separable two-class corpus plus its prepared patches."""
    root = tmp_path_factory.mktemp("task")
    manifest = synth_dataset(root, 16, seed=41)
    mel_cfg = MelConfig()
    model_cfg = ModelConfig(dim=32, n_heads=2, n_blocks=1, decoder_dim=16,
                            decoder_heads=2, decoder_blocks=1)
    patches, grid_shape, _ = prepare_patches(manifest, mel_cfg, 98, model_cfg)
    return manifest, mel_cfg, model_cfg, patches, grid_shape


def test_finetune_learns_separable_task(small_task):
    manifest, mel_cfg, model_cfg, patches, grid = small_task
    labels = manifest.labels()
    train_idx = np.arange(0, 12)
    val_idx = np.arange(12, 16)
    cfg = FinetuneConfig(epochs=12, batch_size=2, encoder_lr=3e-3, head_lr=3e-2,
                         pooling="mean", warmup_frac=0.2)
    enc = EncoderParams(model_cfg, seed=0)
    result = finetune_arrays(enc, patches, labels, grid, train_idx, val_idx,
                             cfg, seed=0)
    assert len(result.curve) == 12
    assert result.best_auroc == max(result.curve)
    assert result.curve[result.best_epoch] == result.best_auroc
    assert result.train_loss and np.all(np.isfinite(result.train_loss))
    assert result.best_auroc >= 0.75   # synthetic classes are far apart


def test_finetune_deterministic(small_task):
    manifest, mel_cfg, model_cfg, patches, grid = small_task
    labels = manifest.labels()
    cfg = FinetuneConfig(epochs=2, batch_size=4)
    runs = []
    for _ in range(2):
        enc = EncoderParams(model_cfg, seed=3)
        r = finetune_arrays(enc, patches, labels, grid, np.arange(12),
                            np.arange(12, 16), cfg, seed=3)
        runs.append(r)
    assert runs[0].curve == runs[1].curve
    for a, b in zip(runs[0].encoder.parameters(), runs[1].encoder.parameters()):
        assert np.array_equal(a.data, b.data)


def test_finetune_manifest_split_fallback(small_task, tmp_path):
    manifest, mel_cfg, model_cfg, _, _ = small_task
    cfg = FinetuneConfig(epochs=1, batch_size=4)
    # entries carry no split tags and no explicit indices were given
    with pytest.raises(DataError):
        finetune(None, manifest, mel_cfg, model_cfg, cfg, seed=0)


def test_cross_validate_report(small_task):
    manifest, mel_cfg, model_cfg, _, _ = small_task
    cfg = FinetuneConfig(epochs=1, batch_size=4, k_folds=4)
    report = cross_validate(None, manifest, mel_cfg, model_cfg, cfg, seed=0)
    assert report.init_kind == "scratch"
    assert len(report.fold_auroc) == 4
    assert len(report.curves) == 4
    assert all(len(c) == 1 for c in report.curves)
    assert abs(report.mean_auroc - np.mean(report.fold_auroc)) < 1e-12
    json_text = report.to_json()
    csv_text = report.to_csv()
    assert '"mean_auroc"' in json_text
    assert csv_text.startswith("fold,best_epoch,auroc,pooling,init")
    assert csv_text.count("\n") == 4 + 2   # header + folds + mean row


def test_eval_report_csv_mean_row():
    report = EvalReport(pooling="cls", fold_auroc=[0.5, 1.0], best_epochs=[0, 1],
                        curves=[[0.5], [1.0]], mean_auroc=0.75, init_kind="scratch")
    lines = report.to_csv().strip().split("\n")
    assert lines[-1].startswith("mean,,0.75")
