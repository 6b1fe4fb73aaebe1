import dataclasses

import numpy as np
import pytest
from scipy import ndimage
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import roc_auc_score

from glam.config import smoke_config
from glam.global_net import ConfigError
from glam.synthdata import SynthConfig, generate, generate_example


def small(**kw):
    base = dict(height=192, width=128, n_train=12, n_val=4, n_test=4)
    base.update(kw)
    return SynthConfig(**base)


def probe_features(ex, k=32):
    """Location-free summary: top block contrasts of the 8x8 mean-pooled image."""
    p = ex.pixels.astype(np.float64) / 255.0
    H, W = p.shape
    blocks = p.reshape(H // 8, 8, W // 8, 8).mean(axis=(1, 3))
    contrast = blocks - ndimage.median_filter(blocks, size=5, mode="nearest")
    return -np.sort(-contrast.ravel())[:k]


def probe_auc(splits):
    X = {s: np.array([probe_features(e) for e in splits[s]]) for s in ("train", "val")}
    aucs = []
    for c in range(2):
        y = {s: np.array([e.labels[c] for e in splits[s]]) for s in ("train", "val")}
        clf = LogisticRegression(max_iter=5000).fit(X["train"], y["train"])
        aucs.append(roc_auc_score(y["val"], clf.decision_function(X["val"])))
    return aucs


def check_example(ex, config):
    assert ex.pixels.dtype == np.uint8 and ex.pixels.shape == (config.height, config.width)
    img = ex.image
    assert img.shape == (1, config.height, config.width) and img.min() >= 0 and img.max() <= 1
    area = 0
    for label, mask in zip(ex.labels, ex.masks):
        assert label in (0, 1)
        if label:
            assert mask is not None and mask.any()
            area += int(mask.sum())
        else:
            assert mask is None
    assert area <= config.area_budget * config.height * config.width


class TestGenerate:
    def test_deterministic(self):
        a, b = generate(small()), generate(small())
        for split in a:
            for x, y in zip(a[split], b[split]):
                assert x.id == y.id and x.labels == y.labels
                assert x.pixels.tobytes() == y.pixels.tobytes()
                for mx, my in zip(x.masks, y.masks):
                    assert (mx is None and my is None) or mx.tobytes() == my.tobytes()

    def test_seed_changes_images(self):
        a = generate_example(small(seed=0), 0)
        b = generate_example(small(seed=1), 0)
        assert a.pixels.tobytes() != b.pixels.tobytes()

    def test_order_independent(self):
        cfg = small()
        splits = generate(cfg)
        ex = generate_example(cfg, 13, "val")
        assert splits["val"][1].pixels.tobytes() == ex.pixels.tobytes()

    def test_split_sizes_and_disjoint_ids(self):
        splits = generate(small())
        assert [len(splits[s]) for s in ("train", "val", "test")] == [12, 4, 4]
        ids = [e.id for s in splits.values() for e in s]
        assert len(ids) == len(set(ids))
        assert all(e.split == s for s, exs in splits.items() for e in exs)

    def test_no_positives(self):
        cfg = small(p_malignant=0.0, p_benign=0.0)
        for ex in sum(generate(cfg).values(), []):
            assert ex.labels == (0, 0) and ex.masks == (None, None)
            assert ex.mask_array() is None

    def test_all_positive(self):
        cfg = small(p_malignant=1.0, p_benign=1.0)
        for ex in sum(generate(cfg).values(), []):
            assert ex.labels == (1, 1)
            check_example(ex, cfg)
            assert ex.mask_array().shape == (2, 192, 128)

    def test_default_budget(self):
        assert SynthConfig().area_budget <= 0.01

    def test_default_size_examples(self):
        cfg = SynthConfig(p_malignant=0.5, p_benign=0.5)
        for i in range(20):
            check_example(generate_example(cfg, i), cfg)

    def test_area_budget_monte_carlo(self):
        # default size fractions and budget on a smaller canvas
        cfg = small(p_malignant=0.6, p_benign=0.6)
        areas = []
        i = 0
        while len(areas) < 1000:
            ex = generate_example(cfg, i)
            i += 1
            check_example(ex, cfg)
            if ex.positive:
                areas.append(sum(int(m.sum()) for m in ex.masks if m is not None))
        assert np.mean(areas) / (cfg.height * cfg.width) <= 0.01

    @pytest.mark.parametrize("kw", [
        dict(area_budget=1e-5),
        dict(radius_frac=(0.001, 0.002)),
        dict(lesion_count=(0, 2)),
        dict(p_benign=1.5),
        dict(height=4),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            generate(small(**kw))


class TestSeparability:
    def test_probe_smoke(self):
        cfg = dataclasses.replace(smoke_config().synth, n_train=300, n_val=100, n_test=0)
        aucs = probe_auc(generate(cfg))
        assert min(aucs) > 0.7, aucs

    def test_probe_default(self):
        cfg = SynthConfig(n_train=200, n_val=100, n_test=0)
        aucs = probe_auc(generate(cfg))
        assert min(aucs) > 0.7, aucs
