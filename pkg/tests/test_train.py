import json
import math
from pathlib import Path

import numpy as np
import pytest

from s5 import tensor as T
from s5.errors import ConfigError
from s5.io import RunConfig, SynthSection, load_config
from s5.model import SegMoEModel
from s5.synth import gen_corpus
from s5.train import (
    AdamW,
    EpochSampler,
    PatchStore,
    cosine_lr,
    pretrain,
    pseudo_label,
    supervised_loss,
    unsupervised_loss,
)


def small_cfg(**train_kw):
    cfg = load_config(None)
    cfg.model.image_size = 16
    cfg.model.patch_size = 4
    cfg.model.embed_dim = 16
    cfg.model.ffn_hidden = 32
    cfg.model.ffn_out = 16
    cfg.model.depth = 1
    cfg.model.heads = 2
    cfg.synth = SynthSection(image_size=16, labeled=6, val=3, unlabeled_clean=8,
                             unlabeled_ood=0, styles=1)
    cfg.train.steps = 4
    cfg.train.batch_labeled = 2
    cfg.train.batch_unlabeled = 2
    cfg.train.eval_every = 4
    for k, v in train_kw.items():
        setattr(cfg.train, k, v)
    return cfg


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    cfg = small_cfg()
    gen_corpus(cfg.synth, seed=11, outdir=root)
    return root


class TestPseudoLabel:
    def test_basic(self):
        probs = np.array([[[0.7, 0.2, 0.1]]])
        labels, conf = pseudo_label(probs)
        assert labels[0, 0] == 0
        assert conf[0, 0] == 0.7

    def test_tie_takes_lowest_class(self):
        probs = np.full((2, 2, 4), 0.25)
        labels, conf = pseudo_label(probs)
        assert np.all(labels == 0)
        assert np.all(conf == 0.25)

    def test_matches_per_pixel_scan(self):
        rng = np.random.default_rng(0)
        raw = rng.random((6, 5, 4))
        probs = raw / raw.sum(axis=2, keepdims=True)
        labels, conf = pseudo_label(probs)
        for i in range(6):
            for j in range(5):
                best = max(range(4), key=lambda c: (probs[i, j, c], -c))
                assert labels[i, j] == best
                assert conf[i, j] == probs[i, j, best]


class TestSupervisedLoss:
    def test_uniform_logits(self):
        logits = [T.Tensor(np.zeros((4, 4, 4)))]
        labels = [np.zeros((4, 4), dtype=np.int64)]
        assert abs(supervised_loss(logits, labels).item() - math.log(4)) < 1e-12

    def test_saturated_correct_logits(self):
        logits_data = np.zeros((2, 2, 3))
        logits_data[:, :, 1] = 20.0
        loss = supervised_loss([T.Tensor(logits_data)], [np.ones((2, 2), dtype=np.int64)])
        assert loss.item() < 1e-8

    def test_ignore_label_pixels_dropped(self):
        rng = np.random.default_rng(1)
        logits_data = rng.standard_normal((2, 3, 4))
        labels = np.array([[0, 255, 2], [255, 1, 3]])
        loss = supervised_loss([T.Tensor(logits_data)], [labels], ignore_label=255).item()

        flat = logits_data.reshape(6, 4)
        total = 0.0
        for i, lab in enumerate(labels.reshape(-1)):
            if lab == 255:
                continue
            row = flat[i] - flat[i].max()
            total += -(row[lab] - math.log(np.exp(row).sum()))
        assert abs(loss - total / 4) < 1e-12

    def test_per_image_then_batch_mean(self):
        rng = np.random.default_rng(2)
        li = [T.Tensor(rng.standard_normal((2, 2, 3))) for _ in range(3)]
        labels = [rng.integers(0, 3, (2, 2)) for _ in range(3)]
        whole = supervised_loss(li, labels).item()
        singles = [supervised_loss([l], [y]).item() for l, y in zip(li, labels)]
        assert abs(whole - np.mean(singles)) < 1e-12


class TestUnsupervisedLoss:
    def test_unreachable_tau_gives_exact_zero(self):
        rng = np.random.default_rng(3)
        logits = [T.Tensor(rng.standard_normal((3, 3, 4)), requires_grad=False)]
        pseudo = [np.zeros((3, 3), dtype=np.int64)]
        conf = [np.full((3, 3), 0.9)]
        loss, frac = unsupervised_loss(logits, pseudo, conf, tau=0.95)
        assert loss.item() == 0.0
        assert loss._parents == ()
        assert frac == 0.0

    def test_tau_zero_is_unmasked_mean(self):
        rng = np.random.default_rng(4)
        logits_data = rng.standard_normal((2, 2, 3))
        pseudo = rng.integers(0, 3, (2, 2))
        conf = rng.random((2, 2))
        loss, frac = unsupervised_loss([T.Tensor(logits_data)], [pseudo], [conf], tau=0.0)
        flat = T.Tensor(logits_data.reshape(4, 3))
        want = T.cross_entropy_masked(flat, pseudo.reshape(-1), np.ones(4)).item()
        assert abs(loss.item() - want) < 1e-12
        assert frac == 1.0

    def test_half_masked_uniform_logits(self):
        logits = [T.Tensor(np.zeros((2, 2, 4)))]
        pseudo = [np.zeros((2, 2), dtype=np.int64)]
        conf = [np.array([[1.0, 1.0], [0.0, 0.0]])]
        loss, frac = unsupervised_loss(logits, pseudo, conf, tau=0.5)
        assert abs(loss.item() - 0.5 * math.log(4)) < 1e-12
        assert frac == 0.5

    def test_monotone_in_tau(self):
        rng = np.random.default_rng(5)
        logits = [T.Tensor(rng.standard_normal((4, 4, 3)))]
        pseudo = [rng.integers(0, 3, (4, 4))]
        conf = [rng.random((4, 4))]
        losses = [unsupervised_loss(logits, pseudo, conf, tau)[0].item()
                  for tau in (0.0, 0.3, 0.6, 0.9, 1.0)]
        assert all(a >= b - 1e-12 for a, b in zip(losses, losses[1:]))


class TestOptimizer:
    def test_only_touched_params_change(self):
        a = T.Tensor(np.ones(3), requires_grad=True)
        b = T.Tensor(np.ones(3), requires_grad=True)
        opt = AdamW({"a.w": a, "b.w": b})
        a.grad = np.full(3, 0.5)
        before = b.data.tobytes()
        opt.step(lr=0.1)
        assert b.data.tobytes() == before
        assert a.grad is None
        assert not np.array_equal(a.data, np.ones(3))

    def test_decay_applies_to_weights_not_biases(self):
        w = T.Tensor(np.ones(3), requires_grad=True)
        b = T.Tensor(np.ones(3), requires_grad=True)
        opt = AdamW({"x.w": w, "x.b": b}, weight_decay=0.5)
        w.grad = np.zeros(3)
        b.grad = np.zeros(3)
        opt.step(lr=0.1)
        assert np.all(w.data < 1.0)
        assert np.all(b.data == 1.0)  # zero grad, no decay

    def test_cosine_schedule_endpoints(self):
        assert cosine_lr(1.0, 0, 100) == 1.0
        assert abs(cosine_lr(1.0, 50, 100) - 0.5) < 1e-12
        assert cosine_lr(1.0, 100, 100) < 1e-12


class TestSampler:
    def test_deterministic_and_covering(self):
        ids = [f"p{i}" for i in range(7)]
        a = EpochSampler(ids, seed=3, tag="x")
        b = EpochSampler(ids, seed=3, tag="x")
        taken_a = [a.take(2) for _ in range(8)]
        taken_b = [b.take(2) for _ in range(8)]
        assert taken_a == taken_b
        flat = [x for batch in taken_a[:7] for x in batch][:7]
        assert sorted(flat) == sorted(ids)

    def test_empty_pool_rejected(self):
        with pytest.raises(ConfigError):
            EpochSampler([], seed=0, tag="x")


class TestPretrain:
    def test_zero_steps_checkpoint_is_initialization(self, corpus, tmp_path):
        cfg = small_cfg(steps=0)
        out = pretrain(corpus / "labeled.jsonl", None, tmp_path / "run", cfg, "supervised")
        trained = SegMoEModel.load(out["checkpoint"])
        fresh_cfg = trained.config
        fresh = SegMoEModel(fresh_cfg, seed=cfg.seed)
        for name, p in fresh.params.items():
            assert np.array_equal(trained.params[name].data, p.data)

    def test_metrics_log_schema(self, corpus, tmp_path):
        cfg = small_cfg(steps=3, eval_every=2)
        out = pretrain(corpus / "labeled.jsonl", corpus / "unlabeled.jsonl",
                       tmp_path / "run", cfg, "semi")
        lines = Path(out["metrics"]).read_text().splitlines()
        assert len(lines) == 3
        for line in lines:
            row = json.loads(line)
            assert set(row) == {"step", "L_s", "L_u", "mask_frac", "lr", "miou_eval"}
            assert math.isfinite(row["L_s"])
            assert 0.0 <= row["mask_frac"] <= 1.0

    def test_lambda_zero_matches_supervised_bitwise(self, corpus, tmp_path):
        cfg = small_cfg(steps=3, lam=0.0)
        a = pretrain(corpus / "labeled.jsonl", corpus / "unlabeled.jsonl",
                     tmp_path / "a", cfg, "semi")
        cfg2 = small_cfg(steps=3)
        b = pretrain(corpus / "labeled.jsonl", None, tmp_path / "b", cfg2, "supervised")
        ma = SegMoEModel.load(a["checkpoint"])
        mb = SegMoEModel.load(b["checkpoint"])
        for name in ma.params:
            assert np.array_equal(ma.params[name].data, mb.params[name].data), name

    def test_all_masked_matches_supervised_bitwise(self, corpus, tmp_path):
        # tau = 1.0 is unreachable for an early-training softmax
        cfg = small_cfg(steps=3, tau=1.0)
        a = pretrain(corpus / "labeled.jsonl", corpus / "unlabeled.jsonl",
                     tmp_path / "a", cfg, "semi")
        cfg2 = small_cfg(steps=3)
        b = pretrain(corpus / "labeled.jsonl", None, tmp_path / "b", cfg2, "supervised")
        ma = SegMoEModel.load(a["checkpoint"])
        mb = SegMoEModel.load(b["checkpoint"])
        for name in ma.params:
            assert np.array_equal(ma.params[name].data, mb.params[name].data), name
        # and the masked fraction was really zero throughout
        for line in Path(a["metrics"]).read_text().splitlines():
            assert json.loads(line)["mask_frac"] == 0.0

    def test_seed_reproducibility_bitwise(self, corpus, tmp_path):
        cfg = small_cfg(steps=2)
        a = pretrain(corpus / "labeled.jsonl", corpus / "unlabeled.jsonl",
                     tmp_path / "a", cfg, "semi", workers=1)
        cfg2 = small_cfg(steps=2)
        b = pretrain(corpus / "labeled.jsonl", corpus / "unlabeled.jsonl",
                     tmp_path / "b", cfg2, "semi", workers=3)
        assert Path(a["checkpoint"]).read_bytes() == Path(b["checkpoint"]).read_bytes()
        assert Path(a["metrics"]).read_bytes() == Path(b["metrics"]).read_bytes()

    def test_empty_manifest_rejected(self, tmp_path):
        from s5.io import write_manifest

        path = tmp_path / "empty.jsonl"
        write_manifest(path, [])
        with pytest.raises(ConfigError):
            pretrain(path, None, tmp_path / "run", small_cfg(), "supervised")

    def test_loss_decreases_over_training(self, corpus, tmp_path):
        cfg = small_cfg(steps=50, base_lr=3e-3)
        out = pretrain(corpus / "labeled.jsonl", None, tmp_path / "run", cfg, "supervised")
        rows = [json.loads(l) for l in Path(out["metrics"]).read_text().splitlines()]
        first = np.mean([r["L_s"] for r in rows[:5]])
        last = np.mean([r["L_s"] for r in rows[-5:]])
        assert last < first
