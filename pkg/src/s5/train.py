"""Consistency-regularized semi-supervised pre-training.

Each step computes a supervised cross-entropy over a labeled batch plus a
confidence-gated unsupervised term: pseudo-labels are the argmax of the
model's own prediction on a weak view (no gradient), and the strong view
is trained to match them wherever confidence clears tau. The total is
L = L_s + lambda * L_u, normalized over all unlabeled pixels so fully
gated batches contribute exactly zero. Degenerate settings (lambda = 0,
nothing above tau) take the identical update path as a supervised-only
run, bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import apply_strong, cutmix_batch, sample_strong, weak_augment
from .errors import ConfigError, NumericError
from .io import RunConfig, load_tensor, read_manifest
from .metrics import ConfusionMatrix
from .model import ModelConfig, SegMoEModel
from .parallel import det_map
from .rng import stream


@dataclass
class StepLog:
    step: int
    loss_s: float
    loss_u: float
    mask_frac: float
    lr: float
    miou_eval: float | None = None

    def to_json(self) -> dict:
        return {"step": self.step, "L_s": self.loss_s, "L_u": self.loss_u,
                "mask_frac": self.mask_frac, "lr": self.lr, "miou_eval": self.miou_eval}


# ---------------------------------------------------------------------------
# data plumbing


class PatchStore:
    """Caches decoded image/mask tensors for one manifest."""

    def __init__(self, manifest_path):
        self.root = Path(manifest_path).parent
        self.records = read_manifest(manifest_path)
        self.by_id = {r.id: r for r in self.records}
        self._cache: dict[str, tuple] = {}

    def ids(self, split=None) -> list[str]:
        return [r.id for r in self.records if split is None or r.split == split]

    def load(self, patch_id: str):
        if patch_id not in self._cache:
            rec = self.by_id[patch_id]
            image = np.asarray(load_tensor(self.root / rec.image), dtype=np.float64)
            mask = None
            if rec.mask is not None:
                mask = np.asarray(load_tensor(self.root / rec.mask))
            self._cache[patch_id] = (image, mask)
        return self._cache[patch_id]


class EpochSampler:
    """Cycles seeded shuffles of an id list; a pure function of draws made."""

    def __init__(self, ids, seed: int, tag: str):
        if not ids:
            raise ConfigError(f"empty sample pool for {tag!r}")
        self.ids = sorted(ids)
        self.seed = seed
        self.tag = tag
        self.epoch = 0
        self.pos = 0
        self._order = self._shuffle()

    def _shuffle(self):
        perm = stream(self.seed, "shuffle", self.tag, self.epoch).permutation(len(self.ids))
        return [self.ids[i] for i in perm]

    def take(self, n: int) -> list[str]:
        out = []
        while len(out) < n:
            if self.pos >= len(self._order):
                self.epoch += 1
                self.pos = 0
                self._order = self._shuffle()
            out.append(self._order[self.pos])
            self.pos += 1
        return out


# ---------------------------------------------------------------------------
# loss pieces


def pseudo_label(probs: np.ndarray):
    """Per-pixel argmax class and its probability; ties take the lowest class."""
    labels = np.argmax(probs, axis=-1)
    confidence = np.max(probs, axis=-1)
    return labels, confidence


def supervised_loss(logits_list, labels_list, ignore_label: int = 255) -> T.Tensor:
    """Mean over images of the per-image mean pixel cross entropy."""
    if len(logits_list) != len(labels_list) or not logits_list:
        raise ConfigError("labeled batch is empty or misaligned")
    total = None
    scale = 1.0 / len(logits_list)
    for logits, labels in zip(logits_list, labels_list):
        h, w, k = logits.data.shape
        lab = np.asarray(labels, dtype=np.int64).reshape(-1)
        mask = (lab != ignore_label).astype(np.float64)
        if mask.sum() == 0:  # fully ignored image contributes nothing
            continue
        flat = T.reshape(logits, (h * w, k))
        safe = np.where(mask > 0, lab, 0)
        term = T.mul(T.cross_entropy_masked(flat, safe, mask), scale)
        total = term if total is None else T.add(total, term)
    return total if total is not None else T.Tensor(np.array(0.0))


def unsupervised_loss(logits_list, pseudo_list, conf_list, tau: float):
    """Confidence-gated cross entropy normalized by the full pixel count.

    Returns (loss, masked-in fraction). With no pixel above tau the loss is
    a detached constant zero.
    """
    if not logits_list:
        return T.Tensor(np.array(0.0)), 0.0
    total_pixels = sum(int(np.prod(l.data.shape[:2])) for l in logits_list)
    total = None
    masked_in = 0
    for logits, pseudo, conf in zip(logits_list, pseudo_list, conf_list):
        h, w, k = logits.data.shape
        mask = (np.asarray(conf).reshape(-1) >= tau).astype(np.float64)
        count = int(mask.sum())
        masked_in += count
        if count == 0:
            continue
        flat = T.reshape(logits, (h * w, k))
        term = T.cross_entropy_masked(flat, np.asarray(pseudo, dtype=np.int64).reshape(-1), mask)
        term = T.mul(term, count / total_pixels)
        total = term if total is None else T.add(total, term)
    frac = masked_in / total_pixels
    if total is None:
        return T.Tensor(np.array(0.0)), frac
    return total, frac


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adaptive moments with decoupled weight decay on weight matrices.

    Only parameters whose grad buffer was touched this step are updated, so
    experts and decoders outside the routed path stay bit-identical.
    """

    def __init__(self, params: dict[str, T.Tensor], betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.01):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: dict[str, dict] = {}

    def step(self, lr: float):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            st = self.state.setdefault(name, {
                "m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0})
            st["t"] += 1
            st["m"] = self.b1 * st["m"] + (1 - self.b1) * p.grad
            st["v"] = self.b2 * st["v"] + (1 - self.b2) * p.grad * p.grad
            mhat = st["m"] / (1 - self.b1 ** st["t"])
            vhat = st["v"] / (1 - self.b2 ** st["t"])
            if self.weight_decay and name.endswith(".w"):
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)
            p.grad = None


def cosine_lr(base: float, step: int, total_steps: int) -> float:
    if total_steps <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------------------
# steps and loops


def assemble_labeled(store: PatchStore, ids, seed: int, step: int,
                     ignore_label: int, workers: int = 1):
    def build(pid):
        image, mask = store.load(pid)
        img, msk, _ = weak_augment(image, mask, stream(seed, "weak", pid, step), ignore_label)
        return img, msk

    return det_map(build, ids, workers)


def assemble_unlabeled(store: PatchStore, ids, seed: int, step: int, workers: int = 1):
    """Weak view plus its photometric strong counterpart per patch."""
    def build(pid):
        image, _ = store.load(pid)
        weak, _, _ = weak_augment(image, None, stream(seed, "weak", pid, step))
        strong = apply_strong(weak, sample_strong(stream(seed, "strong", pid, step)))
        return weak, strong

    return det_map(build, ids, workers)


def train_step(model: SegMoEModel, opt: AdamW, labeled_batch, unlabeled_batch,
               tau: float, lam: float, lr: float, step: int, seed: int,
               ignore_label: int = 255, dataset_id: int = 0) -> StepLog:
    """One optimization step; `unlabeled_batch` may be None (supervised only)."""
    logits_l = [model.forward(img, dataset_id) for img, _ in labeled_batch]
    loss_s = supervised_loss(logits_l, [m for _, m in labeled_batch], ignore_label)

    loss_u = T.Tensor(np.array(0.0))
    frac = 0.0
    if unlabeled_batch is not None and lam > 0:
        weak_views = [w for w, _ in unlabeled_batch]
        strong_views = [s for _, s in unlabeled_batch]
        with T.no_grad():
            pseudo, conf = [], []
            for view in weak_views:
                probs = _softmax3(model.forward(view, dataset_id).data)
                lab, c = pseudo_label(probs)
                pseudo.append(lab)
                conf.append(c)
        strong_views, pseudo, conf, _ = cutmix_batch(
            strong_views, pseudo, conf, stream(seed, "cutmix", step))
        logits_u = [model.forward(img, dataset_id) for img in strong_views]
        loss_u, frac = unsupervised_loss(logits_u, pseudo, conf, tau)

    if frac > 0:
        total = T.add(loss_s, T.mul(loss_u, lam))
    else:
        total = loss_s  # identical graph to a supervised-only step
    if not np.isfinite(total.item()):
        raise NumericError(f"non-finite loss at step {step}")
    T.backward(total)
    opt.step(lr)
    return StepLog(step=step, loss_s=loss_s.item(), loss_u=loss_u.item(),
                   mask_frac=frac, lr=lr)


def _softmax3(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def predict(model: SegMoEModel, image: np.ndarray, dataset_id: int = 0) -> np.ndarray:
    with T.no_grad():
        return np.argmax(model.forward(image, dataset_id).data, axis=-1)


def evaluate_split(model: SegMoEModel, store: PatchStore, ids, dataset_id: int = 0,
                   ignore_label: int = 255, workers: int = 1) -> float:
    num_classes = model.config.num_classes[dataset_id]

    def one(pid):
        image, mask = store.load(pid)
        cm = ConfusionMatrix(num_classes, ignore_label)
        cm.update(predict(model, image, dataset_id), mask)
        return cm

    total = ConfusionMatrix(num_classes, ignore_label)
    for cm in det_map(one, ids, workers):
        total.merge(cm)
    return total.iou()[1]


def pretrain(labeled_manifest, unlabeled_manifest, out_dir, cfg: RunConfig,
             mode: str = "semi", workers: int = 1) -> dict:
    """Run the pre-training loop and write model.ckpt + metrics.jsonl."""
    if mode not in ("semi", "supervised"):
        raise ConfigError(f"unknown pretrain mode {mode!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    lab_store = PatchStore(labeled_manifest)
    train_ids = lab_store.ids("train")
    val_ids = lab_store.ids("val")
    if not train_ids:
        raise ConfigError(f"no training records in {labeled_manifest}")

    unl_store = None
    if mode == "semi":
        if unlabeled_manifest is None:
            raise ConfigError("semi mode needs an unlabeled manifest")
        unl_store = PatchStore(unlabeled_manifest)
        if not unl_store.records:
            raise ConfigError(f"no unlabeled records in {unlabeled_manifest}")

    m = cfg.model
    model_cfg = ModelConfig(
        image_size=m.image_size, patch_size=m.patch_size, embed_dim=m.embed_dim,
        ffn_hidden=m.ffn_hidden, ffn_out=m.ffn_out, depth=m.depth, heads=m.heads,
        num_classes=[m.num_classes], dataset_names=["pretrain"], alpha=0.0)
    model = SegMoEModel(model_cfg, seed=cfg.seed)
    opt = AdamW(model.params, weight_decay=cfg.train.weight_decay)
    ignore = cfg.synth.ignore_label

    lab_sampler = EpochSampler(train_ids, cfg.seed, "labeled")
    unl_sampler = EpochSampler(unl_store.ids(), cfg.seed, "unlabeled") if unl_store else None

    history: list[StepLog] = []
    metrics_path = out_dir / "metrics.jsonl"
    steps = cfg.train.steps
    with metrics_path.open("w", encoding="utf-8") as metrics:
        for step in range(steps):
            lr = cosine_lr(cfg.train.base_lr, step, steps)
            lab_batch = assemble_labeled(
                lab_store, lab_sampler.take(cfg.train.batch_labeled),
                cfg.seed, step, ignore, workers)
            unl_batch = None
            if unl_sampler is not None and cfg.train.lam > 0:
                unl_batch = assemble_unlabeled(
                    unl_store, unl_sampler.take(cfg.train.batch_unlabeled),
                    cfg.seed, step, workers)
            try:
                log = train_step(model, opt, lab_batch, unl_batch,
                                 cfg.train.tau, cfg.train.lam, lr, step, cfg.seed, ignore)
            except NumericError as exc:
                exc.history = [h.to_json() for h in history[-20:]]
                raise
            if val_ids and ((step + 1) % cfg.train.eval_every == 0 or step == steps - 1):
                log.miou_eval = evaluate_split(model, lab_store, val_ids,
                                               ignore_label=ignore, workers=workers)
            history.append(log)
            metrics.write(json.dumps(log.to_json(), sort_keys=True) + "\n")

    ckpt = out_dir / "model.ckpt"
    model.save(ckpt)
    final_miou = None
    if val_ids:
        final_miou = (history[-1].miou_eval if history and history[-1].miou_eval is not None
                      else evaluate_split(model, lab_store, val_ids, ignore_label=ignore,
                                          workers=workers))
    return {"checkpoint": str(ckpt), "metrics": str(metrics_path),
            "steps": steps, "final_miou": final_miou}
