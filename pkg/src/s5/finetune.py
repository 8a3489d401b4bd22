"""Multi-dataset fine-tuning in three regimes.

SDF trains an independent model per dataset. MDF shares the backbone and
gives each dataset its own decoder. MoE-MDF additionally splits every
FFN output linear into a shared expert plus per-dataset specific experts,
initialized by slicing the pre-trained weights so the split is a no-op at
step 0. Batches interleave round-robin by default; each dataset cycles
its own seeded shuffle.

Datasets come either from one manifest grouped by its dataset tags or
from separate per-dataset manifest files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .metrics import ConfusionMatrix
from .model import SegMoEModel, adapt_datasets, convert_to_moe, param_count
from .parallel import det_map
from .rng import stream
from .train import AdamW, EpochSampler, PatchStore, assemble_labeled, cosine_lr, predict, train_step

REGIMES = ("SDF", "MDF", "MoE-MDF")


@dataclass
class DatasetEntry:
    name: str
    num_classes: int
    ignore_label: int
    train_ids: list[str]
    val_ids: list[str]
    store: PatchStore | None = None


@dataclass
class MultiDatasetSpec:
    entries: list[DatasetEntry]

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    @property
    def class_counts(self) -> list[int]:
        return [e.num_classes for e in self.entries]

    @classmethod
    def from_manifests(cls, manifest_paths, num_classes: int,
                       ignore_label: int = 255) -> "MultiDatasetSpec":
        """One or more manifests; records group into datasets by their tag."""
        entries = []
        seen = set()
        for path in manifest_paths:
            store = PatchStore(path)
            groups: dict[str, dict[str, list[str]]] = {}
            for rec in store.records:
                if rec.mask is None:
                    continue
                g = groups.setdefault(rec.dataset, {"train": [], "val": []})
                if rec.split in g:
                    g[rec.split].append(rec.id)
            for name in sorted(groups):
                if name in seen:
                    raise ConfigError(f"dataset {name!r} appears in more than one manifest")
                seen.add(name)
                g = groups[name]
                if not g["train"]:
                    raise ConfigError(f"dataset {name!r} has no training records")
                entries.append(DatasetEntry(name, num_classes, ignore_label,
                                            sorted(g["train"]), sorted(g["val"]), store))
        if not entries:
            raise ConfigError(f"no labeled datasets found in {list(manifest_paths)}")
        return cls(entries=entries)


def schedule_batches(spec: MultiDatasetSpec, samplers, step: int, batch: int,
                     seed: int, mode: str = "round_robin"):
    """Pick (dataset_id, patch ids) for one step."""
    t = len(spec.entries)
    if mode == "round_robin":
        dataset_id = step % t
    elif mode == "proportional":
        sizes = np.array([len(e.train_ids) for e in spec.entries], dtype=np.float64)
        dataset_id = int(stream(seed, "schedule", step).choice(t, p=sizes / sizes.sum()))
    else:
        raise ConfigError(f"unknown schedule mode {mode!r}")
    return dataset_id, samplers[dataset_id].take(batch)


def _train_on(model: SegMoEModel, spec: MultiDatasetSpec, steps: int, cfg, seed: int,
              workers: int, schedule: str, step_callback=None) -> None:
    opt = AdamW(model.params, weight_decay=cfg.train.weight_decay)
    # samplers key on dataset position, so renaming a dataset cannot
    # perturb an otherwise identical run
    samplers = [EpochSampler(e.train_ids, seed, f"ft{i}") for i, e in enumerate(spec.entries)]
    for step in range(steps):
        dataset_id, ids = schedule_batches(spec, samplers, step, cfg.train.batch_labeled,
                                           seed, schedule)
        entry = spec.entries[dataset_id]
        batch = assemble_labeled(entry.store, ids, seed, step, entry.ignore_label, workers)
        lr = cosine_lr(cfg.train.base_lr, step, steps)
        train_step(model, opt, batch, None, cfg.train.tau, 0.0, lr, step, seed,
                   entry.ignore_label, dataset_id=dataset_id)
        if step_callback is not None:
            step_callback(step, dataset_id, model)


def finetune(checkpoint_path, manifest_paths, regime: str, alpha: float, cfg,
             out_dir, num_classes: int | None = None, workers: int = 1,
             schedule: str = "round_robin", step_callback=None) -> dict:
    """Fine-tune a pre-trained checkpoint; writes checkpoints and report.json."""
    if regime not in REGIMES:
        raise ConfigError(f"regime must be one of {REGIMES}, got {regime!r}")
    if isinstance(manifest_paths, (str, Path)):
        manifest_paths = [manifest_paths]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pre = SegMoEModel.load(checkpoint_path)
    k = num_classes if num_classes is not None else cfg.model.num_classes
    spec = MultiDatasetSpec.from_manifests(manifest_paths, k, cfg.synth.ignore_label)
    steps_per_dataset = cfg.train.finetune_steps
    seed = cfg.seed

    checkpoints = {}
    if regime == "SDF":
        for entry in spec.entries:
            sub = MultiDatasetSpec([entry])
            model = adapt_datasets(pre, [entry.name], [entry.num_classes], seed=seed)
            _train_on(model, sub, steps_per_dataset, cfg, seed, workers,
                      schedule, step_callback)
            path = out_dir / f"sdf_{entry.name}.ckpt"
            model.save(path)
            checkpoints[entry.name] = str(path)
        counting = param_count(_single_config(pre, spec), "SDF", len(spec.entries))
    else:
        if regime == "MoE-MDF":
            model = convert_to_moe(pre, alpha, spec.names, spec.class_counts, seed=seed)
        else:
            model = adapt_datasets(pre, spec.names, spec.class_counts, seed=seed)
        total = steps_per_dataset * len(spec.entries)
        _train_on(model, spec, total, cfg, seed, workers, schedule, step_callback)
        path = out_dir / "model.ckpt"
        model.save(path)
        checkpoints = {name: str(path) for name in spec.names}
        counting = param_count(model.config, regime)
        assert counting["total_multiple"] == model.num_params()

    report = evaluate(list(dict.fromkeys(checkpoints.values())), manifest_paths, k,
                      cfg.synth.ignore_label, workers)
    report["regime"] = regime
    report["params"] = counting
    (out_dir / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n",
                                         encoding="utf-8")
    return report


def _single_config(pre: SegMoEModel, spec: MultiDatasetSpec):
    from .model import ModelConfig

    old = pre.config
    return ModelConfig(
        image_size=old.image_size, patch_size=old.patch_size, embed_dim=old.embed_dim,
        ffn_hidden=old.ffn_hidden, ffn_out=old.ffn_out, depth=old.depth, heads=old.heads,
        num_classes=[spec.entries[0].num_classes], dataset_names=[spec.entries[0].name],
        alpha=old.alpha)


def evaluate(checkpoint_paths, manifest_paths, num_classes: int,
             ignore_label: int = 255, workers: int = 1) -> dict:
    """Per-dataset validation mIoU plus the unweighted average."""
    if isinstance(manifest_paths, (str, Path)):
        manifest_paths = [manifest_paths]
    models = [SegMoEModel.load(p) for p in checkpoint_paths]
    serving: dict[str, tuple] = {}
    for model in models:
        for t, name in enumerate(model.config.dataset_names):
            serving.setdefault(name, (model, t))
    spec = MultiDatasetSpec.from_manifests(manifest_paths, num_classes, ignore_label)

    per_dataset = {}
    for entry in spec.entries:
        if entry.name not in serving:
            raise ConfigError(f"no checkpoint serves dataset {entry.name!r}")
        model, dataset_id = serving[entry.name]

        def one(pid, model=model, dataset_id=dataset_id, entry=entry):
            image, mask = entry.store.load(pid)
            local = ConfusionMatrix(entry.num_classes, entry.ignore_label)
            local.update(predict(model, image, dataset_id), mask)
            return local

        cm = ConfusionMatrix(entry.num_classes, entry.ignore_label)
        ids = entry.val_ids if entry.val_ids else entry.train_ids
        for local in det_map(one, ids, workers):
            cm.merge(local)
        ious, mean = cm.iou()
        per_dataset[entry.name] = {
            "miou": mean,
            "per_class_iou": [None if np.isnan(v) else float(v) for v in ious],
        }
    average = float(np.mean([v["miou"] for v in per_dataset.values()]))
    return {"datasets": per_dataset, "average": average}
