"""Apply a trained checkpoint to manifest patches, emitting the per-patch
probability maps and mean-pooled backbone features that curation consumes."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigError
from .io import read_manifest, load_tensor, save_tensor
from .model import SegMoEModel
from .parallel import det_map
from .train import _softmax3


def infer(checkpoint_path, manifest_path, out_dir, emit=("probs", "features"),
          workers: int = 1) -> dict:
    for item in emit:
        if item not in ("probs", "features"):
            raise ConfigError(f"unknown emit kind {item!r}")
    model = SegMoEModel.load(checkpoint_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = read_manifest(manifest_path)
    root = Path(manifest_path).parent
    size = model.config.image_size

    def one(rec):
        image = np.asarray(load_tensor(root / rec.image), dtype=np.float64)
        if image.shape != (size, size, 3):
            raise CheckpointError(
                f"patch {rec.id} shape {image.shape} does not fit model input "
                f"({size}, {size}, 3)")
        with T.no_grad():
            tokens = model.backbone(image, 0)
            written = []
            if "features" in emit:
                feature = tokens.data.mean(axis=0)
                save_tensor(out_dir / f"{rec.id}.feat.bin", feature)
                written.append("features")
            if "probs" in emit:
                logits = model.decode(tokens, 0)
                probs = _softmax3(logits.data)
                save_tensor(out_dir / f"{rec.id}.probs.bin", probs)
                written.append("probs")
        return written

    results = det_map(one, records, workers)
    return {"patches": len(records), "files": sum(len(r) for r in results)}
