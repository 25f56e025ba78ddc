"""Dataset and run-directory layout on disk.

Dataset directory (written by ``synth``)::

    manifest.csv          sample_id, image, mask, then every DomainDescriptor field
    <id>.vmtf             1-channel image, exact float32
    <id>_mask.png         8-bit mask, 0 or 255

Run directory::

    config.txt            key = value lines (TrainConfig fields)
    stage{1,2,3}/checkpoint.vmck
    stage{1,2,3}/loss.csv epoch, loss   (row 0 = before training)
    stage{1,2,3}/loss.png
    eval.csv              sample_id, domain, dice
    eval.png
"""

from __future__ import annotations

import csv
from dataclasses import fields
from pathlib import Path

import numpy as np

from .core import as_mask, load_image, read_field, write_field
from .phantoms import DomainDescriptor, PhantomSample
from .pipeline import ModelBundle, TrainConfig
from .toynet import load_checkpoint, save_checkpoint

STAGE_NETS = {
    1: ("intensity_encoder", "decoder"),
    2: ("structure_encoder", "decoder"),
    3: ("task_net",),
}

_DOMAIN_FIELDS = [f.name for f in fields(DomainDescriptor)]


def _csv_writer(fh):
    return csv.writer(fh, lineterminator="\n")


def write_dataset(samples, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    from PIL import Image

    with open(out / "manifest.csv", "w", newline="") as fh:
        w = _csv_writer(fh)
        w.writerow(["sample_id", "image", "mask"] + _DOMAIN_FIELDS)
        for s in samples:
            img, msk = f"{s.sample_id}.vmtf", f"{s.sample_id}_mask.png"
            write_field(s.image[None].astype(np.float32), out / img)
            Image.fromarray((s.mask * 255).astype(np.uint8), mode="L").save(out / msk)
            d = s.domain.as_dict()
            w.writerow([s.sample_id, img, msk] + [d[k] for k in _DOMAIN_FIELDS])
    return out / "manifest.csv"


def _domain_from_row(row):
    kinds = {f.name: f.type for f in fields(DomainDescriptor)}
    kw = {}
    for k in _DOMAIN_FIELDS:
        t = kinds[k]
        v = row[k]
        if t in ("bool", bool):
            kw[k] = v == "True"
        elif t in ("int", int):
            kw[k] = int(v)
        elif t in ("float", float):
            kw[k] = float(v)
        else:
            kw[k] = v
    return DomainDescriptor(**kw)


def read_dataset(data_dir) -> list[PhantomSample]:
    root = Path(data_dir)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"dataset manifest not found: {manifest}")
    samples = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            image = read_field(root / row["image"])[0].astype(np.float64)
            mask = as_mask(load_image(root / row["mask"]) > 0.5)
            samples.append(PhantomSample(image, mask, _domain_from_row(row), row["sample_id"]))
    if not samples:
        raise ValueError(f"dataset {root} is empty")
    return samples


def write_config(run_dir, config: TrainConfig):
    Path(run_dir).mkdir(parents=True, exist_ok=True)
    (Path(run_dir) / "config.txt").write_text(config.to_text())


def read_config(run_dir, **overrides) -> TrainConfig:
    path = Path(run_dir) / "config.txt"
    if not path.exists():
        raise FileNotFoundError(f"run configuration not found: {path}")
    return TrainConfig.from_text(path.read_text(), **overrides)


def checkpoint_path(run_dir, stage) -> Path:
    return Path(run_dir) / f"stage{stage}" / "checkpoint.vmck"


def write_stage(run_dir, stage, bundle: ModelBundle, history):
    d = Path(run_dir) / f"stage{stage}"
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(d / "checkpoint.vmck", {n: getattr(bundle, n) for n in STAGE_NETS[stage]})
    with open(d / "loss.csv", "w", newline="") as fh:
        w = _csv_writer(fh)
        w.writerow(["epoch", "loss"])
        for epoch, loss in history:
            w.writerow([epoch, repr(float(loss))])


def read_loss(run_dir, stage):
    with open(Path(run_dir) / f"stage{stage}" / "loss.csv", newline="") as fh:
        return [(int(r["epoch"]), float(r["loss"])) for r in csv.DictReader(fh)]


def load_bundle(run_dir, upto=3, config: TrainConfig | None = None) -> ModelBundle:
    """Seeded initial bundle with checkpoints of stages ``1..upto`` loaded over it.

    Raises ``FileNotFoundError`` naming the first missing checkpoint.
    """
    config = config or read_config(run_dir)
    bundle = ModelBundle.initial(config)
    for stage in range(1, upto + 1):
        path = checkpoint_path(run_dir, stage)
        if not path.exists():
            raise FileNotFoundError(f"stage {stage} checkpoint missing: {path}")
        for name, net in load_checkpoint(path).items():
            setattr(bundle, name, net)
    return bundle


def write_eval(path, report):
    with open(path, "w", newline="") as fh:
        w = _csv_writer(fh)
        w.writerow(["sample_id", "domain", "dice"])
        for sid, dom, d in report.rows:
            w.writerow([sid, dom, f"{d:.6f}"])
