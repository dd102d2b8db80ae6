"""Procedural train/val/test splits persisted as PPM + RVOX files and a manifest.

Manifest format (``manifest.txt``), one tab-separated record per line::

    id <TAB> image path <TAB> voxel path <TAB> split <TAB> shape spec (JSON)

Paths are relative to the dataset root. Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..errors import ConfigError, FormatError, OccupancyError
from .formats import decode_image, encode_image, load_image, load_voxels, save_image, save_voxels
from .render import View, render_ortho
from .shapes import ShapeSpec, gen_shape

MANIFEST = "manifest.txt"
SPLITS = ("train", "val", "test")
MAX_ATTEMPTS = 100


@dataclass
class ImageSample:
    id: str
    image: np.ndarray  # (3, S, S) in [0, 1]
    voxels: np.ndarray  # (32, 32, 32) bool
    spec: Optional[ShapeSpec] = None
    split: str = "train"


def shape_seed(seed: int, index: int, attempt: int) -> int:
    return int(np.random.SeedSequence([seed, index, attempt]).generate_state(1)[0])


def make_sample(sample_id: str, seed: int, index: int, view: View = View(), image_size: int = 64) -> ImageSample:
    """Generate one sample, resampling the shape until its occupancy is acceptable."""
    for attempt in range(MAX_ATTEMPTS):
        spec = ShapeSpec.random(shape_seed(seed, index, attempt))
        try:
            voxels = gen_shape(spec)
        except OccupancyError:
            continue
        # Quantize through the file encoding so in-memory and on-disk images agree.
        image = decode_image(encode_image(render_ortho(voxels, view, image_size)))
        return ImageSample(sample_id, image, voxels, spec)
    raise RuntimeError(f"no acceptable shape after {MAX_ATTEMPTS} attempts for sample {index}")


def split_counts(n: int, ratios: Sequence[float]) -> tuple:
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-6:
        raise ConfigError(f"split ratios must be three non-negative values summing to 1, got {ratios}")
    n_train = int(round(n * ratios[0]))
    n_val = int(round(n * ratios[1]))
    return n_train, n_val, n - n_train - n_val


def make_dataset(
    root,
    n: int,
    seed: int = 0,
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    image_size: int = 64,
    view: View = View(),
    workers: int = 1,
) -> Path:
    """Write ``n`` samples under ``root``; deterministic in (n, seed, ratios, image_size, view)."""
    if n < 10:
        raise ConfigError(f"dataset needs at least 10 samples, got {n}")
    counts = split_counts(n, ratios)
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "voxels").mkdir(parents=True, exist_ok=True)
    order = np.random.default_rng([seed, 7]).permutation(n)
    split_of = np.empty(n, dtype=object)
    split_of[order[:counts[0]]] = "train"
    split_of[order[counts[0]:counts[0] + counts[1]]] = "val"
    split_of[order[counts[0] + counts[1]:]] = "test"

    def build(index: int):
        sample = make_sample(f"s{index:05d}", seed, index, view, image_size)
        image_rel = f"images/{sample.id}.ppm"
        voxel_rel = f"voxels/{sample.id}.rvox"
        save_image(root / image_rel, sample.image)
        save_voxels(root / voxel_rel, sample.voxels)
        spec = json.dumps(sample.spec.to_dict(), sort_keys=True, separators=(",", ":"))
        return f"{sample.id}\t{image_rel}\t{voxel_rel}\t{split_of[index]}\t{spec}\n"

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            lines = list(pool.map(build, range(n)))
    else:
        lines = [build(i) for i in range(n)]
    header = f"# id\timage\tvoxels\tsplit\tspec  (n={n} seed={seed} size={image_size})\n"
    manifest = root / MANIFEST
    try:
        manifest.write_text(header + "".join(lines))
    except OSError as exc:
        raise OSError(f"cannot write {manifest}: {exc}") from exc
    return root


def read_manifest(root) -> list:
    path = Path(root) / MANIFEST
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) < 4:
            raise FormatError(f"manifest line {lineno} has {len(fields)} fields", path=path)
        rec = {"id": fields[0], "image": fields[1], "voxels": fields[2], "split": fields[3]}
        if len(fields) > 4:
            rec["spec"] = json.loads(fields[4])
        records.append(rec)
    return records


def load_split(root, split: str) -> list:
    """Load every sample of ``split`` (``"all"`` for every split) in manifest order."""
    if split not in SPLITS + ("all",):
        raise ConfigError(f"unknown split {split!r}")
    root = Path(root)
    out = []
    for rec in read_manifest(root):
        if split != "all" and rec["split"] != split:
            continue
        spec = ShapeSpec.from_dict(rec["spec"]) if "spec" in rec else None
        out.append(ImageSample(rec["id"], load_image(root / rec["image"]),
                               load_voxels(root / rec["voxels"]), spec, rec["split"]))
    return out
