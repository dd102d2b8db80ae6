"""Training loop, evaluation and single-image reconstruction."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import load_image, load_split, save_voxels, save_voxels_float
from .errors import ConfigError, FingerprintMismatch, NonFiniteError, PoisonedGradientError
from .metrics import MetricReport, dice_loss
from .model import Model, config_fingerprint
from .tensor import AdamW, Tape, Tensor, precision

log = logging.getLogger(__name__)

LOSS_FILE = "loss.txt"
FINAL = "last.ckpt"

# Purpose tags mixed into the seed so each random stream is independent.
_INIT, _ORDER, _DROP = 0, 1, 2


def step_rng(seed: int, purpose: int, counter: int) -> np.random.Generator:
    """Counter-based stream: a fresh generator per (seed, purpose, counter)."""
    return np.random.default_rng([seed, purpose, counter])


def init_model(run: RunConfig, dtype=None) -> Model:
    return Model(run.encoder, run.decoder, rng=step_rng(run.train.seed, _INIT, 0), dtype=dtype)


def make_optimizer(run: RunConfig) -> AdamW:
    t = run.train
    return AdamW(lr=t.lr, beta1=t.beta1, beta2=t.beta2, eps=t.eps, weight_decay=t.weight_decay)


@dataclass
class Trainer:
    """Owns the model, optimizer and step counter for one run over in-memory arrays."""

    run: RunConfig
    images: np.ndarray  # (n, 3, S, S)
    voxels: np.ndarray  # (n, 32, 32, 32) bool
    model: Optional[Model] = None
    optimizer: Optional[AdamW] = None
    step: int = 0
    losses: list = field(default_factory=list)
    dtype: Optional[type] = None  # None keeps the ambient default width

    def __post_init__(self):
        self.run.validate()
        if len(self.images) == 0:
            raise ConfigError("training split is empty")
        if self.images.shape[-1] != self.run.encoder.image_size:
            raise ConfigError(
                f"images are {self.images.shape[-1]}px but the encoder expects {self.run.encoder.image_size}px")
        if self.model is None:
            self.model = init_model(self.run, self.dtype)
        if self.optimizer is None:
            self.optimizer = make_optimizer(self.run)
        dtype = next(iter(self.model.params.values())).dtype
        self.dtype = dtype.type
        self.images = np.asarray(self.images, dtype=dtype)
        self.targets = np.asarray(self.voxels, dtype=dtype)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, images, voxels, run: Optional[RunConfig] = None) -> "Trainer":
        """Continue from ``ckpt``; ``run`` (same architecture) may change the training schedule."""
        run = run or ckpt.run
        return cls(run, images, voxels, model=ckpt.model(), optimizer=ckpt.optimizer(run), step=ckpt.step)

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.images) / self.run.train.batch_size)

    @property
    def total_steps(self) -> int:
        t = self.run.train
        return t.max_steps if t.max_steps else t.epochs * self.steps_per_epoch

    @property
    def epoch(self) -> int:
        return self.step // self.steps_per_epoch

    def batch_indices(self, step: int) -> np.ndarray:
        epoch, k = divmod(step, self.steps_per_epoch)
        order = step_rng(self.run.train.seed, _ORDER, epoch).permutation(len(self.images))
        bs = self.run.train.batch_size
        return order[k * bs:(k + 1) * bs]

    def train_step(self) -> float:
        """One optimization step; returns the batch loss before the update."""
        idx = self.batch_indices(self.step)
        x, g = Tensor(self.images[idx]), self.targets[idx]
        rng = step_rng(self.run.train.seed, _DROP, self.step) if self.run.encoder.drop_path > 0 else None
        try:
            with precision(self.dtype), Tape() as tape:
                probs = self.model.forward(x, training=True, rng=rng)
                loss = dice_loss(probs, g)
            grads = tape.backward(loss)
            params = self.model.params
            updated = self.optimizer.step(
                {k: p.data for k, p in params.items()}, {k: grads[p] for k, p in params.items()})
        except PoisonedGradientError as exc:
            raise PoisonedGradientError(f"step {self.step}: {exc}", step=self.step, name=exc.name) from exc
        except NonFiniteError as exc:
            raise PoisonedGradientError(f"step {self.step}: {exc}", step=self.step) from exc
        for k, arr in updated.items():
            params[k].data = arr
        self.step += 1
        value = float(loss.data)
        self.losses.append((self.step, value))
        return value

    def checkpoint(self) -> Checkpoint:
        return Checkpoint.capture(self.run, self.model, self.optimizer, self.step, self.epoch)

    def predict(self, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
        return predict(self.model, images, batch_size)


def predict(model: Model, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Eval-mode occupancy probabilities (n, 32, 32, 32)."""
    dtype = next(iter(model.params.values())).dtype
    out = []
    for i in range(0, len(images), batch_size):
        with precision(dtype.type):
            x = Tensor(np.asarray(images[i:i + batch_size], dtype=dtype))
            out.append(model.forward(x, training=False).data)
    return np.concatenate(out) if out else np.zeros((0, 32, 32, 32), dtype=dtype)


def report_from_predictions(ids: Sequence[str], preds, gts, t: float = 0.3, d: float = 0.01) -> MetricReport:
    report = MetricReport(threshold=t, distance=d)
    for i, p, g in zip(ids, preds, gts):
        report.add(i, p, g)
    return report


def _stack(samples):
    images = np.stack([s.image for s in samples]) if samples else np.zeros((0, 3, 1, 1))
    voxels = np.stack([s.voxels for s in samples]) if samples else np.zeros((0, 32, 32, 32), bool)
    return images, voxels


@dataclass
class TrainResult:
    checkpoint: Path
    losses: list
    trainer: Trainer


def train(
    run: RunConfig,
    out_dir,
    resume: Optional[str] = None,
    on_step: Optional[Callable[[int, float], None]] = None,
    dtype=None,
) -> TrainResult:
    """Train on ``run.train.dataset``'s train split, writing checkpoints and a loss curve to ``out_dir``.

    With ``resume`` the run continues from that checkpoint's step; the loss
    file keeps records up to that step.
    """
    run.validate()
    root = Path(run.train.dataset)
    images, voxels = _stack(load_split(root, "train"))
    val = load_split(root, "val") if run.train.validate_every_epoch else []
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        ckpt = load_checkpoint(resume)
        expected = config_fingerprint(run.encoder, run.decoder)
        if ckpt.fingerprint != expected:
            raise FingerprintMismatch(ckpt.fingerprint, expected)
        trainer = Trainer.from_checkpoint(ckpt, images, voxels, run)
    else:
        trainer = Trainer(run, images, voxels, dtype=dtype)

    loss_path = out_dir / LOSS_FILE
    kept = []
    if resume is not None and loss_path.exists():
        for line in loss_path.read_text().splitlines():
            if line and not line.startswith("#") and int(line.split()[0]) <= trainer.step:
                kept.append(line + "\n")
    with open(loss_path, "w") as f:
        f.write("# step loss wall_time\n")
        f.writelines(kept)
        start = time.perf_counter()
        cadence = run.train.checkpoint_every
        while trainer.step < trainer.total_steps:
            loss = trainer.train_step()
            f.write(f"{trainer.step} {loss:.9g} {time.perf_counter() - start:.3f}\n")
            if on_step is not None:
                on_step(trainer.step, loss)
            if cadence and trainer.step % cadence == 0:
                save_checkpoint(out_dir / f"step-{trainer.step:07d}.ckpt", trainer.checkpoint())
            if val and trainer.step % trainer.steps_per_epoch == 0:
                vi, vv = _stack(val)
                rep = report_from_predictions([s.id for s in val], trainer.predict(vi), vv,
                                              run.train.threshold, run.train.distance)
                log.info("epoch %d step %d loss %.5f val iou/f %s", trainer.epoch, trainer.step, loss, rep.summary())
    final = save_checkpoint(out_dir / FINAL, trainer.checkpoint())
    return TrainResult(final, trainer.losses, trainer)


def evaluate(
    checkpoint,
    split: str = "test",
    dataset: Optional[str] = None,
    run: Optional[RunConfig] = None,
    t: Optional[float] = None,
    d: Optional[float] = None,
) -> MetricReport:
    """Eval-mode metrics over a dataset split.

    If ``run`` is given its architecture fingerprint must match the checkpoint's.
    """
    ckpt = load_checkpoint(checkpoint) if not isinstance(checkpoint, Checkpoint) else checkpoint
    if run is not None:
        actual = config_fingerprint(run.encoder, run.decoder)
        if actual != ckpt.fingerprint:
            raise FingerprintMismatch(ckpt.fingerprint, actual)
    cfg = ckpt.run.train
    samples = load_split(dataset or cfg.dataset, split)
    images, voxels = _stack(samples)
    preds = predict(ckpt.model(), images) if samples else []
    return report_from_predictions([s.id for s in samples], preds, voxels,
                                   cfg.threshold if t is None else t, cfg.distance if d is None else d)


def reconstruct(checkpoint, image_path, out_path, t: Optional[float] = None, obj_path=None) -> dict:
    """Predict one image; write the binary grid to ``out_path`` and probabilities next to it.

    Returns the written paths. ``obj_path`` additionally exports the binary grid as OBJ.
    """
    from .export import write_obj

    ckpt = load_checkpoint(checkpoint) if not isinstance(checkpoint, Checkpoint) else checkpoint
    image = load_image(image_path)
    size = ckpt.run.encoder.image_size
    if image.shape[1:] != (size, size):
        raise ConfigError(f"image is {image.shape[2]}x{image.shape[1]} but the model expects {size}x{size}")
    probs = predict(ckpt.model(), image[None])[0]
    thr = ckpt.run.train.threshold if t is None else t
    binary = probs > thr
    out_path = Path(out_path)
    prob_path = out_path.with_name(out_path.stem + ".prob" + (out_path.suffix or ".rvox"))
    save_voxels(out_path, binary)
    save_voxels_float(prob_path, probs)
    written = {"binary": out_path, "probability": prob_path}
    if obj_path is not None:
        written["obj"] = write_obj(obj_path, binary)
    return written
