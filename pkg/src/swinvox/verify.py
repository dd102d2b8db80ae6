"""Full-model gradient check against central finite differences (64-bit)."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .data.shapes import ShapeSpec, gen_shape
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .errors import OccupancyError
from .metrics import dice_loss
from .model import Model
from .tensor import Tensor, check_entries, precision

TOLERANCE = 1e-3
JITTER = 0.2


def module_of(name: str) -> str:
    return ".".join(name.split(".")[:2])


def tiny_configs(attention: str = "v2-cosine"):
    """8x8-pixel encoder with every stage exercising (shifted) windows, and a slim decoder."""
    enc = EncoderConfig(image_size=8, patch_size=1, embed_dim=8, depths=(2, 2, 2, 2), heads=(1, 2, 2, 4),
                        window_size=2, attention=attention, cpb_hidden=16)
    dec = DecoderConfig(seed_channels=4, channels=(4, 4, 2))
    return enc, dec


def sample_entries(model: Model, n: int, rng: np.random.Generator) -> list:
    """Up to ``n`` (param name, flat index) pairs covering every module at least once."""
    by_module = OrderedDict()
    for name in model.params:
        by_module.setdefault(module_of(name), []).append(name)
    picks = []
    modules = list(by_module)
    for i in range(n):
        names = by_module[modules[i % len(modules)]]
        name = names[int(rng.integers(len(names)))]
        picks.append((name, int(rng.integers(model.params[name].size))))
    return picks


def _is_norm_affine(name: str) -> bool:
    parts = name.split(".")
    return parts[-1] in ("weight", "bias") and (parts[-2].startswith("norm") or parts[-2] == "bn")


def _target(seed: int) -> np.ndarray:
    for attempt in range(100):
        try:
            return gen_shape(ShapeSpec.random(seed * 1000 + attempt))
        except OccupancyError:
            continue
    raise RuntimeError("no target shape")


@dataclass
class GradcheckReport:
    checks: list
    tolerance: float = TOLERANCE
    per_module: "OrderedDict[str, float]" = field(default_factory=OrderedDict)

    def __post_init__(self):
        for c in self.checks:
            m = module_of(c.name)
            self.per_module[m] = max(self.per_module.get(m, 0.0), c.rel_error)

    @property
    def max_error(self) -> float:
        return max((c.rel_error for c in self.checks), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    @property
    def names(self) -> list:
        return [c.name for c in self.checks]

    def failures(self) -> list:
        return [c for c in self.checks if c.rel_error >= self.tolerance]

    def to_text(self) -> str:
        lines = [f"{'parameter':<44} {'index':<18} {'analytic':>13} {'numeric':>13} {'rel_err':>10}"]
        for c in self.checks:
            lines.append(f"{c.name:<44} {str(c.index):<18} {c.analytic:13.6e} {c.numeric:13.6e} {c.rel_error:10.3e}")
        lines.append("")
        lines.append(f"{'module':<20} {'max_rel_err':>12}")
        for m, e in self.per_module.items():
            lines.append(f"{m:<20} {e:12.3e}")
        status = "PASS" if self.passed else "FAIL"
        lines.append(f"{status} max_rel_err={self.max_error:.3e} tolerance={self.tolerance:g} entries={len(self.checks)}")
        return "\n".join(lines) + "\n"


def gradcheck(
    encoder: EncoderConfig,
    decoder: DecoderConfig,
    seed: int = 0,
    n_entries: int = 50,
    h: float = 1e-4,
    batch: int = 1,
    tolerance: float = TOLERANCE,
) -> GradcheckReport:
    """Dice loss of the eval-mode model vs. central differences on sampled parameter entries."""
    rng = np.random.default_rng([seed, 99])
    with precision(np.float64):
        model = Model(encoder, decoder, rng=np.random.default_rng(seed), dtype=np.float64)
        # Jitter normalization affines: zero-initialized post-norm gains would
        # otherwise leave whole branches with exactly zero gradient.
        for name, p in model.params.items():
            if _is_norm_affine(name):
                p.data = p.data + rng.normal(0.0, JITTER, size=p.shape)
        image = Tensor(rng.random((batch, 3, encoder.image_size, encoder.image_size)))
        target = np.stack([_target(seed + i) for i in range(batch)]).astype(np.float64)
        entries = sample_entries(model, n_entries, rng)
        names = list(model.params)
        params = [model.params[k] for k in names]
        position = {k: i for i, k in enumerate(names)}

        def f():
            return dice_loss(model.forward(image, training=False), target)

        checks = check_entries(f, params, entries=[(position[k], j) for k, j in entries], h=h, names=names)
    return GradcheckReport(checks, tolerance)
