"""The generator's loss suite and the two discriminator objectives.

All functions are pure and differentiable: they accept engine Tensors
(single images (C,H,W) or batches (N,C,H,W)) and return scalar Tensors,
so the same code serves training, reporting and gradient verification.
Every log() is clamped by LOG_EPS; L1 terms are means, not sums, so the
default weights keep their meaning across image sizes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields

from . import defaults, engine
from .engine import ShapeError, as_tensor


@dataclass
class LossWeights:
    lambda1: float = defaults.LAMBDA_ADV_PIXEL      # pixel-level adversarial
    lambda2: float = defaults.LAMBDA_CONS_FEATURE   # feature reconstruction
    lambda3: float = defaults.LAMBDA_ADV_FEATURE    # feature-level adversarial
    w_edge: float = defaults.WEIGHT_EDGE
    w_sym: float = defaults.WEIGHT_SYM

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be nonnegative")


@dataclass
class LossReport:
    """Per-iteration loss values; cons_p and total_G are the weighted sums."""

    pxl: float = 0.0
    edg: float = 0.0
    sym: float = 0.0
    cons_p: float = 0.0
    adv_p: float = 0.0
    cons_f: float = 0.0
    adv_f: float = 0.0
    total_G: float = 0.0
    loss_Dp: float = 0.0
    loss_Df: float = 0.0

    FIELDS = ("pxl", "edg", "sym", "cons_p", "adv_p", "cons_f", "adv_f",
              "total_G", "loss_Dp", "loss_Df")

    def row(self):
        return [getattr(self, name) for name in self.FIELDS]


class LossLog:
    """Appends LossReport rows to a CSV training log, 9 significant digits."""

    HEADER = ("iteration",) + LossReport.FIELDS

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(self.HEADER)

    def append(self, iteration, report: LossReport):
        self._writer.writerow([iteration] + [f"{v:.9g}" for v in report.row()])

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def loss_pxl(gen, gt):
    """Mean absolute pixel difference between synthesized and ground truth."""
    gen, gt = as_tensor(gen), as_tensor(gt)
    _check_same_shape(gen, gt, "pixel loss")
    return engine.tmean(engine.tabs(gen - gt))


def loss_edge(gen, gt):
    """First-order loss: the images' gradient magnitudes should agree.

    Horizontal terms compare |x[i,j+1]-x[i,j]| between the two images,
    vertical terms |x[i+1,j]-x[i,j]|; positions without a right/lower
    neighbour are skipped. Normalized by h*w per channel (and averaged over
    channels and batch), not by the number of valid positions.
    """
    gen, gt = as_tensor(gen), as_tensor(gt)
    _check_same_shape(gen, gt, "edge loss")
    h, w = gen.shape[-2], gen.shape[-1]
    if h < 2 or w < 2:
        raise ShapeError(f"edge loss needs at least 2x2 images, got {h}x{w}")

    def grad_h(x):
        return engine.tabs(x[..., :, 1:] - x[..., :, :-1])

    def grad_v(x):
        return engine.tabs(x[..., 1:, :] - x[..., :-1, :])

    terms = engine.tsum(engine.tabs(grad_h(gen) - grad_h(gt))) + engine.tsum(
        engine.tabs(grad_v(gen) - grad_v(gt))
    )
    n_images = 1
    for d in gen.shape[:-2]:
        n_images *= d
    return engine.scale(terms, 1.0 / (n_images * h * w))


def loss_sym(gen):
    """Left-right asymmetry: mean |x[i,j] - x[i,w-1-j]| over mirror pairs.

    Each pair is counted once (columns j < w/2 against their mirrors), with
    the 1/(h*w/2) normalizer per channel.
    """
    gen = as_tensor(gen)
    w = gen.shape[-1]
    if w % 2:
        raise ShapeError(f"symmetry loss needs even width, got {w}")
    left = gen[..., :, : w // 2]
    right = engine.flip(gen, -1)[..., :, : w // 2]
    return engine.tmean(engine.tabs(left - right))


def loss_adv_pixel_G(dp_map, eps=defaults.LOG_EPS):
    """Generator-side pixel adversarial loss: mean of -log(D_p map)."""
    dp_map = as_tensor(dp_map)
    return engine.tmean(-engine.tlog(dp_map + eps))


def loss_adv_feature_G(df_out, eps=defaults.LOG_EPS):
    """Generator-side feature adversarial loss: -log D_f(F(G(x)))."""
    df_out = as_tensor(df_out)
    return engine.tmean(-engine.tlog(df_out + eps))


def loss_cons_feature(f_gen, f_gt):
    """Mean absolute difference between synthesized and target features."""
    f_gen, f_gt = as_tensor(f_gen), as_tensor(f_gt)
    _check_same_shape(f_gen, f_gt, "feature reconstruction loss")
    return engine.tmean(engine.tabs(f_gen - f_gt))


def loss_D_p(dp_real, dp_fake, eps=defaults.LOG_EPS):
    """Patch discriminator objective (negated for minimization)."""
    dp_real, dp_fake = as_tensor(dp_real), as_tensor(dp_fake)
    return -(engine.tmean(engine.tlog(dp_real + eps))
             + engine.tmean(engine.tlog((1.0 - dp_fake) + eps)))


def loss_D_f(df_real, df_fake, eps=defaults.LOG_EPS):
    """Feature discriminator objective (negated for minimization)."""
    df_real, df_fake = as_tensor(df_real), as_tensor(df_fake)
    return -(engine.tmean(engine.tlog(df_real + eps))
             + engine.tmean(engine.tlog((1.0 - df_fake) + eps)))


def compose_total(pxl, edg, sym, adv_p, cons_f, adv_f, weights: LossWeights):
    """Weighted generator objective; works on floats and on Tensors alike."""
    cons_p = pxl + weights.w_edge * edg + weights.w_sym * sym
    return cons_p + weights.lambda1 * adv_p + weights.lambda2 * cons_f + weights.lambda3 * adv_f


def loss_total_G(parts: LossReport, weights: LossWeights):
    """Composite generator loss recomputed from a report's raw terms."""
    return compose_total(parts.pxl, parts.edg, parts.sym, parts.adv_p,
                         parts.cons_f, parts.adv_f, weights)
