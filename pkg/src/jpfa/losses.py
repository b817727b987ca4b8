"""Training objectives: deep-hashing, kernel discrepancy, cycle-GAN and the joint sum.

Codes travel as :class:`~jpfa.autodiff.Tensor` objects, a single code of
shape ``(K,)`` or a batch of codes of shape ``(N, K)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_ALPHA = 0.5
DEFAULT_BETA = 1.5


@dataclass(frozen=True)
class LossWeights:
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    # None means "2 * code length", resolved by margin_for()
    margin_m: float | None = None
    cycle_weight: float = 10.0
    identity_weight: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "cycle_weight", "identity_weight"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if self.margin_m is not None and (not np.isfinite(self.margin_m) or self.margin_m <= 0):
            raise ValueError(f"margin_m must be positive, got {self.margin_m}")

    def margin_for(self, code_length: int) -> float:
        return float(self.margin_m) if self.margin_m is not None else 2.0 * code_length


@dataclass(frozen=True)
class KernelFamily:
    """Gaussian kernels ``exp(-d^2 / (2 sigma^2))`` mixed with convex weights."""

    bandwidths: tuple[float, ...]
    weights: tuple[float, ...] = field(default=())

    def __post_init__(self):
        bw = tuple(float(b) for b in self.bandwidths)
        w = tuple(float(x) for x in self.weights) if self.weights else tuple(1.0 / len(bw) for _ in bw) if bw else ()
        object.__setattr__(self, "bandwidths", bw)
        object.__setattr__(self, "weights", w)
        if len(bw) < 1:
            raise ValueError("kernel family needs at least one kernel")
        if len(w) != len(bw):
            raise ValueError(f"{len(w)} weights for {len(bw)} kernels")
        if any(not np.isfinite(b) or b <= 0 for b in bw):
            raise ValueError(f"bandwidths must be positive, got {bw}")
        if any(x < 0 for x in w) or abs(np.sum(w) - 1.0) > 1e-9:
            raise ValueError(f"kernel weights must lie on the simplex, got {w}")

    @classmethod
    def single(cls, bandwidth: float) -> "KernelFamily":
        return cls((bandwidth,), (1.0,))


MEDIAN_MULTIPLIERS = (0.25, 0.5, 1.0, 2.0, 4.0)


def median_heuristic_family(xs: Tensor, ys: Tensor, multipliers=MEDIAN_MULTIPLIERS) -> KernelFamily:
    """Equal-weight family scaled around the median pairwise distance of ``xs`` and ``ys`` pooled.

    The bandwidths are treated as constants (no gradient flows through them).
    """
    pts = np.concatenate([np.atleast_2d(xs.data), np.atleast_2d(ys.data)])
    diff = pts[:, None, :] - pts[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    off = d[~np.eye(len(pts), dtype=bool)]
    med = float(np.median(off)) if off.size else 0.0
    if not med > 0:
        med = 1.0
    return KernelFamily(tuple(med * m for m in multipliers))


def _as_code(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _as_batch(x) -> Tensor:
    x = _as_code(x)
    if x.data.ndim == 1:
        return ad.reshape(x, (1, -1))
    if x.data.ndim != 2:
        raise ad.ShapeError(f"expected a batch of codes (N, K), got {x.shape}")
    return x


def _check_lengths(u: Tensor, v: Tensor, op: str) -> None:
    if u.shape != v.shape:
        raise ad.ShapeError(f"{op}: code shapes differ, {u.shape} vs {v.shape}")


# ---------------------------------------------------------------------------
# deep hashing


def feature_distance(u, v, squared: bool = True) -> Tensor:
    """Squared Euclidean distance between two codes (plain Euclidean if ``squared=False``)."""
    u, v = _as_code(u), _as_code(v)
    _check_lengths(u, v, "feature_distance")
    d2 = ad.sum(ad.square(ad.subtract(u, v)))
    return d2 if squared else ad.sqrt(d2)


def hashing_loss(u, v, s: int, m: float, squared: bool = True) -> Tensor:
    """Contrastive pair loss: pull genuine pairs together, push imposters past margin ``m``."""
    if m <= 0:
        raise ValueError(f"margin must be positive, got {m}")
    if s not in (0, 1):
        raise ValueError(f"relation must be 0 or 1, got {s}")
    d = feature_distance(u, v, squared=squared)
    if s == 1:
        return ad.scale(d, 0.5)
    return ad.scale(ad.relu(ad.add_scalar(ad.negate(d), m)), 0.5)


def quantization_loss(u) -> Tensor:
    """Half the L2 norm of ``|u| - 1``; zero exactly on {-1, +1} vectors."""
    u = _as_code(u)
    dev = ad.add_scalar(ad.absolute(u), -1.0)
    return ad.scale(ad.sqrt(ad.sum(ad.square(dev))), 0.5)


def _row_norms(x: Tensor) -> Tensor:
    return ad.sqrt(ad.sum(ad.square(x), axes=1))


def dhn_batch_loss(codes, relation, weights: LossWeights = LossWeights(), squared: bool = True) -> Tensor:
    """Pairwise hashing loss over ``i < j`` plus ``alpha`` times per-code quantization loss."""
    codes = _as_batch(codes)
    n, k = codes.shape
    if n < 2:
        raise ValueError(f"dhn_batch_loss needs at least 2 codes, got {n}")
    s = np.asarray(relation, dtype=np.float64)
    if s.shape != (n, n):
        raise ad.ShapeError(f"relation matrix {s.shape} does not match {n} codes")
    m = weights.margin_for(k)
    upper = np.triu(np.ones((n, n)), k=1)

    d = ad.pairwise_sq_dists(codes, codes)
    if not squared:
        # diagonal is 0, so sqrt's zero-gradient convention keeps it finite
        d = ad.sqrt(d)
    pos = ad.mul(d, Tensor(0.5 * s * upper))
    hinge = ad.relu(ad.add_scalar(ad.negate(d), m))
    neg = ad.mul(hinge, Tensor(0.5 * (1.0 - s) * upper))
    pair_term = ad.add(ad.sum(pos), ad.sum(neg))

    dev = ad.add_scalar(ad.absolute(codes), -1.0)
    quant = ad.scale(ad.sum(_row_norms(dev)), 0.5)
    return ad.add(pair_term, ad.scale(quant, weights.alpha))


# ---------------------------------------------------------------------------
# distribution alignment


def _kernel_mean(xs: Tensor, ys: Tensor, family: KernelFamily) -> Tensor:
    d2 = ad.pairwise_sq_dists(xs, ys)
    total = None
    for sigma, w in zip(family.bandwidths, family.weights):
        if w == 0:
            continue
        k = ad.exp(ad.scale(d2, -1.0 / (2.0 * sigma * sigma)))
        term = ad.scale(ad.mean(k), w)
        total = term if total is None else ad.add(total, term)
    return total


def mk_mmd(xs, ys, family: KernelFamily) -> Tensor:
    """Biased (V-statistic) squared MMD under the convex kernel mixture ``family``."""
    xs, ys = _as_batch(xs), _as_batch(ys)
    if xs.shape[0] == 0 or ys.shape[0] == 0:
        raise ValueError("mmd needs non-empty sample sets")
    if xs.shape[1] != ys.shape[1]:
        raise ad.ShapeError(f"mmd: code lengths differ, {xs.shape} vs {ys.shape}")
    if not isinstance(family, KernelFamily):
        raise TypeError("family must be a KernelFamily")
    kxx = _kernel_mean(xs, xs, family)
    kyy = _kernel_mean(ys, ys, family)
    kxy = _kernel_mean(xs, ys, family)
    return ad.add(ad.subtract(kxx, ad.scale(kxy, 2.0)), kyy)


def mmd(xs, ys, kernel: KernelFamily | float) -> Tensor:
    """Single-kernel squared MMD; ``kernel`` is a one-kernel family or a bandwidth."""
    if not isinstance(kernel, KernelFamily):
        kernel = KernelFamily.single(float(kernel))
    if len(kernel.bandwidths) != 1:
        raise ValueError("mmd takes a single-bandwidth family; use mk_mmd for mixtures")
    return mk_mmd(xs, ys, kernel)


def consistency_loss(c_s, c_f) -> Tensor:
    """Mean absolute difference between two heads' codes (over entries and batch items)."""
    c_s, c_f = _as_code(c_s), _as_code(c_f)
    _check_lengths(c_s, c_f, "consistency_loss")
    return ad.mean(ad.absolute(ad.subtract(c_s, c_f)))


# ---------------------------------------------------------------------------
# pixel-level alignment


def identity_loss(us, uf) -> Tensor:
    """Sum over pairs of the Euclidean distance between source and fake codes."""
    us, uf = _as_batch(us), _as_batch(uf)
    _check_lengths(us, uf, "identity_loss")
    return ad.sum(_row_norms(ad.subtract(us, uf)))


def gan_losses(d_real, d_fake) -> tuple[Tensor, Tensor]:
    """Least-squares adversarial terms ``(generator, discriminator)``.

    The discriminator term is ``mean((d_real - 1)^2) + mean(d_fake^2)``, the
    generator term ``mean((d_fake - 1)^2)``. For the generator update pass
    ``d_fake`` still attached to the generator graph; for the discriminator
    update pass a detached fake batch.
    """
    d_real, d_fake = _as_code(d_real), _as_code(d_fake)
    if not (np.all(np.isfinite(d_real.data)) and np.all(np.isfinite(d_fake.data))):
        raise ValueError("discriminator outputs must be finite")
    gen = generator_gan_term(d_fake)
    disc = ad.add(ad.mean(ad.square(ad.add_scalar(d_real, -1.0))), ad.mean(ad.square(d_fake)))
    return gen, disc


def generator_gan_term(d_fake) -> Tensor:
    """``mean((d_fake - 1)^2)``: the generator's side of the least-squares game."""
    return ad.mean(ad.square(ad.add_scalar(_as_code(d_fake), -1.0)))


def cycle_loss(x, x_rec) -> Tensor:
    """Mean absolute pixel difference between an image batch and its reconstruction."""
    x, x_rec = _as_code(x), _as_code(x_rec)
    if x.shape != x_rec.shape:
        raise ad.ShapeError(f"cycle_loss: shape mismatch {x.shape} vs {x_rec.shape}")
    return ad.mean(ad.absolute(ad.subtract(x_rec, x)))


def _scalar(v) -> Tensor:
    return v if isinstance(v, Tensor) else Tensor(float(v))


def pixel_objective(gan_xy, gan_yx, cyc, ident, weights: LossWeights = LossWeights()) -> Tensor:
    """Generator-side pixel objective: both adversarial terms, weighted cycle and identity terms."""
    gan_xy, gan_yx, cyc, ident = map(_scalar, (gan_xy, gan_yx, cyc, ident))
    total = ad.add(gan_xy, gan_yx)
    total = ad.add(total, ad.scale(cyc, weights.cycle_weight))
    return ad.add(total, ad.scale(ident, weights.identity_weight))


def joint_objective(dhn, pixel, mkmmd_ts, mkmmd_tf, consis, weights: LossWeights = LossWeights()) -> Tensor:
    """Overall objective: hashing + pixel + both discrepancies + beta * consistency."""
    dhn, pixel, mkmmd_ts, mkmmd_tf, consis = map(_scalar, (dhn, pixel, mkmmd_ts, mkmmd_tf, consis))
    total = ad.add(ad.add(dhn, pixel), ad.add(mkmmd_ts, mkmmd_tf))
    return ad.add(total, ad.scale(consis, weights.beta))
