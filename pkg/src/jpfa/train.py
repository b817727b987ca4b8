"""Optimisation loops: source pretraining, pixel-level and feature-level alignment.

Every loop is single threaded and seeded from its :class:`TrainConfig`, so a
(config, data) pair always produces the same weights. The pixel and feature
phases only ever touch target *images*; asking a target split for labels
raises :class:`~jpfa.data.ProtocolError`.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import Tensor
from .data import DatasetSplit, ProtocolError, SampleRecord, build_relation_matrix
from .losses import KernelFamily, LossWeights
from .models import DEFAULT_CODE_LENGTH, Discriminator, Generator, HashHead, Module, Trunk

log = logging.getLogger(__name__)


class Adam:
    """Adaptive-moment optimiser with bias correction.

    Moments are kept per parameter position, so :meth:`apply` must always be
    called with the same parameter list.
    """

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m: list[np.ndarray] = []
        self.v: list[np.ndarray] = []

    def apply(self, params: list[Tensor], grads: list[np.ndarray | None]) -> None:
        if len(params) != len(grads):
            raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]
        elif len(self.m) != len(params):
            raise ValueError("parameter list changed between steps")
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step
        c2 = 1.0 - b2**self.step
        for i, (p, g) in enumerate(zip(params, grads)):
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.shape:
                raise ad.ShapeError(f"gradient {g.shape} does not match parameter {p.shape}")
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            if self.lr == 0.0:
                continue
            p.data = p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)

    def step_module(self, *modules: Module) -> None:
        params = [p for m in modules for p in m.parameters()]
        self.apply(params, [p.grad for p in params])


@dataclass
class TrainConfig:
    phase: str = "pretrain"
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 42
    weights: LossWeights = field(default_factory=LossWeights)
    # None: median-heuristic family rebuilt per batch
    kernel: KernelFamily | None = None
    code_length: int = DEFAULT_CODE_LENGTH
    adam_beta1: float = 0.9
    # per-pair discrepancy switches (ablation toggles)
    mmd_ts_weight: float = 1.0
    mmd_tf_weight: float = 1.0
    squared_distance: bool = True
    mmd_on: str = "codes"  # or "pre_tanh"

    def __post_init__(self):
        if self.phase not in ("pretrain", "pixel", "feature"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.epochs < 1 or self.batch_size < 2 or self.code_length < 1:
            raise ValueError("epochs, batch_size and code_length must be positive (batch_size >= 2)")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.mmd_on not in ("codes", "pre_tanh"):
            raise ValueError(f"mmd_on must be 'codes' or 'pre_tanh', got {self.mmd_on!r}")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.kernel, dict):
            self.kernel = KernelFamily(tuple(self.kernel["bandwidths"]), tuple(self.kernel.get("weights", ())))

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["weights"] = asdict(self.weights)
        d["kernel"] = None if self.kernel is None else {"bandwidths": list(self.kernel.bandwidths),
                                                        "weights": list(self.kernel.weights)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


class TrainingLog:
    """Rows of ``(phase, epoch, batch, term, value)``."""

    columns = ("phase", "epoch", "batch", "term", "value")

    def __init__(self):
        self.rows: list[tuple] = []

    def add(self, phase: str, epoch: int, batch: int, **terms: float) -> None:
        for name, value in terms.items():
            self.rows.append((phase, epoch, batch, name, float(value)))

    def epoch_means(self, phase: str, term: str) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for ph, ep, _, name, value in self.rows:
            if ph == phase and name == term:
                by_epoch.setdefault(ep, []).append(value)
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for ph, ep, b, name, value in self.rows:
                w.writerow([ph, ep, b, name, repr(value)])


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # a trailing batch of one has no pairs; fold it into the previous batch
    if len(out) > 1 and len(out[-1]) < 2:
        last = out.pop()
        out[-1] = np.concatenate([out[-1], last])
    return out


def _detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


def encode(trunk: Trunk, head: HashHead, images: np.ndarray, chunk: int = 100) -> np.ndarray:
    """Real-valued codes for an image stack, evaluated without a graph."""
    out = []
    with ad.no_grad():
        for i in range(0, len(images), chunk):
            out.append(head(trunk(Tensor(images[i:i + chunk]))).data)
    return np.concatenate(out) if out else np.zeros((0, head.code_length))


def trunk_features(trunk: Trunk, images: np.ndarray, chunk: int = 100) -> np.ndarray:
    out = []
    with ad.no_grad():
        for i in range(0, len(images), chunk):
            out.append(trunk(Tensor(images[i:i + chunk])).data)
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# phase 1: source pretraining


def pretrain_dhn(source: DatasetSplit, cfg: TrainConfig, log_: TrainingLog | None = None) -> tuple[Trunk, HashHead]:
    """Train trunk + source head on labelled source data with the hashing objective, then freeze the trunk."""
    if not source.labels_visible:
        raise ProtocolError("pretraining needs labelled source data")
    labels = source.labels
    images = source.images
    seeds = np.random.SeedSequence([cfg.seed, 1]).generate_state(3)
    trunk = Trunk(seed=int(seeds[0]))
    head = HashHead(cfg.code_length, seed=int(seeds[1]), role="source")
    opt = Adam(cfg.lr, beta1=cfg.adam_beta1)
    rng = np.random.default_rng(int(seeds[2]))
    for epoch in range(cfg.epochs):
        for b, idx in enumerate(_batches(len(images), cfg.batch_size, rng)):
            codes = head(trunk(Tensor(images[idx])))
            loss = losses.dhn_batch_loss(codes, build_relation_matrix(labels[idx]), cfg.weights,
                                         squared=cfg.squared_distance)
            trunk.zero_grad()
            head.zero_grad()
            ad.backward(loss)
            opt.step_module(trunk, head)
            if log_ is not None:
                log_.add("pretrain", epoch, b, dhn=loss.item())
    trunk.freeze()
    return trunk, head


# ---------------------------------------------------------------------------
# phase 2: pixel-level alignment


@dataclass
class PixelModels:
    g_xy: Generator
    g_yx: Generator
    d_x: Discriminator
    d_y: Discriminator


def _frozen_copy(head: HashHead) -> HashHead:
    copy = HashHead(head.code_length, role=head.role)
    copy.load_state_dict(head.state_dict())
    for p in copy.parameters():
        p.requires_grad = False
    return copy


def train_pixel_alignment(source: DatasetSplit, target: DatasetSplit, trunk: Trunk, head: HashHead,
                          cfg: TrainConfig, log_: TrainingLog | None = None) -> tuple[PixelModels, DatasetSplit]:
    """Unpaired source->target translation with an identity term through the frozen pretrained hashing net.

    Returns the four networks and a fake split: every source image translated
    into target style, carrying its source label.
    """
    if target.role != "target" or target.labels_visible:
        raise ProtocolError("pixel alignment requires a target split with hidden labels")
    trunk_sum = trunk.checksum()
    dhn_head = _frozen_copy(head)
    w = cfg.weights
    seeds = np.random.SeedSequence([cfg.seed, 2]).generate_state(6)
    models = PixelModels(
        g_xy=Generator(seed=int(seeds[0]), direction="X->Y"),
        g_yx=Generator(seed=int(seeds[1]), direction="Y->X"),
        d_x=Discriminator(seed=int(seeds[2]), domain="X"),
        d_y=Discriminator(seed=int(seeds[3]), domain="Y"),
    )
    opt_g = Adam(cfg.lr, beta1=cfg.adam_beta1)
    opt_d = Adam(cfg.lr, beta1=cfg.adam_beta1)
    rng_x = np.random.default_rng(int(seeds[4]))
    rng_y = np.random.default_rng(int(seeds[5]))
    xs_all, ys_all = source.images, target.images
    gens = (models.g_xy, models.g_yx)
    discs = (models.d_x, models.d_y)

    for epoch in range(cfg.epochs):
        x_batches = _batches(len(xs_all), cfg.batch_size, rng_x)
        y_batches = _batches(len(ys_all), cfg.batch_size, rng_y)
        for b, (ix, iy) in enumerate(zip(x_batches, y_batches)):
            x, y = Tensor(xs_all[ix]), Tensor(ys_all[iy])

            fake_y = models.g_xy(x)
            fake_x = models.g_yx(y)
            rec_x = models.g_yx(fake_y)
            rec_y = models.g_xy(fake_x)
            gan_xy = losses.generator_gan_term(models.d_y(fake_y))
            gan_yx = losses.generator_gan_term(models.d_x(fake_x))
            cyc = ad.add(losses.cycle_loss(x, rec_x), losses.cycle_loss(y, rec_y))
            with ad.no_grad():
                u_src = dhn_head(trunk(x))
            ident = losses.identity_loss(u_src, dhn_head(trunk(fake_y)))
            l_p = losses.pixel_objective(gan_xy, gan_yx, cyc, ident, w)
            for m in gens + discs:
                m.zero_grad()
            ad.backward(l_p)
            opt_g.step_module(*gens)

            _, disc_y = losses.gan_losses(models.d_y(y), models.d_y(_detach(fake_y)))
            _, disc_x = losses.gan_losses(models.d_x(x), models.d_x(_detach(fake_x)))
            l_d = ad.add(disc_x, disc_y)
            for m in discs:
                m.zero_grad()
            ad.backward(l_d)
            opt_d.step_module(*discs)

            if log_ is not None:
                log_.add("pixel", epoch, b, gan_xy=gan_xy.item(), gan_yx=gan_yx.item(), cyc=cyc.item(),
                         ident=ident.item(), pixel=l_p.item(), disc=l_d.item())

    if trunk.checksum() != trunk_sum:
        raise RuntimeError("trunk weights changed during pixel alignment")
    return models, translate_split(models.g_xy, source)


def translate_split(gen: Generator, source: DatasetSplit, chunk: int = 50) -> DatasetSplit:
    """Fake split: ``gen`` applied to every source image, labels copied from the source."""
    images = source.images
    outs = []
    with ad.no_grad():
        for i in range(0, len(images), chunk):
            outs.append(gen(Tensor(images[i:i + chunk])).data[:, 0])
    fake_imgs = np.concatenate(outs) if outs else np.zeros((0,) + images.shape[2:])
    recs = [SampleRecord(img, r.label, "fake", r.index, {"from": r.domain})
            for img, r in zip(fake_imgs, source.records)]
    return DatasetSplit(recs, role="fake", labels_visible=True, domain="fake")


def substitute_fake(source: DatasetSplit) -> DatasetSplit:
    """Fake split made of untranslated source copies (used when the pixel phase is skipped)."""
    recs = [SampleRecord(r.image, r.label, "fake", r.index, {"from": r.domain}) for r in source.records]
    return DatasetSplit(recs, role="fake", labels_visible=True, domain="fake")


# ---------------------------------------------------------------------------
# phase 3: feature-level alignment


def _head_codes(head: HashHead, feats: Tensor, want_pre: bool) -> tuple[Tensor, Tensor]:
    code, pre = head.forward_with_pre(feats)
    return code, (pre if want_pre else code)


def train_feature_alignment(source: DatasetSplit, fake: DatasetSplit, target: DatasetSplit, trunk: Trunk,
                            cfg: TrainConfig, init_head: HashHead | None = None, pixel_value: float = 0.0,
                            log_: TrainingLog | None = None) -> tuple[HashHead, HashHead]:
    """Train the source head F_S and fake head F_F on top of the frozen trunk.

    Per batch: hashing loss on source codes (F_S) and fake codes (F_F),
    discrepancy between target and source codes under F_S, between target and
    fake codes under F_F, and the consistency of F_S and F_F on target images.
    ``pixel_value`` is the finished pixel phase's objective, logged so the
    per-batch total matches the joint objective.
    """
    if target.role != "target" or target.labels_visible:
        raise ProtocolError("feature alignment requires a target split with hidden labels")
    if not (source.labels_visible and fake.labels_visible):
        raise ProtocolError("source and fake splits must be labelled")
    if len(source) != len(fake):
        raise ValueError("fake split must pair one-to-one with the source split")
    trunk_sum = trunk.checksum()
    seeds = np.random.SeedSequence([cfg.seed, 3]).generate_state(4)
    f_s = HashHead(cfg.code_length, seed=int(seeds[0]), role="source")
    f_f = HashHead(cfg.code_length, seed=int(seeds[1]), role="fake")
    # F_S continues from the pretrained source head; F_F starts from its own seeded init
    if init_head is not None:
        f_s.load_state_dict(init_head.state_dict())

    # the trunk is frozen, so its features are computed once
    feat_s = trunk_features(trunk, source.images)
    feat_f = trunk_features(trunk, fake.images)
    feat_t = trunk_features(trunk, target.images)
    lab_s, lab_f = source.labels, fake.labels
    w = cfg.weights
    pre = cfg.mmd_on == "pre_tanh"
    opt = Adam(cfg.lr, beta1=cfg.adam_beta1)
    rng_s = np.random.default_rng(int(seeds[2]))
    rng_t = np.random.default_rng(int(seeds[3]))

    for epoch in range(cfg.epochs):
        s_batches = _batches(len(feat_s), cfg.batch_size, rng_s)
        for b, idx in enumerate(s_batches):
            tdx = rng_t.choice(len(feat_t), size=len(idx), replace=False)
            cs, ms = _head_codes(f_s, Tensor(feat_s[idx]), pre)
            cf, mf = _head_codes(f_f, Tensor(feat_f[idx]), pre)
            ft = Tensor(feat_t[tdx])
            ts, mts = _head_codes(f_s, ft, pre)
            tf, mtf = _head_codes(f_f, ft, pre)

            dhn_s = losses.dhn_batch_loss(cs, build_relation_matrix(lab_s[idx]), w, cfg.squared_distance)
            dhn_f = losses.dhn_batch_loss(cf, build_relation_matrix(lab_f[idx]), w, cfg.squared_distance)
            dhn = ad.add(dhn_s, dhn_f)
            zero = Tensor(0.0)
            mm_ts = zero
            if cfg.mmd_ts_weight:
                fam = cfg.kernel or losses.median_heuristic_family(mts, ms)
                mm_ts = ad.scale(losses.mk_mmd(mts, ms, fam), cfg.mmd_ts_weight)
            mm_tf = zero
            if cfg.mmd_tf_weight:
                fam = cfg.kernel or losses.median_heuristic_family(mtf, mf)
                mm_tf = ad.scale(losses.mk_mmd(mtf, mf, fam), cfg.mmd_tf_weight)
            consis = losses.consistency_loss(ts, tf)
            total = losses.joint_objective(dhn, Tensor(pixel_value), mm_ts, mm_tf, consis, w)

            f_s.zero_grad()
            f_f.zero_grad()
            ad.backward(total)
            opt.step_module(f_s, f_f)
            if log_ is not None:
                log_.add("feature", epoch, b, dhn_source=dhn_s.item(), dhn_fake=dhn_f.item(), dhn=dhn.item(),
                         pixel=pixel_value, mkmmd_ts=mm_ts.item(), mkmmd_tf=mm_tf.item(),
                         consis=consis.item(), total=total.item())

    if trunk.checksum() != trunk_sum:
        raise RuntimeError("trunk weights changed during feature alignment")
    return f_s, f_f


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)
