"""Synthetic palm-like identity textures, acquisition styles, and dataset splits.

Each identity is a seeded set of dark principal-line strokes over a sum of
oriented sinusoid ridges. A sample is that texture rendered under a small
random shift/rotation; a :class:`DomainStyle` then mimics one acquisition
device or illumination. All randomness is derived from
``(master seed, identity, sample, style index)`` so rendering order never
matters.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

IMAGE_SIZE = 32

log = logging.getLogger(__name__)


class ProtocolError(RuntimeError):
    """Raised when hidden (target) labels are requested during training."""


# ---------------------------------------------------------------------------
# identities


@dataclass(frozen=True)
class IdentitySpec:
    seed: int
    # each line: (3 control points as (x, y) pairs, width, darkness)
    lines: tuple = ()
    # each ridge: (frequency, orientation, phase, amplitude)
    ridges: tuple = ()

    @classmethod
    def from_seed(cls, seed: int) -> "IdentitySpec":
        rng = np.random.default_rng(seed)
        lines = []
        for _ in range(rng.integers(3, 6)):
            pts = rng.uniform(-0.85, 0.85, size=(3, 2))
            lines.append((tuple(map(tuple, pts)), float(rng.uniform(0.05, 0.09)), float(rng.uniform(0.7, 1.1))))
        ridges = []
        for _ in range(rng.integers(4, 9)):
            ridges.append((
                float(rng.uniform(1.5, 5.0)),
                float(rng.uniform(0.0, math.pi)),
                float(rng.uniform(0.0, 2 * math.pi)),
                float(rng.uniform(0.08, 0.25)),
            ))
        return cls(seed=int(seed), lines=tuple(lines), ridges=tuple(ridges))


def _grid(size: int = IMAGE_SIZE) -> tuple[np.ndarray, np.ndarray]:
    # pixel centres in [-1, 1]
    c = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    v, u = np.meshgrid(c, c, indexing="ij")
    return u, v


def _bezier_points(ctrl, n: int = 40) -> np.ndarray:
    p0, p1, p2 = (np.asarray(p) for p in ctrl)
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2


def render_identity(spec: IdentitySpec, jitter_seed: int | None = None, size: int = IMAGE_SIZE) -> np.ndarray:
    """Render ``spec`` as a ``size x size`` image in [-1, 1].

    ``jitter_seed`` draws a shift of at most 2 px and a rotation of at most 5
    degrees; ``None`` renders the canonical pose.
    """
    u, v = _grid(size)
    if jitter_seed is not None:
        rng = np.random.default_rng(jitter_seed)
        px = 2.0 / size
        tx, ty = rng.uniform(-2 * px, 2 * px, size=2)
        theta = math.radians(rng.uniform(-5.0, 5.0))
        ct, st = math.cos(theta), math.sin(theta)
        # inverse map: sample the texture where this pixel came from
        u0, v0 = u - tx, v - ty
        u, v = ct * u0 + st * v0, -st * u0 + ct * v0

    img = np.zeros_like(u)
    for freq, orient, phase, amp in spec.ridges:
        img += amp * np.cos(math.pi * freq * (u * math.cos(orient) + v * math.sin(orient)) + phase)
    pix = np.stack([u.ravel(), v.ravel()], axis=1)
    for ctrl, width, dark in spec.lines:
        pts = _bezier_points(ctrl)
        d2 = ((pix[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2).min(axis=1)
        img -= dark * np.exp(-d2 / (2 * width * width)).reshape(u.shape)
    return np.clip(img, -1.0, 1.0)


# ---------------------------------------------------------------------------
# styles


@dataclass(frozen=True)
class DomainStyle:
    name: str
    gradient_angle: float = 0.0
    gradient_magnitude: float = 0.0
    gamma: float = 1.0
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0
    contrast: float = 1.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not self.contrast > 0:
            raise ValueError(f"contrast must be positive, got {self.contrast}")
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise ValueError("blur and noise sigmas must be non-negative")


IDENTITY_STYLE = DomainStyle("identity")
FLASHLIKE = DomainStyle("flashlike", contrast=1.3, noise_sigma=0.02)
NATURALIKE = DomainStyle(
    "naturalike",
    gradient_angle=math.radians(35.0),
    gradient_magnitude=0.45,
    gamma=1.4,
    blur_sigma=0.8,
    noise_sigma=0.05,
    contrast=0.8,
)
DEFAULT_STYLES = (FLASHLIKE, NATURALIKE)


def apply_style(image: np.ndarray, style: DomainStyle, noise_seed: int | None = None) -> np.ndarray:
    """contrast -> gamma -> brightness gradient -> blur -> noise -> clip to [-1, 1]."""
    x = np.array(image, dtype=np.float64)
    if style.contrast != 1.0:
        x = np.clip(x * style.contrast, -1.0, 1.0)
    if style.gamma != 1.0:
        x = 2.0 * ((x + 1.0) / 2.0) ** style.gamma - 1.0
    if style.gradient_magnitude != 0.0:
        u, v = _grid(x.shape[-1])
        x = x + style.gradient_magnitude * (u * math.cos(style.gradient_angle) + v * math.sin(style.gradient_angle))
    if style.blur_sigma > 0.0:
        x = gaussian_filter(x, style.blur_sigma, mode="reflect")
    if style.noise_sigma > 0.0:
        x = x + np.random.default_rng(noise_seed).normal(0.0, style.noise_sigma, size=x.shape)
    return np.clip(x, -1.0, 1.0)


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SampleRecord:
    image: np.ndarray
    label: int
    domain: str
    index: int
    source: dict = field(default_factory=dict)


@dataclass
class DatasetSplit:
    records: list
    role: str = "source"
    labels_visible: bool = True
    domain: str = ""

    def __post_init__(self):
        if self.role not in ("source", "target", "fake"):
            raise ValueError(f"unknown split role {self.role!r}")
        if self.role == "target" and self.labels_visible:
            raise ProtocolError("target splits must hide their labels")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def images(self) -> np.ndarray:
        """Stacked images, shape (N, 1, 32, 32)."""
        if not self.records:
            return np.zeros((0, 1, IMAGE_SIZE, IMAGE_SIZE))
        return np.stack([r.image for r in self.records])[:, None, :, :]

    @property
    def labels(self) -> np.ndarray:
        if not self.labels_visible:
            raise ProtocolError(f"labels of the {self.role} split are hidden during training")
        return np.array([r.label for r in self.records], dtype=np.int64)

    def evaluation_labels(self) -> np.ndarray:
        """Labels for scoring only; training code must never call this."""
        return np.array([r.label for r in self.records], dtype=np.int64)

    def as_role(self, role: str) -> "DatasetSplit":
        return DatasetSplit(list(self.records), role=role, labels_visible=role != "target", domain=self.domain)

    def with_labels(self, labels) -> "DatasetSplit":
        labels = list(labels)
        if len(labels) != len(self.records):
            raise ValueError("label count does not match record count")
        recs = [replace(r, label=int(lab)) for r, lab in zip(self.records, labels)]
        return DatasetSplit(recs, role=self.role, labels_visible=self.labels_visible, domain=self.domain)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for r in self.records:
            h.update(np.asarray(r.image, dtype="<f8").tobytes())
            h.update(str((r.label, r.domain, r.index)).encode())
        return h.hexdigest()

    def manifest(self) -> dict:
        return {
            "role": self.role,
            "domain": self.domain,
            "labels_visible": self.labels_visible,
            "checksum": self.checksum(),
            "records": [
                {"label": int(r.label), "domain": r.domain, "index": int(r.index), **r.source}
                for r in self.records
            ],
        }


def _identity_seed(master_seed: int, identity: int) -> int:
    return int(np.random.SeedSequence([master_seed, identity, 0]).generate_state(1, np.uint64)[0])


def _sample_seeds(master_seed: int, identity: int, sample: int, style_index: int) -> tuple[int, int]:
    jitter, noise = np.random.SeedSequence([master_seed, identity, sample, style_index + 1]).generate_state(2, np.uint64)
    return int(jitter), int(noise)


def generate_benchmark(n_identities: int = 20, n_per_identity: int = 10, styles=DEFAULT_STYLES,
                       master_seed: int = 42) -> dict[str, DatasetSplit]:
    """One labelled split per style; identity ``i`` shares its texture spec across styles."""
    if n_identities < 2 or n_per_identity < 2:
        raise ValueError("need at least 2 identities and 2 samples per identity")
    names = [s.name for s in styles]
    if len(set(names)) != len(names):
        raise ValueError(f"style names must be unique, got {names}")
    specs = [IdentitySpec.from_seed(_identity_seed(master_seed, i)) for i in range(n_identities)]
    out = {}
    for si, style in enumerate(styles):
        recs = []
        for i, spec in enumerate(specs):
            for j in range(n_per_identity):
                jitter, noise = _sample_seeds(master_seed, i, j, si)
                img = apply_style(render_identity(spec, jitter), style, noise)
                recs.append(SampleRecord(img, i, style.name, j, {
                    "seed": [int(master_seed), i, j, si], "spec_seed": spec.seed}))
        out[style.name] = DatasetSplit(recs, role="source", labels_visible=True, domain=style.name)
    return out


def build_relation_matrix(labels_or_split) -> np.ndarray:
    """``S[i, j] = 1`` iff items ``i`` and ``j`` share a label."""
    if isinstance(labels_or_split, DatasetSplit):
        labels = labels_or_split.labels  # raises on hidden labels
    else:
        labels = np.asarray(labels_or_split)
    return (labels[:, None] == labels[None, :]).astype(np.float64)


# ---------------------------------------------------------------------------
# image files


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) 8-bit PGM as a uint8 array."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    pos += 1
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    return pixels.reshape(h, w).copy()


def write_pgm(path, image: np.ndarray) -> None:
    """Write an image in [-1, 1] (float) or uint8 as an 8-bit P5 PGM."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + arr.tobytes())


def area_downsample(img: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    h, w = img.shape
    if h == size and w == size:
        return img.astype(np.float64)
    if h % size == 0 and w % size == 0:
        fy, fx = h // size, w // size
        return img.reshape(size, fy, size, fx).mean(axis=(1, 3))
    from PIL import Image

    return np.asarray(Image.fromarray(img.astype(np.float32), mode="F").resize((size, size), Image.BOX),
                      dtype=np.float64)


def _read_gray(path: Path) -> np.ndarray:
    try:
        if path.suffix.lower() == ".pgm":
            return read_pgm(path)
        from PIL import Image

        with Image.open(path) as im:
            return np.asarray(im.convert("L"))
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc


_NAME_RE = re.compile(r"^(-?\d+)_(\d+)$")


def load_image_folder(path, domain: str, role: str = "source") -> DatasetSplit:
    """Load ``<label>_<index>.pgm|png`` grayscale images, area-resampled to 32x32 in [-1, 1]."""
    folder = Path(path)
    files = sorted(p for p in folder.iterdir() if p.suffix.lower() in (".pgm", ".png"))
    recs = []
    for p in files:
        m = _NAME_RE.match(p.stem)
        if not m:
            log.warning("skipping %s: name is not <label>_<index>", p.name)
            continue
        raw = _read_gray(p).astype(np.float64)
        img = area_downsample(raw) / 127.5 - 1.0
        recs.append(SampleRecord(np.clip(img, -1.0, 1.0), int(m.group(1)), domain, int(m.group(2)),
                                 {"path": str(p)}))
    if not recs:
        log.warning("no images loaded from %s", folder)
    return DatasetSplit(recs, role=role, labels_visible=role != "target", domain=domain)


def save_split(split: DatasetSplit, folder) -> Path:
    """Write every image as PGM plus a JSON manifest; returns the manifest path."""
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    man = split.manifest()
    for r, entry in zip(split.records, man["records"]):
        name = f"{r.label}_{r.index}.pgm"
        write_pgm(folder / name, r.image)
        entry["path"] = name
    out = folder / "manifest.json"
    out.write_text(json.dumps(man, indent=1, sort_keys=True))
    return out
