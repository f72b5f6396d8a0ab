"""Manifests, pair protocols, width/depth subsetting, synthetic faces and preprocessing.

Manifest file (UTF-8, ``\\n`` line endings, RFC 4180 quoting only where needed)::

    path,identity,group
    id0000/000.png,id0000,g0

The ``group`` column may be omitted entirely or left empty per row. Paths are
relative to the manifest's directory unless absolute.

Pair-protocol file::

    pathA,pathB,label,fold
    id0000/000.png,id0000/003.png,genuine,0

``label`` is ``genuine`` or ``impostor``; ``fold`` (0-9) is optional.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, ImageEnhance, ImageOps

MANIFEST_HEADER = ("path", "identity", "group")
PAIR_HEADER = ("pathA", "pathB", "label", "fold")

# Toy/synthetic pixel normalization; imported backbones carry their own.
DEFAULT_MEAN = 0.5
DEFAULT_STD = 0.5
DINOV2_MEAN = (0.485, 0.456, 0.406)
DINOV2_STD = (0.229, 0.224, 0.225)
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


@dataclass(frozen=True)
class Record:
    path: str
    identity: str
    group: str | None = None


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[Record, ...]
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        for r in self.records:
            if not r.identity:
                raise ValueError(f"empty identity for {r.path!r}")

    def __len__(self) -> int:
        return len(self.records)

    @cached_property
    def identities(self) -> tuple[str, ...]:
        return tuple(sorted({r.identity for r in self.records}))

    @cached_property
    def class_index(self) -> dict[str, int]:
        """Contiguous class ids in sorted identity order."""
        return {ident: i for i, ident in enumerate(self.identities)}

    @cached_property
    def by_identity(self) -> dict[str, list[Record]]:
        out: dict[str, list[Record]] = {ident: [] for ident in self.identities}
        for r in self.records:
            out[r.identity].append(r)
        return out

    def labels(self) -> np.ndarray:
        return np.array([self.class_index[r.identity] for r in self.records], dtype=np.int64)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def group_of(self, path: str) -> str | None:
        return self._groups.get(path)

    @cached_property
    def _groups(self) -> dict[str, str | None]:
        return {r.path: r.group for r in self.records}


def _write_csv(rows: Iterable[Sequence[str]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    return buf.getvalue()


def write_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    with_groups = any(r.group is not None for r in manifest.records)
    header = MANIFEST_HEADER if with_groups else MANIFEST_HEADER[:2]
    rows = [header] + [
        (r.path, r.identity, r.group or "") if with_groups else (r.path, r.identity) for r in manifest.records
    ]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_write_csv(rows), encoding="utf-8")
    return path


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header not in (MANIFEST_HEADER, MANIFEST_HEADER[:2]):
            raise ValueError(f"{path}: header must be 'path,identity[,group]', got {','.join(header)!r}")
        records = []
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            group = row[2] if len(row) == 3 and row[2] else None
            if not row[1]:
                raise ValueError(f"{path}:{lineno}: empty identity")
            records.append(Record(row[0], row[1], group))
    return DatasetManifest(tuple(records), root=path.parent)


@dataclass(frozen=True)
class Pair:
    path_a: str
    path_b: str
    genuine: bool
    fold: int | None = None


def write_pairs(pairs: Sequence[Pair], path: str | Path) -> Path:
    path = Path(path)
    with_folds = any(p.fold is not None for p in pairs)
    header = PAIR_HEADER if with_folds else PAIR_HEADER[:3]
    rows = [header]
    for p in pairs:
        row = [p.path_a, p.path_b, "genuine" if p.genuine else "impostor"]
        if with_folds:
            row.append("" if p.fold is None else str(p.fold))
        rows.append(row)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_write_csv(rows), encoding="utf-8")
    return path


def read_pairs(path: str | Path) -> list[Pair]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header not in (PAIR_HEADER, PAIR_HEADER[:3]):
            raise ValueError(f"{path}: header must be 'pathA,pathB,label[,fold]', got {','.join(header)!r}")
        pairs = []
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            if row[2] not in ("genuine", "impostor"):
                raise ValueError(f"{path}:{lineno}: label must be genuine|impostor, got {row[2]!r}")
            fold = int(row[3]) if len(row) == 4 and row[3] != "" else None
            pairs.append(Pair(row[0], row[1], row[2] == "genuine", fold))
    return pairs


# -- subsetting -------------------------------------------------------------


class DepthMode(str, Enum):
    RANDOM_IDENTITIES = "random_identities"
    TOP_BY_IMAGE_COUNT = "top_by_image_count"


@dataclass(frozen=True)
class SubsetSpec:
    width: int
    depth_mode: DepthMode = DepthMode.RANDOM_IDENTITIES
    seed: int = 0

    def __post_init__(self):
        if self.width < 1:
            raise ValueError(f"width must be positive, got {self.width}")
        object.__setattr__(self, "depth_mode", DepthMode(self.depth_mode))


def identity_order(manifest: DatasetManifest, spec: SubsetSpec) -> list[str]:
    """Selection order; the first ``n`` entries are the width-``n`` subset."""
    ids = list(manifest.identities)
    if spec.depth_mode is DepthMode.TOP_BY_IMAGE_COUNT:
        counts = {i: len(v) for i, v in manifest.by_identity.items()}
        return sorted(ids, key=lambda i: (-counts[i], i))
    perm = np.random.default_rng(spec.seed).permutation(len(ids))
    return [ids[j] for j in perm]


def subset(manifest: DatasetManifest, spec: SubsetSpec) -> DatasetManifest:
    """Keep every image of ``spec.width`` selected identities, in original record order.

    Subsets of the same seed and mode are nested: the width-n1 selection is a
    prefix of the width-n2 selection whenever n1 < n2.
    """
    n_ids = len(manifest.identities)
    if spec.width > n_ids:
        raise ValueError(f"width {spec.width} exceeds identity count {n_ids}")
    keep = set(identity_order(manifest, spec)[: spec.width])
    return DatasetManifest(tuple(r for r in manifest.records if r.identity in keep), root=manifest.root)


# -- synthetic identities ------------------------------------------------------


@dataclass
class SyntheticDataset:
    manifest: DatasetManifest
    images: dict[str, np.ndarray]

    def load(self, path: str) -> np.ndarray:
        return self.images[path]

    def write_images(self, root: str | Path) -> None:
        root = Path(root)
        for path, img in self.images.items():
            dst = root / path
            dst.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(img).save(dst, format="PNG")

    def write(self, root: str | Path) -> DatasetManifest:
        """Write PNGs plus ``manifest.csv`` under ``root``; returns the on-disk manifest."""
        root = Path(root)
        self.write_images(root)
        write_manifest(self.manifest, root / "manifest.csv")
        return DatasetManifest(self.manifest.records, root=root)


def _blobs(rng: np.random.Generator, size: int, n_blobs: int, symmetric: bool) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.zeros((size, size, 3))
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        sigma = rng.uniform(0.06, 0.14)
        colour = rng.normal(0, 1, size=3)
        centres = [cx, 1 - cx] if symmetric else [cx]
        for c in centres:
            img += np.exp(-((yy - cy) ** 2 + (xx - c) ** 2) / (2 * sigma**2))[..., None] * colour
    return img


def generate_synthetic_dataset(
    n_identities: int,
    images_per_identity: int,
    image_size: int = 56,
    seed: int = 0,
    n_groups: int = 4,
    identity_offset: int = 0,
    *,
    n_basis: int = 16,
    n_nuisance: int = 8,
    n_blobs: int = 3,
    identity_strength: float = 1.5,
    nuisance_strength: float = 0.0,
    brightness: float = 0.8,
    colour_cast: float = 0.6,
    max_shift: int = 2,
    noise: float = 0.08,
) -> SyntheticDataset:
    """Seeded toy faces: a per-identity template under per-image nuisance.

    A seed-wide "face space" of ``n_basis`` left-right symmetric blob patterns
    is shared by all identities; identity ``j``'s template is a Gaussian
    combination of those patterns drawn from ``(seed, identity_offset + j)``.
    Each image is ``identity_strength * template`` plus nuisance: a Gaussian
    mix of ``n_nuisance`` asymmetric "illumination" patterns, a brightness and
    contrast jitter, a per-channel colour cast, a shift of up to ``max_shift``
    pixels and pixel noise, mapped to ``[0, 1]`` via ``0.5 + 0.18 * x``.
    The defaults make an untrained backbone near chance on verification
    while a short adapter run separates identities well.
    Identities with disjoint offsets are disjoint draws from the same space.
    Groups ``g0..g{n_groups-1}`` are assigned round-robin (none if 0).
    """
    if min(n_identities, images_per_identity, image_size) < 1:
        raise ValueError("counts and image size must be positive")
    space_rng = np.random.default_rng([seed, 0x5EED])
    basis = np.stack([_blobs(space_rng, image_size, n_blobs, True) for _ in range(n_basis)])
    nuisance = np.stack([_blobs(space_rng, image_size, n_blobs, False) for _ in range(n_nuisance)])
    records, images = [], {}
    for j in range(n_identities):
        ident_no = identity_offset + j
        ident = f"id{ident_no:04d}"
        group = f"g{ident_no % n_groups}" if n_groups else None
        coef = np.random.default_rng([seed, 1, ident_no]).normal(0, 1, n_basis)
        template = np.tensordot(coef, basis, axes=1) / np.sqrt(n_basis)
        for k in range(images_per_identity):
            rng = np.random.default_rng([seed, 2, ident_no, k])
            nuis = np.tensordot(rng.normal(0, 1, n_nuisance), nuisance, axes=1) / np.sqrt(n_nuisance)
            img = identity_strength * template + nuisance_strength * nuis
            img = img * rng.uniform(0.7, 1.3) + rng.normal(0, brightness) + rng.normal(0, colour_cast, 3) * (colour_cast > 0)
            dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
            img = np.roll(img, (dy, dx), axis=(0, 1))
            img = img + rng.normal(0, noise, size=img.shape)
            img = np.clip(0.5 + 0.18 * img, 0, 1)
            path = f"{ident}/{k:03d}.png"
            images[path] = (img * 255 + 0.5).astype(np.uint8)
            records.append(Record(path, ident, group))
    return SyntheticDataset(DatasetManifest(tuple(records)), images)


def make_pairs(
    manifest: DatasetManifest,
    n_per_fold: int = 20,
    n_folds: int = 10,
    seed: int = 0,
    within_group: bool = False,
) -> list[Pair]:
    """A label-balanced pair protocol: each fold has ``n_per_fold`` genuine and impostor pairs.

    With ``within_group`` both identities of an impostor pair share a group,
    so the protocol splits cleanly by group for bias reporting.
    """
    rng = np.random.default_rng(seed)
    multi = [i for i, recs in manifest.by_identity.items() if len(recs) >= 2]
    ids = list(manifest.identities)
    if not multi or len(ids) < 2:
        raise ValueError("need an identity with 2+ images and 2+ identities for a balanced protocol")
    peers: dict[str, list[str]] = {}
    if within_group:
        group = {i: manifest.by_identity[i][0].group for i in ids}
        if any(g is None for g in group.values()):
            raise ValueError("within_group needs a group on every identity")
        peers = {i: [j for j in ids if j != i and group[j] == group[i]] for i in ids}
        ids = [i for i in ids if peers[i]]
        if not ids:
            raise ValueError("no group has 2+ identities")
    pairs = []
    for fold in range(n_folds):
        for _ in range(n_per_fold):
            recs = manifest.by_identity[multi[rng.integers(len(multi))]]
            a, b = rng.choice(len(recs), size=2, replace=False)
            pairs.append(Pair(recs[a].path, recs[b].path, True, fold))
        for _ in range(n_per_fold):
            if within_group:
                first = ids[rng.integers(len(ids))]
                second = peers[first][rng.integers(len(peers[first]))]
            else:
                ia, ib = rng.choice(len(ids), size=2, replace=False)
                first, second = ids[ia], ids[ib]
            ra, rb = manifest.by_identity[first], manifest.by_identity[second]
            pairs.append(Pair(ra[rng.integers(len(ra))].path, rb[rng.integers(len(rb))].path, False, fold))
    return pairs


def count_possible_pairs(manifest: DatasetManifest) -> tuple[int, int]:
    """(genuine, impostor) unordered pair counts available in a manifest."""
    sizes = [len(v) for v in manifest.by_identity.values()]
    total = sum(sizes)
    genuine = sum(s * (s - 1) // 2 for s in sizes)
    return genuine, total * (total - 1) // 2 - genuine


# -- preprocessing --------------------------------------------------------------


def load_image(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc


MAX_MAGNITUDE = 30


def _level(m: int, hi: float) -> float:
    return hi * m / MAX_MAGNITUDE


def _signed(rng: np.random.Generator, v: float) -> float:
    return v if rng.random() < 0.5 else -v


# Photometric ops plus mild geometry only (alignment-preserving): the
# rotation/translation ceilings are 10 degrees and 10% of the side.
# Solarize is left out: inverting bright regions flips the sign of the
# identity pattern on the toy data and stalls training.
def _rotate(im, m, rng):
    return im.rotate(_signed(rng, _level(m, 10.0)), resample=Image.BILINEAR, fillcolor=(128, 128, 128))


def _translate(im, m, rng, axis):
    px = _signed(rng, _level(m, 0.1) * im.size[0])
    shift = (1, 0, px, 0, 1, 0) if axis == 0 else (1, 0, 0, 0, 1, px)
    return im.transform(im.size, Image.AFFINE, shift, resample=Image.BILINEAR, fillcolor=(128, 128, 128))


RANDAUG_OPS = {
    "identity": lambda im, m, rng: im,
    "autocontrast": lambda im, m, rng: ImageOps.autocontrast(im),
    "equalize": lambda im, m, rng: ImageOps.equalize(im),
    "brightness": lambda im, m, rng: ImageEnhance.Brightness(im).enhance(1 + _signed(rng, _level(m, 0.9))),
    "contrast": lambda im, m, rng: ImageEnhance.Contrast(im).enhance(1 + _signed(rng, _level(m, 0.9))),
    "color": lambda im, m, rng: ImageEnhance.Color(im).enhance(1 + _signed(rng, _level(m, 0.9))),
    "sharpness": lambda im, m, rng: ImageEnhance.Sharpness(im).enhance(1 + _signed(rng, _level(m, 0.9))),
    "posterize": lambda im, m, rng: ImageOps.posterize(im, 8 - int(_level(m, 4))),
    "rotate": _rotate,
    "translate_x": lambda im, m, rng: _translate(im, m, rng, 0),
    "translate_y": lambda im, m, rng: _translate(im, m, rng, 1),
}


def rand_augment(img: Image.Image, rng: np.random.Generator, num_ops: int = 4, magnitude: int = 16) -> Image.Image:
    """Apply ``num_ops`` ops drawn uniformly (with replacement) from ``RANDAUG_OPS``.

    ``magnitude`` is on a 0-30 scale.
    """
    names = list(RANDAUG_OPS)
    for idx in rng.integers(len(names), size=num_ops):
        img = RANDAUG_OPS[names[idx]](img, magnitude, rng)
    return img


@dataclass(frozen=True)
class Normalization:
    mean: tuple[float, ...] = (DEFAULT_MEAN,) * 3
    std: tuple[float, ...] = (DEFAULT_STD,) * 3


def preprocess(
    image,
    target_size: int,
    train_mode: bool = False,
    seed: int | Sequence[int] | None = None,
    *,
    flip_p: float = 0.5,
    randaug: tuple[int, int] | None = (4, 16),
    norm: Normalization = Normalization(),
) -> np.ndarray:
    """Resize (bilinear), optionally augment, and normalize to float32 ``(H, W, C)``.

    Eval mode is deterministic and ignores ``seed``. Train mode flips with
    probability ``flip_p`` and applies ``rand_augment(*randaug)``, both driven
    by ``np.random.default_rng(seed)``.
    """
    if isinstance(image, (str, Path)):
        image = load_image(image)
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    if arr.ndim != 3 or arr.dtype != np.uint8:
        raise ValueError(f"expected an HxWxC uint8 image, got {arr.dtype} {arr.shape}")
    im = Image.fromarray(arr)
    if im.size != (target_size, target_size):
        im = im.resize((target_size, target_size), Image.BILINEAR)
    if train_mode:
        rng = np.random.default_rng(seed)
        if rng.random() < flip_p:
            im = ImageOps.mirror(im)
        if randaug is not None:
            im = rand_augment(im, rng, *randaug)
    out = np.asarray(im, dtype=np.float32) / 255.0
    return ((out - np.asarray(norm.mean, np.float32)) / np.asarray(norm.std, np.float32)).astype(np.float32)
