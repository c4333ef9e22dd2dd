"""Person image records, loaders, a procedural toy dataset, augmentation and
identity-balanced batch sampling."""

from __future__ import annotations

import json
import logging
import os
import re
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

log = logging.getLogger(__name__)

SPLITS = ("train", "query", "gallery")
MARKET_SPLITS = {"train": "bounding_box_train", "query": "query", "gallery": "bounding_box_test"}
MARKET_NAME = re.compile(r"^(-?\d+)_c(\d+)")
IMAGE_EXTS = (".jpg", ".jpeg", ".png", ".bmp")

# Clothing palette: the first half is warm (red-dominant), the second half cool.
CLOTH_PALETTE = np.array(
    [
        [0.90, 0.10, 0.10],
        [0.95, 0.55, 0.10],
        [0.95, 0.85, 0.15],
        [0.75, 0.20, 0.45],
        [0.60, 0.30, 0.10],
        [0.95, 0.60, 0.70],
        [0.10, 0.25, 0.90],
        [0.10, 0.70, 0.30],
        [0.15, 0.75, 0.85],
        [0.45, 0.15, 0.75],
        [0.05, 0.05, 0.35],
        [0.55, 0.85, 0.55],
    ]
)
BG_PALETTE = np.array(
    [
        [0.55, 0.55, 0.50],
        [0.35, 0.40, 0.35],
        [0.70, 0.68, 0.60],
        [0.45, 0.40, 0.50],
        [0.30, 0.30, 0.30],
        [0.62, 0.58, 0.52],
    ]
)
SKIN = np.array([0.85, 0.70, 0.55])
OCCLUDER = np.array([0.5, 0.5, 0.5])
N_BODY_SHAPES = 3
N_SYNTH_CAMERAS = 3


class DatasetError(Exception):
    """Raised for unusable dataset inputs (empty splits, missing directories)."""


@dataclass(frozen=True)
class SyntheticFactors:
    torso_color: int
    leg_color: int
    body_shape: int
    x_offset: int
    y_offset: int
    scale: float
    bg_color: int
    occlusion: bool

    @property
    def identity_triple(self) -> tuple[int, int, int]:
        return (self.torso_color, self.leg_color, self.body_shape)


@dataclass(frozen=True, eq=False)
class ImageRecord:
    """One labeled person image.

    ``image`` is an H x W x 3 float array in [0, 1]; records loaded from disk
    may leave it ``None`` and carry ``path`` instead (see :meth:`pixels`).
    """

    image: np.ndarray | None
    identity: int
    camera_id: int
    split: str
    factors: SyntheticFactors | None = None
    pid: str = ""
    path: str | None = None

    def pixels(self) -> np.ndarray:
        if self.image is not None:
            return self.image
        if self.path is None:
            raise DatasetError("record has neither pixels nor a path")
        return load_image(self.path)


@dataclass
class PKBatch:
    images: np.ndarray
    labels: np.ndarray
    pair_index: np.ndarray
    record_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def load_image(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def save_image(path: str | os.PathLike, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def num_identities(records: Iterable[ImageRecord]) -> int:
    return len({r.identity for r in records})


def by_split(records: Iterable[ImageRecord], split: str) -> list[ImageRecord]:
    return [r for r in records if r.split == split]


# ---------------------------------------------------------------------------
# Directory-convention loaders
# ---------------------------------------------------------------------------


def _dense_remap(keys: Sequence[str]) -> dict[str, int]:
    return {k: i for i, k in enumerate(sorted(set(keys), key=lambda s: (len(s), s)))}


def parse_market_name(filename: str) -> tuple[int, int] | None:
    """Return ``(identity key, camera)`` for a Market-1501 file name, or None."""
    m = MARKET_NAME.match(os.path.basename(filename))
    if m is None:
        return None
    return int(m.group(1)), int(m.group(2))


def _list_images(directory: Path) -> list[Path]:
    if not directory.is_dir():
        return []
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_EXTS)


def load_market_layout(
    root: str | os.PathLike, split_spec: dict[str, str] | None = None
) -> list[ImageRecord]:
    """Load a Market-1501 style directory tree.

    Training identities are remapped to a dense range on their own; query and
    gallery share one dense range so that labels stay comparable between them.
    Identity keys <= 0 (junk and distractor images) are skipped.
    """
    root = Path(root)
    split_spec = split_spec or MARKET_SPLITS
    raw: dict[str, list[tuple[Path, int, int]]] = {}
    for split, sub in split_spec.items():
        if split not in SPLITS:
            raise DatasetError(f"unknown split role {split!r}")
        entries = []
        skipped = 0
        for path in _list_images(root / sub):
            parsed = parse_market_name(path.name)
            if parsed is None:
                log.warning("rejecting malformed file name %s", path)
                continue
            key, cam = parsed
            if key <= 0:
                skipped += 1
                continue
            entries.append((path, key, cam))
        if not entries:
            raise DatasetError(f"empty split: {split} ({root / sub})")
        if skipped:
            log.info("%s: skipped %d junk/distractor images", split, skipped)
        raw[split] = entries

    records = []
    groups = [("train",), ("query", "gallery")]
    for group in groups:
        keys = [str(key) for split in group for _, key, _ in raw.get(split, [])]
        remap = _dense_remap(keys)
        for split in group:
            for path, key, cam in raw.get(split, []):
                records.append(
                    ImageRecord(
                        image=None,
                        identity=remap[str(key)],
                        camera_id=cam,
                        split=split,
                        pid=str(key),
                        path=str(path),
                    )
                )
    return records


def load_celeb_layout(root: str | os.PathLike, splits: Sequence[str] = SPLITS) -> list[ImageRecord]:
    """Load ``root/<split>/<identity>/<image>`` trees (camera fixed to 0)."""
    root = Path(root)
    records = []
    by_role: dict[str, list[tuple[Path, str]]] = {}
    for split in splits:
        split_dir = root / split
        entries = []
        if split_dir.is_dir():
            for id_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
                entries.extend((img, id_dir.name) for img in _list_images(id_dir))
        if not entries:
            raise DatasetError(f"empty split: {split} ({split_dir})")
        by_role[split] = entries
    for group in [("train",), ("query", "gallery")]:
        remap = _dense_remap([pid for s in group for _, pid in by_role.get(s, [])])
        for split in group:
            for path, pid in by_role.get(split, []):
                records.append(
                    ImageRecord(None, remap[pid], 0, split, pid=pid, path=str(path))
                )
    return records


# ---------------------------------------------------------------------------
# Synthetic factor-labeled dataset
# ---------------------------------------------------------------------------


def _identity_triples(rng: np.random.Generator, n_ids: int) -> list[tuple[int, int, int]]:
    n_pal = len(CLOTH_PALETTE)
    total = n_pal * n_pal * N_BODY_SHAPES
    if n_ids > total:
        log.warning("%d identities exceed %d distinct factor triples; collisions follow", n_ids, total)
        flat = rng.integers(0, total, size=n_ids)
    else:
        flat = rng.choice(total, size=n_ids, replace=False)
    out = []
    for f in flat:
        f = int(f)
        out.append((f // (n_pal * N_BODY_SHAPES), (f // N_BODY_SHAPES) % n_pal, f % N_BODY_SHAPES))
    return out


def factor_collisions(records: Iterable[ImageRecord]) -> dict[tuple[int, int, int], list[int]]:
    """Map each factor triple shared by more than one identity to those identities."""
    owners: dict[tuple[int, int, int], set[int]] = defaultdict(set)
    for r in records:
        if r.factors is not None:
            owners[r.factors.identity_triple].add(r.identity)
    return {t: sorted(ids) for t, ids in owners.items() if len(ids) > 1}


def _draw_nuisance(rng: np.random.Generator, triple, resolution) -> SyntheticFactors:
    h, w = resolution
    max_dx = max(1, w // 5)
    max_dy = max(1, h // 12)
    return SyntheticFactors(
        torso_color=triple[0],
        leg_color=triple[1],
        body_shape=triple[2],
        x_offset=int(rng.integers(-max_dx, max_dx + 1)),
        y_offset=int(rng.integers(-max_dy, max_dy + 1)),
        scale=float(rng.uniform(0.7, 1.3)),
        bg_color=int(rng.integers(0, len(BG_PALETTE))),
        occlusion=bool(rng.random() < 0.2),
    )


def synthetic_camera(f: SyntheticFactors, width: int) -> int:
    """Camera id of a synthetic record: the horizontal-position bucket."""
    max_dx = max(1, width // 5)
    edges = np.linspace(-max_dx, max_dx + 1, N_SYNTH_CAMERAS + 1)
    return int(np.clip(np.searchsorted(edges, f.x_offset, side="right") - 1, 0, N_SYNTH_CAMERAS - 1))


def body_boxes(f: SyntheticFactors, resolution) -> dict[str, tuple[int, int, int, int]]:
    """Pixel boxes ``(top, bottom, left, right)`` of the head, torso and legs."""
    h, w = resolution
    ph = 0.7 * h * f.scale
    top = (h - ph) / 2 + f.y_offset
    cx = w / 2 + f.x_offset
    torso_w = (0.32, 0.42, 0.52)[f.body_shape] * w
    leg_w = 0.8 * torso_w

    def box(t, b, half):
        return (
            int(np.clip(round(top + t * ph), 0, h)),
            int(np.clip(round(top + b * ph), 0, h)),
            int(np.clip(round(cx - half), 0, w)),
            int(np.clip(round(cx + half), 0, w)),
        )

    head_r = 0.1 * ph
    return {
        "head": box(0.0, 0.2, head_r),
        "torso": box(0.2, 0.55, torso_w / 2),
        "legs": box(0.55, 1.0, leg_w / 2),
    }


def render_person(f: SyntheticFactors, resolution, occluder_x: int = 0) -> np.ndarray:
    h, w = resolution
    img = np.empty((h, w, 3), dtype=np.float32)
    img[:] = BG_PALETTE[f.bg_color]
    boxes = body_boxes(f, resolution)
    t, b, l, r = boxes["torso"]
    img[t:b, l:r] = CLOTH_PALETTE[f.torso_color]
    t, b, l, r = boxes["legs"]
    img[t:b, l:r] = CLOTH_PALETTE[f.leg_color]
    t, b, l, r = boxes["head"]
    cy, cx, rad = (t + b) / 2, (l + r) / 2, max((b - t) / 2, 1.0)
    yy, xx = np.mgrid[0:h, 0:w]
    img[(yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= rad**2] = SKIN
    if f.occlusion:
        bar = max(1, w // 6)
        img[:, occluder_x : occluder_x + bar] = OCCLUDER
    return img


def _render_records(rng, triples, imgs_per_id, resolution, split_of) -> list[ImageRecord]:
    records = []
    w = resolution[1]
    for ident, triple in enumerate(triples):
        for n in range(imgs_per_id):
            f = _draw_nuisance(rng, triple, resolution)
            occ_x = int(rng.integers(0, max(1, w - w // 6)))
            records.append(
                ImageRecord(
                    image=render_person(f, resolution, occ_x),
                    identity=ident,
                    camera_id=synthetic_camera(f, w),
                    split=split_of(ident, n),
                    factors=f,
                    pid=f"s{ident:04d}",
                )
            )
    return records


def _check_resolution(resolution, granularity: int) -> None:
    h, w = resolution
    if h % granularity or w % granularity:
        raise ValueError(
            f"resolution {h}x{w} is not divisible by the backbone granularity {granularity}"
        )


def synth_generate(
    seed: int, n_ids: int, imgs_per_id: int, resolution=(64, 32), granularity: int = 8
) -> list[ImageRecord]:
    """Render ``n_ids * imgs_per_id`` training records deterministically from ``seed``."""
    if n_ids < 2 or imgs_per_id < 2:
        raise ValueError("need n_ids >= 2 and imgs_per_id >= 2")
    _check_resolution(resolution, granularity)
    rng = np.random.default_rng(seed)
    triples = _identity_triples(rng, n_ids)
    return _render_records(rng, triples, imgs_per_id, tuple(resolution), lambda i, n: "train")


def synth_benchmark(
    seed: int,
    n_train_ids: int,
    n_test_ids: int,
    imgs_per_id: int,
    resolution=(64, 32),
    queries_per_id: int = 2,
    granularity: int = 8,
) -> list[ImageRecord]:
    """Training records plus a query/gallery split over disjoint, unseen identities.

    Factor triples are drawn without replacement across both parts, so test
    identities never share clothing with training identities.
    """
    if n_train_ids < 2 or n_test_ids < 1 or imgs_per_id < 2:
        raise ValueError("need n_train_ids >= 2, n_test_ids >= 1, imgs_per_id >= 2")
    if queries_per_id >= imgs_per_id:
        raise ValueError("queries_per_id must leave gallery images")
    _check_resolution(resolution, granularity)
    rng = np.random.default_rng(seed)
    triples = _identity_triples(rng, n_train_ids + n_test_ids)
    resolution = tuple(resolution)
    train = _render_records(rng, triples[:n_train_ids], imgs_per_id, resolution, lambda i, n: "train")
    test = _render_records(
        rng,
        triples[n_train_ids:],
        imgs_per_id,
        resolution,
        lambda i, n: "query" if n < queries_per_id else "gallery",
    )
    return train + test


def write_synthetic_dir(records: Sequence[ImageRecord], root: str | os.PathLike) -> Path:
    """Write one PNG per record plus ``manifest.json``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for n, r in enumerate(records):
        rel = f"images/{r.split}_{n:06d}.png"
        save_image(root / rel, r.pixels())
        entries.append(
            {
                "path": rel,
                "identity": r.identity,
                "camera_id": r.camera_id,
                "split": r.split,
                "pid": r.pid,
                "factors": asdict(r.factors) if r.factors else None,
            }
        )
    tmp = root / "manifest.json.tmp"
    tmp.write_text(json.dumps({"version": 1, "records": entries}, indent=1))
    os.replace(tmp, root / "manifest.json")
    return root


def load_synthetic_dir(root: str | os.PathLike) -> list[ImageRecord]:
    root = Path(root)
    manifest = root / "manifest.json"
    if not manifest.is_file():
        raise DatasetError(f"no manifest.json under {root}")
    data = json.loads(manifest.read_text())
    records = []
    for e in data["records"]:
        f = e.get("factors")
        records.append(
            ImageRecord(
                image=load_image(root / e["path"]),
                identity=int(e["identity"]),
                camera_id=int(e["camera_id"]),
                split=e["split"],
                factors=SyntheticFactors(**f) if f else None,
                pid=e.get("pid", ""),
                path=str(root / e["path"]),
            )
        )
    if not records:
        raise DatasetError(f"empty split: manifest under {root} lists no records")
    return records


def binary_attribute(records: Sequence[ImageRecord], name: str) -> np.ndarray:
    """Binary probe labels derived from synthetic factors.

    ``torso_color``/``leg_color``: warm half of the palette; ``x_offset``:
    right of center; ``bg_color``: first half of the background palette;
    ``body_shape``: wide; ``occlusion``: occluded.
    """
    half = len(CLOTH_PALETTE) // 2
    rules: dict[str, Callable[[SyntheticFactors], bool]] = {
        "torso_color": lambda f: f.torso_color < half,
        "leg_color": lambda f: f.leg_color < half,
        "x_offset": lambda f: f.x_offset > 0,
        "bg_color": lambda f: f.bg_color < len(BG_PALETTE) // 2,
        "body_shape": lambda f: f.body_shape == 2,
        "occlusion": lambda f: f.occlusion,
    }
    if name not in rules:
        raise KeyError(f"unknown attribute {name!r}; choose from {sorted(rules)}")
    if any(r.factors is None for r in records):
        raise DatasetError("attribute labels require synthetic records")
    return np.array([rules[name](r.factors) for r in records], dtype=np.int64)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass
class AugmentPolicy:
    size: tuple[int, int] = (384, 128)
    flip_p: float = 0.5
    crop: bool = True
    crop_pad: float = 0.1
    erase_p: float = 0.5
    erase_area: tuple[float, float] = (0.02, 0.4)
    erase_aspect: float = 0.3
    fill: tuple[float, float, float] = (0.485, 0.456, 0.406)

    @classmethod
    def identity(cls, size) -> "AugmentPolicy":
        return cls(size=tuple(size), flip_p=0.0, crop=False, erase_p=0.0)


def channel_mean(records: Sequence[ImageRecord], limit: int = 2000) -> tuple[float, float, float]:
    acc = np.zeros(3)
    for r in records[:limit]:
        acc += r.pixels().reshape(-1, 3).mean(axis=0)
    return tuple(float(v) for v in acc / max(1, min(len(records), limit)))


def resize(image: np.ndarray, size) -> np.ndarray:
    h, w = size
    if image.shape[:2] == (h, w):
        return image.astype(np.float32, copy=True)
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False, antialias=True)
    return out[0].permute(1, 2, 0).clamp(0, 1).numpy()


def _random_erase(img: np.ndarray, rng: np.random.Generator, policy: AugmentPolicy) -> np.ndarray:
    h, w = img.shape[:2]
    area = h * w
    lo, hi = policy.erase_area
    for _ in range(100):
        target = rng.uniform(lo, hi) * area
        aspect = rng.uniform(policy.erase_aspect, 1.0 / policy.erase_aspect)
        eh = int(round(np.sqrt(target * aspect)))
        ew = int(round(np.sqrt(target / aspect)))
        if 0 < eh < h and 0 < ew < w:
            break
    else:
        eh, ew = max(1, h // 2), max(1, w // 2)
    top = int(rng.integers(0, h - eh + 1))
    left = int(rng.integers(0, w - ew + 1))
    img[top : top + eh, left : left + ew] = np.asarray(policy.fill, dtype=img.dtype)
    return img


def augment(record: ImageRecord | np.ndarray, rng: np.random.Generator, policy: AugmentPolicy) -> np.ndarray:
    """Resize, then random flip, pad-and-crop and erasing, in that order."""
    image = record.pixels() if isinstance(record, ImageRecord) else record
    img = resize(image, policy.size)
    h, w = img.shape[:2]
    if rng.random() < policy.flip_p:
        img = img[:, ::-1].copy()
    if policy.crop:
        ph, pw = int(round(h * policy.crop_pad)), int(round(w * policy.crop_pad))
        padded = np.zeros((h + 2 * ph, w + 2 * pw, 3), dtype=img.dtype)
        padded[ph : ph + h, pw : pw + w] = img
        top = int(rng.integers(0, 2 * ph + 1))
        left = int(rng.integers(0, 2 * pw + 1))
        img = padded[top : top + h, left : left + w].copy()
    if rng.random() < policy.erase_p:
        img = _random_erase(img, rng, policy)
    return img


# ---------------------------------------------------------------------------
# P x K sampling
# ---------------------------------------------------------------------------


def pk_sample(
    records: Sequence[ImageRecord],
    P: int,
    K: int,
    rng: np.random.Generator,
    transform: Callable[[ImageRecord, np.random.Generator], np.ndarray] | None = None,
    workers: int | None = None,
) -> PKBatch:
    """Draw P identities and K images of each.

    Identities with fewer than K images are sampled with replacement. Every
    batch slot is an anchor paired with a different slot of the same identity.
    """
    if K < 2:
        raise ValueError("K must be at least 2 to form anchor/positive pairs")
    index: dict[int, list[int]] = defaultdict(list)
    for n, r in enumerate(records):
        index[r.identity].append(n)
    ids = sorted(index)
    if len(ids) < P:
        raise ValueError(f"pool has {len(ids)} identities, fewer than P={P}")
    chosen = rng.choice(len(ids), size=P, replace=False)
    rec_idx = []
    for c in chosen:
        pool = index[ids[c]]
        picks = rng.choice(len(pool), size=K, replace=len(pool) < K)
        rec_idx.extend(pool[p] for p in picks)
    rec_idx = np.asarray(rec_idx, dtype=np.int64)
    labels = np.array([records[i].identity for i in rec_idx], dtype=np.int64)
    pairs = np.empty((P * K, 2), dtype=np.int64)
    for g in range(P):
        for k in range(K):
            other = int(rng.integers(0, K - 1))
            other += other >= k
            pairs[g * K + k] = (g * K + k, g * K + other)
    if transform is None:
        images = np.stack([records[i].pixels() for i in rec_idx])
    else:
        # one child stream per slot keeps content independent of the worker count
        streams = rng.spawn(len(rec_idx))
        jobs = [(records[i], s) for i, s in zip(rec_idx, streams)]
        workers = workers if workers is not None else num_workers()
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                images = np.stack(list(pool.map(lambda j: transform(*j), jobs)))
        else:
            images = np.stack([transform(*j) for j in jobs])
    return PKBatch(images=images, labels=labels, pair_index=pairs, record_index=rec_idx)


def num_workers() -> int:
    """Data-preparation parallelism, capped by ``ISGAN_NUM_WORKERS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("ISGAN_NUM_WORKERS", "1")))
    except ValueError:
        return 1


def batch_rng(seed: int, *path: int) -> np.random.Generator:
    """Independent stream for ``(seed, *path)``, e.g. (seed, stage, epoch, batch)."""
    return np.random.default_rng([seed, *path])
