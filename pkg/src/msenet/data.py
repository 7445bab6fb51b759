"""Dataset indexing, class splits, preprocessing and episode sampling.

A dataset lives on disk as ``root/<class_name>/<image files>``. All
randomness is driven by explicit integer seeds so an episode is fully
determined by ``(index, split, spec, seed)``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import DatasetError, EpisodeError, SplitError

IMAGE_SIZE = 84
IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp", ".tif", ".tiff"}

# (mean, std) per RGB channel, applied after scaling pixels to [0, 1].
NORMALIZATION = {
    "imagenet": ((0.485, 0.456, 0.406), (0.229, 0.224, 0.225)),
    "synthetic": ((0.5, 0.5, 0.5), (0.5, 0.5, 0.5)),
}


@dataclass(frozen=True)
class DatasetIndex:
    root: Path
    classes: tuple[str, ...]
    items: dict[str, tuple[Path, ...]]

    def __len__(self):
        return sum(len(v) for v in self.items.values())

    @property
    def name(self):
        return self.root.name


@dataclass(frozen=True)
class SplitSpec:
    train: frozenset[str]
    val: frozenset[str]
    test: frozenset[str]
    seed: int | None = None

    def __post_init__(self):
        for a, b in (("train", "val"), ("train", "test"), ("val", "test")):
            common = getattr(self, a) & getattr(self, b)
            if common:
                raise SplitError(f"{a} and {b} share classes: {sorted(common)}")

    def __getitem__(self, name: str) -> frozenset[str]:
        if name not in ("train", "val", "test"):
            raise KeyError(name)
        return getattr(self, name)


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int
    k_shot: int
    n_query: int = 15

    def __post_init__(self):
        if self.n_way < 1 or self.k_shot < 1 or self.n_query < 1:
            raise ValueError(f"episode sizes must be positive, got {self}")

    @property
    def label(self) -> str:
        return f"{self.n_way}-way {self.k_shot}-shot"


@dataclass
class Episode:
    """One N-way K-shot task.

    Support and query entries are grouped by class index: the first K
    support items belong to class 0, the next K to class 1, and so on.
    ``support``/``query`` hold image tensors once the episode is loaded.
    """

    class_ids: list[str]
    support_files: list[Path]
    support_labels: torch.Tensor
    query_files: list[Path]
    query_labels: torch.Tensor
    seed: int
    support: torch.Tensor | None = field(default=None, repr=False)
    query: torch.Tensor | None = field(default=None, repr=False)

    @property
    def n_way(self) -> int:
        return len(self.class_ids)

    def digest(self) -> str:
        """Short hash of the file references, used to compare episode streams."""
        h = hashlib.sha1()
        for p in self.support_files + self.query_files:
            h.update(str(p).encode())
            h.update(b"\0")
        return h.hexdigest()[:16]


def build_index(root, verify: bool = True) -> DatasetIndex:
    """Index ``root/<class>/<image>`` in lexicographic order.

    With ``verify`` every image header is opened once so unreadable files
    surface here rather than mid-training.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root does not exist: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    if not class_dirs:
        raise DatasetError(f"no classes found under {root}")

    items = {}
    for d in class_dirs:
        files = sorted(
            p for p in d.iterdir()
            if p.is_file() and not p.name.startswith(".") and p.suffix.lower() in IMAGE_EXTENSIONS
        )
        if not files:
            raise DatasetError(f"class {d.name!r} has no image files ({d})")
        if verify:
            for f in files:
                _check_readable(f)
        items[d.name] = tuple(files)
    return DatasetIndex(root=root, classes=tuple(items), items=items)


def _check_readable(path: Path):
    try:
        with Image.open(path) as im:
            im.verify()
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise DatasetError(f"unreadable image file: {path} ({e})") from e


def make_splits(index: DatasetIndex, counts: Sequence[int], seed: int) -> SplitSpec:
    """Randomly partition classes into disjoint train/val/test sets."""
    n_train, n_val, n_test = (int(c) for c in counts)
    if min(n_train, n_val, n_test) < 0:
        raise SplitError(f"split counts must be non-negative, got {tuple(counts)}")
    total = n_train + n_val + n_test
    if total > len(index.classes):
        raise SplitError(
            f"split counts {tuple(counts)} need {total} classes but the index has {len(index.classes)}"
        )
    order = np.random.default_rng(seed).permutation(len(index.classes))
    names = [index.classes[i] for i in order]
    return SplitSpec(
        train=frozenset(names[:n_train]),
        val=frozenset(names[n_train:n_train + n_val]),
        test=frozenset(names[n_train + n_val:total]),
        seed=seed,
    )


def write_split_file(split: SplitSpec, path) -> None:
    lines = []
    for section in ("train", "val", "test"):
        lines.append(f"[{section}]")
        lines.extend(sorted(split[section]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_split_file(path, index: DatasetIndex | None = None) -> SplitSpec:
    sections: dict[str, list[str]] = {"train": [], "val": [], "test": []}
    current = None
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in sections:
                raise SplitError(f"{path}:{lineno}: unknown section [{current}]")
            continue
        if current is None:
            raise SplitError(f"{path}:{lineno}: class name before any section header")
        sections[current].append(line)
    split = SplitSpec(**{k: frozenset(v) for k, v in sections.items()})
    if index is not None:
        unknown = (split.train | split.val | split.test) - set(index.classes)
        if unknown:
            raise SplitError(f"split file names classes not in the dataset: {sorted(unknown)}")
    return split


def check_split_supports(index: DatasetIndex, classes: Iterable[str], spec: EpisodeSpec) -> None:
    """Raise unless every class can fill K support + n_q query slots."""
    classes = sorted(classes)
    if len(classes) < spec.n_way:
        raise EpisodeError(
            f"{spec.label} task needs {spec.n_way} classes but the split has {len(classes)}"
        )
    need = spec.k_shot + spec.n_query
    for c in classes:
        if len(index.items[c]) < need:
            raise EpisodeError(f"class {c!r} has {len(index.items[c])} images, needs {need}")


def plan_episode(index: DatasetIndex, split: Iterable[str], spec: EpisodeSpec, seed: int) -> Episode:
    """Draw the file references of one episode without loading pixels."""
    pool = sorted(split)
    if len(pool) < spec.n_way:
        raise EpisodeError(f"{spec.label} task needs {spec.n_way} classes but the split has {len(pool)}")
    rng = np.random.default_rng(seed)
    chosen = [pool[i] for i in rng.choice(len(pool), size=spec.n_way, replace=False)]
    need = spec.k_shot + spec.n_query

    support, query = [], []
    for c in chosen:
        files = index.items[c]
        if len(files) < need:
            raise EpisodeError(f"class {c!r} has {len(files)} images, needs {need}")
        picks = rng.choice(len(files), size=need, replace=False)
        support.extend(files[i] for i in picks[:spec.k_shot])
        query.extend(files[i] for i in picks[spec.k_shot:])

    return Episode(
        class_ids=chosen,
        support_files=support,
        support_labels=torch.arange(spec.n_way).repeat_interleave(spec.k_shot),
        query_files=query,
        query_labels=torch.arange(spec.n_way).repeat_interleave(spec.n_query),
        seed=seed,
    )


def sample_episode(index, split, spec, seed, loader: Callable | None = None) -> Episode:
    """Draw an episode and load its images through ``loader``."""
    episode = plan_episode(index, split, spec, seed)
    loader = loader or ImageLoader()
    episode.support = loader.batch(episode.support_files)
    episode.query = loader.batch(episode.query_files)
    return episode


def episode_seed(base_seed: int, stream: str, i: int) -> int:
    """Independent per-episode seed derived from a run seed.

    ``stream`` separates e.g. training episodes from validation episodes.
    """
    tag = int.from_bytes(hashlib.sha1(stream.encode()).digest()[:4], "little")
    return int(np.random.SeedSequence([base_seed, tag, i]).generate_state(1)[0])


def preprocess(raw_image, normalization: str = "imagenet") -> torch.Tensor:
    """Decode, resize to 84x84 (bilinear) and normalize an image.

    ``raw_image`` is a path or a PIL image. Returns a float32 tensor of
    shape (3, 84, 84).
    """
    mean, std = NORMALIZATION[normalization]
    if isinstance(raw_image, Image.Image):
        im = raw_image
        name = getattr(raw_image, "filename", "<in-memory image>")
    else:
        name = str(raw_image)
        try:
            im = Image.open(raw_image)
            im.load()
        except (UnidentifiedImageError, OSError, SyntaxError) as e:
            raise DatasetError(f"cannot decode image {name}: {e}") from e
    im = im.convert("RGB")
    if im.size != (IMAGE_SIZE, IMAGE_SIZE):
        im = im.resize((IMAGE_SIZE, IMAGE_SIZE), Image.BILINEAR)
    arr = np.asarray(im, dtype=np.float32) / np.float32(255.0)
    arr = (arr - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


class ImageLoader:
    """Callable that preprocesses image files, memoising results by path."""

    def __init__(self, normalization: str = "imagenet", cache: bool = True):
        if normalization not in NORMALIZATION:
            raise ValueError(f"unknown normalization {normalization!r}; choose from {sorted(NORMALIZATION)}")
        self.normalization = normalization
        self._cache: dict[Path, torch.Tensor] | None = {} if cache else None

    def __call__(self, path) -> torch.Tensor:
        if self._cache is None:
            return preprocess(path, self.normalization)
        key = Path(path)
        if key not in self._cache:
            self._cache[key] = preprocess(key, self.normalization)
        return self._cache[key]

    def batch(self, paths: Sequence) -> torch.Tensor:
        return torch.stack([self(p) for p in paths])
