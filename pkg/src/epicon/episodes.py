"""Dataset splits, N-way K-shot episode sampling, and two-view augmentation.

A sampled episode carries a support set (K labeled exemplars per class) and
a query set (Q evaluation points per class) with labels remapped to
0..N-1 in class draw order. Training wraps each episode into two
independently augmented views of the same underlying samples; evaluation
uses raw episodes.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import DataError, InsufficientData, InvalidArgument, ShapeMismatch

ROLES = ("base", "val", "novel")


@dataclass
class DatasetSplit:
    """One role's samples with dense class ids in [0, num_classes)."""

    samples: np.ndarray  # (M, *input_shape) float64
    labels: np.ndarray  # (M,) int64
    role: str
    num_classes: int
    input_shape: tuple[int, ...]

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.role not in ROLES:
            raise InvalidArgument(f"role must be one of {ROLES}, got {self.role!r}")
        if self.samples.shape[0] != self.labels.shape[0]:
            raise ShapeMismatch("samples and labels disagree on item count")
        if tuple(self.samples.shape[1:]) != tuple(self.input_shape):
            raise ShapeMismatch(
                f"sample shape {self.samples.shape[1:]} != input_shape {self.input_shape}"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InvalidArgument("class ids must lie in [0, num_classes)")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def items(self) -> list[tuple[np.ndarray, int]]:
        return [(self.samples[i], int(self.labels[i])) for i in range(len(self))]

    def class_indices(self, class_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == class_id)


@dataclass
class Episode:
    """One N-way K-shot task with class-major sample order."""

    episode_id: int
    support_x: np.ndarray  # (N*K, *shape)
    support_y: np.ndarray  # (N*K,)
    query_x: np.ndarray  # (N*Q, *shape)
    query_y: np.ndarray  # (N*Q,)
    n_way: int
    k_shot: int
    q_query: int

    def __post_init__(self):
        self.support_y = np.asarray(self.support_y, dtype=np.int64)
        self.query_y = np.asarray(self.query_y, dtype=np.int64)
        sup_counts = np.bincount(self.support_y, minlength=self.n_way)
        qry_counts = np.bincount(self.query_y, minlength=self.n_way)
        if len(sup_counts) != self.n_way or not np.all(sup_counts == self.k_shot):
            raise InvalidArgument("support must hold exactly k_shot samples per class")
        if len(qry_counts) != self.n_way or not np.all(qry_counts == self.q_query):
            raise InvalidArgument("query must hold exactly q_query samples per class")


@dataclass
class MultiViewEpisode:
    """Two independently augmented views of the same episode."""

    episode_id: int
    view1: Episode
    view2: Episode

    def __post_init__(self):
        if self.view1.episode_id != self.episode_id or self.view2.episode_id != self.episode_id:
            raise InvalidArgument("views must share the parent episode id")
        if not (
            np.array_equal(self.view1.support_y, self.view2.support_y)
            and np.array_equal(self.view1.query_y, self.view2.query_y)
        ):
            raise InvalidArgument("views must share identical label arrays")


# ---------------------------------------------------------------------------
# augmentation policies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianNoise:
    """Additive iid gaussian noise on vector samples."""

    std: float = 0.1
    kind: str = field(default="vector", init=False)

    def apply(self, batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return batch + rng.normal(0.0, self.std, size=batch.shape)


@dataclass(frozen=True)
class RandomScale:
    """Per-sample positive scaling of vector samples."""

    low: float = 0.8
    high: float = 1.25
    kind: str = field(default="vector", init=False)

    def apply(self, batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        factors = rng.uniform(self.low, self.high, size=(batch.shape[0],) + (1,) * (batch.ndim - 1))
        return batch * factors


@dataclass(frozen=True)
class RandomResizedCrop:
    """Crop a random area fraction in [min_scale, 1] and resize back."""

    min_scale: float = 0.6
    kind: str = field(default="image", init=False)

    def apply(self, batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        from scipy import ndimage

        out = np.empty_like(batch)
        _, _, h, w = batch.shape
        for i in range(batch.shape[0]):
            scale = rng.uniform(self.min_scale, 1.0)
            ch = max(1, int(round(h * np.sqrt(scale))))
            cw = max(1, int(round(w * np.sqrt(scale))))
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            crop = batch[i, :, top : top + ch, left : left + cw]
            if (ch, cw) == (h, w):
                out[i] = crop
            else:
                zoomed = ndimage.zoom(crop, (1.0, h / ch, w / cw), order=1)
                out[i] = zoomed[:, :h, :w]
        return out


@dataclass(frozen=True)
class HorizontalFlip:
    prob: float = 0.5
    kind: str = field(default="image", init=False)

    def apply(self, batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        flips = rng.random(batch.shape[0]) < self.prob
        out = batch.copy()
        out[flips] = out[flips, :, :, ::-1]
        return out


@dataclass(frozen=True)
class ColorJitter:
    """Per-sample brightness/contrast/saturation jitter, clipped to [0, 1]."""

    brightness: float = 0.3
    contrast: float = 0.3
    saturation: float = 0.3
    kind: str = field(default="image", init=False)

    def apply(self, batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        out = batch.copy()
        for i in range(out.shape[0]):
            img = out[i]
            fb = rng.uniform(1.0 - self.brightness, 1.0 + self.brightness)
            fc = rng.uniform(1.0 - self.contrast, 1.0 + self.contrast)
            fs = rng.uniform(1.0 - self.saturation, 1.0 + self.saturation)
            img = img * fb
            img = (img - img.mean()) * fc + img.mean()
            gray = img.mean(axis=0, keepdims=True)
            img = gray + (img - gray) * fs
            out[i] = np.clip(img, 0.0, 1.0)
        return out


@dataclass(frozen=True)
class AugPolicy:
    """An ordered family of stochastic, shape- and label-preserving transforms.

    Each call to :func:`augment_episode` draws two fresh operators from the
    family (one per view) by running every transform with independent rng
    draws.
    """

    transforms: tuple = ()

    def required_ndim(self) -> int | None:
        kinds = {t.kind for t in self.transforms}
        if kinds == {"vector"}:
            return 2
        if kinds == {"image"}:
            return 4
        if not kinds:
            return None
        raise InvalidArgument("a policy cannot mix vector and image transforms")

    def apply(self, batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        need = self.required_ndim()
        if need is not None and batch.ndim != need:
            raise ShapeMismatch(
                f"policy expects {need}-d batches, got {batch.ndim}-d samples"
            )
        out = batch
        for t in self.transforms:
            out = t.apply(out, rng)
            if out.shape != batch.shape:
                raise ShapeMismatch(f"transform {t} altered the batch shape")
        return out


def identity_policy() -> AugPolicy:
    return AugPolicy(())


def vector_policy(noise_std: float = 0.1, scale_low: float = 0.8, scale_high: float = 1.25) -> AugPolicy:
    return AugPolicy((GaussianNoise(noise_std), RandomScale(scale_low, scale_high)))


def image_policy(
    crop_min_scale: float = 0.6,
    flip_prob: float = 0.5,
    jitter: float = 0.3,
) -> AugPolicy:
    return AugPolicy(
        (
            RandomResizedCrop(crop_min_scale),
            HorizontalFlip(flip_prob),
            ColorJitter(jitter, jitter, jitter),
        )
    )


def default_policy_for(split: DatasetSplit, **kwargs) -> AugPolicy:
    if len(split.input_shape) == 1:
        return vector_policy(**kwargs)
    if len(split.input_shape) == 3:
        return image_policy(**kwargs)
    raise InvalidArgument(f"no default policy for input shape {split.input_shape}")


_TRANSFORM_TYPES = {
    cls.__name__: cls
    for cls in (GaussianNoise, RandomScale, RandomResizedCrop, HorizontalFlip, ColorJitter)
}


def policy_to_dict(policy: AugPolicy) -> list[dict]:
    out = []
    for t in policy.transforms:
        spec = {k: v for k, v in vars(t).items() if k != "kind"}
        spec["type"] = type(t).__name__
        out.append(spec)
    return out


def policy_from_dict(specs: list[dict]) -> AugPolicy:
    transforms = []
    for spec in specs:
        spec = dict(spec)
        name = spec.pop("type")
        if name not in _TRANSFORM_TYPES:
            raise InvalidArgument(f"unknown transform type {name!r}")
        transforms.append(_TRANSFORM_TYPES[name](**spec))
    return AugPolicy(tuple(transforms))


# ---------------------------------------------------------------------------
# dataset construction
# ---------------------------------------------------------------------------


def make_synthetic_dataset(
    num_classes: int,
    dim: int,
    per_class: int,
    class_sep: float,
    intra_std: float,
    seed: int,
    role: str = "base",
) -> DatasetSplit:
    """Gaussian-blob classification data.

    Class means sit on a sphere of radius `class_sep`; samples are mean plus
    isotropic noise of std `intra_std` (0 gives noiseless copies of the
    means). Deterministic given `seed`.
    """
    if num_classes < 2 or dim < 1 or per_class < 1:
        raise InvalidArgument("num_classes >= 2, dim >= 1, per_class >= 1 required")
    if class_sep <= 0 or intra_std < 0:
        raise InvalidArgument("class_sep must be > 0 and intra_std >= 0")
    rng = np.random.default_rng(seed)
    means = _sphere_means(rng, num_classes, dim, class_sep)
    samples, labels = _blob_samples(rng, means, per_class, intra_std)
    return DatasetSplit(samples, labels, role, num_classes, (dim,))


def synthesize_splits(
    num_base: int,
    num_val: int,
    num_novel: int,
    dim: int,
    per_class: int,
    class_sep: float,
    intra_std: float,
    seed: int,
) -> dict[str, DatasetSplit]:
    """Three splits over disjoint class sets drawn from one mean pool."""
    counts = {"base": num_base, "val": num_val, "novel": num_novel}
    for role, count in counts.items():
        if count < 2:
            raise InvalidArgument(f"{role} needs >= 2 classes, got {count}")
    if class_sep <= 0 or intra_std < 0 or dim < 1 or per_class < 1:
        raise InvalidArgument("bad synthetic dataset parameters")
    rng = np.random.default_rng(seed)
    total = num_base + num_val + num_novel
    means = _sphere_means(rng, total, dim, class_sep)
    splits = {}
    offset = 0
    for role in ROLES:
        c = counts[role]
        samples, labels = _blob_samples(rng, means[offset : offset + c], per_class, intra_std)
        splits[role] = DatasetSplit(samples, labels, role, c, (dim,))
        offset += c
    return splits


def _sphere_means(rng, num_classes, dim, radius):
    raw = rng.normal(size=(num_classes, dim))
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return raw / norms * radius


def _blob_samples(rng, means, per_class, intra_std):
    num_classes, dim = means.shape
    samples = np.empty((num_classes * per_class, dim))
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    for c in range(num_classes):
        noise = rng.normal(0.0, 1.0, size=(per_class, dim)) * intra_std
        samples[c * per_class : (c + 1) * per_class] = means[c] + noise
        labels[c * per_class : (c + 1) * per_class] = c
    return samples, labels


_IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".bmp", ".gif"}


def load_image_folder(
    path,
    split_spec: dict[str, list[str]],
    image_size: tuple[int, int] = (32, 32),
) -> dict[str, DatasetSplit]:
    """Ingest a class-per-subdirectory image tree into per-role splits.

    `split_spec` maps roles to class-name lists; the lists must be disjoint.
    Images are decoded with Pillow, converted to RGB, resized to
    `image_size`, and stored channels-first in [0, 1].
    """
    from PIL import Image

    root = os.fspath(path)
    if not os.path.isdir(root):
        raise DataError(f"dataset path does not exist: {root}")
    unknown_roles = set(split_spec) - set(ROLES)
    if unknown_roles:
        raise DataError(f"unknown split roles: {sorted(unknown_roles)}")
    seen: dict[str, str] = {}
    for role, classes in split_spec.items():
        for name in classes:
            if name in seen:
                raise DataError(
                    f"class {name!r} assigned to both {seen[name]!r} and {role!r}"
                )
            seen[name] = role

    h, w = image_size
    splits: dict[str, DatasetSplit] = {}
    for role, classes in split_spec.items():
        arrays, labels = [], []
        for class_id, name in enumerate(classes):
            class_dir = os.path.join(root, name)
            if not os.path.isdir(class_dir):
                raise DataError(f"missing class directory: {class_dir}")
            files = sorted(
                f
                for f in os.listdir(class_dir)
                if os.path.splitext(f)[1].lower() in _IMAGE_EXTS
            )
            if not files:
                raise DataError(f"class {name!r} has no images in {class_dir}")
            for fname in files:
                fpath = os.path.join(class_dir, fname)
                try:
                    with Image.open(fpath) as im:
                        im = im.convert("RGB").resize((w, h))
                        arr = np.asarray(im, dtype=np.float64) / 255.0
                except Exception as exc:
                    raise DataError(f"cannot decode image {fpath}: {exc}") from exc
                arrays.append(arr.transpose(2, 0, 1))
                labels.append(class_id)
        splits[role] = DatasetSplit(
            np.stack(arrays), np.asarray(labels), role, len(classes), (3, h, w)
        )
    return splits


# ---------------------------------------------------------------------------
# sampling and augmentation
# ---------------------------------------------------------------------------


def sample_episode(
    split: DatasetSplit,
    n_way: int,
    k_shot: int,
    q_query: int,
    rng: np.random.Generator,
) -> Episode:
    """Draw an N-way K-shot episode without replacement.

    Classes come out in draw order and are remapped to 0..N-1; per class,
    k_shot + q_query distinct samples are split into support and query. Pure
    in (split, parameters, rng state); the episode id is drawn from the rng.
    """
    if n_way < 2 or k_shot < 1 or q_query < 1:
        raise InvalidArgument("need n_way >= 2, k_shot >= 1, q_query >= 1")
    if split.num_classes < n_way:
        raise InsufficientData(
            f"split has {split.num_classes} classes, episode needs {n_way}"
        )
    episode_id = int(rng.integers(0, 2**63 - 1))
    chosen = rng.choice(split.num_classes, size=n_way, replace=False)
    sup_x, qry_x = [], []
    need = k_shot + q_query
    for cls in chosen:
        idx = split.class_indices(int(cls))
        if idx.size < need:
            raise InsufficientData(
                f"class {int(cls)} has {idx.size} samples, episode needs {need}"
            )
        picked = rng.choice(idx, size=need, replace=False)
        sup_x.append(split.samples[picked[:k_shot]])
        qry_x.append(split.samples[picked[k_shot:]])
    support_x = np.concatenate(sup_x)
    query_x = np.concatenate(qry_x)
    support_y = np.repeat(np.arange(n_way), k_shot)
    query_y = np.repeat(np.arange(n_way), q_query)
    return Episode(episode_id, support_x, support_y, query_x, query_y, n_way, k_shot, q_query)


def augment_episode(
    ep: Episode,
    policy_family: AugPolicy,
    rng: np.random.Generator,
) -> MultiViewEpisode:
    """Two independent operator draws applied to the same episode.

    Labels, episode id, and array shapes are preserved; support and query
    are transformed together per view.
    """
    views = []
    for _ in range(2):
        sup = policy_family.apply(ep.support_x, rng)
        qry = policy_family.apply(ep.query_x, rng)
        views.append(
            replace(ep, support_x=sup, query_x=qry, support_y=ep.support_y.copy(), query_y=ep.query_y.copy())
        )
    return MultiViewEpisode(ep.episode_id, views[0], views[1])
