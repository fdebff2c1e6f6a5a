"""Synthetic paired-modality images, the ``MMDT`` tensor container, and preprocessing.

Each subject has shared latent factors (seen by both modalities, and the only
source of the diagnostic label) plus modality-specific factors.  A modality
renders its factors as a weighted sum of fixed Gaussian-blob basis images.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

GROUPS = ("HC", "AD", "other")
SPLITS = ("train", "val", "holdout")

MAGIC = b"MMDT"
VERSION = 1
DTYPE_F64 = 0


@dataclass(frozen=True)
class GeneratorConfig:
    n_subjects: int = 2000
    image_side: int = 16
    k_shared: int = 4
    k_spec1: int = 4
    k_spec2: int = 16
    noise_sigma: float = 0.3
    label_noise: float = 0.05
    group_ratios: tuple[float, float, float] = (0.70, 0.15, 0.15)
    split_ratios: tuple[float, float, float] = (0.70, 0.15, 0.15)
    shared_gain: tuple[float, float] = (1.0, 0.3)  # modality 2 carries a weak shared signal
    specific_gain: tuple[float, float] = (1.0, 2.0)
    # blob std ranges in pixels at side 16: broad shared structure, local nuisance detail
    shared_width: tuple[float, float] = (2.5, 4.0)
    specific_width: tuple[float, float] = (0.6, 1.0)
    other_shift: float = 1.0
    pairs_per_subject: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("group_ratios", "split_ratios", "shared_gain", "specific_gain", "shared_width", "specific_width"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        counts = (self.n_subjects, self.image_side, self.k_shared, self.pairs_per_subject)
        if min(counts) <= 0 or min(self.k_spec1, self.k_spec2) < 0:
            raise ValueError("generator counts must be positive")
        for name in ("group_ratios", "split_ratios"):
            ratios = getattr(self, name)
            if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
                raise ValueError(f"{name} must be three nonnegative values summing to 1, got {ratios}")
        if self.group_ratios[0] <= 0 or self.group_ratios[1] <= 0:
            raise ValueError("HC and AD ratios must be positive")
        if not 0 <= self.label_noise <= 0.5:
            raise ValueError("label_noise must lie in [0, 0.5]")
        for name in ("shared_width", "specific_width"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < low <= high")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")


@dataclass
class PairedDataset:
    images1: np.ndarray  # [N, side, side]
    images2: np.ndarray
    labels: np.ndarray  # 0=HC, 1=AD, 2=other
    subject_ids: np.ndarray
    split: np.ndarray  # index into SPLITS
    shared: np.ndarray | None = None  # true shared factors, synthetic data only
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.labels)
        if not (len(self.images1) == len(self.images2) == len(self.subject_ids) == len(self.split) == n):
            raise ValueError("dataset arrays are not aligned")
        for sid in np.unique(self.subject_ids):
            if len(np.unique(self.split[self.subject_ids == sid])) > 1:
                raise ValueError(f"subject {sid} spans more than one split")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_side(self) -> int:
        return self.images1.shape[-1]

    def images(self, modality: int) -> np.ndarray:
        return self.images1 if modality == 1 else self.images2

    def subset(self, idx) -> "PairedDataset":
        idx = np.asarray(idx)
        return PairedDataset(
            self.images1[idx], self.images2[idx], self.labels[idx], self.subject_ids[idx], self.split[idx],
            None if self.shared is None else self.shared[idx],
        )

    def split_indices(self, name: str) -> np.ndarray:
        return np.flatnonzero(self.split == SPLITS.index(name))

    def one_pair_per_subject(self) -> "PairedDataset":
        _, first = np.unique(self.subject_ids, return_index=True)
        return self.subset(np.sort(first))

    def to_tensors(self) -> dict[str, np.ndarray]:
        out = {
            "images1": self.images1,
            "images2": self.images2,
            "labels": self.labels.astype(np.float64),
            "subject_ids": self.subject_ids.astype(np.float64),
            "split": self.split.astype(np.float64),
        }
        if self.shared is not None:
            out["shared"] = self.shared
        return out

    @classmethod
    def from_tensors(cls, t: Mapping[str, np.ndarray]) -> "PairedDataset":
        return cls(
            np.asarray(t["images1"]), np.asarray(t["images2"]),
            np.asarray(t["labels"]).astype(np.int64), np.asarray(t["subject_ids"]).astype(np.int64),
            np.asarray(t["split"]).astype(np.int64), t.get("shared"),
        )


# --------------------------------------------------------------------------
# generator
# --------------------------------------------------------------------------


def blob_bases(rng: np.random.Generator, k: int, side: int, width=(1.0, 2.5)) -> np.ndarray:
    """``k`` unit-peak isotropic Gaussian blobs with random centers and widths."""
    scale = side / 16.0
    centers = rng.uniform(0.2 * side, 0.8 * side, size=(k, 2))
    widths = rng.uniform(width[0], width[1], size=k) * scale
    yy, xx = np.mgrid[0:side, 0:side] + 0.5
    d2 = (yy[None] - centers[:, 0, None, None]) ** 2 + (xx[None] - centers[:, 1, None, None]) ** 2
    return np.exp(-d2 / (2 * widths[:, None, None] ** 2))


def assign_labels(shared: np.ndarray, weights: np.ndarray, is_other: np.ndarray, n_ad: int,
                  label_noise: float, rng: np.random.Generator) -> np.ndarray:
    """AD for the ``n_ad`` highest ``w^T s`` among non-other subjects, then swap-flips.

    Flips exchange equal numbers of HC and AD labels so group sizes stay exact.
    """
    labels = np.full(len(shared), 2, dtype=np.int64)
    core = np.flatnonzero(~is_other)
    order = core[np.argsort(shared[core] @ weights, kind="stable")]
    labels[order[: len(core) - n_ad]] = 0
    labels[order[len(core) - n_ad:]] = 1
    n_flip = int(round(label_noise * n_ad))
    if n_flip:
        hc = rng.choice(np.flatnonzero(labels == 0), size=n_flip, replace=False)
        ad = rng.choice(np.flatnonzero(labels == 1), size=n_flip, replace=False)
        labels[hc], labels[ad] = 1, 0
    return labels


def stratified_split(labels: np.ndarray, ratios, rng: np.random.Generator) -> np.ndarray:
    split = np.zeros(len(labels), dtype=np.int64)
    for g in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == g))
        n_train = int(round(ratios[0] * len(members)))
        n_val = int(round(ratios[1] * len(members)))
        split[members[n_train:n_train + n_val]] = 1
        split[members[n_train + n_val:]] = 2
    return split


def generate(cfg: GeneratorConfig, seed: int | None = None) -> PairedDataset:
    seed = cfg.seed if seed is None else seed
    streams = np.random.SeedSequence(seed).spawn(7)
    r_bases, r_shared, r_label, r_spec1, r_spec2, r_noise, r_split = (np.random.default_rng(s) for s in streams)
    n, side = cfg.n_subjects, cfg.image_side

    n_other = int(round(cfg.group_ratios[2] * n))
    n_ad = int(round(cfg.group_ratios[1] * n))
    if n - n_other - n_ad < 1 or n_ad < 1:
        raise ValueError(f"group ratios {cfg.group_ratios} impossible for {n} subjects")

    # weights first so labels do not depend on the specific-factor counts
    weights = r_bases.normal(size=cfg.k_shared)
    weights /= np.linalg.norm(weights)
    shared_bases = [blob_bases(r_bases, cfg.k_shared, side, cfg.shared_width) for _ in range(2)]
    spec_bases = [blob_bases(r_bases, k, side, cfg.specific_width) for k in (cfg.k_spec1, cfg.k_spec2)]

    is_other = np.zeros(n, dtype=bool)
    is_other[r_label.choice(n, size=n_other, replace=False)] = True
    shared = r_shared.normal(size=(n, cfg.k_shared))
    # the extra group sits off the HC/AD axis
    shift_dir = np.linalg.svd(weights[None], full_matrices=True)[2][-1] if cfg.k_shared > 1 else weights
    shared[is_other] += cfg.other_shift * shift_dir
    labels = assign_labels(shared, weights, is_other, n_ad, cfg.label_noise, r_label)
    split = stratified_split(labels, cfg.split_ratios, r_split)

    reps = cfg.pairs_per_subject
    subject_ids = np.repeat(np.arange(n), reps)
    labels, split, shared = np.repeat(labels, reps), np.repeat(split, reps), np.repeat(shared, reps, axis=0)
    images = []
    for m, (rng_spec, k_spec) in enumerate(((r_spec1, cfg.k_spec1), (r_spec2, cfg.k_spec2))):
        spec = rng_spec.normal(size=(n * reps, k_spec))
        x = cfg.shared_gain[m] * np.einsum("nk,kij->nij", shared, shared_bases[m])
        if k_spec:
            x = x + cfg.specific_gain[m] * np.einsum("nk,kij->nij", spec, spec_bases[m])
        x = x + cfg.noise_sigma * r_noise.normal(size=x.shape)
        images.append(x)
    data = PairedDataset(images[0], images[1], labels, subject_ids, split, shared)
    data.extras = {"label_weights": weights, "is_other": np.repeat(is_other, reps)}
    return data


# --------------------------------------------------------------------------
# container
# --------------------------------------------------------------------------


class ContainerError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


def dump_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name, arr in tensors.items():
        try:
            raw_name = name.encode("ascii")
        except UnicodeEncodeError:
            raise ValueError(f"tensor name {name!r} is not ASCII") from None
        arr = np.asarray(arr, dtype="<f8")  # tobytes() emits C order; ascontiguousarray would promote 0-d to 1-d
        if arr.ndim > 255:
            raise ValueError("too many dimensions")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", DTYPE_F64, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def parse_tensors(buf: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise ContainerError(f"truncated {what}: expected {n} bytes, {len(buf) - pos} available", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise ContainerError("bad magic", 0)
    version, count = struct.unpack("<HI", take(6, "header"))
    if version != VERSION:
        raise ContainerError(f"unsupported version {version}", 4)
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name_at = pos
        name = take(name_len, "name").decode("ascii", errors="strict")
        if name in out:
            raise ContainerError(f"duplicate tensor name {name!r}", name_at)
        dtype, ndim = struct.unpack("<BB", take(2, "dtype"))
        if dtype != DTYPE_F64:
            raise ContainerError(f"unsupported dtype code {dtype}", pos - 2)
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim, "shape"))
        count_values = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        raw = take(8 * count_values, f"values of {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(buf):
        raise ContainerError(f"{len(buf) - pos} trailing bytes", pos)
    return out


def save_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dump_tensors(tensors))


def load_tensors(path) -> dict[str, np.ndarray]:
    return parse_tensors(Path(path).read_bytes())


def save_dataset(directory, data: PairedDataset, cfg: GeneratorConfig | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = data.to_tensors()
    save_tensors(directory / "dataset.mmdt", tensors)
    manifest = {
        "container": "dataset.mmdt",
        "images": ["images1", "images2"],
        "labels": "labels",
        "ids": "subject_ids",
        "splits": "split",
        "split_names": list(SPLITS),
        "group_names": list(GROUPS),
        "tensors": list(tensors),
    }
    if cfg is not None:
        manifest["generator"] = asdict(cfg)
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(directory) -> PairedDataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    t = load_tensors(directory / manifest["container"])
    return PairedDataset.from_tensors({
        "images1": t[manifest["images"][0]],
        "images2": t[manifest["images"][1]],
        "labels": t[manifest["labels"]],
        "subject_ids": t[manifest["ids"]],
        "split": t[manifest["splits"]],
        "shared": t.get("shared"),
    })


# --------------------------------------------------------------------------
# preprocessing
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class NormStats:
    mean: tuple[float, float]
    std: tuple[float, float]


def norm_stats(data: PairedDataset, idx=None, floor: float = 1e-8) -> NormStats:
    """Per-modality pixel mean and std over the given (training) indices."""
    idx = slice(None) if idx is None else idx
    means, stds = [], []
    for m in (1, 2):
        x = data.images(m)[idx]
        means.append(float(x.mean()))
        stds.append(max(float(x.std()), floor))
    return NormStats(tuple(means), tuple(stds))


def znormalize(images: np.ndarray, stats: NormStats, modality: int) -> np.ndarray:
    return (images - stats.mean[modality - 1]) / stats.std[modality - 1]


def normalized(data: PairedDataset, stats: NormStats) -> PairedDataset:
    out = data.subset(np.arange(len(data)))
    out.images1 = znormalize(data.images1, stats, 1)
    out.images2 = znormalize(data.images2, stats, 2)
    return out


@dataclass(frozen=True)
class AugmentFlags:
    hflip: bool = True
    vflip: bool = True
    crop: float | None = 0.875


NO_AUGMENT = AugmentFlags(False, False, None)


def augment(pair: tuple[np.ndarray, np.ndarray], rng: np.random.Generator, flags: AugmentFlags):
    """One flip/crop draw applied identically to both images of a pair.

    The crop keeps a ``crop * side`` window and pastes it back centered on a
    zero canvas, which amounts to a small random translation.
    """
    x1, x2 = pair
    side = x1.shape[-1]
    if flags.hflip and rng.random() < 0.5:
        x1, x2 = x1[:, ::-1], x2[:, ::-1]
    if flags.vflip and rng.random() < 0.5:
        x1, x2 = x1[::-1, :], x2[::-1, :]
    if flags.crop is not None:
        c = int(round(flags.crop * side))
        if c > side or c <= 0:
            raise ValueError(f"crop side {c} does not fit image side {side}")
        if c < side:
            oy, ox = rng.integers(0, side - c + 1, size=2)
            at = (side - c) // 2
            out = []
            for x in (x1, x2):
                canvas = np.zeros_like(x)
                canvas[at:at + c, at:at + c] = x[oy:oy + c, ox:ox + c]
                out.append(canvas)
            x1, x2 = out
    return np.ascontiguousarray(x1), np.ascontiguousarray(x2)


def augment_batch(x1: np.ndarray, x2: np.ndarray, rng: np.random.Generator, flags: AugmentFlags):
    if flags == NO_AUGMENT:
        return x1, x2
    pairs = [augment((a, b), rng, flags) for a, b in zip(x1, x2)]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def disk_mask(side: int, coverage: float = 0.6) -> np.ndarray:
    """Centered disk covering roughly ``coverage`` of the image area."""
    radius = side * np.sqrt(coverage / np.pi)
    yy, xx = np.mgrid[0:side, 0:side] + 0.5
    return ((yy - side / 2) ** 2 + (xx - side / 2) ** 2 <= radius**2).astype(np.float64)
