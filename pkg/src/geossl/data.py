"""Datasets: benchmark ingestion with a hashed on-disk cache, and synthetic sets.

Cache layout under ``<root>/cache/<key>/``::

    manifest.json        {"name", "num_classes", "files": {split: sha256}}
    train.npz, test.npz  images uint8 NxHxWxC, labels int64

Every cache read re-hashes the blob against the manifest.
"""
from __future__ import annotations

import hashlib
import json
import os
import pickle
import tarfile
import urllib.request
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from filelock import FileLock

DATA_ROOT_ENV = "GEOSSL_DATA_ROOT"

# per-channel statistics used for input normalization
CHANNEL_STATS = {
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "cifar100": ((0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)),
    "svhn": ((0.4377, 0.4438, 0.4728), (0.1980, 0.2010, 0.1970)),
    "synthetic-shapes": ((0.5, 0.5, 0.5), (0.25, 0.25, 0.25)),
    "synthetic-arrows": ((0.5, 0.5, 0.5), (0.25, 0.25, 0.25)),
}

ARCHIVES = {
    "cifar10": [
        ("cifar-10-python.tar.gz", "https://www.cs.toronto.edu/~kriz/cifar-10-python.tar.gz",
         "c58f30108f718f92721af3b95e74349a"),
    ],
    "cifar100": [
        ("cifar-100-python.tar.gz", "https://www.cs.toronto.edu/~kriz/cifar-100-python.tar.gz",
         "eb9058c3a382ffc7106e4002c42a8d85"),
    ],
    "svhn": [
        ("train_32x32.mat", "http://ufldl.stanford.edu/housenumbers/train_32x32.mat",
         "e26dedcc434d2e4c54c9b2d4a06d8373"),
        ("test_32x32.mat", "http://ufldl.stanford.edu/housenumbers/test_32x32.mat",
         "eb5a983be6a315427106f1b164d9cef3"),
    ],
}


class DatasetError(RuntimeError):
    pass


class IntegrityError(DatasetError):
    pass


class FetchError(DatasetError):
    pass


@dataclass
class DatasetHandle:
    name: str
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    num_classes: int
    mean: tuple = (0.5, 0.5, 0.5)
    std: tuple = (0.5, 0.5, 0.5)
    cache_path: Path | None = None
    class_names: list = field(default_factory=list)

    @property
    def resolution(self) -> tuple[int, int]:
        return tuple(self.train_images.shape[1:3])

    @property
    def split_sizes(self) -> dict:
        return {"train": len(self.train_labels), "test": len(self.test_labels)}

    def split(self, name: str):
        if name == "train":
            return self.train_images, self.train_labels
        if name == "test":
            return self.test_images, self.test_labels
        raise KeyError(name)


def default_root() -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, Path.home() / ".cache" / "geossl"))


# --- synthetic generators ---

def _noise_background(rng, size):
    base = rng.uniform(0.0, 0.4, size=3)
    return np.clip(base + rng.normal(0.0, 0.06, size=(size, size, 3)), 0.0, 1.0)


def _bright_colour(rng):
    # shapes are always brighter than the background; hue is random
    colour = rng.uniform(0.3, 1.0, size=3)
    return colour / colour.max() * rng.uniform(0.7, 1.0)


def _triangle_mask(xs, ys, cx, cy, r):
    # upward equilateral triangle inscribed in a circle of radius r
    top = cy - r
    bottom = cy + r / 2
    half_w = (ys - top) / (1.5 * r) * (r * np.sqrt(3) / 2)
    return (ys >= top) & (ys <= bottom) & (np.abs(xs - cx) <= half_w)


def synthetic_shapes(n: int, seed: int, size: int = 32):
    """Discs (0), squares (1) and triangles (2) of random position, size and colour on noise."""
    if n < 10:
        raise ValueError("n must be at least 10")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % 3)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.empty((n, size, size, 3), dtype=np.float32)
    for i, label in enumerate(labels):
        img = _noise_background(rng, size)
        r = rng.uniform(0.22, 0.36) * size
        cx, cy = size / 2 + rng.uniform(-0.15, 0.15, size=2) * size
        if label == 0:
            mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= r**2
        elif label == 1:
            half = r / np.sqrt(2) * 1.1
            mask = (np.abs(xs - cx) <= half) & (np.abs(ys - cy) <= half)
        else:
            mask = _triangle_mask(xs, ys, cx, cy, r)
        img[mask] = _bright_colour(rng)
        images[i] = img
    return images, labels.astype(np.int64)


def _arrow_mask(xs, ys, cx, cy, length, width):
    # up-pointing arrow: shaft below, triangular head above
    head_h = length * 0.45
    top = cy - length / 2
    head_base = top + head_h
    head = (ys >= top) & (ys <= head_base) & (np.abs(xs - cx) <= (ys - top) / head_h * width)
    shaft = (ys > head_base) & (ys <= cy + length / 2) & (np.abs(xs - cx) <= width * 0.35)
    return head | shaft


def synthetic_arrows(n: int, seed: int, size: int = 32):
    """Up arrows (0) and the same images rotated 180 degrees (1)."""
    if n < 10:
        raise ValueError("n must be at least 10")
    rng = np.random.default_rng(seed)
    half = n // 2
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    up = np.empty((half, size, size, 3), dtype=np.float32)
    for i in range(half):
        img = _noise_background(rng, size)
        length = rng.uniform(0.45, 0.75) * size
        width = rng.uniform(0.18, 0.3) * size
        cx = rng.uniform(width, size - width)
        cy = rng.uniform(length / 2, size - length / 2)
        img[_arrow_mask(xs, ys, cx, cy, length, width)] = _bright_colour(rng)
        up[i] = img
    down = np.rot90(up, 2, axes=(1, 2))
    images = np.concatenate([up, down])
    labels = np.concatenate([np.zeros(half, np.int64), np.ones(half, np.int64)])
    order = rng.permutation(len(labels))
    return np.ascontiguousarray(images[order]), labels[order]


_SYNTHETIC = {"synthetic-shapes": (synthetic_shapes, ["disc", "square", "triangle"]),
              "synthetic-arrows": (synthetic_arrows, ["up", "down"])}


# --- cache ---

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _md5(path: Path) -> str:
    h = hashlib.md5()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _to_uint8(images):
    return np.clip(np.round(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)


def write_cache(cache_dir: Path, name: str, num_classes: int, splits: dict) -> None:
    cache_dir.mkdir(parents=True, exist_ok=True)
    files = {}
    for split, (images, labels) in splits.items():
        path = cache_dir / f"{split}.npz"
        tmp = cache_dir / f".{split}.npz.tmp"
        with open(tmp, "wb") as fh:
            np.savez(fh, images=_to_uint8(images), labels=np.asarray(labels, np.int64))
        os.replace(tmp, path)
        files[split] = _sha256(path)
    manifest = {"name": name, "num_classes": num_classes, "files": files}
    tmp = cache_dir / ".manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, cache_dir / "manifest.json")


def read_cache(cache_dir: Path) -> tuple[dict, dict]:
    """Load a cache directory, verifying every blob; raises IntegrityError on mismatch."""
    try:
        manifest = json.loads((cache_dir / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"unreadable cache manifest in {cache_dir}") from exc
    splits = {}
    for split, digest in manifest["files"].items():
        path = cache_dir / f"{split}.npz"
        if not path.exists() or _sha256(path) != digest:
            raise IntegrityError(f"cache blob {path} does not match its manifest hash")
        with np.load(path) as blob:
            splits[split] = (blob["images"].astype(np.float32) / 255.0, blob["labels"])
    return manifest, splits


def invalidate_cache(cache_dir: Path) -> None:
    for p in cache_dir.glob("*"):
        p.unlink()


# --- benchmark parsing ---

def _fetch(root: Path, name: str, download: bool) -> list[Path]:
    paths = []
    for filename, url, md5 in ARCHIVES[name]:
        path = root / "raw" / filename
        if not path.exists():
            if not download:
                raise FetchError(f"{path} missing and download disabled")
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(path.suffix + ".part")
            try:
                urllib.request.urlretrieve(url, tmp)
            except OSError as exc:
                raise FetchError(f"could not download {url}: {exc}") from exc
            os.replace(tmp, path)
        if _md5(path) != md5:
            raise IntegrityError(f"checksum mismatch for {path}")
        paths.append(path)
    return paths


def _cifar_images(flat):
    return flat.reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).astype(np.float32) / 255.0


def _parse_cifar(archive: Path, name: str):
    fine = name == "cifar100"
    members = (
        {"train": ["train"], "test": ["test"]}
        if fine
        else {"train": [f"data_batch_{i}" for i in range(1, 6)], "test": ["test_batch"]}
    )
    key = b"fine_labels" if fine else b"labels"
    out = {}
    with tarfile.open(archive, "r:gz") as tar:
        index = {Path(m.name).name: m for m in tar.getmembers()}
        for split, names in members.items():
            images, labels = [], []
            for member in names:
                batch = pickle.load(tar.extractfile(index[member]), encoding="bytes")
                images.append(_cifar_images(batch[b"data"]))
                labels.extend(batch[key])
            out[split] = (np.concatenate(images), np.asarray(labels, np.int64))
    return out, 100 if fine else 10


def _parse_svhn(paths):
    from scipy.io import loadmat

    out = {}
    for split, path in zip(("train", "test"), paths):
        mat = loadmat(path)
        images = mat["X"].transpose(3, 0, 1, 2).astype(np.float32) / 255.0
        labels = mat["y"].reshape(-1).astype(np.int64)
        labels[labels == 10] = 0
        out[split] = (images, labels)
    return out, 10


def _build(name, root, download, n_train, n_test, seed):
    if name in _SYNTHETIC:
        gen, _ = _SYNTHETIC[name]
        splits = {"train": gen(n_train, seed), "test": gen(n_test, seed + 1_000_003)}
        return splits, len(_SYNTHETIC[name][1])
    if name in ("cifar10", "cifar100"):
        return _parse_cifar(_fetch(root, name, download)[0], name)
    if name == "svhn":
        return _parse_svhn(_fetch(root, name, download))
    raise DatasetError(f"unknown dataset {name!r}")


def _cache_key(name, n_train, n_test, seed):
    if name in _SYNTHETIC:
        return f"{name}-n{n_train}-t{n_test}-s{seed}"
    return name


def load_dataset(
    name: str,
    root: str | Path | None = None,
    *,
    download: bool = False,
    n_train: int = 500,
    n_test: int = 200,
    seed: int = 0,
    use_cache: bool = True,
) -> DatasetHandle:
    """Load a dataset by name.

    Names: ``cifar10``, ``cifar100``, ``svhn``, ``svhn-6v9``, ``synthetic-shapes``,
    ``synthetic-arrows``. ``n_train``, ``n_test`` and ``seed`` only apply to the
    synthetic sets. A cache whose hashes do not verify raises ``IntegrityError``
    and is removed, so the next call rebuilds it.
    """
    if name == "svhn-6v9":
        return subset_classes(load_dataset("svhn", root, download=download, use_cache=use_cache), [6, 9])
    base = name
    root = Path(root) if root is not None else default_root()
    mean, std = CHANNEL_STATS.get(base, ((0.5,) * 3, (0.5,) * 3))
    class_names = list(_SYNTHETIC[base][1]) if base in _SYNTHETIC else []
    if not use_cache:
        splits, c = _build(base, root, download, n_train, n_test, seed)
        return _handle(base, splits, c, mean, std, None, class_names)

    cache_dir = root / "cache" / _cache_key(base, n_train, n_test, seed)
    cache_dir.mkdir(parents=True, exist_ok=True)
    with FileLock(str(cache_dir) + ".lock"):
        if (cache_dir / "manifest.json").exists():
            try:
                manifest, splits = read_cache(cache_dir)
            except IntegrityError:
                invalidate_cache(cache_dir)
                raise
            return _handle(base, splits, manifest["num_classes"], mean, std, cache_dir, class_names)
        splits, c = _build(base, root, download, n_train, n_test, seed)
        write_cache(cache_dir, base, c, splits)
        # reload so cached and fresh loads are byte-identical
        manifest, splits = read_cache(cache_dir)
        return _handle(base, splits, c, mean, std, cache_dir, class_names)


def _handle(name, splits, num_classes, mean, std, cache_dir, class_names):
    (tr_x, tr_y), (te_x, te_y) = splits["train"], splits["test"]
    return DatasetHandle(name, tr_x, tr_y, te_x, te_y, num_classes, tuple(mean), tuple(std),
                         cache_dir, class_names)


def subset_classes(handle: DatasetHandle, classes) -> DatasetHandle:
    """Keep only ``classes``, relabelled to ``0..len(classes)-1`` in the given order."""
    classes = [int(c) for c in classes]
    if len(set(classes)) != len(classes):
        raise DatasetError("classes must be distinct")
    if len(classes) < 2:
        raise DatasetError("a subset needs at least two classes")
    if any(c < 0 or c >= handle.num_classes for c in classes):
        raise DatasetError(f"classes must lie in [0, {handle.num_classes})")
    remap = np.full(handle.num_classes, -1, np.int64)
    remap[classes] = np.arange(len(classes))

    def pick(images, labels):
        keep = np.isin(labels, classes)
        return images[keep], remap[labels[keep]]

    tr_x, tr_y = pick(handle.train_images, handle.train_labels)
    te_x, te_y = pick(handle.test_images, handle.test_labels)
    if len(tr_y) == 0 or len(te_y) == 0:
        raise DatasetError("class subset is empty")
    names = [handle.class_names[c] for c in classes] if handle.class_names else [str(c) for c in classes]
    suffix = "v".join(str(c) for c in classes)
    return replace(handle, name=f"{handle.name}-{suffix}", train_images=tr_x, train_labels=tr_y,
                   test_images=te_x, test_labels=te_y, num_classes=len(classes), class_names=names)


def fetch_dataset(name: str, root: str | Path | None = None) -> list[Path]:
    root = Path(root) if root is not None else default_root()
    if name in _SYNTHETIC:
        return []
    return _fetch(root, name.replace("-6v9", ""), download=True)
