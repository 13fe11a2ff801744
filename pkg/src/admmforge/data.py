"""Dataset ingestion: IDX (MNIST-format) files, CIFAR-10 binaries, and a
deterministic synthetic handwritten-digit generator.

The synthetic generator renders vector stroke skeletons per digit class
and applies per-sample affine + elastic deformations, producing
MNIST-format 28x28 grayscale corpora. It exists so the full pipeline can
run self-contained when the real MNIST files are not on disk; the files
it writes go through the exact same IDX load path.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import FormatError, InputError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

# Normalization applied after scaling pixels to [0,1]; kept in one place
# so runs can override it from config rather than editing call sites.
DEFAULT_NORMALIZATION = {"mean": 0.1307, "std": 0.3081}

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


@dataclass
class Dataset:
    images: np.ndarray          # (N, C, H, W) float32, normalized (or (N, d) flat)
    labels: np.ndarray          # (N,) int64
    split: str = "train"
    classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise InputError(
                f"{len(self.images)} images vs {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0
                                 or self.labels.max() >= self.classes):
            raise InputError("label outside [0, classes)")

    def __len__(self):
        return len(self.labels)

    def subset(self, n: int, split: str | None = None) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n],
                       split or self.split, self.classes)


def _open_maybe_gzip(path):
    f = open(path, "rb")
    head = f.read(2)
    f.seek(0)
    if head == b"\x1f\x8b":
        return gzip.open(f)
    return f


def _read_exact(f, n: int, path, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(
            f"{path}: truncated while reading {what} (wanted {n} bytes, got {len(buf)})")
    return buf


def read_idx(path) -> np.ndarray:
    """Parse one IDX ubyte file (images or labels), gzip-transparent."""
    with _open_maybe_gzip(path) as f:
        magic = struct.unpack(">I", _read_exact(f, 4, path, "magic"))[0]
        if magic == IMAGES_MAGIC:
            n, rows, cols = struct.unpack(">III", _read_exact(f, 12, path, "header"))
            raw = _read_exact(f, n * rows * cols, path, f"{n} images")
            return np.frombuffer(raw, dtype=np.uint8).reshape(n, rows, cols)
        if magic == LABELS_MAGIC:
            n = struct.unpack(">I", _read_exact(f, 4, path, "header"))[0]
            raw = _read_exact(f, n, path, f"{n} labels")
            return np.frombuffer(raw, dtype=np.uint8).copy()
        raise FormatError(
            f"{path}: bad magic at offset 0: expected 0x{IMAGES_MAGIC:08x} or "
            f"0x{LABELS_MAGIC:08x}, got 0x{magic:08x}")


def write_idx(path, array: np.ndarray):
    """Write a uint8 array as IDX: (N,H,W) -> images file, (N,) -> labels file."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    if arr.ndim == 3:
        header = struct.pack(">IIII", IMAGES_MAGIC, *arr.shape)
    elif arr.ndim == 1:
        header = struct.pack(">II", LABELS_MAGIC, arr.shape[0])
    else:
        raise InputError(f"cannot write IDX for ndim={arr.ndim}")
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(header)
        f.write(arr.tobytes())


def normalize_images(raw: np.ndarray, mean: float, std: float) -> np.ndarray:
    x = raw.astype(np.float32) / 255.0
    return ((x - mean) / std).astype(np.float32)


def load_mnist_idx(images_path, labels_path, *, normalization=None,
                   split: str = "train") -> Dataset:
    """Load one MNIST-format split; pixels scaled to [0,1] then normalized."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise FormatError(f"{images_path}: expected an images file")
    if labels.ndim != 1:
        raise FormatError(f"{labels_path}: expected a labels file")
    if len(images) != len(labels):
        raise FormatError(
            f"count mismatch: {len(images)} images vs {len(labels)} labels")
    if len(labels) and labels.max() > 9:
        raise FormatError(f"{labels_path}: label byte > 9")
    norm = {**DEFAULT_NORMALIZATION, **(normalization or {})}
    x = normalize_images(images, norm["mean"], norm["std"])[:, None, :, :]
    return Dataset(x, labels.astype(np.int64), split=split)


def load_mnist_dir(data_dir, *, normalization=None) -> tuple[Dataset, Dataset]:
    """Load train/test splits from a directory with the standard file names
    (plain or .gz)."""
    import os

    def find(stem):
        for cand in (stem, stem + ".gz"):
            p = os.path.join(data_dir, cand)
            if os.path.exists(p):
                return p
        raise InputError(f"missing {stem}[.gz] under {data_dir}")

    train = load_mnist_idx(find(MNIST_FILES["train_images"]),
                           find(MNIST_FILES["train_labels"]),
                           normalization=normalization, split="train")
    test = load_mnist_idx(find(MNIST_FILES["test_images"]),
                          find(MNIST_FILES["test_labels"]),
                          normalization=normalization, split="test")
    return train, test


def load_cifar10_bin(paths, *, split: str = "train") -> Dataset:
    """CIFAR-10 binary batches: records of 1 label byte + 3072 pixel bytes."""
    images, labels = [], []
    record = 3073
    for path in paths:
        with _open_maybe_gzip(path) as f:
            raw = f.read()
        if len(raw) % record:
            raise FormatError(f"{path}: size {len(raw)} not a multiple of {record}")
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
        labels.append(arr[:, 0])
        images.append(arr[:, 1:].reshape(-1, 3, 32, 32))
    x = np.concatenate(images).astype(np.float32) / 255.0
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    y = np.concatenate(labels).astype(np.int64)
    if len(y) and y.max() > 9:
        raise FormatError("label byte > 9")
    return Dataset(x.astype(np.float32), y, split=split)


# --------------------------------------------------------------------------
# Synthetic handwritten digits
# --------------------------------------------------------------------------

def _ellipse(cx, cy, rx, ry, n=28):
    t = np.linspace(0, 2 * np.pi, n + 1)
    return np.stack([cx + rx * np.sin(t), cy - ry * np.cos(t)], axis=1)


def _strokes():
    """Per class: list of variants, each a list of polylines in [0,1]^2 (y down)."""
    P = lambda *pts: np.asarray(pts, dtype=np.float64)
    return {
        0: [[_ellipse(.5, .5, .26, .36)],
            [_ellipse(.5, .5, .22, .38)]],
        1: [[P((.5, .1), (.5, .9))],
            [P((.34, .3), (.52, .1), (.52, .9))]],
        2: [[P((.25, .3), (.33, .14), (.55, .1), (.72, .2), (.73, .36),
               (.58, .55), (.38, .7), (.25, .86)), P((.25, .86), (.77, .86))],
            [P((.28, .26), (.4, .12), (.62, .12), (.72, .28), (.62, .5),
               (.3, .84)), P((.3, .84), (.75, .84))]],
        3: [[P((.27, .16), (.47, .1), (.66, .17), (.69, .3), (.54, .43), (.44, .45)),
             P((.44, .45), (.64, .5), (.73, .65), (.64, .83), (.42, .9), (.26, .81))],
            [P((.3, .14), (.55, .1), (.7, .24), (.58, .42), (.46, .46)),
             P((.46, .46), (.68, .54), (.7, .74), (.52, .88), (.3, .84))]],
        4: [[P((.58, .1), (.2, .6), (.8, .6)), P((.62, .34), (.62, .9))],
            [P((.5, .12), (.26, .56), (.76, .56)), P((.58, .3), (.58, .88))]],
        5: [[P((.7, .12), (.32, .12), (.3, .44), (.5, .4), (.68, .48),
               (.72, .66), (.6, .84), (.4, .88), (.26, .78))],
            [P((.72, .14), (.36, .14), (.33, .4), (.56, .38), (.72, .52),
               (.7, .72), (.5, .87), (.3, .8))]],
        6: [[P((.62, .1), (.45, .3), (.34, .52), (.3, .66)),
             _ellipse(.47, .69, .18, .18)],
            [P((.66, .12), (.46, .34), (.34, .58)),
             _ellipse(.49, .7, .2, .17)]],
        7: [[P((.23, .13), (.75, .13), (.44, .9))],
            [P((.24, .14), (.76, .14), (.46, .88)), P((.33, .5), (.62, .5))]],
        8: [[_ellipse(.5, .29, .18, .17), _ellipse(.5, .67, .22, .21)],
            [_ellipse(.5, .3, .2, .16), _ellipse(.5, .68, .19, .2)]],
        9: [[_ellipse(.52, .31, .2, .19), P((.72, .33), (.68, .6), (.57, .9))],
            [_ellipse(.5, .3, .18, .18), P((.68, .32), (.68, .66), (.6, .88))]],
    }


def _render_prototype(polylines, res: int, halfwidth: float, aa: float) -> np.ndarray:
    coords = (np.arange(res) + 0.5) / res
    gx, gy = np.meshgrid(coords, coords, indexing="xy")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    dmin = np.full(pts.shape[0], np.inf)
    for line in polylines:
        a, b = line[:-1], line[1:]
        ab = b - a
        denom = (ab * ab).sum(axis=1)
        denom[denom == 0] = 1.0
        ap = pts[:, None, :] - a[None, :, :]
        t = np.clip((ap * ab[None]).sum(axis=2) / denom[None], 0.0, 1.0)
        closest = a[None] + t[..., None] * ab[None]
        d = np.sqrt(((pts[:, None, :] - closest) ** 2).sum(axis=2)).min(axis=1)
        dmin = np.minimum(dmin, d)
    ink = np.clip((halfwidth + aa - dmin) / aa, 0.0, 1.0)
    return ink.reshape(res, res).astype(np.float32)


class SyntheticDigits:
    """Deterministic MNIST-format digit sampler.

    ``warp`` scales all geometric deformations; 1.0 is the calibrated
    default difficulty.
    """

    def __init__(self, seed=0, res: int = 80, warp: float = 1.0,
                 noise: float = 0.035):
        self.rng = np.random.Generator(np.random.PCG64(seed))  # int or SeedSequence
        self.res = res
        self.warp = warp
        self.noise = noise
        self.prototypes = []
        for cls in range(10):
            variants = []
            for polylines in _strokes()[cls]:
                thin = _render_prototype(polylines, res, 0.030, 0.022)
                thick = _render_prototype(polylines, res, 0.046, 0.022)
                variants.extend([thin, thick])
            self.prototypes.append(variants)

    def sample(self, cls: int) -> np.ndarray:
        rng, w = self.rng, self.warp
        proto = self.prototypes[cls][rng.integers(len(self.prototypes[cls]))]
        theta = rng.normal(0.0, 0.16) * w
        logsx, logsy = rng.normal(0.0, 0.09, size=2) * w
        shear = rng.normal(0.0, 0.14) * w
        tx, ty = rng.uniform(-0.07, 0.07, size=2) * w
        c, s = np.cos(theta), np.sin(theta)
        mat = (np.array([[c, -s], [s, c]])
               @ np.array([[1.0, shear], [0.0, 1.0]])
               @ np.diag([np.exp(logsx), np.exp(logsy)]))
        out = 28
        coords = (np.arange(out) + 0.5) / out - 0.5
        gx, gy = np.meshgrid(coords, coords, indexing="xy")
        src = np.tensordot(mat, np.stack([gx, gy]), axes=(1, 0))
        src += np.array([tx + 0.5, ty + 0.5]).reshape(2, 1, 1)
        # smooth elastic displacement, in source units
        amp = 0.05 * w
        disp = ndimage.gaussian_filter(rng.normal(0, 1, size=(2, out, out)),
                                       sigma=(0, 3.0, 3.0))
        disp *= amp / (np.abs(disp).max() + 1e-9)
        src = src + disp
        img = ndimage.map_coordinates(proto, [src[1] * self.res - 0.5,
                                              src[0] * self.res - 0.5],
                                      order=1, mode="constant", cval=0.0)
        img = np.clip(img, 0.0, 1.0) ** rng.uniform(0.75, 1.5)
        img *= rng.uniform(0.82, 1.0)
        img += rng.normal(0.0, self.noise, size=img.shape)
        return np.clip(img, 0.0, 1.0)

    def batch(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        labels = self.rng.integers(0, 10, size=n)
        images = np.empty((n, 28, 28), dtype=np.uint8)
        for i, cls in enumerate(labels):
            images[i] = np.round(self.sample(int(cls)) * 255).astype(np.uint8)
        return images, labels.astype(np.int64)


def make_synthetic_digits(n_train: int, n_test: int, seed: int = 0,
                          warp: float = 1.0) -> tuple[Dataset, Dataset]:
    """Generate normalized train/test splits directly (no files)."""
    root = np.random.SeedSequence(seed)
    s_train, s_test = root.spawn(2)
    norm = DEFAULT_NORMALIZATION
    out = []
    for spl, n, ss in (("train", n_train, s_train), ("test", n_test, s_test)):
        gen = SyntheticDigits(seed=ss, warp=warp)
        imgs, labels = gen.batch(n)
        x = normalize_images(imgs, norm["mean"], norm["std"])[:, None]
        out.append(Dataset(x, labels, split=spl))
    return out[0], out[1]


def write_synthetic_mnist(data_dir, n_train: int, n_test: int, seed: int = 0,
                          warp: float = 1.0):
    """Write a synthetic corpus as the four standard MNIST-format IDX files."""
    import os

    os.makedirs(data_dir, exist_ok=True)
    root = np.random.SeedSequence(seed)
    s_train, s_test = root.spawn(2)
    for (img_key, lbl_key), n, ss in (
            (("train_images", "train_labels"), n_train, s_train),
            (("test_images", "test_labels"), n_test, s_test)):
        gen = SyntheticDigits(seed=ss, warp=warp)
        imgs, labels = gen.batch(n)
        write_idx(os.path.join(data_dir, MNIST_FILES[img_key]), imgs)
        write_idx(os.path.join(data_dir, MNIST_FILES[lbl_key]),
                  labels.astype(np.uint8))


def xor_dataset(dtype=np.float32) -> Dataset:
    """The four XOR points as a 2-feature, 2-class dataset."""
    x = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=dtype)
    y = np.array([0, 1, 1, 0], dtype=np.int64)
    return Dataset(x, y, split="train", classes=2)
