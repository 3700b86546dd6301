"""Dataset Agent - synthetic ultrasound-like data, PGM I/O, resizing and splits."""
import math
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import binary_erosion, gaussian_filter, generate_binary_structure, uniform_filter

from pbeunet.console import echo
from pbeunet.errors import DatasetError, PgmFormatError
from pbeunet.functional import bilinear_matrix
from pbeunet.models import Sample, SynthConfig
from pbeunet.rng import make_rng, stream_seed
from pbeunet.tensor import Tensor

MASK_FRACTION = (0.005, 0.6)
MIN_CONTRAST = 0.05
MAX_ATTEMPTS = 200
FOUR_NEIGHBOURS = generate_binary_structure(2, 1)

ArrayLike = Union[Tensor, np.ndarray]


def as_array(x: ArrayLike) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _plane(x: ArrayLike) -> np.ndarray:
    """The single (H, W) plane of a (H,W) or (1,1,H,W) map."""
    array = as_array(x)
    if array.ndim == 4 and array.shape[:2] == (1, 1):
        return array[0, 0]
    if array.ndim == 2:
        return array
    raise ValueError(f"expected a (H,W) or (1,1,H,W) map, got shape {array.shape}")


def extract_boundary(mask: ArrayLike) -> np.ndarray:
    """Inner one-pixel rim: mask AND NOT erode(mask), 4-neighbourhood, outside counts as background.

    Works on the last two axes; returns a bool array of the input's shape.
    """
    array = as_array(mask) > 0.5
    planes = array.reshape((-1,) + array.shape[-2:])
    rim = np.empty_like(planes)
    for k, plane in enumerate(planes):
        rim[k] = plane & ~binary_erosion(plane, structure=FOUR_NEIGHBOURS, border_value=0)
    return rim.reshape(array.shape)


def _to_sample(sample_id: str, image: np.ndarray, mask: np.ndarray) -> Sample:
    binary = mask.astype(bool)
    return Sample(
        id=sample_id,
        image=Tensor(image[None, None]),
        mask=Tensor(binary[None, None].astype(np.float64)),
        boundary=Tensor(extract_boundary(binary)[None, None].astype(np.float64)),
    )


def _ellipse(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.2 * size, 0.8 * size, size=2)
    a, b = rng.uniform(0.04 * size, 0.20 * size, size=2)
    theta = rng.uniform(0.0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def synth_one(cfg: SynthConfig, index: int) -> Tuple[np.ndarray, np.ndarray]:
    """Image in [0,1] and boolean mask of sample `index`, independent of generation order."""
    rng = make_rng(stream_seed(cfg.seed, index))
    size = cfg.size
    low, high = cfg.blob_count_range
    for _ in range(MAX_ATTEMPTS):
        field = gaussian_filter(rng.normal(size=(size, size)), sigma=size / 8, mode="reflect")
        span = field.max() - field.min()
        background = 0.4 + 0.3 * (field - field.min()) / (span if span > 0 else 1.0)

        mask = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(low, high + 1))):
            mask |= _ellipse(rng, size)
        offset = rng.uniform(*cfg.contrast)
        lesion = mask * offset
        if cfg.blur_radius > 0:
            lesion = uniform_filter(lesion, size=2 * cfg.blur_radius + 1, mode="constant")
        image = background - lesion

        speckle = rng.normal(size=(size, size))
        fraction = mask.mean()
        if not MASK_FRACTION[0] < fraction < MASK_FRACTION[1]:
            continue
        if abs(image[mask].mean() - image[~mask].mean()) < MIN_CONTRAST:
            continue
        image = np.clip(image * (1.0 + cfg.speckle_strength * speckle), 0.0, 1.0)
        return image, mask
    raise DatasetError(f"could not draw a valid sample in {MAX_ATTEMPTS} attempts", f"synth_{index:04d}")


def synth_generate(cfg: SynthConfig) -> List[Sample]:
    return [_to_sample(f"synth_{k:04d}", *synth_one(cfg, k)) for k in range(cfg.count)]


def _read_token(data: bytes, pos: int) -> Tuple[bytes, int]:
    """Next whitespace-delimited header token, skipping '#' comments."""
    while pos < len(data):
        if data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
        elif data[pos:pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PgmFormatError("unexpected end of header", start)
    return data[start:pos], pos


def _read_int(data: bytes, pos: int, label: str) -> Tuple[int, int]:
    token, end = _read_token(data, pos)
    if not token.isdigit():
        raise PgmFormatError(f"{label} is not a decimal integer: {token!r}", end - len(token))
    return int(token), end


def decode_pgm(data: bytes) -> np.ndarray:
    """(H, W) uint8 raster of a binary 8-bit P5 file."""
    if data[:2] != b"P5":
        raise PgmFormatError(f"bad magic {data[:2]!r}, expected b'P5'", 0)
    pos = 2
    width, pos = _read_int(data, pos, "width")
    height, pos = _read_int(data, pos, "height")
    if width < 1 or height < 1:
        raise PgmFormatError(f"non-positive size {width}x{height}", pos)
    maxval, pos = _read_int(data, pos, "maxval")
    if maxval != 255:
        raise PgmFormatError(f"maxval must be 255, got {maxval}", pos)
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise PgmFormatError("missing whitespace after maxval", pos)
    pos += 1
    expected = width * height
    payload = data[pos:pos + expected]
    if len(payload) < expected:
        raise PgmFormatError(f"truncated payload: expected {expected} bytes, found {len(payload)}", pos + len(payload))
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width)


def encode_pgm(plane: np.ndarray) -> bytes:
    values = np.rint(np.clip(plane, 0.0, 1.0) * 255.0).astype(np.uint8)
    height, width = values.shape
    return f"P5\n{width} {height}\n255\n".encode("ascii") + values.tobytes()


def read_pgm(path: Union[str, Path]) -> Tensor:
    """Tensor (1,1,H,W) scaled to [0,1]."""
    raster = decode_pgm(Path(path).read_bytes())
    return Tensor(raster[None, None] / 255.0)


def write_pgm(path: Union[str, Path], image: ArrayLike) -> None:
    """Writes round(v * 255) of a [0,1] map; binary masks come out as {0, 255}."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_pgm(_plane(image).astype(np.float64)))


def resize_bilinear(plane: np.ndarray, height: int, width: int) -> np.ndarray:
    if plane.shape == (height, width):
        return plane
    rows = bilinear_matrix(height, plane.shape[0])
    cols = bilinear_matrix(width, plane.shape[1])
    return rows @ plane @ cols.T


def resize_nearest(plane: np.ndarray, height: int, width: int) -> np.ndarray:
    rows = np.minimum(((np.arange(height) + 0.5) * plane.shape[0] / height).astype(np.int64), plane.shape[0] - 1)
    cols = np.minimum(((np.arange(width) + 0.5) * plane.shape[1] / width).astype(np.int64), plane.shape[1] - 1)
    return plane[rows[:, None], cols[None, :]]


def split(samples: Sequence[Sample], ratio: float, seed: int) -> Tuple[List[Sample], List[Sample]]:
    """Seeded shuffle, then the first round(ratio * n) samples train."""
    order = make_rng(seed).permutation(len(samples))
    cut = int(round(ratio * len(samples)))
    shuffled = [samples[k] for k in order]
    return shuffled[:cut], shuffled[cut:]


class DatasetAgent:
    """Agent responsible for producing, storing and loading datasets."""

    def __init__(self, verbose: bool = True):
        self.verbose = verbose

    def _say(self, message: str) -> None:
        if self.verbose:
            echo(message)

    def synthesize(self, cfg: SynthConfig) -> List[Sample]:
        self._say(f"🤖 Dataset Agent: Generating {cfg.count} synthetic samples at {cfg.size}x{cfg.size} (seed {cfg.seed})")
        samples = synth_generate(cfg)
        mean = float(np.mean([s.image.data.mean() for s in samples]))
        self._say(f"✅ Dataset Agent: {len(samples)} samples, mean intensity {mean:.4f}")
        return samples

    def write(self, directory: Union[str, Path], samples: Sequence[Sample]) -> Path:
        directory = Path(directory)
        for sample in samples:
            write_pgm(directory / "images" / f"{sample.id}.pgm", sample.image)
            write_pgm(directory / "masks" / f"{sample.id}.pgm", sample.mask)
        self._say(f"✅ Dataset Agent: Wrote {len(samples)} samples to {directory}")
        return directory

    def load(self, directory: Union[str, Path], size: int) -> List[Sample]:
        """Every images/<id>.pgm with its masks/<id>.pgm, resized to size x size."""
        directory = Path(directory)
        image_dir, mask_dir = directory / "images", directory / "masks"
        if not image_dir.is_dir():
            raise DatasetError("missing images/ directory", str(directory))
        self._say(f"🤖 Dataset Agent: Reading {directory}")
        samples = []
        for image_path in sorted(image_dir.glob("*.pgm")):
            sample_id = image_path.stem
            mask_path = mask_dir / f"{sample_id}.pgm"
            if not mask_path.is_file():
                raise DatasetError("image has no mask", sample_id)
            image = resize_bilinear(_plane(read_pgm(image_path)).astype(np.float64), size, size)
            mask = resize_nearest(_plane(read_pgm(mask_path)), size, size) > 0.5
            samples.append(_to_sample(sample_id, np.clip(image, 0.0, 1.0), mask))
        if not samples:
            raise DatasetError("no .pgm images found", str(image_dir))
        self._say(f"✅ Dataset Agent: Loaded {len(samples)} samples")
        return samples

    def split(self, samples: Sequence[Sample], ratio: float, seed: int) -> Tuple[List[Sample], List[Sample]]:
        train, val = split(samples, ratio, seed)
        self._say(f"📊 Dataset Agent: Split {len(samples)} samples into {len(train)} train / {len(val)} val")
        return train, val

    def write_manifest(self, directory: Union[str, Path], train: Sequence[Sample], val: Sequence[Sample]) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, part in (("train.txt", train), ("val.txt", val)):
            (directory / name).write_text("".join(f"{s.id}\n" for s in part))


def batch_samples(samples: Sequence[Sample]) -> Tuple[Tensor, Tensor, Tensor]:
    """Stacks samples into (N,1,H,W) image, mask and boundary tensors."""
    images = np.concatenate([s.image.data for s in samples], axis=0)
    masks = np.concatenate([s.mask.data for s in samples], axis=0)
    boundaries = np.concatenate([s.boundary.data for s in samples], axis=0)
    return Tensor(images), Tensor(masks), Tensor(boundaries)


def batch_count(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)
