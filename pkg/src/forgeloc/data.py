"""Image/mask ingestion, synthetic splice generation, augmentation and degradations."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import cv2
import numpy as np
from PIL import Image

MASK_THRESHOLD = 127
MIN_SIDE = 32

cv2.setNumThreads(1)


class ManifestError(ValueError):
    pass


class SampleError(ValueError):
    pass


class SpliceError(RuntimeError):
    pass


@dataclass
class ImageSample:
    """RGB image in [0, 1] with a binary tamper mask (1 = tampered)."""

    image: np.ndarray
    mask: np.ndarray
    dataset_id: str = ""
    sample_id: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise SampleError(f"image must be HxWx3, got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise SampleError(
                f"mask shape {self.mask.shape} does not match image {self.image.shape[:2]}"
            )
        if min(self.mask.shape) < MIN_SIDE:
            raise SampleError(f"image sides must be >= {MIN_SIDE}, got {self.mask.shape}")
        if not np.isin(self.mask, (0, 1)).all():
            raise SampleError("mask values must be in {0, 1}")


@dataclass(frozen=True)
class ManifestEntry:
    image_path: Path
    mask_path: Path
    dataset_id: str

    @property
    def sample_id(self) -> str:
        return self.image_path.stem


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def datasets(self) -> list[str]:
        return list(dict.fromkeys(e.dataset_id for e in self.entries))


def load_manifest(path: str | Path) -> Manifest:
    """Read a JSON-lines manifest; relative paths resolve against the manifest's folder."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent
    entries = []
    seen: set[tuple[str, str]] = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                raise ManifestError(f"line {lineno}: empty record")
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(record, dict):
                raise ManifestError(f"line {lineno}: record must be a JSON object")
            missing = [k for k in ("image", "mask", "dataset") if k not in record]
            if missing:
                raise ManifestError(f"line {lineno}: missing key(s) {', '.join(missing)}")
            image_path = (root / record["image"]).resolve()
            mask_path = (root / record["mask"]).resolve()
            for p in (image_path, mask_path):
                if not p.is_file():
                    raise ManifestError(f"line {lineno}: path does not resolve: {p}")
            entry = ManifestEntry(image_path, mask_path, str(record["dataset"]))
            key = (entry.dataset_id, entry.sample_id)
            if key in seen:
                raise ManifestError(
                    f"line {lineno}: duplicate sample_id {entry.sample_id!r} in dataset {entry.dataset_id!r}"
                )
            seen.add(key)
            entries.append(entry)
    return Manifest(entries)


def write_manifest(path: str | Path, rows: Iterable[tuple[str, str, str]]) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for image, mask, dataset in rows:
            fh.write(json.dumps({"image": image, "mask": mask, "dataset": dataset}) + "\n")
    return path


def read_image(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except Exception as exc:
        raise SampleError(f"cannot decode image {path}: {exc}") from exc
    return arr / 255.0


def read_mask(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.uint8)
    except Exception as exc:
        raise SampleError(f"cannot decode mask {path}: {exc}") from exc
    return (arr > MASK_THRESHOLD).astype(np.uint8)


def write_image(path: str | Path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image)).save(path)


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray((mask > 0).astype(np.uint8) * 255).save(path)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def resize_image(image: np.ndarray, height: int, width: int) -> np.ndarray:
    return cv2.resize(image, (width, height), interpolation=cv2.INTER_LINEAR)


def resize_mask(mask: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour resize of a 0/255 (or 0/1) mask, re-binarized."""
    scaled = mask.astype(np.uint8)
    if scaled.max() <= 1:
        scaled = scaled * 255
    out = cv2.resize(scaled, (width, height), interpolation=cv2.INTER_NEAREST)
    return (out > MASK_THRESHOLD).astype(np.uint8)


def read_pair(entry: ManifestEntry) -> ImageSample:
    """Load an entry at native resolution."""
    image = read_image(entry.image_path)
    mask = read_mask(entry.mask_path)
    if mask.shape != image.shape[:2]:
        raise SampleError(
            f"{entry.sample_id}: mask {mask.shape} and image {image.shape[:2]} differ"
        )
    return ImageSample(image, mask, entry.dataset_id, entry.sample_id)


def load_sample(entry: ManifestEntry, target_size: int = 512) -> ImageSample:
    """Load an entry resized to ``target_size`` square (bilinear image, nearest mask)."""
    image = read_image(entry.image_path)
    with Image.open(entry.mask_path) as im:
        raw_mask = np.asarray(im.convert("L"), dtype=np.uint8)
    if raw_mask.shape != image.shape[:2]:
        raise SampleError(
            f"{entry.sample_id}: mask {raw_mask.shape} and image {image.shape[:2]} differ"
        )
    image = resize_image(image, target_size, target_size)
    out = cv2.resize(raw_mask, (target_size, target_size), interpolation=cv2.INTER_NEAREST)
    mask = (out > MASK_THRESHOLD).astype(np.uint8)
    return ImageSample(np.clip(image, 0.0, 1.0), mask, entry.dataset_id, entry.sample_id)


def derive_seed(*parts: int) -> int:
    """Stable 32-bit seed from integer parts, e.g. (global_seed, epoch, index)."""
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


# --------------------------------------------------------------------------- synthesis


def synth_base_image(size: int, seed: int, noise_std: float = 0.005) -> np.ndarray:
    """Procedural 'photo': smooth colour field plus shapes plus sensor noise, 8-bit quantized."""
    rng = np.random.default_rng(seed)
    coarse = rng.random((4, 4, 3)).astype(np.float32)
    img = cv2.resize(coarse, (size, size), interpolation=cv2.INTER_CUBIC)
    img = 0.25 + 0.5 * np.clip(img, 0.0, 1.0)
    for _ in range(rng.integers(3, 8)):
        color = tuple(float(c) for c in 0.15 + 0.7 * rng.random(3))
        cx, cy = (int(v) for v in rng.integers(0, size, 2))
        r = int(rng.integers(size // 16, size // 4))
        if rng.random() < 0.5:
            cv2.circle(img, (cx, cy), r, color, thickness=-1)
        else:
            cv2.rectangle(img, (cx - r, cy - r // 2), (cx + r, cy + r // 2), color, thickness=-1)
    img = cv2.GaussianBlur(img, (5, 5), 0)
    img = img + rng.normal(0.0, noise_std, img.shape).astype(np.float32)
    return to_uint8(img).astype(np.float32) / 255.0


def _random_region(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    mask = np.zeros((h, w), np.uint8)
    cx, cy = rng.uniform(0.2, 0.8) * w, rng.uniform(0.2, 0.8) * h
    if rng.random() < 0.5:
        axes = (int(rng.uniform(0.1, 0.4) * w), int(rng.uniform(0.1, 0.4) * h))
        angle = float(rng.uniform(0, 180))
        cv2.ellipse(mask, (int(cx), int(cy)), axes, angle, 0, 360, 1, thickness=-1)
    else:
        n = int(rng.integers(5, 11))
        angles = np.sort(rng.uniform(0, 2 * math.pi, n))
        radii = rng.uniform(0.15, 0.4, n) * min(h, w)
        pts = np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)
        cv2.fillPoly(mask, [np.round(pts).astype(np.int32)], 1)
    return mask


def synth_splice(
    host: np.ndarray,
    donor: np.ndarray,
    rng_seed: int,
    min_frac: float = 0.05,
    max_frac: float = 0.40,
    max_attempts: int = 100,
) -> ImageSample:
    """Paste a random polygon/ellipse region of ``donor`` into ``host``.

    The source offset in the donor never equals the destination offset, so
    ``donor is host`` still yields a real copy. Masked pixels that happen to
    equal the host are nudged by one 8-bit level, keeping the mask identical
    to the changed-pixel set.
    """
    if min(host.shape[:2]) < 128 or min(donor.shape[:2]) < 128:
        raise SpliceError("host and donor must be at least 128x128")
    rng = np.random.default_rng(rng_seed)
    h, w = host.shape[:2]
    for _ in range(max_attempts):
        region = _random_region(h, w, rng)
        frac = region.mean()
        if not min_frac <= frac <= max_frac:
            continue
        ys, xs = np.nonzero(region)
        y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
        bh, bw = y1 - y0, x1 - x0
        if bh > donor.shape[0] or bw > donor.shape[1]:
            continue
        ny, nx = donor.shape[0] - bh + 1, donor.shape[1] - bw + 1
        if ny * nx < 2:
            continue
        # source box offset, never the identity placement
        flat = int(rng.integers(0, ny * nx - 1))
        if flat >= y0 * nx + x0 and y0 < ny and x0 < nx:
            flat += 1
        sy, sx = divmod(flat, nx)
        patch = donor[sy : sy + bh, sx : sx + bw]
        local = region[y0:y1, x0:x1].astype(bool)
        out = host.copy()
        out[y0:y1, x0:x1][local] = patch[local]
        same = region.astype(bool) & np.all(out == host, axis=2)
        if same.any():
            ch = out[..., 0]
            ch[same] = np.where(ch[same] <= 0.5, ch[same] + 1 / 255, ch[same] - 1 / 255)
        return ImageSample(out, region)
    raise SpliceError(
        f"no region with area fraction in [{min_frac}, {max_frac}] after {max_attempts} attempts"
    )


def make_synthetic_dataset(
    out_dir: str | Path,
    count: int,
    seed: int,
    size: int = 128,
    dataset_id: str = "synth",
    host_noise: tuple[float, float] = (0.002, 0.008),
    donor_noise: tuple[float, float] = (0.03, 0.05),
) -> Path:
    """Write ``count`` spliced image/mask PNG pairs plus ``manifest.jsonl``.

    Donor images carry a stronger sensor-noise fingerprint than hosts, which is
    the trace a detector can learn.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(count):
        rng = np.random.default_rng(derive_seed(seed, i))
        host = synth_base_image(size, derive_seed(seed, i, 0), float(rng.uniform(*host_noise)))
        donor = synth_base_image(size, derive_seed(seed, i, 1), float(rng.uniform(*donor_noise)))
        sample = synth_splice(host, donor, derive_seed(seed, i, 2))
        name = f"{dataset_id}_{i:05d}"
        write_image(out_dir / "images" / f"{name}.png", sample.image)
        write_mask(out_dir / "masks" / f"{name}.png", sample.mask)
        rows.append((f"images/{name}.png", f"masks/{name}.png", dataset_id))
    return write_manifest(out_dir / "manifest.jsonl", rows)


# --------------------------------------------------------------------------- degradations


def jpeg(image: np.ndarray, quality: int) -> np.ndarray:
    """Round-trip through a real JPEG codec."""
    if not 1 <= int(quality) <= 100:
        raise ValueError(f"jpeg quality must be in [1, 100], got {quality}")
    bgr = cv2.cvtColor(to_uint8(image), cv2.COLOR_RGB2BGR)
    ok, buf = cv2.imencode(".jpg", bgr, [cv2.IMWRITE_JPEG_QUALITY, int(quality)])
    if not ok:
        raise RuntimeError("JPEG encoding failed")
    decoded = cv2.imdecode(buf, cv2.IMREAD_COLOR)
    return cv2.cvtColor(decoded, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0


def gaussian_blur(image: np.ndarray, kernel: int) -> np.ndarray:
    kernel = int(kernel)
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"blur kernel must be a positive odd integer, got {kernel}")
    return cv2.GaussianBlur(image, (kernel, kernel), 0)


def gaussian_noise(image: np.ndarray, variance: float, rng: np.random.Generator) -> np.ndarray:
    if variance < 0:
        raise ValueError(f"noise variance must be >= 0, got {variance}")
    noise = rng.normal(0.0, math.sqrt(variance), image.shape).astype(np.float32)
    return np.clip(image + noise, 0.0, 1.0)


def down_up_resize(image: np.ndarray, factor: float) -> np.ndarray:
    if not factor > 0:
        raise ValueError(f"resize factor must be > 0, got {factor}")
    h, w = image.shape[:2]
    nh, nw = max(1, int(round(h * factor))), max(1, int(round(w * factor)))
    small = resize_image(image, nh, nw)
    return resize_image(small, h, w)


@dataclass(frozen=True)
class DegradationOp:
    kind: str
    value: float

    def __post_init__(self):
        if self.kind == "jpeg":
            if float(self.value) != int(self.value) or not 1 <= self.value <= 100:
                raise ValueError(f"jpeg quality must be an integer in [1, 100], got {self.value}")
        elif self.kind == "blur":
            if float(self.value) != int(self.value) or self.value < 1 or int(self.value) % 2 == 0:
                raise ValueError(f"blur kernel must be a positive odd integer, got {self.value}")
        elif self.kind == "noise":
            if self.value < 0:
                raise ValueError(f"noise intensity must be >= 0, got {self.value}")
        elif self.kind == "resize":
            if not self.value > 0:
                raise ValueError(f"resize factor must be > 0, got {self.value}")
        else:
            raise ValueError(f"unknown degradation {self.kind!r}")

    def label(self) -> str:
        v = int(self.value) if self.kind in ("jpeg", "blur") else self.value
        return f"{self.kind}({v})"

    @classmethod
    def parse(cls, text: str) -> "DegradationOp":
        """Parse ``kind(value)`` or ``kind=value``."""
        text = text.strip()
        if "(" in text and text.endswith(")"):
            kind, value = text[:-1].split("(", 1)
        elif "=" in text:
            kind, value = text.split("=", 1)
        else:
            raise ValueError(f"cannot parse degradation {text!r}")
        return cls(kind.strip(), float(value))


@dataclass(frozen=True)
class DegradationSpec:
    chain: tuple[DegradationOp, ...] = ()
    seed: int = 0

    @classmethod
    def of(cls, *ops: tuple[str, float], seed: int = 0) -> "DegradationSpec":
        return cls(tuple(DegradationOp(k, v) for k, v in ops), seed)

    def label(self) -> str:
        return " > ".join(op.label() for op in self.chain) or "none"


def degrade(image: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    """Apply ``spec.chain`` in order; noise draws come from ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    out = image
    for op in spec.chain:
        if op.kind == "jpeg":
            out = jpeg(out, int(op.value))
        elif op.kind == "blur":
            out = gaussian_blur(out, int(op.value))
        elif op.kind == "noise":
            out = gaussian_noise(out, op.value, rng)
        elif op.kind == "resize":
            out = down_up_resize(out, op.value)
    return out


# --------------------------------------------------------------------------- augmentation

AUG_PROB = 0.5
AUG_BLUR_KERNELS = (3, 5, 7)
AUG_JPEG_QUALITY = (60, 100)
AUG_NOISE_STD_MAX = 0.02
AUG_RESIZE_FACTOR = (0.5, 1.0)


@dataclass(frozen=True)
class AugmentPlan:
    flip: bool
    blur: int | None
    quality: int | None
    noise_std: float | None
    resize: float | None

    @property
    def is_noop(self) -> bool:
        return not self.flip and self.blur is None and self.quality is None \
            and self.noise_std is None and self.resize is None


def augment_plan(rng_seed: int) -> AugmentPlan:
    rng = np.random.default_rng(rng_seed)
    coins = rng.random(5) < AUG_PROB
    kernel = int(rng.choice(AUG_BLUR_KERNELS))
    quality = int(rng.integers(AUG_JPEG_QUALITY[0], AUG_JPEG_QUALITY[1] + 1))
    # (0, max]: 1 - U[0, 1) is in (0, 1]
    std = float(AUG_NOISE_STD_MAX * (1.0 - rng.random()))
    factor = float(rng.uniform(*AUG_RESIZE_FACTOR))
    return AugmentPlan(
        flip=bool(coins[0]),
        blur=kernel if coins[1] else None,
        quality=quality if coins[2] else None,
        noise_std=std if coins[3] else None,
        resize=factor if coins[4] else None,
    )


def augment(sample: ImageSample, rng_seed: int) -> ImageSample:
    """Training augmentation; only the flip touches the mask."""
    plan = augment_plan(rng_seed)
    image, mask = sample.image, sample.mask
    if plan.flip:
        image = np.ascontiguousarray(image[:, ::-1])
        mask = np.ascontiguousarray(mask[:, ::-1])
    if plan.blur is not None:
        image = gaussian_blur(image, plan.blur)
    if plan.quality is not None:
        image = jpeg(image, plan.quality)
    if plan.noise_std is not None:
        noise_rng = np.random.default_rng(derive_seed(rng_seed, 1))
        image = gaussian_noise(image, plan.noise_std**2, noise_rng)
    if plan.resize is not None:
        image = down_up_resize(image, plan.resize)
    return ImageSample(image.astype(np.float32), mask, sample.dataset_id, sample.sample_id)


def batches(seq: Sequence, size: int) -> list[Sequence]:
    return [seq[i : i + size] for i in range(0, len(seq), size)]
