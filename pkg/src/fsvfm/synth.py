"""Procedural synthetic faces with pixel-accurate parsing maps.

Stands in for a real face corpus: each sample is a cartoon face (skin
ellipse, hair cap, eyes, eyebrows, nose, three-band mouth) whose parsing map
is exact by construction.  Fakes are reals with one region-scoped corruption,
so the real/fake toy task is learnable by region-aware features.  Also holds
the FSPM binary codec and the manifest-driven dataset loader.
"""

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import CodecError, ConfigError, IngestionError

__all__ = [
    "RawLabel",
    "ParsingMap",
    "FaceSample",
    "SynthConfig",
    "CORRUPTION_KINDS",
    "generate_synthetic",
    "encode_parsing",
    "decode_parsing",
    "load_dataset",
    "save_dataset",
]


class RawLabel(enum.IntEnum):
    """Per-pixel codes emitted by a face parser (or our synthesizer)."""

    BACKGROUND = 0
    SKIN = 1
    HAIR = 2
    LEFT_EYEBROW = 3
    RIGHT_EYEBROW = 4
    LEFT_EYE = 5
    RIGHT_EYE = 6
    NOSE = 7
    UPPER_LIP = 8
    INNER_MOUTH = 9
    LOWER_LIP = 10


@dataclass
class ParsingMap:
    """Per-pixel raw-label grid paired with one image."""

    labels: np.ndarray  # uint8, H x W

    @property
    def height(self) -> int:
        return int(self.labels.shape[0])

    @property
    def width(self) -> int:
        return int(self.labels.shape[1])

    def __eq__(self, other) -> bool:
        return isinstance(other, ParsingMap) and np.array_equal(self.labels, other.labels)


@dataclass
class FaceSample:
    image: np.ndarray  # float64, H x W x 3, values in [0, 1]
    parsing: ParsingMap
    label: str | None = None  # "real" / "fake" when supervised
    group_id: str | None = None
    metadata: dict = field(default_factory=dict)


CORRUPTION_KINDS = ("region_swap", "region_color_shift", "region_blur")

# merged facial regions a corruption may target -> raw labels involved
_CORRUPTIBLE = {
    "eyebrows": (RawLabel.LEFT_EYEBROW, RawLabel.RIGHT_EYEBROW),
    "eyes": (RawLabel.LEFT_EYE, RawLabel.RIGHT_EYE),
    "mouth": (RawLabel.UPPER_LIP, RawLabel.INNER_MOUTH, RawLabel.LOWER_LIP),
    "nose": (RawLabel.NOSE,),
    "hair": (RawLabel.HAIR,),
    "skin": (RawLabel.SKIN,),
}


@dataclass
class SynthConfig:
    image_size: int = 64
    n_real: int = 0
    n_fake: int = 0
    seed: int = 0
    corruption_kinds: tuple = CORRUPTION_KINDS

    def validate(self):
        if self.image_size <= 0:
            raise ConfigError("image_size must be positive")
        if self.image_size < 32:
            raise ConfigError("image_size below 32 cannot hold all facial regions")
        if self.n_real < 0 or self.n_fake < 0:
            raise ConfigError("sample counts must be >= 0")
        unknown = set(self.corruption_kinds) - set(CORRUPTION_KINDS)
        if unknown:
            raise ConfigError(f"unknown corruption kinds: {sorted(unknown)}")
        if self.n_fake > 0:
            if not self.corruption_kinds:
                raise ConfigError("n_fake > 0 requires at least one corruption kind")
            if self.n_real < 1:
                raise ConfigError("fakes are derived from reals; n_real must be >= 1")
            if "region_swap" in self.corruption_kinds and self.n_real < 2:
                raise ConfigError("region_swap needs a donor: n_real must be >= 2")


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / max(ry, 1e-9)) ** 2 + ((xx - cx) / max(rx, 1e-9)) ** 2 <= 1.0


def _draw_face(size: int, rng: np.random.Generator):
    """One face: (image float64 HxWx3, labels uint8 HxW). All 11 labels present.

    Feature shapes are sized to claim patch-level majorities on an 8-pixel
    grid at the default 64-pixel resolution, so region-aware masking has
    nonempty selectable regions to work with.
    """
    s = size / 64.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    labels = np.full((size, size), RawLabel.BACKGROUND, dtype=np.uint8)

    jit = lambda lo, hi: rng.uniform(lo, hi) * s  # noqa: E731

    # hair cap first, skin overwrites the overlap and leaves a crescent;
    # the cap stays clear of the top patch row so hair patches survive the
    # skin/hair boundary rule
    hair_cy, hair_cx = 14 * s + jit(-1, 1), 32 * s + jit(-1, 1)
    labels[_ellipse(yy, xx, hair_cy, hair_cx, 13 * s, 23 * s)] = RawLabel.HAIR

    face_cy, face_cx = 35 * s + jit(-0.7, 0.7), 32 * s + jit(-0.7, 0.7)
    skin = _ellipse(yy, xx, face_cy, face_cx, 27 * s, 20 * s)
    labels[skin] = RawLabel.SKIN

    eye_y = 35.5 * s + jit(-0.7, 0.7)
    eye_dx = 12 * s + jit(-0.7, 0.7)
    for dx, eb, ey in (
        (-eye_dx, RawLabel.LEFT_EYEBROW, RawLabel.LEFT_EYE),
        (eye_dx, RawLabel.RIGHT_EYEBROW, RawLabel.RIGHT_EYE),
    ):
        cx = face_cx + dx
        brow = (np.abs(yy - (eye_y - 8 * s)) <= max(2.2 * s, 1.0)) & (
            np.abs(xx - cx) <= 5.5 * s
        )
        labels[brow & skin] = eb
        labels[_ellipse(yy, xx, eye_y, cx, max(3.5 * s, 1.0), max(5.5 * s, 1.5)) & skin] = ey

    nose_cy = 45 * s + jit(-0.7, 0.7)
    nose_cx = face_cx + 3.5 * s
    labels[_ellipse(yy, xx, nose_cy, nose_cx, 5 * s, 4.5 * s) & skin] = RawLabel.NOSE

    mouth_y = 51.5 * s + jit(-0.7, 0.7)
    half_w = 7 * s + jit(-0.5, 0.5)
    band = max(1.0, 2.2 * s)
    in_mouth_x = np.abs(xx - face_cx) <= half_w
    for code, offset in (
        (RawLabel.UPPER_LIP, -band),
        (RawLabel.INNER_MOUTH, 0.0),
        (RawLabel.LOWER_LIP, band),
    ):
        rows = np.abs(yy - (mouth_y + offset)) <= band / 2 + 0.5
        labels[rows & in_mouth_x & skin] = code

    # colors: per-region base + per-sample jitter + vertical shading + noise
    base = {
        RawLabel.BACKGROUND: (0.20, 0.28, 0.38),
        RawLabel.SKIN: (0.85, 0.68, 0.55),
        RawLabel.HAIR: (0.25, 0.16, 0.10),
        RawLabel.LEFT_EYEBROW: (0.30, 0.20, 0.12),
        RawLabel.RIGHT_EYEBROW: (0.30, 0.20, 0.12),
        RawLabel.LEFT_EYE: (0.95, 0.95, 0.98),
        RawLabel.RIGHT_EYE: (0.95, 0.95, 0.98),
        RawLabel.NOSE: (0.60, 0.38, 0.30),
        RawLabel.UPPER_LIP: (0.75, 0.33, 0.32),
        RawLabel.INNER_MOUTH: (0.45, 0.15, 0.15),
        RawLabel.LOWER_LIP: (0.80, 0.40, 0.38),
    }
    image = np.zeros((size, size, 3), dtype=np.float64)
    for code, color in base.items():
        color = np.clip(np.asarray(color) + rng.uniform(-0.03, 0.03, size=3), 0.05, 0.95)
        image[labels == code] = color
    shade = 0.06 * (yy / size - 0.5)[..., None]
    image = image + shade + rng.normal(0.0, 0.01, size=image.shape)
    return np.clip(image, 0.0, 1.0), labels


def _corrupt(image, labels, kind, region, rng, donor_image=None):
    """Apply one corruption inside `region` pixels only; returns a new image."""
    pix = np.isin(labels, [int(c) for c in _CORRUPTIBLE[region]])
    out = image.copy()
    if kind == "region_color_shift":
        # push each channel toward mid-range so the shift never clips away
        direction = np.where(image[pix].mean(axis=0) > 0.5, -1.0, 1.0)
        shift = rng.uniform(0.45, 0.7, size=3) * direction
        out[pix] = np.clip(image[pix] + shift, 0.0, 1.0)
    elif kind == "region_swap":
        out[pix] = donor_image[pix]
        if np.array_equal(out, image):  # donor happened to match; force a shift
            out[pix] = np.clip(image[pix] + 0.25, 0.0, 1.0)
    elif kind == "region_blur":
        blurred = ndimage.gaussian_filter(image, sigma=(3.0, 3.0, 0.0))
        out[pix] = blurred[pix]
    else:
        raise ConfigError(f"unknown corruption kind: {kind}")
    return out


def generate_synthetic(config: SynthConfig) -> list[FaceSample]:
    """Deterministic synthetic dataset: n_real reals then n_fake fakes."""
    config.validate()
    rng = np.random.default_rng(int(config.seed) & 0xFFFFFFFFFFFFFFFF)
    reals = []
    for i in range(config.n_real):
        image, labels = _draw_face(config.image_size, rng)
        reals.append(
            FaceSample(image, ParsingMap(labels), label="real", group_id=f"real{i:05d}")
        )
    samples = list(reals)
    region_names = sorted(_CORRUPTIBLE)
    for j in range(config.n_fake):
        src = j % config.n_real
        kind = str(rng.choice(list(config.corruption_kinds)))
        # corrupted region drawn with probability rising superlinearly in its
        # pixel area, so fakes usually carry a clearly visible footprint
        labels = reals[src].parsing.labels
        weights = np.array(
            [np.isin(labels, [int(c) for c in _CORRUPTIBLE[g]]).sum() for g in region_names],
            dtype=np.float64,
        ) ** 2.0
        region = region_names[int(rng.choice(len(region_names), p=weights / weights.sum()))]
        donor = None
        if kind == "region_swap":
            donor = int((src + 1 + rng.integers(config.n_real - 1)) % config.n_real)
        fake = _corrupt(
            reals[src].image,
            reals[src].parsing.labels,
            kind,
            region,
            rng,
            donor_image=None if donor is None else reals[donor].image,
        )
        meta = {"corruption": kind, "region": region, "source_index": src}
        if donor is not None:
            meta["donor_index"] = donor
        samples.append(
            FaceSample(
                fake,
                ParsingMap(reals[src].parsing.labels.copy()),
                label="fake",
                group_id=f"fake{j:05d}",
                metadata=meta,
            )
        )
    return samples


# ---------------------------------------------------------------------------
# FSPM codec: magic "FSPM" | version u8=1 | height u32 LE | width u32 LE |
# labels row-major u8.  Header is 13 bytes.

_MAGIC = b"FSPM"
_VERSION = 1
_HEADER = struct.Struct("<4sBII")


def encode_parsing(parsing: ParsingMap) -> bytes:
    labels = np.ascontiguousarray(parsing.labels, dtype=np.uint8)
    if labels.ndim != 2:
        raise CodecError("labels must be a 2-D grid", 0)
    header = _HEADER.pack(_MAGIC, _VERSION, labels.shape[0], labels.shape[1])
    return header + labels.tobytes()


def decode_parsing(data: bytes) -> ParsingMap:
    if len(data) < 4 or data[:4] != _MAGIC:
        raise CodecError("bad magic, expected FSPM", 0)
    if len(data) < 5:
        raise CodecError("truncated before version byte", 4)
    if data[4] != _VERSION:
        raise CodecError(f"unknown version {data[4]}", 4)
    if len(data) < _HEADER.size:
        raise CodecError("truncated header", len(data))
    _, _, height, width = _HEADER.unpack_from(data, 0)
    expected = _HEADER.size + height * width
    if len(data) < expected:
        raise CodecError(
            f"truncated payload, expected {height * width} label bytes", len(data)
        )
    if len(data) > expected:
        raise CodecError("trailing bytes after payload", expected)
    labels = np.frombuffer(data, dtype=np.uint8, count=height * width, offset=_HEADER.size)
    return ParsingMap(labels.reshape(height, width).copy())


# ---------------------------------------------------------------------------
# Manifest-driven dataset IO.  Manifest line:
#   image_path<TAB>parsing_path<TAB>label(optional)<TAB>group_id(optional)
# Paths are relative to the manifest's directory unless absolute.


def load_dataset(root_path, manifest_path=None) -> list[FaceSample]:
    root = Path(root_path)
    manifest = Path(manifest_path) if manifest_path else root / "manifest.tsv"
    if not manifest.is_file():
        raise IngestionError("manifest not found", manifest)
    samples = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        line = line.rstrip("\n")
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) < 2:
            raise IngestionError(f"manifest line {lineno} needs >= 2 fields", manifest)
        image_path = root / fields[0]
        parsing_path = root / fields[1]
        label = fields[2] if len(fields) > 2 and fields[2] else None
        group_id = fields[3] if len(fields) > 3 and fields[3] else None
        if not image_path.is_file():
            raise IngestionError("image file missing", image_path)
        if not parsing_path.is_file():
            raise IngestionError("parsing file missing", parsing_path)
        with Image.open(image_path) as im:
            image = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        try:
            parsing = decode_parsing(parsing_path.read_bytes())
        except CodecError as exc:
            raise IngestionError(f"bad parsing stream ({exc})", parsing_path) from exc
        if parsing.labels.shape != image.shape[:2]:
            raise IngestionError(
                f"image {image.shape[:2]} vs parsing {parsing.labels.shape} mismatch",
                image_path,
            )
        samples.append(FaceSample(image, parsing, label=label, group_id=group_id))
    return samples


def save_dataset(samples, out_dir) -> Path:
    """Write images/, parsing/ and manifest.tsv; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "parsing").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, sample in enumerate(samples):
        stem = f"{i:06d}"
        image_rel = f"images/{stem}.png"
        parsing_rel = f"parsing/{stem}.fspm"
        arr = np.clip(np.rint(sample.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(out / image_rel)
        (out / parsing_rel).write_bytes(encode_parsing(sample.parsing))
        lines.append(
            "\t".join([image_rel, parsing_rel, sample.label or "", sample.group_id or ""])
        )
    manifest = out / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
