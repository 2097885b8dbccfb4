"""Synthetic aerial-style scenes, netpbm image I/O, tiling, augmentation.

The synthetic generator paints five classes in a fixed order (vegetation
background, roads, buildings, trees, cars-on-roads) from a per-image named
random stream, and retries deterministically until every class is present.
Images travel as binary PPM (P6), label masks as binary PGM (P5).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng, tensor
from .errors import DataError, ShapeError
from .losses import IGNORE_LABEL
from .tensor import Tensor

CLASS_NAMES = ["vegetation", "building", "road", "tree", "car"]
VEGETATION, BUILDING, ROAD, TREE, CAR = range(5)

_BASE_COLORS = np.array([
    [96, 160, 96],     # vegetation
    [188, 96, 80],     # building
    [96, 96, 104],     # road
    [32, 112, 48],     # tree
    [216, 200, 48],    # car
], dtype=np.int16)

DEFAULT_PALETTE = tuple(tuple(int(v) for v in row) for row in _BASE_COLORS)

SCALE_CHOICES = (0.5, 0.75, 1.0, 1.25, 1.5)
DEFAULT_TILE = 1024


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SynthSpec:
    """Everything that determines a generated dataset, bit for bit.

    Object count ranges are inclusive. The palette lists one base RGB per
    class; rendered pixels are the base color plus uniform integer noise
    in [-noise_amplitude, noise_amplitude].
    """

    seed: int = 0
    count: int = 8
    size: int = 64
    noise_amplitude: int = 18
    road_count: tuple[int, int] = (1, 2)
    building_count: tuple[int, int] = (2, 4)
    tree_count: tuple[int, int] = (3, 6)
    car_count: tuple[int, int] = (1, 3)
    palette: tuple[tuple[int, int, int], ...] = DEFAULT_PALETTE

    def validate(self) -> "SynthSpec":
        if self.count < 1:
            raise DataError(f"dataset needs at least one image, got {self.count}")
        if self.size < 16:
            raise DataError(f"scene size {self.size} too small to place "
                            f"every class")
        if self.noise_amplitude < 0:
            raise DataError(f"noise amplitude must be >= 0, "
                            f"got {self.noise_amplitude}")
        if len(self.palette) != len(CLASS_NAMES):
            raise DataError(f"palette needs {len(CLASS_NAMES)} colors, "
                            f"got {len(self.palette)}")
        for lo, hi in (self.road_count, self.building_count,
                       self.tree_count, self.car_count):
            if not 1 <= lo <= hi:
                raise DataError(f"bad object count range ({lo}, {hi})")
        return self


def _count(g: np.random.Generator, bounds: tuple[int, int]) -> int:
    return int(g.integers(bounds[0], bounds[1] + 1))


def _paint_scene(g: np.random.Generator, h: int, w: int,
                 spec: SynthSpec) -> np.ndarray:
    mask = np.full((h, w), VEGETATION, dtype=np.uint8)

    for _ in range(_count(g, spec.road_count)):
        band = max(3, int(round(min(h, w) * float(g.uniform(0.10, 0.20)))))
        if g.random() < 0.5:
            top = int(g.integers(0, max(h - band, 1)))
            mask[top:top + band, :] = ROAD
        else:
            left = int(g.integers(0, max(w - band, 1)))
            mask[:, left:left + band] = ROAD

    for _ in range(_count(g, spec.building_count)):
        bh = int(g.integers(max(h // 8, 4), max(h // 3, 5)))
        bw = int(g.integers(max(w // 8, 4), max(w // 3, 5)))
        top = int(g.integers(0, max(h - bh, 1)))
        left = int(g.integers(0, max(w - bw, 1)))
        mask[top:top + bh, left:left + bw] = BUILDING

    yy, xx = np.ogrid[:h, :w]
    for _ in range(_count(g, spec.tree_count)):
        r = int(g.integers(max(h // 12, 3), max(h // 6, 4)))
        cy = int(g.integers(0, h))
        cx = int(g.integers(0, w))
        mask[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = TREE

    road_pixels = np.argwhere(mask == ROAD)
    if len(road_pixels):
        for _ in range(_count(g, spec.car_count)):
            cy, cx = road_pixels[int(g.integers(0, len(road_pixels)))]
            ch = min(int(g.integers(5, 8)), max(h // 8, 2))
            cw = min(int(g.integers(8, 13)), max(w // 6, 3))
            top = min(max(cy - ch // 2, 0), max(h - ch, 0))
            left = min(max(cx - cw // 2, 0), max(w - cw, 0))
            mask[top:top + ch, left:left + cw] = CAR
    return mask


def _render(g: np.random.Generator, mask: np.ndarray,
            spec: SynthSpec) -> np.ndarray:
    amp = spec.noise_amplitude
    noise = g.integers(-amp, amp + 1, size=mask.shape + (3,), dtype=np.int16)
    rgb = np.asarray(spec.palette, dtype=np.int16)[mask] + noise
    return np.clip(rgb, 0, 255).astype(np.uint8)


def make_scene(seed: int, index: int, hw: tuple[int, int] = (64, 64),
               max_attempts: int = 20,
               spec: SynthSpec | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One (rgb uint8 (H, W, 3), mask uint8 (H, W)) pair covering all classes."""
    h, w = hw
    if h < 16 or w < 16:
        raise DataError(f"scene size {h}x{w} too small to place every class")
    spec = spec or SynthSpec(seed=seed)
    for attempt in range(max_attempts):
        g = rng.stream(seed, f"synth/{index}/attempt{attempt}")
        mask = _paint_scene(g, h, w, spec)
        if len(np.unique(mask)) == len(CLASS_NAMES):
            return _render(g, mask, spec), mask
    raise DataError(f"could not cover all classes in scene {index} "
                    f"after {max_attempts} attempts")


class SynthDataset:
    """A fixed list of generated scenes, fully determined by its SynthSpec."""

    def __init__(self, count: int, seed: int, hw: tuple[int, int] = (64, 64),
                 spec: SynthSpec | None = None):
        if count < 1:
            raise DataError(f"dataset needs at least one image, got {count}")
        self.seed = seed
        self.hw = hw
        self.spec = (spec or SynthSpec(seed=seed, count=count,
                                       size=hw[0])).validate()
        self.items = [make_scene(seed, i, hw, spec=self.spec)
                      for i in range(count)]
        self.class_names = list(CLASS_NAMES)

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """(image float32 (3, H, W) in [0, 1], mask int64 (H, W))."""
        rgb, mask = self.items[i]
        return to_chw_float(rgb), mask.astype(np.int64)


def synth_generate(spec: SynthSpec) -> SynthDataset:
    """Generate the dataset a SynthSpec describes."""
    spec.validate()
    return SynthDataset(spec.count, spec.seed, (spec.size, spec.size), spec)


def to_chw_float(rgb: np.ndarray) -> np.ndarray:
    """uint8 (H, W, 3) -> float32 (3, H, W) scaled to [0, 1]."""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) rgb, got {rgb.shape}")
    return (rgb.astype(np.float32) / 255.0).transpose(2, 0, 1)


def palette_image(mask: np.ndarray) -> np.ndarray:
    """Class mask -> RGB uint8 using the palette base colors."""
    if mask.max(initial=0) >= len(_BASE_COLORS):
        raise DataError(f"mask label {int(mask.max())} has no palette entry")
    return _BASE_COLORS[mask].astype(np.uint8)


# ---------------------------------------------------------------------------
# netpbm files


def _header_tokens(buf: bytes, path: str, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(buf):
            c = buf[pos:pos + 1]
            if c in b" \t\r\n":
                pos += 1
            elif c == b"#":
                nl = buf.find(b"\n", pos)
                if nl == -1:
                    raise DataError(f"{path}: unterminated comment at byte {pos}")
                pos = nl + 1
            else:
                break
        start = pos
        while pos < len(buf) and buf[pos:pos + 1] not in b" \t\r\n#":
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated header at byte {start}")
        tokens.append(buf[start:pos])
    if pos >= len(buf) or buf[pos:pos + 1] not in b" \t\r\n":
        raise DataError(f"{path}: missing whitespace after header at byte {pos}")
    return tokens, pos + 1


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise DataError(f"{path}: {e}") from e
    (found_magic, *dims), offset = _header_tokens(buf, str(path), 4)
    if found_magic != magic:
        raise DataError(f"{path}: expected {magic.decode()} file, "
                        f"found magic {found_magic[:16]!r}")
    try:
        w, h, maxval = (int(d) for d in dims)
    except ValueError as e:
        raise DataError(f"{path}: non-numeric header field") from e
    if w <= 0 or h <= 0:
        raise DataError(f"{path}: invalid dimensions {w}x{h}")
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}, expected 255")
    need = w * h * channels
    have = len(buf) - offset
    if have < need:
        raise DataError(f"{path}: expected {need} pixel bytes at byte offset "
                        f"{offset}, found {have}")
    flat = np.frombuffer(buf, dtype=np.uint8, count=need, offset=offset)
    if channels == 1:
        return flat.reshape(h, w).copy()
    return flat.reshape(h, w, channels).copy()


def read_ppm(path) -> np.ndarray:
    """Binary PPM (P6, maxval 255) -> uint8 (H, W, 3)."""
    return _read_netpbm(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    """Binary PGM (P5, maxval 255) -> uint8 (H, W)."""
    return _read_netpbm(path, b"P5", 1)


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ShapeError(f"write_ppm needs uint8 (H, W, 3), got {rgb.dtype} {rgb.shape}")
    h, w = rgb.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes())


def write_pgm(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.dtype != np.uint8:
        raise ShapeError(f"write_pgm needs uint8 (H, W), got {mask.dtype} {mask.shape}")
    h, w = mask.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + mask.tobytes())


def load_image(path) -> np.ndarray:
    """PPM file -> float32 (3, H, W) scaled to [0, 1]."""
    return to_chw_float(read_ppm(path))


def save_image(path, image: np.ndarray) -> None:
    """float32 (3, H, W) in [0, 1] -> PPM file (inverse of load_image)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected (3, H, W) image, got {image.shape}")
    rgb = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    write_ppm(path, rgb.transpose(1, 2, 0))


def load_mask(path) -> np.ndarray:
    """PGM file -> int64 (H, W) label map."""
    return read_pgm(path).astype(np.int64)


def save_mask(path, mask: np.ndarray) -> None:
    """Integer (H, W) label map -> PGM file."""
    mask = np.asarray(mask)
    if mask.ndim != 2 or not np.issubdtype(mask.dtype, np.integer):
        raise ShapeError(f"expected integer (H, W) mask, got "
                         f"{mask.dtype} {mask.shape}")
    if mask.min(initial=0) < 0 or mask.max(initial=0) > 255:
        raise DataError("mask labels must fit in a byte")
    write_pgm(path, mask.astype(np.uint8))


def write_dataset(directory, dataset: SynthDataset) -> None:
    """Materialize a dataset: images/NNNN.ppm, masks/NNNN.pgm, dataset.json."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    for i, (rgb, mask) in enumerate(dataset.items):
        write_ppm(directory / "images" / f"{i:04d}.ppm", rgb)
        write_pgm(directory / "masks" / f"{i:04d}.pgm", mask)
    manifest = {"num_classes": len(dataset.class_names),
                "ignore_label": IGNORE_LABEL,
                "class_names": list(dataset.class_names)}
    (directory / "dataset.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _read_manifest(directory: Path) -> dict:
    path = directory / "dataset.json"
    if not path.is_file():
        raise DataError(f"missing {path} "
                        f"(expected num_classes, ignore_label, class_names)")
    try:
        manifest = json.loads(path.read_text())
        num_classes = int(manifest["num_classes"])
        ignore_label = int(manifest["ignore_label"])
        class_names = [str(n) for n in manifest["class_names"]]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise DataError(f"{path}: invalid manifest: {e}") from e
    if num_classes < 2 or len(class_names) != num_classes:
        raise DataError(f"{path}: {len(class_names)} class names for "
                        f"{num_classes} classes")
    return {"num_classes": num_classes, "ignore_label": ignore_label,
            "class_names": class_names}


class DiskDataset:
    """Pairs of images/NNNN.ppm and masks/NNNN.pgm under one directory.

    The directory's dataset.json (num_classes, ignore_label, class_names)
    is required whenever masks are; without masks the manifest is optional
    and defaults to the synthetic palette classes.
    """

    def __init__(self, directory, require_masks: bool = True):
        directory = Path(directory)
        image_dir = directory / "images"
        if not image_dir.is_dir():
            raise DataError(f"{image_dir} is not a directory")
        self.image_paths = sorted(image_dir.glob("*.ppm"))
        if not self.image_paths:
            raise DataError(f"no .ppm images under {image_dir}")
        self.mask_paths: list[Path | None] = []
        for p in self.image_paths:
            mp = directory / "masks" / (p.stem + ".pgm")
            if mp.is_file():
                self.mask_paths.append(mp)
            elif require_masks:
                raise DataError(f"missing mask {mp} for image {p}")
            else:
                self.mask_paths.append(None)
        if require_masks or (directory / "dataset.json").is_file():
            manifest = _read_manifest(directory)
            self.num_classes = manifest["num_classes"]
            self.ignore_label = manifest["ignore_label"]
            self.class_names = manifest["class_names"]
        else:
            self.num_classes = len(CLASS_NAMES)
            self.ignore_label = IGNORE_LABEL
            self.class_names = list(CLASS_NAMES)

    def __len__(self) -> int:
        return len(self.image_paths)

    def __getitem__(self, i: int) -> tuple[np.ndarray, np.ndarray | None]:
        image = to_chw_float(read_ppm(self.image_paths[i]))
        mp = self.mask_paths[i]
        mask = read_pgm(mp).astype(np.int64) if mp is not None else None
        return image, mask


# ---------------------------------------------------------------------------
# tiling


@dataclass(frozen=True)
class TileGrid:
    height: int
    width: int
    tile: int
    rows: int
    cols: int


def pad_and_tile(image: np.ndarray, mask: np.ndarray | None, tile: int,
                 ignore_label: int = IGNORE_LABEL):
    """Split into row-major (tile, tile) pieces, padding bottom/right.

    Image padding is zero; mask padding is the ignore label, so padded
    pixels never count in losses or metrics. `untile` inverts exactly.
    """
    if image.ndim != 3:
        raise ShapeError(f"image must be (C, H, W), got {image.shape}")
    if tile < 32 or tile % 32:
        raise ShapeError(f"tile must be a multiple of 32 (>= 32), got {tile}")
    _, h, w = image.shape
    rows = -(-h // tile)
    cols = -(-w // tile)
    ph, pw = rows * tile - h, cols * tile - w
    padded = np.pad(image, ((0, 0), (0, ph), (0, pw)))
    padded_mask = None
    if mask is not None:
        if mask.shape != (h, w):
            raise ShapeError(f"mask {mask.shape} does not match image {(h, w)}")
        padded_mask = np.pad(mask, ((0, ph), (0, pw)), constant_values=ignore_label)
    tiles = []
    for r in range(rows):
        for c in range(cols):
            sl = (slice(r * tile, (r + 1) * tile), slice(c * tile, (c + 1) * tile))
            m = padded_mask[sl] if padded_mask is not None else None
            tiles.append((padded[(slice(None),) + sl], m))
    return tiles, TileGrid(h, w, tile, rows, cols)


def untile(pieces: list[np.ndarray], grid: TileGrid) -> np.ndarray:
    """Reassemble row-major (C, tile, tile) pieces and crop the padding."""
    if len(pieces) != grid.rows * grid.cols:
        raise ShapeError(f"expected {grid.rows * grid.cols} tiles, got {len(pieces)}")
    c = pieces[0].shape[0]
    t = grid.tile
    full = np.zeros((c, grid.rows * t, grid.cols * t), dtype=pieces[0].dtype)
    for i, piece in enumerate(pieces):
        if piece.shape != (c, t, t):
            raise ShapeError(f"tile {i} has shape {piece.shape}, expected {(c, t, t)}")
        r, col = divmod(i, grid.cols)
        full[:, r * t:(r + 1) * t, col * t:(col + 1) * t] = piece
    return full[:, :grid.height, :grid.width]


# ---------------------------------------------------------------------------
# resizing and augmentation


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (C, H, W) float data with half-pixel-centre bilinear sampling."""
    c, h, w = image.shape
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"target size {out_h}x{out_w} invalid")

    def axis(n_in, n_out):
        src = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0, n_in - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, (src - i0).astype(image.dtype)

    i0, i1, ty = axis(h, out_h)
    j0, j1, tx = axis(w, out_w)
    rows = image[:, i0, :] + ty[None, :, None] * (image[:, i1, :] - image[:, i0, :])
    return rows[:, :, j0] + tx[None, None, :] * (rows[:, :, j1] - rows[:, :, j0])


def resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize an integer label map by nearest-neighbour sampling."""
    h, w = mask.shape
    ri = np.minimum(((np.arange(out_h) + 0.5) * (h / out_h)).astype(np.int64), h - 1)
    ci = np.minimum(((np.arange(out_w) + 0.5) * (w / out_w)).astype(np.int64), w - 1)
    return mask[ri][:, ci]


def augment(image: np.ndarray, mask: np.ndarray, seed: int, epoch: int,
            index: int, ignore_label: int = IGNORE_LABEL) -> tuple[np.ndarray, np.ndarray]:
    """Random flips, quarter-turns, rescale (crop/pad back), brightness.

    The transform is fully determined by (seed, epoch, index). Rescaling to
    a larger size crops the top-left corner; rescaling smaller pads on the
    bottom/right with zeros (image) and the ignore label (mask), so output
    sizes never change. Brightness touches the image only.
    """
    g = rng.stream(seed, f"augment/{epoch}/{index}")
    _, h, w = image.shape
    if g.random() < 0.5:
        image, mask = image[:, :, ::-1], mask[:, ::-1]
    if g.random() < 0.5:
        image, mask = image[:, ::-1, :], mask[::-1, :]
    # quarter turns would swap the sides of a non-square input
    turns = (0, 1, 2, 3) if h == w else (0, 2)
    k = turns[int(g.integers(0, len(turns)))]
    if k:
        image = np.rot90(image, k, axes=(1, 2))
        mask = np.rot90(mask, k, axes=(0, 1))

    scale = SCALE_CHOICES[int(g.integers(0, len(SCALE_CHOICES)))]
    if scale != 1.0:
        ih, iw = image.shape[1:]
        nh, nw = max(int(round(ih * scale)), 1), max(int(round(iw * scale)), 1)
        image = resize_bilinear(np.ascontiguousarray(image), nh, nw)
        mask = resize_nearest(np.ascontiguousarray(mask), nh, nw)
        image = image[:, :ih, :iw]
        mask = mask[:ih, :iw]
        ph, pw = ih - image.shape[1], iw - image.shape[2]
        if ph or pw:
            image = np.pad(image, ((0, 0), (0, ph), (0, pw)))
            mask = np.pad(mask, ((0, ph), (0, pw)), constant_values=ignore_label)

    brightness = image.dtype.type(g.uniform(0.8, 1.2))
    image = np.clip(image * brightness, 0.0, 1.0)
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


def batches(dataset, batch_size: int, seed: int, epoch: int,
            augmented: bool = True):
    """Shuffled (images (B, 3, H, W), masks (B, H, W)) minibatches.

    Order is drawn from the (seed, epoch) shuffle stream; augmentation of
    item i uses the (seed, epoch, i) stream, so neither depends on batch
    size or iteration interleaving.
    """
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    order = rng.stream(seed, f"shuffle/{epoch}").permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        images, masks = [], []
        for i in chunk:
            image, mask = dataset[int(i)]
            if augmented:
                image, mask = augment(image, mask, seed, epoch, int(i))
            images.append(image)
            masks.append(mask)
        yield np.stack(images), np.stack(masks)


# ---------------------------------------------------------------------------
# test-time augmentation


def tta_flip_infer(model, images: np.ndarray) -> np.ndarray:
    """Mean of de-flipped logits over {identity, hflip, vflip, both}."""
    if images.ndim != 4:
        raise ShapeError(f"expected (B, 3, H, W), got {images.shape}")
    total = None
    with tensor.no_grad():
        for fh in (False, True):
            for fv in (False, True):
                arr = images
                if fh:
                    arr = arr[:, :, :, ::-1]
                if fv:
                    arr = arr[:, :, ::-1, :]
                logits = model(Tensor(np.ascontiguousarray(arr))).data
                if fh:
                    logits = logits[:, :, :, ::-1]
                if fv:
                    logits = logits[:, :, ::-1, :]
                total = logits.copy() if total is None else total + logits
    return total / 4.0
