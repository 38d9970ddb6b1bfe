"""Datasets: synthetic two-modality sprite corpus, disk layout, pixel scaling.

A sample is one image of one identity in one modality. The synthetic renderer
gives every identity a persistent appearance (shape kind, hue, size, aspect,
heat-spot position) and every image small per-instance jitter, so encoders
have something real to separate. Infrared renders the same geometry as a
single-channel heat map replicated across RGB: channel-equal by construction.

On disk a dataset is `<root>/<modality>/<identity>/*.png` (or .ppm) plus a
`manifest.json` listing every sample. Loading accepts either the manifest or
a bare directory tree in that layout.
"""

import dataclasses
import json
import os

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, DataError
from .imageio import read_image, write_image

__all__ = [
    "Sample", "SynthSpec", "render_dataset", "write_dataset", "load_dataset",
    "to_normalized", "from_normalized", "quantize", "batch_tensor",
    "MODALITIES", "split_by_modality",
]

MODALITIES = ("visible", "infrared")

# Pixel range [0, 255] maps affinely onto [-0.9, 0.9]; anything the flows emit
# outside that band is clipped back at quantization time.
_SCALE = 1.8
_SHIFT = -0.9


@dataclasses.dataclass(eq=False)  # array field makes == ambiguous
class Sample:
    image: np.ndarray  # (3, H, W) float64 in [0, 255]
    identity: int
    modality: str
    generated: bool = False
    path: str | None = None


@dataclasses.dataclass
class SynthSpec:
    identities: int = 8
    images_per_id: int = 4  # per modality
    height: int = 24
    width: int = 12
    seed: int = 0

    def validate(self):
        if self.identities < 2:
            raise ConfigError(f"need at least 2 identities, got {self.identities}")
        if self.images_per_id < 2:
            raise ConfigError(f"need at least 2 images per identity, got {self.images_per_id}")
        if self.height < 8 or self.width < 8 or self.height % 2 or self.width % 2:
            raise ConfigError(f"extent must be even and at least 8x8, got {self.height}x{self.width}")


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def _sprite_mask(kind: int, h: int, w: int, cy: float, cx: float,
                 ry: float, rx: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = (yy - cy) / ry, (xx - cx) / rx
    if kind == 0:
        f = np.sqrt(dy * dy + dx * dx)
    elif kind == 1:
        f = np.maximum(np.abs(dy), np.abs(dx))
    else:
        f = np.abs(dy) + np.abs(dx)
    # Soft edge, about 1.5 px wide. Hard edges make raw-pixel distances all
    # rim and no body, which buries the identity signal under jitter.
    return np.clip((1.0 - f) * min(ry, rx) / 1.5 + 0.5, 0.0, 1.0)


def render_dataset(spec: SynthSpec) -> list[Sample]:
    """Deterministic synthetic corpus: same spec, same bytes."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    samples: list[Sample] = []
    for k in range(spec.identities):
        # Persistent identity appearance. Hues are spread evenly so nearest
        # centroid classification has real margins even with many identities.
        kind = int(rng.integers(0, 3))
        hue = (k / spec.identities + rng.uniform(0.0, 0.4 / spec.identities)) % 1.0
        sat = rng.uniform(0.75, 1.0)
        size = rng.uniform(0.28, 0.42)  # fraction of the short extent, radius
        aspect = rng.uniform(0.8, 1.25)
        # Warmth spaced evenly across identities: the heat level is the
        # infrared analogue of hue, so it must out-vote per-image jitter.
        warmth = 0.25 + 0.75 * (k + rng.uniform(0.2, 0.8)) / spec.identities
        spot_dy, spot_dx = rng.uniform(-0.4, 0.4, size=2)

        def instance(mod_rng):
            jy = mod_rng.uniform(-0.05, 0.05) * h
            jx = mod_rng.uniform(-0.05, 0.05) * w
            scale = mod_rng.uniform(0.93, 1.07)
            bright = mod_rng.uniform(0.85, 1.15)
            ry = max(2.0, size * scale * h * aspect)
            rx = max(2.0, size * scale * w / aspect)
            mask = _sprite_mask(kind, h, w, h / 2 + jy, w / 2 + jx, ry, rx)
            return mask, (h / 2 + jy, w / 2 + jx, ry, rx), bright

        for _ in range(spec.images_per_id):
            mask, _, bright = instance(rng)
            rgb = _hsv_to_rgb(hue, sat, min(1.0, 0.85 * bright))
            img = np.full((3, h, w), 30.0 * bright)
            img += mask[None] * (rgb[:, None, None] * 255.0 - 30.0 * bright)
            noise = rng.normal(0.0, 3.0, size=(3, h, w))
            samples.append(Sample(np.clip(img + noise, 0.0, 255.0), k, "visible"))

        for _ in range(spec.images_per_id):
            mask, (cy, cx, ry, rx), bright = instance(rng)
            yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
            # Heat map: warm body plus an identity-specific hot spot, cool floor.
            spot = np.exp(-(((yy - cy - spot_dy * ry) ** 2) / (0.35 * ry) ** 2
                            + ((xx - cx - spot_dx * rx) ** 2) / (0.35 * rx) ** 2))
            # Heat cameras meter their own gain, so damp the brightness jitter.
            ib = bright ** 0.25
            heat = 18.0 + mask * (warmth * 185.0 * ib - 18.0) + mask * spot * 85.0
            heat += rng.normal(0.0, 3.0, size=(h, w))
            gray = np.clip(heat, 0.0, 255.0)
            samples.append(Sample(np.repeat(gray[None], 3, axis=0), k, "infrared"))
    return samples


# -- disk layout --------------------------------------------------------------


def write_dataset(samples: list[Sample], out_dir, fmt: str = "png",
                  overwrite: bool = False) -> str:
    if fmt not in ("png", "ppm"):
        raise ConfigError(f"unsupported image format {fmt!r}")
    manifest_path = os.path.join(out_dir, "manifest.json")
    if os.path.exists(manifest_path) and not overwrite:
        raise ConfigError(f"{manifest_path} exists; pass overwrite to replace it")
    entries = []
    counters: dict[tuple, int] = {}
    for s in samples:
        key = (s.modality, s.identity)
        idx = counters.get(key, 0)
        counters[key] = idx + 1
        rel = s.path or os.path.join(s.modality, str(s.identity), f"{idx:03d}.{fmt}")
        full = os.path.join(out_dir, rel)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        write_image(full, quantize(s.image))
        entries.append({"path": rel, "identity": s.identity,
                        "modality": s.modality, "generated": s.generated})
        s.path = rel
    with open(manifest_path, "w") as f:
        json.dump({"samples": entries}, f, indent=1, sort_keys=True)
        f.write("\n")
    return manifest_path


def _resize_nearest(img: np.ndarray, h: int, w: int) -> np.ndarray:
    sh, sw = img.shape[1], img.shape[2]
    ri = (np.arange(h) * sh // h).clip(0, sh - 1)
    ci = (np.arange(w) * sw // w).clip(0, sw - 1)
    return img[:, ri[:, None], ci[None, :]]


def _load_one(root, rel, identity, modality, generated, extent) -> Sample:
    img = read_image(os.path.join(root, rel)).astype(np.float64).transpose(2, 0, 1)
    if extent is not None and img.shape[1:] != tuple(extent):
        img = _resize_nearest(img, extent[0], extent[1])
    return Sample(img, identity, modality, generated, rel)


def load_dataset(root, extent: tuple[int, int] | None = None) -> list[Sample]:
    """Load from a manifest if present, else scan <modality>/<identity>/*."""
    root = str(root)
    if root.endswith("manifest.json"):
        root, manifest = os.path.dirname(root), root
    else:
        manifest = os.path.join(root, "manifest.json")
    if os.path.isfile(manifest):
        try:
            with open(manifest) as f:
                doc = json.load(f)
            entries = doc["samples"]
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise DataError(f"bad manifest {manifest}: {e}")
        out = []
        for e in entries:
            try:
                out.append(_load_one(root, e["path"], int(e["identity"]),
                                     e["modality"], bool(e.get("generated", False)), extent))
            except (KeyError, ValueError) as exc:
                raise DataError(f"bad manifest entry {e!r}: {exc}")
        if not out:
            raise DataError(f"manifest {manifest} lists no samples")
        return out

    out = []
    for modality in sorted(os.listdir(root)) if os.path.isdir(root) else ():
        mdir = os.path.join(root, modality)
        if modality not in MODALITIES or not os.path.isdir(mdir):
            continue
        for ident in sorted(os.listdir(mdir)):
            idir = os.path.join(mdir, ident)
            if not os.path.isdir(idir):
                continue
            try:
                identity = int(ident)
            except ValueError:
                raise DataError(f"identity directory {idir} is not an integer")
            for name in sorted(os.listdir(idir)):
                if name.lower().endswith((".png", ".ppm")):
                    rel = os.path.join(modality, ident, name)
                    out.append(_load_one(root, rel, identity, modality, False, extent))
    if not out:
        raise DataError(f"no dataset found under {root}")
    return out


def split_by_modality(samples: list[Sample]) -> dict[str, list[Sample]]:
    out: dict[str, list[Sample]] = {m: [] for m in MODALITIES}
    for s in samples:
        if s.modality not in out:
            raise DataError(f"unknown modality {s.modality!r} in dataset")
        out[s.modality].append(s)
    return out


# -- pixel scaling -------------------------------------------------------------


def to_normalized(image: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    """[0, 255] -> [-0.9, 0.9]. With an rng, adds dequantization noise of
    width one pixel step before scaling, so training never sees a lattice."""
    x = np.asarray(image, dtype=np.float64)
    if rng is not None:
        x = x + rng.uniform(0.0, 1.0, size=x.shape)
    return (x / 255.0) * _SCALE + _SHIFT


def from_normalized(arr: np.ndarray) -> np.ndarray:
    x = (np.asarray(arr, dtype=np.float64) - _SHIFT) / _SCALE * 255.0
    return np.clip(x, 0.0, 255.0)


def quantize(image: np.ndarray) -> np.ndarray:
    """(3, H, W) float in [0, 255] -> (H, W, 3) uint8, ties to even."""
    x = np.clip(np.asarray(image, dtype=np.float64), 0.0, 255.0)
    return np.rint(x).astype(np.uint8).transpose(1, 2, 0)


def batch_tensor(samples: list[Sample],
                 rng: np.random.Generator | None = None) -> tuple[Tensor, np.ndarray]:
    if not samples:
        raise DataError("empty batch")
    stack = np.stack([to_normalized(s.image, rng) for s in samples])
    ids = np.array([s.identity for s in samples], dtype=np.int64)
    return Tensor(stack), ids
