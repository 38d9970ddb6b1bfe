"""Inference-time sample synthesis.

Two procedures, both running on frozen flows:

* Training-sample expansion: invert two same-identity, same-modality images,
  decode a convex combination z_a + (p/q)(z_b - z_a). The generated image
  inherits the shared identity and the flow's modality.
* Cross-modality generation: invert through one flow, decode through the
  other. Because both maps are bijections the v->r->v composition returns
  the input exactly (up to float error) at any training state.

Everything here is deterministic: no dequantization noise, pair sampling from
an explicit seeded generator.
"""

import dataclasses
import os

import numpy as np

from .autodiff import Tensor
from .data import Sample, from_normalized, to_normalized
from .errors import ConfigError, DataError
from .model import FlowGenerator

__all__ = ["InterpolationSpec", "tse_generate", "interpolate_latents",
           "expand_dataset", "cmg_v2r", "cmg_r2v", "interpolation_path",
           "translate_normalized"]


@dataclasses.dataclass(frozen=True)
class InterpolationSpec:
    p: int = 1
    q: int = 2

    def __post_init__(self):
        if not (isinstance(self.p, int) and isinstance(self.q, int)):
            raise ConfigError(f"interpolation p, q must be integers, got {self.p!r}, {self.q!r}")
        if not self.q > self.p >= 1:
            raise ConfigError(f"interpolation needs q > p >= 1, got p={self.p}, q={self.q}")


def _as_batch(image: np.ndarray) -> Tensor:
    return Tensor(to_normalized(image)[None])


def _to_image(y: Tensor) -> np.ndarray:
    return from_normalized(y.data[0])


def interpolate_latents(gen: FlowGenerator, a: np.ndarray, b: np.ndarray,
                        p: int, q: int) -> np.ndarray:
    """Latents of a and b under gen, combined as z_a + (p/q)(z_b - z_a)."""
    za, _ = gen.invert(_as_batch(a))
    zb, _ = gen.invert(_as_batch(b))
    return za.data + (p / q) * (zb.data - za.data)


def tse_generate(gen: FlowGenerator, a: Sample, b: Sample,
                 spec: InterpolationSpec = InterpolationSpec()) -> Sample:
    if a.identity != b.identity:
        raise DataError(f"interpolation pair must share an identity, "
                        f"got {a.identity} and {b.identity}")
    if a.modality != b.modality or a.modality != gen.modality:
        raise DataError(f"interpolation pair must match the flow's modality "
                        f"({gen.modality}), got {a.modality} and {b.modality}")
    z = interpolate_latents(gen, a.image, b.image, spec.p, spec.q)
    out = gen.generate(Tensor(z))
    return Sample(_to_image(out), a.identity, gen.modality, generated=True)


def interpolation_path(gen: FlowGenerator, a: Sample, b: Sample, q: int) -> list[Sample]:
    """The q-1 images strictly between a and b along the latent segment."""
    if q < 2:
        raise ConfigError(f"path needs q >= 2, got {q}")
    return [tse_generate(gen, a, b, InterpolationSpec(p, q)) for p in range(1, q)]


# -- dataset expansion ---------------------------------------------------------


def _stem(s: Sample, fallback: str) -> str:
    if s.path:
        return os.path.splitext(os.path.basename(s.path))[0]
    return fallback


def _same_id_pairs(samples: list[Sample]) -> tuple[list[tuple[Sample, Sample]], int]:
    """All unordered same-identity pairs, plus how many identities had no
    partner to offer."""
    by_id: dict[int, list[Sample]] = {}
    for s in samples:
        by_id.setdefault(s.identity, []).append(s)
    pairs = []
    skipped = 0
    for ident in sorted(by_id):
        group = by_id[ident]
        if len(group) < 2:
            skipped += 1
            continue
        for i in range(len(group)):
            for j in range(i + 1, len(group)):
                pairs.append((group[i], group[j]))
    return pairs, skipped


def expand_dataset(gen_v: FlowGenerator, gen_r: FlowGenerator,
                   dataset: list[Sample], multiple: float,
                   modalities: tuple[str, ...] = ("visible", "infrared"),
                   spec: InterpolationSpec = InterpolationSpec(),
                   seed: int = 0) -> tuple[list[Sample], int]:
    """Returns (generated samples, skipped identity count). Adds
    floor(multiple * N_modality) pseudo-samples per requested modality,
    pairs drawn uniformly without replacement until the pool runs dry."""
    if multiple < 0:
        raise ConfigError(f"expansion multiple must be >= 0, got {multiple}")
    gens = {"visible": gen_v, "infrared": gen_r}
    for m in modalities:
        if m not in gens:
            raise ConfigError(f"unknown target modality {m!r}")
    rng = np.random.default_rng(seed)
    out: list[Sample] = []
    total_skipped = 0
    for modality in modalities:
        subset = [s for s in dataset if s.modality == modality]
        stems = {id(s): _stem(s, f"i{pos:03d}") for pos, s in enumerate(subset)}
        want = int(multiple * len(subset))
        pairs, skipped = _same_id_pairs(subset)
        total_skipped += skipped
        if want == 0:
            continue
        if not pairs:
            raise DataError(f"no same-identity pairs available in {modality}")
        order = rng.permutation(len(pairs))
        seen: dict[str, int] = {}
        for n in range(want):
            if n < len(order):
                a, b = pairs[int(order[n])]
            else:
                a, b = pairs[int(rng.integers(0, len(pairs)))]
            sample = tse_generate(gens[modality], a, b, spec)
            name = f"{stems[id(a)]}-{stems[id(b)]}_{spec.p}_{spec.q}"
            count = seen.get(name, 0) + 1
            seen[name] = count
            suffix = f"_k{count}" if count > 1 else ""
            sample.path = os.path.join(modality, str(sample.identity),
                                       f"{name}{suffix}.png")
            out.append(sample)
    return out, total_skipped


# -- cross-modality generation --------------------------------------------------


def translate_normalized(gen_src: FlowGenerator, gen_dst: FlowGenerator,
                         x: np.ndarray) -> np.ndarray:
    """Core translation on the normalized scale. Bijectivity makes the
    round trip translate(translate(x)) exact here; [0,255] conversion with
    its clip and rounding happens only at the Sample/file boundary."""
    z, _ = gen_src.invert(Tensor(np.asarray(x, dtype=np.float64)))
    return gen_dst.generate(Tensor(z.data)).data


def _translate(gen_src: FlowGenerator, gen_dst: FlowGenerator, s: Sample) -> Sample:
    if s.modality != gen_src.modality:
        raise DataError(f"sample modality {s.modality!r} does not match "
                        f"source flow {gen_src.modality!r}")
    y = translate_normalized(gen_src, gen_dst, to_normalized(s.image)[None])
    return Sample(from_normalized(y[0]), s.identity, gen_dst.modality, generated=True)


def cmg_v2r(gen_v: FlowGenerator, gen_r: FlowGenerator, s: Sample) -> Sample:
    """Visible in, pseudo-infrared out (shared latent code)."""
    return _translate(gen_v, gen_r, s)


def cmg_r2v(gen_r: FlowGenerator, gen_v: FlowGenerator, s: Sample) -> Sample:
    return _translate(gen_r, gen_v, s)
