"""Invertible generator assembled from flow layers, plus the likelihood losses.

Directions follow the latent-at-the-bottom convention: `invert` maps images to
latent codes (the training direction, accumulating the log-determinant) and
`generate` maps latent codes back to images. generate(invert(x)) == x up to
float error, for any parameter values.
"""

import math

import numpy as np

from .autodiff import Tensor, pairwise_distances
from .errors import ConfigError, NumericError, ShapeError
from .layers import AffineCoupling, InvConv1x1, Squeeze, TanhActivation

__all__ = [
    "GaussianPrior",
    "FlowGenerator",
    "flow_nll_term",
    "flow_loss",
    "bits_per_dim",
    "noise_loss",
    "generator_loss",
]


class GaussianPrior:
    """Isotropic Gaussian over flattened latents."""

    def __init__(self, mu: float = 0.0, sigma: float = 1.0):
        if sigma <= 0.0:
            raise ConfigError(f"GaussianPrior: sigma must be positive, got {sigma}")
        self.mu = float(mu)
        self.sigma = float(sigma)


class FlowGenerator:
    """Stack of coupling + 1x1-convolution blocks behind one squeeze.

    The squeeze sits at the image interface (3 channels become 12, so the
    couplings split 6/6); `blocks` pairs of (coupling, 1x1 conv) follow; a
    single invertible tanh sits at one end of the block stack. With
    tanh_placement="latent" it is the final reverse step, so latent codes
    live in (-1, 1) and any code produced by invert() can be fed back to
    generate() on either generator without saturating the artanh clamp.
    "image" places it right after the squeeze instead.
    """

    def __init__(self, in_shape=(3, 24, 12), blocks: int = 12, hidden: int = 32,
                 tanh_placement: str = "latent", seed: int = 0, modality: str = "visible"):
        c, h, w = in_shape
        if h % 2 or w % 2:
            raise ConfigError(f"FlowGenerator: spatial extents must be even, got {h}x{w}")
        if blocks < 1:
            raise ConfigError(f"FlowGenerator: needs >= 1 block, got {blocks}")
        if tanh_placement not in ("image", "latent"):
            raise ConfigError(f"FlowGenerator: unknown tanh_placement {tanh_placement!r}")
        self.in_shape = tuple(in_shape)
        self.n_blocks = blocks
        self.tanh_placement = tanh_placement
        self.modality = modality
        self.latent_shape = (4 * c, h // 2, w // 2)

        rng = np.random.default_rng(seed)
        c_lat = 4 * c
        self.squeeze = Squeeze()
        self.tanh = TanhActivation()
        self.blocks = [(AffineCoupling(c_lat, hidden, rng), InvConv1x1(c_lat, rng))
                       for _ in range(blocks)]

        # Layers in reverse (image-to-latent) application order.
        seq = [self.squeeze]
        if tanh_placement == "image":
            seq.append(self.tanh)
        for coupling, conv in self.blocks:
            seq.extend([coupling, conv])
        if tanh_placement == "latent":
            seq.append(self.tanh)
        self._reverse_seq = seq

    # -- propagation -----------------------------------------------------

    def _promote(self, x: Tensor, expect: tuple, op: str):
        single = x.ndim == 3
        if single:
            x = x.reshape((1,) + x.shape)
        if x.ndim != 4 or x.shape[1:] != expect:
            raise ShapeError(f"{op}: expected trailing shape {expect}, got {x.shape}")
        return x, single

    def invert(self, x: Tensor):
        """Image batch -> (latent batch, scalar logdet summed over the batch)."""
        h, single = self._promote(x, self.in_shape, "invert")
        logdet = None
        for layer in self._reverse_seq:
            h, ld = layer.reverse(h)
            logdet = ld if logdet is None else logdet + ld
        if single:
            h = h.reshape(self.latent_shape)
        return h, logdet

    def generate(self, z: Tensor) -> Tensor:
        """Latent batch -> image batch; exact inverse of invert."""
        h, single = self._promote(z, self.latent_shape, "generate")
        for layer in reversed(self._reverse_seq):
            h = layer.forward(h)
        if single:
            h = h.reshape(self.in_shape)
        return h

    # -- parameter plumbing ------------------------------------------------

    def named_params(self, prefix: str = "gen"):
        out = []
        for i, (coupling, conv) in enumerate(self.blocks):
            out.extend(coupling.named_params(f"{prefix}.block{i:02d}.coupling"))
            out.extend(conv.named_params(f"{prefix}.block{i:02d}.conv"))
        return out

    def params(self):
        return [p for _, p in self.named_params()]

    def set_trainable(self, flag: bool):
        for p in self.params():
            p.requires_grad = flag

    def check_invertible(self):
        for _, conv in self.blocks:
            conv.check_invertible()

    @property
    def saturations(self) -> int:
        return self.tanh.saturations

    def reset_saturations(self):
        self.tanh.reset_saturations()


# -- losses ----------------------------------------------------------------


def flow_nll_term(z: Tensor, logdet: Tensor, prior: GaussianPrior) -> Tensor:
    """Single-modality negative log-likelihood core: quadratic term minus logdet.

    Constant terms of the Gaussian are omitted here (they do not move under
    training); bits_per_dim adds them back for reporting.
    """
    dev = z - prior.mu
    return (dev * dev).sum() * (0.5 / (prior.sigma ** 2)) - logdet


def flow_loss(z_v: Tensor, logdet_v: Tensor, z_r: Tensor, logdet_r: Tensor,
              prior: GaussianPrior) -> Tensor:
    """Joint exact-likelihood loss over both modalities."""
    return flow_nll_term(z_v, logdet_v, prior) + flow_nll_term(z_r, logdet_r, prior)


def bits_per_dim(z: np.ndarray, logdet: float, prior: GaussianPrior) -> float:
    """Full negative log-likelihood, constants included, per dimension in bits."""
    n = z.size
    if n == 0:
        raise ShapeError("bits_per_dim: empty latent")
    quad = float(((z - prior.mu) ** 2).sum()) * (0.5 / prior.sigma ** 2)
    nll = 0.5 * n * math.log(2.0 * math.pi) + n * math.log(prior.sigma) + quad - float(logdet)
    return nll / (n * math.log(2.0))


def noise_loss(z: Tensor, ids, modalities=None, pairing: str = "cross") -> Tensor:
    """Latent clustering pressure: mean intra-class distance minus mean inter-class.

    Classes are identity labels; pairs are unordered and, with the default
    "cross" pairing, formed across both modalities jointly. pairing="within"
    restricts both pair sets to same-modality pairs (ablation variant).
    Unbounded below by design; the trainer keeps its weight small.
    """
    if pairing not in ("cross", "within"):
        raise ConfigError(f"noise_loss: unknown pairing {pairing!r}")
    ids = np.asarray(ids)
    n = z.shape[0]
    if ids.shape != (n,):
        raise ShapeError(f"noise_loss: {n} latents but {ids.shape} labels")
    flat = z.reshape(n, int(np.prod(z.shape[1:])))
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    same_id = ids[:, None] == ids[None, :]
    intra = upper & same_id
    inter = upper & ~same_id
    if pairing == "within":
        if modalities is None:
            raise ConfigError("noise_loss: pairing='within' needs modality labels")
        mods = np.asarray(modalities)
        same_mod = mods[:, None] == mods[None, :]
        intra &= same_mod
        inter &= same_mod
    if not intra.any():
        raise NumericError("noise_loss: batch has no intra-class pair")
    if not inter.any():
        raise NumericError("noise_loss: batch has no inter-class pair")
    dist = pairwise_distances(flat, flat, safe_mask=(intra | inter))
    mean_intra = (dist * Tensor(intra.astype(np.float64))).sum() / float(intra.sum())
    mean_inter = (dist * Tensor(inter.astype(np.float64))).sum() / float(inter.sum())
    return mean_intra - mean_inter


def generator_loss(flow_term: Tensor, noise_term: Tensor, noise_weight: float) -> Tensor:
    """Likelihood plus weighted latent-clustering term."""
    return flow_term + noise_term * float(noise_weight)
