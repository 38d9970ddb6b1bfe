"""Identity encoders, modality discriminators, and the four adversarial losses.

The encoders act as identity discriminators: they embed images as unit-norm
feature vectors and are trained to spread real/translated pairs apart while
the generators are trained to pull them together. Modality discriminators
score how much an image looks like their modality; both sides of that game
use least-squares targets, so every loss below has a hard analytic range.
"""

import numpy as np

from .autodiff import Tensor, conv2d, l2_normalize, pairwise_distances
from .errors import NumericError, ShapeError

__all__ = [
    "Encoder",
    "ModalityDiscriminator",
    "identity_gen_loss",
    "identity_disc_loss",
    "modality_gen_loss",
    "modality_disc_loss",
]


def _conv_weight(rng: np.random.Generator, c_out: int, c_in: int, k: int = 3) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(c_in * k * k), size=(c_out, c_in, k, k))


class _ConvTrunk:
    """Four stride-2 convolutions with tanh activations."""

    def __init__(self, c_in: int, widths, rng: np.random.Generator):
        self.layers = []
        prev = c_in
        for w in widths:
            self.layers.append((Tensor(_conv_weight(rng, w, prev), requires_grad=True),
                                Tensor(np.zeros(w), requires_grad=True)))
            prev = w
        self.c_out = prev

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for w, b in self.layers:
            h = conv2d(h, w, b, stride=2, padding=1).tanh()
        return h

    def named_params(self, prefix: str):
        out = []
        for i, (w, b) in enumerate(self.layers):
            out.extend([(f"{prefix}.conv{i}.w", w), (f"{prefix}.conv{i}.b", b)])
        return out


class Encoder:
    """Image -> unit-norm identity feature vector.

    Trunk of four stride-2 convolutions, global average pooling, then a
    linear head to `dim` followed by L2 normalization, so all pairwise
    feature distances live in [0, 2].
    """

    def __init__(self, in_shape=(3, 24, 12), widths=(16, 32, 64, 64), dim: int = 64,
                 seed: int = 0, modality: str = "visible"):
        rng = np.random.default_rng(seed)
        self.in_shape = tuple(in_shape)
        self.dim = dim
        self.modality = modality
        self.trunk = _ConvTrunk(in_shape[0], widths, rng)
        self.head_w = Tensor(rng.normal(0.0, 1.0 / np.sqrt(self.trunk.c_out),
                                        size=(self.trunk.c_out, dim)), requires_grad=True)
        self.head_b = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1:] != self.in_shape:
            raise ShapeError(f"Encoder: expected (N, {self.in_shape}), got {x.shape}")
        h = self.trunk(x)
        pooled = h.mean(axis=(2, 3))
        return l2_normalize(pooled @ self.head_w + self.head_b, axis=-1)

    def named_params(self, prefix: str = "enc"):
        return self.trunk.named_params(f"{prefix}.trunk") + [
            (f"{prefix}.head.w", self.head_w), (f"{prefix}.head.b", self.head_b)]

    def params(self):
        return [p for _, p in self.named_params()]

    def set_trainable(self, flag: bool):
        for p in self.params():
            p.requires_grad = flag


class ModalityDiscriminator:
    """Image -> scalar in (0, 1): how much does this look like my modality.

    Same trunk arity as the Encoder plus one more convolution collapsing to a
    single channel, spatially averaged and squashed by a sigmoid. The final
    convolution starts at zero, so a fresh discriminator outputs exactly 0.5.
    """

    def __init__(self, in_shape=(3, 24, 12), widths=(16, 32, 64, 64),
                 seed: int = 0, modality: str = "visible"):
        rng = np.random.default_rng(seed)
        self.in_shape = tuple(in_shape)
        self.modality = modality
        self.trunk = _ConvTrunk(in_shape[0], widths, rng)
        self.final_w = Tensor(np.zeros((1, self.trunk.c_out, 3, 3)), requires_grad=True)
        self.final_b = Tensor(np.zeros(1), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1:] != self.in_shape:
            raise ShapeError(f"ModalityDiscriminator: expected (N, {self.in_shape}), got {x.shape}")
        h = self.trunk(x)
        logit = conv2d(h, self.final_w, self.final_b, stride=1, padding=1)
        return logit.mean(axis=(1, 2, 3)).sigmoid()

    def named_params(self, prefix: str = "disc"):
        return self.trunk.named_params(f"{prefix}.trunk") + [
            (f"{prefix}.final.w", self.final_w), (f"{prefix}.final.b", self.final_b)]

    def params(self):
        return [p for _, p in self.named_params()]

    def set_trainable(self, flag: bool):
        for p in self.params():
            p.requires_grad = flag


# -- identity adversarial losses --------------------------------------------


def _mean_pair_distance(encoder: Encoder, real: Tensor, fake: Tensor,
                        real_ids, fake_ids) -> Tensor:
    """Mean feature distance over all (real, translated) pairs sharing an identity."""
    real_ids = np.asarray(real_ids)
    fake_ids = np.asarray(fake_ids)
    mask = (real_ids[:, None] == fake_ids[None, :]).astype(np.float64)
    if mask.sum() == 0:
        raise NumericError("identity loss: no same-identity (real, translated) pair in batch")
    f_real = encoder(real)
    f_fake = encoder(fake)
    dist = pairwise_distances(f_real, f_fake, safe_mask=mask)
    return (dist * Tensor(mask)).sum() / float(mask.sum())


def identity_gen_loss(enc_v: Encoder, enc_r: Encoder,
                      real_v: Tensor, fake_v: Tensor, ids_real_v, ids_fake_v,
                      real_r: Tensor, fake_r: Tensor, ids_real_r, ids_fake_r) -> Tensor:
    """Generator side: pull translated images toward real features of the same identity.

    fake_v are translations into the visible domain (their ids come from the
    infrared sources) and vice versa. Value lies in [0, 4]: two mean unit-
    vector distances, each in [0, 2].
    """
    return (_mean_pair_distance(enc_v, real_v, fake_v, ids_real_v, ids_fake_v)
            + _mean_pair_distance(enc_r, real_r, fake_r, ids_real_r, ids_fake_r))


def identity_disc_loss(enc_v: Encoder, enc_r: Encoder,
                       real_v: Tensor, fake_v: Tensor, ids_real_v, ids_fake_v,
                       real_r: Tensor, fake_r: Tensor, ids_real_r, ids_fake_r) -> Tensor:
    """Encoder side: push the same pairs apart, scored as (2 - mean distance) per modality.

    Value lies in [0, 4]; the translated inputs must already be detached
    (the trainer freezes the flows during this step).
    """
    return ((2.0 - _mean_pair_distance(enc_v, real_v, fake_v, ids_real_v, ids_fake_v))
            + (2.0 - _mean_pair_distance(enc_r, real_r, fake_r, ids_real_r, ids_fake_r)))


# -- modality adversarial losses ---------------------------------------------


def modality_gen_loss(disc_v: ModalityDiscriminator, fake_v: Tensor,
                      disc_r: ModalityDiscriminator, fake_r: Tensor) -> Tensor:
    """Generator side, least squares: drive discriminator scores on fakes to 1.

    Value lies in [0, 2].
    """
    dv = 1.0 - disc_v(fake_v)
    dr = 1.0 - disc_r(fake_r)
    return (dv * dv).mean() + (dr * dr).mean()


def modality_disc_loss(disc_v: ModalityDiscriminator, real_v: Tensor, fake_v: Tensor,
                       disc_r: ModalityDiscriminator, real_r: Tensor, fake_r: Tensor) -> Tensor:
    """Discriminator side, least squares: reals to 1, fakes to 0. Value in [0, 4]."""
    rv = 1.0 - disc_v(real_v)
    fv = disc_v(fake_v)
    rr = 1.0 - disc_r(real_r)
    fr = disc_r(fake_r)
    return (rv * rv).mean() + (fv * fv).mean() + (rr * rr).mean() + (fr * fr).mean()
