"""Invertible layers: 1x1 channel convolution, affine coupling, tanh activation, squeeze.

Every layer exposes the same protocol:

    reverse(x) -> (y, logdet)   image-side to latent-side, logdet summed over
                                the whole batch as a scalar Tensor
    forward(y) -> x             exact inverse of reverse
    named_params(prefix)        [(name, Tensor)] for optimizers and checkpoints

`reverse` is the direction used for likelihood training; `forward` is the
generation direction.
"""

import numpy as np

from .autodiff import (
    Tensor,
    channel_matmul,
    concat,
    conv2d,
    logabsdet,
    matrix_inverse,
    squeeze_space,
    unsqueeze_space,
)
from .errors import NumericError, ShapeError

__all__ = ["CouplingNet", "InvConv1x1", "AffineCoupling", "TanhActivation", "Squeeze"]

ARTANH_CLAMP = 1e-6
LOG4 = float(np.log(4.0))
SCALE_LOGIT_BOUND = 2.0


def _conv_weight(rng: np.random.Generator, c_out: int, c_in: int, k: int = 3) -> np.ndarray:
    scale = 1.0 / np.sqrt(c_in * k * k)
    return rng.normal(0.0, scale, size=(c_out, c_in, k, k))


class CouplingNet:
    """Two 3x3 convolutions with a tanh between; the final conv starts at zero.

    Zero-initializing the last layer makes a fresh coupling layer act as a
    constant map (s = sigmoid(0), t = 0) independent of its weights.

    An optional output bound squashes the result through bound * tanh(x/bound),
    a smooth identity near zero.  Scale logits use this: without it, inputs far
    from the training manifold drive sigmoid scales toward 0 and the inverse
    map (y - t) / s amplifies without limit through stacked couplings.
    """

    def __init__(self, c_in: int, c_hidden: int, c_out: int,
                 rng: np.random.Generator, bound: float | None = None):
        self.w1 = Tensor(_conv_weight(rng, c_hidden, c_in), requires_grad=True)
        self.b1 = Tensor(np.zeros(c_hidden), requires_grad=True)
        self.w2 = Tensor(np.zeros((c_out, c_hidden, 3, 3)), requires_grad=True)
        self.b2 = Tensor(np.zeros(c_out), requires_grad=True)
        self.bound = bound

    def __call__(self, x: Tensor) -> Tensor:
        h = conv2d(x, self.w1, self.b1, stride=1, padding=1).tanh()
        out = conv2d(h, self.w2, self.b2, stride=1, padding=1)
        if self.bound is not None:
            out = (out * (1.0 / self.bound)).tanh() * self.bound
        return out

    def named_params(self, prefix: str):
        return [(f"{prefix}.w1", self.w1), (f"{prefix}.b1", self.b1),
                (f"{prefix}.w2", self.w2), (f"{prefix}.b2", self.b2)]


class InvConv1x1:
    """Invertible 1x1 convolution: one (C, C) matrix applied at every pixel.

    reverse multiplies by W, forward by W^-1; the log-determinant picks up a
    log|det W| contribution once per spatial position per sample.
    """

    def __init__(self, channels: int, rng: np.random.Generator):
        # QR of a Gaussian matrix gives a uniformly random rotation, |det| = 1.
        q, _ = np.linalg.qr(rng.normal(size=(channels, channels)))
        self.w = Tensor(q, requires_grad=True)
        self.channels = channels

    def reverse(self, x: Tensor):
        n, c, h, w = x.shape
        if c != self.channels:
            raise ShapeError(f"InvConv1x1.reverse: expected {self.channels} channels, got {c}")
        out = channel_matmul(self.w, x)
        logdet = logabsdet(self.w) * float(n * h * w)
        return out, logdet

    def forward(self, y: Tensor) -> Tensor:
        if y.shape[1] != self.channels:
            raise ShapeError(f"InvConv1x1.forward: expected {self.channels} channels, got {y.shape[1]}")
        return channel_matmul(matrix_inverse(self.w), y)

    def check_invertible(self):
        sign, ld = np.linalg.slogdet(self.w.data)
        if sign == 0.0 or ld < np.log(1e-12):
            raise NumericError("InvConv1x1: weight drifted numerically singular; aborting rather than re-initializing")

    def named_params(self, prefix: str):
        return [(f"{prefix}.w", self.w)]


class AffineCoupling:
    """RealNVP-style coupling with sigmoid scales.

    The first d = C/2 channels pass through unchanged and parameterize an
    affine map of the rest: reverse computes y = x * s + t with
    s = sigmoid(S(x_pass)) strictly inside (0, 1), so the inverse
    (y - t) / s always exists. logdet = sum(log s), accumulated in the
    stable form -softplus(-S(x_pass)).

    S's output is bounded (see CouplingNet), keeping s away from 0 so a
    single coupling never amplifies its input by more than e^bound + 1.
    """

    def __init__(self, channels: int, hidden: int, rng: np.random.Generator):
        if channels < 2:
            raise ShapeError(f"AffineCoupling: needs >= 2 channels, got {channels}")
        self.channels = channels
        self.d = channels // 2
        self.s_net = CouplingNet(self.d, hidden, channels - self.d, rng,
                                 bound=SCALE_LOGIT_BOUND)
        self.t_net = CouplingNet(self.d, hidden, channels - self.d, rng)

    def _split(self, x: Tensor):
        if x.shape[1] != self.channels:
            raise ShapeError(f"AffineCoupling: expected {self.channels} channels, got {x.shape[1]}")
        return x[:, :self.d], x[:, self.d:]

    def reverse(self, x: Tensor):
        xa, xb = self._split(x)
        s_raw = self.s_net(xa)
        s = s_raw.sigmoid()
        t = self.t_net(xa)
        yb = xb * s + t
        logdet = -((-s_raw).softplus().sum())  # sum log sigmoid(s_raw)
        return concat([xa, yb], axis=1), logdet

    def forward(self, y: Tensor) -> Tensor:
        ya, yb = self._split(y)
        s = self.s_net(ya).sigmoid()
        t = self.t_net(ya)
        return concat([ya, (yb - t) / s], axis=1)

    def named_params(self, prefix: str):
        return self.s_net.named_params(f"{prefix}.s_net") + self.t_net.named_params(f"{prefix}.t_net")


class TanhActivation:
    """Invertible elementwise tanh.

    reverse applies tanh; forward applies artanh after clamping its input to
    [-1 + eps, 1 - eps] and counts how many elements the clamp actually moved
    (`saturations`). Per element, log(1 - tanh(z)^2) is accumulated as
    log 4 + 2z - 2*softplus(2z), which stays finite for large |z|.
    """

    def __init__(self, clamp: float = ARTANH_CLAMP):
        self.clamp = clamp
        self.saturations = 0

    def reverse(self, x: Tensor):
        out = x.tanh()
        two_x = x * 2.0
        logdet = (two_x - (two_x.softplus() * 2.0) + LOG4).sum()
        return out, logdet

    def forward(self, y: Tensor) -> Tensor:
        lim = 1.0 - self.clamp
        self.saturations += int(np.count_nonzero(np.abs(y.data) >= lim))
        return y.clip(-lim, lim).artanh()

    def reset_saturations(self):
        self.saturations = 0

    def named_params(self, prefix: str):
        return []


class Squeeze:
    """Space-to-channel reshuffle by factor 2; a fixed permutation, logdet 0."""

    def reverse(self, x: Tensor):
        return squeeze_space(x), Tensor(0.0)

    def forward(self, y: Tensor) -> Tensor:
        return unsqueeze_space(y)

    def named_params(self, prefix: str):
        return []
