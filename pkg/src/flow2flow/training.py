"""Alternating adversarial training of the two flows.

Each iteration runs two generator steps then one discriminator step. The
generator objective is exact likelihood for both flows plus the latent
clustering term plus the two adversarial generator terms; the discriminator
objective trains the identity encoders to stretch real/translated distances
and the modality discriminators to tell real from translated. The side not
being updated is frozen, and freezing is enforced three ways: requires_grad
is cleared, gradients on frozen parameters are asserted absent, and a hash
of the frozen parameters is compared before and after the update.

Every random draw (batch composition, dequantization noise) comes from one
generator whose bit state lives in the checkpoint, so a resumed run replays
the identical stream and the metrics CSV comes out byte-for-byte equal to an
uninterrupted one.
"""

import dataclasses
import hashlib
import math
import os

import numpy as np

from .adversarial import (Encoder, ModalityDiscriminator, identity_disc_loss,
                          identity_gen_loss, modality_disc_loss, modality_gen_loss)
from .autodiff import concat
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Sample, batch_tensor, split_by_modality
from .errors import ConfigError, DataError, NumericError
from .model import FlowGenerator, GaussianPrior, bits_per_dim, flow_nll_term, noise_loss
from .optim import Adam

__all__ = ["TrainConfig", "TrainState", "train", "save_state", "load_state",
           "METRICS_HEADER", "generator_step", "discriminator_step"]

METRICS_HEADER = ("iter,phase,l_flow_v,l_flow_r,l_noise,l_id_g,l_id_d,"
                  "l_mod_g,l_mod_d,bpd_v,bpd_r,sat_count")

_CARRY_KEYS = ("l_flow_v", "l_flow_r", "l_noise", "l_id_g", "l_id_d",
               "l_mod_g", "l_mod_d", "bpd_v", "bpd_r", "sat_count")


@dataclasses.dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 2e-4
    noise_weight: float = 0.01     # latent clustering term
    identity_weight: float = 1.0   # adversarial term weights
    modality_weight: float = 1.0
    ids_per_batch: int = 4
    images_per_id: int = 2         # per modality
    blocks: int = 12
    coupling_hidden: int = 32
    encoder_dim: int = 64
    height: int = 24
    width: int = 12
    seed: int = 0
    sigma: float = 1.0
    tanh_placement: str = "latent"
    dequantize: bool = True
    reuse_batch: bool = False      # reuse one batch across an iteration's steps
    noise_pairing: str = "cross"
    checkpoint_every: int = 100    # iterations; 0 = final checkpoint only

    def validate(self):
        for name in ("epochs", "lr", "ids_per_batch", "images_per_id", "blocks",
                     "coupling_hidden", "encoder_dim", "sigma"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.height % 2 or self.width % 2 or self.height < 4 or self.width < 4:
            raise ConfigError(f"image extent must be even, got {self.height}x{self.width}")
        if self.ids_per_batch < 2:
            raise ConfigError("need at least 2 identities per batch for inter-id pairs")
        if self.noise_weight < 0 or self.identity_weight < 0 or self.modality_weight < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if self.noise_pairing not in ("cross", "within"):
            raise ConfigError(f"unknown noise_pairing {self.noise_pairing!r}")
        if self.tanh_placement not in ("latent", "image"):
            raise ConfigError(f"unknown tanh_placement {self.tanh_placement!r}")


def _params_hash(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.data.tobytes())
    return h.hexdigest()


class TrainState:
    """Everything training mutates: the six networks, both optimizers, the
    iteration counter, the RNG, and the carry-forward metric values."""

    def __init__(self, config: TrainConfig):
        config.validate()
        self.config = config
        shape = (3, config.height, config.width)
        master = np.random.default_rng(config.seed)
        seeds = [int(s) for s in master.integers(0, 2**31 - 1, size=7)]
        self.gen_v = FlowGenerator(shape, blocks=config.blocks, hidden=config.coupling_hidden,
                                   tanh_placement=config.tanh_placement,
                                   seed=seeds[0], modality="visible")
        self.gen_r = FlowGenerator(shape, blocks=config.blocks, hidden=config.coupling_hidden,
                                   tanh_placement=config.tanh_placement,
                                   seed=seeds[1], modality="infrared")
        self.enc_v = Encoder(shape, dim=config.encoder_dim, seed=seeds[2], modality="visible")
        self.enc_r = Encoder(shape, dim=config.encoder_dim, seed=seeds[3], modality="infrared")
        self.disc_v = ModalityDiscriminator(shape, seed=seeds[4], modality="visible")
        self.disc_r = ModalityDiscriminator(shape, seed=seeds[5], modality="infrared")
        self.opt_g = Adam(self.gen_v.params() + self.gen_r.params(), lr=config.lr)
        self.opt_d = Adam(self.enc_v.params() + self.enc_r.params()
                          + self.disc_v.params() + self.disc_r.params(), lr=config.lr)
        self.prior = GaussianPrior(sigma=config.sigma)
        self.rng = np.random.default_rng(seeds[6])
        self.iteration = 0
        self.carry = {k: 0.0 for k in _CARRY_KEYS}

    # naming: parameters under their network prefixes, optimizer slots under
    # adam_g/adam_d, all flat in the checkpoint manifest
    def _named_params(self) -> dict:
        out = {}
        for net, prefix in ((self.gen_v, "gen_v"), (self.gen_r, "gen_r"),
                            (self.enc_v, "enc_v"), (self.enc_r, "enc_r"),
                            (self.disc_v, "disc_v"), (self.disc_r, "disc_r")):
            for name, p in net.named_params(prefix):
                out[name] = p
        return out

    def flow_params(self):
        return self.gen_v.params() + self.gen_r.params()

    def adversary_params(self):
        return (self.enc_v.params() + self.enc_r.params()
                + self.disc_v.params() + self.disc_r.params())

    def arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self._named_params().items()}
        for tag, opt in (("adam_g", self.opt_g), ("adam_d", self.opt_d)):
            st = opt.state()
            for i, (m, v) in enumerate(zip(st["m"], st["v"])):
                out[f"{tag}.m.{i:04d}"] = m
                out[f"{tag}.v.{i:04d}"] = v
        return out

    def meta(self) -> dict:
        return {
            "config": dataclasses.asdict(self.config),
            "iteration": self.iteration,
            "rng": self.rng.bit_generator.state,
            "adam_t": {"g": self.opt_g.state()["t"], "d": self.opt_d.state()["t"]},
            "carry": self.carry,
        }

    def load(self, arrays: dict[str, np.ndarray], meta: dict):
        named = self._named_params()
        for name, p in named.items():
            if name not in arrays:
                raise DataError(f"checkpoint is missing parameter {name!r}")
            if arrays[name].shape != p.data.shape:
                raise DataError(f"checkpoint parameter {name!r} has shape "
                                f"{arrays[name].shape}, expected {p.data.shape}")
            p.data = arrays[name].copy()
        for tag, opt, tkey in (("adam_g", self.opt_g, "g"), ("adam_d", self.opt_d, "d")):
            n = len(opt.params)
            try:
                m = [arrays[f"{tag}.m.{i:04d}"] for i in range(n)]
                v = [arrays[f"{tag}.v.{i:04d}"] for i in range(n)]
            except KeyError as e:
                raise DataError(f"checkpoint is missing optimizer slot {e}")
            opt.load_state({"t": meta["adam_t"][tkey], "m": m, "v": v})
        self.iteration = int(meta["iteration"])
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = meta["rng"]
        self.carry = {k: meta["carry"][k] for k in _CARRY_KEYS}


def save_state(path, state: TrainState):
    save_checkpoint(path, state.arrays(), state.meta())


def load_state(path) -> TrainState:
    arrays, meta = load_checkpoint(path)
    try:
        config = TrainConfig(**meta["config"])
    except (KeyError, TypeError) as e:
        raise DataError(f"checkpoint config snapshot is unusable: {e}")
    state = TrainState(config)
    state.load(arrays, meta)
    return state


# -- batching ------------------------------------------------------------------


def _index_by_identity(samples: list[Sample]) -> dict[int, list[Sample]]:
    out: dict[int, list[Sample]] = {}
    for s in samples:
        out.setdefault(s.identity, []).append(s)
    return out


class _BatchSampler:
    """P identities, K images per identity per modality, every draw from the
    shared state RNG in a fixed order."""

    def __init__(self, dataset: list[Sample], config: TrainConfig):
        by_mod = split_by_modality(dataset)
        self.vis = _index_by_identity(by_mod["visible"])
        self.ir = _index_by_identity(by_mod["infrared"])
        k = config.images_per_id
        self.eligible = sorted(i for i in self.vis
                               if i in self.ir and len(self.vis[i]) >= k and len(self.ir[i]) >= k)
        if len(self.eligible) < config.ids_per_batch:
            raise DataError(
                f"dataset too small for batch composition: need {config.ids_per_batch} "
                f"identities with >= {k} images in both modalities, found {len(self.eligible)}")
        self.k = k
        self.p = config.ids_per_batch

    def draw(self, rng) -> tuple[list[Sample], list[Sample]]:
        chosen = rng.choice(len(self.eligible), size=self.p, replace=False)
        ids = [self.eligible[int(i)] for i in chosen]
        bv, br = [], []
        for ident in ids:
            pool = self.vis[ident]
            take = rng.choice(len(pool), size=self.k, replace=False)
            bv.extend(pool[int(j)] for j in take)
        for ident in ids:
            pool = self.ir[ident]
            take = rng.choice(len(pool), size=self.k, replace=False)
            br.extend(pool[int(j)] for j in take)
        return bv, br


# -- steps ---------------------------------------------------------------------


def _abort_dump(kind: str, iteration: int, parts: dict, err) -> NumericError:
    dump = ", ".join(f"{k}={v!r}" for k, v in parts.items()) or "none computed"
    return NumericError(f"{kind} step aborted at iteration {iteration}: {err} "
                        f"[component losses: {dump}]")


def generator_step(state: TrainState, batch: tuple[list[Sample], list[Sample]]) -> dict:
    cfg = state.config
    for net in (state.gen_v, state.gen_r):
        net.set_trainable(True)
    for net in (state.enc_v, state.enc_r, state.disc_v, state.disc_r):
        net.set_trainable(False)
    frozen = state.adversary_params()
    frozen_hash = _params_hash(frozen)

    noise_rng = state.rng if cfg.dequantize else None
    xv, ids_v = batch_tensor(batch[0], noise_rng)
    xr, ids_r = batch_tensor(batch[1], noise_rng)
    state.gen_v.reset_saturations()
    state.gen_r.reset_saturations()

    parts: dict[str, float] = {}
    try:
        zv, ld_v = state.gen_v.invert(xv)
        zr, ld_r = state.gen_r.invert(xr)
        nv, nr = xv.data.shape[0], xr.data.shape[0]
        l_flow_v = flow_nll_term(zv, ld_v, state.prior) * (1.0 / nv)
        l_flow_r = flow_nll_term(zr, ld_r, state.prior) * (1.0 / nr)
        parts["l_flow_v"] = l_flow_v.item()
        parts["l_flow_r"] = l_flow_r.item()

        z_all = concat([zv.reshape((nv, -1)), zr.reshape((nr, -1))], axis=0)
        ids_all = np.concatenate([ids_v, ids_r])
        mods = ["visible"] * nv + ["infrared"] * nr
        l_noise = noise_loss(z_all, ids_all, modalities=mods, pairing=cfg.noise_pairing)
        parts["l_noise"] = l_noise.item()

        fake_r = state.gen_r.generate(zv)   # visible latents as infrared images
        fake_v = state.gen_v.generate(zr)
        l_id_g = identity_gen_loss(state.enc_v, state.enc_r,
                                   xv, fake_v, ids_v, ids_r,
                                   xr, fake_r, ids_r, ids_v)
        parts["l_id_g"] = l_id_g.item()
        l_mod_g = modality_gen_loss(state.disc_v, fake_v, state.disc_r, fake_r)
        parts["l_mod_g"] = l_mod_g.item()

        total = (l_flow_v + l_flow_r + l_noise * cfg.noise_weight
                 + l_id_g * cfg.identity_weight + l_mod_g * cfg.modality_weight)
        total.backward()
    except NumericError as e:
        raise _abort_dump("generator", state.iteration, parts, e)

    for p in frozen:
        assert p.grad is None, "gradient leaked into a frozen adversary parameter"
    state.opt_g.step()
    if _params_hash(frozen) != frozen_hash:
        raise NumericError("frozen adversary parameters changed during a generator step")
    state.gen_v.check_invertible()
    state.gen_r.check_invertible()

    parts["bpd_v"] = bits_per_dim(zv.data, ld_v.item(), state.prior)
    parts["bpd_r"] = bits_per_dim(zr.data, ld_r.item(), state.prior)
    parts["sat_count"] = state.gen_v.saturations + state.gen_r.saturations
    return parts


def discriminator_step(state: TrainState, batch: tuple[list[Sample], list[Sample]]) -> dict:
    cfg = state.config
    for net in (state.gen_v, state.gen_r):
        net.set_trainable(False)
    for net in (state.enc_v, state.enc_r, state.disc_v, state.disc_r):
        net.set_trainable(True)
    frozen = state.flow_params()
    frozen_hash = _params_hash(frozen)

    noise_rng = state.rng if cfg.dequantize else None
    xv, ids_v = batch_tensor(batch[0], noise_rng)
    xr, ids_r = batch_tensor(batch[1], noise_rng)

    parts: dict[str, float] = {}
    try:
        # flows are frozen and inputs carry no grad, so the fakes come out
        # detached: discriminator losses cannot reach flow parameters
        zv, _ = state.gen_v.invert(xv)
        zr, _ = state.gen_r.invert(xr)
        fake_r = state.gen_r.generate(zv)
        fake_v = state.gen_v.generate(zr)
        assert not fake_v.requires_grad and not fake_r.requires_grad

        l_id_d = identity_disc_loss(state.enc_v, state.enc_r,
                                    xv, fake_v, ids_v, ids_r,
                                    xr, fake_r, ids_r, ids_v)
        parts["l_id_d"] = l_id_d.item()
        l_mod_d = modality_disc_loss(state.disc_v, xv, fake_v,
                                     state.disc_r, xr, fake_r)
        parts["l_mod_d"] = l_mod_d.item()
        total = l_id_d * cfg.identity_weight + l_mod_d * cfg.modality_weight
        total.backward()
    except NumericError as e:
        raise _abort_dump("discriminator", state.iteration, parts, e)

    for p in frozen:
        assert p.grad is None, "gradient leaked into a frozen flow parameter"
    state.opt_d.step()
    if _params_hash(frozen) != frozen_hash:
        raise NumericError("frozen flow parameters changed during a discriminator step")
    return parts


# -- loop ----------------------------------------------------------------------


def _format_row(iteration: int, phase: str, carry: dict) -> str:
    cells = [str(iteration), phase]
    for key in _CARRY_KEYS:
        v = carry[key]
        cells.append(str(int(v)) if key == "sat_count" else repr(float(v)))
    return ",".join(cells)


def _truncate_metrics(path, iteration: int):
    """Drop rows past the checkpoint so a resumed file continues cleanly."""
    if not os.path.isfile(path):
        raise DataError(f"cannot resume: metrics file {path} is missing")
    with open(path, newline="") as f:
        lines = f.read().split("\n")
    if not lines or lines[0] != METRICS_HEADER:
        raise DataError(f"cannot resume: {path} does not start with the metrics header")
    kept = [lines[0]]
    for line in lines[1:]:
        if line and int(line.split(",", 1)[0]) <= iteration:
            kept.append(line)
    with open(path, "w", newline="") as f:
        f.write("\n".join(kept) + "\n")


def iterations_for(config: TrainConfig, dataset_size: int) -> int:
    batch = config.ids_per_batch * config.images_per_id * 2
    return config.epochs * math.ceil(dataset_size / batch)


def train(config: TrainConfig, dataset: list[Sample], out_dir,
          state: TrainState | None = None,
          metrics_name: str = "metrics.csv") -> TrainState:
    """Runs to `epochs`. Pass a loaded state to resume; the metrics file is
    truncated back to the checkpoint iteration and extended in place."""
    config.validate()
    os.makedirs(out_dir, exist_ok=True)
    if state is None:
        state = TrainState(config)
    sampler = _BatchSampler(dataset, config)
    total = iterations_for(config, len(dataset))
    metrics_path = os.path.join(out_dir, metrics_name)
    if state.iteration == 0:
        with open(metrics_path, "w", newline="") as f:
            f.write(METRICS_HEADER + "\n")
    else:
        _truncate_metrics(metrics_path, state.iteration)

    with open(metrics_path, "a", newline="") as f:
        for it in range(state.iteration + 1, total + 1):
            batch = sampler.draw(state.rng)
            for _ in range(2):
                state.carry.update(generator_step(state, batch))
                f.write(_format_row(it, "g", state.carry) + "\n")
                if not config.reuse_batch:
                    batch = sampler.draw(state.rng)
            state.carry.update(discriminator_step(state, batch))
            f.write(_format_row(it, "d", state.carry) + "\n")
            f.flush()
            state.iteration = it
            if config.checkpoint_every and it % config.checkpoint_every == 0 and it < total:
                save_state(os.path.join(out_dir, f"checkpoint_{it:06d}.f2f"), state)
    save_state(os.path.join(out_dir, "final.f2f"), state)
    return state
