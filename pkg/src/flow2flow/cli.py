"""Command-line surface.

One executable, subcommands for every stage: synthesize a dataset, train,
expand it (tse), translate across modalities (cmg), run the expansion sweep,
evaluate retrieval, verify numerics, and render report figures.

Configuration comes from an optional JSON file with sections "train",
"synth", "interpolation" and "paths" (each mirroring the corresponding
dataclass; unknown keys are rejected), overridden by repeatable
`--set section.key=value` flags and then by the named convenience flags.
Everything is validated before any side effect.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric failure.
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .adversarial import (Encoder, ModalityDiscriminator, identity_disc_loss,
                          identity_gen_loss, modality_disc_loss)
from .autodiff import Tensor, gradient_check
from .data import (MODALITIES, Sample, SynthSpec, from_normalized,
                   load_dataset, render_dataset, split_by_modality,
                   to_normalized, write_dataset)
from .errors import ConfigError, DataError, NumericError
from .evaluate import (SWEEP_MODES, SWEEP_MULTIPLES, evaluate_encoders, sweep,
                       write_sweep_csv)
from .generation import InterpolationSpec, expand_dataset, translate_normalized
from .model import FlowGenerator, GaussianPrior, flow_nll_term, noise_loss
from .report import render_metrics_figures, render_sweep_figures
from .training import TrainConfig, TrainState, load_state, train

__all__ = ["main"]

_SECTIONS = {"train": TrainConfig, "synth": SynthSpec,
             "interpolation": InterpolationSpec}
_PATH_KEYS = ("data", "out", "checkpoint")


# -- configuration ---------------------------------------------------------


def _thread_cap() -> int | None:
    """F2F_THREADS caps internal parallelism. Processing is sequential, which
    satisfies any cap, but a malformed value is still a configuration error."""
    raw = os.environ.get("F2F_THREADS")
    if raw is None:
        return None
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"F2F_THREADS must be an integer >= 1, got {raw!r}")
    if cap < 1:
        raise ConfigError(f"F2F_THREADS must be >= 1, got {cap}")
    return cap


def _load_config_doc(path) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise DataError(f"config file {path} does not exist")
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return doc


def _apply_sets(doc: dict, items) -> dict:
    for item in items or []:
        key, eq, raw = item.partition("=")
        section, dot, field = key.partition(".")
        if not eq or not dot or not section or not field:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw  # bare strings stay strings
        doc.setdefault(section, {})[field] = value
    return doc


def _check_doc(doc: dict):
    for section, body in doc.items():
        if section == "paths":
            if not isinstance(body, dict):
                raise ConfigError("config section 'paths' must be an object")
            unknown = set(body) - set(_PATH_KEYS)
            if unknown:
                raise ConfigError(f"unknown config keys in 'paths': {sorted(unknown)}")
            continue
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        known = {f.name for f in dataclasses.fields(_SECTIONS[section])}
        unknown = set(body) - known
        if unknown:
            raise ConfigError(f"unknown config keys in {section!r}: {sorted(unknown)}")


def _doc_for(args) -> dict:
    doc = _load_config_doc(getattr(args, "config", None))
    doc = _apply_sets(doc, getattr(args, "set", None))
    _check_doc(doc)
    return doc


def _build(cls, doc: dict, section: str, overrides: dict):
    body = dict(doc.get(section, {}))
    body.update({k: v for k, v in overrides.items() if v is not None})
    try:
        built = cls(**body)
    except TypeError as e:
        raise ConfigError(f"bad {section} configuration: {e}")
    if hasattr(built, "validate"):
        built.validate()
    return built


def _resolve_path(flag_value, doc: dict, key: str, what: str):
    value = flag_value or doc.get("paths", {}).get(key)
    if value is None:
        raise ConfigError(f"no {what} given: pass --{key} or set paths.{key}")
    return value


def _require_file(path, what: str):
    if not os.path.isfile(path):
        raise DataError(f"{what} {path} does not exist")
    return path


def _refuse_existing(path, overwrite: bool):
    if os.path.exists(path) and not overwrite:
        raise ConfigError(f"{path} exists; pass --overwrite to replace it")


def _load_ckpt(args) -> TrainState:
    path = _resolve_path(args.ckpt, _doc_for(args), "checkpoint", "checkpoint")
    _require_file(path, "checkpoint")
    return load_state(path)


def _dataset_for(args, config: TrainConfig):
    data_dir = _resolve_path(args.data, _doc_for(args), "data", "dataset")
    return load_dataset(data_dir, extent=(config.height, config.width))


# -- commands ---------------------------------------------------------------


def cmd_synth(args) -> int:
    doc = _doc_for(args)
    spec = _build(SynthSpec, doc, "synth",
                  {"identities": args.ids, "images_per_id": args.per,
                   "height": args.height, "width": args.width,
                   "seed": args.seed})
    out = _resolve_path(args.out, doc, "out", "output directory")
    samples = render_dataset(spec)
    manifest = write_dataset(samples, out, fmt=args.format,
                             overwrite=args.overwrite)
    print(f"wrote {len(samples)} images under {out} ({manifest})")
    return 0


def cmd_train(args) -> int:
    doc = _doc_for(args)
    overrides = {"epochs": args.epochs, "lr": args.lr, "seed": args.seed}
    out = _resolve_path(args.out, doc, "out", "output directory")
    if args.resume:
        if doc.get("train") or any(v is not None for v in overrides.values()):
            raise ConfigError("--resume uses the checkpoint's configuration; "
                              "drop the train overrides")
        _require_file(args.resume, "checkpoint")
        state = load_state(args.resume)
        config = state.config
    else:
        state = None
        config = _build(TrainConfig, doc, "train", overrides)
        _refuse_existing(os.path.join(out, "metrics.csv"), args.overwrite)
    dataset = _dataset_for(args, config)
    state = train(config, dataset, out, state=state)
    print(f"trained to iteration {state.iteration}; "
          f"final checkpoint {os.path.join(out, 'final.f2f')}")
    return 0


def cmd_tse(args) -> int:
    doc = _doc_for(args)
    spec = _build(InterpolationSpec, doc, "interpolation",
                  {"p": args.p, "q": args.q})
    state = _load_ckpt(args)
    out = _resolve_path(args.out, doc, "out", "output directory")
    dataset = _dataset_for(args, state.config)
    targets = MODALITIES if args.modality == "both" else (args.modality,)
    generated, skipped = expand_dataset(state.gen_v, state.gen_r, dataset,
                                        args.multiple, modalities=targets,
                                        spec=spec, seed=args.seed)
    if skipped:
        print(f"warning: {skipped} identities had no same-modality pair "
              "and were skipped", file=sys.stderr)
    write_dataset(dataset + generated, out, overwrite=args.overwrite)
    print(f"wrote {len(dataset)} originals + {len(generated)} "
          f"interpolated images under {out}")
    return 0


def cmd_cmg(args) -> int:
    doc = _doc_for(args)
    state = _load_ckpt(args)
    out = _resolve_path(args.out, doc, "out", "output directory")
    data_dir = _resolve_path(args.data, doc, "data", "dataset")
    dataset = load_dataset(data_dir,
                           extent=(state.config.height, state.config.width))
    src, dst = ("visible", "infrared") if args.direction == "v2r" \
        else ("infrared", "visible")
    gen_src = state.gen_v if src == "visible" else state.gen_r
    gen_dst = state.gen_r if src == "visible" else state.gen_v
    inputs = split_by_modality(dataset)[src]
    if not inputs:
        raise DataError(f"no {src} images under {data_dir}")
    outputs: list[tuple[Sample, np.ndarray]] = []
    for i, s in enumerate(inputs):
        # Sidecar floats, when present, carry the exact pre-quantization
        # pixels of an earlier translation; preferring them keeps chained
        # v2r -> r2v runs bijective instead of losing the rounding step.
        x = None
        if s.path:
            sidecar = os.path.join(data_dir, s.path + ".npy")
            if os.path.isfile(sidecar):
                x = np.load(sidecar)
                if x.shape != s.image.shape:
                    raise DataError(f"sidecar {sidecar} shape {x.shape} does "
                                    f"not match image {s.image.shape}")
        if x is None:
            x = to_normalized(s.image)
        y = translate_normalized(gen_src, gen_dst, x)
        stem = os.path.splitext(os.path.basename(s.path))[0] if s.path \
            else f"i{i:03d}"
        trans = Sample(image=from_normalized(y), identity=s.identity,
                       modality=dst, generated=True,
                       path=f"{dst}/{s.identity}/{stem}_{args.direction}.png")
        outputs.append((trans, y))
    write_dataset([t for t, _ in outputs], out, overwrite=args.overwrite)
    for trans, y in outputs:
        np.save(os.path.join(out, trans.path + ".npy"), y)
    print(f"translated {len(outputs)} {src} images to {dst} under {out}")
    return 0


def cmd_sweep(args) -> int:
    doc = _doc_for(args)
    spec = _build(InterpolationSpec, doc, "interpolation", {})
    state = _load_ckpt(args)
    out = _resolve_path(args.out, doc, "out", "output CSV path")
    _refuse_existing(out, args.overwrite)
    dataset = _dataset_for(args, state.config)
    multiples = tuple(float(m) for m in args.multiples.split(","))
    modes = tuple(args.modes.split(","))
    rows = sweep(state.gen_v, state.gen_r, dataset, multiples=multiples,
                 modes=modes, seed=args.seed, spec=spec,
                 proxy_steps=args.proxy_steps)
    parent = os.path.dirname(os.path.abspath(out))
    os.makedirs(parent, exist_ok=True)
    write_sweep_csv(rows, out)
    print(f"wrote {len(rows)} sweep rows to {out}")
    return 0


def cmd_eval(args) -> int:
    state = _load_ckpt(args)
    dataset = _dataset_for(args, state.config)
    seed = state.config.seed if args.seed is None else args.seed
    rank1, mean_ap, skipped = evaluate_encoders(state.enc_v, state.enc_r,
                                                dataset, seed)
    if skipped:
        print(f"warning: {skipped} queries had no gallery identity "
              "and were skipped", file=sys.stderr)
    print(f"rank1={rank1!r} map={mean_ap!r} skipped={skipped}")
    return 0


def cmd_report(args) -> int:
    if not args.metrics and not args.sweep:
        raise ConfigError("report needs --metrics and/or --sweep")
    written = []
    if args.metrics:
        _require_file(args.metrics, "metrics CSV")
        written += render_metrics_figures(args.metrics, out_dir=args.out,
                                          overwrite=args.overwrite)
    if args.sweep:
        _require_file(args.sweep, "sweep CSV")
        written += render_sweep_figures(args.sweep, out_dir=args.out,
                                        overwrite=args.overwrite)
    for p in written:
        print(f"wrote {p}")
    return 0


# -- verification -------------------------------------------------------------


def _fd_logdet(gen: FlowGenerator, x: np.ndarray, eps: float = 1e-5) -> float:
    """log|det J| of invert() at x by central differences, one input at a time."""
    n = x.size
    jac = np.zeros((n, n))
    flat = x.reshape(-1)
    for j in range(n):
        hi, lo = flat.copy(), flat.copy()
        hi[j] += eps
        lo[j] -= eps
        z_hi, _ = gen.invert(Tensor(hi.reshape(x.shape)))
        z_lo, _ = gen.invert(Tensor(lo.reshape(x.shape)))
        jac[:, j] = (z_hi.data.reshape(-1) - z_lo.data.reshape(-1)) / (2 * eps)
    sign, logabs = np.linalg.slogdet(jac)
    if sign == 0:
        raise NumericError("finite-difference Jacobian is singular")
    return float(logabs)


def _roundtrip_error(gens, probes: int, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for gen in gens:
        x = rng.uniform(-0.9, 0.9, size=(probes,) + gen.in_shape)
        z, _ = gen.invert(Tensor(x))
        y = gen.generate(Tensor(z.data))
        worst = max(worst, float(np.max(np.abs(y.data - x))))
    return worst


def _logdet_deviation(draws: int = 3) -> float:
    worst = 0.0
    for draw in range(draws):
        gen = FlowGenerator(in_shape=(3, 2, 2), blocks=2, hidden=4, seed=draw)
        x = np.random.default_rng(100 + draw).uniform(-0.9, 0.9, size=(3, 2, 2))
        _, logdet = gen.invert(Tensor(x))
        worst = max(worst, abs(logdet.data.item() - _fd_logdet(gen, x)))
    return worst


def _gradcheck_error() -> float:
    rng = np.random.default_rng(7)
    worst = 0.0

    gen = FlowGenerator(in_shape=(3, 4, 4), blocks=2, hidden=4, seed=3)
    prior = GaussianPrior(sigma=1.0)
    x = Tensor(rng.uniform(-0.8, 0.8, size=(2, 3, 4, 4)))

    def nll():
        z, logdet = gen.invert(x)
        return flow_nll_term(z, logdet, prior) * (1.0 / 2.0)

    worst = max(worst, gradient_check(nll, gen.params(), eps=1e-6))

    z_free = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    ids = [0, 0, 1, 1]
    mods = ["visible", "infrared", "visible", "infrared"]

    def cluster():
        return noise_loss(z_free, ids, mods, pairing="cross")

    worst = max(worst, gradient_check(cluster, [z_free], eps=1e-6))

    shape = (3, 8, 8)
    enc_v = Encoder(in_shape=shape, widths=(2, 4, 4, 4), dim=4, seed=1,
                    modality="visible")
    enc_r = Encoder(in_shape=shape, widths=(2, 4, 4, 4), dim=4, seed=2,
                    modality="infrared")
    disc_v = ModalityDiscriminator(in_shape=shape, widths=(2, 4, 4, 4), seed=3,
                                   modality="visible")
    disc_r = ModalityDiscriminator(in_shape=shape, widths=(2, 4, 4, 4), seed=4,
                                   modality="infrared")
    imgs = [Tensor(rng.uniform(-0.9, 0.9, size=(2,) + shape)) for _ in range(4)]
    real_v, fake_v, real_r, fake_r = imgs
    ids2 = [0, 1]

    def id_d():
        return identity_disc_loss(enc_v, enc_r, real_v, fake_v, ids2, ids2,
                                  real_r, fake_r, ids2, ids2)

    worst = max(worst, gradient_check(
        id_d, enc_v.params() + enc_r.params(), eps=1e-6))

    def mod_d():
        return modality_disc_loss(disc_v, real_v, fake_v, disc_r, real_r, fake_r)

    worst = max(worst, gradient_check(
        mod_d, disc_v.params() + disc_r.params(), eps=1e-6))
    return worst


def cmd_verify(args) -> int:
    if args.ckpt:
        _require_file(args.ckpt, "checkpoint")
        state = load_state(args.ckpt)
        gens = [state.gen_v, state.gen_r]
        label = f"checkpoint {args.ckpt}"
    else:
        doc = _doc_for(args)
        config = _build(TrainConfig, doc, "train", {"seed": args.seed})
        state = TrainState(config)
        gens = [state.gen_v, state.gen_r]
        label = "fresh model"
    checks = [
        ("round-trip max error", _roundtrip_error(gens, args.probes), 1e-6),
        ("logdet max deviation", _logdet_deviation(), 1e-3),
        ("gradient check max relative error", _gradcheck_error(), 1e-3),
    ]
    print(f"verifying {label}")
    failed = []
    for name, value, tol in checks:
        ok = value < tol
        print(f"{name}: {value:.3e} (tolerance {tol:.0e}) "
              f"{'PASS' if ok else 'FAIL'}")
        if not ok:
            failed.append(name)
    if failed:
        raise NumericError(f"verification failed: {', '.join(failed)}")
    print("verify: PASS")
    return 0


# -- parser -------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flow2flow",
        description="Dual invertible generators over a shared latent: "
                    "train, expand, translate, evaluate.")
    sub = parser.add_subparsers(dest="command", required=True)

    conf = argparse.ArgumentParser(add_help=False)
    conf.add_argument("--config", help="JSON config file")
    conf.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                      help="override one config value (repeatable)")

    p = sub.add_parser("synth", parents=[conf],
                       help="render the synthetic two-modality dataset")
    p.add_argument("--out")
    p.add_argument("--ids", type=int, help="number of identities")
    p.add_argument("--per", type=int, help="images per identity per modality")
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--format", choices=("png", "ppm"), default="png")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[conf],
                       help="train the generator pair against the adversaries")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", metavar="CKPT",
                   help="continue from a checkpoint; truncates the metrics "
                        "CSV back to it first")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("tse", parents=[conf],
                       help="expand a dataset with latent interpolations")
    p.add_argument("--data")
    p.add_argument("--ckpt")
    p.add_argument("--out")
    p.add_argument("--multiple", type=float, default=1.0,
                   help="generated count as a fraction of the originals")
    p.add_argument("--modality", choices=("visible", "infrared", "both"),
                   default="both")
    p.add_argument("--p", type=int, default=None)
    p.add_argument("--q", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_tse)

    p = sub.add_parser("cmg", parents=[conf],
                       help="translate every image of one modality into the other")
    p.add_argument("--data")
    p.add_argument("--ckpt")
    p.add_argument("--out")
    p.add_argument("--direction", choices=("v2r", "r2v"), required=True)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_cmg)

    p = sub.add_parser("sweep", parents=[conf],
                       help="retrieval quality across expansion multiples and modes")
    p.add_argument("--data")
    p.add_argument("--ckpt")
    p.add_argument("--out", help="output CSV path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--multiples",
                   default=",".join(repr(m) for m in SWEEP_MULTIPLES))
    p.add_argument("--modes", default=",".join(SWEEP_MODES))
    p.add_argument("--proxy-steps", type=int, default=60)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", parents=[conf],
                       help="retrieval metrics: infrared queries, visible gallery")
    p.add_argument("--data")
    p.add_argument("--ckpt")
    p.add_argument("--seed", type=int, default=None,
                   help="query/gallery split seed (default: training seed)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", parents=[conf],
                       help="invertibility, Jacobian-determinant and gradient checks")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--ckpt")
    group.add_argument("--fresh", action="store_true")
    p.add_argument("--probes", type=int, default=16)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", help="render figures from the CSV outputs")
    p.add_argument("--metrics", help="training metrics CSV")
    p.add_argument("--sweep", help="sweep CSV")
    p.add_argument("--out", help="figure directory (default: beside the CSV)")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        _thread_cap()
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DataError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
