"""Acceptance gate: ten behavioral criteria at pinned tolerances.

Each test prints exactly one line `[criterion NN] name: PASS/FAIL (numbers)`,
so `pytest -s tests/test_acceptance.py` doubles as the acceptance report.
The desk-scale fixture trains one pinned configuration on the default
synthetic dataset for 300 iterations and is shared by every criterion that
needs trained weights.
"""

import shutil
import time

import numpy as np
import pytest

from flow2flow.adversarial import (Encoder, ModalityDiscriminator,
                                   identity_disc_loss, identity_gen_loss,
                                   modality_disc_loss, modality_gen_loss)
from flow2flow.autodiff import Tensor, gradient_check
from flow2flow.data import (SynthSpec, render_dataset, split_by_modality,
                            to_normalized)
from flow2flow.evaluate import retrieval_metrics, sweep, sweep_row
from flow2flow.generation import cmg_v2r, translate_normalized
from flow2flow.layers import AffineCoupling, InvConv1x1, TanhActivation
from flow2flow.model import (FlowGenerator, GaussianPrior, flow_nll_term,
                             noise_loss)
from flow2flow.training import METRICS_HEADER, TrainConfig, load_state, train

DESK_ITERATIONS = 300


def _report(num: int, name: str, ok: bool, detail: str):
    print(f"[criterion {num:02d}] {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {num} ({name}): {detail}"


def _metric_rows(path) -> list[dict]:
    lines = open(path).read().splitlines()
    assert lines[0] == METRICS_HEADER
    cols = METRICS_HEADER.split(",")
    return [dict(zip(cols, line.split(","))) for line in lines[1:]]


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk_run")
    dataset = render_dataset(SynthSpec())
    # 4 iterations/epoch at 64 images -> 300 iterations.  The desk run raises
    # the latent-alignment and modality-adversary weights from the full-scale
    # defaults (at 300 iterations the default pull of 0.01 leaves the two
    # modalities in nearly orthogonal latent subspaces), and uses a shallower
    # stack, which tames how hard off-manifold latents can amplify through
    # stacked coupling inverses.  Adversarial training at this scale is
    # chaotic, so the run is pinned - weights, depth, and seed together -
    # and the determinism criterion below is what makes the pin meaningful.
    config = TrainConfig(epochs=75, blocks=6, noise_weight=1.0,
                         modality_weight=4.0, seed=1)
    t0 = time.perf_counter()
    state = train(config, dataset, out)
    seconds = time.perf_counter() - t0
    assert state.iteration == DESK_ITERATIONS
    return {"state": state, "dataset": dataset, "out": out, "seconds": seconds,
            "rows": _metric_rows(out / "metrics.csv")}


def test_criterion_01_invertibility(desk):
    t0 = time.perf_counter()
    by_mod = split_by_modality(desk["dataset"])
    real = np.stack([to_normalized(s.image)
                     for s in by_mod["visible"][:16] + by_mod["infrared"][:16]])
    rand = np.random.default_rng(11).uniform(-0.9, 0.9, size=(32, 3, 24, 12))
    probes = np.concatenate([real, rand])  # 64 probe images
    gens = [FlowGenerator(seed=3), FlowGenerator(seed=4, modality="infrared"),
            desk["state"].gen_v, desk["state"].gen_r]
    worst = 0.0
    for gen in gens:
        z, _ = gen.invert(Tensor(probes))
        y = gen.generate(Tensor(z.data))
        worst = max(worst, float(np.max(np.abs(y.data - probes))))
    dt = time.perf_counter() - t0
    _report(1, "invertibility over 64 probes, fresh and trained",
            worst < 1e-6 and dt < 10.0, f"max_err={worst:.3e} time={dt:.1f}s")


def _fd_logdet(gen: FlowGenerator, x: np.ndarray, eps: float = 1e-5) -> float:
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
    assert sign != 0.0
    return float(logabs)


def test_criterion_02_logdet_matches_fd_jacobian():
    t0 = time.perf_counter()
    worst = 0.0
    for draw in range(10):
        rng = np.random.default_rng(200 + draw)
        gen = FlowGenerator(in_shape=(3, 2, 2), blocks=2, hidden=4, seed=draw)
        for p in gen.params():  # fresh couplings are zero-initialized
            p.data = p.data + rng.normal(0.0, 0.2, size=p.data.shape)
        x = rng.uniform(-0.9, 0.9, size=(3, 2, 2))
        _, logdet = gen.invert(Tensor(x))
        worst = max(worst, abs(logdet.data.item() - _fd_logdet(gen, x)))
    dt = time.perf_counter() - t0
    _report(2, "analytic logdet vs finite-difference Jacobian, 10 draws",
            worst < 1e-3 and dt < 30.0, f"max_dev={worst:.3e} time={dt:.1f}s")


def test_criterion_03_per_layer_logdet_oracles():
    rng = np.random.default_rng(31)

    z = rng.normal(size=(4, 6, 3, 2))
    _, ld = TanhActivation().reverse(Tensor(z))
    dev_tanh = abs(ld.data.item() - np.sum(np.log1p(-np.tanh(z) ** 2)))

    conv = InvConv1x1(6, rng)
    conv.w.data = conv.w.data + rng.normal(0.0, 0.3, size=conv.w.data.shape)
    x = rng.normal(size=(3, 6, 4, 2))
    _, ld = conv.reverse(Tensor(x))
    _, logabs = np.linalg.slogdet(conv.w.data)  # LU-based determinant
    dev_conv = abs(ld.data.item() - 3 * 4 * 2 * logabs)

    coup = AffineCoupling(6, 8, rng)
    for _, p in coup.named_params("c"):
        p.data = p.data + rng.normal(0.0, 0.2, size=p.data.shape)
    x = rng.normal(size=(2, 6, 4, 2))
    _, ld = coup.reverse(Tensor(x))
    # The changed half is affine in its input given the passthrough half, so a
    # central difference recovers the scales exactly, not just approximately.
    xp, xm = x.copy(), x.copy()
    xp[:, 3:] += 1.0
    xm[:, 3:] -= 1.0
    yp, _ = coup.reverse(Tensor(xp))
    ym, _ = coup.reverse(Tensor(xm))
    s = (yp.data[:, 3:] - ym.data[:, 3:]) / 2.0
    dev_coup = abs(ld.data.item() - np.sum(np.log(s)))

    worst = max(dev_tanh, dev_conv, dev_coup)
    _report(3, "per-layer logdet oracles (tanh, 1x1 conv, coupling)",
            worst < 1e-9,
            f"tanh={dev_tanh:.2e} conv={dev_conv:.2e} coupling={dev_coup:.2e}")


def test_criterion_04_loss_gradient_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    checks = []

    gen = FlowGenerator(in_shape=(3, 4, 4), blocks=2, hidden=4, seed=3)
    prior = GaussianPrior()
    x = Tensor(rng.uniform(-0.8, 0.8, size=(2, 3, 4, 4)))

    def nll():
        z, logdet = gen.invert(x)
        return flow_nll_term(z, logdet, prior) * 0.5

    checks.append(("flow", gradient_check(nll, gen.params(), eps=1e-6)))

    z_free = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    ids4 = [0, 0, 1, 1]
    mods4 = ["visible", "infrared", "visible", "infrared"]
    checks.append(("noise", gradient_check(
        lambda: noise_loss(z_free, ids4, mods4), [z_free], eps=1e-6)))

    shape = (3, 8, 8)
    kw = dict(in_shape=shape, widths=(2, 4, 4, 4))
    enc_v = Encoder(dim=4, seed=1, modality="visible", **kw)
    enc_r = Encoder(dim=4, seed=2, modality="infrared", **kw)
    disc_v = ModalityDiscriminator(seed=3, modality="visible", **kw)
    disc_r = ModalityDiscriminator(seed=4, modality="infrared", **kw)
    ids2 = [0, 1]

    def img(grad=False):
        return Tensor(rng.uniform(-0.9, 0.9, size=(2,) + shape), requires_grad=grad)

    real_v, real_r = img(), img()
    fake_v, fake_r = img(grad=True), img(grad=True)
    checks.append(("identity_gen", gradient_check(
        lambda: identity_gen_loss(enc_v, enc_r, real_v, fake_v, ids2, ids2,
                                  real_r, fake_r, ids2, ids2),
        [fake_v, fake_r], eps=1e-6)))
    checks.append(("identity_disc", gradient_check(
        lambda: identity_disc_loss(enc_v, enc_r, real_v, fake_v, ids2, ids2,
                                   real_r, fake_r, ids2, ids2),
        enc_v.params() + enc_r.params(), eps=1e-6)))
    gfake_v, gfake_r = img(grad=True), img(grad=True)
    checks.append(("modality_gen", gradient_check(
        lambda: modality_gen_loss(disc_v, gfake_v, disc_r, gfake_r),
        [gfake_v, gfake_r], eps=1e-6)))
    checks.append(("modality_disc", gradient_check(
        lambda: modality_disc_loss(disc_v, real_v, fake_v, disc_r, real_r, fake_r),
        disc_v.params() + disc_r.params(), eps=1e-6)))

    worst = max(err for _, err in checks)
    dt = time.perf_counter() - t0
    detail = " ".join(f"{name}={err:.1e}" for name, err in checks)
    _report(4, "central-difference gradient checks for every loss",
            worst < 1e-3 and dt < 120.0, f"{detail} time={dt:.0f}s")


_G_COLS = ("l_flow_v", "l_flow_r", "l_noise", "l_id_g", "l_mod_g",
           "bpd_v", "bpd_r", "sat_count")
_D_COLS = ("l_id_d", "l_mod_d")


def test_criterion_05_training_descent(desk):
    rows = desk["rows"]
    assert len(rows) == 3 * DESK_ITERATIONS

    def bpd_at(it, col):
        vals = [float(r[col]) for r in rows if r["iter"] == str(it) and r["phase"] == "g"]
        return vals[-1]

    drops = {}
    for col in ("bpd_v", "bpd_r"):
        early, late = bpd_at(10, col), bpd_at(DESK_ITERATIONS, col)
        drops[col] = (early - late) / abs(early)

    in_bounds = True
    for r in rows:
        cells = [float(r[c]) for c in METRICS_HEADER.split(",")[2:]]
        if not all(np.isfinite(cells)):
            in_bounds = False
        # bound checks apply to the columns the row's phase computed; the
        # others are carried values already checked on their own row
        cols = _G_COLS if r["phase"] == "g" else _D_COLS
        for c in cols:
            v = float(r[c])
            if c in ("l_id_g",) and not 0.0 <= v <= 4.0:
                in_bounds = False
            if c in ("l_mod_g",) and not 0.0 <= v <= 2.0:
                in_bounds = False
            if c in _D_COLS and not 0.0 < v < 4.0:
                in_bounds = False
            if c == "sat_count" and (v < 0 or v != int(v)):
                in_bounds = False

    ok = all(d >= 0.15 for d in drops.values()) and in_bounds \
        and desk["seconds"] < 600.0
    _report(5, "300-iteration descent, bounded losses",
            ok, f"bpd_v_drop={drops['bpd_v']:.1%} bpd_r_drop={drops['bpd_r']:.1%} "
                f"bounds_ok={in_bounds} time={desk['seconds']:.0f}s")


def test_criterion_06_adversarial_equilibrium(desk):
    state = desk["state"]
    rows = [r for r in desk["rows"] if r["phase"] == "d"
            and int(r["iter"]) > DESK_ITERATIONS - 50]
    assert len(rows) == 50
    d_vals = [float(r["l_mod_d"]) for r in rows]
    interior = all(0.0 < v < 4.0 for v in d_vals)

    by_mod = split_by_modality(desk["dataset"])
    vis = np.stack([to_normalized(s.image) for s in by_mod["visible"]])
    ir = np.stack([to_normalized(s.image) for s in by_mod["infrared"]])
    fake_ir = translate_normalized(state.gen_v, state.gen_r, vis)
    fake_vis = translate_normalized(state.gen_r, state.gen_v, ir)
    real_score = (state.disc_v(Tensor(vis)).data.mean()
                  + state.disc_r(Tensor(ir)).data.mean()) / 2.0
    fake_score = (state.disc_v(Tensor(fake_vis)).data.mean()
                  + state.disc_r(Tensor(fake_ir)).data.mean()) / 2.0

    ok = interior and real_score > fake_score
    _report(6, "discriminators prefer reals, loss off its bounds",
            ok, f"real={real_score:.3f} fake={fake_score:.3f} "
                f"disc_loss=[{min(d_vals):.3f},{max(d_vals):.3f}]")


def test_criterion_07_cmg_modality_and_cycle(desk):
    state = desk["state"]
    vis = split_by_modality(desk["dataset"])["visible"]

    def chan_std(img):  # spread across channels, averaged over pixels
        return float(np.std(img, axis=0).mean())

    src_std = np.mean([chan_std(s.image) for s in vis])
    fake_std = np.mean([chan_std(cmg_v2r(state.gen_v, state.gen_r, s).image)
                        for s in vis])

    x = np.stack([to_normalized(s.image) for s in vis])
    mid = translate_normalized(state.gen_v, state.gen_r, x)
    back = translate_normalized(state.gen_r, state.gen_v, mid)
    cycle_trained = float(np.max(np.abs(back - x)))

    fresh_v = FlowGenerator(seed=91)
    fresh_r = FlowGenerator(seed=92, modality="infrared")
    mid = translate_normalized(fresh_v, fresh_r, x[:8])
    back = translate_normalized(fresh_r, fresh_v, mid)
    cycle_fresh = float(np.max(np.abs(back - x[:8])))

    ok = fake_std < 0.25 * src_std and max(cycle_trained, cycle_fresh) < 1e-6
    _report(7, "translations look infrared, cycle is exact",
            ok, f"fake_std={fake_std:.2f} src_std={src_std:.2f} "
                f"cycle_trained={cycle_trained:.1e} cycle_fresh={cycle_fresh:.1e}")


def test_criterion_08_expansion_sweep(desk):
    state = desk["state"]
    t0 = time.perf_counter()
    rows = sweep(state.gen_v, state.gen_r, desk["dataset"], seed=0)
    dt = time.perf_counter() - t0
    grid_ok = len(rows) == 24

    base, expanded = [], []
    for seed in (0, 1, 2):
        base.append(sweep_row(state.gen_v, state.gen_r, desk["dataset"],
                              "both", 0.0, seed)[0])
        expanded.append(sweep_row(state.gen_v, state.gen_r, desk["dataset"],
                                  "both", 1.0, seed)[0])
    gain_ok = np.mean(expanded) >= np.mean(base)

    ok = grid_ok and gain_ok and dt < 1800.0
    _report(8, "24-row sweep, expansion does not hurt Rank-1",
            ok, f"rows={len(rows)} rank1_base={np.mean(base):.3f} "
                f"rank1_expanded={np.mean(expanded):.3f} sweep_time={dt:.0f}s")


def test_criterion_09_determinism_and_resume(tmp_path):
    dataset = render_dataset(SynthSpec(identities=4, images_per_id=3,
                                       height=8, width=8, seed=2))
    config = TrainConfig(epochs=2, blocks=3, coupling_hidden=8, encoder_dim=8,
                         height=8, width=8, checkpoint_every=2, seed=9)

    products = {}
    for run in ("a", "b"):
        out = tmp_path / run
        train(TrainConfig(**vars(config).copy()), dataset, out)
        products[run] = {name: (out / name).read_bytes()
                         for name in ("metrics.csv", "final.f2f")}
    identical = products["a"] == products["b"]

    resumed = tmp_path / "resumed"
    shutil.copytree(tmp_path / "a", resumed)
    state = load_state(resumed / "checkpoint_000002.f2f")
    train(state.config, dataset, resumed, state=state)
    resume_ok = all((resumed / name).read_bytes() == products["a"][name]
                    for name in ("metrics.csv", "final.f2f"))

    _report(9, "same-seed runs and resumed runs are byte-identical",
            identical and resume_ok,
            f"reruns_identical={identical} resume_identical={resume_ok}")


def test_criterion_10_retrieval_fixture():
    # two queries; the correct identity sits at rank 1 and rank 2
    g_feats = np.array([[1.0, 0.0], [0.0, 1.0]])
    g_ids = [0, 1]
    q_feats = np.array([[1.0, 0.0], [0.9, 0.5]])
    q_ids = [0, 1]
    rank1, mean_ap, skipped = retrieval_metrics(q_feats, q_ids, g_feats, g_ids)
    ok = rank1 == 0.5 and mean_ap == 0.75 and skipped == 0
    _report(10, "retrieval oracle Rank1=0.5 mAP=0.75 exactly",
            ok, f"rank1={rank1!r} map={mean_ap!r}")
