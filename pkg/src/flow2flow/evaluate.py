"""Retrieval evaluation (infrared queries against a visible gallery) and the
expansion-multiple sweep.

Rank-1 is the fraction of queries whose nearest gallery feature shares the
identity. mAP averages, over queries, the average of precision-at-k taken at
each relevant gallery position. Queries whose identity never appears in the
gallery are skipped and counted.

The sweep measures whether interpolation-generated pseudo-samples help
retrieval. The trained flows only produce data here; judging them with the
checkpoint's adversarial encoders would hold the evaluator fixed and erase
the effect being measured. So each row trains a fresh pair of small proxy
encoders (pull same identity / push different identities across modalities)
on the expanded training half and scores the held-out half. Row seeds are
derived from (seed, mode, multiple), so rows are independent of run order
and a multiple of 0 reproduces the unexpanded baseline exactly.
"""

import os

import numpy as np

from .adversarial import Encoder
from .autodiff import concat
from .data import Sample, batch_tensor, split_by_modality
from .errors import ConfigError, DataError
from .generation import InterpolationSpec, expand_dataset
from .model import FlowGenerator, noise_loss
from .optim import Adam

__all__ = ["retrieval_metrics", "split_query_gallery", "encode_samples",
           "evaluate_encoders", "sweep", "write_sweep_csv", "read_sweep_csv",
           "SWEEP_MULTIPLES", "SWEEP_MODES", "SWEEP_HEADER"]

SWEEP_MULTIPLES = (0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0)
SWEEP_MODES = ("visible", "infrared", "both")
SWEEP_HEADER = "mode,multiple,rank1,map"


def retrieval_metrics(q_feats: np.ndarray, q_ids, g_feats: np.ndarray,
                      g_ids) -> tuple[float, float, int]:
    """(rank1, mAP, skipped). Euclidean distances, stable rank ties."""
    q_feats = np.asarray(q_feats, dtype=np.float64)
    g_feats = np.asarray(g_feats, dtype=np.float64)
    q_ids = np.asarray(q_ids)
    g_ids = np.asarray(g_ids)
    if q_feats.ndim != 2 or g_feats.ndim != 2 or q_feats.shape[1] != g_feats.shape[1]:
        raise DataError(f"feature shapes do not align: {q_feats.shape} vs {g_feats.shape}")
    gallery_ids = set(g_ids.tolist())
    rank1_hits = 0
    ap_sum = 0.0
    used = 0
    skipped = 0
    for qf, qid in zip(q_feats, q_ids):
        if qid not in gallery_ids:
            skipped += 1
            continue
        d = np.sqrt(np.sum((g_feats - qf) ** 2, axis=1))
        order = np.argsort(d, kind="stable")
        rel = (g_ids[order] == qid)
        rank1_hits += bool(rel[0])
        precision_at = np.cumsum(rel) / np.arange(1, len(rel) + 1)
        ap_sum += precision_at[rel].mean()
        used += 1
    if used == 0:
        raise DataError("every query identity is absent from the gallery")
    return float(rank1_hits / used), float(ap_sum / used), skipped


def split_query_gallery(dataset: list[Sample], seed: int,
                        fraction: float = 0.5) -> tuple[list[Sample], list[Sample]]:
    """Per-identity random split: (infrared queries, visible gallery), both
    from the held-out side so no image scores itself."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"split fraction must be in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    by_mod = split_by_modality(dataset)
    queries, gallery = [], []
    for modality, sink in (("infrared", queries), ("visible", gallery)):
        by_id: dict[int, list[Sample]] = {}
        for s in by_mod[modality]:
            by_id.setdefault(s.identity, []).append(s)
        for ident in sorted(by_id):
            group = by_id[ident]
            take = max(1, int(round(fraction * len(group))))
            idx = rng.permutation(len(group))[:take]
            sink.extend(group[int(i)] for i in idx)
    if not queries or not gallery:
        raise DataError("query/gallery split came out empty")
    return queries, gallery


def encode_samples(encoder: Encoder, samples: list[Sample],
                   batch: int = 64) -> np.ndarray:
    feats = []
    for i in range(0, len(samples), batch):
        x, _ = batch_tensor(samples[i:i + batch])
        feats.append(encoder(x).data)
    return np.concatenate(feats, axis=0)


def evaluate_encoders(enc_v: Encoder, enc_r: Encoder, dataset: list[Sample],
                      seed: int) -> tuple[float, float, int]:
    queries, gallery = split_query_gallery(dataset, seed)
    qf = encode_samples(enc_r, queries)
    gf = encode_samples(enc_v, gallery)
    return retrieval_metrics(qf, [s.identity for s in queries],
                             gf, [s.identity for s in gallery])


# -- sweep ----------------------------------------------------------------------


def _train_split(dataset: list[Sample], seed: int,
                 fraction: float = 0.5) -> tuple[list[Sample], list[Sample]]:
    """Per-identity, per-modality image-level split into (train, held-out)."""
    rng = np.random.default_rng(seed)
    train, held = [], []
    by_mod = split_by_modality(dataset)
    for modality in ("visible", "infrared"):
        by_id: dict[int, list[Sample]] = {}
        for s in by_mod[modality]:
            by_id.setdefault(s.identity, []).append(s)
        for ident in sorted(by_id):
            group = by_id[ident]
            idx = rng.permutation(len(group))
            cut = max(2, int(round(fraction * len(group))))  # TSE needs pairs
            for pos, i in enumerate(idx):
                (train if pos < cut else held).append(group[int(i)])
    return train, held


def _proxy_batch(rng, vis_by_id, ir_by_id, ids, p, k):
    chosen = rng.choice(len(ids), size=p, replace=False)
    bv, br = [], []
    for c in chosen:
        ident = ids[int(c)]
        for pool, sink in ((vis_by_id[ident], bv), (ir_by_id[ident], br)):
            take = rng.choice(len(pool), size=k, replace=len(pool) < k)
            sink.extend(pool[int(j)] for j in take)
    return bv, br


def _train_proxy(train: list[Sample], seed: int, dim: int, steps: int,
                 lr: float) -> tuple[Encoder, Encoder]:
    shape = train[0].image.shape
    rng = np.random.default_rng(seed)
    enc_v = Encoder(shape, widths=(8, 16, 32, 32), dim=dim,
                    seed=int(rng.integers(2**31)), modality="visible")
    enc_r = Encoder(shape, widths=(8, 16, 32, 32), dim=dim,
                    seed=int(rng.integers(2**31)), modality="infrared")
    opt = Adam(enc_v.params() + enc_r.params(), lr=lr)
    by_mod = split_by_modality(train)
    vis_by_id: dict[int, list[Sample]] = {}
    ir_by_id: dict[int, list[Sample]] = {}
    for s in by_mod["visible"]:
        vis_by_id.setdefault(s.identity, []).append(s)
    for s in by_mod["infrared"]:
        ir_by_id.setdefault(s.identity, []).append(s)
    ids = sorted(set(vis_by_id) & set(ir_by_id))
    if len(ids) < 2:
        raise DataError("proxy training needs at least 2 identities in both modalities")
    p = min(4, len(ids))
    for _ in range(steps):
        bv, br = _proxy_batch(rng, vis_by_id, ir_by_id, ids, p, k=2)
        xv, ids_v = batch_tensor(bv)
        xr, ids_r = batch_tensor(br)
        fv = enc_v(xv)
        fr = enc_r(xr)
        feats = concat([fv, fr], axis=0)
        all_ids = np.concatenate([ids_v, ids_r])
        mods = ["visible"] * len(ids_v) + ["infrared"] * len(ids_r)
        loss = noise_loss(feats, all_ids, modalities=mods, pairing="cross")
        loss.backward()
        opt.step()
    return enc_v, enc_r


def sweep_row(gen_v: FlowGenerator, gen_r: FlowGenerator, dataset: list[Sample],
              mode: str, multiple: float, seed: int,
              spec: InterpolationSpec = InterpolationSpec(),
              proxy_dim: int = 32, proxy_steps: int = 60,
              proxy_lr: float = 2e-3) -> tuple[float, float]:
    """One (mode, multiple) cell: expand, train the proxy, score held-out."""
    if mode not in SWEEP_MODES:
        raise ConfigError(f"unknown sweep mode {mode!r}")
    targets = ("visible", "infrared") if mode == "both" else (mode,)
    # a multiple of 0 is the same experiment whatever the mode says, so the
    # row seed ignores the mode there and all three baselines coincide
    mode_part = SWEEP_MODES.index(mode) if multiple > 0 else 0
    row_seed = np.random.SeedSequence([seed, mode_part, int(round(multiple * 100))])
    row_rng = np.random.default_rng(row_seed)
    train, held = _train_split(dataset, seed)  # split shared by every row
    if multiple > 0:
        generated, _ = expand_dataset(gen_v, gen_r, train, multiple,
                                      modalities=targets, spec=spec,
                                      seed=int(row_rng.integers(2**31)))
        train = train + generated
    enc_v, enc_r = _train_proxy(train, int(row_rng.integers(2**31)),
                                proxy_dim, proxy_steps, proxy_lr)
    queries, gallery = split_query_gallery(held, seed)
    qf = encode_samples(enc_r, queries)
    gf = encode_samples(enc_v, gallery)
    rank1, mean_ap, _ = retrieval_metrics(qf, [s.identity for s in queries],
                                          gf, [s.identity for s in gallery])
    return rank1, mean_ap


def sweep(gen_v: FlowGenerator, gen_r: FlowGenerator, dataset: list[Sample],
          multiples=SWEEP_MULTIPLES, modes=SWEEP_MODES, seed: int = 0,
          spec: InterpolationSpec = InterpolationSpec(),
          **proxy_kw) -> list[tuple[str, float, float, float]]:
    rows = []
    for mode in modes:
        for multiple in multiples:
            rank1, mean_ap = sweep_row(gen_v, gen_r, dataset, mode,
                                       float(multiple), seed, spec, **proxy_kw)
            rows.append((mode, float(multiple), rank1, mean_ap))
    return rows


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as f:
        f.write(SWEEP_HEADER + "\n")
        for mode, multiple, rank1, mean_ap in rows:
            f.write(f"{mode},{float(multiple)!r},{float(rank1)!r},{float(mean_ap)!r}\n")


def read_sweep_csv(path) -> list[tuple[str, float, float, float]]:
    with open(path, newline="") as f:
        lines = f.read().strip().split("\n")
    if not lines or lines[0] != SWEEP_HEADER:
        raise DataError(f"{path} does not start with the sweep header")
    out = []
    for line in lines[1:]:
        mode, multiple, rank1, mean_ap = line.split(",")
        out.append((mode, float(multiple), float(rank1), float(mean_ap)))
    return out
