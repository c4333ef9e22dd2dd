"""Feature extraction, retrieval metrics, linear probes and visual exports."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .dataset import ImageRecord, resize
from .disentangle import ShuffleMask, compose, part_shuffle, shuffle_registry
from .model import ISGAN, to_numpy_images, to_tensor

GRID_MODES = ("recon", "R_only", "U_only", "interp_R", "interp_U", "part_swap")


@dataclass
class RetrievalResult:
    distances: np.ndarray
    cmc: np.ndarray
    map: float
    n_query: int
    n_dropped: int

    def report(self) -> dict:
        def rank(k):
            return float(self.cmc[min(k, len(self.cmc)) - 1]) if len(self.cmc) else 0.0

        return {
            "rank1": rank(1),
            "rank5": rank(5),
            "rank10": rank(10),
            "map": float(self.map),
            "n_query": int(self.n_query),
            "n_dropped": int(self.n_dropped),
        }


@dataclass
class ProbeReport:
    attribute: str
    accuracy_R: float
    accuracy_U: float
    n_train: int
    n_val: int
    prior: float


def _batched_images(records: Sequence[ImageRecord], size, batch_size):
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        yield np.stack([resize(r.pixels(), size) for r in chunk])


@torch.no_grad()
def extract_features(model: ISGAN, records: Sequence[ImageRecord], which: str = "R",
                     batch_size: int = 64) -> np.ndarray:
    """Concatenated part features, one row per record, in inference mode.

    ``which`` selects identity-related ("R") or -unrelated ("U") features; the
    reparameterized variant contributes its predicted mean.
    """
    was = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    rows = []
    try:
        for images in _batched_images(records, model.cfg.resolution, batch_size):
            x = to_tensor(images, dtype)
            if which == "R":
                feats = model.encode_related(x)
            elif which == "U":
                feats = model.encode(x, sample=False).phi_U
            else:
                raise ValueError("which must be 'R' or 'U'")
            rows.append(feats.flatten(1).double().numpy())
    finally:
        model.train(was)
    if not rows:
        return np.zeros((0, model.layout.dim))
    return np.concatenate(rows)


def euclidean_distances(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    d2 = (q**2).sum(1)[:, None] + (g**2).sum(1)[None, :] - 2.0 * q @ g.T
    return np.sqrt(np.maximum(d2, 0.0))


def retrieval_metrics(q_feats, q_ids, q_cams, g_feats, g_ids, g_cams, filter: bool = True,
                      distances: np.ndarray | None = None) -> RetrievalResult:
    """CMC and mAP by ascending euclidean distance.

    With ``filter`` on, gallery entries sharing both identity and camera with
    the query are removed from its ranking. Ties keep gallery index order.
    Queries with no relevant gallery entry are dropped from both averages.
    """
    q_ids, q_cams = np.asarray(q_ids), np.asarray(q_cams)
    g_ids, g_cams = np.asarray(g_ids), np.asarray(g_cams)
    if len(q_ids) == 0 or len(g_ids) == 0:
        raise ValueError("query and gallery must be nonempty")
    dist = euclidean_distances(q_feats, g_feats) if distances is None else np.asarray(distances, dtype=np.float64)
    n_g = len(g_ids)
    cmc = np.zeros(n_g)
    ap_sum, valid = 0.0, 0
    for qi in range(len(q_ids)):
        order = np.argsort(dist[qi], kind="stable")
        same = g_ids[order] == q_ids[qi]
        if filter:
            keep = ~(same & (g_cams[order] == q_cams[qi]))
            same = same[keep]
        hits = np.flatnonzero(same)
        if len(hits) == 0:
            continue
        valid += 1
        cmc[hits[0]:] += 1
        precision = np.arange(1, len(hits) + 1) / (hits + 1)
        ap_sum += precision.mean()
    n_dropped = len(q_ids) - valid
    if valid == 0:
        return RetrievalResult(dist, cmc, 0.0, 0, n_dropped)
    return RetrievalResult(dist, cmc / valid, ap_sum / valid, valid, n_dropped)


def evaluate_retrieval(model: ISGAN, query: Sequence[ImageRecord], gallery: Sequence[ImageRecord],
                       filter: bool = True) -> RetrievalResult:
    qf = extract_features(model, query)
    gf = extract_features(model, gallery)
    return retrieval_metrics(
        qf, [r.identity for r in query], [r.camera_id for r in query],
        gf, [r.identity for r in gallery], [r.camera_id for r in gallery], filter=filter,
    )


def linear_probe(features: np.ndarray, labels: np.ndarray, rng: np.random.Generator,
                 epochs: int = 10, lr: float = 1e-2, batch_size: int = 64,
                 decay_every: int = 3, return_details: bool = False):
    """Validation accuracy of a sigmoid-linear classifier on frozen features.

    3:1 random train/validation split; SGD (momentum 0.9) on binary
    cross-entropy with the learning rate divided by 10 every ``decay_every``
    epochs. Features are standardized with training-split statistics.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).astype(np.float64).reshape(-1)
    if len(np.unique(y)) < 2:
        raise ValueError("linear probe needs both classes present")
    n = len(y)
    perm = rng.permutation(n)
    n_train = (3 * n) // 4
    tr, va = perm[:n_train], perm[n_train:]
    mean = x[tr].mean(0)
    std = x[tr].std(0) + 1e-8
    xt = torch.as_tensor((x - mean) / std, dtype=torch.float64)
    yt = torch.as_tensor(y, dtype=torch.float64)
    gen = torch.Generator().manual_seed(int(rng.integers(2**31)))
    layer = nn.Linear(x.shape[1], 1).double()
    with torch.no_grad():
        bound = 1.0 / np.sqrt(x.shape[1])
        layer.weight.uniform_(-bound, bound, generator=gen)
        layer.bias.zero_()
    opt = torch.optim.SGD(layer.parameters(), lr=lr, momentum=0.9)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=decay_every, gamma=0.1)
    loss_fn = nn.BCEWithLogitsLoss()
    for _ in range(epochs):
        order = tr[rng.permutation(len(tr))]
        for s in range(0, len(order), batch_size):
            idx = order[s : s + batch_size]
            opt.zero_grad()
            loss_fn(layer(xt[idx]).squeeze(1), yt[idx]).backward()
            opt.step()
        sched.step()
    with torch.no_grad():
        pred = (layer(xt[va]).squeeze(1) > 0).double()
    acc = float((pred == yt[va]).double().mean()) if len(va) else float("nan")
    if return_details:
        return acc, {"n_train": int(len(tr)), "n_val": int(len(va)), "prior": float(y[va].mean())}
    return acc


def probe_report(model: ISGAN, records: Sequence[ImageRecord], labels: np.ndarray, attribute: str,
                 seed: int = 0) -> ProbeReport:
    fr = extract_features(model, records, "R")
    fu = extract_features(model, records, "U")
    acc_r, info = linear_probe(fr, labels, np.random.default_rng(seed), return_details=True)
    acc_u = linear_probe(fu, labels, np.random.default_rng(seed))
    return ProbeReport(attribute, acc_r, acc_u, info["n_train"], info["n_val"], info["prior"])


def export_embeddings(matrix: np.ndarray, ids: Sequence[int], path: str | os.PathLike,
                      cams: Sequence[int] | None = None) -> Path:
    """CSV with header ``id,cam,f0..f{D-1}``; values round-trip exactly."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        matrix = matrix.reshape(len(ids), -1)
    cams = list(cams) if cams is not None else [0] * len(ids)
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "cam"] + [f"f{d}" for d in range(matrix.shape[1])])
        for i, row in enumerate(matrix):
            w.writerow([int(ids[i]), int(cams[i])] + [f"{v:.17g}" for v in row])
    return path


def read_embeddings(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    dim = len(header) - 2
    if not body:
        return np.zeros((0, dim)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    arr = np.array(body, dtype=np.float64)
    return arr[:, 2:], arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64)


# ---------------------------------------------------------------------------
# Generation grids
# ---------------------------------------------------------------------------


@torch.no_grad()
def generate_views(model: ISGAN, image1: np.ndarray, image2: np.ndarray, mode: str,
                   alphas: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 1.0),
                   mask: ShuffleMask | None = None, shuffle_mode: str = "short_term") -> tuple[np.ndarray, list[str]]:
    """Generated images [N, H, W, 3] for one pair, with column labels.

    Generation is label-free (all-zero one-hot) with zero noise so the output
    depends on the features alone.
    """
    if mode not in GRID_MODES:
        raise ValueError(f"mode must be one of {GRID_MODES}")
    was = model.training
    model.eval()
    try:
        dtype = next(model.parameters()).dtype
        size = model.cfg.resolution
        x = to_tensor(np.stack([resize(image1, size), resize(image2, size)]), dtype)
        enc = model.encode(x, sample=False)
        R, U = enc.phi_R, enc.phi_U
        feats, labels = [], []
        if mode == "recon":
            feats = [compose(R[0], U[0]), compose(R[1], U[1])]
            labels = ["R1+U1", "R2+U2"]
        elif mode == "R_only":
            feats = [compose(R[0], torch.zeros_like(U[0])), compose(R[1], torch.zeros_like(U[1]))]
            labels = ["R1", "R2"]
        elif mode == "U_only":
            feats = [compose(torch.zeros_like(R[0]), U[0]), compose(torch.zeros_like(R[1]), U[1])]
            labels = ["U1", "U2"]
        elif mode in ("interp_R", "interp_U"):
            for a in alphas:
                if mode == "interp_R":
                    feats.append(compose((1.0 - a) * R[0] + a * R[1], U[0]))
                else:
                    feats.append(compose(R[0], (1.0 - a) * U[0] + a * U[1]))
                labels.append(f"{mode} a={a:g}")
        else:
            registry = shuffle_registry(model.layout, shuffle_mode)
            if mask is None:
                mask = ShuffleMask(np.ones(len(registry), dtype=bool), registry)
            feats = [compose(part_shuffle(R[0], R[1], mask), U[0]),
                     compose(part_shuffle(R[1], R[0], mask), U[1])]
            labels = ["S(R1,R2)+U1", "S(R2,R1)+U2"]
        z = torch.stack(feats)
        noise = z.new_zeros(len(feats), model.cfg.noise_dim)
        out = model.generate(z, z.new_zeros(len(feats), model.cfg.n_classes), noise)
        return to_numpy_images(out.clamp(0, 1)), labels
    finally:
        model.train(was)


def generation_grid(model: ISGAN, pairs: Sequence[tuple[np.ndarray, np.ndarray]], mode: str,
                    path: str | os.PathLike, alphas: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 1.0),
                    mask: ShuffleMask | None = None, shuffle_mode: str = "short_term") -> np.ndarray:
    """Write a PNG grid (one row per pair: inputs, then generations) and a
    ``.txt`` sidecar with row/column labels. Returns the grid array."""
    from .dataset import save_image

    size = model.cfg.resolution
    rows, col_labels = [], []
    for img1, img2 in pairs:
        views, col_labels = generate_views(model, img1, img2, mode, alphas, mask, shuffle_mode)
        tiles = [resize(img1, size), resize(img2, size)] + list(views)
        rows.append(np.concatenate(tiles, axis=1))
    grid = np.concatenate(rows, axis=0)
    path = Path(path)
    save_image(path, grid)
    sidecar = {
        "mode": mode,
        "columns": ["input1", "input2"] + col_labels,
        "rows": [f"pair{n}" for n in range(len(pairs))],
    }
    path.with_suffix(".txt").write_text(json.dumps(sidecar, indent=1) + "\n")
    return grid


def write_metrics(result: RetrievalResult, path: str | os.PathLike) -> dict:
    report = result.report()
    Path(path).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    return report


def write_probe(report: ProbeReport, path: str | os.PathLike) -> dict:
    data = asdict(report)
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")
    return data
