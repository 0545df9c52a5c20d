"""Lip-sync, dynamics and diversity metrics over decoded mesh sequences.

Mesh sequences are ``(T, n_v, 3)`` arrays in model units. All standard
deviations are population (divide-by-n) deviations.
"""

from __future__ import annotations

import csv
import io
from dataclasses import astuple, dataclass, fields

import numpy as np

from .corpus import derive_seed
from .errors import DegenerateInput, InvalidArgument, ThunderError
from .face_model import FaceTemplate, decode_sequence

CORR_EPS = 1e-12


def _pair(pred, gt, min_frames=1):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise InvalidArgument(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    if pred.shape[0] < min_frames:
        raise InvalidArgument(f"need at least {min_frames} frames, got {pred.shape[0]}")
    return pred, gt


def lve(pred, gt, lip_idx) -> float:
    """Mean over frames of the worst lip-vertex L2 error."""
    pred, gt = _pair(pred, gt)
    err = np.linalg.norm(pred[:, lip_idx] - gt[:, lip_idx], axis=-1)
    return float(err.max(axis=1).mean())


def dtw(a, b) -> float:
    """DTW cost of two scalar series divided by the warping-path length.

    Steps are (1,0), (0,1), (1,1) with local cost |a_i - b_j|. Among
    minimum-cost paths the shortest one sets the normalizer.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise InvalidArgument("DTW needs nonempty series")
    n, m = a.size, b.size
    cost = np.abs(a[:, None] - b[None, :])
    acc = np.full((n, m), np.inf)
    length = np.zeros((n, m), dtype=np.int64)
    acc[0, 0], length[0, 0] = cost[0, 0], 1
    for i in range(n):
        for j in range(m):
            if i == 0 and j == 0:
                continue
            best = None
            for pi, pj in ((i - 1, j - 1), (i - 1, j), (i, j - 1)):
                if pi < 0 or pj < 0:
                    continue
                cand = (acc[pi, pj], length[pi, pj])
                if best is None or cand < best:
                    best = cand
            acc[i, j] = best[0] + cost[i, j]
            length[i, j] = best[1] + 1
    return float(acc[-1, -1] / length[-1, -1])


def lip_distance(verts, template: FaceTemplate) -> np.ndarray:
    """Upper-to-lower lip midpoint distance per frame."""
    verts = np.asarray(verts)
    return np.linalg.norm(verts[:, template.upper_lip_mid] - verts[:, template.lower_lip_mid], axis=-1)


def dtw_lip(pred, gt, template: FaceTemplate) -> float:
    if len(pred) == 0 or len(gt) == 0:
        raise InvalidArgument("DTW needs nonempty sequences")
    return dtw(lip_distance(pred, template), lip_distance(gt, template))


def lip_correlation(pred, gt, mouth_idx) -> tuple[float, float]:
    """Mean Pearson and concordance correlation over mouth coordinate series.

    Coordinates whose ground-truth series is (numerically) constant are
    skipped; a constant prediction series counts as zero correlation.
    """
    pred, gt = _pair(pred, gt, min_frames=2)
    x = pred[:, mouth_idx].reshape(len(pred), -1)
    y = gt[:, mouth_idx].reshape(len(gt), -1)
    keep = y.var(axis=0) >= CORR_EPS
    if not keep.any():
        raise DegenerateInput("every ground-truth mouth coordinate is constant")
    x, y = x[:, keep], y[:, keep]
    mx, my = x.mean(0), y.mean(0)
    sx, sy = x.std(0), y.std(0)
    cov = ((x - mx) * (y - my)).mean(0)
    safe = sx > 0
    rho = np.where(safe, cov / np.where(safe, sx * sy, 1.0), 0.0)
    ccc = 2 * cov / (sx**2 + sy**2 + (mx - my) ** 2)
    return float(rho.mean()), float(ccc.mean())


def dynamics(verts, vertex_idx) -> np.ndarray:
    """Per-vertex temporal std of the displacement magnitude from the mean pose."""
    v = np.asarray(verts, dtype=np.float64)[:, vertex_idx]
    return np.linalg.norm(v - v.mean(0), axis=-1).std(0)


def fdd(pred, gt, vertex_idx) -> float:
    """Mean of dyn(gt) - dyn(pred); positive when the prediction is too still."""
    pred, gt = _pair(pred, gt, min_frames=2)
    return float((dynamics(gt, vertex_idx) - dynamics(pred, vertex_idx)).mean())


def distance_tensor(samples, gt) -> np.ndarray:
    """(S, T, n_v, 3) samples vs (T, n_v, 3) ground truth -> (S, T, n_v) distances."""
    samples = np.asarray(samples, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if samples.shape[1:] != gt.shape:
        raise InvalidArgument(f"samples {samples.shape} do not match ground truth {gt.shape}")
    return np.linalg.norm(samples - gt[None], axis=-1)


def diversity(tensor, upper_idx, lip_idx) -> tuple[float, float, float, float]:
    """(S-DIV-U, S-DIV-L, T-DIV-U, T-DIV-L) of a distance tensor.

    ``tensor`` is an (N, S, T, n_v) array or a list of per-sequence
    (S, T_n, n_v) arrays for ragged lengths; means pool every entry.
    """
    seqs = [np.asarray(t, dtype=np.float64) for t in
            (tensor if isinstance(tensor, (list, tuple)) else list(np.asarray(tensor)))]
    if not seqs:
        raise InvalidArgument("empty distance tensor")
    for t in seqs:
        if t.ndim != 3:
            raise InvalidArgument("each sequence must be (S, T, n_v)")
        if t.shape[0] < 2:
            raise InvalidArgument(f"diversity needs S >= 2 samples, got {t.shape[0]}")
        if t.shape[1] < 2:
            raise InvalidArgument(f"diversity needs T >= 2 frames, got {t.shape[1]}")

    def pooled(axis, idx):
        # std is shift-invariant; centring on the first entry makes identical
        # entries give exactly zero
        parts = [(t[..., idx] - t[..., idx].take([0], axis=axis)).std(axis=axis).ravel() for t in seqs]
        return float(np.concatenate(parts).mean())

    return pooled(0, upper_idx), pooled(0, lip_idx), pooled(1, upper_idx), pooled(1, lip_idx)


@dataclass(frozen=True)
class MetricReport:
    lve: float
    dtw: float
    l_pcc: float
    l_ccc: float
    fdd_u: float
    fdd_l: float
    s_div_u: float
    s_div_l: float
    t_div_u: float
    t_div_l: float

    def __post_init__(self):
        vals = astuple(self)
        if not np.all(np.isfinite(vals)):
            raise InvalidArgument(f"non-finite metric in {self}")
        for name in ("l_pcc", "l_ccc"):
            v = getattr(self, name)
            if not -1.0 - 1e-9 <= v <= 1.0 + 1e-9:
                raise InvalidArgument(f"{name}={v} outside [-1, 1]")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_dict(self) -> dict:
        return dict(zip(self.field_names(), astuple(self)))


def evaluate_model(sampler, records, template: FaceTemplate, n_samples: int = 32,
                   seed: int = 0) -> MetricReport:
    """Sample every record's audio ``n_samples`` times and score against ground truth.

    ``sampler(record, n_samples, seed)`` returns raw expression parameters
    of shape (S, T, psi+3); record ``k`` is sampled with
    ``derive_seed(seed, k)``. Per-sample metrics are averaged over samples
    and then over sequences.
    """
    if not records:
        raise InvalidArgument("no sequences to evaluate")
    if n_samples < 2:
        raise InvalidArgument("evaluation needs at least 2 samples per sequence")
    per_seq, dists = [], []
    for k, rec in enumerate(records):
        try:
            params = np.asarray(sampler(rec, n_samples, derive_seed(seed, k)), dtype=np.float64)
            if params.shape != (n_samples,) + rec.expressions.shape:
                raise InvalidArgument(
                    f"sampler returned {params.shape}, expected {(n_samples,) + rec.expressions.shape}")
        except ThunderError as exc:
            exc.args = (f"sequence {rec.index}: {exc}",) + exc.args[1:]
            raise
        gt = decode_sequence(template, rec.expressions)
        preds = np.stack([decode_sequence(template, p) for p in params])
        rows = []
        for pred in preds:
            pcc, ccc = lip_correlation(pred, gt, template.mouth_idx)
            rows.append((lve(pred, gt, template.lip_idx), dtw_lip(pred, gt, template), pcc, ccc,
                         fdd(pred, gt, template.upper_idx), fdd(pred, gt, template.lip_idx)))
        per_seq.append(np.mean(rows, axis=0))
        dists.append(distance_tensor(preds, gt))
    means = np.mean(per_seq, axis=0)
    divs = diversity(dists, template.upper_idx, template.lip_idx)
    return MetricReport(*(float(v) for v in means), *divs)


# -- reporting ----------------------------------------------------------------------


def reports_csv(rows, descriptor_keys=()) -> str:
    """CSV text: descriptor columns, then MetricReport fields in order.

    ``rows`` holds ``(descriptor: dict, report)`` pairs.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(descriptor_keys) + MetricReport.field_names())
    for desc, rep in rows:
        writer.writerow([desc[k] for k in descriptor_keys] + [repr(float(v)) for v in astuple(rep)])
    return buf.getvalue()


def reports_table(rows, descriptor_keys=()) -> str:
    header = list(descriptor_keys) + MetricReport.field_names()
    body = [[str(desc[k]) for k in descriptor_keys] + [f"{v:.5f}" for v in astuple(rep)]
            for desc, rep in rows]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.rjust(w) for c, w in zip(r, widths))  # noqa: E731
    return "\n".join([fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in body])
