"""Model-level accuracy of a predicted lane model against ground truth.

Lines are paired per chunk so the summed absolute lateral distance is
minimal. Function scores count pairs with equal labels closer than a
distance threshold; geometry scores separate a global shift from the
within-chunk spread of the paired distances.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .roadmodel import BoundaryLine, RoadModel, RouteFrame


class AlignmentError(ValueError):
    """Predicted and ground-truth trajectories do not describe the same route."""


@dataclass
class PairMatching:
    chunk_id: int
    pairs: list[tuple[int, int]]  # (truth index, pred index)
    distances: list[float]  # signed, pred relative to truth
    truth_kinds: list[str]
    pred_kinds: list[str]
    unmatched_truth: list[int] = field(default_factory=list)
    unmatched_pred: list[int] = field(default_factory=list)

    @property
    def n_truth(self) -> int:
        return len(self.truth_kinds)

    @property
    def n_pred(self) -> int:
        return len(self.pred_kinds)


@dataclass
class ChunkScore:
    chunk_id: int
    n_truth: int
    n_pred: int
    n_pairs: int
    correct: int
    sigma: float | None
    sigma_max: float | None
    performance: float | None
    mean_d: float | None


@dataclass
class EvalReport:
    correct_detections: int
    n_truth: int
    n_pred: int
    frac_of_truth_matched: float | None
    frac_of_pred_matched: float | None
    shift: float | None
    performance_geometry: float | None
    median_abs_d: float | None
    T_d: float
    chunks: list[ChunkScore] = field(default_factory=list)

    # Naming used in the original metric definition: "precision" is taken over
    # the ground-truth lines and "recall" over the predicted ones.
    @property
    def precision_function(self) -> float | None:
        return self.frac_of_truth_matched

    @property
    def recall_function(self) -> float | None:
        return self.frac_of_pred_matched

    def to_dict(self) -> dict:
        d = asdict(self)
        d["precision_function"] = self.precision_function
        d["recall_function"] = self.recall_function
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        def f(v, fmt="{:.4f}"):
            return "undefined" if v is None else fmt.format(v)

        rows = [
            ("T_d [m]", f(self.T_d, "{:.3f}")),
            ("truth lines", str(self.n_truth)),
            ("predicted lines", str(self.n_pred)),
            ("correct detections", str(self.correct_detections)),
            ("frac_of_truth_matched (precision_function)", f(self.frac_of_truth_matched)),
            ("frac_of_pred_matched (recall_function)", f(self.frac_of_pred_matched)),
            ("shift [m]", f(self.shift, "{:+.4f}")),
            ("performance_geometry", f(self.performance_geometry)),
            ("median |d| [m]", f(self.median_abs_d)),
        ]
        w = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{w}}  {v}" for k, v in rows) + "\n"

    def chunks_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = list(ChunkScore.__dataclass_fields__)
        w.writerow(cols)
        for c in self.chunks:
            w.writerow(["" if getattr(c, k) is None else getattr(c, k) for k in cols])
        return buf.getvalue()


# -- distances --------------------------------------------------------------------------


def _station_profile(line: BoundaryLine, frame: RouteFrame):
    s, t = frame.latlon_to_st(line.latlon())
    order = np.argsort(s, kind="stable")
    return s[order], t[order]


def signed_distance(truth_line: BoundaryLine, pred_line: BoundaryLine, frame: RouteFrame,
                    s_mid: float | None = None) -> float:
    """Lateral offset of ``pred_line`` relative to ``truth_line`` (right positive).

    Measured at the perpendicular through station ``s_mid``; when either
    line does not reach it, the mean difference over their common station
    range is used, and without overlap the difference of mean offsets.
    """
    ts, tt = _station_profile(truth_line, frame)
    ps, pt = _station_profile(pred_line, frame)
    if s_mid is None:
        s_mid = 0.5 * (max(ts[0], ps[0]) + min(ts[-1], ps[-1]))
    if ts[0] <= s_mid <= ts[-1] and ps[0] <= s_mid <= ps[-1]:
        return float(np.interp(s_mid, ps, pt) - np.interp(s_mid, ts, tt))
    lo, hi = max(ts[0], ps[0]), min(ts[-1], ps[-1])
    if hi > lo:
        grid = np.linspace(lo, hi, 21)
        return float(np.mean(np.interp(grid, ps, pt) - np.interp(grid, ts, tt)))
    return float(np.mean(pt) - np.mean(tt))


def match_lines(d: np.ndarray, chunk_id: int = 0, truth_kinds=None, pred_kinds=None) -> PairMatching:
    """Pairing of truth rows to prediction columns minimising the summed ``|d|``.

    Every maximal one-to-one pairing is a candidate; the optimum is found with
    the Hungarian algorithm.
    """
    d = np.asarray(d, dtype=float)
    if d.ndim != 2:
        raise ValueError("distance matrix must be 2-D (truth x pred)")
    n, m = d.shape
    truth_kinds = list(truth_kinds) if truth_kinds is not None else ["solid"] * n
    pred_kinds = list(pred_kinds) if pred_kinds is not None else ["solid"] * m
    if n == 0 or m == 0:
        return PairMatching(chunk_id, [], [], truth_kinds, pred_kinds, list(range(n)), list(range(m)))
    rows, cols = linear_sum_assignment(np.abs(d))
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols)]
    return PairMatching(
        chunk_id,
        pairs,
        [float(d[r, c]) for r, c in pairs],
        truth_kinds,
        pred_kinds,
        sorted(set(range(n)) - set(rows.tolist())),
        sorted(set(range(m)) - set(cols.tolist())),
    )


# -- scores ------------------------------------------------------------------------------


def _correct(mt: PairMatching, T_d: float) -> int:
    return sum(
        1 for (r, c), dist in zip(mt.pairs, mt.distances) if mt.truth_kinds[r] == mt.pred_kinds[c] and abs(dist) < T_d
    )


def function_scores(matchings: list[PairMatching], T_d: float):
    """``(frac_of_truth_matched, frac_of_pred_matched, correct)``; None when a side is empty."""
    if T_d <= 0:
        raise ValueError("T_d must be positive")
    correct = sum(_correct(m, T_d) for m in matchings)
    n_truth = sum(m.n_truth for m in matchings)
    n_pred = sum(m.n_pred for m in matchings)
    return (correct / n_truth if n_truth else None, correct / n_pred if n_pred else None, correct)


def sigma_max(n: int, T_d: float) -> float:
    """Spread of ``floor(n/2)`` copies of ``T_d`` and ``ceil(n/2)`` of ``-T_d``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    values = np.array([T_d] * (n // 2) + [-T_d] * (n - n // 2), dtype=float)
    return float(np.std(values))


def _geometry_d(mt: PairMatching, T_d: float) -> list[float]:
    # Pairs further apart than T_d are mismatches, not geometric error; with
    # all |d| <= T_d the chunk spread is bounded by sigma_max.
    return [dist for dist in mt.distances if abs(dist) <= T_d]


def _chunk_sigma(ds: list[float], n_truth: int, T_d: float):
    if not ds:
        return None, None, None
    smax = sigma_max(max(n_truth, 1), T_d)
    if len(ds) < 2 or smax == 0:
        return 0.0, smax, 1.0
    sigma = float(np.std(ds))
    return sigma, smax, min(1.0, max(0.0, 1.0 - sigma / smax))


def geometry_scores(matchings: list[PairMatching], T_d: float):
    """``(shift, performance_geometry)`` over pairs within ``T_d``; None without pairs."""
    all_d = []
    perf = []
    for mt in matchings:
        ds = _geometry_d(mt, T_d)
        all_d.extend(ds)
        _, _, p = _chunk_sigma(ds, mt.n_truth, T_d)
        if p is not None:
            perf.append(p)
    if not all_d:
        return None, None
    return float(np.mean(all_d)), float(np.mean(perf))


# -- model level -----------------------------------------------------------------------


def _chunk_span(c, frame: RouteFrame) -> tuple[float, float]:
    s, _ = frame.latlon_to_st(c.trajectory.latlon())
    return float(s.min()), float(s.max())


def align_chunks(truth: RoadModel, pred: RoadModel, frame: RouteFrame) -> dict[int, list]:
    """Map each truth chunk index to the predicted chunks whose midpoint falls in it."""
    L = truth.chunk_length
    spans = [_chunk_span(c, frame) for c in truth.chunks]
    if pred.chunks:
        p0 = _chunk_span(pred.chunks[0], frame)[0]
        p1 = _chunk_span(pred.chunks[-1], frame)[1]
        if abs(p0 - spans[0][0]) > L or abs(p1 - spans[-1][1]) > L:
            raise AlignmentError(
                f"trajectories differ by more than one chunk length: pred spans [{p0:.1f}, {p1:.1f}] m, "
                f"truth spans [{spans[0][0]:.1f}, {spans[-1][1]:.1f}] m"
            )
    starts = np.array([a for a, _ in spans])
    out: dict[int, list] = {i: [] for i in range(len(truth.chunks))}
    for c in pred.chunks:
        a, b = _chunk_span(c, frame)
        i = int(np.clip(np.searchsorted(starts, 0.5 * (a + b), side="right") - 1, 0, len(starts) - 1))
        out[i].append(c)
    return out


def evaluate(truth: RoadModel, pred: RoadModel, T_d: float = 0.5) -> EvalReport:
    if T_d <= 0:
        raise ValueError("T_d must be positive")
    frame = RouteFrame(truth.trajectory_latlon())
    aligned = align_chunks(truth, pred, frame)
    matchings = []
    chunk_scores = []
    for i, tc in enumerate(truth.chunks):
        a, b = _chunk_span(tc, frame)
        s_mid = 0.5 * (a + b)
        tl = tc.boundaries
        pl = [ln for pc in aligned[i] for ln in pc.boundaries]
        d = np.array([[signed_distance(t, p, frame, s_mid) for p in pl] for t in tl]).reshape(len(tl), len(pl))
        mt = match_lines(d, tc.id, [ln.kind for ln in tl], [ln.kind for ln in pl])
        matchings.append(mt)
        ds = _geometry_d(mt, T_d)
        sigma, smax, perf = _chunk_sigma(ds, mt.n_truth, T_d)
        chunk_scores.append(ChunkScore(tc.id, mt.n_truth, mt.n_pred, len(mt.pairs), _correct(mt, T_d), sigma, smax,
                                       perf, float(np.mean(ds)) if ds else None))
    ft, fp, correct = function_scores(matchings, T_d)
    shift, perf = geometry_scores(matchings, T_d)
    all_d = [abs(x) for mt in matchings for x in _geometry_d(mt, T_d)]
    return EvalReport(
        correct,
        sum(m.n_truth for m in matchings),
        sum(m.n_pred for m in matchings),
        ft,
        fp,
        shift,
        perf,
        float(np.median(all_d)) if all_d else None,
        T_d,
        chunk_scores,
    )


def shift_model(model: RoadModel, offset: float) -> RoadModel:
    """Copy of ``model`` with every boundary line moved ``offset`` metres to the right."""
    from .roadmodel import Chunk

    frame = RouteFrame(model.trajectory_latlon())
    chunks = []
    for c in model.chunks:
        lines = []
        for ln in c.lines:
            if ln.kind == "trajectory":
                lines.append(ln)
                continue
            # Move along the local normal instead of re-mapping (s, t): points outside a
            # trajectory vertex all project onto that vertex and would collapse.
            en = frame.to_en(ln.latlon())
            s, _ = frame.to_st(en)
            d = frame.direction(s)
            right = np.stack([d[:, 1], -d[:, 0]], axis=-1)
            lines.append(BoundaryLine.from_array(ln.line_id, ln.kind, frame.to_latlon(en + offset * right)))
        chunks.append(Chunk(c.id, c.map_version, tuple(lines)))
    return RoadModel(tuple(chunks), model.chunk_length)

