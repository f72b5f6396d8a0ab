"""Verification metrics: cosine scoring, 10-fold accuracy, TAR@FAR, ROC and bias statistics.

Conventions
-----------
* A pair is accepted as genuine when its score is ``>=`` the threshold.
* 10-fold thresholds are picked from the midpoints between adjacent distinct
  scores of the whole protocol, plus one candidate below the minimum and one
  above the maximum. Because no score lies strictly inside a gap, results are
  unchanged by any strictly increasing transform of the scores. Ties go to
  the smallest threshold.
* ROC/TAR@FAR use the empirical step function over observed scores, no
  interpolation.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import DatasetManifest, Pair

DEFAULT_FAR_TARGETS = (1e-3, 1e-4, 1e-5)


def similarity(e1, e2) -> float:
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    n1, n2 = np.linalg.norm(e1), np.linalg.norm(e2)
    if n1 == 0 or n2 == 0:
        raise ValueError("zero-norm embedding")
    return float(np.clip(e1 @ e2 / (n1 * n2), -1.0, 1.0))


def pair_scores(emb_a: np.ndarray, emb_b: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity of two ``(n, d)`` arrays."""
    a = np.asarray(emb_a, dtype=np.float64)
    b = np.asarray(emb_b, dtype=np.float64)
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("zero-norm embedding")
    return np.clip(np.einsum("ij,ij->i", a, b) / (na * nb), -1.0, 1.0)


def _as_arrays(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores for {y.size} labels")
    if not np.isfinite(s).all():
        raise ValueError("non-finite score")
    return s, y


# -- 10-fold accuracy -----------------------------------------------------------


def threshold_candidates(scores) -> np.ndarray:
    u = np.unique(np.asarray(scores, dtype=np.float64))
    if u.size == 0:
        raise ValueError("no scores")
    return np.concatenate([[u[0] - 1.0], (u[:-1] + u[1:]) / 2, [u[-1] + 1.0]])


def accuracy_at_thresholds(scores, labels, thresholds) -> np.ndarray:
    """Fraction correct for each threshold (vectorized with sorted counts)."""
    s, y = _as_arrays(scores, labels)
    t = np.asarray(thresholds, dtype=np.float64)
    gen = np.sort(s[y])
    imp = np.sort(s[~y])
    gen_accepted = gen.size - np.searchsorted(gen, t, side="left")
    imp_rejected = np.searchsorted(imp, t, side="left")
    return (gen_accepted + imp_rejected) / s.size


@dataclass
class TenfoldResult:
    accuracy: float
    std: float
    fold_accuracies: list[float]
    thresholds: list[float]


def tenfold_verification(scores, labels, folds, n_folds: int = 10) -> TenfoldResult:
    s, y = _as_arrays(scores, labels)
    f = np.asarray(folds).ravel()
    if f.shape != s.shape:
        raise ValueError("folds and scores differ in length")
    present = set(np.unique(f).tolist())
    missing = sorted(set(range(n_folds)) - present)
    if missing:
        raise ValueError(f"missing fold(s) {missing}")
    extra = sorted(present - set(range(n_folds)))
    if extra:
        raise ValueError(f"fold index out of range: {extra}")
    cands = threshold_candidates(s)
    accs, taus = [], []
    for k in range(n_folds):
        test = f == k
        train_acc = accuracy_at_thresholds(s[~test], y[~test], cands) if (~test).any() else np.ones_like(cands)
        tau = cands[int(np.argmax(train_acc))]
        taus.append(float(tau))
        accs.append(float(accuracy_at_thresholds(s[test], y[test], [tau])[0]))
    return TenfoldResult(100.0 * float(np.mean(accs)), 100.0 * float(np.std(accs)), [100.0 * a for a in accs], taus)


def tenfold_accuracy(scores, labels, folds, n_folds: int = 10) -> float:
    """Mean held-out-fold accuracy (%), each fold thresholded on the other folds."""
    return tenfold_verification(scores, labels, folds, n_folds).accuracy


def contiguous_folds(n: int, n_folds: int = 10) -> np.ndarray:
    """Fold ids for ``n`` pairs split into ``n_folds`` consecutive blocks."""
    if n < n_folds:
        raise ValueError(f"{n} pairs cannot fill {n_folds} folds")
    return (np.arange(n) * n_folds) // n


# -- ROC / TAR@FAR -----------------------------------------------------------------


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(FAR, TAR, threshold) for every distinct score plus ``+inf``, thresholds ascending."""
    s, y = _as_arrays(scores, labels)
    gen, imp = np.sort(s[y]), np.sort(s[~y])
    if gen.size == 0 or imp.size == 0:
        raise ValueError("need at least one genuine and one impostor score")
    t = np.concatenate([np.unique(s), [np.inf]])
    far = (imp.size - np.searchsorted(imp, t, side="left")) / imp.size
    tar = (gen.size - np.searchsorted(gen, t, side="left")) / gen.size
    return far, tar, t


@dataclass
class TarAtFar:
    far_target: float
    tar: float
    threshold: float
    far: float
    attainable: bool


def tar_at_far(scores, labels, far_targets: Sequence[float] = DEFAULT_FAR_TARGETS) -> list[TarAtFar]:
    """TAR at the smallest observed threshold whose FAR does not exceed each target.

    A target below ``1 / n_impostors`` is flagged unattainable; its TAR is then
    the one at the strictest attainable FAR (zero false accepts).
    """
    far, tar, t = roc_curve(scores, labels)
    n_imp = int((~_as_arrays(scores, labels)[1]).sum())
    out = []
    for target in far_targets:
        idx = int(np.argmax(far <= target))  # far is non-increasing and ends at 0
        out.append(TarAtFar(float(target), float(tar[idx]), float(t[idx]), float(far[idx]), target * n_imp >= 1))
    return out


# -- bias --------------------------------------------------------------------------


@dataclass
class BiasReport:
    groups: list[str]
    accuracies: list[float]
    average: float
    std: float
    ser: float
    ser_infinite: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.ser_infinite:
            d["ser"] = "inf"
        return d


def bias_report(accuracies: Mapping[str, float] | Sequence[float]) -> BiasReport:
    """Average, sample STD (n-1) and skewed error ratio of per-group accuracies (%)."""
    if isinstance(accuracies, Mapping):
        groups = sorted(accuracies)
        accs = [float(accuracies[g]) for g in groups]
    else:
        accs = [float(a) for a in accuracies]
        groups = [str(i) for i in range(len(accs))]
    if len(accs) < 2:
        raise ValueError("bias statistics need at least 2 groups")
    a = np.array(accs)
    if ((a < 0) | (a > 100)).any():
        raise ValueError("accuracies must be percentages in [0, 100]")
    err = 100.0 - a
    if err.min() == 0:
        ser, inf = (1.0, False) if err.max() == 0 else (math.inf, True)
    else:
        ser, inf = float(err.max() / err.min()), False
    return BiasReport(groups, accs, float(a.mean()), float(a.std(ddof=1)), ser, inf)


def bias_from_scores(per_group: Mapping[str, tuple], n_folds: int = 10) -> BiasReport:
    """``per_group[g] = (scores, labels, folds)``; each group gets its own cross-validated accuracy.

    A group cross-validates over the folds it actually has pairs in, so a
    small protocol where some group skips a fold still reports.
    """
    accs = {}
    for g, (s, y, f) in per_group.items():
        if np.asarray(s).size == 0:
            raise ValueError(f"group {g!r} has no pairs")
        f = np.asarray(f).ravel()
        present = np.unique(f)
        if len(present) < 2:
            raise ValueError(f"group {g!r} has pairs in fewer than 2 folds")
        if present.max() >= n_folds or present.min() < 0:
            raise ValueError(f"fold index out of range in group {g!r}")
        accs[g] = tenfold_accuracy(s, y, np.searchsorted(present, f), len(present))
    return bias_report(accs)


# -- end-to-end evaluation ------------------------------------------------------


class EmbeddingCache:
    """Memoizes ``embed(paths) -> (n, d)`` per unique path."""

    def __init__(self, embed: Callable[[Sequence[str]], np.ndarray], enabled: bool = True):
        self.embed = embed
        self.enabled = enabled
        self.store: dict[str, np.ndarray] = {}
        self.calls = 0

    def __call__(self, paths: Sequence[str]) -> np.ndarray:
        if not self.enabled:
            self.calls += len(paths)
            return np.asarray(self.embed(list(paths)))
        todo = sorted(set(p for p in paths if p not in self.store))
        if todo:
            self.calls += len(todo)
            for p, e in zip(todo, np.asarray(self.embed(todo))):
                self.store[p] = e
        return np.stack([self.store[p] for p in paths])


@dataclass
class MetricReport:
    accuracy: float
    accuracy_std: float
    fold_accuracies: list[float]
    fold_thresholds: list[float]
    n_pairs: int
    n_genuine: int
    n_impostor: int
    tar_at_far: list[TarAtFar]
    roc: dict = field(repr=False)
    bias: BiasReport | None = None
    name: str = "verification"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tar_at_far"] = [asdict(t) for t in self.tar_at_far]
        d["bias"] = self.bias.to_dict() if self.bias is not None else None
        return _finite(d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False, default=_json_default) + "\n"

    def summary_rows(self) -> list[tuple[str, str]]:
        rows = [("benchmark", self.name), ("accuracy", f"{self.accuracy:.4f}"), ("n_pairs", str(self.n_pairs))]
        for t in self.tar_at_far:
            rows.append((f"tar@far={t.far_target:g}", f"{100 * t.tar:.4f}" + ("" if t.attainable else "*")))
        if self.bias is not None:
            for g, a in zip(self.bias.groups, self.bias.accuracies):
                rows.append((f"acc[{g}]", f"{a:.4f}"))
            rows += [
                ("bias_avg", f"{self.bias.average:.4f}"),
                ("bias_std", f"{self.bias.std:.4f}"),
                ("bias_ser", "inf" if self.bias.ser_infinite else f"{self.bias.ser:.4f}"),
            ]
        return rows

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        """``report.json``, ``summary.csv`` and ``roc.csv`` under ``out_dir``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"report": out / "report.json", "summary": out / "summary.csv", "roc": out / "roc.csv"}
        paths["report"].write_text(self.to_json(), encoding="utf-8")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("metric", "value"))
        w.writerows(self.summary_rows())
        paths["summary"].write_text(buf.getvalue(), encoding="utf-8")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("far", "tar"))
        w.writerows((repr(a), repr(b)) for a, b in zip(self.roc["far"], self.roc["tar"]))
        paths["roc"].write_text(buf.getvalue(), encoding="utf-8")
        return paths


def _finite(obj):
    """JSON has no infinities; write them as the strings ``"inf"``/``"-inf"``."""
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, (float, np.floating)) and not math.isfinite(obj):
        return "nan" if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def evaluate(
    embed: Callable[[Sequence[str]], np.ndarray] | Mapping[str, np.ndarray],
    pairs: Sequence[Pair],
    manifest: DatasetManifest | None = None,
    far_targets: Sequence[float] = DEFAULT_FAR_TARGETS,
    n_folds: int = 10,
    cache: bool = True,
    name: str = "verification",
) -> MetricReport:
    """Score every pair and compute the full metric battery.

    ``embed`` is either a batch embedding function over image paths or a
    precomputed ``path -> vector`` mapping. Folds come from the protocol, or
    contiguous blocks when it has none. When ``manifest`` carries groups and
    both images of every pair share one, a bias block is added.
    """
    if not pairs:
        raise ValueError("empty protocol")
    if isinstance(embed, Mapping):
        table = embed

        def embed(paths, _t=table):
            missing = [p for p in paths if p not in _t]
            if missing:
                raise KeyError(f"no embedding for image {missing[0]!r}")
            return np.stack([np.asarray(_t[p]) for p in paths])

    if manifest is not None:
        known = {r.path for r in manifest.records}
        for p in pairs:
            for ref in (p.path_a, p.path_b):
                if ref not in known:
                    raise KeyError(f"protocol references {ref!r}, which is not in the manifest")
    embedder = EmbeddingCache(embed, enabled=cache)
    uniq = sorted({ref for p in pairs for ref in (p.path_a, p.path_b)})
    table = dict(zip(uniq, embedder(uniq)))
    scores = pair_scores(np.stack([table[p.path_a] for p in pairs]), np.stack([table[p.path_b] for p in pairs]))
    labels = np.array([p.genuine for p in pairs])
    if all(p.fold is not None for p in pairs):
        folds = np.array([p.fold for p in pairs])
    elif any(p.fold is not None for p in pairs):
        raise ValueError("protocol assigns folds to some pairs but not others")
    else:
        folds = contiguous_folds(len(pairs), n_folds)
    tf = tenfold_verification(scores, labels, folds, n_folds)
    far, tar, _ = roc_curve(scores, labels)
    bias = None
    if manifest is not None:
        groups = [(manifest.group_of(p.path_a), manifest.group_of(p.path_b)) for p in pairs]
        if all(a is not None and a == b for a, b in groups) and len({a for a, _ in groups}) >= 2:
            g = np.array([a for a, _ in groups])
            bias = bias_from_scores(
                {k: (scores[g == k], labels[g == k], folds[g == k]) for k in sorted(set(g.tolist()))}, n_folds
            )
    return MetricReport(
        accuracy=tf.accuracy,
        accuracy_std=tf.std,
        fold_accuracies=tf.fold_accuracies,
        fold_thresholds=tf.thresholds,
        n_pairs=len(pairs),
        n_genuine=int(labels.sum()),
        n_impostor=int((~labels).sum()),
        tar_at_far=tar_at_far(scores, labels, far_targets),
        roc={"far": far.tolist(), "tar": tar.tolist()},
        bias=bias,
        name=name,
    )
