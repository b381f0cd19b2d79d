"""PSNR, proxy-FID and per-dataset super-resolution reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .errors import InsufficientDataError, InvalidShapeError, NumericError
from .tensor import Tensor

# Fixed so that proxy features are identical on every machine.
PROXY_SEED = 1_234_567
PROXY_CHANNELS = (3, 16, 32, 64)


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def psnr(a, b, max_value: float = 1.0) -> float:
    """``10 log10(max^2 / MSE)`` in dB; identical inputs give ``inf``."""
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise InvalidShapeError(f"psnr: shapes {a.shape} and {b.shape} differ")
    if max_value <= 0:
        raise ValueError("max_value must be positive")
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value * max_value / err)


def to_unit_range(x) -> np.ndarray:
    """Map [-1, 1] images to [0, 1] (the range PSNR is reported on)."""
    return (_arr(x) + 1.0) / 2.0


class ProxyExtractor:
    """Fixed random conv net standing in for a pretrained feature network.

    Three stride-2 3x3 convolutions with silu, then a global average pool
    down to 64 features.
    """

    def __init__(self, seed: int = PROXY_SEED):
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.kernels = []
        for cin, cout in zip(PROXY_CHANNELS, PROXY_CHANNELS[1:]):
            w = rng.standard_normal((cout, cin, 3, 3)) * math.sqrt(2.0 / (cin * 9))
            self.kernels.append(Tensor(w))

    @property
    def dim(self) -> int:
        return PROXY_CHANNELS[-1]

    def __call__(self, images, batch_size: int = 64) -> np.ndarray:
        x = _arr(images)
        if x.ndim == 3:
            x = x[None]
        feats = []
        with tn.no_grad():
            for start in range(0, x.shape[0], batch_size):
                h = Tensor(x[start : start + batch_size])
                for k in self.kernels:
                    h = tn.silu(tn.conv2d(h, k, stride=2, padding=1))
                feats.append(h.data.mean(axis=(2, 3)))
        return np.concatenate(feats) if feats else np.zeros((0, self.dim))


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        if self.count < 2:
            raise InsufficientDataError("covariance needs at least 2 samples")
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise InvalidShapeError(f"covariance {self.cov.shape} does not match mean of length {d}")


def stats_from_features(features: np.ndarray) -> FeatureStats:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise InsufficientDataError(f"need at least 2 feature rows, got shape {f.shape}")
    # two-pass mean/covariance in a fixed order
    mu = f.mean(axis=0)
    centered = f - mu
    cov = centered.T @ centered / (f.shape[0] - 1)
    return FeatureStats(mu, 0.5 * (cov + cov.T), f.shape[0])


def feature_stats(images, extractor: ProxyExtractor) -> FeatureStats:
    """Mean and unbiased covariance of pooled proxy features."""
    x = np.stack([_arr(i) for i in images]) if isinstance(images, (list, tuple)) else _arr(images)
    if x.shape[0] < 2:
        raise InsufficientDataError(f"feature statistics need at least 2 images, got {x.shape[0]}")
    return stats_from_features(extractor(x))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(s1: FeatureStats, s2: FeatureStats) -> float:
    """``|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))``, clamped at 0.

    ``tr((S1 S2)^(1/2))`` is evaluated as ``tr((A S2 A)^(1/2))`` with
    ``A = S1^(1/2)``; the inner product is symmetric PSD so both roots come
    from eigendecompositions with negative eigenvalues clipped to zero.
    """
    if s1.mean.shape != s2.mean.shape:
        raise InvalidShapeError(f"feature dimensions differ: {s1.mean.shape} vs {s2.mean.shape}")
    a = _psd_sqrt(s1.cov)
    inner = a @ s2.cov @ a
    w = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    tr_sqrt = float(np.sum(np.sqrt(np.clip(w, 0.0, None))))
    diff = s1.mean - s2.mean
    value = float(diff @ diff + np.trace(s1.cov) + np.trace(s2.cov) - 2.0 * tr_sqrt)
    if not math.isfinite(value):
        raise NumericError("non-finite Frechet distance")
    return max(0.0, value)


def proxy_fid(images_a, images_b, extractor: ProxyExtractor | None = None) -> float:
    extractor = extractor or ProxyExtractor()
    return frechet_distance(feature_stats(images_a, extractor), feature_stats(images_b, extractor))


@dataclass
class MetricReport:
    ids: list[str]
    psnr_model: list[float]
    psnr_baseline: list[float]
    gain_fraction_3db: float
    fraction_model_ge_baseline: float
    fid_model: float
    fid_baseline: float
    count: int
    extra: dict = field(default_factory=dict)

    def to_records(self) -> str:
        """Line-delimited JSON: one record per image, then one summary record."""
        lines = [
            json.dumps({"kind": "image", "id": i, "psnr_model": _jnum(m), "psnr_baseline": _jnum(b)})
            for i, m, b in zip(self.ids, self.psnr_model, self.psnr_baseline)
        ]
        lines.append(json.dumps({"kind": "summary", **self.summary()}))
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {
            "count": self.count,
            "gain_fraction_3db": self.gain_fraction_3db,
            "fraction_model_ge_baseline": self.fraction_model_ge_baseline,
            "mean_psnr_model": _jnum(_finite_mean(self.psnr_model)),
            "mean_psnr_baseline": _jnum(_finite_mean(self.psnr_baseline)),
            "proxy_fid_model": self.fid_model,
            "proxy_fid_baseline": self.fid_baseline,
            **self.extra,
        }

    def summary_table(self) -> str:
        s = self.summary()
        rows = [
            ("images", f"{s['count']}"),
            ("PSNR gain > 3 dB", f"{100 * s['gain_fraction_3db']:.1f}% of images"),
            ("PSNR model >= baseline", f"{100 * s['fraction_model_ge_baseline']:.1f}% of images"),
            ("mean PSNR (model / baseline)", f"{s['mean_psnr_model']} / {s['mean_psnr_baseline']} dB"),
            ("proxy-FID (model)", f"{s['proxy_fid_model']:.4f}"),
            ("proxy-FID (baseline)", f"{s['proxy_fid_baseline']:.4f}"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows) + "\n"


def _finite_mean(values) -> float:
    finite = [v for v in values if math.isfinite(v)]
    return float(np.mean(finite)) if finite else math.inf


def _jnum(v: float):
    return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")


def improvement_report(
    reference,
    upscaled,
    baseline,
    extractor: ProxyExtractor | None = None,
    ids: list[str] | None = None,
) -> MetricReport:
    """Compare model outputs and a baseline against references, image by image.

    All inputs are aligned sequences of [-1, 1] images.
    """
    ref, up, base = (np.stack([_arr(i) for i in s]) for s in (reference, upscaled, baseline))
    if not len(ref) == len(up) == len(base):
        raise InvalidShapeError(f"length mismatch: {len(ref)} references, {len(up)} outputs, {len(base)} baselines")
    extractor = extractor or ProxyExtractor()
    p_model = [psnr(to_unit_range(u), to_unit_range(r)) for u, r in zip(up, ref)]
    p_base = [psnr(to_unit_range(b), to_unit_range(r)) for b, r in zip(base, ref)]
    gains = [m - b if not (math.isinf(m) and math.isinf(b)) else 0.0 for m, b in zip(p_model, p_base)]
    ref_stats = feature_stats(ref, extractor)
    return MetricReport(
        ids=list(ids) if ids is not None else [str(i) for i in range(len(ref))],
        psnr_model=p_model,
        psnr_baseline=p_base,
        gain_fraction_3db=float(np.mean([g > 3.0 for g in gains])),
        fraction_model_ge_baseline=float(np.mean([m >= b for m, b in zip(p_model, p_base)])),
        fid_model=frechet_distance(feature_stats(up, extractor), ref_stats),
        fid_baseline=frechet_distance(feature_stats(base, extractor), ref_stats),
        count=len(ref),
    )
