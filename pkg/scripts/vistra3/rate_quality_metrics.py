#!/usr/bin/env python3
"""
Rate-quality curves, Bjontegaard deltas and RD CSV plumbing

Curves are interpolated with monotone piecewise cubic Hermite (PCHIP)
polynomials over log10(rate) and integrated in closed form over the
overlap of the two curves. No extrapolation is used for BD figures.

RD CSV schema:

    codec,sequence,metric,qp,rate_bps,quality[,encode_seconds,decode_seconds]
"""

import logging
import math
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.interpolate import PchipInterpolator

from vistra3_base import MetricsError

logger = logging.getLogger(__name__)

RD_COLUMNS = ['codec', 'sequence', 'metric', 'qp', 'rate_bps', 'quality']
TIMING_COLUMNS = ['encode_seconds', 'decode_seconds']
MIN_BD_POINTS = 3


@dataclass(frozen=True)
class RateQualityPoint:
    rate: float
    quality: float
    metric_id: str = 'psnr_yuv'
    qp: Optional[int] = None
    encode_seconds: Optional[float] = None
    decode_seconds: Optional[float] = None

    def __post_init__(self):
        if not self.rate > 0 or not math.isfinite(self.rate):
            raise MetricsError('invalid-rate', f"rate must be positive and finite, got {self.rate}")
        if not math.isfinite(self.quality):
            raise MetricsError('invalid-quality', f"quality must be finite, got {self.quality}")


@dataclass(frozen=True)
class RateQualityCurve:
    """Points of one metric, sorted by strictly increasing rate"""
    points: Tuple[RateQualityPoint, ...]
    metric_id: str = 'psnr_yuv'
    codec: str = ''
    sequence: str = ''

    def __post_init__(self):
        points = tuple(sorted(self.points, key=lambda p: p.rate))
        if not points:
            raise MetricsError('empty-curve', "a curve needs at least one point")
        if any(p.metric_id != self.metric_id for p in points):
            raise MetricsError('metric-mismatch', f"curve {self.metric_id!r} mixes metrics")
        rates = [p.rate for p in points]
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise MetricsError('duplicate-rate', f"curve {self.codec}/{self.sequence} has repeated rates")
        object.__setattr__(self, 'points', points)

    @property
    def rates(self) -> np.ndarray:
        return np.array([p.rate for p in self.points], dtype=np.float64)

    @property
    def qualities(self) -> np.ndarray:
        return np.array([p.quality for p in self.points], dtype=np.float64)

    @property
    def key(self) -> Tuple[str, str, str]:
        return self.codec, self.sequence, self.metric_id

    def total_seconds(self, column: str) -> Optional[float]:
        values = [getattr(p, column) for p in self.points]
        if any(v is None for v in values):
            return None
        return float(sum(values))


class QualityInterpolant:
    """Quality as a function of log10(rate)

    Inside the sampled range this is the PCHIP interpolant; outside it
    continues linearly along the tangent of the nearest end piece.
    """

    def __init__(self, curve: RateQualityCurve):
        if len(curve.points) < 2:
            raise MetricsError('too-few-points', "an interpolant needs at least 2 points")
        self.log_rates = np.log10(curve.rates)
        self.qualities = curve.qualities
        self._pchip = PchipInterpolator(self.log_rates, self.qualities, extrapolate=False)
        slopes = self._pchip.derivative()(self.log_rates[[0, -1]])
        self._low_slope, self._high_slope = float(slopes[0]), float(slopes[1])

    def __call__(self, log_rate: float) -> float:
        x = float(log_rate)
        lo, hi = self.log_rates[0], self.log_rates[-1]
        if x < lo:
            return float(self.qualities[0] + self._low_slope * (x - lo))
        if x > hi:
            return float(self.qualities[-1] + self._high_slope * (x - hi))
        knot = np.searchsorted(self.log_rates, x)
        if knot < len(self.log_rates) and self.log_rates[knot] == x:
            return float(self.qualities[knot])
        return float(self._pchip(x))


def _check_pair(test: RateQualityCurve, anchor: RateQualityCurve) -> None:
    if test.metric_id != anchor.metric_id:
        raise MetricsError('metric-mismatch', f"cannot compare {test.metric_id!r} with {anchor.metric_id!r}")
    for curve in (test, anchor):
        if len(curve.points) < MIN_BD_POINTS:
            raise MetricsError('too-few-points', f"BD needs at least {MIN_BD_POINTS} points, "
                                                 f"{curve.codec}/{curve.sequence} has {len(curve.points)}")


def _mean_over(interp: PchipInterpolator, low: float, high: float) -> float:
    return float(interp.integrate(low, high)) / (high - low)


def _log_rate_of_quality(curve: RateQualityCurve) -> PchipInterpolator:
    order = np.argsort(curve.qualities, kind='stable')
    qualities = curve.qualities[order]
    if np.any(np.diff(qualities) <= 0):
        raise MetricsError('non-monotone-quality', f"curve {curve.codec}/{curve.sequence} repeats a quality value")
    return PchipInterpolator(qualities, np.log10(curve.rates[order]))


def bd_rate(test: RateQualityCurve, anchor: RateQualityCurve) -> float:
    """Average bitrate difference (%) of `test` against `anchor` at equal quality"""
    _check_pair(test, anchor)
    low = max(test.qualities.min(), anchor.qualities.min())
    high = min(test.qualities.max(), anchor.qualities.max())
    if not high > low:
        raise MetricsError('no-overlap', "quality ranges of the two curves do not overlap")
    diff = _mean_over(_log_rate_of_quality(test), low, high) - _mean_over(_log_rate_of_quality(anchor), low, high)
    return (10.0 ** diff - 1.0) * 100.0


def bd_quality(test: RateQualityCurve, anchor: RateQualityCurve) -> float:
    """Average quality difference of `test` against `anchor` at equal rate"""
    _check_pair(test, anchor)
    test_log, anchor_log = np.log10(test.rates), np.log10(anchor.rates)
    low = max(test_log.min(), anchor_log.min())
    high = min(test_log.max(), anchor_log.max())
    if not high > low:
        raise MetricsError('no-overlap', "rate ranges of the two curves do not overlap")
    test_interp = PchipInterpolator(test_log, test.qualities)
    anchor_interp = PchipInterpolator(anchor_log, anchor.qualities)
    return _mean_over(test_interp, low, high) - _mean_over(anchor_interp, low, high)


def load_rd_csv(path: str) -> List[RateQualityCurve]:
    """Read an RD CSV and group rows into curves keyed by (codec, sequence, metric)"""
    try:
        df = pd.read_csv(os.path.expanduser(path), float_precision='round_trip',
                         dtype={'codec': str, 'sequence': str, 'metric': str})
    except FileNotFoundError as e:
        raise MetricsError('io-failure', f"RD file not found: {path}") from e
    except (pd.errors.ParserError, pd.errors.EmptyDataError, ValueError) as e:
        raise MetricsError('malformed-row', f"{path}: cannot parse CSV: {e}") from e

    missing = [c for c in RD_COLUMNS if c not in df.columns]
    if missing:
        raise MetricsError('malformed-header', f"{path}: missing columns {missing}")
    for column in ('qp', 'rate_bps', 'quality') + tuple(c for c in TIMING_COLUMNS if c in df.columns):
        numeric = pd.to_numeric(df[column], errors='coerce')
        required = column not in TIMING_COLUMNS
        bad = numeric.isna() & (df[column].notna() | required)
        if bad.any():
            row = int(bad.idxmax()) + 2
            raise MetricsError('malformed-row', f"{path}: row {row} has a non-numeric {column}")
        df[column] = numeric
    if df[['codec', 'sequence', 'metric']].isna().any().any():
        row = int(df[['codec', 'sequence', 'metric']].isna().any(axis=1).idxmax()) + 2
        raise MetricsError('malformed-row', f"{path}: row {row} is missing codec, sequence or metric")
    if (df['qp'] != df['qp'].round()).any():
        raise MetricsError('malformed-row', f"{path}: qp values must be integers")

    duplicated = df.duplicated(subset=['codec', 'sequence', 'metric', 'qp'])
    if duplicated.any():
        row = df[duplicated].iloc[0]
        raise MetricsError('duplicate-point', f"{path}: duplicate point {row['codec']}/{row['sequence']}/"
                                              f"{row['metric']} qp={int(row['qp'])}")

    curves = []
    for (codec, sequence, metric), group in df.groupby(['codec', 'sequence', 'metric'], sort=False):
        points = []
        for _, row in group.iterrows():
            timing = {c: (None if c not in group.columns or pd.isna(row[c]) else float(row[c])) for c in TIMING_COLUMNS}
            points.append(RateQualityPoint(float(row['rate_bps']), float(row['quality']), metric,
                                           int(row['qp']), **timing))
        curves.append(RateQualityCurve(tuple(points), metric, codec, sequence))
    logger.info(f"📋 Loaded {len(curves)} curves ({len(df)} points) from {path}")
    return curves


def curves_to_frame(curves: Sequence[RateQualityCurve]) -> pd.DataFrame:
    rows = []
    for curve in curves:
        for p in curve.points:
            rows.append({'codec': curve.codec, 'sequence': curve.sequence, 'metric': curve.metric_id,
                         'qp': p.qp, 'rate_bps': p.rate, 'quality': p.quality,
                         'encode_seconds': p.encode_seconds, 'decode_seconds': p.decode_seconds})
    df = pd.DataFrame(rows, columns=RD_COLUMNS + TIMING_COLUMNS)
    return df.dropna(axis=1, how='all')


def write_rd_csv(curves: Sequence[RateQualityCurve], path: str) -> None:
    if not curves:
        raise MetricsError('empty-curve', f"no curves to write to {path}")
    if any(p.qp is None for curve in curves for p in curve.points):
        raise MetricsError('missing-qp', "every point written to an RD CSV needs a qp")
    df = curves_to_frame(curves)
    df['qp'] = df['qp'].astype(int)
    df.to_csv(os.path.expanduser(path), index=False)
    logger.info(f"💾 Wrote {len(df)} RD points to {path}")


@dataclass
class BdReport:
    rows: pd.DataFrame

    def to_text(self) -> str:
        return self.rows.to_string(index=False, float_format=lambda v: f"{v:.2f}")

    def to_csv(self, path: str) -> None:
        self.rows.to_csv(os.path.expanduser(path), index=False)


def bd_report(test_curves: Sequence[RateQualityCurve], anchor_curves: Sequence[RateQualityCurve]) -> BdReport:
    """Per-sequence BD-rate / BD-quality plus an overall mean row

    Curves are matched on (sequence, metric). When both sides carry
    timings the encoder/decoder complexity ratios (test / anchor, %) are
    added.
    """
    anchors: Dict[Tuple[str, str], RateQualityCurve] = {(c.sequence, c.metric_id): c for c in anchor_curves}
    tests: Dict[Tuple[str, str], RateQualityCurve] = {(c.sequence, c.metric_id): c for c in test_curves}
    if not set(tests) & set(anchors):
        raise MetricsError('no-matching-curves', "no test curve has a matching anchor curve")
    missing_anchor = sorted(set(tests) - set(anchors))
    missing_test = sorted(set(anchors) - set(tests))
    if missing_anchor or missing_test:
        parts = []
        if missing_anchor:
            parts.append("no anchor for " + ", ".join(f"{s}/{m}" for s, m in missing_anchor))
        if missing_test:
            parts.append("no test for " + ", ".join(f"{s}/{m}" for s, m in missing_test))
        raise MetricsError('unmatched-curves', "; ".join(parts))
    rows = []
    for key, test in tests.items():
        anchor = anchors[key]
        row = {'sequence': test.sequence, 'metric': test.metric_id,
               'bd_rate_pct': bd_rate(test, anchor), 'bd_quality': bd_quality(test, anchor)}
        for column, label in (('encode_seconds', 'enc_time_pct'), ('decode_seconds', 'dec_time_pct')):
            t, a = test.total_seconds(column), anchor.total_seconds(column)
            if t is not None and a:
                row[label] = 100.0 * t / a
        rows.append(row)
    df = pd.DataFrame(rows)
    numeric = df.select_dtypes('number').columns
    for metric, group in df.groupby('metric', sort=False):
        overall = {'sequence': 'Overall', 'metric': metric}
        overall.update(group[numeric].mean().to_dict())
        df = pd.concat([df, pd.DataFrame([overall])], ignore_index=True)
    return BdReport(df)
