"""Parameter estimation from measured width profiles, and calibration patterns.

Two prints are used. The extrusion pattern has four straight lines: two at
constant ratios (steady widths, hence alpha) and two stepping between them
(time constants). The corner pattern has four isolated right-angle corners
printed at a constant ratio; the width blow-up before each apex gives the
transient distance of the motion planner.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize

from .corners import CornerModel
from .dynamics import ExtrusionModel, WidthProfile
from .gcode import GMove, Passthrough, ToolPath

MIN_SAMPLES = 10
ANNOTATION_PREFIX = "; extruflow:"
MODEL_KEYS = ("alpha", "tau_expand", "tau_shrink", "xi_low", "xi_high", "v_const", "decel", "provenance")


class InsufficientDataError(ValueError):
    pass


class FitQualityError(RuntimeError):
    def __init__(self, message: str, residual: float = math.nan):
        super().__init__(f"{message} (residual rmse {residual:.4g} mm)")
        self.residual = residual


class DetectionError(ValueError):
    pass


class DataQualityError(ValueError):
    pass


@dataclass
class StepFitResult:
    tau: float
    w_minus: float
    w_plus: float
    residual_rmse: float
    transition_x: float = 0.0
    tau_continuous: float | None = None


@dataclass
class CornerFitResult:
    v_hat: float
    a_hat: float
    residual_rmse: float
    per_corner_params: list[tuple[float, float]] = field(default_factory=list)
    d_tr: float = 0.0
    unanchored: tuple[float, float] | None = None

    @property
    def model(self) -> CornerModel:
        return CornerModel(self.v_hat, self.a_hat)


# steady widths and alpha


def estimate_constant_width(samples) -> tuple[float, float]:
    """Gaussian maximum-likelihood mean and standard deviation."""
    w = np.asarray(samples, dtype=float).ravel()
    if len(w) < MIN_SAMPLES:
        raise InsufficientDataError(f"need at least {MIN_SAMPLES} width samples, got {len(w)}")
    if not np.all(np.isfinite(w)):
        raise DataQualityError("width samples contain non-finite values")
    return float(np.mean(w)), float(np.std(w))


def estimate_alpha(w_low: float, w_high: float, xi_low: float, xi_high: float) -> float:
    if not (xi_low > 0 and xi_high > 0):
        raise ValueError("extrusion ratios must be positive")
    return 0.5 * (w_high / xi_high + w_low / xi_low)


# time constants


def _step_sse(tau, x, w, w_minus, w_plus):
    model = w_minus + (w_plus - w_minus) * (1.0 - np.exp(-x / tau))
    return float(np.sum((w - model) ** 2))


def fit_time_constant(profile: WidthProfile, w_minus: float, w_plus: float, transition_x: float,
                      discrete_step: float | None = None) -> StepFitResult:
    """Fit tau of w = W- + (W+ - W-)(1 - exp(-x/tau)) with the levels held fixed.

    Only samples at or after `transition_x` are used, re-origined there. With
    `discrete_step` the continuous estimate is converted to the constant of
    the explicit one-step recursion with that step, which is what the
    controller uses: tau_d = ds / (1 - exp(-ds / tau_c)).
    """
    if w_minus == w_plus:
        raise ValueError("step levels must differ")
    keep = profile.x >= transition_x - 1e-9
    x = profile.x[keep] - transition_x
    w = profile.w[keep]
    if len(x) < MIN_SAMPLES:
        raise InsufficientDataError(f"only {len(x)} samples after the transition")
    spacing = float(np.median(np.diff(x))) if len(x) > 1 else 0.1
    span = float(x[-1] - x[0])
    lo, hi = spacing, 10.0 * max(span, spacing)
    grid = np.geomspace(lo, hi, 200)
    sse = np.array([_step_sse(t, x, w, w_minus, w_plus) for t in grid])
    i = int(np.argmin(sse))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    res = optimize.minimize_scalar(_step_sse, bounds=(a, b), args=(x, w, w_minus, w_plus),
                                   method="bounded", options={"xatol": 1e-10 * hi})
    tau = float(res.x)
    rms = math.sqrt(float(res.fun) / len(x))
    if not res.success:
        raise FitQualityError("time-constant fit did not converge", rms)
    if tau <= lo * 1.001 or tau >= hi * 0.999:
        raise FitQualityError(f"time constant pinned at the search bound ({tau:.4g} mm)", rms)
    tau_c = tau
    if discrete_step is not None:
        tau = discrete_step / (1.0 - math.exp(-discrete_step / tau_c))
    return StepFitResult(tau, w_minus, w_plus, rms, transition_x, tau_c)


def detect_step_transition(profile: WidthProfile, w_minus: float, w_plus: float,
                           sigma: float | None = None, designed_x: float | None = None,
                           baseline_fraction: float = 0.25) -> float:
    """Locate the start of a single step between two width levels.

    The first sample departing by more than 3 sigma from W- toward W+ gives a
    coarse location, which is then refined by a least-squares change-point
    search (exponential after the change, flat before) over the preceding
    samples. Without a noise estimate the designed location is returned.
    """
    x, w = profile.x, profile.w
    if sigma is None:
        n0 = max(int(baseline_fraction * len(w)), 2)
        sigma = float(np.std(w[:n0])) if n0 >= MIN_SAMPLES else None
    if sigma is None:
        if designed_x is None:
            raise DetectionError("no noise estimate and no designed transition location")
        return float(designed_x)
    direction = math.copysign(1.0, w_plus - w_minus)
    tol = max(3.0 * sigma, 1e-6 * abs(w_plus - w_minus))
    moved = direction * (w - w_minus) > tol
    # require the departure to persist so single outliers do not trigger it
    persist = np.convolve(moved.astype(int), np.ones(3, dtype=int), mode="full")[2:] == 3
    hits = np.nonzero(persist)[0]
    if len(hits) == 0:
        raise DetectionError("no departure from the initial width level found")
    j = int(hits[0])
    best_x, best = float(x[j]), math.inf
    for i in range(max(0, j - 200), j + 1):
        x0 = x[i]
        pre = w[:i + 1] - w_minus
        after = x >= x0
        xs, ws = x[after] - x0, w[after]
        fit = optimize.minimize_scalar(_step_sse, bounds=(max(xs[1] if len(xs) > 1 else 0.1, 1e-3), 1e4),
                                       args=(xs, ws, w_minus, w_plus), method="bounded")
        sse = float(fit.fun) + float(np.sum(pre[:-1] ** 2))
        if sse < best:
            best, best_x = sse, float(x0)
    return best_x


# corners


def _corner_model(u, v, a, w_nominal):
    """Corner width as a function of distance u back from the apex: w_n * max(1, v / sqrt(2 a u))."""
    u = np.maximum(u, 1e-12)
    return w_nominal * np.maximum(1.0, v / np.sqrt(2.0 * a * u))


def segment_corner_profile(profile: WidthProfile, w_nominal: float,
                           plateau_fraction: float = 0.25) -> tuple[np.ndarray, np.ndarray, float]:
    """Normalize a decel-zone profile ending at its apex.

    Returns (u, w_scaled, plateau) where u is the distance back from the
    apex and the pre-deceleration plateau (median of the first quarter) has
    been scaled to `w_nominal`.
    """
    x, w = profile.x, profile.w
    if len(x) < MIN_SAMPLES:
        raise InsufficientDataError("corner profile too short")
    n0 = max(int(plateau_fraction * len(w)), 1)
    plateau = float(np.median(w[:n0]))
    if not plateau > 0:
        raise DataQualityError("pre-deceleration plateau is not positive")
    ws = w * (w_nominal / plateau)
    # the width must grow toward the apex: compare quarter means
    quarters = np.array_split(ws, 4)
    means = np.array([q.mean() for q in quarters])
    if not means[-1] > means[0]:
        raise DataQualityError("corner profile does not increase toward the apex")
    u = x[-1] - x
    apex_gap = np.median(np.diff(x))
    return u + 0.5 * apex_gap, ws, plateau


def _fit_d_tr(u_list, w_list, w_nominal):
    u = np.concatenate(u_list)
    w = np.concatenate(w_list)
    grid_v = np.geomspace(10.0, 200.0, 5)
    grid_a = np.geomspace(50.0, 5000.0, 5)

    def resid(p):
        lv, la = np.clip(p, -30.0, 30.0)
        return _corner_model(u, math.exp(lv), math.exp(la), w_nominal) - w

    best = None
    for v0 in grid_v:
        for a0 in grid_a:
            r = optimize.least_squares(resid, [math.log(v0), math.log(a0)], method="lm", xtol=1e-12,
                                       ftol=1e-12, max_nfev=2000)
            if best is None or r.cost < best.cost:
                best = r
    lv, la = np.clip(best.x, -30.0, 30.0)
    v, a = math.exp(lv), math.exp(la)
    return v, a, math.sqrt(2.0 * best.cost / len(u))


def fit_corner_params(profiles, w_nominal: float, v_hint: float | None = None) -> CornerFitResult:
    """Joint fit of the braking-zone width law to several corners.

    Each profile runs along one leg and ends at its corner apex. The law
    depends on (v, a) only through d_tr = v^2 / 2a, so the joint fit pins
    d_tr sharply while (v, a) slide along a valley. With `v_hint` (the
    commanded cruise speed in mm/s) the estimate is placed on that valley at
    v = v_hint; the unanchored least-squares point is kept in `unanchored`.
    """
    if not w_nominal > 0:
        raise ValueError("nominal width must be positive")
    if len(profiles) == 0:
        raise InsufficientDataError("no corner profiles")
    segs = [segment_corner_profile(p, w_nominal) for p in profiles]
    u_list = [s[0] for s in segs]
    w_list = [s[1] for s in segs]
    per = []
    for u, w in zip(u_list, w_list):
        v_i, a_i, _ = _fit_d_tr([u], [w], w_nominal)
        per.append((v_i, a_i))
    v, a, rms = _fit_d_tr(u_list, w_list, w_nominal)
    d_tr = v * v / (2.0 * a)
    unanchored = (v, a)
    if v_hint is not None:
        if not v_hint > 0:
            raise ValueError("speed hint must be positive")
        v, a = float(v_hint), v_hint**2 / (2.0 * d_tr)
    return CornerFitResult(v, a, rms, per, d_tr, unanchored)


# calibration patterns


@dataclass
class PatternGeometry:
    length: float = 40.0
    spacing: float = 5.0
    origin: tuple[float, float] = (20.0, 20.0)
    z: float = 0.2
    margin: float = 5.0  # measurement regions keep this far from line ends
    step_at: float = 0.5  # fraction of the line where step lines switch ratio

    def __post_init__(self):
        if not (self.length > 0 and self.spacing > 0 and self.z > 0):
            raise ValueError("pattern length, spacing and layer height must be positive")
        if not 2 * self.margin < self.length:
            raise ValueError("margins leave no measurement region")
        if not 0 < self.step_at < 1:
            raise ValueError("step location must be inside the line")


@dataclass
class LineAnnotation:
    index: int
    kind: str  # constant | step | corner
    xi: tuple[float, ...]
    measure: tuple[float, float]
    transition: float | None = None
    apex: float | None = None

    def to_comment(self) -> str:
        parts = [f"line={self.index}", f"kind={self.kind}", "xi=" + ",".join(f"{v:.5f}" for v in self.xi),
                 f"measure={self.measure[0]:.3f},{self.measure[1]:.3f}"]
        if self.transition is not None:
            parts.append(f"transition={self.transition:.3f}")
        if self.apex is not None:
            parts.append(f"apex={self.apex:.3f}")
        return ANNOTATION_PREFIX + " " + " ".join(parts)


_ANN_RE = re.compile(r"(\w+)=([^\s]+)")


def parse_annotations(path: ToolPath) -> list[LineAnnotation]:
    out = []
    for p in path.passthrough:
        if not p.text.startswith(ANNOTATION_PREFIX):
            continue
        kv = dict(_ANN_RE.findall(p.text[len(ANNOTATION_PREFIX):]))
        m0, m1 = (float(v) for v in kv["measure"].split(","))
        out.append(LineAnnotation(
            int(kv["line"]), kv["kind"], tuple(float(v) for v in kv["xi"].split(",")), (m0, m1),
            float(kv["transition"]) if "transition" in kv else None,
            float(kv["apex"]) if "apex" in kv else None,
        ))
    return out


def _travel(pos, target, feed):
    return GMove(tuple(pos), tuple(target), 0.0, feed)


def generate_extrusion_pattern(xi_low: float, xi_high: float, speed: float,
                               geometry: PatternGeometry | None = None) -> ToolPath:
    """Four parallel lines: constant low, low->high step, constant high, high->low step."""
    g = geometry or PatternGeometry()
    if not 0 < xi_low < xi_high:
        raise ValueError("need 0 < xi_low < xi_high")
    if not speed > 0:
        raise ValueError("speed must be positive")
    travel_feed = max(speed, 6000.0)
    programs = [(xi_low,), (xi_low, xi_high), (xi_high,), (xi_high, xi_low)]
    records: list = [Passthrough(f"; extrusion calibration pattern, xi {xi_low:.5f}-{xi_high:.5f}, "
                                 f"F{speed:.1f}")]
    pos = (0.0, 0.0, g.z)
    records.append(GMove((0.0, 0.0, 0.0), pos, 0.0, travel_feed))
    x0, y0 = g.origin
    for i, prog in enumerate(programs, start=1):
        y = y0 + (i - 1) * g.spacing
        start = (x0, y, g.z)
        records.append(_travel(pos, start, travel_feed))
        if len(prog) == 1:
            ann = LineAnnotation(i, "constant", prog, (g.margin, g.length - g.margin))
            records.append(Passthrough(ann.to_comment()))
            end = (x0 + g.length, y, g.z)
            records.append(GMove(start, end, prog[0] * g.length, float(speed), True))
        else:
            split = g.step_at * g.length
            ann = LineAnnotation(i, "step", prog, (g.margin, g.length - g.margin), transition=split)
            records.append(Passthrough(ann.to_comment()))
            mid = (x0 + split, y, g.z)
            end = (x0 + g.length, y, g.z)
            records.append(GMove(start, mid, prog[0] * split, float(speed), True))
            records.append(GMove(mid, end, prog[1] * (g.length - split), float(speed), True))
        pos = end
    return ToolPath(records, extrusion_mode="relative")


def generate_corner_pattern(zeta_c: float, speed: float, leg: float = 30.0, spacing: float = 10.0,
                            origin: tuple[float, float] = (20.0, 20.0), z: float = 0.2,
                            expected_d_tr: float | None = None) -> ToolPath:
    """Four isolated L-shaped corners printed at a constant ratio."""
    if not zeta_c > 0:
        raise ValueError("ratio must be positive")
    if not (speed > 0 and leg > 0 and spacing > 0):
        raise ValueError("speed, leg and spacing must be positive")
    if expected_d_tr is not None and leg < 4.0 * expected_d_tr:
        raise ValueError(f"legs of {leg} mm are shorter than 4 * d_tr = {4 * expected_d_tr:.3f} mm")
    travel_feed = max(speed, 6000.0)
    records: list = [Passthrough(f"; corner calibration pattern, xi {zeta_c:.5f}, F{speed:.1f}")]
    pos = (0.0, 0.0, z)
    records.append(GMove((0.0, 0.0, 0.0), pos, 0.0, travel_feed))
    x0, y0 = origin
    for i in range(1, 5):
        bx = x0 + (i - 1) * (leg + spacing)
        start = (bx, y0 + leg, z)
        apex = (bx, y0, z)
        end = (bx + leg, y0, z)
        records.append(_travel(pos, start, travel_feed))
        ann = LineAnnotation(i, "corner", (zeta_c,), (0.5 * leg, leg), apex=leg)
        records.append(Passthrough(ann.to_comment()))
        records.append(GMove(start, apex, zeta_c * leg, float(speed), True))
        records.append(GMove(apex, end, zeta_c * leg, float(speed), True))
        pos = end
    return ToolPath(records, extrusion_mode="relative")


# model files


def model_to_dict(ext: ExtrusionModel, corner: CornerModel | None = None, provenance=None) -> dict:
    return {
        "alpha": ext.alpha,
        "tau_expand": ext.tau_expand,
        "tau_shrink": ext.tau_shrink,
        "xi_low": ext.xi_low,
        "xi_high": ext.xi_high,
        "v_const": corner.v_const if corner else None,
        "decel": corner.decel if corner else None,
        "provenance": provenance or {},
    }


def save_model(path, ext: ExtrusionModel, corner: CornerModel | None = None, provenance=None) -> str:
    text = json.dumps(model_to_dict(ext, corner, provenance), indent=2, sort_keys=True) + "\n"
    with open(path, "w") as fh:
        fh.write(text)
    return text


def load_model(path) -> tuple[ExtrusionModel, CornerModel | None, dict]:
    with open(path) as fh:
        data = json.load(fh)
    missing = [k for k in ("alpha", "tau_expand", "tau_shrink", "xi_low", "xi_high") if k not in data]
    if missing:
        raise ValueError(f"model file lacks {', '.join(missing)}")
    ext = ExtrusionModel(float(data["alpha"]), float(data["tau_expand"]), float(data["tau_shrink"]),
                         float(data["xi_low"]), float(data["xi_high"]))
    corner = None
    if data.get("v_const") is not None and data.get("decel") is not None:
        corner = CornerModel(float(data["v_const"]), float(data["decel"]))
    return ext, corner, data.get("provenance", {})


def average_parameters(runs: list[dict]) -> tuple[dict, dict]:
    """Mean and population std of each numeric parameter over repeated runs."""
    if not runs:
        raise InsufficientDataError("no runs to average")
    mean, std = {}, {}
    for key in runs[0]:
        vals = [r[key] for r in runs if isinstance(r.get(key), (int, float)) and r.get(key) is not None]
        if len(vals) == len(runs):
            mean[key] = float(np.mean(vals))
            std[key] = float(np.std(vals))
    return mean, std


@dataclass
class ExtrusionFit:
    alpha: float
    w_low: tuple[float, float]
    w_high: tuple[float, float]
    expand: StepFitResult
    shrink: StepFitResult

    def model(self, xi_low: float, xi_high: float) -> ExtrusionModel:
        return ExtrusionModel(self.alpha, self.expand.tau, self.shrink.tau, xi_low, xi_high)

    def summary(self) -> dict:
        return asdict(self)


def identify_extrusion(profiles: dict[int, WidthProfile], annotations: list[LineAnnotation],
                       discrete_step: float | None = None, detect: bool = False) -> ExtrusionFit:
    """Estimate alpha and both time constants from the four pattern lines.

    `profiles` maps line index to its width profile in line coordinates
    (x from the line start). Measurement windows and the designed step
    location come from the pattern annotations.
    """
    by_kind = {}
    for ann in annotations:
        if ann.index not in profiles:
            raise InsufficientDataError(f"missing profile for pattern line {ann.index}")
        by_kind.setdefault(ann.kind, []).append(ann)
    consts = sorted(by_kind.get("constant", []), key=lambda a: a.xi[0])
    steps = by_kind.get("step", [])
    if len(consts) != 2 or len(steps) != 2:
        raise InsufficientDataError("extrusion pattern needs two constant and two step lines")
    levels = []
    for ann in consts:
        p = profiles[ann.index].window(*ann.measure)
        levels.append(estimate_constant_width(p.w))
    (w_lo, s_lo), (w_hi, s_hi) = levels
    xi_low, xi_high = consts[0].xi[0], consts[1].xi[0]
    alpha = estimate_alpha(w_lo, w_hi, xi_low, xi_high)
    fits = {}
    for ann in steps:
        a_from, a_to = ann.xi
        w_minus, w_plus = alpha * a_from, alpha * a_to
        p = profiles[ann.index].window(*ann.measure)
        x_tr = ann.transition
        if detect:
            sigma = s_lo if a_from == xi_low else s_hi
            x_tr = detect_step_transition(p, w_minus, w_plus, sigma=sigma, designed_x=ann.transition)
        fit = fit_time_constant(p, w_minus, w_plus, x_tr, discrete_step)
        fits["expand" if a_to > a_from else "shrink"] = fit
    if set(fits) != {"expand", "shrink"}:
        raise InsufficientDataError("need one rising and one falling step line")
    return ExtrusionFit(alpha, (w_lo, s_lo), (w_hi, s_hi), fits["expand"], fits["shrink"])
