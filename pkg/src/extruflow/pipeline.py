"""Whole-file workflows: optimize a toolpath, simulate it, measure patterns virtually."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .control import solve_chain
from .corners import CornerModel, build_reference
from .dynamics import ControlSequence, ExtrusionModel, WidthProfile, simulate_corner_plant, simulate_plant
from .gcode import GMove, Passthrough, ToolPath, fmt, format_toolpath, header_lines, quantize_extrusion
from .path import DEFAULT_CORNER_ANGLE, DiscretizedPath, discretize_region, print_regions
from .sysid import parse_annotations

log = logging.getLogger(__name__)

# finer than slicer output so the file's total E matches the optimal controls to 5e-8 mm
OPTIMIZED_E_DECIMALS = 7


class ConfigError(ValueError):
    pass


class MissingCornerModelError(ValueError):
    pass


@dataclass
class ProjectConfig:
    target_speed: float = 3600.0  # mm/min
    xi_low: float = 0.03
    xi_high: float = 0.05
    w_nominal: float = 0.5  # target bead width for the corner pattern
    step: float = 0.1
    bounds: tuple[float, float] | None = None  # None: [xi_low, xi_high]
    corner_angle: float = DEFAULT_CORNER_ANGLE
    plant_order: str = "post"
    noise_std: float = 0.02
    vision: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("target_speed", "xi_low", "xi_high", "w_nominal", "step"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and v > 0 and math.isfinite(v)):
                raise ConfigError(f"{name} must be a positive number, got {v!r}")
        if not self.xi_low < self.xi_high:
            raise ConfigError("xi_low must be below xi_high")
        if self.bounds is not None:
            lo, hi = (float(b) for b in self.bounds)
            if not lo < hi:
                raise ConfigError(f"control bounds {self.bounds} are inconsistent")
            self.bounds = (lo, hi)
        if not 0 < self.corner_angle < 180:
            raise ConfigError("corner_angle must lie in (0, 180)")
        if self.plant_order not in ("post", "pre"):
            raise ConfigError("plant_order must be 'post' or 'pre'")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")

    @property
    def control_bounds(self) -> tuple[float, float]:
        return self.bounds if self.bounds is not None else (self.xi_low, self.xi_high)

    @property
    def speed_mm_s(self) -> float:
        return self.target_speed / 60.0

    @classmethod
    def from_dict(cls, data: dict) -> "ProjectConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        data = dict(data)
        if data.get("bounds") is not None:
            data["bounds"] = tuple(data["bounds"])
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ProjectConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bounds"] = list(self.bounds) if self.bounds is not None else None
        return d


def _primed_width(ext: ExtrusionModel, dp: DiscretizedPath) -> float:
    """Start width of a region: steady state for its first commanded ratio."""
    return max(0.0, ext.alpha * float(dp.source_ratio[0]))


def _span_trim_mask(dp: DiscretizedPath, half_width: np.ndarray) -> np.ndarray:
    """True for segments whose midpoint lies within half a bead of a span end."""
    mask = np.zeros(dp.n_segments, dtype=bool)
    for span in dp.line_spans:
        seg = dp.segment_lengths[span.start:span.end]
        edges = np.concatenate([[0.0], np.cumsum(seg)])
        mid = 0.5 * (edges[:-1] + edges[1:])
        h = half_width[span.start:span.end]
        mask[span.start:span.end] = (mid <= h) | (mid > span.length - h)
    return mask


def _regions(toolpath: ToolPath, config: ProjectConfig, keep_empty: bool = False) -> list[tuple]:
    out = []
    for region in print_regions(toolpath, keep_empty):
        out.append((region, discretize_region(region, config.step, config.corner_angle)))
    return out


# optimization


@dataclass
class LineReport:
    region: int
    span: int
    segments: int
    length: float
    predicted_rmse: float
    kkt_residual: float


@dataclass
class OptimizeReport:
    regions: int = 0
    segments: int = 0
    lines: list[LineReport] = field(default_factory=list)
    e_input: float = 0.0
    e_output: float = 0.0
    e_optimal: float = 0.0  # sum of xi* ds over all segments before rounding
    warnings: list[str] = field(default_factory=list)

    @property
    def e_delta(self) -> float:
        return self.e_output - self.e_input

    def to_dict(self) -> dict:
        return {
            "regions": self.regions,
            "segments": self.segments,
            "e_input_mm": round(self.e_input, 6),
            "e_output_mm": round(self.e_output, 6),
            "e_delta_mm": round(self.e_delta, 6),
            "e_optimal_mm": round(self.e_optimal, 9),
            "lines": [{k: (round(v, 9) if isinstance(v, float) else v) for k, v in asdict(ln).items()}
                      for ln in self.lines],
            "warnings": list(self.warnings),
        }

    def to_text(self) -> str:
        out = [f"regions: {self.regions}", f"segments: {self.segments}",
               f"extrusion in: {self.e_input:.5f} mm  out: {self.e_output:.5f} mm  "
               f"delta: {self.e_delta:+.5f} mm", "region span  length_mm  predicted_rmse_mm"]
        for ln in self.lines:
            out.append(f"{ln.region:6d} {ln.span:4d} {ln.length:10.3f} {ln.predicted_rmse:18.6f}")
        out += [f"warning: {w}" for w in self.warnings]
        return "\n".join(out) + "\n"


def optimize_region(dp: DiscretizedPath, ext: ExtrusionModel, corner: CornerModel | None,
                    config: ProjectConfig) -> tuple[np.ndarray, list]:
    """Optimal ratio per segment for one connected print region."""
    nominal = ext.alpha * dp.source_ratio
    reference = build_reference(dp, corner, nominal).target
    refs = [reference[s.start:s.end] for s in dp.line_spans]
    lens = [dp.segment_lengths[s.start:s.end] for s in dp.line_spans]
    sols = solve_chain(refs, ext, config.control_bounds, _primed_width(ext, dp), config.step, lens)
    return np.concatenate([s.xi for s in sols]), sols


def optimize_toolpath(toolpath: ToolPath, ext: ExtrusionModel, corner: CornerModel | None,
                      config: ProjectConfig) -> tuple[str, OptimizeReport]:
    """Rewrite every print region with optimized per-segment extrusion.

    Travel moves, retractions outside regions and all passthrough lines are
    kept in order; each source print move is replaced by its segments.
    """
    report = OptimizeReport(e_input=toolpath.total_extrusion())
    if toolpath.is_optimized():
        report.warnings.append("input is already optimized; compensating twice distorts the widths")
        log.warning(report.warnings[-1])
    regions = _regions(toolpath, config)
    lo, hi = config.control_bounds
    replaced: dict[int, list[GMove]] = {}
    drop: set[int] = set()
    for r_i, (region, dp) in enumerate(regions):
        if dp.interior_corners() and corner is None:
            raise MissingCornerModelError(
                f"region {r_i} has {len(dp.interior_corners())} corners but the model has no corner "
                "parameters; print and measure the corner pattern, then re-run identify")
        for w in dp.warnings:
            report.warnings.append(f"region {r_i}: {w}")
        ratios = dp.source_ratio
        if np.any((ratios < lo) | (ratios > hi)):
            report.warnings.append(f"region {r_i}: source ratio outside control bounds [{lo:g}, {hi:g}]")
        xi, sols = optimize_region(dp, ext, corner, config)
        report.e_optimal += float(np.sum(xi * dp.segment_lengths))
        e = quantize_extrusion(xi * dp.segment_lengths, OPTIMIZED_E_DECIMALS)
        for s_i, sol in enumerate(sols):
            span = dp.line_spans[s_i]
            report.lines.append(LineReport(r_i, s_i, span.end - span.start, span.length, sol.rmse,
                                           sol.kkt_residual))
        report.regions += 1
        report.segments += dp.n_segments
        pts = dp.points
        for k, src in enumerate(dp.segment_source):
            rec_idx = region.record_indices[src]
            mv = region.moves[src]
            seg = GMove(tuple(float(c) for c in pts[k]), tuple(float(c) for c in pts[k + 1]),
                        float(e[k]), mv.feedrate, True, None)
            replaced.setdefault(rec_idx, []).append(seg)
        drop.update(region.record_indices)
    records: list = [Passthrough(t) for t in header_lines({
        "step_mm": config.step, "bounds": f"{fmt(lo)},{fmt(hi)}", "alpha": ext.alpha,
        "tau_expand": ext.tau_expand, "tau_shrink": ext.tau_shrink,
        "v_const": corner.v_const if corner else "none", "decel": corner.decel if corner else "none"})]
    for i, rec in enumerate(toolpath.records):
        if i in replaced:
            records.extend(replaced[i])
        elif i not in drop:
            records.append(rec)
    out = ToolPath(records, extrusion_mode=toolpath.extrusion_mode)
    report.e_output = out.total_extrusion()
    text = format_toolpath(out, toolpath.extrusion_mode, OPTIMIZED_E_DECIMALS)
    if "nan" in text.lower() or "inf" in text.lower():
        raise ValueError("optimized output contains non-finite values")
    return text, report


# simulation


@dataclass
class RegionSimulation:
    profile: WidthProfile
    target: np.ndarray  # intended width per segment
    included: np.ndarray  # segments outside the end trims
    window: np.ndarray  # segments inside a corner window


@dataclass
class SimulationReport:
    regions: list[RegionSimulation] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def _stack(self):
        w = np.concatenate([r.profile.w[1:] for r in self.regions]) if self.regions else np.empty(0)
        t = np.concatenate([r.target for r in self.regions]) if self.regions else np.empty(0)
        inc = np.concatenate([r.included for r in self.regions]) if self.regions else np.empty(0, bool)
        win = np.concatenate([r.window for r in self.regions]) if self.regions else np.empty(0, bool)
        return w, t, inc, win

    def metrics(self) -> dict:
        w, t, inc, win = self._stack()
        out = {"regions": len(self.regions), "samples": int(np.sum(inc))}
        if np.any(inc):
            err = w[inc] - t[inc]
            out["tracking_rmse_mm"] = math.sqrt(float(np.mean(err**2)))
            out["max_error_mm"] = float(np.max(np.abs(err)))
        else:
            out["tracking_rmse_mm"] = out["max_error_mm"] = 0.0
        sel = win & inc
        if np.any(sel):
            out["corner_max_error_mm"] = float(np.max(np.abs(w[sel] - t[sel])))
            out["corner_variance_mm2"] = float(np.var(w[sel]))
            out["corner_samples"] = int(np.sum(sel))
        else:
            out["corner_max_error_mm"] = out["corner_variance_mm2"] = None
            out["corner_samples"] = 0
        return out


def simulate_toolpath(toolpath: ToolPath, ext: ExtrusionModel, corner: CornerModel | None,
                      config: ProjectConfig, target: ToolPath | None = None) -> SimulationReport:
    """Plant response of every print region plus width-defect metrics.

    The intended width of each segment is alpha times the ratio commanded in
    `target` (the file itself when omitted); pass the source file as
    target when simulating its optimized rewrite. Corner windows span d_tr
    either side of each interior corner, minus half a bead at the apex.
    """
    report = SimulationReport()
    runs = _regions(toolpath, config, keep_empty=True)
    if target is None:
        goals = runs
        if toolpath.is_optimized():
            report.warnings.append("simulating an optimized file against its own ratios; "
                                   "pass the source file as target for meaningful errors")
    else:
        goals = _regions(target, config, keep_empty=True)
        if len(goals) != len(runs):
            raise ValueError(f"target has {len(goals)} print regions, file has {len(runs)}")
    for (region, dp), (_, gp) in zip(runs, goals):
        if gp.n_segments != dp.n_segments or not np.allclose(gp.segment_lengths, dp.segment_lengths,
                                                             atol=1e-6):
            raise ValueError("target geometry does not match the simulated file")
        controls = ControlSequence(dp.source_ratio, config.step, dp.segment_lengths)
        w0 = _primed_width(ext, gp)
        if corner is not None:
            prof = simulate_corner_plant(ext, corner, controls, dp, w0, config.plant_order)
        else:
            if dp.interior_corners():
                report.warnings.append("no corner parameters: head speed assumed constant through corners")
            prof = simulate_plant(ext, controls, w0)
        goal = ext.alpha * gp.source_ratio
        included = ~_span_trim_mask(dp, 0.5 * goal)
        window = np.zeros(dp.n_segments, dtype=bool)
        if corner is not None:
            mid = dp.midpoints
            s = dp.arc_length
            for c in dp.interior_corners():
                d = np.abs(mid - s[c])
                window |= d <= corner.d_tr
        report.regions.append(RegionSimulation(prof, goal, included, window))
    return report


# virtual measurement of calibration prints


def measure_pattern(toolpath: ToolPath, ext: ExtrusionModel, corner: CornerModel | None,
                    config: ProjectConfig, seed: int = 0) -> dict[int, WidthProfile]:
    """Noisy width profiles of each annotated pattern line, in line coordinates.

    Extrusion-pattern lines go through the lag plant only; corner lines use
    the corner plant when a corner model is given.
    """
    anns = parse_annotations(toolpath)
    if not anns:
        raise ValueError("file carries no pattern annotations")
    runs = _regions(toolpath, config)
    if len(runs) != len(anns):
        raise ValueError(f"{len(anns)} annotated lines but {len(runs)} print regions")
    rng = np.random.default_rng(seed)
    out = {}
    for ann, (_, dp) in zip(anns, runs):
        controls = ControlSequence(dp.source_ratio, config.step, dp.segment_lengths)
        w0 = _primed_width(ext, dp)
        if ann.kind == "corner" and corner is not None:
            prof = simulate_corner_plant(ext, corner, controls, dp, w0, config.plant_order)
        else:
            prof = simulate_plant(ext, controls, w0)
        noisy = np.clip(prof.w + rng.normal(0.0, config.noise_std, len(prof.w)), 0.0, None)
        out[ann.index] = WidthProfile(prof.x, noisy)
    return out


# identification from measured profiles


@dataclass
class IdentifyResult:
    extrusion: ExtrusionModel
    corner: CornerModel | None
    provenance: dict

    def to_text(self) -> str:
        p = self.provenance
        out = []
        for key in ("alpha", "tau_expand", "tau_shrink", "v_const", "decel"):
            if key in p.get("mean", {}):
                out.append(f"{key}: {p['mean'][key]:.4f} +/- {p['std'][key]:.4f}")
        if "d_tr" in p:
            out.append(f"d_tr: {p['d_tr']:.4f} mm")
        out += [f"warning: {w}" for w in p.get("warnings", [])]
        return "\n".join(out) + "\n"


def identify(extrusion_runs: list[dict[int, WidthProfile]], extrusion_pattern: ToolPath,
             config: ProjectConfig, corner_runs: list[dict[int, WidthProfile]] | None = None,
             corner_pattern: ToolPath | None = None) -> IdentifyResult:
    """Fit the extrusion model (and optionally the corner model) from pattern profiles.

    Each run maps pattern line index to its profile. Several runs are
    identified separately and averaged; the spread is kept in provenance.
    """
    from .sysid import average_parameters, fit_corner_params, identify_extrusion

    anns = parse_annotations(extrusion_pattern)
    if not anns:
        raise ValueError("extrusion pattern carries no line annotations")
    if not extrusion_runs:
        raise ValueError("no extrusion profiles given")
    warnings: list[str] = []
    runs = []
    for profiles in extrusion_runs:
        fit = identify_extrusion(profiles, anns, discrete_step=config.step)
        runs.append({"alpha": fit.alpha, "tau_expand": fit.expand.tau, "tau_shrink": fit.shrink.tau})
    xi_lo = min(a.xi[0] for a in anns if a.kind == "constant")
    xi_hi = max(a.xi[0] for a in anns if a.kind == "constant")
    mean, std = average_parameters(runs)
    ext = ExtrusionModel(mean["alpha"], mean["tau_expand"], mean["tau_shrink"], xi_lo, xi_hi)
    corner = None
    prov = {"runs": len(runs), "mean": mean, "std": std, "xi_low": xi_lo, "xi_high": xi_hi}
    if corner_runs:
        if corner_pattern is None:
            raise ValueError("corner profiles need the corner pattern file for their annotations")
        canns = [a for a in parse_annotations(corner_pattern) if a.kind == "corner"]
        if not canns:
            raise ValueError("corner pattern carries no corner annotations")
        w_nom = ext.alpha * canns[0].xi[0]
        feeds = [m.feedrate for m in corner_pattern.moves if m.kind == "print" and m.feedrate]
        v_cmd = (max(feeds) if feeds else config.target_speed) / 60.0
        tol = 0.5 * config.step  # arc-length sums may land a hair past the apex
        cruns = []
        for i, profiles in enumerate(corner_runs):
            missing = [a.index for a in canns if a.index not in profiles]
            if missing:
                raise ValueError(f"corner run {i}: missing profiles for lines {missing}")
            cut = [profiles[a.index].window(a.measure[0], a.apex + tol) for a in canns]
            fit = fit_corner_params(cut, w_nom, v_hint=v_cmd)
            cruns.append({"v_const": fit.v_hat, "decel": fit.a_hat, "d_tr": fit.d_tr})
            u_v, u_a = fit.unanchored
            warnings.append(f"corner run {i}: speed and deceleration are only jointly identifiable "
                            f"through d_tr; unanchored fit v={u_v:.4g} mm/s, a={u_a:.4g} mm/s^2, "
                            f"reported values use the commanded {v_cmd:.4g} mm/s")
        cmean, cstd = average_parameters(cruns)
        mean.update(cmean)
        std.update(cstd)
        corner = CornerModel(cmean["v_const"], cmean["decel"])
        prov["corner_runs"] = len(cruns)
        prov["d_tr"] = corner.d_tr
    prov["warnings"] = warnings
    return IdentifyResult(ext, corner, prov)
