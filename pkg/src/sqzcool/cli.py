"""Scenario-driven command line front end.

A scenario is a single YAML file describing a mechanical mode, one or two
optical probes, a feedback configuration and a list of requested artifacts.
The CLI validates it, runs the requested predictions, simulations, spectral
analyses and fits, and writes plot-ready CSV tables plus a manifest with
checksums.  Reruns with identical inputs and seed produce byte-identical
artifacts.

Units at the config boundary are Hz, seconds, kelvin, kilograms and dB;
they are converted once on load.  See the README for the schema.
"""

from __future__ import annotations

import argparse
import hashlib
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__, model
from .model import MechanicalMode, ProbeState
from .simulate import (FEEDBACK_MODES, FeedbackConfig, LoopUnstableError,
                       SimConfig, Trajectory, imprecision_floor,
                       thermal_force_psd, run)
from . import dsp, specfit

SCHEMA_VERSION = 1
OUTPUT_KINDS = ("predict", "simulate", "psd", "lockin", "fit", "sweep_table")
_REQUIRES = {"psd": "simulate", "lockin": "simulate", "fit": "psd"}

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INVALID = 2
EXIT_UNSTABLE = 3


class ScenarioError(ValueError):
    """Scenario failed schema or physics validation."""

    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


@dataclass
class Scenario:
    """Validated, unit-converted scenario contents."""

    name: str
    mode: MechanicalMode
    probes: dict[str, ProbeState]
    feedback: FeedbackConfig
    sim: dict
    sweep: dict
    analysis: dict
    outputs: list[str]
    source_path: str = ""


def _get(d, key, default=None):
    v = d.get(key, default)
    return default if v is None else v


def _build_mode(cfg: dict, errs: list[str]) -> MechanicalMode | None:
    for key in ("frequency_hz", "linewidth_hz", "mass_kg", "temperature_k"):
        if key not in cfg:
            errs.append(f"mode.{key}: missing")
    if errs:
        return None
    try:
        return MechanicalMode.from_hz(cfg["frequency_hz"], cfg["linewidth_hz"],
                                      cfg["mass_kg"], cfg["temperature_k"])
    except (ValueError, TypeError) as exc:
        errs.append(f"mode: {exc}")
        return None


def _build_probe(label: str, cfg: dict, mode: MechanicalMode | None,
                 errs: list[str]) -> ProbeState | None:
    path = f"probes.{label}"
    for key in ("n_c", "kappa_hz"):
        if key not in cfg:
            errs.append(f"{path}.{key}: missing")
            return None
    has_c = "cooperativity" in cfg
    has_g0 = "g0_hz" in cfg
    if has_c == has_g0:
        errs.append(f"{path}: give exactly one of cooperativity or g0_hz")
        return None
    kwargs = dict(eta_d=_get(cfg, "eta_d", 1.0), eta_fb=_get(cfg, "eta_fb", 1.0))
    try:
        kappa = 2 * math.pi * cfg["kappa_hz"]
        if has_g0:
            probe = ProbeState(cfg["n_c"], 2 * math.pi * cfg["g0_hz"], kappa,
                               **kwargs)
        else:
            if mode is None:
                errs.append(f"{path}: cooperativity needs a valid mode")
                return None
            probe = ProbeState.from_cooperativity(
                cfg["cooperativity"], mode.gamma_m, cfg["n_c"], kappa, **kwargs)
        db = _get(cfg, "squeezing_db", 0.0)
        if db:
            probe = probe.with_squeezing_db(db)
        else:
            probe = replace(probe, v_sq=model.VACUUM_VARIANCE,
                            quadrature="coherent")
        return probe
    except (ValueError, TypeError) as exc:
        errs.append(f"{path}: {exc}")
        return None


def _build_feedback(cfg: dict, errs: list[str]) -> FeedbackConfig:
    try:
        return FeedbackConfig(
            mode=_get(cfg, "mode", "off"),
            gain=_get(cfg, "gain", 0.0),
            bandpass_center=cfg.get("bandpass_center_hz"),
            bandpass_bandwidth=cfg.get("bandpass_bandwidth_hz"),
            delay=_get(cfg, "delay_s", 0.0),
            sign=_get(cfg, "sign", -1))
    except (ValueError, TypeError) as exc:
        errs.append(f"feedback: {exc}")
        return FeedbackConfig()


def load_scenario(path) -> Scenario:
    """Parse and validate a scenario file; raises ScenarioError on violations."""
    path = Path(path)
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ScenarioError(["scenario: top level must be a mapping"])
    errs: list[str] = []

    version = _get(raw, "schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        errs.append(f"schema_version: {version} unsupported "
                    f"(this build reads version {SCHEMA_VERSION})")
    name = _get(raw, "name", path.stem)

    mode = _build_mode(_get(raw, "mode", {}), errs)

    probes: dict[str, ProbeState] = {}
    probe_cfgs = _get(raw, "probes", {})
    if not isinstance(probe_cfgs, dict) or not probe_cfgs:
        errs.append("probes: need a mapping with one or two entries")
    elif len(probe_cfgs) > 2:
        errs.append("probes: at most two probes (reference and comparison)")
    else:
        for label, cfg in probe_cfgs.items():
            p = _build_probe(label, cfg or {}, mode, errs)
            if p is not None:
                probes[label] = p

    feedback = _build_feedback(_get(raw, "feedback", {}), errs)

    sim = dict(_get(raw, "sim", {}))
    sweep = dict(_get(raw, "sweep", {}))
    analysis = dict(_get(raw, "analysis", {}))

    outputs = _get(raw, "outputs", [])
    if not outputs:
        errs.append("outputs: must request at least one artifact")
    for out in outputs:
        if out not in OUTPUT_KINDS:
            errs.append(f"outputs: unknown kind '{out}' "
                        f"(choose from {OUTPUT_KINDS})")
        dep = _REQUIRES.get(out)
        if dep and dep not in outputs:
            errs.append(f"outputs: '{out}' requires '{dep}' in the chain")

    needs_sim = any(o in outputs for o in ("simulate", "psd", "lockin", "fit")) \
        or bool(sweep.get("simulate"))
    if needs_sim and mode is not None:
        if "sample_rate_hz" not in sim:
            errs.append("sim.sample_rate_hz: missing (required for simulation)")
        elif sim["sample_rate_hz"] < 10 * mode.frequency_hz:
            errs.append("sim.sample_rate_hz: must be at least 10x the "
                        "mechanical frequency")
        if "duration_s" not in sim:
            errs.append("sim.duration_s: missing (required for simulation)")
        elif sim["duration_s"] < 20 * 2 * math.pi / mode.gamma_m:
            errs.append("sim.duration_s: too short for stationary statistics "
                        "(need >= 20 relaxation times)")

    if "gains" in sweep and "squeezing_db" in sweep:
        errs.append("sweep: give gains or squeezing_db, not both")
    if "gains" in sweep:
        gains = sweep["gains"]
        if not gains or any(g < 0 for g in gains):
            errs.append("sweep.gains: need a non-empty list of gains >= 0")

    if errs:
        raise ScenarioError(errs)
    return Scenario(name=name, mode=mode, probes=probes, feedback=feedback,
                    sim=sim, sweep=sweep, analysis=analysis, outputs=outputs,
                    source_path=str(path))


def _sim_config(sc: Scenario, probe: ProbeState, seed: int,
                feedback: FeedbackConfig | None = None) -> SimConfig:
    return SimConfig(mode=sc.mode, probe=probe,
                     feedback=feedback if feedback is not None else sc.feedback,
                     sample_rate=sc.sim["sample_rate_hz"],
                     duration=sc.sim["duration_s"],
                     seed=seed,
                     burn_in=sc.sim.get("burn_in_s"),
                     integrator=_get(sc.sim, "integrator", "exact"))


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fit_in_loop(sc: Scenario, spectrum: dsp.Spectrum) -> specfit.FitResult:
    drive = thermal_force_psd(sc.mode) / sc.mode.mass_eff ** 2
    init = specfit.initial_guess(spectrum, sc.mode.gamma_m, drive)
    return specfit.fit_spectrum(spectrum, init, mass_eff=sc.mode.mass_eff)


def _write_predict(sc: Scenario, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("probe,v_sq,v_detected,cooperativity,noise_ratio_a,"
                 "optimal_gain,t_min_k,t_min_ratio,n_min\n")
        for label, probe in sc.probes.items():
            a = model.noise_calibration(sc.mode, probe)
            g_opt = model.optimal_gain(sc.mode, probe)
            t_min = model.minimum_temperature(sc.mode, probe)
            pred = model.predict_temperature(sc.mode, probe, g_opt)
            row = (label, probe.v_sq, model.detected_variance(probe),
                   model.cooperativity(probe, sc.mode), a, g_opt, t_min,
                   t_min / sc.mode.t_bath, pred.n_fb)
            fh.write(",".join(v if isinstance(v, str) else f"{v:.17g}"
                              for v in row) + "\n")


def _sweep_rows(sc: Scenario, probe: ProbeState, threads: int, seed: int):
    """Rows of (x, t_pred, t_sim, t_fit, fit_err) for one probe."""
    if "squeezing_db" in sc.sweep:
        rows = []
        for db in sc.sweep["squeezing_db"]:
            p = probe.with_squeezing_db(db)
            rows.append((db, model.minimum_temperature(sc.mode, p),
                         float("nan"), float("nan"), float("nan")))
        return "squeezing_db", rows

    gains = sorted(float(g) for g in sc.sweep.get("gains", []))
    if sc.sweep.get("include_optimal", False):
        g_opt = model.optimal_gain(sc.mode, probe)
        gains = sorted(set(gains) | {g_opt})
    do_sim = bool(sc.sweep.get("simulate", False))

    def one(args):
        i, g = args
        t_pred = model.predict_temperature(sc.mode, probe, g).t_fb
        if not do_sim:
            return g, t_pred, float("nan"), float("nan"), float("nan")
        fb = replace(sc.feedback, mode="ideal_viscous", gain=g) if g > 0 \
            else FeedbackConfig(mode="off")
        traj = run(_sim_config(sc, probe, seed + i, fb))
        t_sim = traj.temperature()
        t_fit = float("nan")
        err = float("nan")
        if g > 0:
            seg = int(_get(sc.analysis, "segment_length", 1 << 14))
            spec = dsp.welch_psd(traj.y, traj.sample_rate, seg,
                                 source="in_loop_y")
            fr = _fit_in_loop(sc, spec)
            if fr.converged:
                t_fit = specfit.effective_temperature(fr, sc.mode)
                da = fr.param_errors.get("gain", float("nan"))
                # first-order propagation of the gain error to temperature
                p = fr.params
                a = p.noise_ratio
                t0 = sc.mode.t_bath
                dt_dg = t0 * ((2 * p.gain / a) * (1 + p.gain)
                              - (1 + p.gain ** 2 / a)) / (1 + p.gain) ** 2
                err = abs(dt_dg) * da
        return g, t_pred, t_sim, t_fit, err

    work = list(enumerate(gains))
    if do_sim and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, work))
    else:
        rows = [one(w) for w in work]
    return "gain", rows


def _write_sweep(sc: Scenario, probe_label: str, probe: ProbeState,
                 path, threads: int, seed: int) -> None:
    xname, rows = _sweep_rows(sc, probe, threads, seed)
    t0 = sc.mode.t_bath
    with open(path, "w", newline="") as fh:
        fh.write(f"{xname},t_pred_k,t_pred_ratio,t_sim_k,t_fit_k,t_fit_err_k\n")
        for x, t_pred, t_sim, t_fit, err in rows:
            fh.write(f"{x:.17g},{t_pred:.17g},{t_pred / t0:.17g},"
                     f"{t_sim:.17g},{t_fit:.17g},{err:.17g}\n")


def _decimated_track(track: dsp.PhaseSpaceTrack, sample_rate: float):
    """Thin a track to ~20 samples per low-pass time constant for export."""
    step = max(int(sample_rate / (20 * track.lpf_bandwidth)), 1)
    return dsp.PhaseSpaceTrack(t=track.t[::step], x_quad=track.x_quad[::step],
                               y_quad=track.y_quad[::step],
                               lpf_bandwidth=track.lpf_bandwidth,
                               f_ref=track.f_ref)


def run_scenario(path, seed_override: int | None = None, out_dir=".",
                 threads: int = 1) -> list[Path]:
    """Execute a scenario file and write its artifacts plus a manifest.

    Returns the list of written artifact paths.  Identical inputs and seed
    give byte-identical artifacts; the manifest records their checksums.
    """
    sc = load_scenario(path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = seed_override if seed_override is not None \
        else int(_get(sc.sim, "seed", 0))
    artifacts: list[Path] = []

    def emit(name):
        p = out / name
        artifacts.append(p)
        return p

    if "predict" in sc.outputs:
        _write_predict(sc, emit(f"{sc.name}_predict.csv"))

    trajectories: dict[str, Trajectory] = {}
    spectra: dict[str, dsp.Spectrum] = {}

    if "simulate" in sc.outputs:
        summary = emit(f"{sc.name}_sim_summary.csv")
        with open(summary, "w", newline="") as fh:
            fh.write("probe,feedback_mode,gain,seed,samples,"
                     "position_variance_m2,temperature_k\n")
            for i, (label, probe) in enumerate(sc.probes.items()):
                traj = run(_sim_config(sc, probe, seed + i))
                trajectories[label] = traj
                fh.write(f"{label},{sc.feedback.mode},{sc.feedback.gain:.17g},"
                         f"{seed + i},{len(traj.x)},"
                         f"{traj.position_variance():.17g},"
                         f"{traj.temperature():.17g}\n")

    if "psd" in sc.outputs:
        seg = int(_get(sc.analysis, "segment_length", 1 << 14))
        for label, traj in trajectories.items():
            sp_y = dsp.welch_psd(traj.y, traj.sample_rate, seg,
                                 source="in_loop_y")
            sp_x = dsp.welch_psd(traj.x, traj.sample_rate, seg,
                                 source="true_x")
            spectra[label] = sp_y
            sp_y.to_csv(emit(f"{sc.name}_{label}_psd_record.csv"))
            sp_x.to_csv(emit(f"{sc.name}_{label}_psd_displacement.csv"))

    if "lockin" in sc.outputs:
        bw = float(_get(sc.analysis, "lockin_bandwidth_hz",
                        10 * sc.mode.linewidth_hz))
        for label, traj in trajectories.items():
            probe = sc.probes[label]
            coh = replace(probe, v_sq=model.VACUUM_VARIANCE,
                          quadrature="coherent")
            scale = dsp.shot_noise_reference(
                imprecision_floor(sc.mode, coh), traj.sample_rate,
                sc.mode.frequency_hz, bw, seed=0)
            track = dsp.lockin_demodulate(traj.y, traj.sample_rate,
                                          sc.mode.frequency_hz, bw,
                                          shot_noise_scale=scale)
            _decimated_track(track, traj.sample_rate).to_csv(
                emit(f"{sc.name}_{label}_lockin.csv"))
            hist = dsp.marginal_histogram(track, axis="X")
            with open(emit(f"{sc.name}_{label}_hist_x.csv"), "w",
                      newline="") as fh:
                fh.write(f"# mean={hist.mean:.17g}\n")
                fh.write(f"# variance={hist.variance:.17g}\n")
                fh.write("center,density\n")
                for c, d in zip(hist.centers, hist.density):
                    fh.write(f"{c:.17g},{d:.17g}\n")

    if "fit" in sc.outputs:
        for label, spec in spectra.items():
            fr = _fit_in_loop(sc, spec)
            with open(emit(f"{sc.name}_{label}_fit.txt"), "w") as fh:
                fh.write(fr.to_record())
                if fr.converged:
                    t = specfit.effective_temperature(fr, sc.mode)
                    fh.write(f"t_eff_closed_form_k={t}\n")

    if "sweep_table" in sc.outputs:
        for label, probe in sc.probes.items():
            _write_sweep(sc, label, probe,
                         emit(f"{sc.name}_{label}_sweep.csv"), threads, seed)

    manifest = out / f"{sc.name}_manifest.txt"
    with open(manifest, "w") as fh:
        fh.write(f"scenario={sc.name}\n")
        fh.write(f"schema_version={SCHEMA_VERSION}\n")
        fh.write(f"package_version={__version__}\n")
        fh.write(f"input_sha256={_sha256(sc.source_path)}\n")
        fh.write(f"seed={seed}\n")
        for p in artifacts:
            fh.write(f"artifact.{p.name}.sha256={_sha256(p)}\n")
    artifacts.append(manifest)
    return artifacts


def validate_report(path) -> tuple[bool, str]:
    """Schema and physics sanity report without running anything."""
    try:
        sc = load_scenario(path)
    except ScenarioError as exc:
        lines = [f"violation: {v}" for v in exc.violations]
        return False, "\n".join(lines)
    except (OSError, yaml.YAMLError) as exc:
        return False, f"violation: unreadable scenario: {exc}"
    lines = [f"ok: scenario '{sc.name}'",
             f"ok: mode Q = {sc.mode.quality_factor:.3g}",
             f"ok: {len(sc.probes)} probe(s): {', '.join(sc.probes)}",
             f"ok: outputs: {', '.join(sc.outputs)}"]
    if "sample_rate_hz" in sc.sim:
        lines.append(f"ok: sample rate = "
                     f"{sc.sim['sample_rate_hz'] / sc.mode.frequency_hz:.1f}x "
                     "the mechanical frequency")
    return True, "\n".join(lines)


def _cmd_run(args) -> int:
    paths = run_scenario(args.scenario, seed_override=args.seed,
                         out_dir=args.out_dir, threads=args.threads)
    for p in paths:
        print(p)
    return EXIT_OK


def _cmd_validate(args) -> int:
    ok, report = validate_report(args.scenario)
    print(report)
    return EXIT_OK if ok else EXIT_INVALID


def _with_outputs(args, outputs) -> int:
    """Run a scenario with the outputs list overridden for a subcommand."""
    sc = load_scenario(args.scenario)  # surface validation errors first
    missing = [o for o in outputs if o not in OUTPUT_KINDS]
    assert not missing
    # rewrite the outputs chain, honouring dependencies
    chain = []
    for o in outputs:
        dep = _REQUIRES.get(o)
        if dep and dep not in chain:
            chain.extend(c for c in (_REQUIRES.get(dep), dep) if c and c not in chain)
        if o not in chain:
            chain.append(o)
    import tempfile
    with open(args.scenario) as fh:
        raw = yaml.safe_load(fh)
    raw["outputs"] = chain
    raw.setdefault("name", sc.name)
    with tempfile.NamedTemporaryFile("w", suffix=".yaml", delete=False,
                                     dir=args.out_dir or ".") as tmp:
        yaml.safe_dump(raw, tmp)
        tmp_path = tmp.name
    try:
        paths = run_scenario(tmp_path, seed_override=args.seed,
                             out_dir=args.out_dir, threads=args.threads)
    finally:
        Path(tmp_path).unlink(missing_ok=True)
    for p in paths:
        print(p)
    return EXIT_OK


def _cmd_predict(args) -> int:
    sc = load_scenario(args.scenario)
    print("probe,noise_ratio_a,optimal_gain,t_min_k,t_min_ratio")
    for label, probe in sc.probes.items():
        a = model.noise_calibration(sc.mode, probe)
        g = model.optimal_gain(sc.mode, probe)
        t = model.minimum_temperature(sc.mode, probe)
        print(f"{label},{a:.6g},{g:.6g},{t:.6g},{t / sc.mode.t_bath:.6g}")
    return EXIT_OK


def _cmd_fit(args) -> int:
    sc = load_scenario(args.scenario)
    if args.spectrum:
        spec = dsp.Spectrum.from_csv(args.spectrum)
        fr = _fit_in_loop(sc, spec)
        sys.stdout.write(fr.to_record())
        if fr.converged:
            t = specfit.effective_temperature(fr, sc.mode)
            print(f"t_eff_closed_form_k={t}")
        return EXIT_OK if fr.converged else EXIT_ERROR
    return _with_outputs(args, ["simulate", "psd", "fit"])


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sqzcool",
        description="Feedback cooling of a mechanical oscillator with "
                    "squeezed-light readout: predictions, simulation, "
                    "spectral analysis and fitting.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("scenario", help="scenario YAML file")
    common.add_argument("--seed", type=int, default=None,
                        help="override the scenario seed")
    common.add_argument("--out-dir", default=".",
                        help="directory for artifacts (default: cwd)")
    common.add_argument("--threads", type=int, default=1,
                        help="parallel independent runs in sweeps")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common],
                   help="run all outputs requested by the scenario")
    sub.add_parser("validate", parents=[common],
                   help="schema and physics sanity check, no execution")
    sub.add_parser("predict", parents=[common],
                   help="closed-form cooling predictions to stdout")
    sub.add_parser("simulate", parents=[common],
                   help="time-domain simulation summary")
    sub.add_parser("analyze", parents=[common],
                   help="simulate, then spectra and lock-in artifacts")
    p_fit = sub.add_parser("fit", parents=[common],
                           help="squashing-model fit of an in-loop spectrum")
    p_fit.add_argument("--spectrum", default=None,
                       help="existing spectrum CSV to fit (default: simulate)")
    sub.add_parser("sweep", parents=[common],
                   help="gain or squeezing sweep table")

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "validate":
            return _cmd_validate(args)
        if args.command == "predict":
            return _cmd_predict(args)
        if args.command == "simulate":
            return _with_outputs(args, ["simulate"])
        if args.command == "analyze":
            return _with_outputs(args, ["simulate", "psd", "lockin"])
        if args.command == "fit":
            return _cmd_fit(args)
        if args.command == "sweep":
            return _with_outputs(args, ["sweep_table"])
        parser.error(f"unknown command {args.command}")
    except ScenarioError as exc:
        for v in exc.violations:
            print(f"violation: {v}", file=sys.stderr)
        return EXIT_INVALID
    except LoopUnstableError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNSTABLE
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
