"""Command line entry point.

Exit codes: 0 success, 2 configuration error, 3 runtime/simulation error,
4 insufficient key material.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from . import __version__
from .model import (
    CALIBRATED_DARK_COUNT_PROB,
    CALIBRATED_MISALIGNMENT,
    PUBLISHED_TARGETS,
    PRESET_LENGTHS_KM,
    IntensitySettings,
    LinkParams,
    preset,
)
from .network import NetworkConfig, KeyStore, Schedule, passive_network_comparator, run_network
from .protocol import InsufficientKeyError, OneTimePad, otp_decrypt, otp_encrypt, write_key_file
from .quantum_sim import EveModel, tune_pns_block_prob
from .security import (
    SWEEP_COLUMNS,
    Variant,
    analytic_estimate,
    calibrate_to_paper,
    operating_settings,
    sweep_row,
)
from .session import run_session, session_report

log = logging.getLogger("starqkd")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_NO_KEY = 0, 2, 3, 4

LINK_FIELDS = {f.name for f in dataclasses.fields(LinkParams)}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


def flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def load_config(path: Optional[str]) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    return flatten(data)


@dataclass
class RunConfig:
    mode: str
    seed: int
    link: LinkParams
    settings: Optional[IntensitySettings]
    eve: EveModel
    n_pulses: int = 1_000_000
    duration_s: float = 60.0
    output: Optional[Path] = None
    variant: Variant = Variant.STANDARD
    analytic: bool = False
    overwrite: bool = False
    raw: dict = field(default_factory=dict)


def build_link(cfg: dict, name: Optional[str] = None) -> LinkParams:
    overrides = {k[len("link."):]: v for k, v in cfg.items()
                 if k.startswith("link.") and k[len("link."):] in LINK_FIELDS}
    unknown = [k for k in cfg if k.startswith("link.") and k[5:] not in LINK_FIELDS | {"preset"}]
    if unknown:
        raise ConfigError(f"unknown link keys: {unknown}")
    name = name or cfg.get("link.preset")
    try:
        if name:
            overrides.pop("name", None)
            return preset(str(name), **overrides)
        return LinkParams(**overrides)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def build_settings(cfg: dict, link: LinkParams) -> IntensitySettings:
    props = tuple(cfg.get("intensities.proportions", (14, 1, 1)))
    try:
        if "intensities.mu" in cfg:
            return IntensitySettings(float(cfg["intensities.mu"]),
                                     float(cfg.get("intensities.nu", 0.1)), props)
        return operating_settings(link, float(cfg.get("intensities.nu", 0.1)), props)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_eve(cfg: dict, link: LinkParams, settings: IntensitySettings) -> EveModel:
    kind = str(cfg.get("eve.kind", "none")).lower()
    lossless = bool(cfg.get("eve.forward_lossless", True))
    if kind == "none":
        return EveModel()
    if kind != "pns":
        raise ConfigError(f"unknown eve.kind {kind!r}")
    block = cfg.get("eve.block_single_prob", "auto")
    if block == "auto":
        return tune_pns_block_prob(link, settings, lossless)
    try:
        return EveModel("pns", float(block), lossless, float(cfg.get("eve.block_multi_prob", 0.0)))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def provenance(link: LinkParams) -> list[dict]:
    """Where each physical default comes from."""
    published = {"attenuation_db_per_km", "extra_loss_db", "detector_efficiency",
                 "pulse_rate_hz", "gate_ns"}
    calibrated = {"dark_count_prob": CALIBRATED_DARK_COUNT_PROB,
                  "misalignment_error": CALIBRATED_MISALIGNMENT}
    default = LinkParams()
    rows = []
    for f in dataclasses.fields(LinkParams):
        if f.name == "name":
            continue
        value = getattr(link, f.name)
        if value != getattr(default, f.name) and f.name != "length_km":
            source = "user override"
        elif f.name == "length_km":
            source = "published link length" if link.name in PRESET_LENGTHS_KM else "user"
        elif f.name in published:
            source = "published"
        elif f.name in calibrated:
            source = "calibrated (not published)"
        else:
            source = "assumed default"
        rows.append(dict(parameter=f.name, value=value, source=source))
    rows.append(dict(parameter="proportions", value="14:1:1", source="published"))
    rows.append(dict(parameter="ec_efficiency_f", value=1.22, source="assumed default"))
    rows.append(dict(parameter="epsilon0", value=0.5, source="published (approximate)"))
    return rows


# ---------------------------------------------------------------------------
# output helpers


def _prepare_out(path: Optional[Path], overwrite: bool, is_dir: bool) -> Optional[Path]:
    if path is None:
        return None
    if path.exists() and not overwrite and (not is_dir or any(path.iterdir())):
        raise ConfigError(f"{path} exists; pass --force to overwrite")
    if is_dir:
        path.mkdir(parents=True, exist_ok=True)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, Path):
        return str(o)
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    return str(o)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default)


def _human(report: dict, keys: list[str]) -> str:
    lines = []
    for k in keys:
        v = report.get(k)
        if isinstance(v, float):
            v = f"{v:.6g}"
        lines.append(f"{k:>22}: {v}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# commands


def cmd_session(rc: RunConfig) -> int:
    link, settings = rc.link, rc.settings
    if rc.analytic:
        est = analytic_estimate(link, settings, rc.variant)
        other = Variant.AS_PRINTED if rc.variant is Variant.STANDARD else Variant.STANDARD
        alt = analytic_estimate(link, settings, other)
        report = dict(mode="analytic", link=link.name, length_km=link.length_km, seed=rc.seed,
                      **est.inputs,
                      Q1L=est.q1_lower, e1U=est.e1_upper,
                      e1U_standard=est.e1_upper_standard, e1U_as_printed=alt.e1_upper_as_printed,
                      R_per_pulse=est.rate_per_pulse, R_bps=est.rate_bps,
                      variant=rc.variant.value)
        keys = ["link", "mu", "nu", "Q_mu", "E_mu", "Q1L", "e1U_standard", "e1U_as_printed",
                "R_per_pulse", "R_bps"]
        final = None
    else:
        res = run_session(link, settings, rc.n_pulses, rc.seed, rc.eve, rc.variant)
        report = session_report(res)
        report["mode"] = "monte_carlo"
        final = res.final_key
        keys = ["link", "n_pulses", "mu", "nu", "eve", "Y0", "Q1L", "e1U_standard",
                "e1U_as_printed", "R_per_pulse", "R_bps", "final_key_bits", "Q1_true",
                "e1_true", "bound_validity", "decoy_residual_z", "pns_suspected"]
        s = res.stats
        report["QBER_signal"] = s.signal.qber
        keys.insert(5, "QBER_signal")
    report["config"] = rc.raw
    report["provenance"] = provenance(link)
    print(_human(report, keys))
    for w in report.get("warnings", []):
        log.warning(w)
    if report.get("R_per_pulse", 0) <= 0:
        log.warning("no secure key at these settings")
    if rc.output:
        out = _prepare_out(rc.output, rc.overwrite, True)
        (out / "report.json").write_text(_dump(report))
        (out / "report.txt").write_text(_human(report, keys) + "\n")
        if final is not None:
            write_key_file(out / "final_key.bin", final,
                           dict(session_id=f"{link.name}-{rc.seed}", link=link.name,
                                seed=rc.seed, R_per_pulse=report["R_per_pulse"],
                                R_bps=report["R_bps"]), overwrite=rc.overwrite)
    return EXIT_OK


def _sweep_links(rc: RunConfig, axis: str, values: np.ndarray):
    for v in values:
        if axis == "length":
            link = rc.link.with_(length_km=float(v))
            st = rc.settings if "intensities.mu" in rc.raw else operating_settings(link, rc.settings.nu, rc.settings.proportions)
        elif axis == "mu":
            link = rc.link
            st = IntensitySettings(float(v), rc.settings.nu, rc.settings.proportions)
        elif axis == "y0":
            d = 1.0 - math.sqrt(1.0 - float(v))
            link = rc.link.with_(dark_count_prob=d)
            st = rc.settings
        else:
            raise ConfigError(f"unknown sweep axis {axis!r}")
        yield link, st


def cmd_sweep(rc: RunConfig, axis: str, values: np.ndarray) -> list[dict]:
    if len(values) == 0:
        raise ConfigError("empty sweep grid")
    rows = []
    for i, (link, st) in enumerate(_sweep_links(rc, axis, values)):
        if rc.analytic:
            est = analytic_estimate(link, st, rc.variant)
        else:
            est = run_session(link, st, rc.n_pulses, rc.seed + i, rc.eve, rc.variant).estimate
        rows.append(sweep_row(link, st, est))
    if rc.output:
        out = _prepare_out(rc.output, rc.overwrite, False)
        with out.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
            w.writeheader()
            w.writerows(rows)
    else:
        w = csv.DictWriter(sys.stdout, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    return rows


def _network_config(rc: RunConfig) -> NetworkConfig:
    cfg = rc.raw
    names = cfg.get("network.clients", list(PRESET_LENGTHS_KM))
    clients = [(str(n), build_link(cfg, str(n))) for n in names]
    kind = str(cfg.get("network.schedule", "round_robin"))
    weights = cfg.get("network.weights")
    try:
        return NetworkConfig(
            clients=clients,
            server_name=str(cfg.get("network.server_name", "server")),
            switch_fanout=int(cfg.get("network.switch_fanout", max(3, len(clients)))),
            alignment_time_s=float(cfg.get("network.alignment_time_s", 0.5)),
            slot_duration_s=float(cfg.get("network.slot_duration_s", 2.0)),
            schedule=Schedule(kind, tuple(weights) if weights else None),
            variant=rc.variant,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_network(rc: RunConfig) -> int:
    nc = _network_config(rc)
    mode = "analytic" if rc.analytic else "monte_carlo"
    run = run_network(nc, rc.duration_s, rc.seed, mode)
    n = len(nc.clients)
    passive = passive_network_comparator(nc, [1.0 / n] * n, rc.duration_s)
    summary = dict(
        seed=rc.seed, mode=mode, total_time_s=rc.duration_s,
        alignment_time_s=nc.alignment_time_s, slot_duration_s=nc.slot_duration_s,
        schedule=nc.schedule.kind,
        clients={name: dict(key_bits=y.key_bits, bps=y.bps(rc.duration_s), slots=y.slots,
                            productive_s=y.productive_s,
                            passive_bits=passive[name].key_bits,
                            passive_bps=passive[name].bps(rc.duration_s))
                 for name, y in run.yields.items()},
        config=rc.raw,
    )
    for name, c in summary["clients"].items():
        print(f"{name:>12}: {c['bps']:10.1f} bit/s active   {c['passive_bps']:10.1f} bit/s passive")
    print(f"alignment overhead per switch: {nc.alignment_time_s} s (default, not published)")
    if rc.output:
        out = _prepare_out(rc.output, rc.overwrite, True)
        run.write_events(out / "events.jsonl", overwrite=rc.overwrite)
        (out / "summary.json").write_text(_dump(summary))
        # both ends hold identical reconciled keys
        run.buffer.save(out / "keystore" / "server", overwrite=rc.overwrite)
        run.buffer.save(out / "keystore" / "clients", overwrite=rc.overwrite)
    return EXIT_OK


def cmd_calibrate(rc: RunConfig, method: str) -> int:
    res = calibrate_to_paper(method=method)
    report = dict(seed=rc.seed, method=res.method, dark_count_prob=res.dark_count_prob,
                  misalignment_error=res.misalignment_error, converged=res.converged,
                  underdetermined=res.underdetermined, objective=res.objective,
                  max_qber_residual=res.max_qber_residual, residuals=res.residuals,
                  targets=PUBLISHED_TARGETS)
    print(f"dark_count_prob = {res.dark_count_prob:.4g}, misalignment_error = {res.misalignment_error:.4g}")
    for name, r in res.residuals.items():
        print(f"{name:>12}: QBER {r['qber_model']:.4f} (target {r['qber_target']:.4f}), "
              f"rate {r['rate_model']:.0f} b/s (target {r['rate_target']:.0f})")
    if rc.output:
        out = _prepare_out(rc.output, rc.overwrite, False)
        out.write_text(_dump(report))
    return EXIT_OK if res.converged else EXIT_RUNTIME


def cmd_otp(rc: RunConfig, encrypt: bool, keystore: Path, client: str, src: Path) -> int:
    data = src.read_bytes()
    store = KeyStore(keystore)
    out = _prepare_out(rc.output, rc.overwrite, False)
    if out is None:
        raise ConfigError("--out is required for otp commands")
    with store.reserve(client, 8 * len(data)) as bits:
        pad = OneTimePad(bits)
        result = otp_encrypt(data, pad) if encrypt else otp_decrypt(data, pad)
        out.write_bytes(result)
    print(f"{'encrypted' if encrypt else 'decrypted'} {len(data)} bytes, consumed {8 * len(data)} key bits; "
          f"{store.available(client)} bits left for {client}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="starqkd", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file with flat dotted keys (link.length_km: 25)")
    common.add_argument("--seed", type=int, required=True)
    common.add_argument("--out", type=Path)
    common.add_argument("--variant", choices=[v.value for v in Variant], default=None)
    common.add_argument("--analytic", action="store_true", help="infinite-statistics model instead of Monte Carlo")
    common.add_argument("--force", action="store_true", help="allow overwriting outputs")
    common.add_argument("--link", help="link preset: " + ", ".join(PRESET_LENGTHS_KM))
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("session", parents=[common], help="one exchange + post-processing")
    s.add_argument("--n-pulses", type=int)
    s.add_argument("--eve", choices=["none", "pns"])

    w = sub.add_parser("sweep", parents=[common], help="parameter sweep to CSV")
    w.add_argument("--axis", choices=["length", "mu", "y0"])
    w.add_argument("--start", type=float)
    w.add_argument("--stop", type=float)
    w.add_argument("--num", type=int)
    w.add_argument("--n-pulses", type=int)

    n = sub.add_parser("network", parents=[common], help="star network simulation")
    n.add_argument("--time", type=float, dest="duration")

    c = sub.add_parser("calibrate", parents=[common], help="fit dark counts and misalignment")
    c.add_argument("--method", choices=["minimax", "least_squares"], default="minimax")

    for name in ("otp-encrypt", "otp-decrypt"):
        o = sub.add_parser(name, parents=[common], help=f"{name.split('-')[1]} a file with stored key")
        o.add_argument("--keystore", type=Path, required=True)
        o.add_argument("--client", required=True)
        o.add_argument("--in", dest="src", type=Path, required=True)
    return p


def _run_config(args, cfg: dict) -> RunConfig:
    if args.link:
        cfg["link.preset"] = args.link
    if getattr(args, "n_pulses", None):
        cfg["session.n_pulses"] = args.n_pulses
    if getattr(args, "eve", None):
        cfg["eve.kind"] = args.eve
    if getattr(args, "duration", None):
        cfg["network.total_time_s"] = args.duration
    if args.variant:
        cfg["estimator.variant"] = args.variant
    cfg.setdefault("link.preset", "keplero" if "link.length_km" not in cfg else None)
    link = build_link(cfg)
    settings = build_settings(cfg, link)
    try:
        variant = Variant(cfg.get("estimator.variant", "standard"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cfg["seed"] = args.seed
    return RunConfig(
        mode=args.command, seed=args.seed, link=link, settings=settings,
        eve=build_eve(cfg, link, settings),
        n_pulses=int(cfg.get("session.n_pulses", 1_000_000)),
        duration_s=float(cfg.get("network.total_time_s", 60.0)),
        output=args.out, variant=variant,
        analytic=bool(args.analytic or cfg.get("analytic", False)),
        overwrite=args.force, raw={k: v for k, v in cfg.items() if v is not None},
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        rc = _run_config(args, cfg)
        if args.command == "session":
            return cmd_session(rc)
        if args.command == "sweep":
            axis = args.axis or cfg.get("sweep.axis", "length")
            start = args.start if args.start is not None else cfg.get("sweep.start", 5.0)
            stop = args.stop if args.stop is not None else cfg.get("sweep.stop", 40.0)
            num = args.num if args.num is not None else cfg.get("sweep.num", 8)
            cmd_sweep(rc, axis, np.linspace(float(start), float(stop), int(num)))
            return EXIT_OK
        if args.command == "network":
            return cmd_network(rc)
        if args.command == "calibrate":
            return cmd_calibrate(rc, args.method)
        return cmd_otp(rc, args.command == "otp-encrypt", args.keystore, args.client, args.src)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except InsufficientKeyError as exc:
        log.error("%s", exc)
        return EXIT_NO_KEY
    except Exception as exc:  # noqa: BLE001 - every other failure maps to one exit code
        log.error("%s: %s", type(exc).__name__, exc)
        if args.verbose:
            raise
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
