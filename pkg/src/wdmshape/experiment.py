"""Experiment configuration files and resumable, deterministic sweeps."""

from __future__ import annotations

import configparser
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .analysis import RunReport
from .channels import LinkConfig, OpticalField, table_i_link, table_iv_link
from .dsp import FrameConfig, ImpairmentConfig
from .labeling import named_labeling, read_labeling
from .pipeline import SystemSetup, launch, make_central_tx, make_interferer, propagate_with_taps, receive
from .shaping import derive_seed

log = logging.getLogger(__name__)

WORKERS_ENV = "WDMSHAPE_WORKERS"
LINK_PRESETS = {"table_i": table_i_link, "table_iv": table_iv_link}
CHANNELS = ("fiber", "identity")


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass
class SweepGrid:
    powers_dbm: list
    spans: list

    def __post_init__(self):
        if not self.powers_dbm or not self.spans:
            raise ConfigError("sweep grids must be non-empty")
        if any(int(s) != s or s < 0 for s in self.spans):
            raise ConfigError(f"spans must be non-negative integers, got {self.spans}")
        self.powers_dbm = [float(p) for p in self.powers_dbm]
        self.spans = sorted(int(s) for s in self.spans)


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce a sweep; see :func:`load_config` for the file format."""

    link_preset: str = "table_iv"
    link: LinkConfig = field(default_factory=table_iv_link)
    frame: FrameConfig = field(default_factory=FrameConfig)
    impairments: ImpairmentConfig = field(default_factory=ImpairmentConfig)
    labeling: str = "1024qam-shaped"
    eta: float = 5.0
    decoder_iters: int = 10
    demap_iters: int = 5
    max_log: bool = False
    decode: bool = True
    channel: str = "fiber"
    grid: SweepGrid = field(default_factory=lambda: SweepGrid([-2.0], [1]))
    seed: int = 0
    output_dir: str = "out"

    def __post_init__(self):
        if self.link_preset not in LINK_PRESETS:
            raise ConfigError(f"unknown link preset {self.link_preset!r}; choose from {sorted(LINK_PRESETS)}")
        if self.channel not in CHANNELS:
            raise ConfigError(f"unknown channel {self.channel!r}; choose from {CHANNELS}")
        try:
            self.labeling_table()
        except (OSError, ValueError) as e:
            raise ConfigError(f"labeling {self.labeling!r}: {e}") from e

    def labeling_table(self):
        if Path(self.labeling).is_file():
            return read_labeling(self.labeling)
        return named_labeling(self.labeling)

    def setup(self) -> SystemSetup:
        return SystemSetup.build(self.labeling, self.eta, self.frame, self.decoder_iters, self.demap_iters,
                                 derive_seed(self.seed, "interleaver"), self.max_log, self.labeling_table())

    def digest(self) -> str:
        """Hash of everything that influences results (the output directory does not)."""
        d = self.to_sections()
        d["sweep"].pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    # --- text serialization --------------------------------------------------------

    def to_sections(self) -> dict:
        link = {k: _fmt(v) for k, v in self.link.to_dict().items()}
        link = {"preset": self.link_preset, **link}
        return {
            "link": link,
            "frame": {k: _fmt(v) for k, v in asdict(self.frame).items()},
            "impairments": {k: _fmt(v) for k, v in asdict(self.impairments).items()},
            "system": {"labeling": self.labeling, "eta": _fmt(self.eta), "decoder_iters": _fmt(self.decoder_iters),
                       "demap_iters": _fmt(self.demap_iters), "max_log": _fmt(self.max_log),
                       "decode": _fmt(self.decode)},
            "sweep": {"channel": self.channel, "powers_dbm": ", ".join(_fmt(p) for p in self.grid.powers_dbm),
                      "spans": ", ".join(str(s) for s in self.grid.spans), "seed": str(self.seed),
                      "output_dir": self.output_dir},
        }

    def dumps(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.read_dict(self.to_sections())
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(cls, section: dict, where: str):
    """Build dataclass ``cls`` from string values, typed by its defaults."""
    out = {}
    known = {f.name: f for f in fields(cls)}
    proto = cls()
    for k, v in section.items():
        if k not in known:
            raise ConfigError(f"[{where}] unknown key {k!r}")
        default = getattr(proto, k)
        try:
            if isinstance(default, bool):
                out[k] = _parse_bool(v)
            elif isinstance(default, int):
                out[k] = int(v)
            elif isinstance(default, float):
                out[k] = float(v)
            else:
                out[k] = v
        except ValueError as e:
            raise ConfigError(f"[{where}] {k} = {v!r}: {e}") from e
    return out


def _parse_bool(v: str) -> bool:
    t = v.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _floats(v: str, key: str) -> list:
    try:
        return [float(x) for x in v.replace(",", " ").split()]
    except ValueError as e:
        raise ConfigError(f"[sweep] {key}: {e}") from e


def loads_config(text: str) -> ExperimentConfig:
    """Parse the INI-style format written by :meth:`ExperimentConfig.dumps`.

    Sections ``[link]`` (``preset`` plus any :class:`LinkConfig` field),
    ``[frame]``, ``[impairments]``, ``[system]`` and ``[sweep]``; missing keys
    keep their defaults.
    """
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from e
    known = {"link", "frame", "impairments", "system", "sweep"}
    extra = set(cp.sections()) - known
    if extra:
        raise ConfigError(f"unknown sections {sorted(extra)}")
    sec = {s: dict(cp[s]) if cp.has_section(s) else {} for s in known}
    try:
        preset = sec["link"].pop("preset", "table_iv")
        if preset not in LINK_PRESETS:
            raise ConfigError(f"unknown link preset {preset!r}")
        link = LINK_PRESETS[preset](**_coerce(LinkConfig, sec["link"], "link"))
        frame = FrameConfig(**_coerce(FrameConfig, sec["frame"], "frame"))
        imp = ImpairmentConfig(**_coerce(ImpairmentConfig, sec["impairments"], "impairments"))
        sy = sec["system"]
        sw = sec["sweep"]
        unknown = set(sy) - {"labeling", "eta", "decoder_iters", "demap_iters", "max_log", "decode"}
        unknown |= set(sw) - {"channel", "powers_dbm", "spans", "seed", "output_dir"}
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}")
        grid = SweepGrid(_floats(sw.get("powers_dbm", "-2"), "powers_dbm"),
                         [int(s) for s in _floats(sw.get("spans", "1"), "spans")])
        return ExperimentConfig(
            link_preset=preset, link=link, frame=frame, impairments=imp,
            labeling=sy.get("labeling", "1024qam-shaped"), eta=float(sy.get("eta", 5.0)),
            decoder_iters=int(sy.get("decoder_iters", 10)), demap_iters=int(sy.get("demap_iters", 5)),
            max_log=_parse_bool(sy.get("max_log", "false")), decode=_parse_bool(sy.get("decode", "true")),
            channel=sw.get("channel", "fiber"), grid=grid, seed=int(sw.get("seed", 0)),
            output_dir=sw.get("output_dir", "out"))
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"{path}: {e}") from e
    return loads_config(text)


# --- sweep -------------------------------------------------------------------------

def pmf_id(probabilities) -> str:
    return hashlib.sha256(np.round(np.asarray(probabilities, float), 15).tobytes()).hexdigest()[:12]


def cell_key(cfg: ExperimentConfig, power_dbm: float, spans: int) -> str:
    h = hashlib.sha256(f"{cfg.digest()}|{power_dbm!r}|{spans}".encode()).hexdigest()
    return h[:16]


def _power_group(cfg: ExperimentConfig, power: float, spans: list) -> list:
    """Run every requested span count at one launch power (one propagation)."""
    setup = cfg.setup()
    f = cfg.frame
    link = cfg.link
    tx_seed = derive_seed(cfg.seed, "tx", power)
    tx = make_central_tx(setup, tx_seed)
    interferers = [make_interferer(setup.pmf, f, derive_seed(tx_seed, "interferer", c))
                   for c in range(link.n_channels - 1)]
    fld = launch(tx.frame.symbols, interferers, link, power)
    want = set(spans)
    out = {}

    def measure(n, field_):
        if n not in want:
            return
        rx_seed = derive_seed(cfg.seed, "rx", power, n)
        key = cell_key(cfg, power, n)
        try:
            fibre_km = n * link.span_length_km if cfg.channel == "fiber" else 0.0
            r = receive(field_, link, fibre_km, setup, tx, cfg.impairments, rx_seed,
                        decode=cfg.decode)
            d = r.to_dict()
            rep = RunReport(distance_km=n * link.span_length_km, power_dbm=power, format=setup.name,
                            eta=cfg.eta, snr_db=d["snr_db"], air=d["air"], pre_fec_ber=d["pre_fec_ber"],
                            post_fec_ber=d["post_fec_ber"], post_fec_errors=d["post_fec_errors"],
                            post_fec_bits=d["post_fec_bits"], seeds={"base": cfg.seed, "tx": tx_seed,
                                                                     "rx": rx_seed},
                            pmf_id=pmf_id(setup.pmf.probabilities),
                            extra={k: d[k] for k in ("input_entropy", "post_fec_errors_noniter",
                                                     "pre_fec_errors", "pre_fec_bits", "fo_estimate_hz",
                                                     "wiener_variance", "flags", "blocks", "mi_trajectory")})
            rec = {"key": key, "spans": n, "status": "ok", **rep.to_dict()}
        except Exception as e:  # recorded per cell, sweep continues
            log.warning("cell power=%s spans=%s failed: %s", power, n, e)
            rec = {"key": key, "spans": n, "power_dbm": power, "status": "failed",
                   "error": f"{type(e).__name__}: {e}"}
        out[n] = rec

    try:
        if 0 in want:
            measure(0, fld)
        if cfg.channel == "identity":
            for n in sorted(want - {0}):
                measure(n, OpticalField(fld.samples.copy(), fld.sample_rate, fld.center_frequency))
        elif max(want) > 0:
            propagate_with_taps(fld, link, max(want), derive_seed(cfg.seed, "ase", power), measure)
    except Exception as e:
        for n in spans:
            out.setdefault(n, {"key": cell_key(cfg, power, n), "spans": n, "power_dbm": power,
                               "status": "failed", "error": f"{type(e).__name__}: {e}"})
    return [out[n] for n in spans]


def _workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _dump(rec) -> str:
    return json.dumps(_jsonable(rec), sort_keys=True)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and not np.isfinite(x):
        return None
    return x


def read_runs(path) -> list:
    p = Path(path)
    if not p.exists():
        return []
    return [json.loads(line) for line in p.read_text().splitlines() if line.strip()]


def run_sweep(cfg: ExperimentConfig, output_dir=None, workers=None):
    """Execute every (power, spans) cell, appending JSON lines to ``runs.jsonl``.

    Cells already present with status ``ok`` are skipped (resume).  Results
    are written in grid order by this process only, so the file content does
    not depend on the worker count.  Yields the records of newly run cells.
    """
    out = Path(output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.dumps())
    runs = out / "runs.jsonl"
    done = {r["key"] for r in read_runs(runs) if r.get("status") == "ok"}
    jobs = []
    for p in cfg.grid.powers_dbm:
        todo = [s for s in cfg.grid.spans if cell_key(cfg, p, s) not in done]
        if todo:
            jobs.append((p, todo))
    n = workers or _workers()
    if n > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n) as ex:
            results = ex.map(_power_group, [cfg] * len(jobs), [j[0] for j in jobs], [j[1] for j in jobs])
            yield from _append(runs, results)
    else:
        yield from _append(runs, (_power_group(cfg, p, s) for p, s in jobs))


def _append(path: Path, groups):
    for recs in groups:
        with path.open("a") as fh:
            for r in recs:
                fh.write(_dump(r) + "\n")
        yield from recs


__all__ = ["ConfigError", "SweepGrid", "ExperimentConfig", "loads_config", "load_config", "cell_key",
           "run_sweep", "read_runs", "WORKERS_ENV"]
