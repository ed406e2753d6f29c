"""File formats: I-V tables, measurement sets, chains, summaries and manifests.

All writers go through ``atomic_write`` (temporary file, then rename) and
format floats with ``repr`` so reruns produce byte-identical files.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .bayes import Chain
from .inversion import MeasurementSet


def atomic_write(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _num(x) -> str:
    return repr(float(x))


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, data) -> Path:
    return atomic_write(path, json.dumps(_json_safe(data), indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_iv(path, gate_voltages, currents) -> Path:
    rows = [(_num(v), _num(i)) for v, i in zip(gate_voltages, currents)]
    return atomic_write(path, _csv_text(("v_gate", "current_A"), rows))


def read_iv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"v_gate", "current_A"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected columns v_gate, current_A")
        rows = [(float(r["v_gate"]), float(r["current_A"])) for r in reader]
    return [r[0] for r in rows], [r[1] for r in rows]


def sidecar(path) -> Path:
    return Path(path).with_suffix(".json")


def write_measurements(path, data: MeasurementSet) -> list:
    csv_path = write_iv(path, data.gate_voltages, data.currents)
    meta = {"sigma": data.sigma, "provenance": data.provenance}
    return [csv_path, write_json(sidecar(path), meta)]


def read_measurements(path) -> MeasurementSet:
    gates, currents = read_iv(path)
    meta_path = sidecar(path)
    if not meta_path.exists():
        raise ValueError(f"{path}: missing metadata sidecar {meta_path.name}")
    meta = read_json(meta_path)
    if "sigma" not in meta:
        raise ValueError(f"{meta_path}: missing sigma")
    provenance = meta.get("provenance") or {"kind": "external", "file": str(path)}
    return MeasurementSet(gates, currents, float(meta["sigma"]), provenance)


def write_chain(path, chain: Chain) -> list:
    header = ["step", *chain.names, "log_posterior", "stage", "accepted"]
    rows = []
    for k in range(len(chain.samples)):
        rows.append([str(k), *(_num(x) for x in chain.samples[k]), _num(chain.log_post[k]),
                     chain.stage[k], "1" if chain.accepted[k] else "0"])
    csv_path = atomic_write(path, _csv_text(header, rows))
    meta = {"seed": chain.seed, "names": list(chain.names), "n_steps": chain.n_steps,
            "acceptance_rate": chain.acceptance_rate, "stage_rates": chain.stage_rates()}
    if chain.settings is not None:
        s = chain.settings
        meta["settings"] = {"initial_std": list(s.initial_std), "sigma_dr": s.sigma_dr,
                            "adapt_start": s.adapt_start, "eps_reg": s.eps_reg,
                            "reg_scale": list(s.reg_scale) if s.reg_scale else None,
                            "delayed_rejection": s.delayed_rejection, "adapt": s.adapt,
                            "adapt_scale": s.adapt_scale}
    meta.update(chain.meta)
    return [csv_path, write_json(sidecar(path), meta)]


def read_chain(path) -> Chain:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0] != "step" or header[-3:] != ["log_posterior", "stage",
                                                                      "accepted"]:
            raise ValueError(f"{path}: not a chain file")
        names = tuple(header[1:-3])
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: chain has no records")
    d = len(names)
    samples = np.array([[float(x) for x in r[1:1 + d]] for r in rows]).reshape(len(rows), d)
    log_post = np.array([float(r[1 + d]) for r in rows])
    stage = [r[2 + d] for r in rows]
    accepted = np.array([r[3 + d] == "1" for r in rows])
    seed = None
    meta_path = sidecar(path)
    if meta_path.exists():
        seed = read_json(meta_path).get("seed")
    return Chain(names, samples, log_post, stage, accepted, seed)
