"""Run directories: CSV frames, ledger, manifest and a gnuplot script."""
from __future__ import annotations

import csv
import json
import platform
from pathlib import Path

import numpy as np

from . import __version__
from .grid import Grid
from .pme import Trajectory

FMT = "%.17g"


class CorruptOutput(RuntimeError):
    pass


def versions() -> dict:
    import numba
    import scipy

    return {"heleshaw": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def frame_columns(traj: Trajectory, k: int) -> dict:
    cols = {"x": traj.grid.nodes, "rho": traj.rho[k], "p": traj.p[k]}
    for name in ("active", "sat", "c"):
        if name in traj.extra:
            cols[name] = np.asarray(traj.extra[name][k], dtype=float)
    return cols


def write_frame(path, cols: dict) -> None:
    names = list(cols)
    data = np.column_stack([np.asarray(cols[n], dtype=float) for n in names])
    np.savetxt(path, data, delimiter=",", header=",".join(names), comments="", fmt=FMT)


def read_frame(path) -> dict:
    path = Path(path)
    try:
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        raise CorruptOutput(f"{path}: {exc}") from None
    if data.shape[1] != len(header) or "x" not in header:
        raise CorruptOutput(f"{path}: column count does not match header")
    if not np.all(np.isfinite(data)):
        raise CorruptOutput(f"{path}: non-finite entries")
    return {name: data[:, j] for j, name in enumerate(header)}


def write_ledger(path, ledger: dict) -> list[str]:
    names = [k for k in ledger if k != "mass0"]
    if len({len(ledger[k]) for k in names}) > 1:
        raise ValueError("ledger columns differ in length")
    data = np.column_stack([np.asarray(ledger[k], dtype=float) for k in names])
    np.savetxt(path, data, delimiter=",", header=",".join(names), comments="", fmt=FMT)
    return names


def read_ledger(path) -> dict:
    cols = {}
    try:
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        raise CorruptOutput(f"{path}: {exc}") from None
    if data.shape[1] != len(header):
        raise CorruptOutput(f"{path}: column count does not match header")
    for j, name in enumerate(header):
        cols[name] = data[:, j]
    return cols


def write_trajectory(out: Path, traj: Trajectory) -> dict:
    """Frames under ``out/frames`` and the ledger; returns the manifest fragment."""
    out = Path(out)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    frames = []
    for k in range(len(traj)):
        name = f"frames/frame_{k:04d}.csv"
        write_frame(out / name, frame_columns(traj, k))
        frames.append({"file": name, "t": float(traj.times[k])})
    info = {"grid": traj.grid.header(), "frames": frames, "meta": _plain(traj.meta)}
    if any(k != "mass0" for k in traj.ledger):
        names = write_ledger(out / "ledger.csv", traj.ledger)
        info["ledger"] = {"file": "ledger.csv", "columns": names}
        if "mass0" in traj.ledger:
            info["ledger"]["mass0"] = float(traj.ledger["mass0"][0])
    return info


def read_trajectory(out: Path, info: dict) -> Trajectory:
    out = Path(out)
    grid = Grid.from_header(info["grid"])
    times, rho, p = [], [], []
    extra: dict = {}
    for fr in info["frames"]:
        cols = read_frame(out / fr["file"])
        if cols["x"].size != grid.size:
            raise CorruptOutput(f"{fr['file']}: expected {grid.size} rows")
        times.append(fr["t"])
        rho.append(cols["rho"])
        p.append(cols["p"])
        for name in ("active", "sat", "c"):
            if name in cols:
                extra.setdefault(name, []).append(cols[name] if name == "c" else cols[name] > 0.5)
    ledger = {}
    if "ledger" in info:
        ledger = read_ledger(out / info["ledger"]["file"])
        if "mass0" in info["ledger"]:
            ledger["mass0"] = np.array([info["ledger"]["mass0"]])
    return Trajectory(grid, np.array(times), np.array(rho), np.array(p),
                      extra={k: np.array(v) for k, v in extra.items()}, ledger=ledger,
                      meta=dict(info.get("meta", {})))


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_manifest(out: Path, manifest: dict) -> None:
    with open(Path(out) / "manifest.json", "w") as fh:
        json.dump(_plain(manifest), fh, indent=2, sort_keys=True)


def read_manifest(out: Path) -> dict:
    path = Path(out) / "manifest.json"
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptOutput(f"{path}: {exc}") from None


def write_gnuplot(out: Path, info: dict, title: str = "") -> Path:
    """Density (upper curve) and pressure (lower curve) for each frame, one page per frame."""
    path = Path(out) / "plot.gp"
    lines = [
        "set terminal pngcairo size 800,500",
        "set datafile separator ','",
        "set key top right",
        "set xlabel 'x'",
        "set yrange [-0.05:1.15]",
    ]
    for fr in info["frames"]:
        png = fr["file"].replace(".csv", ".png")
        lines += [
            f"set output '{png}'",
            f"set title '{title} t = {fr['t']:.4g}'",
            f"plot '{fr['file']}' using 1:2 with lines lw 2 title 'density', \\",
            f"     '{fr['file']}' using 1:3 with lines lw 2 title 'pressure'",
        ]
    path.write_text("\n".join(lines) + "\n")
    return path


def write_radial(out: Path, traj) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    traj.to_csv(out / "trajectory.csv")
    return {"file": "trajectory.csv", "t_star": traj.t_star,
            "recessions": [list(r) for r in traj.recessions]}


def read_radial(path) -> dict:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        t = np.array([float(r["t"]) for r in rows])
        R = np.array([float(r["R"]) for r in rows])
    except (OSError, KeyError, ValueError) as exc:
        raise CorruptOutput(f"{path}: {exc}") from None
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(R))):
        raise CorruptOutput(f"{path}: non-finite entries")
    return {"t": t, "R": R, "branch": [r["branch"] for r in rows]}
