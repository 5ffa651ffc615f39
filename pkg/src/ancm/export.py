"""CSV logs and a vector-graphics plot of the state norm against the error envelope."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .sim import TrajectoryLog  # noqa: E402


def write_log_csv(log: TrajectoryLog, path) -> None:
    cols, data = log.columns()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in data:
            w.writerow([f"{v:.17g}" for v in row])


def read_log_csv(path, n: int | None = None) -> TrajectoryLog:
    """Minimal reader: time, state and the scalar columns written by ``write_log_csv``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    head = rows[0]
    data = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(len(rows) - 1, len(head))
    col = {h: i for i, h in enumerate(head)}

    def block(prefix):
        idx = [i for h, i in col.items() if h.startswith(prefix) and h[len(prefix):].isdigit()]
        return data[:, idx] if idx else None

    pick = lambda k: data[:, col[k]] if k in col else None
    return TrajectoryLog(
        t=data[:, 0], x=block("x"), name=Path(path).stem, x_d=block("xd"), u=block("u"),
        theta_hat=block("th"), e_norm=pick("e_norm"), V=pick("V"), bound=pick("bound"),
        cert_pass=bool(data[0, col["cert_pass"]]) if "cert_pass" in col and len(data) else False,
    )


def plot_logs(logs: dict, path, title: str = "") -> None:
    """One line per controller (gid ``curve-<name>``) plus the bound envelope (gid ``envelope``).

    The envelope is drawn from the first certified log.  Output is
    byte-stable: no date metadata and a fixed id salt.
    """
    with plt.rc_context({"svg.hashsalt": "ancm", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6.4, 4.0))
        for name in sorted(logs):
            log = logs[name]
            line, = ax.plot(log.t, np.linalg.norm(log.x, axis=1), label=name, lw=1.2)
            line.set_gid(f"curve-{name}")
        env = next((logs[k] for k in sorted(logs) if logs[k].bound is not None and logs[k].cert_pass), None)
        if env is not None:
            line, = ax.plot(env.t, env.bound, "k--", lw=1.0, label=f"bound ({env.name})")
            line.set_gid("envelope")
        ax.set_xlabel("t [s]")
        ax.set_ylabel("||x(t)||")
        ax.set_yscale("log")
        if title:
            ax.set_title(title)
        ax.legend(loc="best", fontsize=8)
        fig.tight_layout()
        fig.savefig(path, format=Path(path).suffix.lstrip(".") or "svg", metadata={"Date": None})
        plt.close(fig)


def export(logs: dict, out_dir, scenario: str) -> list:
    """One CSV per controller and one SVG per scenario; returns the written paths."""
    if not logs:
        raise ValueError("nothing to export")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name in sorted(logs):
        p = out / f"{scenario}_{name}.csv"
        write_log_csv(logs[name], p)
        written.append(p)
    p = out / f"{scenario}.svg"
    plot_logs(logs, p, title=scenario)
    written.append(p)
    return written
