"""Small helpers shared by the experiment scripts."""
import argparse
import json
from pathlib import Path

from rince_lab.evaluation import write_report
from rince_lab.experiments import SEEDS


def parser(description: str, epochs: int) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--seeds", type=int, nargs="+", default=list(SEEDS))
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--out", type=Path, default=None, help="write a JSON summary here")
    return p


def dump(summary: dict, out: Path | None) -> None:
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        write_report(summary, out)
        print(f"wrote {out}")
    else:
        print(json.dumps(summary, indent=1, sort_keys=True, default=float))


def table(rows, columns) -> None:
    cells = [[f"{v:.4f}" if isinstance(v, float) else str(v) for v in r] for r in rows]
    widths = [max([len(c)] + [len(r[i]) for r in cells]) for i, c in enumerate(columns)]
    print("  ".join(c.ljust(w) for c, w in zip(columns, widths)))
    for r in cells:
        print("  ".join(v.ljust(w) for v, w in zip(r, widths)))
